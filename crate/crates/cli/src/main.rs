use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use icosr::checkpoint::{load_checkpoint, save_checkpoint};
use icosr::data::Dataset;
use icosr::icosphere::build_grid;
use icosr::imageio::{read_png, write_png};
use icosr::layout::{activation_memory_report, build_layout, sample_erp_bilinear};
use icosr::metrics::{psnr, ssim, ws_psnr, ws_ssim};
use icosr::pipeline::{forward_sr, train_cached, ModelConfig, ModelMeta, SrModel, TrainConfig, TrainingCache};
use icosr::projection::{pixel_to_sphere, ProjectionSpec};
use icosr::Error;
use ndarray::Array3;

/// Spherical image conversion and arbitrary-projection super-resolution.
#[derive(Parser, Debug)]
#[command(name = "icosr", version, args_override_self = true)]
struct Cli {
    /// File of `flag=value` lines (`#` comments) read before the command line; flags override it
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print grid counts and panel layout dimensions
    Info {
        /// Subdivision level
        #[arg(long)]
        level: u32,
    },
    /// Reproject an equirectangular image by bilinear sampling (no model)
    Convert {
        #[arg(long = "in", value_name = "PNG")]
        input: PathBuf,
        #[arg(long, value_name = "PNG")]
        out: PathBuf,
        #[command(flatten)]
        proj: ProjArgs,
    },
    /// Super-resolve an equirectangular image into any projection
    Sr {
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        #[arg(long = "in", value_name = "PNG")]
        input: PathBuf,
        #[arg(long, value_name = "PNG")]
        out: PathBuf,
        /// Default output size is this multiple of the input height
        #[arg(long, default_value_t = 4)]
        scale: usize,
        #[command(flatten)]
        proj: ProjArgs,
    },
    /// Train a model on a directory of paired PNGs listed in manifest.txt
    Train(TrainArgs),
    /// Compare two images
    Metrics {
        #[arg(long = "ref", value_name = "PNG")]
        reference: PathBuf,
        #[arg(long, value_name = "PNG")]
        test: PathBuf,
        #[arg(long, value_enum, default_value_t = Metric::WsPsnr)]
        metric: Metric,
    },
    /// Activation bytes of call-table and panel-layout convolution per level
    BenchMemory {
        /// Inclusive range `a..b`
        #[arg(long, default_value = "4..7", value_parser = parse_levels)]
        levels: (u32, u32),
        #[arg(long, default_value_t = 16)]
        layers: u64,
        #[arg(long, default_value_t = 32)]
        channels: u64,
    },
}

#[derive(Args, Debug)]
struct ProjArgs {
    #[arg(long, value_enum, default_value_t = Proj::Erp)]
    proj: Proj,
    /// Horizontal field of view in degrees
    #[arg(long, default_value_t = 90.0)]
    fov_h: f64,
    /// Vertical field of view in degrees
    #[arg(long, default_value_t = 90.0)]
    fov_v: f64,
    /// Degrees
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    yaw: f64,
    /// Degrees, positive looks up
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pitch: f64,
    /// Degrees
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    roll: f64,
    /// Output width in pixels
    #[arg(long)]
    width: Option<usize>,
    /// Output height in pixels
    #[arg(long)]
    height: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Must equal the HR/LR ratio of the dataset
    #[arg(long)]
    scale: usize,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint to write
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Loss trace CSV (default: checkpoint path with .csv appended)
    #[arg(long, value_name = "FILE")]
    trace: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Profile::Toy)]
    profile: Profile,
    /// Query pixels per step
    #[arg(long, default_value_t = 2048)]
    queries: usize,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Evaluate training WS-PSNR every this many epochs (0: last epoch only)
    #[arg(long, default_value_t = 0)]
    eval_every: usize,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Proj {
    Erp,
    Perspective,
    Fisheye,
    Cubemap,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Metric {
    WsPsnr,
    WsSsim,
    Psnr,
    Ssim,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Profile {
    Micro,
    Toy,
    Paper,
}

fn parse_levels(s: &str) -> Result<(u32, u32), String> {
    let (a, b) = s.split_once("..").ok_or("expected a..b")?;
    let a: u32 = a.trim().parse().map_err(|_| format!("bad level '{a}'"))?;
    let b: u32 = b.trim().parse().map_err(|_| format!("bad level '{b}'"))?;
    if a > b {
        return Err(format!("empty range {s}"));
    }
    Ok((a, b))
}

enum Failure {
    Usage(String),
    Io(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Io(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Io(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let m = e.to_string();
        match e {
            Error::Io(_) | Error::Image(_) | Error::Checkpoint(_) => Failure::Io(m),
            Error::LevelOutOfRange(_) | Error::InvalidInput(_) | Error::Shape(_) => Failure::Usage(m),
            _ => Failure::Numeric(m),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

fn read(path: &Path) -> Result<Array3<f32>, Failure> {
    read_png(path).map_err(|e| io_err(path, e))
}

fn write(path: &Path, img: &Array3<f32>) -> Result<(), Failure> {
    write_png(path, img.view()).map_err(|e| io_err(path, e))
}

impl ProjArgs {
    fn spec(&self, default_h: usize, default_w: usize) -> Result<ProjectionSpec, Failure> {
        let square = !matches!(self.proj, Proj::Erp);
        let h = self.height.unwrap_or(default_h);
        let w = self.width.unwrap_or(if square { default_h } else { default_w });
        let (m, n) = (self.fov_h.to_radians(), self.fov_v.to_radians());
        let spec = match self.proj {
            Proj::Erp => ProjectionSpec::erp(h, w),
            Proj::Perspective => ProjectionSpec::perspective(h, w, m, n),
            Proj::Fisheye => ProjectionSpec::fisheye(h, w, m, n),
            Proj::Cubemap => {
                let mut s = ProjectionSpec::erp(h, w);
                s.set("kind", "cubemap")?;
                s.fov_h = std::f64::consts::FRAC_PI_2;
                s.fov_v = std::f64::consts::FRAC_PI_2;
                s
            }
        };
        let spec = spec.oriented(self.yaw.to_radians(), self.pitch.to_radians(), self.roll.to_radians());
        spec.validate()?;
        Ok(spec)
    }
}

/// Bilinear lookup of every output pixel's direction; pixels that see no
/// direction stay black.
fn reproject(erp: &Array3<f32>, spec: &ProjectionSpec) -> Result<Array3<f32>, Failure> {
    let (h, w, c) = erp.dim();
    if w != 2 * h {
        return Err(Failure::Usage(format!("input must be equirectangular (W = 2H), got {h}×{w}")));
    }
    let mut out = Array3::zeros((spec.height, spec.width, c));
    let mut buf = vec![0.0; c];
    for y in 0..spec.height {
        for x in 0..spec.width {
            match pixel_to_sphere(spec, x as f64, y as f64) {
                Ok(p) => {
                    sample_erp_bilinear(erp.view(), p.theta(), p.phi(), &mut buf);
                    for k in 0..c {
                        out[[y, x, k]] = buf[k] as f32;
                    }
                }
                Err(Error::Outside) => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Info { level } => {
            let g = build_grid(level)?;
            let l = build_layout(&g);
            let (f, v, e) = (g.num_faces(), g.num_vertices(), g.num_edges());
            println!("level={level} faces={f} vertices={v} edges={e} euler={}", v as i64 - e as i64 + f as i64);
            println!(
                "panels=5 panel={}x{} padded={}x{}",
                l.panel_height(),
                l.panel_width(),
                l.padded_height(),
                l.padded_width()
            );
        }
        Command::Convert { input, out, proj } => {
            let erp = read(&input)?;
            let (h, w, _) = erp.dim();
            let spec = proj.spec(h, w)?;
            write(&out, &reproject(&erp, &spec)?)?;
        }
        Command::Sr { ckpt, input, out, scale, proj } => {
            if scale == 0 {
                return Err(Failure::Usage("--scale must be positive".into()));
            }
            let model: SrModel<f32> = load_checkpoint(&ckpt).map_err(|e| io_err(&ckpt, e))?;
            let lr = read(&input)?;
            let (h, w, _) = lr.dim();
            let spec = proj.spec(h * scale, w * scale)?;
            let img = forward_sr(&model, lr.view(), &spec)?;
            write(&out, &img)?;
        }
        Command::Train(a) => train(a)?,
        Command::Metrics { reference, test, metric } => {
            let a = read(&reference)?;
            let b = read(&test)?;
            let (name, v) = match metric {
                Metric::WsPsnr => ("ws-psnr", ws_psnr(a.view(), b.view())?),
                Metric::WsSsim => ("ws-ssim", ws_ssim(a.view(), b.view())?),
                Metric::Psnr => ("psnr", psnr(a.view(), b.view())?),
                Metric::Ssim => ("ssim", ssim(a.view(), b.view())?),
            };
            println!("{name}={v:.6}");
        }
        Command::BenchMemory { levels, layers, channels } => {
            println!("level call_table_bytes layout_bytes ratio");
            for level in levels.0..=levels.1 {
                let r = activation_memory_report(level, layers, channels)?;
                println!("{level} {} {} {:.4}", r.call_table_bytes, r.layout_bytes, r.ratio());
            }
        }
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let data = Dataset::load(&a.data).map_err(|e| match e {
        Error::Io(_) | Error::Image(_) => io_err(&a.data, e),
        e => e.into(),
    })?;
    if data.scale != a.scale {
        return Err(Failure::Usage(format!("dataset is ×{} but --scale is {}", data.scale, a.scale)));
    }
    let config = match a.profile {
        Profile::Micro => ModelConfig::micro(),
        Profile::Toy => ModelConfig::toy(),
        Profile::Paper => ModelConfig::paper(),
    };
    let mut cfg = match a.profile {
        Profile::Paper => TrainConfig { scales: vec![2, 4, a.scale], seed: a.seed, ..TrainConfig::paper() },
        _ => TrainConfig::toy(a.epochs, a.scale, a.seed),
    };
    cfg.epochs = a.epochs;
    cfg.queries = a.queries;
    cfg.eval_every = a.eval_every;
    if let Some(lr) = a.learning_rate {
        cfg.learning_rate = lr;
    }
    cfg.scales.retain(|s| a.scale % s == 0);
    cfg.scales.dedup();
    let mut model = SrModel::<f32>::new(config, ModelMeta { scale: a.scale as u32, seed: a.seed })?;
    let cache = TrainingCache::new(&model, &data, &cfg)?;
    let trace_path = a.trace.unwrap_or_else(|| {
        let mut p: OsString = a.out.clone().into();
        p.push(".csv");
        p.into()
    });
    let mut csv = String::from("epoch,loss,ws_psnr\n");
    let trace = train_cached(&mut model, &data, &cfg, &cache, |s| {
        let ws = s.ws_psnr.map(|v| format!("{v:.4}")).unwrap_or_default();
        eprintln!("epoch {} loss {:.6} {}", s.epoch, s.loss, ws);
    })?;
    for s in &trace {
        let ws = s.ws_psnr.map(|v| format!("{v:.6}")).unwrap_or_default();
        csv.push_str(&format!("{},{:.8},{}\n", s.epoch, s.loss, ws));
    }
    std::fs::write(&trace_path, csv).map_err(|e| io_err(&trace_path, e))?;
    save_checkpoint(&model, &a.out).map_err(|e| io_err(&a.out, e))?;
    Ok(())
}

/// Splices `--config` file entries in front of the user's flags so that the
/// command line wins.
fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>, Failure> {
    let mut path = None;
    let mut rest = Vec::with_capacity(argv.len());
    let mut it = argv.into_iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            path = Some(it.next().ok_or_else(|| Failure::Usage("--config needs a file".into()))?);
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(p.into());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = path else { return Ok(rest) };
    let path = PathBuf::from(path);
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let mut extra = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("{}:{}: expected key=value", path.display(), no + 1)))?;
        extra.push(OsString::from(format!("--{}={}", k.trim().replace('_', "-"), v.trim())));
    }
    // after the subcommand name: the first argument that is not a flag
    let at = rest.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')).map(|i| i + 2).unwrap_or(rest.len());
    rest.splice(at..at, extra);
    Ok(rest)
}

fn main() -> ExitCode {
    let argv = match expand_config(std::env::args_os().collect()) {
        Ok(v) => v,
        Err(f) => {
            eprintln!("error: {}", f.message());
            return ExitCode::from(f.code());
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
