//! Training data: synthetic panoramas, paired-PNG datasets, resampling and the
//! fixed feature provider used by the feature loss.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array3, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio::read_png;
use crate::Real;

/// A low-resolution/high-resolution equirectangular pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub lr: Array3<f32>,
    pub hr: Array3<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// `hr = scale × lr` in both dimensions.
    pub scale: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, scale: usize) -> Result<Self> {
        if samples.is_empty() || scale == 0 {
            return Err(Error::invalid("dataset needs at least one sample and a positive scale"));
        }
        for (i, s) in samples.iter().enumerate() {
            let (h, w, c) = s.lr.dim();
            if w != 2 * h || c != 3 {
                return Err(Error::invalid(format!("sample {i}: LR must be H × 2H × 3, got {:?}", s.lr.dim())));
            }
            if s.hr.dim() != (h * scale, w * scale, 3) {
                return Err(Error::invalid(format!("sample {i}: HR {:?} is not ×{scale} of LR {:?}", s.hr.dim(), s.lr.dim())));
            }
        }
        Ok(Dataset { samples, scale })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Reads `manifest.txt` in `dir`: one `lr.png hr.png` pair per line, paths
    /// relative to `dir`, `#` comments allowed. The scale is inferred.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(dir.join("manifest.txt"))?;
        let mut samples = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 2 {
                return Err(Error::invalid(format!("manifest line {}: expected `lr.png hr.png`", n + 1)));
            }
            samples.push(Sample { lr: read_png(dir.join(parts[0]))?, hr: read_png(dir.join(parts[1]))? });
        }
        let first = samples.first().ok_or_else(|| Error::invalid("empty manifest"))?;
        let scale = first.hr.dim().0 / first.lr.dim().0.max(1);
        Self::new(samples, scale)
    }
}

/// A smooth random panorama: per channel, a sum of sinusoids of the 3D direction.
pub fn synthetic_erp(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
    const WAVES: usize = 6;
    let mut waves = Vec::new();
    for _ in 0..3 {
        let mut ch = Vec::with_capacity(WAVES);
        for _ in 0..WAVES {
            let dir: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt().max(1e-3);
            let freq = rng.gen_range(1.0..7.0) / norm;
            let amp = 0.45 / WAVES as f64 * rng.gen_range(0.5..1.0);
            ch.push((dir.map(|v| v * freq), rng.gen_range(0.0..2.0 * PI), amp));
        }
        waves.push(ch);
    }
    Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let theta = (y as f64 + 0.5) * PI / h as f64;
        let phi = (x as f64 + 0.5) * 2.0 * PI / w as f64 - PI;
        let d = [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()];
        let v: f64 = waves[c].iter().map(|(k, ph, a)| a * (k[0] * d[0] + k[1] * d[1] + k[2] * d[2] + ph).sin()).sum();
        (0.5 + v) as f32
    })
}

/// Flat-colored spherical caps with sharp antialiased rims over a dimmed
/// [`synthetic_erp`] background that also shades the caps slightly.
pub fn synthetic_scene(h: usize, w: usize, caps: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
    const SUB: usize = 4;
    let base = synthetic_erp(h, w, rng);
    let caps: Vec<([f64; 3], f64, [f64; 3])> = (0..caps)
        .map(|_| {
            let z: f64 = rng.gen_range(-1.0..1.0);
            let a: f64 = rng.gen_range(-PI..PI);
            let r = (1.0 - z * z).sqrt();
            let radius: f64 = rng.gen_range(0.25..0.9);
            let color = [(); 3].map(|_| rng.gen_range(0.05..0.95));
            ([r * a.cos(), r * a.sin(), z], radius.cos(), color)
        })
        .collect();
    Array3::from_shape_fn((h, w, 3), |(y, x, ch)| {
        let shade = base[[y, x, ch]] as f64 - 0.5;
        let mut acc = 0.0;
        for i in 0..SUB {
            for j in 0..SUB {
                let theta = (y as f64 + (i as f64 + 0.5) / SUB as f64) * PI / h as f64;
                let phi = (x as f64 + (j as f64 + 0.5) / SUB as f64) * 2.0 * PI / w as f64 - PI;
                let d = [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()];
                // later caps paint over earlier ones
                let mut v = 0.5 + 0.5 * shade;
                for (c, cos_r, color) in &caps {
                    if c[0] * d[0] + c[1] * d[1] + c[2] * d[2] > *cos_r {
                        v = color[ch] + 0.3 * shade;
                    }
                }
                acc += v;
            }
        }
        (acc / (SUB * SUB) as f64).clamp(0.0, 1.0) as f32
    })
}

/// Caps per [`toy_dataset`] panorama.
pub const TOY_CAPS: usize = 6;

/// `count` [`synthetic_scene`] HR panoramas of `h × 2h` with box-downsampled LR inputs.
pub fn toy_dataset(count: usize, h: usize, scale: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..count)
        .map(|_| {
            let hr = synthetic_scene(h, 2 * h, TOY_CAPS, &mut rng);
            let lr = downsample_box(hr.view(), scale)?;
            Ok(Sample { lr, hr })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples, scale)
}

/// Mean over `factor × factor` blocks.
pub fn downsample_box<F: Real>(img: ArrayView3<F>, factor: usize) -> Result<Array3<F>> {
    let (h, w, c) = img.dim();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::invalid(format!("{h}×{w} is not divisible by {factor}")));
    }
    let inv = F::of(1.0 / (factor * factor) as f64);
    Ok(Array3::from_shape_fn((h / factor, w / factor, c), |(y, x, k)| {
        let mut s = F::zero();
        for dy in 0..factor {
            for dx in 0..factor {
                s += img[[y * factor + dy, x * factor + dx, k]];
            }
        }
        s * inv
    }))
}

fn keys(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Bicubic upsampling of an equirectangular image: wraps in longitude, clamps
/// at the poles.
pub fn bicubic_upsample(img: ArrayView3<f32>, factor: usize) -> Array3<f32> {
    let (h, w, c) = img.dim();
    let s = factor as f64;
    let mut out = Array3::zeros((h * factor, w * factor, c));
    for y in 0..h * factor {
        let sy = (y as f64 + 0.5) / s - 0.5;
        let y0 = sy.floor();
        for x in 0..w * factor {
            let sx = (x as f64 + 0.5) / s - 0.5;
            let x0 = sx.floor();
            for k in 0..c {
                let mut v = 0.0;
                for i in -1..=2 {
                    let wy = keys(sy - (y0 + i as f64));
                    let r = (y0 as i64 + i).clamp(0, h as i64 - 1) as usize;
                    for j in -1..=2 {
                        let wx = keys(sx - (x0 + j as f64));
                        let col = (x0 as i64 + j).rem_euclid(w as i64) as usize;
                        v += wy * wx * img[[r, col, k]] as f64;
                    }
                }
                out[[y, x, k]] = v as f32;
            }
        }
    }
    out
}

/// A fixed random 3×3 convolution with rectifier over an equirectangular
/// image, standing in for a pretrained 2D feature extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureProvider {
    /// `out × 3 × 3 × 3`.
    weights: Vec<f32>,
    bias: Vec<f32>,
    channels: usize,
}

impl FeatureProvider {
    pub const DEFAULT_SEED: u64 = 0x5eed;

    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / 27f32.sqrt();
        let weights = (0..channels * 27).map(|_| rng.gen_range(-bound..bound)).collect();
        let bias = (0..channels).map(|_| rng.gen_range(0.0..0.1)).collect();
        FeatureProvider { weights, bias, channels }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `H × W × 3` image to `C × H × W` features.
    pub fn apply<F: Real>(&self, img: ArrayView3<f32>) -> Array3<F> {
        let (h, w, _) = img.dim();
        Array3::from_shape_fn((self.channels, h, w), |(o, y, x)| {
            let mut s = self.bias[o];
            for dy in 0..3 {
                let r = (y as i64 + dy as i64 - 1).clamp(0, h as i64 - 1) as usize;
                for dx in 0..3 {
                    let col = (x as i64 + dx as i64 - 1).rem_euclid(w as i64) as usize;
                    for k in 0..3 {
                        s += self.weights[((o * 3 + k) * 3 + dy) * 3 + dx] * img[[r, col, k]];
                    }
                }
            }
            F::of(s.max(0.0) as f64)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_kernel_interpolates() {
        assert_eq!(keys(0.0), 1.0);
        assert_eq!(keys(1.0), 0.0);
        assert_eq!(keys(2.0), 0.0);
        for t in [0.1, 0.35, 0.8] {
            let s: f64 = (-1..=2).map(|i| keys(t - i as f64)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bicubic_preserves_constants_and_linear_rows() {
        let img = Array3::from_shape_fn((4, 8, 1), |(y, _, _)| 0.1 + 0.2 * y as f32);
        let up = bicubic_upsample(img.view(), 2);
        assert_eq!(up.dim(), (8, 16, 1));
        // interior rows of a linear ramp are reproduced exactly
        for y in 3..5 {
            let want = 0.1 + 0.2 * ((y as f32 + 0.5) / 2.0 - 0.5);
            assert!((up[[y, 3, 0]] - want).abs() < 1e-6);
        }
        let flat = Array3::from_elem((4, 8, 3), 0.3f32);
        assert!(bicubic_upsample(flat.view(), 4).iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn box_downsample() {
        let img = Array3::from_shape_fn((4, 8, 1), |(y, x, _)| (y * 8 + x) as f64);
        let d = downsample_box(img.view(), 2).unwrap();
        assert_eq!(d[[0, 0, 0]], (0.0 + 1.0 + 8.0 + 9.0) / 4.0);
        assert!(downsample_box(img.view(), 3).is_err());
    }

    #[test]
    fn synthetic_images_stay_in_range() {
        let ds = toy_dataset(3, 16, 4, 1).unwrap();
        assert_eq!(ds.samples[0].lr.dim(), (4, 8, 3));
        for s in &ds.samples {
            assert!(s.hr.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert_ne!(ds.samples[0].hr, ds.samples[1].hr);
    }

    #[test]
    fn provider_is_seeded() {
        let a = FeatureProvider::new(4, 7);
        assert_eq!(a, FeatureProvider::new(4, 7));
        let img = Array3::from_elem((4, 8, 3), 0.5f32);
        let f = a.apply::<f32>(img.view());
        assert_eq!(f.dim(), (4, 4, 8));
        assert!(f.iter().all(|&v| v >= 0.0));
    }
}
