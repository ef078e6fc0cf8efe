//! Output projections, their pixel Jacobians and sphere-oriented cell decoding.
//!
//! Pixel coordinates are continuous `(X, Y) = (column, row)` with integer values
//! at pixel centers. Cameras look along +x with +y to the right and +z up before
//! the yaw/pitch/roll rotation, so an unrotated camera faces the center column
//! of an equirectangular image. Jacobian rows give the sphere displacement of one
//! pixel step to the right (Δx) and one pixel step up (Δy) in the local
//! (θ̂, φ̂) basis.

use std::f64::consts::{FRAC_PI_2, PI};
use std::str::FromStr;

use nalgebra::{Matrix2, Rotation3, Vector2};

use crate::clip::{area, centered_rect, clip_convex, parallelogram, Vec2};
use crate::error::{Error, Result};
use crate::icosphere::{SpherePoint, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectionKind {
    Erp,
    Perspective,
    Fisheye,
    /// One cube face: a 90°×90° perspective view.
    Cubemap,
}

impl FromStr for ProjectionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "erp" | "equirectangular" => Ok(Self::Erp),
            "perspective" => Ok(Self::Perspective),
            "fisheye" => Ok(Self::Fisheye),
            "cubemap" | "cubemap-face" | "cube" => Ok(Self::Cubemap),
            other => Err(Error::invalid(format!("unknown projection kind '{other}'"))),
        }
    }
}

/// Cube faces as camera orientations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CubeFace {
    Front,
    Right,
    Back,
    Left,
    Up,
    Down,
}

impl CubeFace {
    pub const ALL: [CubeFace; 6] = [Self::Front, Self::Right, Self::Back, Self::Left, Self::Up, Self::Down];

    /// (yaw, pitch) in radians.
    pub fn yaw_pitch(self) -> (f64, f64) {
        match self {
            Self::Front => (0.0, 0.0),
            Self::Right => (FRAC_PI_2, 0.0),
            Self::Back => (PI, 0.0),
            Self::Left => (-FRAC_PI_2, 0.0),
            Self::Up => (0.0, FRAC_PI_2),
            Self::Down => (0.0, -FRAC_PI_2),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionSpec {
    pub kind: ProjectionKind,
    /// Rows `a`.
    pub height: usize,
    /// Columns `b`.
    pub width: usize,
    /// Horizontal field of view `M` (radians); unused for ERP.
    pub fov_h: f64,
    /// Vertical field of view `N` (radians); unused for ERP.
    pub fov_v: f64,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl ProjectionSpec {
    pub fn erp(height: usize, width: usize) -> Self {
        Self::new(ProjectionKind::Erp, height, width, 2.0 * PI, PI)
    }

    pub fn perspective(height: usize, width: usize, fov_h: f64, fov_v: f64) -> Self {
        Self::new(ProjectionKind::Perspective, height, width, fov_h, fov_v)
    }

    pub fn fisheye(height: usize, width: usize, fov_h: f64, fov_v: f64) -> Self {
        Self::new(ProjectionKind::Fisheye, height, width, fov_h, fov_v)
    }

    pub fn cube_face(face: CubeFace, size: usize) -> Self {
        let (yaw, pitch) = face.yaw_pitch();
        Self::new(ProjectionKind::Cubemap, size, size, FRAC_PI_2, FRAC_PI_2).oriented(yaw, pitch, 0.0)
    }

    fn new(kind: ProjectionKind, height: usize, width: usize, fov_h: f64, fov_v: f64) -> Self {
        ProjectionSpec { kind, height, width, fov_h, fov_v, yaw: 0.0, pitch: 0.0, roll: 0.0 }
    }

    pub fn oriented(mut self, yaw: f64, pitch: f64, roll: f64) -> Self {
        self.yaw = yaw;
        self.pitch = pitch;
        self.roll = roll;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("image size must be at least 1×1"));
        }
        let (m, n) = (self.fov_h, self.fov_v);
        match self.kind {
            ProjectionKind::Erp => {}
            ProjectionKind::Perspective | ProjectionKind::Cubemap => {
                if !(m > 0.0 && m < PI && n > 0.0 && n < PI) {
                    return Err(Error::invalid("perspective field of view must lie in (0°, 180°)"));
                }
            }
            ProjectionKind::Fisheye => {
                if !(m > 0.0 && m <= 2.0 * PI && n > 0.0 && n <= 2.0 * PI) {
                    return Err(Error::invalid("fisheye field of view must lie in (0°, 360°]"));
                }
            }
        }
        if ![self.yaw, self.pitch, self.roll].iter().all(|a| a.is_finite()) {
            return Err(Error::invalid("orientation angles must be finite"));
        }
        Ok(())
    }

    /// Builds a spec from `key=value` lines (`#` starts a comment). Keys: kind,
    /// width, height, fov_h_deg, fov_v_deg, yaw_deg, pitch_deg, roll_deg.
    pub fn from_config(text: &str) -> Result<Self> {
        let mut spec = Self::erp(1, 2);
        let mut size_set = false;
        for (key, value) in parse_key_values(text)? {
            spec.set(&key, &value)?;
            size_set |= key == "width" || key == "height";
        }
        if !size_set {
            return Err(Error::invalid("config must set width and height"));
        }
        if spec.kind == ProjectionKind::Cubemap {
            spec.fov_h = FRAC_PI_2;
            spec.fov_v = FRAC_PI_2;
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Applies one configuration key; angles are given in degrees.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = || value.trim().parse::<f64>().map_err(|_| Error::invalid(format!("{key}: '{value}' is not a number")));
        let count = || value.trim().parse::<usize>().map_err(|_| Error::invalid(format!("{key}: '{value}' is not a size")));
        match key {
            "kind" => {
                self.kind = value.parse()?;
                if self.kind == ProjectionKind::Erp {
                    self.fov_h = 2.0 * PI;
                    self.fov_v = PI;
                }
            }
            "width" => self.width = count()?,
            "height" => self.height = count()?,
            "fov_h_deg" => self.fov_h = num()?.to_radians(),
            "fov_v_deg" => self.fov_v = num()?.to_radians(),
            "yaw_deg" => self.yaw = num()?.to_radians(),
            "pitch_deg" => self.pitch = num()?.to_radians(),
            "roll_deg" => self.roll = num()?.to_radians(),
            _ => return Err(Error::invalid(format!("unknown projection key '{key}'"))),
        }
        Ok(())
    }

    /// Camera-to-world rotation: yaw about +z, then pitch about the camera's
    /// right axis (positive looks up), then roll about the optical axis.
    pub fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_axis_angle(&Vec3::z_axis(), self.yaw)
            * Rotation3::from_axis_angle(&Vec3::y_axis(), -self.pitch)
            * Rotation3::from_axis_angle(&Vec3::x_axis(), self.roll)
    }

    /// Per-pixel steps (ΔX, ΔY) on the projection plane (radians for ERP).
    pub fn steps(&self) -> (f64, f64) {
        let (a, b) = (self.height as f64, self.width as f64);
        match self.kind {
            ProjectionKind::Erp => (2.0 * PI / b, PI / a),
            ProjectionKind::Perspective | ProjectionKind::Cubemap => {
                (2.0 * (self.fov_h / 2.0).tan() / b, 2.0 * (self.fov_v / 2.0).tan() / a)
            }
            // equidistant with unit focal length: plane radius equals view angle
            ProjectionKind::Fisheye => (self.fov_h / b, self.fov_v / a),
        }
    }

    /// Projection-plane coordinates of a pixel position, Y pointing up.
    pub fn plane(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = self.steps();
        let (a, b) = (self.height as f64, self.width as f64);
        ((x + 0.5 - b / 2.0) * dx, (a / 2.0 - y - 0.5) * dy)
    }

    fn from_plane(&self, xp: f64, yp: f64) -> (f64, f64) {
        let (dx, dy) = self.steps();
        let (a, b) = (self.height as f64, self.width as f64);
        (xp / dx + b / 2.0 - 0.5, a / 2.0 - 0.5 - yp / dy)
    }

    fn in_bounds(&self, x: f64, y: f64) -> bool {
        (-0.5..=self.width as f64 - 0.5).contains(&x) && (-0.5..=self.height as f64 - 0.5).contains(&y)
    }
}

pub(crate) fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("line {}: expected key=value", no + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Equidistant fisheye surface `F(X, Y) = r / tan r` with its partials; the ray
/// through plane point (X, Y) is `(F, X, Y)` in camera coordinates.
pub fn fisheye_surface(x: f64, y: f64) -> (f64, f64, f64) {
    let r2 = x * x + y * y;
    if r2 < 1e-8 {
        // series: F = 1 - r²/3 - r⁴/45
        let f = 1.0 - r2 / 3.0 - r2 * r2 / 45.0;
        let d = -2.0 / 3.0 - 4.0 * r2 / 45.0;
        return (f, d * x, d * y);
    }
    let r = r2.sqrt();
    let (s, c) = r.sin_cos();
    let f = r * c / s;
    let df_dr = c / s - r / (s * s);
    (f, df_dr * x / r, df_dr * y / r)
}

fn camera_ray(spec: &ProjectionSpec, xp: f64, yp: f64) -> Result<Vec3> {
    match spec.kind {
        ProjectionKind::Perspective | ProjectionKind::Cubemap => Ok(Vec3::new(1.0, xp, yp)),
        ProjectionKind::Fisheye => {
            let (hx, hy) = (spec.fov_h / 2.0, spec.fov_v / 2.0);
            if (xp / hx).powi(2) + (yp / hy).powi(2) > 1.0 + 1e-12 || xp.hypot(yp) >= PI {
                return Err(Error::Outside);
            }
            let (f, _, _) = fisheye_surface(xp, yp);
            Ok(Vec3::new(f, xp, yp))
        }
        ProjectionKind::Erp => unreachable!(),
    }
}

pub fn pixel_to_sphere(spec: &ProjectionSpec, x: f64, y: f64) -> Result<SpherePoint> {
    if !spec.in_bounds(x, y) {
        return Err(Error::invalid(format!("pixel ({x}, {y}) outside the {}×{} image", spec.height, spec.width)));
    }
    if spec.kind == ProjectionKind::Erp {
        let theta = (y + 0.5) * PI / spec.height as f64;
        let phi = (x + 0.5) * 2.0 * PI / spec.width as f64 - PI;
        return Ok(SpherePoint::from_angles(theta, phi));
    }
    let (xp, yp) = spec.plane(x, y);
    let ray = camera_ray(spec, xp, yp)?;
    Ok(SpherePoint::from_unit(spec.rotation() * ray.normalize()))
}

/// Pixel position of a direction, or `None` when it falls outside the image.
pub fn sphere_to_pixel(spec: &ProjectionSpec, p: &SpherePoint) -> Option<(f64, f64)> {
    let (x, y) = match spec.kind {
        ProjectionKind::Erp => {
            let x = (p.phi() + PI) * spec.width as f64 / (2.0 * PI) - 0.5;
            let y = p.theta() * spec.height as f64 / PI - 0.5;
            (x, y)
        }
        ProjectionKind::Perspective | ProjectionKind::Cubemap => {
            let c = spec.rotation().inverse() * p.direction();
            if c.x <= 0.0 {
                return None;
            }
            spec.from_plane(c.y / c.x, c.z / c.x)
        }
        ProjectionKind::Fisheye => {
            let c = spec.rotation().inverse() * p.direction();
            let side = c.y.hypot(c.z);
            let psi = side.atan2(c.x);
            let (xp, yp) = if side > 0.0 { (psi * c.y / side, psi * c.z / side) } else { (0.0, 0.0) };
            let (hx, hy) = (spec.fov_h / 2.0, spec.fov_v / 2.0);
            if (xp / hx).powi(2) + (yp / hy).powi(2) > 1.0 + 1e-12 {
                return None;
            }
            spec.from_plane(xp, yp)
        }
    };
    spec.in_bounds(x, y).then_some((x, y))
}

/// Analytic Jacobian `(γ₁ δ₁; γ₂ δ₂)` at a pixel.
///
/// ERP uses `Δx = ΔX sinθ φ̂`, `Δy = −ΔY θ̂`. Perspective and fisheye rows are
/// evaluated in camera-frame spherical coordinates, with α the inverse length of
/// the camera ray, then carried into the world (θ̂, φ̂) basis.
pub fn projection_jacobian(spec: &ProjectionSpec, x: f64, y: f64) -> Result<Matrix2<f64>> {
    let p = pixel_to_sphere(spec, x, y)?;
    let (dx, dy) = spec.steps();
    if spec.kind == ProjectionKind::Erp {
        let st = p.theta().sin();
        if st.abs() < 1e-6 {
            return Err(Error::Singular("ERP pole"));
        }
        return Ok(Matrix2::new(0.0, dx * st, -dy, 0.0));
    }
    let (xp, yp) = spec.plane(x, y);
    let ray = camera_ray(spec, xp, yp)?;
    let (fx, fy) = match spec.kind {
        ProjectionKind::Fisheye => {
            let (_, fx, fy) = fisheye_surface(xp, yp);
            (fx, fy)
        }
        _ => (0.0, 0.0),
    };
    let alpha = 1.0 / ray.norm();
    let cam = SpherePoint::from_unit(ray * alpha);
    if cam.theta().sin() < 1e-6 {
        return Err(Error::Singular("camera-frame pole"));
    }
    let (st, ct) = cam.theta().sin_cos();
    let (sp, cp) = cam.phi().sin_cos();
    let cam_j = Matrix2::new(
        alpha * dx * (ct * sp + fx * ct * cp),
        alpha * dx * (cp - fx * sp),
        alpha * dy * (-st + fy * ct * cp),
        -alpha * dy * fy * sp,
    );
    let rot = spec.rotation();
    let (th_c, ph_c) = (rot * cam.theta_hat(), rot * cam.phi_hat());
    let (th, ph) = (p.theta_hat(), p.phi_hat());
    // columns: camera basis vectors expressed in the world basis
    let basis = Matrix2::new(th_c.dot(&th), th_c.dot(&ph), ph_c.dot(&th), ph_c.dot(&ph));
    Ok(cam_j * basis)
}

/// Central differences of `pixel_to_sphere` projected onto (θ̂, φ̂); `h` in pixels.
pub fn numeric_jacobian(spec: &ProjectionSpec, x: f64, y: f64, h: f64) -> Result<Matrix2<f64>> {
    let p = pixel_to_sphere(spec, x, y)?;
    let at = |xx: f64, yy: f64| -> Result<Vec3> {
        let xx = xx.clamp(-0.5, spec.width as f64 - 0.5);
        let yy = yy.clamp(-0.5, spec.height as f64 - 0.5);
        Ok(pixel_to_sphere(spec, xx, yy)?.direction())
    };
    let ex = (at(x + h, y)? - at(x - h, y)?) / (2.0 * h);
    let ey = (at(x, y - h)? - at(x, y + h)?) / (2.0 * h);
    let (th, ph) = (p.theta_hat(), p.phi_hat());
    Ok(Matrix2::new(ex.dot(&th), ex.dot(&ph), ey.dot(&th), ey.dot(&ph)))
}

/// Analytic Jacobian, or pixel-corner differences where it is singular.
pub fn pixel_jacobian(spec: &ProjectionSpec, x: f64, y: f64) -> Result<Matrix2<f64>> {
    match projection_jacobian(spec, x, y) {
        Err(Error::Singular(_)) => numeric_jacobian(spec, x, y, 0.5),
        other => other,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TangentFrame {
    /// Unit direction from the reference vertex toward the point, in (θ̂, φ̂) components.
    pub n1: Vector2<f64>,
    /// `n1` rotated by 90° counter-clockwise.
    pub n2: Vector2<f64>,
    /// `(α₁ β₁; α₂ β₂)` with `(θ̂; φ̂) = alpha_beta · (n1; n2)`.
    pub alpha_beta: Matrix2<f64>,
}

impl TangentFrame {
    fn from_n1(n1: Vector2<f64>) -> Self {
        let n2 = Vector2::new(-n1.y, n1.x);
        let rows = Matrix2::new(n1.x, n1.y, n2.x, n2.y);
        let alpha_beta = rows.try_inverse().expect("orthonormal rows");
        TangentFrame { n1, n2, alpha_beta }
    }

    /// Frame at `p` whose `n1` is the tangent projection of the 3D direction `d`.
    pub fn toward(p: &SpherePoint, d: Vec3) -> Result<Self> {
        let n = Vector2::new(d.dot(&p.theta_hat()), d.dot(&p.phi_hat()));
        let len = n.norm();
        if !(len > 1e-14) {
            return Err(Error::DegenerateFrame);
        }
        Ok(Self::from_n1(n / len))
    }

    /// Coordinates of a (θ̂, φ̂) vector in the (n1, n2) basis.
    pub fn coords(&self, t: Vector2<f64>) -> Vector2<f64> {
        self.alpha_beta.transpose() * t
    }
}

/// Frame at `p` with `n1` along the displacement from the vertex `v` to `p`.
pub fn tangent_frame(p: &SpherePoint, v: &SpherePoint) -> Result<TangentFrame> {
    let d = p.direction() - v.direction();
    if d.norm() < 1e-12 {
        return Err(Error::DegenerateFrame);
    }
    TangentFrame::toward(p, d)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EquivalentRect {
    pub width: f64,
    pub height: f64,
    /// Intersection area with the parallelogram.
    pub overlap: f64,
}

/// Overlap of a centered `w × area/w` rectangle with the parallelogram.
pub fn rect_overlap(poly: &[Vec2], area_: f64, w: f64) -> f64 {
    area(&clip_convex(poly, &centered_rect(w, area_ / w)))
}

/// The centered axis-aligned rectangle with the parallelogram's area and the
/// largest overlap with it.
pub fn equivalent_rectangle(u: Vec2, v: Vec2) -> Result<EquivalentRect> {
    let cross = u.x * v.y - u.y * v.x;
    let scale = u.norm().max(v.norm());
    if !(cross.abs() > 1e-12 * scale * scale) || !cross.is_finite() {
        return Err(Error::invalid("degenerate parallelogram"));
    }
    let a = cross.abs();
    if (u.y == 0.0 && v.x == 0.0) || (u.x == 0.0 && v.y == 0.0) {
        let (w, h) = ((u.x + v.x).abs(), (u.y + v.y).abs());
        return Ok(EquivalentRect { width: w, height: h, overlap: a });
    }
    let poly = parallelogram(u, v);
    let ex = u.x.abs() + v.x.abs();
    let ey = u.y.abs() + v.y.abs();
    let (lo, hi) = ((a / ey).ln(), ex.ln());
    let f = |t: f64| rect_overlap(&poly, a, t.exp());

    const SCAN: usize = 64;
    let grid: Vec<f64> = (0..=SCAN).map(|k| lo + (hi - lo) * k as f64 / SCAN as f64).collect();
    let best = (0..=SCAN).max_by(|&i, &j| f(grid[i]).total_cmp(&f(grid[j]))).unwrap();
    let (mut l, mut r) = (grid[best.saturating_sub(1)], grid[(best + 1).min(SCAN)]);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut c, mut d) = (r - g * (r - l), l + g * (r - l));
    let (mut fc, mut fd) = (f(c), f(d));
    while r - l > 1e-10 {
        if fc >= fd {
            r = d;
            d = c;
            fd = fc;
            c = r - g * (r - l);
            fc = f(c);
        } else {
            l = c;
            c = d;
            fc = fd;
            d = l + g * (r - l);
            fd = f(d);
        }
    }
    let t = 0.5 * (l + r);
    let (t, ov) = [(t, f(t)), (grid[best], f(grid[best]))].into_iter().max_by(|x, y| x.1.total_cmp(&y.1)).unwrap();
    let w = t.exp();
    Ok(EquivalentRect { width: w, height: a / w, overlap: ov })
}

/// Extent of an output pixel's cell along `n1` and `n2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellDecoding {
    pub cx: f64,
    pub cy: f64,
}

/// Cell of a pixel with Jacobian `j`, measured in `frame`.
pub fn cell_from_jacobian(j: &Matrix2<f64>, frame: &TangentFrame) -> Result<CellDecoding> {
    let u = frame.coords(Vector2::new(j[(0, 0)], j[(0, 1)]));
    let v = frame.coords(Vector2::new(j[(1, 0)], j[(1, 1)]));
    let r = equivalent_rectangle(u, v)?;
    Ok(CellDecoding { cx: r.width, cy: r.height })
}

/// Cell decoding of pixel (X, Y) seen from the reference vertex `v`.
pub fn cell_decode(spec: &ProjectionSpec, x: f64, y: f64, v: &SpherePoint) -> Result<CellDecoding> {
    let p = pixel_to_sphere(spec, x, y)?;
    let frame = tangent_frame(&p, v)?;
    cell_from_jacobian(&pixel_jacobian(spec, x, y)?, &frame)
}
