//! Training losses and panoramic quality metrics.
//!
//! Images are `H × W × C` with values in `[0, 1]`; feature maps are `C × H × W`.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};

use crate::error::{Error, Result};
use crate::icosphere::IcosphereGrid;
use crate::layout::SphereTensor;
use crate::projection::ProjectionSpec;
use crate::sliif::convert_features;
use crate::Real;

/// Peak value of the `[0, 1]` range.
pub const MAX_VALUE: f64 = 1.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Mean per-query L1 distance over RGB (`N × 3` each).
pub fn l1_multiscale<F: Real>(pred: ArrayView2<F>, gt: ArrayView2<F>) -> Result<F> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape(format!("{:?} predictions vs {:?} targets", pred.dim(), gt.dim())));
    }
    let n = pred.nrows().max(1);
    let s = Zip::from(&pred).and(&gt).fold(F::zero(), |acc, &p, &g| acc + (p - g).abs());
    Ok(s / F::of(n as f64))
}

/// Gradient of [`l1_multiscale`] with respect to `pred`.
pub fn l1_multiscale_grad<F: Real>(pred: ArrayView2<F>, gt: ArrayView2<F>) -> Array2<F> {
    let inv = F::of(1.0 / pred.nrows().max(1) as f64);
    Zip::from(&pred).and(&gt).map_collect(|&p, &g| sign(p - g) * inv)
}

fn sign<F: Real>(x: F) -> F {
    if x > F::zero() {
        F::one()
    } else if x < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

/// Where the feature loss looks: a spatial map and per-channel weights.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMask {
    /// `H × W` in `[0, 1]`.
    pub spatial: Array2<f64>,
    /// `C` weights summing to one.
    pub channel: Array1<f64>,
}

/// Spatial mask from the max-normalized mean RGB error of `sr` against `gt`;
/// channel mask from a softmax over the global average of each feature channel.
pub fn build_mask<F: Real>(sr: ArrayView3<F>, gt: ArrayView3<F>, proj_features: ArrayView3<F>) -> Result<FeatureMask> {
    if sr.dim() != gt.dim() {
        return Err(Error::shape(format!("SR {:?} vs GT {:?}", sr.dim(), gt.dim())));
    }
    let (h, w, c) = sr.dim();
    let (fc, fh, fw) = proj_features.dim();
    if (fh, fw) != (h, w) {
        return Err(Error::shape(format!("features {fh}×{fw} vs image {h}×{w}")));
    }
    let mut spatial = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (0..c).map(|k| (sr[[y, x, k]] - gt[[y, x, k]]).abs().f64()).sum();
            spatial[[y, x]] = s / c as f64;
        }
    }
    let peak = spatial.fold(0.0f64, |m, &v| m.max(v));
    if peak > 0.0 {
        spatial.mapv_inplace(|v| v / peak);
    }
    let gap: Vec<f64> = (0..fc)
        .map(|k| proj_features.index_axis(Axis(0), k).iter().map(|v| v.f64()).sum::<f64>() / (fh * fw).max(1) as f64)
        .collect();
    let top = gap.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = gap.iter().map(|g| (g - top).exp()).collect();
    let z: f64 = exps.iter().sum();
    let channel = Array1::from_iter(exps.into_iter().map(|e| e / z));
    Ok(FeatureMask { spatial, channel })
}

/// Masked mean absolute difference of two `C × H × W` feature maps, and its
/// gradient with respect to `converted`.
pub fn masked_l1<F: Real>(converted: ArrayView3<F>, target: ArrayView3<F>, mask: &FeatureMask) -> Result<(F, Array3<F>)> {
    if converted.dim() != target.dim() {
        return Err(Error::shape(format!("converted {:?} vs target {:?}", converted.dim(), target.dim())));
    }
    let (c, h, w) = converted.dim();
    if mask.spatial.dim() != (h, w) || mask.channel.len() != c {
        return Err(Error::shape("mask does not match the feature map"));
    }
    let inv = 1.0 / (c * h * w).max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Array3::zeros((c, h, w));
    for k in 0..c {
        for y in 0..h {
            for x in 0..w {
                let m = mask.channel[k] * mask.spatial[[y, x]];
                let d = converted[[k, y, x]] - target[[k, y, x]];
                loss += m * d.f64().abs();
                grad[[k, y, x]] = F::of(m * inv) * sign(d);
            }
        }
    }
    Ok((F::of(loss * inv), grad))
}

/// Feature loss between sphere features resampled into `spec` and features
/// computed directly in that projection.
pub fn feature_loss<F: Real>(
    sphere_features: &SphereTensor<F>,
    grid: &IcosphereGrid,
    spec: &ProjectionSpec,
    proj_features: ArrayView3<F>,
    mask: &FeatureMask,
) -> Result<F> {
    let converted = convert_features(sphere_features, grid, spec)?;
    masked_l1(converted.view(), proj_features, mask).map(|(l, _)| l)
}

/// Row weights of an `h`-row equirectangular image.
pub fn erp_row_weights(h: usize) -> Vec<f64> {
    (0..h).map(|i| ((i as f64 + 0.5 - h as f64 / 2.0) * PI / h as f64).cos()).collect()
}

fn check_pair<F>(a: &ArrayView3<F>, b: &ArrayView3<F>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.is_empty() {
        return Err(Error::shape("empty image"));
    }
    Ok(())
}

/// PSNR with per-row weights; `+∞` for identical images.
pub fn psnr_with_row_weights<F: Real>(reference: ArrayView3<F>, test: ArrayView3<F>, weights: &[f64]) -> Result<f64> {
    check_pair(&reference, &test)?;
    let (h, w, c) = reference.dim();
    if weights.len() != h {
        return Err(Error::shape(format!("{} row weights for {h} rows", weights.len())));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            for k in 0..c {
                let d = reference[[y, x, k]].f64() - test[[y, x, k]].f64();
                row += d * d;
            }
        }
        num += weights[y] * row;
        den += weights[y] * (w * c) as f64;
    }
    let mse = num / den;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (MAX_VALUE * MAX_VALUE / mse).log10() })
}

pub fn ws_psnr<F: Real>(reference: ArrayView3<F>, test: ArrayView3<F>) -> Result<f64> {
    psnr_with_row_weights(reference, test, &erp_row_weights(reference.dim().0))
}

pub fn psnr<F: Real>(reference: ArrayView3<F>, test: ArrayView3<F>) -> Result<f64> {
    psnr_with_row_weights(reference, test, &vec![1.0; reference.dim().0])
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-region filtering of an `H × W` plane.
fn filter_valid(img: &Array2<f64>, g: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let n = g.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            tmp[[y, x]] = (0..n).map(|k| g[k] * img[[y, x + k]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            out[[y, x]] = (0..n).map(|k| g[k] * tmp[[y + k, x]]).sum();
        }
    }
    out
}

/// SSIM map of each channel over the valid region, `C` maps of
/// `(H − 10) × (W − 10)`.
fn ssim_maps<F: Real>(a: ArrayView3<F>, b: ArrayView3<F>) -> Result<Vec<Array2<f64>>> {
    check_pair(&a, &b)?;
    let (h, w, c) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!("SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {h}×{w}")));
    }
    let g = gaussian_window();
    let c1 = (SSIM_K1 * MAX_VALUE).powi(2);
    let c2 = (SSIM_K2 * MAX_VALUE).powi(2);
    let mut maps = Vec::with_capacity(c);
    for k in 0..c {
        let x = a.index_axis(Axis(2), k).mapv(|v| v.f64());
        let y = b.index_axis(Axis(2), k).mapv(|v| v.f64());
        let mx = filter_valid(&x, &g);
        let my = filter_valid(&y, &g);
        let sxx = filter_valid(&(&x * &x), &g) - &mx * &mx;
        let syy = filter_valid(&(&y * &y), &g) - &my * &my;
        let sxy = filter_valid(&(&x * &y), &g) - &mx * &my;
        let map = Zip::from(&mx).and(&my).and(&sxx).and(&syy).and(&sxy).map_collect(|&mx, &my, &sxx, &syy, &sxy| {
            ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        });
        maps.push(map);
    }
    Ok(maps)
}

/// Mean SSIM with per-row weights taken at each window's center row.
pub fn ssim_with_row_weights<F: Real>(reference: ArrayView3<F>, test: ArrayView3<F>, weights: &[f64]) -> Result<f64> {
    if weights.len() != reference.dim().0 {
        return Err(Error::shape(format!("{} row weights for {} rows", weights.len(), reference.dim().0)));
    }
    let maps = ssim_maps(reference, test)?;
    let half = SSIM_WINDOW / 2;
    let (mut num, mut den) = (0.0, 0.0);
    for m in &maps {
        for (y, row) in m.rows().into_iter().enumerate() {
            let wgt = weights[y + half];
            num += wgt * row.sum();
            den += wgt * row.len() as f64;
        }
    }
    Ok(num / den)
}

pub fn ws_ssim<F: Real>(reference: ArrayView3<F>, test: ArrayView3<F>) -> Result<f64> {
    ssim_with_row_weights(reference, test, &erp_row_weights(reference.dim().0))
}

pub fn ssim<F: Real>(reference: ArrayView3<F>, test: ArrayView3<F>) -> Result<f64> {
    ssim_with_row_weights(reference, test, &vec![1.0; reference.dim().0])
}
