//! Geometry-aligned convolution on the panel layout.
//!
//! A conceptual kernel has 13 taps: the center face, the six same-orientation
//! faces of its hexagonal ring, three positions B1..B3 and three positions
//! C1..C3. Around an up face the B positions hold its edge neighbors and the C
//! positions its own vertices; around a down face it is the other way round. A
//! vertex tap reads an imaginary pixel, the mean of the four footprint faces
//! around that vertex, so both orientations share one weight vector without
//! rotating it. On the panel layout this becomes a dense 5×3 kernel per row
//! parity with five positions masked to zero.
//!
//! Tap order: 0 center, 1 W, 2 E, 3 SW, 4 SE, 5 NW, 6 NE, 7 B1, 8 B2, 9 B3,
//! 10 C1, 11 C2, 12 C3.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, Array3, Array4, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::layout::{pad, unpad_accumulate, CallTable, LayoutMap, SphereTensor, PANELS};
use crate::Real;

pub const TAPS: usize = 13;
pub const KERNEL_ROWS: usize = 5;
pub const KERNEL_COLS: usize = 3;
const WINDOW: usize = KERNEL_ROWS * KERNEL_COLS;

/// One contribution of a conceptual tap to a dense kernel position.
#[derive(Clone, Copy, Debug)]
struct Entry {
    tap: usize,
    dr: i32,
    dc: i32,
    quarter: bool,
}

const fn face(tap: usize, dr: i32, dc: i32) -> Entry {
    Entry { tap, dr, dc, quarter: false }
}

const fn vert(tap: usize, dr: i32, dc: i32) -> Entry {
    Entry { tap, dr, dc, quarter: true }
}

const RING: [Entry; 7] = [face(0, 0, 0), face(1, 0, -1), face(2, 0, 1), face(3, -2, 0), face(4, -2, 1), face(5, 2, -1), face(6, 2, 0)];

const UP_EXTRA: [Entry; 15] = [
    face(7, 1, -1),
    face(8, 1, 0),
    face(9, -1, 0),
    vert(10, -1, 0),
    vert(10, 1, -1),
    vert(10, 0, -1),
    vert(10, -2, 0),
    vert(11, -1, 0),
    vert(11, 1, 0),
    vert(11, 0, 1),
    vert(11, -2, 1),
    vert(12, 1, -1),
    vert(12, 1, 0),
    vert(12, 2, -1),
    vert(12, 2, 0),
];

const DOWN_EXTRA: [Entry; 15] = [
    face(10, -1, 0),
    face(11, -1, 1),
    face(12, 1, 0),
    vert(7, 1, 0),
    vert(7, -1, 0),
    vert(7, 0, -1),
    vert(7, 2, -1),
    vert(8, 1, 0),
    vert(8, -1, 1),
    vert(8, 0, 1),
    vert(8, 2, 0),
    vert(9, -1, 0),
    vert(9, -1, 1),
    vert(9, -2, 0),
    vert(9, -2, 1),
];

fn entries(parity: usize) -> impl Iterator<Item = Entry> {
    let extra: &'static [Entry; 15] = if parity == 0 { &UP_EXTRA } else { &DOWN_EXTRA };
    RING.iter().chain(extra.iter()).copied()
}

/// The 5×3 mask of one row parity (0 = up rows, 1 = down rows).
pub fn mask(parity: usize) -> [[bool; KERNEL_COLS]; KERNEL_ROWS] {
    let mut m = [[false; KERNEL_COLS]; KERNEL_ROWS];
    for e in entries(parity) {
        m[(e.dr + 2) as usize][(e.dc + 1) as usize] = true;
    }
    m
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<F = f32> {
    /// `out × in × 13` conceptual weights.
    pub weights: Array3<F>,
    pub bias: Array1<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivalentKernel<F = f32> {
    /// `out × in × 5 × 3` kernels for up rows and down rows.
    pub up: Array4<F>,
    pub down: Array4<F>,
}

impl<F> EquivalentKernel<F> {
    pub fn parity(&self, p: usize) -> &Array4<F> {
        if p == 0 {
            &self.up
        } else {
            &self.down
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvGrads<F = f32> {
    pub input: SphereTensor<F>,
    pub weights: Array3<F>,
    pub bias: Array1<F>,
}

/// Im2col matrices of one forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ConvCache<F> {
    cols: [Array2<F>; 2],
}

impl<F: Real> ConvLayer<F> {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        ConvLayer { weights: Array3::zeros((out_channels, in_channels, TAPS)), bias: Array1::zeros(out_channels) }
    }

    /// Uniform init in ±1/sqrt(fan_in), bias zero.
    pub fn random<R: Rng>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((in_channels * TAPS) as f64).sqrt();
        let weights = Array3::from_shape_simple_fn((out_channels, in_channels, TAPS), || F::of(rng.gen_range(-bound..bound)));
        ConvLayer { weights, bias: Array1::zeros(out_channels) }
    }

    /// Center tap 1 on the diagonal.
    pub fn identity(channels: usize) -> Self {
        let mut l = Self::zeros(channels, channels);
        for c in 0..channels {
            l.weights[[c, c, 0]] = F::one();
        }
        l
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

pub fn expand_kernel<F: Real>(layer: &ConvLayer<F>) -> EquivalentKernel<F> {
    let (o, i) = (layer.out_channels(), layer.in_channels());
    let quarter = F::of(0.25);
    let build = |parity: usize| {
        let mut k = Array4::zeros((o, i, KERNEL_ROWS, KERNEL_COLS));
        for e in entries(parity) {
            let (r, c) = ((e.dr + 2) as usize, (e.dc + 1) as usize);
            let w = layer.weights.slice(s![.., .., e.tap]);
            let mut dst = k.slice_mut(s![.., .., r, c]);
            if e.quarter {
                dst.scaled_add(quarter, &w);
            } else {
                dst += &w;
            }
        }
        k
    };
    EquivalentKernel { up: build(0), down: build(1) }
}

/// Adjoint of [`expand_kernel`]: folds dense-kernel gradients onto conceptual taps.
fn fold_kernel_grad<F: Real>(g_up: &Array4<F>, g_down: &Array4<F>) -> Array3<F> {
    let (o, i) = (g_up.shape()[0], g_up.shape()[1]);
    let quarter = F::of(0.25);
    let mut gw = Array3::zeros((o, i, TAPS));
    for (parity, g) in [(0, g_up), (1, g_down)] {
        for e in entries(parity) {
            let (r, c) = ((e.dr + 2) as usize, (e.dc + 1) as usize);
            let src = g.slice(s![.., .., r, c]);
            let mut dst = gw.slice_mut(s![.., .., e.tap]);
            if e.quarter {
                dst.scaled_add(quarter, &src);
            } else {
                dst += &src;
            }
        }
    }
    gw
}

/// Flat output index and padded top-left corner of every cell of one parity.
fn parity_cells(layout: &LayoutMap, parity: usize) -> Vec<(usize, usize, usize, usize)> {
    let (h, w) = (layout.panel_height(), layout.panel_width());
    let mut cells = Vec::with_capacity(PANELS * h * w / 2);
    for k in 0..PANELS {
        for r in (parity..h).step_by(2) {
            for c in 0..w {
                cells.push(((k * h + r) * w + c, k, r, c));
            }
        }
    }
    cells
}

fn im2col<F: Real>(padded: &Array4<F>, cells: &[(usize, usize, usize, usize)]) -> Array2<F> {
    let (cin, panels, ph, pw) = padded.dim();
    let src = padded.as_slice().expect("padded tensors are contiguous");
    let mut cols = Array2::zeros((cells.len(), cin * WINDOW));
    let dst = cols.as_slice_mut().unwrap();
    for (m, &(_, k, r, c)) in cells.iter().enumerate() {
        let row = &mut dst[m * cin * WINDOW..(m + 1) * cin * WINDOW];
        for ci in 0..cin {
            let base = ((ci * panels + k) * ph + r) * pw + c;
            for dr in 0..KERNEL_ROWS {
                let from = base + dr * pw;
                let to = ci * WINDOW + dr * KERNEL_COLS;
                row[to..to + KERNEL_COLS].copy_from_slice(&src[from..from + KERNEL_COLS]);
            }
        }
    }
    cols
}

fn col2im<F: Real>(grad_cols: &Array2<F>, cells: &[(usize, usize, usize, usize)], padded: &mut Array4<F>) {
    let (cin, panels, ph, pw) = padded.dim();
    let dst = padded.as_slice_mut().expect("padded tensors are contiguous");
    let src = grad_cols.as_slice().expect("standard layout");
    for (m, &(_, k, r, c)) in cells.iter().enumerate() {
        let row = &src[m * cin * WINDOW..(m + 1) * cin * WINDOW];
        for ci in 0..cin {
            let base = ((ci * panels + k) * ph + r) * pw + c;
            for dr in 0..KERNEL_ROWS {
                let at = base + dr * pw;
                let from = ci * WINDOW + dr * KERNEL_COLS;
                for (d, g) in dst[at..at + KERNEL_COLS].iter_mut().zip(&row[from..from + KERNEL_COLS]) {
                    *d += *g;
                }
            }
        }
    }
}

fn kernel_matrix<F: Real>(k: &Array4<F>) -> Array2<F> {
    let o = k.shape()[0];
    k.to_shape((o, k.len() / o)).expect("standard layout").to_owned()
}

fn check_input<F>(x: &SphereTensor<F>, layer: &ConvLayer<F>) -> Result<()>
where
    F: Real,
{
    if x.channels() != layer.in_channels() {
        return Err(Error::shape(format!("input has {} channels, layer expects {}", x.channels(), layer.in_channels())));
    }
    Ok(())
}

pub fn forward<F: Real>(x: &SphereTensor<F>, layer: &ConvLayer<F>) -> Result<SphereTensor<F>> {
    forward_cached(x, layer).map(|(y, _)| y)
}

pub fn forward_cached<F: Real>(x: &SphereTensor<F>, layer: &ConvLayer<F>) -> Result<(SphereTensor<F>, ConvCache<F>)> {
    check_input(x, layer)?;
    let layout = x.layout().clone();
    let kernels = expand_kernel(layer);
    let padded = pad(x);
    let mut y = SphereTensor::zeros(layout.clone(), layer.out_channels());
    let mut caches = Vec::with_capacity(2);
    for parity in 0..2 {
        let cells = parity_cells(&layout, parity);
        let cols = im2col(&padded, &cells);
        let out = cols.dot(&kernel_matrix(kernels.parity(parity)).t());
        let mut flat = y.flat_mut();
        for (m, &(idx, ..)) in cells.iter().enumerate() {
            for (o, v) in out.row(m).iter().enumerate() {
                flat[[o, idx]] = *v + layer.bias[o];
            }
        }
        caches.push(cols);
    }
    let down = caches.pop().unwrap();
    let up = caches.pop().unwrap();
    Ok((y, ConvCache { cols: [up, down] }))
}

pub fn backward<F: Real>(x: &SphereTensor<F>, layer: &ConvLayer<F>, upstream: &SphereTensor<F>) -> Result<ConvGrads<F>> {
    let (_, cache) = forward_cached(x, layer)?;
    backward_cached(x.layout(), layer, &cache, upstream)
}

pub fn backward_cached<F: Real>(
    layout: &Arc<LayoutMap>,
    layer: &ConvLayer<F>,
    cache: &ConvCache<F>,
    upstream: &SphereTensor<F>,
) -> Result<ConvGrads<F>> {
    if upstream.channels() != layer.out_channels() {
        return Err(Error::shape(format!(
            "upstream gradient has {} channels, layer outputs {}",
            upstream.channels(),
            layer.out_channels()
        )));
    }
    let kernels = expand_kernel(layer);
    let cin = layer.in_channels();
    let mut grad_padded = Array4::zeros((cin, PANELS, layout.padded_height(), layout.padded_width()));
    let mut gk = Vec::with_capacity(2);
    let gflat = upstream.flat();
    for parity in 0..2 {
        let cells = parity_cells(layout, parity);
        let mut g = Array2::zeros((cells.len(), layer.out_channels()));
        for (m, &(idx, ..)) in cells.iter().enumerate() {
            g.row_mut(m).assign(&gflat.column(idx));
        }
        let cols = &cache.cols[parity];
        let gkm = g.t().dot(cols);
        gk.push(gkm.into_shape_with_order((layer.out_channels(), cin, KERNEL_ROWS, KERNEL_COLS)).expect("kernel shape"));
        let gcols = g.dot(&kernel_matrix(kernels.parity(parity)));
        col2im(&gcols, &cells, &mut grad_padded);
    }
    let weights = fold_kernel_grad(&gk[0], &gk[1]);
    let bias = gflat.sum_axis(Axis(1));
    let input = unpad_accumulate(layout, &grad_padded);
    Ok(ConvGrads { input, weights, bias })
}

/// Call-table convolution: gathers the ten footprint faces of every face,
/// builds the three imaginary vertex pixels explicitly and applies the 13 taps.
/// Accumulates in `f64`. Input and output are `channels × faces`.
pub fn reference_conv<F: Real>(x: &Array2<F>, table: &CallTable, layer: &ConvLayer<F>, grid: &crate::icosphere::IcosphereGrid) -> Result<Array2<F>> {
    use crate::icosphere::Orientation;
    // imaginary pixels in terms of call-table slots (center, ring, 3 extra)
    const UP_IMAG: [(usize, [usize; 4]); 3] = [(10, [9, 7, 1, 3]), (11, [9, 8, 2, 4]), (12, [7, 8, 5, 6])];
    const DOWN_IMAG: [(usize, [usize; 4]); 3] = [(7, [9, 7, 1, 5]), (8, [9, 8, 2, 6]), (9, [7, 8, 3, 4])];

    if x.nrows() != layer.in_channels() || x.ncols() != table.len() {
        return Err(Error::shape("reference_conv input must be in_channels × faces"));
    }
    let (cout, cin) = (layer.out_channels(), layer.in_channels());
    let mut y = Array2::zeros((cout, table.len()));
    let mut taps = vec![0f64; TAPS];
    for f in 0..table.len() {
        let slots = table.neighbors(f as u32);
        let up = grid.face(f as u32).orientation == Orientation::Up;
        let mut acc = vec![0f64; cout];
        for ci in 0..cin {
            let v: Vec<f64> = slots.iter().map(|&s| x[[ci, s as usize]].f64()).collect();
            taps[..7].copy_from_slice(&v[..7]);
            let (face_taps, imag) = if up { ([7, 8, 9], &UP_IMAG) } else { ([10, 11, 12], &DOWN_IMAG) };
            for (k, t) in face_taps.iter().enumerate() {
                taps[*t] = v[7 + k];
            }
            for (t, four) in imag {
                taps[*t] = four.iter().map(|&s| v[s]).sum::<f64>() / 4.0;
            }
            for (o, a) in acc.iter_mut().enumerate() {
                for (t, tv) in taps.iter().enumerate() {
                    *a += layer.weights[[o, ci, t]].f64() * tv;
                }
            }
        }
        for o in 0..cout {
            y[[o, f]] = F::of(acc[o] + layer.bias[o].f64());
        }
    }
    Ok(y)
}

/// Convolution on raw padded panels with `f64` accumulation, one output cell at
/// a time; used where a plain loop is clearer than the im2col path.
pub fn forward_direct<F: Real>(x: &SphereTensor<F>, layer: &ConvLayer<F>) -> Result<SphereTensor<F>> {
    check_input(x, layer)?;
    let kernels = expand_kernel(layer);
    let padded = pad(x);
    let layout = x.layout();
    let (h, w) = (layout.panel_height(), layout.panel_width());
    let mut y = SphereTensor::zeros(layout.clone(), layer.out_channels());
    let data = y.data_mut();
    for o in 0..layer.out_channels() {
        for k in 0..PANELS {
            for r in 0..h {
                let kern = kernels.parity(r % 2);
                for c in 0..w {
                    let mut acc = layer.bias[o].f64();
                    for ci in 0..layer.in_channels() {
                        for kr in 0..KERNEL_ROWS {
                            for kc in 0..KERNEL_COLS {
                                acc += kern[[o, ci, kr, kc]].f64() * padded[[ci, k, r + kr, c + kc]].f64();
                            }
                        }
                    }
                    data[[o, k, r, c]] = F::of(acc);
                }
            }
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::icosphere::build_grid;
    use crate::layout::build_layout;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layout(level: u32) -> Arc<LayoutMap> {
        Arc::new(build_layout(&build_grid(level).unwrap()))
    }

    fn random_tensor(l: &Arc<LayoutMap>, c: usize, seed: u64) -> SphereTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = SphereTensor::zeros(l.clone(), c);
        t.data_mut().mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        t
    }

    #[test]
    fn masks_have_ten_ones() {
        for p in 0..2 {
            assert_eq!(mask(p).iter().flatten().filter(|&&b| b).count(), 10);
        }
    }

    #[test]
    fn center_only_expansion() {
        let mut l = ConvLayer::<f64>::zeros(1, 1);
        l.weights[[0, 0, 0]] = 1.0;
        let k = expand_kernel(&l);
        for p in 0..2 {
            let kk = k.parity(p);
            assert_eq!(kk.sum(), 1.0);
            assert_eq!(kk[[0, 0, 2, 1]], 1.0);
        }
    }

    #[test]
    fn vertex_tap_spreads_quarters() {
        let mut l = ConvLayer::<f64>::zeros(1, 1);
        l.weights[[0, 0, 12]] = 4.0;
        let k = expand_kernel(&l);
        let ones: Vec<_> = k.up.iter().filter(|&&v| v == 1.0).collect();
        assert_eq!(ones.len(), 4);
        assert_eq!(k.up.sum(), 4.0);
        // C3 is a face tap for down rows
        assert_eq!(k.down[[0, 0, 3, 1]], 4.0);
    }

    #[test]
    fn masked_positions_stay_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = ConvLayer::<f64>::random(2, 3, &mut rng);
        let k = expand_kernel(&l);
        for p in 0..2 {
            let m = mask(p);
            for r in 0..KERNEL_ROWS {
                for c in 0..KERNEL_COLS {
                    if !m[r][c] {
                        assert!(k.parity(p).slice(s![.., .., r, c]).iter().all(|&v| v == 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn identity_kernel_is_identity() {
        let l = layout(2);
        let x = random_tensor(&l, 3, 1);
        let y = forward(&x, &ConvLayer::identity(3)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn im2col_matches_direct() {
        let l = layout(2);
        let x = random_tensor(&l, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut layer = ConvLayer::<f64>::random(2, 3, &mut rng);
        layer.bias = Array1::from(vec![0.1, -0.2, 0.3]);
        let a = forward(&x, &layer).unwrap();
        let b = forward_direct(&x, &layer).unwrap();
        let d = (a.data() - b.data()).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(d < 1e-12, "{d}");
    }

    #[test]
    fn channel_mismatch() {
        let l = layout(1);
        let x = random_tensor(&l, 2, 5);
        assert!(forward(&x, &ConvLayer::<f64>::zeros(3, 1)).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let l = layout(1);
        let x = random_tensor(&l, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = ConvLayer::<f64>::random(2, 2, &mut rng);
        let g = backward(&x, &layer, &SphereTensor::zeros(l.clone(), 2)).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.weights.iter().all(|&v| v == 0.0));
        assert!(g.bias.iter().all(|&v| v == 0.0));
    }
}
