//! The SLIIF decoder: a fully connected network applied to batches of rows.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::Real;

pub const DEFAULT_DEPTH: usize = 5;
pub const DEFAULT_HIDDEN: usize = 256;
pub const DEFAULT_FREQUENCIES: usize = 10;
pub const RGB: usize = 3;

/// Decoder input width: six ring features, γ(r), γ(θ) and the two cell values.
pub fn input_width(channels: usize, l_freq: usize) -> usize {
    6 * channels + 4 * l_freq + 2
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<F> {
    /// `out × in`.
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Real> Linear<F> {
    fn random<R: Rng>(inp: usize, out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        let mut draw = || F::of(rng.gen_range(-bound..bound));
        let weight = Array2::from_shape_simple_fn((out, inp), &mut draw);
        let bias = Array1::from_shape_simple_fn(out, draw);
        Linear { weight, bias }
    }

    fn zeros(inp: usize, out: usize) -> Self {
        Linear { weight: Array2::zeros((out, inp)), bias: Array1::zeros(out) }
    }

    fn apply(&self, x: &Array2<F>) -> Array2<F> {
        x.dot(&self.weight.t()) + &self.bias
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliifDecoder<F = f32> {
    pub layers: Vec<Linear<F>>,
    /// Rectifier between layers; switched off only in tests.
    pub relu: bool,
    pub channels: usize,
    pub l_freq: usize,
}

#[derive(Clone, Debug)]
pub struct DecoderGrads<F> {
    pub weights: Vec<Array2<F>>,
    pub biases: Vec<Array1<F>>,
    /// `rows × input_width`.
    pub input: Array2<F>,
}

/// Activations of one forward pass: the input of every layer.
#[derive(Clone, Debug)]
pub struct DecoderTape<F> {
    inputs: Vec<Array2<F>>,
}

impl<F: Real> SliifDecoder<F> {
    pub fn random<R: Rng>(channels: usize, l_freq: usize, hidden: usize, depth: usize, rng: &mut R) -> Self {
        let dims = Self::dims(channels, l_freq, hidden, depth);
        let layers = dims.windows(2).map(|d| Linear::random(d[0], d[1], rng)).collect();
        SliifDecoder { layers, relu: true, channels, l_freq }
    }

    pub fn zeros(channels: usize, l_freq: usize, hidden: usize, depth: usize) -> Self {
        let dims = Self::dims(channels, l_freq, hidden, depth);
        let layers = dims.windows(2).map(|d| Linear::zeros(d[0], d[1])).collect();
        SliifDecoder { layers, relu: true, channels, l_freq }
    }

    /// All weights zero; the output bias is `rgb`.
    pub fn constant(channels: usize, l_freq: usize, hidden: usize, depth: usize, rgb: [F; 3]) -> Self {
        let mut d = Self::zeros(channels, l_freq, hidden, depth);
        d.layers.last_mut().unwrap().bias.assign(&Array1::from(rgb.to_vec()));
        d
    }

    /// Outputs the mean of the six ring features' first three channels, which
    /// makes rendering equal to area-weighted ring-mean interpolation. Exact for
    /// nonnegative features.
    pub fn ring_mean(channels: usize, l_freq: usize, hidden: usize, depth: usize) -> Self {
        assert!(channels >= RGB && hidden >= RGB && depth >= 1);
        let mut d = Self::zeros(channels, l_freq, hidden, depth);
        for (l, layer) in d.layers.iter_mut().enumerate() {
            for k in 0..RGB {
                if l == 0 {
                    for slot in 0..6 {
                        layer.weight[[k, slot * channels + k]] = F::of(1.0 / 6.0);
                    }
                } else {
                    layer.weight[[k, k]] = F::one();
                }
            }
        }
        d
    }

    fn dims(channels: usize, l_freq: usize, hidden: usize, depth: usize) -> Vec<usize> {
        assert!(depth >= 1);
        let mut dims = vec![input_width(channels, l_freq)];
        dims.extend(std::iter::repeat(hidden).take(depth - 1));
        dims.push(RGB);
        dims
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check(&self, x: &ArrayView2<F>) -> Result<()> {
        if x.ncols() != self.input_width() {
            return Err(Error::shape(format!("decoder input width {} != {}", x.ncols(), self.input_width())));
        }
        Ok(())
    }

    /// `rows × input_width` → `rows × 3`.
    pub fn forward(&self, x: ArrayView2<F>) -> Result<Array2<F>> {
        self.forward_tape(x).map(|(y, _)| y)
    }

    pub fn forward_tape(&self, x: ArrayView2<F>) -> Result<(Array2<F>, DecoderTape<F>)> {
        self.check(&x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.apply(&a);
            if l < last && self.relu {
                z.mapv_inplace(|v| v.max(F::zero()));
            }
            inputs.push(std::mem::replace(&mut a, z));
        }
        Ok((a, DecoderTape { inputs }))
    }

    pub fn backward(&self, tape: &DecoderTape<F>, grad_out: ArrayView2<F>) -> Result<DecoderGrads<F>> {
        let rows = tape.inputs[0].nrows();
        if grad_out.dim() != (rows, RGB) {
            return Err(Error::shape(format!("decoder output gradient {:?} != ({rows}, 3)", grad_out.dim())));
        }
        let n = self.layers.len();
        let mut weights = vec![Array2::zeros((0, 0)); n];
        let mut biases = vec![Array1::zeros(0); n];
        let mut g = grad_out.to_owned();
        for l in (0..n).rev() {
            let a = &tape.inputs[l];
            weights[l] = g.t().dot(a);
            biases[l] = g.sum_axis(Axis(0));
            let mut gin = g.dot(&self.layers[l].weight);
            if l > 0 && self.relu {
                // inputs of layer l are rectified outputs of layer l-1
                ndarray::Zip::from(&mut gin).and(a).for_each(|gv, &av| {
                    if av <= F::zero() {
                        *gv = F::zero();
                    }
                });
            }
            g = gin;
        }
        Ok(DecoderGrads { weights, biases, input: g })
    }

    /// Parameters flattened in declaration order: per layer, weight then bias.
    pub fn params(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }
}

/// Forward pass plus a closure producing exact gradients for an output gradient.
pub fn decoder_forward_backward<'a, F: Real>(
    dec: &'a SliifDecoder<F>,
    input: ArrayView2<F>,
) -> Result<(Array2<F>, impl Fn(ArrayView2<F>) -> Result<DecoderGrads<F>> + 'a)> {
    let (y, tape) = dec.forward_tape(input)?;
    Ok((y, move |g: ArrayView2<F>| dec.backward(&tape, g)))
}
