//! The super-resolution model (GA-Conv residual backbone followed by the SLIIF
//! decoder), its exact gradient and the training loop.

use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::{backward_cached, forward_cached, ConvCache, ConvLayer};
use crate::data::{bicubic_upsample, downsample_box, Dataset, FeatureProvider};
use crate::decoder::SliifDecoder;
use crate::error::{Error, Result};
use crate::icosphere::{build_grid, IcosphereGrid};
use crate::layout::{build_layout, sample_erp_to_sphere, LayoutMap, SphereTensor};
use crate::metrics::{build_mask, l1_multiscale, l1_multiscale_grad, masked_l1, ws_psnr, FeatureMask};
use crate::projection::ProjectionSpec;
use crate::sliif::{
    convert_adjoint, convert_prepared, decoder_inputs, ensemble, ensemble_backward, render_prepared, scatter_feature_grad,
    PixelQueries, QueryPoint,
};
use crate::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub level: u32,
    pub channels: usize,
    pub res_blocks: usize,
    pub l_freq: usize,
    pub hidden: usize,
    pub depth: usize,
}

impl ModelConfig {
    pub fn paper() -> Self {
        ModelConfig { level: 5, channels: 128, res_blocks: 16, l_freq: 10, hidden: 256, depth: 5 }
    }

    pub fn toy() -> Self {
        ModelConfig { level: 4, channels: 16, res_blocks: 2, l_freq: 4, hidden: 256, depth: 5 }
    }

    /// Small enough to finite-difference every parameter.
    pub fn micro() -> Self {
        ModelConfig { level: 2, channels: 4, res_blocks: 1, l_freq: 2, hidden: 8, depth: 5 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 3 || self.hidden < 3 || self.depth == 0 || self.l_freq == 0 {
            return Err(Error::invalid(format!("unusable model configuration {self:?}")));
        }
        if self.level > crate::icosphere::MAX_LEVEL {
            return Err(Error::LevelOutOfRange(self.level));
        }
        Ok(())
    }
}

/// Provenance stored with the weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct ModelMeta {
    pub scale: u32,
    pub seed: u64,
}

/// Head convolution, residual blocks of two convolutions, tail convolution and
/// a skip from the head output around the body.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<F = f32> {
    pub head: ConvLayer<F>,
    pub blocks: Vec<[ConvLayer<F>; 2]>,
    pub tail: ConvLayer<F>,
}

struct BlockTape<F> {
    first: ConvCache<F>,
    /// Rectified output of the first convolution.
    hidden: SphereTensor<F>,
    second: ConvCache<F>,
}

pub struct BackboneTape<F> {
    head: ConvCache<F>,
    blocks: Vec<BlockTape<F>>,
    tail: ConvCache<F>,
}

fn add_assign<F: Real>(a: &mut SphereTensor<F>, b: &SphereTensor<F>) {
    *a.data_mut() += b.data();
}

impl<F: Real> Backbone<F> {
    pub fn random<R: Rng>(in_channels: usize, channels: usize, res_blocks: usize, rng: &mut R) -> Self {
        let head = ConvLayer::random(in_channels, channels, rng);
        let blocks = (0..res_blocks).map(|_| [ConvLayer::random(channels, channels, rng), ConvLayer::random(channels, channels, rng)]).collect();
        let tail = ConvLayer::random(channels, channels, rng);
        Backbone { head, blocks, tail }
    }

    pub fn layers(&self) -> Vec<&ConvLayer<F>> {
        let mut v = vec![&self.head];
        for b in &self.blocks {
            v.extend(b.iter());
        }
        v.push(&self.tail);
        v
    }

    fn layers_mut(&mut self) -> Vec<&mut ConvLayer<F>> {
        let mut v = vec![&mut self.head];
        for b in &mut self.blocks {
            v.extend(b.iter_mut());
        }
        v.push(&mut self.tail);
        v
    }

    pub fn forward(&self, x: &SphereTensor<F>) -> Result<SphereTensor<F>> {
        self.forward_tape(x).map(|(y, _)| y)
    }

    pub fn forward_tape(&self, x: &SphereTensor<F>) -> Result<(SphereTensor<F>, BackboneTape<F>)> {
        let (h0, head) = forward_cached(x, &self.head)?;
        let mut r = h0.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for [c1, c2] in &self.blocks {
            let (mut t, first) = forward_cached(&r, c1)?;
            t.data_mut().mapv_inplace(|v| v.max(F::zero()));
            let (u, second) = forward_cached(&t, c2)?;
            add_assign(&mut r, &u);
            blocks.push(BlockTape { first, hidden: t, second });
        }
        let (mut y, tail) = forward_cached(&r, &self.tail)?;
        add_assign(&mut y, &h0);
        Ok((y, BackboneTape { head, blocks, tail }))
    }

    /// Weight and bias gradients of every layer, in [`layers`](Self::layers) order.
    pub fn backward(&self, tape: &BackboneTape<F>, grad: &SphereTensor<F>) -> Result<Vec<(ndarray::Array3<F>, ndarray::Array1<F>)>> {
        let layout = grad.layout().clone();
        let mut out = Vec::with_capacity(2 + 2 * self.blocks.len());
        let g_tail = backward_cached(&layout, &self.tail, &tape.tail, grad)?;
        let mut g_r = g_tail.input;
        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for ([c1, c2], bt) in self.blocks.iter().zip(&tape.blocks).rev() {
            let g2 = backward_cached(&layout, c2, &bt.second, &g_r)?;
            let mut g_t = g2.input;
            ndarray::Zip::from(g_t.data_mut()).and(bt.hidden.data()).for_each(|g, &h| {
                if h <= F::zero() {
                    *g = F::zero();
                }
            });
            let g1 = backward_cached(&layout, c1, &bt.first, &g_t)?;
            add_assign(&mut g_r, &g1.input);
            block_grads.push([(g1.weights, g1.bias), (g2.weights, g2.bias)]);
        }
        add_assign(&mut g_r, grad);
        let g_head = backward_cached(&layout, &self.head, &tape.head, &g_r)?;
        out.push((g_head.weights, g_head.bias));
        for [a, b] in block_grads.into_iter().rev() {
            out.push(a);
            out.push(b);
        }
        out.push((g_tail.weights, g_tail.bias));
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct SrModel<F = f32> {
    pub config: ModelConfig,
    pub meta: ModelMeta,
    pub backbone: Backbone<F>,
    pub decoder: SliifDecoder<F>,
    pub grid: Arc<IcosphereGrid>,
    pub layout: Arc<LayoutMap>,
}

impl<F: Real> SrModel<F> {
    /// Randomly initialized from `meta.seed`.
    pub fn new(config: ModelConfig, meta: ModelMeta) -> Result<Self> {
        config.validate()?;
        let grid = Arc::new(build_grid(config.level)?);
        let layout = Arc::new(build_layout(&grid));
        let mut rng = ChaCha8Rng::seed_from_u64(meta.seed);
        let backbone = Backbone::random(3, config.channels, config.res_blocks, &mut rng);
        let decoder = SliifDecoder::random(config.channels, config.l_freq, config.hidden, config.depth, &mut rng);
        Ok(SrModel { config, meta, backbone, decoder, grid, layout })
    }

    /// Shapes of every parameter array in storage order: per convolution its
    /// weights and bias, then per decoder layer its weight and bias.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut v = Vec::new();
        for l in self.backbone.layers() {
            v.push(l.weights.shape().to_vec());
            v.push(l.bias.shape().to_vec());
        }
        for l in &self.decoder.layers {
            v.push(l.weight.shape().to_vec());
            v.push(l.bias.shape().to_vec());
        }
        v
    }

    pub fn num_params(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    pub fn params(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in self.backbone.layers() {
            out.extend(l.weights.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out.extend(self.decoder.params());
        out
    }

    pub fn set_params(&mut self, p: &[F]) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(Error::shape(format!("{} parameters for a model with {}", p.len(), self.num_params())));
        }
        let mut it = p.iter().copied();
        for l in self.backbone.layers_mut() {
            l.weights.iter_mut().for_each(|w| *w = it.next().unwrap());
            l.bias.iter_mut().for_each(|w| *w = it.next().unwrap());
        }
        for l in &mut self.decoder.layers {
            l.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
            l.bias.iter_mut().for_each(|w| *w = it.next().unwrap());
        }
        Ok(())
    }

    /// The same model in another scalar type.
    pub fn cast<G: Real>(&self) -> SrModel<G> {
        let mut m = SrModel::<G> {
            config: self.config,
            meta: self.meta,
            backbone: Backbone {
                head: ConvLayer::zeros(3, self.config.channels),
                blocks: (0..self.backbone.blocks.len())
                    .map(|_| [ConvLayer::zeros(self.config.channels, self.config.channels), ConvLayer::zeros(self.config.channels, self.config.channels)])
                    .collect(),
                tail: ConvLayer::zeros(self.config.channels, self.config.channels),
            },
            decoder: SliifDecoder::zeros(self.config.channels, self.config.l_freq, self.config.hidden, self.config.depth),
            grid: self.grid.clone(),
            layout: self.layout.clone(),
        };
        let p: Vec<G> = self.params().iter().map(|v| G::of(v.f64())).collect();
        m.set_params(&p).expect("same architecture");
        m.decoder.relu = self.decoder.relu;
        m
    }

    /// Samples an LR equirectangular image at the grid's face centers.
    pub fn sphere_input(&self, lr: ArrayView3<f32>) -> Result<SphereTensor<F>> {
        let t = sample_erp_to_sphere(lr, &self.grid, &self.layout)?;
        SphereTensor::from_array(self.layout.clone(), t.data().mapv(|v| F::of(v as f64)))
    }

    pub fn features(&self, lr: ArrayView3<f32>) -> Result<SphereTensor<F>> {
        self.backbone.forward(&self.sphere_input(lr)?)
    }
}

/// Super-resolves an LR equirectangular image into the output projection.
pub fn forward_sr<F: Real>(model: &SrModel<F>, lr: ArrayView3<f32>, spec: &ProjectionSpec) -> Result<Array3<F>> {
    let feats = model.features(lr)?;
    let pq = PixelQueries::build(&model.grid, spec)?;
    render_prepared(feats.face_values().view(), &model.grid, &pq, &model.decoder)
}

/// The masked feature term of the loss.
pub struct FeatureTerm<'a, F> {
    /// Queries of the feature map's pixels.
    pub queries: &'a PixelQueries,
    /// `C × H × W` features computed directly in that projection.
    pub target: ArrayView3<'a, F>,
    pub mask: MaskSource<'a>,
    pub lambda: f64,
}

/// Where the feature mask comes from. Either way it is held fixed while
/// differentiating.
pub enum MaskSource<'a> {
    Fixed(&'a FeatureMask),
    /// Built from the model's current output at the feature map's pixels
    /// against this image, which must have the feature map's size.
    Detached(ArrayView3<'a, f32>),
}

impl<F: Real> FeatureTerm<'_, F> {
    fn resolve(&self, model: &SrModel<F>, faces: &Array2<F>) -> Result<std::borrow::Cow<'_, FeatureMask>> {
        match &self.mask {
            MaskSource::Fixed(m) => Ok(std::borrow::Cow::Borrowed(*m)),
            MaskSource::Detached(img) => {
                let sr = render_prepared(faces.view(), &model.grid, self.queries, &model.decoder)?;
                let gt = img.mapv(|v| F::of(v as f64));
                Ok(std::borrow::Cow::Owned(build_mask(sr.view(), gt.view(), self.target)?))
            }
        }
    }
}

/// One training example: the sphere input, sampled queries with their ground
/// truth and an optional feature term.
pub struct Batch<'a, F> {
    pub input: &'a SphereTensor<F>,
    pub queries: Vec<&'a QueryPoint>,
    /// `N × 3`.
    pub targets: Array2<F>,
    pub feature: Option<FeatureTerm<'a, F>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts<F> {
    pub total: F,
    pub l1: F,
    pub feature: F,
}

fn predict<F: Real>(model: &SrModel<F>, faces: &Array2<F>, batch: &Batch<'_, F>) -> Result<(Array2<F>, Array2<F>, crate::decoder::DecoderTape<F>)> {
    let x = decoder_inputs(faces.view(), &batch.queries, model.decoder.l_freq, model.grid.edge_length_scale())?;
    let (y, tape) = model.decoder.forward_tape(x.view())?;
    let pred = ensemble(y.view(), &batch.queries);
    Ok((pred, x, tape))
}

/// Total loss of one batch.
pub fn loss<F: Real>(model: &SrModel<F>, batch: &Batch<'_, F>) -> Result<LossParts<F>> {
    let feats = model.backbone.forward(batch.input)?;
    let faces = feats.face_values();
    let (pred, ..) = predict(model, &faces, batch)?;
    let l1 = l1_multiscale(pred.view(), batch.targets.view())?;
    let mut feature = F::zero();
    let mut total = l1;
    if let Some(ft) = &batch.feature {
        let conv = convert_prepared(faces.view(), ft.queries);
        feature = masked_l1(conv.view(), ft.target, &*ft.resolve(model, &faces)?)?.0;
        total += F::of(ft.lambda) * feature;
    }
    Ok(LossParts { total, l1, feature })
}

/// Loss and its gradient with respect to [`SrModel::params`].
pub fn loss_and_grad<F: Real>(model: &SrModel<F>, batch: &Batch<'_, F>) -> Result<(LossParts<F>, Vec<F>)> {
    let (feats, btape) = model.backbone.forward_tape(batch.input)?;
    let faces = feats.face_values();
    let (pred, _, dtape) = predict(model, &faces, batch)?;
    let l1 = l1_multiscale(pred.view(), batch.targets.view())?;
    let gpred = l1_multiscale_grad(pred.view(), batch.targets.view());
    let gy = ensemble_backward(gpred.view(), &batch.queries);
    let dgrads = model.decoder.backward(&dtape, gy.view())?;
    let (c, nf) = faces.dim();
    let mut gfaces = scatter_feature_grad(dgrads.input.view(), &batch.queries, c, nf);
    let mut feature = F::zero();
    let mut total = l1;
    if let Some(ft) = &batch.feature {
        let conv = convert_prepared(faces.view(), ft.queries);
        let (fl, gconv) = masked_l1(conv.view(), ft.target, &*ft.resolve(model, &faces)?)?;
        feature = fl;
        let lam = F::of(ft.lambda);
        total += lam * fl;
        gfaces.scaled_add(lam, &convert_adjoint(gconv.view(), ft.queries, nf));
    }
    let gfeat = SphereTensor::from_face_values(model.layout.clone(), gfaces.view())?;
    let bgrads = model.backbone.backward(&btape, &gfeat)?;
    let mut g = Vec::with_capacity(model.num_params());
    for (w, b) in bgrads {
        g.extend(w.iter().copied());
        g.extend(b.iter().copied());
    }
    for (w, b) in dgrads.weights.iter().zip(&dgrads.biases) {
        g.extend(w.iter().copied());
        g.extend(b.iter().copied());
    }
    Ok((LossParts { total, l1, feature }, g))
}

/// Adam with moments kept in `f64`.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { beta1, beta2, eps, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step<F: Real>(&mut self, params: &mut [F], grads: &[F], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i].f64();
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let step = lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
            params[i] = F::of(params[i].f64() - step);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// First epoch trained at the decayed rate.
    pub decay_epoch: usize,
    pub decay_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lambda: f64,
    /// First epoch with the feature loss switched on.
    pub lambda_epoch: usize,
    /// Query pixels per step.
    pub queries: usize,
    /// Output scales drawn from uniformly at every step; each must divide the
    /// dataset scale.
    pub scales: Vec<usize>,
    pub seed: u64,
    /// Evaluate training-set WS-PSNR every this many epochs (0: only after the last).
    pub eval_every: usize,
}

impl TrainConfig {
    /// The published schedule.
    pub fn paper() -> Self {
        TrainConfig {
            epochs: 500,
            learning_rate: 1e-4,
            decay_epoch: 400,
            decay_factor: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda: 0.3,
            lambda_epoch: 100,
            queries: 2048,
            scales: vec![2, 4, 8],
            seed: 0,
            eval_every: 0,
        }
    }

    /// The published schedule compressed to `epochs`, for a dataset of the
    /// given scale.
    pub fn toy(epochs: usize, scale: usize, seed: u64) -> Self {
        let mut scales: Vec<usize> = [2, 4].into_iter().filter(|s| *s < scale && scale % s == 0).collect();
        scales.push(scale);
        TrainConfig {
            epochs,
            learning_rate: 2e-3,
            decay_epoch: epochs * 4 / 5,
            lambda_epoch: epochs / 5,
            queries: 2048,
            scales,
            seed,
            ..Self::paper()
        }
    }

    pub fn lambda_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lambda_epoch {
            self.lambda
        } else {
            0.0
        }
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch {
            self.learning_rate * self.decay_factor
        } else {
            self.learning_rate
        }
    }

    fn validate(&self, scale: usize) -> Result<()> {
        if self.epochs == 0 || self.queries == 0 || self.learning_rate <= 0.0 || self.lambda < 0.0 {
            return Err(Error::invalid("epochs, queries and learning rate must be positive, lambda nonnegative"));
        }
        if self.scales.is_empty() || self.scales.iter().any(|&s| s == 0 || scale % s != 0) {
            return Err(Error::invalid(format!("scales {:?} must divide the dataset scale {scale}", self.scales)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub ws_psnr: Option<f64>,
}

/// Per-dataset state reused across steps: query geometry per output size and
/// per-sample inputs and targets.
pub struct TrainingCache<F> {
    /// Query geometry per entry of the scale list.
    scale_queries: Vec<PixelQueries>,
    /// Queries at the LR size, for the feature term.
    lr_queries: PixelQueries,
    /// Queries at the HR size, for evaluation.
    hr_queries: PixelQueries,
    inputs: Vec<SphereTensor<F>>,
    /// Per sample, per scale: ground truth.
    targets: Vec<Vec<Array3<f32>>>,
    provider_features: Vec<Array3<F>>,
}

impl<F: Real> TrainingCache<F> {
    pub fn new(model: &SrModel<F>, data: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate(data.scale)?;
        let (h, w, _) = data.samples[0].lr.dim();
        if data.samples.iter().any(|s| s.lr.dim() != (h, w, 3)) {
            return Err(Error::invalid("all training samples must share one size"));
        }
        let build = |s: usize| PixelQueries::build(&model.grid, &ProjectionSpec::erp(h * s, w * s));
        let mut uniq: Vec<(usize, PixelQueries)> = Vec::new();
        for &s in cfg.scales.iter().chain([1, data.scale].iter()) {
            if !uniq.iter().any(|(k, _)| *k == s) {
                uniq.push((s, build(s)?));
            }
        }
        let get = |s: usize| uniq.iter().find(|(k, _)| *k == s).map(|(_, q)| q.clone()).unwrap();
        let provider = FeatureProvider::new(model.config.channels, FeatureProvider::DEFAULT_SEED);
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        let mut provider_features = Vec::new();
        for s in &data.samples {
            inputs.push(model.sphere_input(s.lr.view())?);
            targets.push(cfg.scales.iter().map(|&k| downsample_box(s.hr.view(), data.scale / k)).collect::<Result<Vec<_>>>()?);
            provider_features.push(provider.apply(s.lr.view()));
        }
        Ok(TrainingCache {
            scale_queries: cfg.scales.iter().map(|&s| get(s)).collect(),
            lr_queries: get(1),
            hr_queries: get(data.scale),
            inputs,
            targets,
            provider_features,
        })
    }
}

/// Trains in place and returns the per-epoch trace.
pub fn train<F: Real>(model: &mut SrModel<F>, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochStats>> {
    let cache = TrainingCache::new(model, data, cfg)?;
    train_cached(model, data, cfg, &cache, |_| {})
}

/// As [`train`] with a prepared cache and a callback run after every epoch.
pub fn train_cached<F: Real>(
    model: &mut SrModel<F>,
    data: &Dataset,
    cfg: &TrainConfig,
    cache: &TrainingCache<F>,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.num_params(), cfg.beta1, cfg.beta2, cfg.eps);
    let mut params = model.params();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lambda = cfg.lambda_at(epoch);
        let lr = cfg.learning_rate_at(epoch);
        let mut sum = 0.0;
        for &i in &order {
            let si = rng.gen_range(0..cfg.scales.len());
            let pq = &cache.scale_queries[si];
            let gt = &cache.targets[i][si];
            let mut queries = Vec::with_capacity(cfg.queries);
            let mut targets = Array2::zeros((cfg.queries, 3));
            while queries.len() < cfg.queries {
                let p = rng.gen_range(0..pq.len());
                if let Some(q) = &pq.queries[p] {
                    let (y, x) = (p / pq.width, p % pq.width);
                    for c in 0..3 {
                        targets[[queries.len(), c]] = F::of(gt[[y, x, c]] as f64);
                    }
                    queries.push(q);
                }
            }
            let feature = if lambda > 0.0 {
                let mask = MaskSource::Detached(data.samples[i].lr.view());
                Some(FeatureTerm { queries: &cache.lr_queries, target: cache.provider_features[i].view(), mask, lambda })
            } else {
                None
            };
            let batch = Batch { input: &cache.inputs[i], queries, targets, feature };
            let (parts, grads) = loss_and_grad(model, &batch)?;
            let total = parts.total.f64();
            if !total.is_finite() || grads.iter().any(|g| !g.f64().is_finite()) {
                let norm = params.iter().map(|p| p.f64() * p.f64()).sum::<f64>().sqrt();
                return Err(Error::NonFinite { step, detail: format!("loss {total}, parameter norm {norm}") });
            }
            adam.step(&mut params, &grads, lr);
            model.set_params(&params)?;
            sum += total;
            step += 1;
        }
        let last = epoch + 1 == cfg.epochs;
        let eval = last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0);
        let ws = if eval { Some(evaluate_cached(model, data, cache)?) } else { None };
        let stats = EpochStats { epoch, loss: sum / data.len() as f64, ws_psnr: ws };
        on_epoch(&stats);
        trace.push(stats);
    }
    Ok(trace)
}

/// Mean WS-PSNR of clamped ×scale outputs against the HR images.
pub fn evaluate<F: Real>(model: &SrModel<F>, data: &Dataset) -> Result<f64> {
    let (h, w, _) = data.samples[0].lr.dim();
    let pq = PixelQueries::build(&model.grid, &ProjectionSpec::erp(h * data.scale, w * data.scale))?;
    let mut total = 0.0;
    for s in &data.samples {
        total += eval_one(model, &model.sphere_input(s.lr.view())?, &pq, s.hr.view())?;
    }
    Ok(total / data.len() as f64)
}

fn evaluate_cached<F: Real>(model: &SrModel<F>, data: &Dataset, cache: &TrainingCache<F>) -> Result<f64> {
    let mut total = 0.0;
    for (i, s) in data.samples.iter().enumerate() {
        total += eval_one(model, &cache.inputs[i], &cache.hr_queries, s.hr.view())?;
    }
    Ok(total / data.len() as f64)
}

fn eval_one<F: Real>(model: &SrModel<F>, input: &SphereTensor<F>, pq: &PixelQueries, hr: ArrayView3<f32>) -> Result<f64> {
    let feats = model.backbone.forward(input)?;
    let sr = render_prepared(feats.face_values().view(), &model.grid, pq, &model.decoder)?;
    let sr = sr.mapv(|v| v.f64().clamp(0.0, 1.0) as f32);
    ws_psnr(hr, sr.view())
}

/// Mean WS-PSNR of bicubic upsampling over the dataset.
pub fn bicubic_baseline(data: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    for s in &data.samples {
        let up = bicubic_upsample(s.lr.view(), data.scale).mapv(|v| v.clamp(0.0, 1.0));
        total += ws_psnr(s.hr.view(), up.view())?;
    }
    Ok(total / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_step_reduces_a_quadratic() {
        let mut adam = Adam::new(1, 0.9, 0.999, 1e-8);
        let mut x = [3.0f64];
        let before = x[0] * x[0];
        let g = [2.0 * x[0]];
        adam.step(&mut x, &g, 0.1);
        assert!(x[0] * x[0] < before);
        assert!((x[0] - 2.9).abs() < 1e-9);
    }

    #[test]
    fn schedules() {
        let c = TrainConfig::toy(200, 4, 0);
        assert_eq!(c.scales, vec![2, 4]);
        assert_eq!(c.lambda_at(39), 0.0);
        assert_eq!(c.lambda_at(40), 0.3);
        assert_eq!(c.learning_rate_at(159), 2e-3);
        assert!((c.learning_rate_at(160) - 2e-4).abs() < 1e-18);
        let p = TrainConfig::paper();
        assert_eq!((p.lambda_epoch, p.decay_epoch), (100, 400));
    }

    #[test]
    fn params_round_trip() {
        let mut m = SrModel::<f32>::new(ModelConfig::micro(), ModelMeta { scale: 4, seed: 3 }).unwrap();
        let p = m.params();
        assert_eq!(p.len(), m.num_params());
        let q: Vec<f32> = p.iter().map(|v| v * 2.0).collect();
        m.set_params(&q).unwrap();
        assert_eq!(m.params(), q);
        assert!(m.set_params(&q[1..]).is_err());
        assert_eq!(m.cast::<f64>().cast::<f32>().params(), q);
    }
}
