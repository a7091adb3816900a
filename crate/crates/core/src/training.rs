//! Loss stack, momentum SGD, source-domain episodic training, strictly
//! constrained target fine-tuning and the checkpoint format.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{ChannelProjection, ConvBackbone, ConvLayer, Encoder, EncoderTape, TrainScope};
use crate::episodes::{Dataset, Domain, Episode, FinetunePool, Sample};
use crate::error::{Error, Result};
use crate::fewshot::{segment_forward, PredictionGrad, PredictionPair};
use crate::io;
use crate::linalg::Matrix;
use crate::rng::Rng;
use crate::tensor::{BinaryMask, FeatureMap};
use crate::ttis::{self, TimeGrid, TransformKind, TtisGrads, TtisMode, TtisParams, TtisTape};

/// Encoder plus TTIs parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub encoder: Encoder,
    pub ttis: TtisParams,
}

impl Model {
    pub fn conv(channels: usize, seed: u64) -> Self {
        Self {
            encoder: Encoder::Conv(ConvBackbone::seeded(channels, seed)),
            ttis: TtisParams::identity(channels),
        }
    }

    pub fn projection(channels: usize) -> Self {
        Self {
            encoder: Encoder::Projection(ChannelProjection::identity(channels)),
            ttis: TtisParams::identity(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.ttis.channels()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.encoder
            .param_names()
            .into_iter()
            .map(str::to_string)
            .chain(TTIS_NAMES.iter().map(|s| s.to_string()))
            .collect()
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut v = self.encoder.param_slices();
        v.extend([
            self.ttis.m_amp.as_slice(),
            self.ttis.m_phase.as_slice(),
            self.ttis.v_amp.as_slice(),
            self.ttis.v_phase.as_slice(),
        ]);
        v
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.encoder.param_slices_mut();
        v.extend(self.ttis.flat_slices_mut());
        v
    }

    /// Whether tensor `index` (in [`Self::param_slices`] order) is updated.
    pub fn is_trainable(&self, index: usize) -> bool {
        let n = self.encoder.param_slices().len();
        index >= n || self.encoder.is_trainable(index)
    }

    /// The domain-specific feature of one input.
    pub fn features(&self, input: &FeatureMap) -> Result<FeatureMap> {
        Ok(self.encoder.forward(input)?.0)
    }
}

const TTIS_NAMES: [&str; 4] = ["ttis.m_amp", "ttis.m_phase", "ttis.v_amp", "ttis.v_phase"];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub encoder: Vec<Vec<f64>>,
    pub ttis: TtisGrads,
}

impl ModelGrads {
    pub fn zeros(model: &Model) -> Self {
        Self {
            encoder: model.encoder.param_slices().iter().map(|s| vec![0.0; s.len()]).collect(),
            ttis: TtisGrads::zeros(model.channels()),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.encoder.iter().map(Vec::as_slice).collect();
        v.extend(self.ttis.slices());
        v
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = self.encoder.iter_mut().map(Vec::as_mut_slice).collect();
        v.extend(self.ttis.slices_mut());
        v
    }

    fn accumulate(&mut self, other: &ModelGrads) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// Form of the TTIs parameter regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RegForm {
    /// det(Mᵃ)−1 + det(Mᵖ)−1 + mean(Vᵃ) + mean(Vᵖ).
    #[default]
    Signed,
    /// |det(Mᵃ)−1| + |det(Mᵖ)−1| + |mean(Vᵃ)| + |mean(Vᵖ)|.
    Absolute,
}

/// Whether α is drawn once per transform call or once per episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaPolicy {
    #[default]
    PerCall,
    PerEpisode,
}

/// Everything that shapes one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSettings {
    pub tau: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub grid: TimeGrid,
    pub kind: TransformKind,
    pub mode: TtisMode,
    pub alpha_policy: AlphaPolicy,
    pub use_reg: bool,
    pub use_ds: bool,
    pub reg_form: RegForm,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            tau: 10.0,
            alpha1: 0.5,
            alpha2: 0.5,
            grid: TimeGrid::default(),
            kind: TransformKind::Full,
            mode: TtisMode::TrainPerturbed,
            alpha_policy: AlphaPolicy::PerCall,
            use_reg: true,
            use_ds: true,
            reg_form: RegForm::Signed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_ds")]
    pub l_ds: f64,
    #[serde(rename = "L_da_q")]
    pub l_da_q: f64,
    #[serde(rename = "L_da_s")]
    pub l_da_s: f64,
    #[serde(rename = "L_R")]
    pub l_r: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn new(l_ds: f64, l_da_q: f64, l_da_s: f64, l_r: f64) -> Self {
        Self {
            l_ds,
            l_da_q,
            l_da_s,
            l_r,
            total: l_ds + l_da_q + l_da_s + l_r,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_ds, self.l_da_q, self.l_da_s, self.l_r, self.total].iter().all(|v| v.is_finite())
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_prediction(p: &PredictionPair, m: &BinaryMask) -> Result<()> {
    if p.height != m.height() || p.width != m.width() {
        return Err(Error::Shape(format!(
            "prediction {}x{} does not match mask {}x{}",
            p.height,
            p.width,
            m.height(),
            m.width()
        )));
    }
    Ok(())
}

/// Mean binary cross entropy of the foreground probability of a two-way
/// softmax over (τ·fg, τ·bg), evaluated in log-sigmoid form.
pub fn bce_on_similarities(p: &PredictionPair, m: &BinaryMask, tau: f64) -> Result<f64> {
    Ok(bce_with_grad(p, m, tau)?.0)
}

pub fn bce_with_grad(p: &PredictionPair, m: &BinaryMask, tau: f64) -> Result<(f64, PredictionGrad)> {
    check_prediction(p, m)?;
    if !(tau > 0.0) {
        return Err(Error::OutOfRange(format!("temperature must be positive, got {tau}")));
    }
    let n = p.fg.len() as f64;
    let mut grad = PredictionGrad::zeros(p.fg.len());
    let mut loss = 0.0;
    for (i, &label) in m.as_slice().iter().enumerate() {
        let z = tau * (p.fg[i] - p.bg[i]);
        let y = label as f64;
        loss += if label == 1 { softplus(-z) } else { softplus(z) };
        let dz = (sigmoid(z) - y) / n;
        grad.fg[i] = tau * dz;
        grad.bg[i] = -tau * dz;
    }
    Ok((loss / n, grad))
}

pub fn reg_loss(params: &TtisParams, form: RegForm) -> f64 {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let terms = [
        params.m_amp.determinant() - 1.0,
        params.m_phase.determinant() - 1.0,
        mean(&params.v_amp),
        mean(&params.v_phase),
    ];
    match form {
        RegForm::Signed => terms.iter().sum(),
        RegForm::Absolute => terms.iter().map(|t| t.abs()).sum(),
    }
}

pub fn reg_grad(params: &TtisParams, form: RegForm) -> TtisGrads {
    let c = params.channels();
    let sign = |t: f64| match form {
        RegForm::Signed => 1.0,
        RegForm::Absolute => {
            if t > 0.0 {
                1.0
            } else if t < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let det_term = |m: &Matrix| m.determinant_gradient().scaled(sign(m.determinant() - 1.0));
    let v_term = |v: &[f64]| vec![sign(mean(v)) / c as f64; c];
    TtisGrads {
        m_amp: det_term(&params.m_amp),
        m_phase: det_term(&params.m_phase),
        v_amp: v_term(&params.v_amp),
        v_phase: v_term(&params.v_phase),
    }
}

struct Forward {
    ds: FeatureMap,
    enc_tape: EncoderTape,
    da: FeatureMap,
    ttis_tape: TtisTape,
}

fn feature_mask(m: &BinaryMask, stride: usize) -> Result<BinaryMask> {
    m.downsample(stride)
}

/// Draws the perturbation factors of an episode in a fixed order.
fn draw_alphas(n: usize, s: &LossSettings, rng: &mut Rng) -> Vec<Option<f64>> {
    match (s.mode, s.alpha_policy) {
        (TtisMode::EvalClean, _) => vec![None; n],
        (TtisMode::TrainPerturbed, AlphaPolicy::PerCall) => (0..n).map(|_| Some(rng.uniform())).collect(),
        (TtisMode::TrainPerturbed, AlphaPolicy::PerEpisode) => vec![Some(rng.uniform()); n],
    }
}

/// Total loss of one episode and its gradient w.r.t. every model tensor.
///
/// L_ds uses support-only prototypes of the pre-transform features; L_da_q is
/// the support-only plus the combined prediction of the transformed query;
/// L_da_s sums the combined prediction of each transformed support.
pub fn source_loss(ep: &Episode, model: &Model, s: &LossSettings, rng: &mut Rng) -> Result<(LossBreakdown, ModelGrads)> {
    let k = ep.supports.len();
    if k == 0 {
        return Err(Error::Empty("episode has no supports".into()));
    }
    let stride = model.encoder.stride();
    let inputs: Vec<&Sample> = ep.supports.iter().chain(std::iter::once(&ep.query)).collect();
    let masks = inputs
        .iter()
        .map(|x| feature_mask(&x.mask, stride))
        .collect::<Result<Vec<_>>>()?;
    let alphas = draw_alphas(inputs.len(), s, rng);
    let fwd = inputs
        .par_iter()
        .zip(alphas.par_iter())
        .map(|(x, &alpha)| {
            let (ds, enc_tape) = model.encoder.forward(&x.image)?;
            let (da, ttis_tape) = ttis::transform_recorded(&ds, &model.ttis, &s.grid, alpha, s.kind)?;
            Ok(Forward {
                ds,
                enc_tape,
                da,
                ttis_tape,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (c, h, w) = fwd[0].ds.shape();
    let mut d_ds: Vec<FeatureMap> = (0..=k).map(|_| FeatureMap::zeros(c, h, w)).collect();
    let mut d_da: Vec<FeatureMap> = (0..=k).map(|_| FeatureMap::zeros(c, h, w)).collect();
    let add = |acc: &mut FeatureMap, g: &FeatureMap| {
        for (a, b) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *a += b;
        }
    };

    let ds_supports: Vec<(&FeatureMap, &BinaryMask)> = (0..k).map(|i| (&fwd[i].ds, &masks[i])).collect();
    let da_supports: Vec<(&FeatureMap, &BinaryMask)> = (0..k).map(|i| (&fwd[i].da, &masks[i])).collect();
    let mq = &masks[k];

    let mut l_ds = 0.0;
    if s.use_ds {
        let (out, tape) = segment_forward(&ds_supports, &fwd[k].ds, s.alpha1, s.alpha2)?;
        let (loss, g) = bce_with_grad(&out.support_only, mq, s.tau)?;
        l_ds = loss;
        let (dsup, dq) = tape.backward(&fwd[k].ds, Some(&g), None);
        for (i, d) in dsup.iter().enumerate() {
            add(&mut d_ds[i], d);
        }
        add(&mut d_ds[k], &dq);
    }

    let (out, tape) = segment_forward(&da_supports, &fwd[k].da, s.alpha1, s.alpha2)?;
    let (l1, g1) = bce_with_grad(&out.support_only, mq, s.tau)?;
    let (l2, g2) = bce_with_grad(&out.combined, mq, s.tau)?;
    let l_da_q = l1 + l2;
    let (dsup, dq) = tape.backward(&fwd[k].da, Some(&g1), Some(&g2));
    for (i, d) in dsup.iter().enumerate() {
        add(&mut d_da[i], d);
    }
    add(&mut d_da[k], &dq);

    let mut l_da_s = 0.0;
    for shot in 0..k {
        let (out, tape) = segment_forward(&da_supports, &fwd[shot].da, s.alpha1, s.alpha2)?;
        let (loss, g) = bce_with_grad(&out.combined, &masks[shot], s.tau)?;
        l_da_s += loss;
        let (dsup, dq) = tape.backward(&fwd[shot].da, None, Some(&g));
        for (i, d) in dsup.iter().enumerate() {
            add(&mut d_da[i], d);
        }
        add(&mut d_da[shot], &dq);
    }

    let mut grads = ModelGrads::zeros(model);
    let l_r = if s.use_reg {
        grads.ttis.accumulate(&reg_grad(&model.ttis, s.reg_form));
        reg_loss(&model.ttis, s.reg_form)
    } else {
        0.0
    };

    let per_item = fwd
        .par_iter()
        .zip(d_ds.par_iter())
        .zip(d_da.par_iter())
        .map(|((f, dds), dda)| {
            let (tg, mut df) = f.ttis_tape.backward(&model.ttis, dda);
            for (a, b) in df.as_mut_slice().iter_mut().zip(dds.as_slice()) {
                *a += b;
            }
            ModelGrads {
                encoder: model.encoder.backward(&f.enc_tape, &df),
                ttis: tg,
            }
        })
        .collect::<Vec<_>>();
    for g in &per_item {
        grads.accumulate(g);
    }
    let breakdown = LossBreakdown::new(l_ds, l_da_q, l_da_s, l_r);
    if !breakdown.is_finite() {
        return Err(Error::Diverged(format!("non-finite loss {breakdown:?}")));
    }
    Ok((breakdown, grads))
}

/// Momentum buffers, one per model tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub lr: f64,
    pub momentum: f64,
    buffers: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(model: &Model, lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            buffers: model.param_slices().iter().map(|s| vec![0.0; s.len()]).collect(),
        }
    }

    pub fn buffers(&self) -> &[Vec<f64>] {
        &self.buffers
    }
}

/// buffer ← μ·buffer + g; w ← w − lr·buffer.
pub fn sgd_update(weights: &mut [f64], grad: &[f64], buffer: &mut [f64], lr: f64, momentum: f64) {
    assert!(weights.len() == grad.len() && grad.len() == buffer.len(), "gradient shape mismatch");
    for ((w, g), b) in weights.iter_mut().zip(grad).zip(buffer.iter_mut()) {
        *b = momentum * *b + g;
        *w -= lr * *b;
    }
}

/// Applies one momentum step to every trainable tensor of the model.
pub fn sgd_step(model: &mut Model, grads: &ModelGrads, state: &mut OptimState) -> Result<()> {
    let trainable: Vec<bool> = (0..state.buffers.len()).map(|i| model.is_trainable(i)).collect();
    let weights = model.param_slices_mut();
    let g = grads.slices();
    if weights.len() != g.len() || g.len() != state.buffers.len() {
        return Err(Error::Shape("gradient set does not match the model".into()));
    }
    for (i, (w, g)) in weights.into_iter().zip(g).enumerate() {
        if w.len() != g.len() {
            return Err(Error::Shape(format!("gradient {i} has {} entries, weight has {}", g.len(), w.len())));
        }
        if trainable[i] {
            sgd_update(w, g, &mut state.buffers[i], state.lr, state.momentum);
        }
    }
    Ok(())
}

/// Rescales the trainable gradients so their joint norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(model: &Model, grads: &mut ModelGrads, max_norm: f64) -> f64 {
    let trainable: Vec<bool> = (0..grads.slices().len()).map(|i| model.is_trainable(i)).collect();
    let norm = grads
        .slices()
        .iter()
        .zip(&trainable)
        .filter(|(_, &t)| t)
        .flat_map(|(g, _)| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.slices_mut() {
            g.iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

/// Lower and upper determinant bounds checked after every update.
pub const DET_BOUNDS: (f64, f64) = (0.1, 10.0);

fn check_determinants(model: &Model, iteration: usize) -> Result<()> {
    for (name, m) in [("M_amp", &model.ttis.m_amp), ("M_phase", &model.ttis.m_phase)] {
        let det = m.determinant();
        if !(DET_BOUNDS.0..=DET_BOUNDS.1).contains(&det) {
            return Err(Error::Diverged(format!(
                "det({name}) = {det:.4e} left [{}, {}] after iteration {iteration}",
                DET_BOUNDS.0, DET_BOUNDS.1
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub iterations: usize,
    /// Global gradient-norm cap over trainable tensors; 0 disables clipping.
    pub grad_clip: f64,
    pub k: usize,
    pub lr: f64,
    pub momentum: f64,
    pub loss: LossSettings,
}

/// Episodic source training over randomly chosen source categories.
pub fn train_source(
    dataset: &Dataset,
    mut model: Model,
    settings: &TrainSettings,
    rng: &mut Rng,
) -> Result<(Model, Vec<LossBreakdown>)> {
    let categories = dataset.categories(Domain::Source);
    if categories.is_empty() {
        return Err(Error::Empty("no source-domain samples".into()));
    }
    model.encoder.set_trainable(TrainScope::All);
    let mut state = OptimState::new(&model, settings.lr, settings.momentum);
    let mut history = Vec::with_capacity(settings.iterations);
    let mut episode_rng = rng.fork();
    let mut alpha_rng = rng.fork();
    for it in 0..settings.iterations {
        let c = categories[episode_rng.below(categories.len())];
        let ep = crate::episodes::sample_episode(dataset, c, settings.k, &mut episode_rng)?;
        let (loss, mut grads) = source_loss(&ep, &model, &settings.loss, &mut alpha_rng)?;
        clip_gradients(&model, &mut grads, settings.grad_clip);
        sgd_step(&mut model, &grads, &mut state)?;
        check_determinants(&model, it)?;
        history.push(loss);
    }
    Ok((model, history))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Flip {
    None,
    Horizontal,
    Vertical,
}

/// One spatial augmentation: 2×2 cell permutation, then rotation, then flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augment {
    pub flip: Flip,
    /// Counter-clockwise quarter turns.
    pub quarter_turns: u8,
    /// Output cell i (row-major 2×2) takes input cell `cells[i]`.
    pub cells: [usize; 4],
}

impl Augment {
    pub const IDENTITY: Augment = Augment {
        flip: Flip::None,
        quarter_turns: 0,
        cells: [0, 1, 2, 3],
    };

    pub fn draw(rng: &mut Rng) -> Self {
        let flip = [Flip::None, Flip::Horizontal, Flip::Vertical][rng.below(3)];
        let quarter_turns = rng.below(4) as u8;
        let mut cells = [0, 1, 2, 3];
        if rng.below(2) == 1 {
            rng.shuffle(&mut cells);
        }
        Self {
            flip,
            quarter_turns,
            cells,
        }
    }

    /// Source coordinate of output pixel (y, x) on an n×n grid.
    fn source(&self, y: usize, x: usize, n: usize) -> (usize, usize) {
        let (mut y, mut x) = match self.flip {
            Flip::None => (y, x),
            Flip::Horizontal => (y, n - 1 - x),
            Flip::Vertical => (n - 1 - y, x),
        };
        for _ in 0..self.quarter_turns {
            (y, x) = (x, n - 1 - y);
        }
        if n % 2 == 0 {
            let half = n / 2;
            let cell = (y / half) * 2 + x / half;
            let src = self.cells[cell];
            y = (src / 2) * half + y % half;
            x = (src % 2) * half + x % half;
        }
        (y, x)
    }

    pub fn apply(&self, img: &FeatureMap, mask: &BinaryMask) -> Result<(FeatureMap, BinaryMask)> {
        let (c, h, w) = img.shape();
        if h != w || mask.height() != h || mask.width() != w {
            return Err(Error::Shape(format!(
                "augmentation needs square image and matching mask, got {h}x{w} and {}x{}",
                mask.height(),
                mask.width()
            )));
        }
        let out = FeatureMap::from_fn(c, h, w, |ch, y, x| {
            let (sy, sx) = self.source(y, x, h);
            img.get(ch, sy, sx)
        });
        let m = BinaryMask::from_fn(h, w, |y, x| {
            let (sy, sx) = self.source(y, x, h);
            mask.get(sy, sx)
        });
        Ok((out, m))
    }
}

/// Random flip × rotation × grid-shuffle applied identically to image and mask.
pub fn augment_for_query(img: &FeatureMap, mask: &BinaryMask, rng: &mut Rng) -> Result<(FeatureMap, BinaryMask)> {
    Augment::draw(rng).apply(img, mask)
}

/// Fine-tunes the last encoder layer and the TTIs parameters using only the
/// pool. Every pool read is appended to `reads`.
pub fn finetune_target(
    mut model: Model,
    pool: &FinetunePool,
    settings: &TrainSettings,
    rng: &mut Rng,
    reads: &mut Vec<String>,
) -> Result<(Model, Vec<LossBreakdown>)> {
    if settings.k != pool.k() {
        return Err(Error::Shape(format!("pool holds {} shots, settings ask for {}", pool.k(), settings.k)));
    }
    let categories = pool.categories();
    model.encoder.set_trainable(TrainScope::LastLayerOnly);
    let mut state = OptimState::new(&model, settings.lr, settings.momentum);
    let mut history = Vec::with_capacity(settings.iterations);
    let mut episode_rng = rng.fork();
    let mut alpha_rng = rng.fork();
    for it in 0..settings.iterations {
        let c = categories[episode_rng.below(categories.len())];
        let supports = pool.supports(c, reads)?;
        let ep = synthesize_episode(supports, c, &mut episode_rng)?;
        let (loss, mut grads) = source_loss(&ep, &model, &settings.loss, &mut alpha_rng)?;
        clip_gradients(&model, &mut grads, settings.grad_clip);
        sgd_step(&mut model, &grads, &mut state)?;
        check_determinants(&model, it)?;
        history.push(loss);
    }
    Ok((model, history))
}

/// Pool supports plus a query synthesized by augmenting one of them.
pub fn synthesize_episode(supports: &[Sample], category: usize, rng: &mut Rng) -> Result<Episode> {
    let src = &supports[rng.below(supports.len())];
    let (image, mask) = augment_for_query(&src.image, &src.mask, rng)?;
    Ok(Episode {
        supports: supports.to_vec(),
        query: Sample {
            id: format!("{}+aug", src.id),
            category,
            domain: src.domain,
            image,
            mask,
        },
        category,
        domain: src.domain,
    })
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FSTI";
pub const CHECKPOINT_VERSION: u32 = 1;

fn tensor_shape(name: &str, len: usize, model: &Model) -> (usize, usize, usize) {
    let c = model.channels();
    match name {
        n if n.ends_with(".bias") || n.starts_with("ttis.v_") => (len, 1, 1),
        n if n.starts_with("ttis.m_") || n == "projection.weight" => (c, c, 1),
        _ => {
            // conv weight: out × in × 9
            let layer = match &model.encoder {
                Encoder::Conv(b) => {
                    let idx = ConvBackbone::param_names().iter().position(|p| *p == name).unwrap_or(0) / 2;
                    &b.layers[idx]
                }
                Encoder::Projection(_) => unreachable!("projection has no conv weights"),
            };
            (layer.out_channels, layer.in_channels, 9)
        }
    }
}

pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let names = model.param_names();
    let slices = model.param_slices();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(names.len() as u32).to_le_bytes());
    for (name, data) in names.iter().zip(slices) {
        let (c, h, w) = tensor_shape(name, data.len(), model);
        let t = FeatureMap::new(c, h, w, data.to_vec())?;
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&io::encode_feature(&t)?);
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    if bytes.len() < at + 4 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: at + 4,
            found: bytes.len(),
        });
    }
    Ok(io::read_u32(bytes, at))
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Model> {
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    io::check_magic(bytes, *CHECKPOINT_MAGIC, path)?;
    let version = read_u32(bytes, 4, path)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::BadVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let count = read_u32(bytes, 8, path)? as usize;
    let mut pos = 12;
    let mut records: Vec<(String, FeatureMap)> = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(bytes, pos, path)? as usize;
        pos += 4;
        let name = bytes
            .get(pos..pos + len)
            .ok_or_else(|| bad("truncated record name".into()))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| bad("record name is not UTF-8".into()))?;
        pos += len;
        let (t, used) = io::decode_feature(bytes.get(pos..).unwrap_or(&[]), path)?;
        pos += used;
        records.push((name, t));
    }
    if pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
    }
    let get = |name: &str| -> Result<&FeatureMap> {
        records
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| bad(format!("missing record {name}")))
    };
    let vec_of = |name: &str| -> Result<Vec<f64>> { Ok(get(name)?.as_slice().to_vec()) };
    let m_amp = get("ttis.m_amp")?;
    let c = m_amp.channels();
    let ttis = TtisParams {
        m_amp: Matrix::from_vec(c, vec_of("ttis.m_amp")?)?,
        m_phase: Matrix::from_vec(c, vec_of("ttis.m_phase")?)?,
        v_amp: vec_of("ttis.v_amp")?,
        v_phase: vec_of("ttis.v_phase")?,
    };
    ttis.validate()?;
    let encoder = if records.iter().any(|(n, _)| n == "projection.weight") {
        let weight = vec_of("projection.weight")?;
        let bias = vec_of("projection.bias")?;
        if weight.len() != c * c || bias.len() != c {
            return Err(bad("projection does not match TTIs channels".into()));
        }
        Encoder::Projection(ChannelProjection {
            channels: c,
            weight,
            bias,
            scope: TrainScope::All,
        })
    } else {
        let names = ConvBackbone::param_names();
        let mut layers = Vec::with_capacity(3);
        for l in 0..3 {
            let w = get(names[2 * l])?;
            let bias = vec_of(names[2 * l + 1])?;
            if w.width() != 9 || bias.len() != w.channels() {
                return Err(bad(format!("bad shape for {}", names[2 * l])));
            }
            layers.push(ConvLayer {
                in_channels: w.height(),
                out_channels: w.channels(),
                weight: w.as_slice().to_vec(),
                bias,
            });
        }
        if layers[0].in_channels != 3
            || layers[1].in_channels != layers[0].out_channels
            || layers[2].in_channels != layers[1].out_channels
            || layers[2].out_channels != c
        {
            return Err(bad("conv channel plan is inconsistent".into()));
        }
        let layers: [ConvLayer; 3] = layers.try_into().expect("three layers");
        Encoder::Conv(ConvBackbone {
            layers,
            scope: TrainScope::All,
        })
    };
    Ok(Model { encoder, ttis })
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Rounds every weight through f32, matching what a checkpoint stores.
pub fn quantized(model: &Model) -> Model {
    let mut m = model.clone();
    for s in m.param_slices_mut() {
        for v in s {
            *v = *v as f32 as f64;
        }
    }
    m
}
