//! Feature transformation over tiny time intervals.
//!
//! The amplitude and phase spectra of a feature are each treated as the
//! initial value of `dŶ/dt = Ŷ − q(t)`, with `q(X) = M·X + δ(X)·V`. The first
//! interval integrates against a randomly re-statisticized copy of the input
//! spectrum with the trapezoidal rule; every later interval reuses the two
//! previous approximations. The final spectra are mapped back through the
//! inverse DFT.
//!
//! Shapes: `M` is C×C and mixes channels of the C×(H·W) view of a spectrum;
//! `V` has length C and contributes the per-channel scalar `V[c]·δ(X)[c]`
//! at every spatial position.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::Rng;
use crate::spectral::{self, AmpPhase};
use crate::tensor::FeatureMap;

/// Lower bound on the per-channel standard deviation used by the perturbation.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtisParams {
    pub m_amp: Matrix,
    pub m_phase: Matrix,
    pub v_amp: Vec<f64>,
    pub v_phase: Vec<f64>,
}

impl TtisParams {
    /// M = I, V = 0: the point where the regularizer vanishes.
    pub fn identity(channels: usize) -> Self {
        Self {
            m_amp: Matrix::identity(channels),
            m_phase: Matrix::identity(channels),
            v_amp: vec![0.0; channels],
            v_phase: vec![0.0; channels],
        }
    }

    pub fn zeros(channels: usize) -> Self {
        Self {
            m_amp: Matrix::zeros(channels),
            m_phase: Matrix::zeros(channels),
            v_amp: vec![0.0; channels],
            v_phase: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.m_amp.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if self.m_phase.dim() != c || self.v_amp.len() != c || self.v_phase.len() != c {
            return Err(Error::Shape(format!(
                "inconsistent TTIs parameter shapes: M^a {c}, M^p {}, V^a {}, V^p {}",
                self.m_phase.dim(),
                self.v_amp.len(),
                self.v_phase.len()
            )));
        }
        let finite = self
            .m_amp
            .as_slice()
            .iter()
            .chain(self.m_phase.as_slice())
            .chain(&self.v_amp)
            .chain(&self.v_phase)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite { index: 0 });
        }
        Ok(())
    }

    pub fn amplitude_branch(&self) -> Branch<'_> {
        Branch {
            mixing: &self.m_amp,
            translation: &self.v_amp,
        }
    }

    pub fn phase_branch(&self) -> Branch<'_> {
        Branch {
            mixing: &self.m_phase,
            translation: &self.v_phase,
        }
    }

    /// Flat view in the fixed order M^a, M^p, V^a, V^p.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend_from_slice(self.m_amp.as_slice());
        v.extend_from_slice(self.m_phase.as_slice());
        v.extend_from_slice(&self.v_amp);
        v.extend_from_slice(&self.v_phase);
        v
    }

    pub fn flat_slices_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.m_amp.as_mut_slice(),
            self.m_phase.as_mut_slice(),
            &mut self.v_amp,
            &mut self.v_phase,
        ]
    }
}

/// The (M, V) pair driving one spectrum.
#[derive(Debug, Clone, Copy)]
pub struct Branch<'a> {
    pub mixing: &'a Matrix,
    pub translation: &'a [f64],
}

/// Gradients of a scalar loss w.r.t. every TTIs parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct TtisGrads {
    pub m_amp: Matrix,
    pub m_phase: Matrix,
    pub v_amp: Vec<f64>,
    pub v_phase: Vec<f64>,
}

impl TtisGrads {
    pub fn zeros(channels: usize) -> Self {
        Self {
            m_amp: Matrix::zeros(channels),
            m_phase: Matrix::zeros(channels),
            v_amp: vec![0.0; channels],
            v_phase: vec![0.0; channels],
        }
    }

    pub fn accumulate(&mut self, other: &TtisGrads) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
    }

    pub fn slices(&self) -> [&[f64]; 4] {
        [
            self.m_amp.as_slice(),
            self.m_phase.as_slice(),
            &self.v_amp,
            &self.v_phase,
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.m_amp.as_mut_slice(),
            self.m_phase.as_mut_slice(),
            &mut self.v_amp,
            &mut self.v_phase,
        ]
    }

    pub fn is_zero(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|&v| v == 0.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub n_intervals: usize,
    pub h: f64,
}

impl TimeGrid {
    pub fn new(n_intervals: usize, h: f64) -> Result<Self> {
        if n_intervals == 0 || !(h > 0.0) || !h.is_finite() {
            return Err(Error::Config(format!(
                "time grid needs n_intervals >= 1 and h > 0, got {n_intervals} and {h}"
            )));
        }
        Ok(Self { n_intervals, h })
    }

    /// T = t_n.
    pub fn horizon(&self) -> f64 {
        self.n_intervals as f64 * self.h
    }

    pub fn point(&self, i: usize) -> f64 {
        i as f64 * self.h
    }
}

impl Default for TimeGrid {
    fn default() -> Self {
        Self {
            n_intervals: 10,
            h: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TtisMode {
    /// Random spectral perturbation in the first interval.
    TrainPerturbed,
    /// No perturbation and no random draws.
    EvalClean,
}

/// Which computation path the transform follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum TransformKind {
    /// Spectral decomposition plus the interval iteration.
    #[default]
    Full,
    /// One enhanced affine map `q(X)` on each spectrum, no interval iteration.
    SingleAffine,
    /// The interval iteration applied to the raw feature, no spectral decomposition.
    Spatial,
}

/// Per-channel affine re-statisticization with factor α:
/// target mean 2αμ_c and target spread 2(1−α)σ_c.
pub fn perturb_spectrum(x: &FeatureMap, alpha: f64) -> FeatureMap {
    let mut out = x.clone();
    for c in 0..x.channels() {
        let (mu, sigma) = mean_std(x.plane(c));
        let mu_r = 2.0 * alpha * mu;
        let sigma_r = 2.0 * (1.0 - alpha) * sigma;
        let denom = sigma.max(SIGMA_FLOOR);
        for v in out.plane_mut(c) {
            *v = (*v - mu) / denom * sigma_r + mu_r;
        }
    }
    out
}

/// Vector-Jacobian product of [`perturb_spectrum`] at `x`. The channel
/// statistics are differentiated as functions of the input.
pub fn perturb_backward(x: &FeatureMap, alpha: f64, grad: &FeatureMap) -> FeatureMap {
    let mut out = FeatureMap::zeros(x.channels(), x.height(), x.width());
    let n = x.plane_len() as f64;
    for c in 0..x.channels() {
        let plane = x.plane(c);
        let g = grad.plane(c);
        let (mu, sigma) = mean_std(plane);
        let sum_g: f64 = g.iter().sum();
        let ratio = 2.0 * (1.0 - alpha) * sigma / sigma.max(SIGMA_FLOOR);
        // ∂ratio/∂x_j is nonzero only below the floor, where ratio ∝ σ.
        let ratio_slope = if sigma < SIGMA_FLOOR && sigma > 0.0 {
            let centered_dot: f64 = g.iter().zip(plane).map(|(gi, xi)| gi * (xi - mu)).sum();
            Some((2.0 * (1.0 - alpha) / SIGMA_FLOOR, centered_dot, sigma))
        } else {
            None
        };
        for (j, o) in out.plane_mut(c).iter_mut().enumerate() {
            let mut v = 2.0 * alpha * sum_g / n + ratio * (g[j] - sum_g / n);
            if let Some((k, dot, s)) = ratio_slope {
                v += dot * k * (plane[j] - mu) / (n * s);
            }
            *o = v;
        }
    }
    out
}

fn mean_std(plane: &[f64]) -> (f64, f64) {
    let n = plane.len() as f64;
    let mu = plane.iter().sum::<f64>() / n;
    let var = plane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, var.sqrt())
}

/// Index of the first maximal entry in row-major order.
fn argmax_first(plane: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in plane.iter().enumerate() {
        if v > plane[best] {
            best = i;
        }
    }
    best
}

/// δ(X)[c] = spatial mean of (spatial max of X[c]) − X[c].
pub fn delta(x: &FeatureMap) -> Vec<f64> {
    (0..x.channels())
        .map(|c| {
            let p = x.plane(c);
            let max = p[argmax_first(p)];
            p.iter().map(|v| max - v).sum::<f64>() / p.len() as f64
        })
        .collect()
}

/// Vector-Jacobian product of [`delta`]; the max subgradient goes to the
/// first maximal position.
pub fn delta_backward(x: &FeatureMap, grad: &[f64]) -> FeatureMap {
    let mut out = FeatureMap::zeros(x.channels(), x.height(), x.width());
    let n = x.plane_len() as f64;
    for c in 0..x.channels() {
        let arg = argmax_first(x.plane(c));
        let dst = out.plane_mut(c);
        for v in dst.iter_mut() {
            *v = -grad[c] / n;
        }
        dst[arg] += grad[c];
    }
    out
}

/// out += scale · V[c]·coeffs[c] at every position of channel c.
fn add_broadcast(out: &mut FeatureMap, v: &[f64], coeffs: &[f64], scale: f64) {
    for c in 0..out.channels() {
        let add = scale * v[c] * coeffs[c];
        for o in out.plane_mut(c) {
            *o += add;
        }
    }
}

fn axpy(out: &mut FeatureMap, a: f64, x: &FeatureMap) {
    for (o, v) in out.as_mut_slice().iter_mut().zip(x.as_slice()) {
        *o += a * v;
    }
}

fn plane_sums(x: &FeatureMap) -> Vec<f64> {
    (0..x.channels()).map(|c| x.plane(c).iter().sum()).collect()
}

/// dM += scale · G·Zᵀ over the C×(H·W) views.
fn add_outer(dm: &mut Matrix, g: &FeatureMap, z: &FeatureMap, scale: f64) {
    let c = g.channels();
    let data = dm.as_mut_slice();
    for i in 0..c {
        let gi = g.plane(i);
        for j in 0..c {
            let dot: f64 = gi.iter().zip(z.plane(j)).map(|(a, b)| a * b).sum();
            data[i * c + j] += scale * dot;
        }
    }
}

fn check_channels(x: &FeatureMap, branch: &Branch<'_>) -> Result<()> {
    let c = x.channels();
    if branch.mixing.dim() != c || branch.translation.len() != c {
        return Err(Error::Shape(format!(
            "spectrum has {c} channels but parameters are sized {}",
            branch.mixing.dim()
        )));
    }
    Ok(())
}

/// Â(t₁) = e^h·A₁ − (h/2)·M·Aʳ − (h/2)·V⊙δ(Aʳ), with Aʳ the perturbed copy of
/// A₁ when `alpha` is given and A₁ itself otherwise.
pub fn first_interval_step(
    a1: &FeatureMap,
    branch: Branch<'_>,
    h: f64,
    alpha: Option<f64>,
) -> Result<FeatureMap> {
    check_channels(a1, &branch)?;
    let perturbed;
    let ar = match alpha {
        Some(a) => {
            perturbed = perturb_spectrum(a1, a);
            &perturbed
        }
        None => a1,
    };
    Ok(first_step_from(a1, ar, branch, h))
}

fn first_step_from(a1: &FeatureMap, ar: &FeatureMap, branch: Branch<'_>, h: f64) -> FeatureMap {
    let mut out = a1.scaled(h.exp());
    axpy(&mut out, -h / 2.0, &branch.mixing.mix(ar));
    add_broadcast(&mut out, branch.translation, &delta(ar), -h / 2.0);
    out
}

/// Approximations at the two most recent grid points.
#[derive(Debug, Clone, PartialEq)]
pub struct TtisState {
    /// Â(t_i).
    pub current: FeatureMap,
    /// Â(t_{i−1}); for i = 1 this is Â(t₀) = A(t₁).
    pub previous: FeatureMap,
    /// Interval index i of `current`.
    pub index: usize,
}

impl TtisState {
    pub fn after_first_interval(a1: FeatureMap, first: FeatureMap) -> Self {
        Self {
            current: first,
            previous: a1,
            index: 1,
        }
    }
}

/// One subsequent interval:
/// Â(t_i) = e^h·Â(t_{i−1}) − (h/2)·e^h·M·(e^{−h}·Â(t_{i−1}) + Â(t_{i−2}))
///          − (h/2)·e^h·V⊙(e^{−h}·δ(Â(t_{i−1})) + δ(Â(t_{i−2}))).
pub fn subsequent_interval_step(
    state: &TtisState,
    branch: Branch<'_>,
    grid: &TimeGrid,
) -> Result<TtisState> {
    if state.index < 1 || state.index >= grid.n_intervals {
        return Err(Error::OutOfRange(format!(
            "cannot step from interval {} on a grid of {} intervals",
            state.index, grid.n_intervals
        )));
    }
    check_channels(&state.current, &branch)?;
    Ok(TtisState {
        current: subsequent_from(&state.current, &state.previous, branch, grid.h),
        previous: state.current.clone(),
        index: state.index + 1,
    })
}

fn subsequent_from(
    last: &FeatureMap,
    before: &FeatureMap,
    branch: Branch<'_>,
    h: f64,
) -> FeatureMap {
    let grow = h.exp();
    let shrink = (-h).exp();
    let k = -h / 2.0 * grow;
    let mut mixed_arg = last.scaled(shrink);
    axpy(&mut mixed_arg, 1.0, before);
    let mut out = last.scaled(grow);
    axpy(&mut out, k, &branch.mixing.mix(&mixed_arg));
    let d_last = delta(last);
    let d_before = delta(before);
    let combined: Vec<f64> = d_last
        .iter()
        .zip(&d_before)
        .map(|(a, b)| shrink * a + b)
        .collect();
    add_broadcast(&mut out, branch.translation, &combined, k);
    out
}

/// Full trajectory of one spectrum through the interval iteration.
#[derive(Debug, Clone)]
struct PathTrace {
    input: FeatureMap,
    perturbed: Option<FeatureMap>,
    alpha: Option<f64>,
    /// Ŷ(t₀) = input, Ŷ(t₁), …, Ŷ(t_n).
    points: Vec<FeatureMap>,
}

impl PathTrace {
    fn output(&self) -> &FeatureMap {
        self.points.last().expect("trajectory has at least two points")
    }
}

fn run_path(x: &FeatureMap, branch: Branch<'_>, grid: &TimeGrid, alpha: Option<f64>) -> PathTrace {
    let perturbed = alpha.map(|a| perturb_spectrum(x, a));
    let ar = perturbed.as_ref().unwrap_or(x);
    let mut points = Vec::with_capacity(grid.n_intervals + 1);
    points.push(x.clone());
    points.push(first_step_from(x, ar, branch, grid.h));
    for i in 2..=grid.n_intervals {
        let next = subsequent_from(&points[i - 1], &points[i - 2], branch, grid.h);
        points.push(next);
    }
    PathTrace {
        input: x.clone(),
        perturbed,
        alpha,
        points,
    }
}

/// Returns (∂/∂input, ∂/∂M, ∂/∂V) given ∂/∂Ŷ(t_n).
fn path_backward(
    trace: &PathTrace,
    branch: Branch<'_>,
    grid: &TimeGrid,
    grad_out: &FeatureMap,
) -> (FeatureMap, Matrix, Vec<f64>) {
    let h = grid.h;
    let c = trace.input.channels();
    let grow = h.exp();
    let shrink = (-h).exp();
    let k = -h / 2.0 * grow;
    let mut dm = Matrix::zeros(c);
    let mut dv = vec![0.0; c];
    let zero = || FeatureMap::zeros(c, trace.input.height(), trace.input.width());
    let mut grads: Vec<FeatureMap> = (0..trace.points.len()).map(|_| zero()).collect();
    *grads.last_mut().unwrap() = grad_out.clone();

    for i in (2..trace.points.len()).rev() {
        let g = std::mem::replace(&mut grads[i], zero());
        let last = &trace.points[i - 1];
        let before = &trace.points[i - 2];
        let mut z = last.scaled(shrink);
        axpy(&mut z, 1.0, before);
        add_outer(&mut dm, &g, &z, k);
        let dz = branch.mixing.mix_transposed(&g).scaled(k);
        let sums = plane_sums(&g);
        let d_last = delta(last);
        let d_before = delta(before);
        for ch in 0..c {
            dv[ch] += k * sums[ch] * (shrink * d_last[ch] + d_before[ch]);
        }
        let vs: Vec<f64> = (0..c).map(|ch| branch.translation[ch] * sums[ch]).collect();
        let dd_last: Vec<f64> = vs.iter().map(|v| k * shrink * v).collect();
        let dd_before: Vec<f64> = vs.iter().map(|v| k * v).collect();

        axpy(&mut grads[i - 1], grow, &g);
        axpy(&mut grads[i - 1], shrink, &dz);
        axpy(&mut grads[i - 1], 1.0, &delta_backward(last, &dd_last));
        axpy(&mut grads[i - 2], 1.0, &dz);
        axpy(&mut grads[i - 2], 1.0, &delta_backward(before, &dd_before));
    }

    // First interval.
    let g1 = &grads[1];
    let ar = trace.perturbed.as_ref().unwrap_or(&trace.input);
    add_outer(&mut dm, g1, ar, -h / 2.0);
    let sums = plane_sums(g1);
    let d_ar = delta(ar);
    for ch in 0..c {
        dv[ch] += -h / 2.0 * sums[ch] * d_ar[ch];
    }
    let mut dar = branch.mixing.mix_transposed(g1).scaled(-h / 2.0);
    let dd: Vec<f64> = (0..c)
        .map(|ch| -h / 2.0 * branch.translation[ch] * sums[ch])
        .collect();
    axpy(&mut dar, 1.0, &delta_backward(ar, &dd));

    let mut dx = grads[0].clone();
    axpy(&mut dx, grow, g1);
    match trace.alpha {
        Some(a) => axpy(&mut dx, 1.0, &perturb_backward(&trace.input, a, &dar)),
        None => axpy(&mut dx, 1.0, &dar),
    }
    (dx, dm, dv)
}

/// q(Xʳ) applied once, used by [`TransformKind::SingleAffine`].
fn affine_forward(x: &FeatureMap, branch: Branch<'_>, alpha: Option<f64>) -> (Option<FeatureMap>, FeatureMap) {
    let perturbed = alpha.map(|a| perturb_spectrum(x, a));
    let ar = perturbed.as_ref().unwrap_or(x);
    let mut out = branch.mixing.mix(ar);
    add_broadcast(&mut out, branch.translation, &delta(ar), 1.0);
    (perturbed, out)
}

fn affine_backward(
    x: &FeatureMap,
    perturbed: Option<&FeatureMap>,
    alpha: Option<f64>,
    branch: Branch<'_>,
    g: &FeatureMap,
) -> (FeatureMap, Matrix, Vec<f64>) {
    let c = x.channels();
    let ar = perturbed.unwrap_or(x);
    let mut dm = Matrix::zeros(c);
    add_outer(&mut dm, g, ar, 1.0);
    let sums = plane_sums(g);
    let d_ar = delta(ar);
    let dv: Vec<f64> = (0..c).map(|ch| sums[ch] * d_ar[ch]).collect();
    let mut dar = branch.mixing.mix_transposed(g);
    let dd: Vec<f64> = (0..c).map(|ch| branch.translation[ch] * sums[ch]).collect();
    axpy(&mut dar, 1.0, &delta_backward(ar, &dd));
    let dx = match alpha {
        Some(a) => perturb_backward(x, a, &dar),
        None => dar,
    };
    (dx, dm, dv)
}

/// Everything needed to back-propagate through one transform call.
#[derive(Debug, Clone)]
pub struct TtisTape {
    kind: TransformKind,
    grid: TimeGrid,
    input: FeatureMap,
    alpha: Option<f64>,
    amp: Option<PathTrace>,
    phase: Option<PathTrace>,
    spectrum_out: Option<AmpPhase>,
    affine: Option<(AmpPhase, Option<FeatureMap>, Option<FeatureMap>)>,
    spatial: Option<PathTrace>,
}

impl TtisTape {
    pub fn alpha(&self) -> Option<f64> {
        self.alpha
    }

    /// Transformed amplitude and phase before reconstruction; `None` for
    /// [`TransformKind::Spatial`].
    pub fn spectrum_out(&self) -> Option<&AmpPhase> {
        self.spectrum_out.as_ref()
    }

    /// Returns parameter gradients and the gradient w.r.t. the input feature.
    pub fn backward(&self, params: &TtisParams, grad_out: &FeatureMap) -> (TtisGrads, FeatureMap) {
        let c = params.channels();
        let mut grads = TtisGrads::zeros(c);
        let df = match self.kind {
            TransformKind::Full => {
                let spec = self.spectrum_out.as_ref().expect("full tape");
                let (g_amp, g_phase) = spectral::reconstruct_backward(spec, grad_out);
                let amp = self.amp.as_ref().expect("full tape");
                let phase = self.phase.as_ref().expect("full tape");
                let (da, dma, dva) = path_backward(amp, params.amplitude_branch(), &self.grid, &g_amp);
                let (dp, dmp, dvp) =
                    path_backward(phase, params.phase_branch(), &self.grid, &g_phase);
                grads.m_amp = dma;
                grads.v_amp = dva;
                grads.m_phase = dmp;
                grads.v_phase = dvp;
                spectral::decompose_backward(&self.input, &da, &dp)
            }
            TransformKind::SingleAffine => {
                let (spec_in, pa, pp) = self.affine.as_ref().expect("affine tape");
                let spec_out = self.spectrum_out.as_ref().expect("affine tape");
                let (g_amp, g_phase) = spectral::reconstruct_backward(spec_out, grad_out);
                let (da, dma, dva) = affine_backward(
                    &spec_in.amplitude,
                    pa.as_ref(),
                    self.alpha,
                    params.amplitude_branch(),
                    &g_amp,
                );
                let (dp, dmp, dvp) = affine_backward(
                    &spec_in.phase,
                    pp.as_ref(),
                    self.alpha,
                    params.phase_branch(),
                    &g_phase,
                );
                grads.m_amp = dma;
                grads.v_amp = dva;
                grads.m_phase = dmp;
                grads.v_phase = dvp;
                spectral::decompose_backward(&self.input, &da, &dp)
            }
            TransformKind::Spatial => {
                let trace = self.spatial.as_ref().expect("spatial tape");
                let (dx, dm, dv) =
                    path_backward(trace, params.amplitude_branch(), &self.grid, grad_out);
                grads.m_amp = dm;
                grads.v_amp = dv;
                dx
            }
        };
        (grads, df)
    }
}

/// Runs the transform with an explicit perturbation factor (`None` = clean)
/// and records a tape for back-propagation.
pub fn transform_recorded(
    f: &FeatureMap,
    params: &TtisParams,
    grid: &TimeGrid,
    alpha: Option<f64>,
    kind: TransformKind,
) -> Result<(FeatureMap, TtisTape)> {
    params.validate()?;
    if params.channels() != f.channels() {
        return Err(Error::Shape(format!(
            "feature has {} channels but TTIs parameters are sized {}",
            f.channels(),
            params.channels()
        )));
    }
    let mut tape = TtisTape {
        kind,
        grid: *grid,
        input: f.clone(),
        alpha,
        amp: None,
        phase: None,
        spectrum_out: None,
        affine: None,
        spatial: None,
    };
    let out = match kind {
        TransformKind::Full => {
            let spec = spectral::decompose(f);
            let amp = run_path(&spec.amplitude, params.amplitude_branch(), grid, alpha);
            let phase = run_path(&spec.phase, params.phase_branch(), grid, alpha);
            let spec_out = AmpPhase {
                amplitude: amp.output().clone(),
                phase: phase.output().clone(),
            };
            let out = spectral::reconstruct(&spec_out);
            tape.amp = Some(amp);
            tape.phase = Some(phase);
            tape.spectrum_out = Some(spec_out);
            out
        }
        TransformKind::SingleAffine => {
            let spec = spectral::decompose(f);
            let (pa, amp) = affine_forward(&spec.amplitude, params.amplitude_branch(), alpha);
            let (pp, phase) = affine_forward(&spec.phase, params.phase_branch(), alpha);
            let spec_out = AmpPhase {
                amplitude: amp,
                phase,
            };
            let out = spectral::reconstruct(&spec_out);
            tape.spectrum_out = Some(spec_out);
            tape.affine = Some((spec, pa, pp));
            out
        }
        TransformKind::Spatial => {
            let trace = run_path(f, params.amplitude_branch(), grid, alpha);
            let out = trace.output().clone();
            tape.spatial = Some(trace);
            out
        }
    };
    if !out.is_finite() {
        return Err(Error::NonFinite { index: 0 });
    }
    Ok((out, tape))
}

/// Draws α ~ U[0,1) once in `TrainPerturbed` mode; `EvalClean` draws nothing.
pub fn draw_alpha(mode: TtisMode, rng: &mut Rng) -> Option<f64> {
    match mode {
        TtisMode::TrainPerturbed => Some(rng.uniform()),
        TtisMode::EvalClean => None,
    }
}

pub fn transform(
    f: &FeatureMap,
    params: &TtisParams,
    grid: &TimeGrid,
    mode: TtisMode,
    rng: &mut Rng,
) -> Result<FeatureMap> {
    let alpha = draw_alpha(mode, rng);
    Ok(transform_recorded(f, params, grid, alpha, TransformKind::Full)?.0)
}

/// Transform plus exact reverse-mode gradients for a given upstream gradient.
pub fn transform_with_grad(
    f: &FeatureMap,
    params: &TtisParams,
    grid: &TimeGrid,
    mode: TtisMode,
    rng: &mut Rng,
    upstream: &FeatureMap,
) -> Result<(FeatureMap, TtisGrads, FeatureMap)> {
    let alpha = draw_alpha(mode, rng);
    let (out, tape) = transform_recorded(f, params, grid, alpha, TransformKind::Full)?;
    if !upstream.same_shape(&out) {
        return Err(Error::Shape("upstream gradient shape differs from output".into()));
    }
    let (grads, df) = tape.backward(params, upstream);
    Ok((out, grads, df))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_map(rng: &mut Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_fn(c, h, w, |_, _, _| rng.uniform_range(-2.0, 2.0))
    }

    fn random_params(rng: &mut Rng, c: usize) -> TtisParams {
        let mut p = TtisParams::identity(c);
        for s in p.flat_slices_mut() {
            for v in s.iter_mut() {
                *v += rng.uniform_range(-0.5, 0.5);
            }
        }
        p
    }

    #[test]
    fn perturbation_special_factors() {
        let mut rng = Rng::new(1);
        let x = random_map(&mut rng, 3, 4, 4);
        let same = perturb_spectrum(&x, 0.5);
        for (a, b) in same.as_slice().iter().zip(x.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        let means = x.channel_means();
        let zero = perturb_spectrum(&x, 0.0);
        let one = perturb_spectrum(&x, 1.0);
        for c in 0..3 {
            for (i, v) in zero.plane(c).iter().enumerate() {
                assert!((v - 2.0 * (x.plane(c)[i] - means[c])).abs() < 1e-12);
            }
            for v in one.plane(c) {
                assert!((v - 2.0 * means[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_channel_is_guarded() {
        let x = FeatureMap::from_fn(1, 3, 3, |_, _, _| 4.0);
        let p = perturb_spectrum(&x, 0.25);
        assert!(p.as_slice().iter().all(|&v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn delta_examples() {
        let x = FeatureMap::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(delta(&x), vec![1.5]);
        assert_eq!(delta(&FeatureMap::zeros(2, 3, 3)), vec![0.0, 0.0]);
    }

    #[test]
    fn delta_tie_goes_to_first_maximum() {
        let x = FeatureMap::new(1, 1, 3, vec![5.0, 1.0, 5.0]).unwrap();
        let g = delta_backward(&x, &[3.0]);
        assert_eq!(g.as_slice(), &[2.0, -1.0, -1.0]);
    }

    #[test]
    fn first_step_without_corrections_is_exponential() {
        let mut rng = Rng::new(2);
        let a1 = random_map(&mut rng, 2, 3, 3);
        let p = TtisParams::zeros(2);
        let out = first_interval_step(&a1, p.amplitude_branch(), 0.01, Some(0.3)).unwrap();
        for (o, a) in out.as_slice().iter().zip(a1.as_slice()) {
            assert!((o - 0.01f64.exp() * a).abs() < 1e-14);
        }
    }

    #[test]
    fn first_step_rejects_channel_mismatch() {
        let a1 = FeatureMap::zeros(3, 2, 2);
        let p = TtisParams::identity(2);
        assert!(matches!(
            first_interval_step(&a1, p.amplitude_branch(), 0.01, None),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn subsequent_step_range_checked() {
        let grid = TimeGrid::default();
        let p = TtisParams::identity(1);
        let x = FeatureMap::zeros(1, 2, 2);
        let mut state = TtisState::after_first_interval(x.clone(), x.clone());
        state.index = 10;
        assert!(subsequent_interval_step(&state, p.amplitude_branch(), &grid).is_err());
        state.index = 0;
        assert!(subsequent_interval_step(&state, p.amplitude_branch(), &grid).is_err());
    }

    #[test]
    fn homogeneous_iteration_grows_exponentially() {
        let mut rng = Rng::new(3);
        let a1 = random_map(&mut rng, 2, 3, 3);
        let p = TtisParams::zeros(2);
        let grid = TimeGrid::new(6, 0.02).unwrap();
        let first = first_interval_step(&a1, p.amplitude_branch(), grid.h, None).unwrap();
        let mut state = TtisState::after_first_interval(a1.clone(), first);
        while state.index < grid.n_intervals {
            state = subsequent_interval_step(&state, p.amplitude_branch(), &grid).unwrap();
        }
        let k = grid.horizon().exp();
        for (o, a) in state.current.as_slice().iter().zip(a1.as_slice()) {
            assert!((o - k * a).abs() < 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn eval_clean_consumes_no_randomness() {
        let mut rng = Rng::new(4);
        let f = random_map(&mut rng, 2, 4, 4);
        let p = random_params(&mut rng, 2);
        let before = rng.draws();
        transform(&f, &p, &TimeGrid::default(), TtisMode::EvalClean, &mut rng).unwrap();
        assert_eq!(rng.draws(), before);
        transform(&f, &p, &TimeGrid::default(), TtisMode::TrainPerturbed, &mut rng).unwrap();
        assert_eq!(rng.draws(), before + 1);
    }

    #[test]
    fn gradients_match_finite_differences_for_every_kind() {
        let mut rng = Rng::new(8);
        let f = random_map(&mut rng, 2, 4, 4);
        let params = random_params(&mut rng, 2);
        let up = random_map(&mut rng, 2, 4, 4);
        let grid = TimeGrid::new(4, 0.05).unwrap();
        for kind in [TransformKind::Full, TransformKind::SingleAffine, TransformKind::Spatial] {
            for alpha in [None, Some(0.3)] {
                let loss = |f: &FeatureMap, p: &TtisParams| {
                    let (out, _) = transform_recorded(f, p, &grid, alpha, kind).unwrap();
                    out.as_slice().iter().zip(up.as_slice()).map(|(a, b)| a * b).sum::<f64>()
                };
                let (_, tape) = transform_recorded(&f, &params, &grid, alpha, kind).unwrap();
                let (grads, df) = tape.backward(&params, &up);
                let eps = 1e-5;
                for i in 0..f.as_slice().len() {
                    let mut p = f.clone();
                    p.as_mut_slice()[i] += eps;
                    let mut m = f.clone();
                    m.as_mut_slice()[i] -= eps;
                    let fd = (loss(&p, &params) - loss(&m, &params)) / (2.0 * eps);
                    let a = df.as_slice()[i];
                    assert!((fd - a).abs() < 1e-5 * (1.0 + fd.abs()), "{kind:?} f[{i}] {fd} {a}");
                }
                for (slot, analytic) in grads.slices().iter().enumerate() {
                    for i in 0..analytic.len() {
                        let mut p = params.clone();
                        p.flat_slices_mut()[slot][i] += eps;
                        let mut m = params.clone();
                        m.flat_slices_mut()[slot][i] -= eps;
                        let fd = (loss(&f, &p) - loss(&f, &m)) / (2.0 * eps);
                        let a = analytic[i];
                        assert!(
                            (fd - a).abs() < 1e-5 * (1.0 + fd.abs()),
                            "{kind:?} slot {slot}[{i}] {fd} {a}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn perturb_backward_below_floor() {
        let x = FeatureMap::new(1, 1, 3, vec![1.0, 1.0 + 1e-7, 1.0 - 2e-7]).unwrap();
        let g = FeatureMap::new(1, 1, 3, vec![0.3, -1.0, 2.0]).unwrap();
        let an = perturb_backward(&x, 0.2, &g);
        let loss = |x: &FeatureMap| {
            perturb_spectrum(x, 0.2)
                .as_slice()
                .iter()
                .zip(g.as_slice())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let eps = 1e-10;
        for i in 0..3 {
            let mut p = x.clone();
            p.as_mut_slice()[i] += eps;
            let mut m = x.clone();
            m.as_mut_slice()[i] -= eps;
            let fd = (loss(&p) - loss(&m)) / (2.0 * eps);
            assert!((fd - an.as_slice()[i]).abs() < 1e-3 * (1.0 + fd.abs()), "{i}: {fd} vs {}", an.as_slice()[i]);
        }
    }
}
