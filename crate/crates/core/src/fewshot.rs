//! Prototype extraction and matching: masked average pooling, cosine
//! prediction, self-support foreground prototypes, adaptive self-support
//! background prototypes, K-shot averaging and prototype combination.
//!
//! Every differentiable op has a matching `*_backward` vector-Jacobian
//! product. Binarized masks are treated as constants.

use crate::error::{Error, Result};
use crate::tensor::{BinaryMask, FeatureMap};

/// Norm floor for cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

/// A length-C prototype vector.
pub type Prototype = Vec<f64>;

/// Either one global prototype or a per-position prototype map (C×H×W).
#[derive(Debug, Clone, PartialEq)]
pub enum Proto {
    Global(Prototype),
    Map(FeatureMap),
}

impl Proto {
    pub fn channels(&self) -> usize {
        match self {
            Proto::Global(v) => v.len(),
            Proto::Map(m) => m.channels(),
        }
    }

    fn zeros_like(&self) -> Proto {
        match self {
            Proto::Global(v) => Proto::Global(vec![0.0; v.len()]),
            Proto::Map(m) => Proto::Map(FeatureMap::zeros(m.channels(), m.height(), m.width())),
        }
    }

    /// Broadcasts a global prototype over an H×W grid.
    pub fn to_map(&self, height: usize, width: usize) -> FeatureMap {
        match self {
            Proto::Map(m) => m.clone(),
            Proto::Global(v) => FeatureMap::from_fn(v.len(), height, width, |c, _, _| v[c]),
        }
    }
}

/// Foreground and background cosine maps, each H×W.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionPair {
    pub height: usize,
    pub width: usize,
    pub fg: Vec<f64>,
    pub bg: Vec<f64>,
}

/// Gradient of a loss w.r.t. the two maps of a [`PredictionPair`].
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionGrad {
    pub fg: Vec<f64>,
    pub bg: Vec<f64>,
}

impl PredictionGrad {
    pub fn zeros(len: usize) -> Self {
        Self {
            fg: vec![0.0; len],
            bg: vec![0.0; len],
        }
    }
}

fn check_spatial(f: &FeatureMap, m: &BinaryMask) -> Result<()> {
    if f.height() != m.height() || f.width() != m.width() {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match feature {}x{}",
            m.height(),
            m.width(),
            f.height(),
            f.width()
        )));
    }
    Ok(())
}

/// Masked average pooling: prototype[c] = Σ m·f[c] / Σ m.
pub fn map_prototype(f: &FeatureMap, m: &BinaryMask) -> Result<Prototype> {
    check_spatial(f, m)?;
    let count = m.count_ones();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let mask = m.as_slice();
    Ok((0..f.channels())
        .map(|c| {
            f.plane(c)
                .iter()
                .zip(mask)
                .filter(|(_, &b)| b == 1)
                .map(|(v, _)| v)
                .sum::<f64>()
                / count as f64
        })
        .collect())
}

/// Adds the pooling gradient into `df`.
pub fn map_prototype_backward(m: &BinaryMask, grad: &[f64], df: &mut FeatureMap) {
    let count = m.count_ones() as f64;
    if count == 0.0 {
        return;
    }
    let mask = m.as_slice();
    for (c, &g) in grad.iter().enumerate() {
        for (d, &b) in df.plane_mut(c).iter_mut().zip(mask) {
            if b == 1 {
                *d += g / count;
            }
        }
    }
}

fn proto_at(p: &Proto, c: usize, pos: usize) -> f64 {
    match p {
        Proto::Global(v) => v[c],
        Proto::Map(m) => m.plane(c)[pos],
    }
}

/// Cosine similarity between the prototype and every position of `f`.
pub fn cosine_map(p: &Proto, f: &FeatureMap) -> Vec<f64> {
    let n = f.plane_len();
    let c = f.channels();
    let global_norm = match p {
        Proto::Global(v) => Some(v.iter().map(|x| x * x).sum::<f64>().sqrt()),
        Proto::Map(_) => None,
    };
    (0..n)
        .map(|pos| {
            let (mut dot, mut nf, mut np) = (0.0, 0.0, 0.0);
            for ch in 0..c {
                let x = f.plane(ch)[pos];
                let q = proto_at(p, ch, pos);
                dot += x * q;
                nf += x * x;
                if global_norm.is_none() {
                    np += q * q;
                }
            }
            let np = global_norm.unwrap_or_else(|| np.sqrt());
            dot / (np.max(COSINE_EPS) * nf.sqrt().max(COSINE_EPS))
        })
        .collect()
}

/// Accumulates ∂/∂prototype into `dp` and ∂/∂f into `df` for upstream `grad`.
pub fn cosine_map_backward(p: &Proto, f: &FeatureMap, grad: &[f64], dp: &mut Proto, df: &mut FeatureMap) {
    let n = f.plane_len();
    let c = f.channels();
    let mut x = vec![0.0; c];
    let mut q = vec![0.0; c];
    for pos in 0..n {
        let g = grad[pos];
        if g == 0.0 {
            continue;
        }
        for ch in 0..c {
            x[ch] = f.plane(ch)[pos];
            q[ch] = proto_at(p, ch, pos);
        }
        let dot: f64 = x.iter().zip(&q).map(|(a, b)| a * b).sum();
        let nx_raw = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nq_raw = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nx = nx_raw.max(COSINE_EPS);
        let nq = nq_raw.max(COSINE_EPS);
        let s = dot / (nx * nq);
        for ch in 0..c {
            let mut dx = q[ch] / (nx * nq);
            if nx_raw > COSINE_EPS {
                dx -= s * x[ch] / (nx * nx);
            }
            df.plane_mut(ch)[pos] += g * dx;
            let mut dq = x[ch] / (nx * nq);
            if nq_raw > COSINE_EPS {
                dq -= s * q[ch] / (nq * nq);
            }
            match dp {
                Proto::Global(v) => v[ch] += g * dq,
                Proto::Map(m) => m.plane_mut(ch)[pos] += g * dq,
            }
        }
    }
}

pub fn cosine_predict(fg: &Proto, bg: &Proto, f_q: &FeatureMap) -> Result<PredictionPair> {
    if fg.channels() != f_q.channels() || bg.channels() != f_q.channels() {
        return Err(Error::Shape("prototype channels differ from query feature".into()));
    }
    if let Proto::Map(m) = bg {
        if !m.same_shape(f_q) {
            return Err(Error::Shape("background map shape differs from query".into()));
        }
    }
    Ok(PredictionPair {
        height: f_q.height(),
        width: f_q.width(),
        fg: cosine_map(fg, f_q),
        bg: cosine_map(bg, f_q),
    })
}

/// 1 where the foreground similarity strictly exceeds the background one.
pub fn binarize(p: &PredictionPair) -> BinaryMask {
    let mut i = 0;
    BinaryMask::from_fn(p.height, p.width, |_, _| {
        let on = p.fg[i] > p.bg[i];
        i += 1;
        on
    })
}

/// MAP of the query feature under the predicted mask; `None` if the mask is empty.
pub fn self_support_fg(f_q: &FeatureMap, predicted: &BinaryMask) -> Result<Option<Prototype>> {
    match map_prototype(f_q, predicted) {
        Ok(p) => Ok(Some(p)),
        Err(Error::EmptyMask) => Ok(None),
        Err(e) => Err(e),
    }
}

fn background_positions(predicted: &BinaryMask) -> Vec<usize> {
    predicted
        .as_slice()
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == 0)
        .map(|(i, _)| i)
        .collect()
}

/// Softmax attention over the query's background columns.
///
/// Gathers B (C×N_bg) where the predicted mask is 0, forms the N_bg×(H·W)
/// affinity Bᵀ·F, normalizes each column over the N_bg axis and returns
/// B·weights reshaped to C×H×W. `None` when there is no background.
pub fn adaptive_bg(f_q: &FeatureMap, predicted: &BinaryMask) -> Result<Option<FeatureMap>> {
    check_spatial(f_q, predicted)?;
    let bg = background_positions(predicted);
    if bg.is_empty() {
        return Ok(None);
    }
    let weights = attention_weights(f_q, &bg);
    Ok(Some(attend(f_q, &bg, &weights)))
}

/// weights[n·HW + j] = softmax_n(B[:,n]·F[:,j]).
fn attention_weights(f: &FeatureMap, bg: &[usize]) -> Vec<f64> {
    let hw = f.plane_len();
    let c = f.channels();
    let nb = bg.len();
    let mut w = vec![0.0; nb * hw];
    for j in 0..hw {
        let mut max = f64::NEG_INFINITY;
        for (n, &pos) in bg.iter().enumerate() {
            let s: f64 = (0..c).map(|ch| f.plane(ch)[pos] * f.plane(ch)[j]).sum();
            w[n * hw + j] = s;
            max = max.max(s);
        }
        let mut z = 0.0;
        for n in 0..nb {
            let e = (w[n * hw + j] - max).exp();
            w[n * hw + j] = e;
            z += e;
        }
        for n in 0..nb {
            w[n * hw + j] /= z;
        }
    }
    w
}

fn attend(f: &FeatureMap, bg: &[usize], weights: &[f64]) -> FeatureMap {
    let hw = f.plane_len();
    let mut out = FeatureMap::zeros(f.channels(), f.height(), f.width());
    for ch in 0..f.channels() {
        let src = f.plane(ch);
        let dst = out.plane_mut(ch);
        for (n, &pos) in bg.iter().enumerate() {
            let b = src[pos];
            let row = &weights[n * hw..(n + 1) * hw];
            for (o, &wt) in dst.iter_mut().zip(row) {
                *o += b * wt;
            }
        }
    }
    out
}

/// Accumulates ∂/∂F of [`adaptive_bg`] into `df`; F enters both as the
/// gathered columns and as the attention queries.
pub fn adaptive_bg_backward(f: &FeatureMap, predicted: &BinaryMask, grad: &FeatureMap, df: &mut FeatureMap) {
    let bg = background_positions(predicted);
    if bg.is_empty() {
        return;
    }
    let hw = f.plane_len();
    let c = f.channels();
    let nb = bg.len();
    let w = attention_weights(f, &bg);
    // dW[n,j] = B[:,n]·G[:,j]
    let mut ds = vec![0.0; nb * hw];
    for j in 0..hw {
        let mut weighted = 0.0;
        for (n, &pos) in bg.iter().enumerate() {
            let dw: f64 = (0..c).map(|ch| f.plane(ch)[pos] * grad.plane(ch)[j]).sum();
            ds[n * hw + j] = dw;
            weighted += w[n * hw + j] * dw;
        }
        for n in 0..nb {
            let idx = n * hw + j;
            ds[idx] = w[idx] * (ds[idx] - weighted);
        }
    }
    for ch in 0..c {
        let fp = f.plane(ch);
        let gp = grad.plane(ch);
        let mut acc = vec![0.0; hw];
        for (n, &pos) in bg.iter().enumerate() {
            let wrow = &w[n * hw..(n + 1) * hw];
            let srow = &ds[n * hw..(n + 1) * hw];
            // Through the gathered column B[:,n].
            let mut db = 0.0;
            for j in 0..hw {
                db += gp[j] * wrow[j] + srow[j] * fp[j];
            }
            acc[pos] += db;
            // Through the queries F[:,j].
            let b = fp[pos];
            for j in 0..hw {
                acc[j] += srow[j] * b;
            }
        }
        for (d, a) in df.plane_mut(ch).iter_mut().zip(acc) {
            *d += a;
        }
    }
}

/// Arithmetic mean of K ≥ 1 equally shaped prototypes or maps.
pub fn kshot_average(items: &[Proto]) -> Result<Proto> {
    let first = items.first().ok_or_else(|| Error::Empty("no prototypes to average".into()))?;
    let k = items.len() as f64;
    let mut acc = first.zeros_like();
    for item in items {
        match (&mut acc, item) {
            (Proto::Global(a), Proto::Global(b)) if a.len() == b.len() => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y / k;
                }
            }
            (Proto::Map(a), Proto::Map(b)) if a.same_shape(b) => {
                for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                    *x += y / k;
                }
            }
            _ => return Err(Error::Shape("prototypes to average differ in shape".into())),
        }
    }
    Ok(acc)
}

/// α₁·support + α₂·self; a global prototype is broadcast when combined with a map.
pub fn combine(support: &Proto, self_support: &Proto, alpha1: f64, alpha2: f64) -> Result<Proto> {
    if support.channels() != self_support.channels() {
        return Err(Error::Shape("combined prototypes differ in channels".into()));
    }
    Ok(match (support, self_support) {
        (Proto::Global(a), Proto::Global(b)) => {
            Proto::Global(a.iter().zip(b).map(|(x, y)| alpha1 * x + alpha2 * y).collect())
        }
        (a, b) => {
            let (h, w) = match (a, b) {
                (Proto::Map(m), _) | (_, Proto::Map(m)) => (m.height(), m.width()),
                _ => unreachable!(),
            };
            let (ma, mb) = (a.to_map(h, w), b.to_map(h, w));
            if !ma.same_shape(&mb) {
                return Err(Error::Shape("combined maps differ in shape".into()));
            }
            let data = ma
                .as_slice()
                .iter()
                .zip(mb.as_slice())
                .map(|(x, y)| alpha1 * x + alpha2 * y)
                .collect();
            Proto::Map(FeatureMap::new(ma.channels(), h, w, data)?)
        }
    })
}

/// Support-only and combined predictions for one query, plus what is needed
/// to back-propagate through them.
#[derive(Debug, Clone)]
pub struct SegmentOutput {
    /// Prediction from the K-averaged support prototypes alone.
    pub support_only: PredictionPair,
    /// Prediction from the combined support and self-support prototypes.
    pub combined: PredictionPair,
    /// Binarized combined prediction.
    pub mask: BinaryMask,
}

#[derive(Debug, Clone)]
pub struct SegmentTape {
    alpha1: f64,
    alpha2: f64,
    support_masks: Vec<BinaryMask>,
    initial_masks: Vec<BinaryMask>,
    self_fg_fallback: Vec<bool>,
    adaptive_fallback: Vec<bool>,
    mean_fg: Proto,
    mean_bg: Proto,
    combined_fg: Proto,
    combined_bg: Proto,
}

/// Runs the full prototype pipeline for one query against K supports:
/// per-shot support prototypes, per-shot initial prediction, self-support
/// foreground and adaptive background prototypes, K-averaging, combination
/// and the final prediction.
///
/// Empty predicted foreground falls back to the shot's support foreground
/// prototype; empty predicted background falls back to its support
/// background prototype broadcast over space.
pub fn segment_forward(
    supports: &[(&FeatureMap, &BinaryMask)],
    query: &FeatureMap,
    alpha1: f64,
    alpha2: f64,
) -> Result<(SegmentOutput, SegmentTape)> {
    if supports.is_empty() {
        return Err(Error::Empty("segmentation needs at least one support".into()));
    }
    let (h, w) = (query.height(), query.width());
    let mut support_fg = Vec::new();
    let mut support_bg = Vec::new();
    let mut initial_masks = Vec::new();
    let mut self_fg = Vec::new();
    let mut self_bg = Vec::new();
    let mut self_fg_fallback = Vec::new();
    let mut adaptive_fallback = Vec::new();
    for (f, m) in supports {
        if !f.same_shape(query) {
            return Err(Error::Shape("support and query features differ in shape".into()));
        }
        let fg = map_prototype(f, m)?;
        let bg = map_prototype(f, &m.inverted())?;
        let initial = cosine_predict(&Proto::Global(fg.clone()), &Proto::Global(bg.clone()), query)?;
        let predicted = binarize(&initial);
        match self_support_fg(query, &predicted)? {
            Some(p) => {
                self_fg.push(Proto::Global(p));
                self_fg_fallback.push(false);
            }
            None => {
                self_fg.push(Proto::Global(fg.clone()));
                self_fg_fallback.push(true);
            }
        }
        match adaptive_bg(query, &predicted)? {
            Some(map) => {
                self_bg.push(Proto::Map(map));
                adaptive_fallback.push(false);
            }
            None => {
                self_bg.push(Proto::Map(Proto::Global(bg.clone()).to_map(h, w)));
                adaptive_fallback.push(true);
            }
        }
        support_fg.push(fg);
        support_bg.push(bg);
        initial_masks.push(predicted);
    }
    let mean_fg = kshot_average(&support_fg.iter().cloned().map(Proto::Global).collect::<Vec<_>>())?;
    let mean_bg = kshot_average(&support_bg.iter().cloned().map(Proto::Global).collect::<Vec<_>>())?;
    let mean_self_fg = kshot_average(&self_fg)?;
    let mean_self_bg = kshot_average(&self_bg)?;
    let combined_fg = combine(&mean_fg, &mean_self_fg, alpha1, alpha2)?;
    let combined_bg = combine(&mean_bg, &mean_self_bg, alpha1, alpha2)?;

    let support_only = cosine_predict(&mean_fg, &mean_bg, query)?;
    let combined = cosine_predict(&combined_fg, &combined_bg, query)?;
    let mask = binarize(&combined);
    Ok((
        SegmentOutput {
            support_only,
            combined,
            mask,
        },
        SegmentTape {
            alpha1,
            alpha2,
            support_masks: supports.iter().map(|(_, m)| (*m).clone()).collect(),
            initial_masks,
            self_fg_fallback,
            adaptive_fallback,
            mean_fg,
            mean_bg,
            combined_fg,
            combined_bg,
        },
    ))
}

impl SegmentTape {
    /// Gradients w.r.t. each support feature and the query feature.
    pub fn backward(
        &self,
        query: &FeatureMap,
        d_support_only: Option<&PredictionGrad>,
        d_combined: Option<&PredictionGrad>,
    ) -> (Vec<FeatureMap>, FeatureMap) {
        let (c, h, w) = query.shape();
        let k = self.support_masks.len() as f64;
        let mut dq = FeatureMap::zeros(c, h, w);
        let mut d_mean_fg = Proto::Global(vec![0.0; c]);
        let mut d_mean_bg = Proto::Global(vec![0.0; c]);
        if let Some(g) = d_support_only {
            cosine_map_backward(&self.mean_fg, query, &g.fg, &mut d_mean_fg, &mut dq);
            cosine_map_backward(&self.mean_bg, query, &g.bg, &mut d_mean_bg, &mut dq);
        }
        let mut d_self_fg = vec![0.0; c];
        let mut d_self_bg = FeatureMap::zeros(c, h, w);
        if let Some(g) = d_combined {
            let mut d_cfg = self.combined_fg.zeros_like();
            let mut d_cbg = self.combined_bg.zeros_like();
            cosine_map_backward(&self.combined_fg, query, &g.fg, &mut d_cfg, &mut dq);
            cosine_map_backward(&self.combined_bg, query, &g.bg, &mut d_cbg, &mut dq);
            if let (Proto::Global(dm), Proto::Global(dc)) = (&mut d_mean_fg, &d_cfg) {
                for ch in 0..c {
                    dm[ch] += self.alpha1 * dc[ch];
                    d_self_fg[ch] += self.alpha2 * dc[ch];
                }
            }
            if let (Proto::Global(dm), Proto::Map(dc)) = (&mut d_mean_bg, &d_cbg) {
                for ch in 0..c {
                    let plane = dc.plane(ch);
                    dm[ch] += self.alpha1 * plane.iter().sum::<f64>();
                    for (d, v) in d_self_bg.plane_mut(ch).iter_mut().zip(plane) {
                        *d += self.alpha2 * v;
                    }
                }
            }
        }
        let d_mean_fg = match d_mean_fg {
            Proto::Global(v) => v,
            Proto::Map(_) => unreachable!(),
        };
        let d_mean_bg = match d_mean_bg {
            Proto::Global(v) => v,
            Proto::Map(_) => unreachable!(),
        };

        let mut d_supports = Vec::with_capacity(self.support_masks.len());
        for shot in 0..self.support_masks.len() {
            let mut d_fg: Vec<f64> = d_mean_fg.iter().map(|v| v / k).collect();
            let mut d_bg: Vec<f64> = d_mean_bg.iter().map(|v| v / k).collect();
            let self_fg_grad: Vec<f64> = d_self_fg.iter().map(|v| v / k).collect();
            let self_bg_grad = d_self_bg.scaled(1.0 / k);
            if self.self_fg_fallback[shot] {
                for (a, b) in d_fg.iter_mut().zip(&self_fg_grad) {
                    *a += b;
                }
            } else {
                map_prototype_backward(&self.initial_masks[shot], &self_fg_grad, &mut dq);
            }
            if self.adaptive_fallback[shot] {
                for (ch, d) in d_bg.iter_mut().enumerate() {
                    *d += self_bg_grad.plane(ch).iter().sum::<f64>();
                }
            } else {
                adaptive_bg_backward(query, &self.initial_masks[shot], &self_bg_grad, &mut dq);
            }
            let mut df = FeatureMap::zeros(c, h, w);
            map_prototype_backward(&self.support_masks[shot], &d_fg, &mut df);
            map_prototype_backward(&self.support_masks[shot].inverted(), &d_bg, &mut df);
            d_supports.push(df);
        }
        (d_supports, dq)
    }
}

/// Final mask and combined prediction for a query.
pub fn segment_query(
    supports: &[(&FeatureMap, &BinaryMask)],
    query: &FeatureMap,
    alpha1: f64,
    alpha2: f64,
) -> Result<(BinaryMask, PredictionPair)> {
    let (out, _) = segment_forward(supports, query, alpha1, alpha2)?;
    Ok((out.mask, out.combined))
}
