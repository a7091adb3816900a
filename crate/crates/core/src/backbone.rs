//! Small convolutional feature extractor and the external-feature bridge.
//!
//! The conv backbone has three 3×3 stride-2 convolutions (zero padding 1),
//! channel plan 3→16→32→C, with max(0,x) after the first two layers. An
//! H×W image maps to a C×(H/8)×(W/8) feature.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::rng::Rng;
use crate::tensor::{BinaryMask, FeatureMap};

pub const DOWNSAMPLE: usize = 8;

/// Which encoder weights receive updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum TrainScope {
    #[default]
    All,
    LastLayerOnly,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    /// out × in × 3 × 3, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    /// Uniform init in [−s, s], s = sqrt(6 / (fan_in + fan_out)); zero bias.
    pub fn seeded(in_channels: usize, out_channels: usize, rng: &mut Rng) -> Self {
        let fan = (9 * (in_channels + out_channels)) as f64;
        let s = (6.0 / fan).sqrt();
        let weight = (0..out_channels * in_channels * 9)
            .map(|_| rng.uniform_range(-s, s))
            .collect();
        Self {
            in_channels,
            out_channels,
            weight,
            bias: vec![0.0; out_channels],
        }
    }

    fn out_dims(h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(2), w.div_ceil(2))
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let (cin, h, w) = x.shape();
        assert_eq!(cin, self.in_channels);
        let (oh, ow) = Self::out_dims(h, w);
        let mut out = FeatureMap::zeros(self.out_channels, oh, ow);
        for co in 0..self.out_channels {
            let dst = out.plane_mut(co);
            dst.iter_mut().for_each(|v| *v = self.bias[co]);
            for ci in 0..cin {
                let src = x.plane(ci);
                let kernel = &self.weight[(co * cin + ci) * 9..(co * cin + ci + 1) * 9];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wk = kernel[ky * 3 + kx];
                        for oy in 0..oh {
                            let iy = (2 * oy + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &src[iy as usize * w..(iy as usize + 1) * w];
                            let drow = &mut dst[oy * ow..(oy + 1) * ow];
                            for (ox, d) in drow.iter_mut().enumerate() {
                                let ix = (2 * ox + kx) as isize - 1;
                                if ix >= 0 && (ix as usize) < w {
                                    *d += wk * row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns (∂/∂input, ∂/∂weight, ∂/∂bias). The input gradient is skipped
    /// when `need_input` is false.
    pub fn backward(&self, x: &FeatureMap, grad: &FeatureMap, need_input: bool) -> (Option<FeatureMap>, Vec<f64>, Vec<f64>) {
        let (cin, h, w) = x.shape();
        let (oh, ow) = (grad.height(), grad.width());
        let mut dw = vec![0.0; self.weight.len()];
        let mut db = vec![0.0; self.out_channels];
        let mut dx = need_input.then(|| FeatureMap::zeros(cin, h, w));
        for co in 0..self.out_channels {
            let g = grad.plane(co);
            db[co] = g.iter().sum();
            for ci in 0..cin {
                let src = x.plane(ci);
                let base = (co * cin + ci) * 9;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wk = self.weight[base + ky * 3 + kx];
                        let mut acc = 0.0;
                        for oy in 0..oh {
                            let iy = (2 * oy + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let iy = iy as usize;
                            for ox in 0..ow {
                                let ix = (2 * ox + kx) as isize - 1;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let gv = g[oy * ow + ox];
                                acc += gv * src[iy * w + ix as usize];
                                if let Some(dx) = dx.as_mut() {
                                    dx.plane_mut(ci)[iy * w + ix as usize] += wk * gv;
                                }
                            }
                        }
                        dw[base + ky * 3 + kx] += acc;
                    }
                }
            }
        }
        (dx, dw, db)
    }
}

fn relu(x: &FeatureMap) -> FeatureMap {
    let mut out = x.clone();
    out.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

fn relu_backward(pre: &FeatureMap, grad: &mut FeatureMap) {
    for (g, &p) in grad.as_mut_slice().iter_mut().zip(pre.as_slice()) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBackbone {
    pub layers: [ConvLayer; 3],
    pub scope: TrainScope,
}

#[derive(Debug, Clone)]
pub struct ConvTape {
    input: FeatureMap,
    pre1: FeatureMap,
    act1: FeatureMap,
    pre2: FeatureMap,
    act2: FeatureMap,
}

impl ConvBackbone {
    pub fn seeded(out_channels: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        Self {
            layers: [
                ConvLayer::seeded(3, 16, &mut rng),
                ConvLayer::seeded(16, 32, &mut rng),
                ConvLayer::seeded(32, out_channels, &mut rng),
            ],
            scope: TrainScope::All,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.layers[2].out_channels
    }

    pub fn set_trainable(&mut self, scope: TrainScope) {
        self.scope = scope;
    }

    fn check_input(img: &FeatureMap) -> Result<()> {
        let (c, h, w) = img.shape();
        if c != 3 || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
            return Err(Error::Shape(format!(
                "backbone input must be 3xHxW with H, W divisible by {DOWNSAMPLE}, got {c}x{h}x{w}"
            )));
        }
        Ok(())
    }

    pub fn extract(&self, img: &FeatureMap) -> Result<FeatureMap> {
        Ok(self.extract_recorded(img)?.0)
    }

    pub fn extract_recorded(&self, img: &FeatureMap) -> Result<(FeatureMap, ConvTape)> {
        Self::check_input(img)?;
        let pre1 = self.layers[0].forward(img);
        let act1 = relu(&pre1);
        let pre2 = self.layers[1].forward(&act1);
        let act2 = relu(&pre2);
        let out = self.layers[2].forward(&act2);
        Ok((
            out,
            ConvTape {
                input: img.clone(),
                pre1,
                act1,
                pre2,
                act2,
            },
        ))
    }

    /// Gradients for all six weight tensors in the order of [`Self::param_slices`].
    /// Layers outside the train scope are not back-propagated into.
    pub fn backward(&self, tape: &ConvTape, grad: &FeatureMap) -> Vec<Vec<f64>> {
        let mut grads = vec![
            vec![0.0; self.layers[0].weight.len()],
            vec![0.0; self.layers[0].bias.len()],
            vec![0.0; self.layers[1].weight.len()],
            vec![0.0; self.layers[1].bias.len()],
            vec![0.0; self.layers[2].weight.len()],
            vec![0.0; self.layers[2].bias.len()],
        ];
        if self.scope == TrainScope::None {
            return grads;
        }
        let deep = self.scope == TrainScope::All;
        let (d2, dw3, db3) = self.layers[2].backward(&tape.act2, grad, deep);
        grads[4] = dw3;
        grads[5] = db3;
        if !deep {
            return grads;
        }
        let mut d2 = d2.expect("requested input gradient");
        relu_backward(&tape.pre2, &mut d2);
        let (d1, dw2, db2) = self.layers[1].backward(&tape.act1, &d2, true);
        grads[2] = dw2;
        grads[3] = db2;
        let mut d1 = d1.expect("requested input gradient");
        relu_backward(&tape.pre1, &mut d1);
        let (_, dw1, db1) = self.layers[0].backward(&tape.input, &d1, false);
        grads[0] = dw1;
        grads[1] = db1;
        grads
    }

    pub fn param_names() -> [&'static str; 6] {
        [
            "backbone.conv1.weight",
            "backbone.conv1.bias",
            "backbone.conv2.weight",
            "backbone.conv2.bias",
            "backbone.conv3.weight",
            "backbone.conv3.bias",
        ]
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    /// Whether parameter tensor `index` is updated under the current scope.
    pub fn is_trainable(&self, index: usize) -> bool {
        match self.scope {
            TrainScope::All => true,
            TrainScope::LastLayerOnly => index >= 4,
            TrainScope::None => false,
        }
    }
}

/// 1×1 channel projection used as the trainable last layer on top of
/// externally exported features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelProjection {
    pub channels: usize,
    /// C×C row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub scope: TrainScope,
}

impl ChannelProjection {
    pub fn identity(channels: usize) -> Self {
        let mut weight = vec![0.0; channels * channels];
        for i in 0..channels {
            weight[i * channels + i] = 1.0;
        }
        Self {
            channels,
            weight,
            bias: vec![0.0; channels],
            scope: TrainScope::All,
        }
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        if x.channels() != self.channels {
            return Err(Error::Shape(format!(
                "projection expects {} channels, got {}",
                self.channels,
                x.channels()
            )));
        }
        let (c, h, w) = x.shape();
        let mut out = FeatureMap::zeros(c, h, w);
        for o in 0..c {
            let dst = out.plane_mut(o);
            dst.iter_mut().for_each(|v| *v = self.bias[o]);
            for i in 0..c {
                let wt = self.weight[o * c + i];
                for (d, s) in dst.iter_mut().zip(x.plane(i)) {
                    *d += wt * s;
                }
            }
        }
        Ok(out)
    }

    pub fn backward(&self, x: &FeatureMap, grad: &FeatureMap) -> Vec<Vec<f64>> {
        let c = self.channels;
        let mut dw = vec![0.0; c * c];
        let mut db = vec![0.0; c];
        if self.scope != TrainScope::None {
            for o in 0..c {
                let g = grad.plane(o);
                db[o] = g.iter().sum();
                for i in 0..c {
                    dw[o * c + i] = g.iter().zip(x.plane(i)).map(|(a, b)| a * b).sum();
                }
            }
        }
        vec![dw, db]
    }
}

/// The learnable feature extractor in front of the TTIs transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Encoder {
    Conv(ConvBackbone),
    Projection(ChannelProjection),
}

#[derive(Debug, Clone)]
pub enum EncoderTape {
    Conv(ConvTape),
    Projection(FeatureMap),
}

impl Encoder {
    pub fn out_channels(&self) -> usize {
        match self {
            Encoder::Conv(b) => b.out_channels(),
            Encoder::Projection(p) => p.channels,
        }
    }

    pub fn set_trainable(&mut self, scope: TrainScope) {
        match self {
            Encoder::Conv(b) => b.set_trainable(scope),
            Encoder::Projection(p) => p.scope = scope,
        }
    }

    pub fn scope(&self) -> TrainScope {
        match self {
            Encoder::Conv(b) => b.scope,
            Encoder::Projection(p) => p.scope,
        }
    }

    /// Spatial reduction from input to feature.
    pub fn stride(&self) -> usize {
        match self {
            Encoder::Conv(_) => DOWNSAMPLE,
            Encoder::Projection(_) => 1,
        }
    }

    pub fn forward(&self, input: &FeatureMap) -> Result<(FeatureMap, EncoderTape)> {
        match self {
            Encoder::Conv(b) => {
                let (f, t) = b.extract_recorded(input)?;
                Ok((f, EncoderTape::Conv(t)))
            }
            Encoder::Projection(p) => Ok((p.forward(input)?, EncoderTape::Projection(input.clone()))),
        }
    }

    pub fn backward(&self, tape: &EncoderTape, grad: &FeatureMap) -> Vec<Vec<f64>> {
        match (self, tape) {
            (Encoder::Conv(b), EncoderTape::Conv(t)) => b.backward(t, grad),
            (Encoder::Projection(p), EncoderTape::Projection(x)) => p.backward(x, grad),
            _ => panic!("encoder tape does not match encoder"),
        }
    }

    pub fn param_names(&self) -> Vec<&'static str> {
        match self {
            Encoder::Conv(_) => ConvBackbone::param_names().to_vec(),
            Encoder::Projection(_) => vec!["projection.weight", "projection.bias"],
        }
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        match self {
            Encoder::Conv(b) => b.param_slices(),
            Encoder::Projection(p) => vec![p.weight.as_slice(), p.bias.as_slice()],
        }
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Encoder::Conv(b) => b.param_slices_mut(),
            Encoder::Projection(p) => vec![p.weight.as_mut_slice(), p.bias.as_mut_slice()],
        }
    }

    pub fn is_trainable(&self, index: usize) -> bool {
        match self {
            Encoder::Conv(b) => b.is_trainable(index),
            Encoder::Projection(p) => p.scope != TrainScope::None && index < 2,
        }
    }
}

/// One manifest record. Extra keys (category, domain) are used by dataset export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub feature_path: String,
    pub mask_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let text = serde_json::to_string_pretty(entries)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn resolve(dir: &Path, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        dir.join(path)
    }
}

/// A precomputed feature with its feature-resolution mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalEntry {
    pub id: String,
    pub feature: FeatureMap,
    pub mask: BinaryMask,
    pub category: Option<usize>,
}

/// Features exported by an external backbone, keyed by id.
#[derive(Debug, Clone, Default)]
pub struct ExternalFeatures {
    entries: BTreeMap<String, ExternalEntry>,
    order: Vec<String>,
}

impl ExternalFeatures {
    pub fn get(&self, id: &str) -> Result<&ExternalEntry> {
        self.entries.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn ids(&self) -> &[String] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn channels(&self) -> Option<usize> {
        self.order.first().map(|id| self.entries[id].feature.channels())
    }
}

/// Loads `dir/manifest.json` and every FTNS/FMSK pair it names.
pub fn load_external_features(dir: impl AsRef<Path>) -> Result<ExternalFeatures> {
    let dir = dir.as_ref();
    let manifest = read_manifest(&dir.join(MANIFEST_FILE))?;
    let mut out = ExternalFeatures::default();
    let mut shape: Option<(usize, usize, usize)> = None;
    for entry in manifest {
        let feature = io::read_feature_file(resolve(dir, &entry.feature_path))?;
        let mask = io::read_mask_file(resolve(dir, &entry.mask_path))?;
        match shape {
            None => shape = Some(feature.shape()),
            Some(s) if s != feature.shape() => {
                return Err(Error::Shape(format!(
                    "entry {:?} has shape {:?}, expected {:?}",
                    entry.id,
                    feature.shape(),
                    s
                )))
            }
            _ => {}
        }
        if mask.height() != feature.height() || mask.width() != feature.width() {
            return Err(Error::Shape(format!(
                "entry {:?}: mask {}x{} does not match feature {}x{}",
                entry.id,
                mask.height(),
                mask.width(),
                feature.height(),
                feature.width()
            )));
        }
        if out.entries.contains_key(&entry.id) {
            return Err(Error::Manifest(format!("duplicate id {:?}", entry.id)));
        }
        out.order.push(entry.id.clone());
        out.entries.insert(
            entry.id.clone(),
            ExternalEntry {
                id: entry.id,
                feature,
                mask,
                category: entry.category,
            },
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(rng: &mut Rng, h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_fn(3, h, w, |_, _, _| rng.uniform())
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let b = ConvBackbone::seeded(32, 1);
        let f = b.extract(&FeatureMap::zeros(3, 64, 64)).unwrap();
        assert_eq!(f.shape(), (32, 8, 8));
        assert!(f.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_dims() {
        let b = ConvBackbone::seeded(8, 1);
        assert!(b.extract(&FeatureMap::zeros(3, 12, 16)).is_err());
        assert!(b.extract(&FeatureMap::zeros(1, 16, 16)).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        assert_eq!(ConvBackbone::seeded(8, 5), ConvBackbone::seeded(8, 5));
        assert_ne!(ConvBackbone::seeded(8, 5), ConvBackbone::seeded(8, 6));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(3);
        let mut b = ConvBackbone::seeded(4, 9);
        for l in b.layers.iter_mut() {
            for v in l.bias.iter_mut() {
                *v = rng.uniform_range(-0.1, 0.1);
            }
        }
        let img = random_image(&mut rng, 8, 8);
        let up = FeatureMap::from_fn(4, 1, 1, |_, _, _| rng.uniform_range(-1.0, 1.0));
        let loss = |b: &ConvBackbone| {
            b.extract(&img).unwrap().as_slice().iter().zip(up.as_slice()).map(|(a, c)| a * c).sum::<f64>()
        };
        let (_, tape) = b.extract_recorded(&img).unwrap();
        let grads = b.backward(&tape, &up);
        let eps = 1e-5;
        let mut worst = 0.0f64;
        for t in 0..6 {
            let scale = grads[t].iter().fold(1e-8f64, |m, v| m.max(v.abs()));
            for i in 0..grads[t].len() {
                let mut p = b.clone();
                p.param_slices_mut()[t][i] += eps;
                let mut m = b.clone();
                m.param_slices_mut()[t][i] -= eps;
                let fd = (loss(&p) - loss(&m)) / (2.0 * eps);
                worst = worst.max((fd - grads[t][i]).abs() / scale);
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn last_layer_only_skips_early_gradients() {
        let mut rng = Rng::new(4);
        let mut b = ConvBackbone::seeded(4, 2);
        b.set_trainable(TrainScope::LastLayerOnly);
        let img = random_image(&mut rng, 16, 16);
        let (f, tape) = b.extract_recorded(&img).unwrap();
        let grads = b.backward(&tape, &f);
        assert!(grads[..4].iter().all(|g| g.iter().all(|&v| v == 0.0)));
        assert!(grads[4].iter().any(|&v| v != 0.0));
        assert!(!b.is_trainable(0) && b.is_trainable(5));
    }

    #[test]
    fn impulse_response_shifts_with_stride() {
        let b = ConvBackbone::seeded(4, 3);
        let mut a = FeatureMap::zeros(3, 32, 32);
        a.set(0, 8, 8, 1.0);
        let mut s = FeatureMap::zeros(3, 32, 32);
        s.set(0, 16, 8, 1.0);
        let fa = b.extract(&a).unwrap();
        let fs = b.extract(&s).unwrap();
        for c in 0..4 {
            for y in 0..3 {
                for x in 0..4 {
                    assert!((fa.get(c, y, x) - fs.get(c, y + 1, x)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn external_features_load_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let f = FeatureMap::from_fn(2, 3, 3, |c, y, x| (c * 9 + y * 3 + x) as f64 * 0.25);
        let m = BinaryMask::from_fn(3, 3, |y, _| y == 1);
        io::write_feature_file(&f, dir.path().join("a.ftns")).unwrap();
        io::write_mask_file(&m, dir.path().join("a.fmsk")).unwrap();
        let entry = |id: &str, fp: &str| ManifestEntry {
            id: id.into(),
            feature_path: fp.into(),
            mask_path: "a.fmsk".into(),
            category: None,
            domain: None,
        };
        write_manifest(&dir.path().join(MANIFEST_FILE), &[entry("a", "a.ftns")]).unwrap();
        let ext = load_external_features(dir.path()).unwrap();
        assert_eq!(ext.get("a").unwrap().feature, f);
        assert!(matches!(ext.get("zz"), Err(Error::UnknownId(_))));

        let g = FeatureMap::zeros(3, 3, 3);
        io::write_feature_file(&g, dir.path().join("b.ftns")).unwrap();
        write_manifest(
            &dir.path().join(MANIFEST_FILE),
            &[entry("a", "a.ftns"), entry("b", "b.ftns")],
        )
        .unwrap();
        match load_external_features(dir.path()) {
            Err(Error::Shape(msg)) => assert!(msg.contains("\"b\"")),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_uses_exact_keys() {
        let e = ManifestEntry {
            id: "x".into(),
            feature_path: "x.ftns".into(),
            mask_path: "x.fmsk".into(),
            category: None,
            domain: None,
        };
        let v: serde_json::Value = serde_json::to_value(&e).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys, vec!["feature_path", "id", "mask_path"]);
    }
}
