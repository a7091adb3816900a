//! Synthetic cross-domain shape dataset, episodic sampling and the strict
//! K-shot support/test split.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, ManifestEntry, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::io;
use crate::rng::Rng;
use crate::spectral;
use crate::tensor::{BinaryMask, FeatureMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn tag(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// Foreground shapes; the category id is the index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
    Bar,
}

impl Shape {
    pub const ALL: [Shape; 6] = [Shape::Disk, Shape::Square, Shape::Triangle, Shape::Ring, Shape::Cross, Shape::Bar];

    pub fn from_category(c: usize) -> Result<Shape> {
        Shape::ALL
            .get(c)
            .copied()
            .ok_or_else(|| Error::OutOfRange(format!("no shape for category {c}")))
    }

    /// Point test in the shape's own frame, coordinates scaled by the radius.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Disk => u * u + v * v <= 1.0,
            Shape::Square => u.abs() <= 0.85 && v.abs() <= 0.85,
            Shape::Triangle => {
                // Equilateral, circumradius 1, apex up.
                v <= 0.5 && u.abs() <= (v + 1.0) / 3f64.sqrt()
            }
            Shape::Ring => {
                let r2 = u * u + v * v;
                (0.3025..=1.0).contains(&r2)
            }
            Shape::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
            Shape::Bar => u.abs() <= 1.0 && v.abs() <= 0.28,
        }
    }
}

/// Image-level appearance shift between domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub gain: [f64; 3],
    pub bias: [f64; 3],
    /// Factor applied to the amplitude of the lowest quarter of non-DC frequencies.
    pub low_freq_boost: f64,
    pub noise: f64,
}

impl DomainStyle {
    pub fn source() -> Self {
        Self {
            gain: [1.0, 1.0, 1.0],
            bias: [0.0, 0.0, 0.0],
            low_freq_boost: 1.0,
            noise: 0.02,
        }
    }

    pub fn target() -> Self {
        Self {
            gain: [0.7, 1.25, 0.6],
            bias: [0.3, -0.28, 0.35],
            low_freq_boost: 2.5,
            noise: 0.06,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub image_size: usize,
    pub images_per_category: usize,
    pub source_categories: Vec<usize>,
    pub target_categories: Vec<usize>,
    pub source_style: DomainStyle,
    pub target_style: DomainStyle,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            images_per_category: 40,
            source_categories: vec![0, 1, 2],
            target_categories: vec![3, 4, 5],
            source_style: DomainStyle::source(),
            target_style: DomainStyle::target(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % backbone::DOWNSAMPLE != 0 {
            return Err(Error::Config(format!(
                "image size {} is not a positive multiple of {}",
                self.image_size,
                backbone::DOWNSAMPLE
            )));
        }
        if self.image_size < 16 {
            return Err(Error::Config("image size must be at least 16".into()));
        }
        if self.images_per_category < 2 {
            return Err(Error::Config("need at least 2 images per category".into()));
        }
        let src: BTreeSet<_> = self.source_categories.iter().collect();
        let tgt: BTreeSet<_> = self.target_categories.iter().collect();
        if src.is_empty() || tgt.is_empty() {
            return Err(Error::Config("source and target category sets must be nonempty".into()));
        }
        if src.intersection(&tgt).next().is_some() {
            return Err(Error::Config("source and target categories overlap".into()));
        }
        if src.len() != self.source_categories.len() || tgt.len() != self.target_categories.len() {
            return Err(Error::Config("duplicate category id".into()));
        }
        for &c in src.iter().chain(tgt.iter()) {
            Shape::from_category(*c)?;
        }
        let (s, t) = (&self.source_style, &self.target_style);
        if s.gain == t.gain && s.bias == t.bias
            || s.low_freq_boost == t.low_freq_boost
            || s.noise == t.noise
        {
            return Err(Error::Config("source and target styles must differ in every knob".into()));
        }
        Ok(())
    }

    pub fn style(&self, domain: Domain) -> &DomainStyle {
        match domain {
            Domain::Source => &self.source_style,
            Domain::Target => &self.target_style,
        }
    }
}

/// One labelled image (or precomputed feature) with its full-resolution mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub category: usize,
    pub domain: Domain,
    pub image: FeatureMap,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn categories(&self, domain: Domain) -> Vec<usize> {
        let set: BTreeSet<usize> = self
            .samples
            .iter()
            .filter(|s| s.domain == domain)
            .map(|s| s.category)
            .collect();
        set.into_iter().collect()
    }

    pub fn of_category(&self, category: usize) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.category == category).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean of each image channel over all samples of a domain.
    pub fn channel_means(&self, domain: Domain) -> Vec<f64> {
        let items: Vec<_> = self.samples.iter().filter(|s| s.domain == domain).collect();
        let c = items.first().map_or(0, |s| s.image.channels());
        let mut acc = vec![0.0; c];
        for s in &items {
            for (a, m) in acc.iter_mut().zip(s.image.channel_means()) {
                *a += m;
            }
        }
        acc.iter().map(|a| a / items.len().max(1) as f64).collect()
    }
}

fn item_seed(seed: u64, category: usize, index: usize) -> u64 {
    seed ^ (category as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64 + 1).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Category colours and stripe textures shared by all images of a category.
fn category_look(category: usize) -> ([f64; 3], f64, f64) {
    const COLOURS: [[f64; 3]; 6] = [
        [0.85, 0.3, 0.25],
        [0.25, 0.75, 0.35],
        [0.3, 0.35, 0.85],
        [0.8, 0.75, 0.2],
        [0.7, 0.25, 0.75],
        [0.2, 0.75, 0.8],
    ];
    let freq = 0.35 + 0.12 * category as f64;
    let angle = category as f64 * PI / 6.0;
    (COLOURS[category % 6], freq, angle)
}

fn render_mask(shape: Shape, size: usize, rng: &mut Rng) -> BinaryMask {
    let s = size as f64;
    loop {
        let radius = rng.uniform_range(0.16, 0.34) * s;
        let cx = rng.uniform_range(radius * 0.8, s - radius * 0.8);
        let cy = rng.uniform_range(radius * 0.8, s - radius * 0.8);
        let theta = rng.uniform_range(0.0, 2.0 * PI);
        let (sin, cos) = theta.sin_cos();
        let mask = BinaryMask::from_fn(size, size, |y, x| {
            let dx = (x as f64 + 0.5 - cx) / radius;
            let dy = (y as f64 + 0.5 - cy) / radius;
            shape.contains(cos * dx + sin * dy, -sin * dx + cos * dy)
        });
        let frac = mask.foreground_fraction();
        if !(0.05..=0.6).contains(&frac) {
            continue;
        }
        let small = mask.downsample(backbone::DOWNSAMPLE).expect("size divisible by 8");
        if small.count_ones() > 0 && small.count_ones() < small.len() {
            return mask;
        }
    }
}

fn apply_style(img: &mut FeatureMap, style: &DomainStyle, rng: &mut Rng) {
    let (c, h, w) = img.shape();
    for ch in 0..c {
        for v in img.plane_mut(ch) {
            *v = style.gain[ch % 3] * *v + style.bias[ch % 3];
        }
    }
    if style.low_freq_boost != 1.0 {
        let mut s = spectral::decompose(img);
        let freq = |i: usize, n: usize| {
            let k = i.min(n - i) as f64;
            k / n as f64
        };
        let mut radii: Vec<f64> = (0..h * w)
            .filter(|&p| p != 0)
            .map(|p| freq(p / w, h).hypot(freq(p % w, w)))
            .collect();
        radii.sort_by(f64::total_cmp);
        let cutoff = radii[radii.len() / 4 - 1];
        for ch in 0..c {
            let plane = s.amplitude.plane_mut(ch);
            for (p, a) in plane.iter_mut().enumerate() {
                if p != 0 && freq(p / w, h).hypot(freq(p % w, w)) <= cutoff {
                    *a *= style.low_freq_boost;
                }
            }
        }
        *img = spectral::reconstruct(&s);
    }
    for v in img.as_mut_slice() {
        *v = (*v + style.noise * rng.normal()).clamp(0.0, 1.0);
    }
}

/// Renders one image: smooth random background, textured category-coloured
/// foreground, then the domain style.
pub fn render_sample(spec: &SynthSpec, category: usize, index: usize, domain: Domain) -> Result<Sample> {
    let shape = Shape::from_category(category)?;
    let size = spec.image_size;
    let mut rng = Rng::new(item_seed(spec.seed, category, index));
    let mask = render_mask(shape, size, &mut rng);
    let (colour, freq, angle) = category_look(category);
    let bg_base: Vec<f64> = (0..3).map(|_| rng.uniform_range(0.3, 0.6)).collect();
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.uniform_range(-0.25, 0.25),
                rng.uniform_range(-0.25, 0.25),
                rng.uniform_range(0.0, 2.0 * PI),
                rng.uniform_range(0.03, 0.1),
            )
        })
        .collect();
    let jitter: Vec<f64> = (0..3).map(|_| rng.uniform_range(-0.08, 0.08)).collect();
    let (sa, ca) = angle.sin_cos();
    let mut image = FeatureMap::from_fn(3, size, size, |c, y, x| {
        let (yf, xf) = (y as f64, x as f64);
        if mask.get(y, x) {
            let t = (freq * (ca * xf + sa * yf)).sin();
            colour[c] + jitter[c] + 0.12 * t
        } else {
            let n: f64 = waves
                .iter()
                .enumerate()
                .map(|(i, &(fx, fy, ph, amp))| amp * (fx * xf + fy * yf + ph + i as f64 * c as f64).sin())
                .sum();
            bg_base[c] + n
        }
    });
    apply_style(&mut image, spec.style(domain), &mut rng);
    Ok(Sample {
        id: format!("{}-c{}-{:03}", domain.tag(), category, index),
        category,
        domain,
        image,
        mask,
    })
}

/// Deterministic dataset; rendering runs in parallel per image.
pub fn generate_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let jobs: Vec<(usize, usize, Domain)> = spec
        .source_categories
        .iter()
        .map(|&c| (c, Domain::Source))
        .chain(spec.target_categories.iter().map(|&c| (c, Domain::Target)))
        .flat_map(|(c, d)| (0..spec.images_per_category).map(move |i| (c, i, d)))
        .collect();
    let samples = jobs
        .par_iter()
        .map(|&(c, i, d)| render_sample(spec, c, i, d))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { samples })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub supports: Vec<Sample>,
    pub query: Sample,
    pub category: usize,
    pub domain: Domain,
}

/// Uniformly samples K supports and one query without replacement.
pub fn sample_episode(dataset: &Dataset, category: usize, k: usize, rng: &mut Rng) -> Result<Episode> {
    let items = dataset.of_category(category);
    if k == 0 {
        return Err(Error::OutOfRange("K must be at least 1".into()));
    }
    if items.len() < k + 1 {
        return Err(Error::InsufficientSamples(format!(
            "category {category} has {} images, need {}",
            items.len(),
            k + 1
        )));
    }
    let picks = rng.sample_indices(items.len(), k + 1);
    let supports = picks[..k].iter().map(|&i| items[i].clone()).collect();
    let query = items[picks[k]].clone();
    Ok(Episode {
        supports,
        category,
        domain: query.domain,
        query,
    })
}

/// Which ids were touched, and in which phase.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccessLog {
    pub finetune_reads: Vec<String>,
    pub eval_supports: Vec<String>,
    pub eval_queries: Vec<String>,
}

impl AccessLog {
    pub fn merge(&mut self, other: AccessLog) {
        self.finetune_reads.extend(other.finetune_reads);
        self.eval_supports.extend(other.eval_supports);
        self.eval_queries.extend(other.eval_queries);
    }
}

/// The K designated supports per novel category. Frozen after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetunePool {
    k: usize,
    entries: BTreeMap<usize, Vec<Sample>>,
}

impl FinetunePool {
    pub fn new(k: usize, entries: BTreeMap<usize, Vec<Sample>>) -> Result<Self> {
        if k == 0 || entries.is_empty() {
            return Err(Error::Empty("pool needs K ≥ 1 and at least one category".into()));
        }
        for (c, items) in &entries {
            if items.len() != k {
                return Err(Error::Shape(format!(
                    "category {c} has {} pool supports, expected exactly {k}",
                    items.len()
                )));
            }
        }
        Ok(Self { k, entries })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn categories(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    /// The K supports of a category, recording each id in `log`.
    pub fn supports(&self, category: usize, log: &mut Vec<String>) -> Result<&[Sample]> {
        let items = self
            .entries
            .get(&category)
            .ok_or_else(|| Error::UnknownId(format!("category {category} not in pool")))?;
        log.extend(items.iter().map(|s| s.id.clone()));
        Ok(items)
    }

    pub fn ids(&self) -> BTreeSet<String> {
        self.entries.values().flatten().map(|s| s.id.clone()).collect()
    }
}

/// Query images per novel category, disjoint from the pool.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TestSet {
    pub queries: BTreeMap<usize, Vec<Sample>>,
}

impl TestSet {
    pub fn ids(&self) -> BTreeSet<String> {
        self.queries.values().flatten().map(|s| s.id.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.queries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Exactly K supports per target category go to the pool; the rest are test queries.
pub fn make_strict_split(dataset: &Dataset, k: usize, rng: &mut Rng) -> Result<(FinetunePool, TestSet)> {
    let categories = dataset.categories(Domain::Target);
    if categories.is_empty() {
        return Err(Error::Empty("dataset has no target-domain categories".into()));
    }
    let mut pool = BTreeMap::new();
    let mut test = TestSet::default();
    for c in categories {
        let items = dataset.of_category(c);
        if items.len() <= k {
            return Err(Error::InsufficientSamples(format!(
                "category {c} has {} images, need more than K={k}",
                items.len()
            )));
        }
        let picks = rng.sample_indices(items.len(), k);
        let chosen: BTreeSet<usize> = picks.iter().copied().collect();
        pool.insert(c, picks.iter().map(|&i| items[i].clone()).collect());
        test.queries.insert(
            c,
            items
                .iter()
                .enumerate()
                .filter(|(i, _)| !chosen.contains(i))
                .map(|(_, s)| (*s).clone())
                .collect(),
        );
    }
    Ok((FinetunePool::new(k, pool)?, test))
}

/// Writes every sample as `<id>.ftns` / `<id>.fmsk` plus the manifest.
pub fn export_dataset(dataset: &Dataset, dir: &Path) -> Result<std::path::PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let feature_path = format!("{}.ftns", s.id);
        let mask_path = format!("{}.fmsk", s.id);
        io::write_feature_file(&s.image, dir.join(&feature_path))?;
        io::write_mask_file(&s.mask, dir.join(&mask_path))?;
        entries.push(ManifestEntry {
            id: s.id.clone(),
            feature_path,
            mask_path,
            category: Some(s.category),
            domain: Some(s.domain.tag().to_string()),
        });
    }
    let manifest = dir.join(MANIFEST_FILE);
    backbone::write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

/// Reads a dataset written by [`export_dataset`]. Every entry must carry a
/// category and a domain.
pub fn import_dataset(dir: &Path) -> Result<Dataset> {
    let entries = backbone::read_manifest(&dir.join(MANIFEST_FILE))?;
    let mut samples = Vec::with_capacity(entries.len());
    for e in entries {
        let category = e
            .category
            .ok_or_else(|| Error::Manifest(format!("entry {:?} has no category", e.id)))?;
        let domain = match e.domain.as_deref() {
            Some("source") => Domain::Source,
            Some("target") => Domain::Target,
            other => return Err(Error::Manifest(format!("entry {:?} has domain {other:?}", e.id))),
        };
        samples.push(Sample {
            image: io::read_feature_file(dir.join(&e.feature_path))?,
            mask: io::read_mask_file(dir.join(&e.mask_path))?,
            id: e.id,
            category,
            domain,
        });
    }
    Ok(Dataset { samples })
}

/// Builds a dataset from external features; masks are already at feature resolution.
pub fn dataset_from_external(ext: &backbone::ExternalFeatures, target: &BTreeSet<usize>) -> Result<Dataset> {
    let mut samples = Vec::with_capacity(ext.len());
    for id in ext.ids() {
        let e = ext.get(id)?;
        let category = e
            .category
            .ok_or_else(|| Error::Manifest(format!("entry {id:?} has no category")))?;
        samples.push(Sample {
            id: id.clone(),
            category,
            domain: if target.contains(&category) { Domain::Target } else { Domain::Source },
            image: e.feature.clone(),
            mask: e.mask.clone(),
        });
    }
    Ok(Dataset { samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            images_per_category: 6,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn shapes_have_expected_area() {
        let grid = 400;
        for shape in Shape::ALL {
            let mut count = 0;
            for y in 0..grid {
                for x in 0..grid {
                    let u = (x as f64 + 0.5) / grid as f64 * 2.0 - 1.0;
                    let v = (y as f64 + 0.5) / grid as f64 * 2.0 - 1.0;
                    count += shape.contains(u, v) as usize;
                }
            }
            let area = count as f64 / (grid * grid) as f64 * 4.0;
            assert!(area > 0.6 && area < 3.2, "{shape:?} area {area}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&small_spec()).unwrap();
        let b = generate_dataset(&small_spec()).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&SynthSpec { seed: 1, ..small_spec() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn masks_and_values_in_range() {
        let d = generate_dataset(&small_spec()).unwrap();
        assert_eq!(d.len(), 36);
        for s in &d.samples {
            let f = s.mask.foreground_fraction();
            assert!((0.05..=0.6).contains(&f), "{} fraction {f}", s.id);
            assert!(s.image.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn overlapping_categories_rejected() {
        let spec = SynthSpec {
            target_categories: vec![2, 3],
            ..SynthSpec::default()
        };
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
        let spec = SynthSpec {
            image_size: 60,
            ..SynthSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn episode_with_all_but_one_support() {
        let d = generate_dataset(&small_spec()).unwrap();
        let mut rng = Rng::new(2);
        let e = sample_episode(&d, 1, 5, &mut rng).unwrap();
        let mut ids: Vec<_> = e.supports.iter().map(|s| s.id.clone()).collect();
        ids.push(e.query.id.clone());
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 6);
        assert!(matches!(sample_episode(&d, 1, 6, &mut rng), Err(Error::InsufficientSamples(_))));
    }

    #[test]
    fn strict_split_counts() {
        let d = generate_dataset(&small_spec()).unwrap();
        let (pool, test) = make_strict_split(&d, 1, &mut Rng::new(5)).unwrap();
        assert_eq!(pool.ids().len(), 3);
        assert_eq!(test.len(), 15);
        assert!(pool.ids().is_disjoint(&test.ids()));
        assert!(make_strict_split(&d, 6, &mut Rng::new(5)).is_err());
    }

    #[test]
    fn pool_requires_exact_k() {
        let d = generate_dataset(&small_spec()).unwrap();
        let mut entries = BTreeMap::new();
        entries.insert(3, vec![d.samples[0].clone(), d.samples[1].clone()]);
        assert!(FinetunePool::new(1, entries).is_err());
    }

    #[test]
    fn export_import_roundtrip() {
        let d = generate_dataset(&SynthSpec {
            images_per_category: 2,
            ..SynthSpec::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_dataset(&d, dir.path()).unwrap();
        let back = import_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), d.len());
        for (a, b) in d.samples.iter().zip(&back.samples) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.mask, b.mask);
            for (x, y) in a.image.as_slice().iter().zip(b.image.as_slice()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }
}
