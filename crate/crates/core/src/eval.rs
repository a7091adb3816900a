//! mIoU, the repeated split/fine-tune/evaluate protocol, the ablation
//! harness and PCA export of feature statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Config, StdKind, Variant};
use crate::episodes::{make_strict_split, AccessLog, Dataset, FinetunePool, Sample, TestSet};
use crate::error::{Error, Result};
use crate::fewshot::{binarize, segment_forward, PredictionPair};
use crate::rng::Rng;
use crate::tensor::{upsample_bilinear, BinaryMask, FeatureMap};
use crate::training::{finetune_target, train_source, LossBreakdown, Model};
use crate::ttis::{self, TimeGrid, TransformKind};

/// |pred ∧ gt| / |pred ∨ gt|, with 1 when both are empty.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::Shape("IoU of masks with different dims".into()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.as_slice().iter().zip(gt.as_slice()) {
        inter += (a & b) as usize;
        union += (a | b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub alpha1: f64,
    pub alpha2: f64,
    pub grid: TimeGrid,
    pub kind: TransformKind,
}

impl EvalSettings {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        Ok(Self {
            alpha1: cfg.alpha1,
            alpha2: cfg.alpha2,
            grid: cfg.grid()?,
            kind: cfg.variant.transform_kind(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub k: usize,
    pub miou: f64,
    pub per_category: BTreeMap<usize, f64>,
    pub pool_ids: Vec<String>,
}

/// Clean-mode domain-agnostic feature of one input.
pub fn agnostic_feature(model: &Model, input: &FeatureMap, s: &EvalSettings) -> Result<FeatureMap> {
    let ds = model.features(input)?;
    Ok(ttis::transform_recorded(&ds, &model.ttis, &s.grid, None, s.kind)?.0)
}

/// Binary prediction at input resolution: the cosine maps are bilinearly
/// upsampled by the encoder stride before thresholding.
fn upsampled_mask(p: &PredictionPair, stride: usize) -> BinaryMask {
    if stride == 1 {
        return binarize(p);
    }
    let up = PredictionPair {
        height: p.height * stride,
        width: p.width * stride,
        fg: upsample_bilinear(&p.fg, p.height, p.width, stride),
        bg: upsample_bilinear(&p.bg, p.height, p.width, stride),
    };
    binarize(&up)
}

/// Segments one query against prepared support features.
pub fn predict_query(
    model: &Model,
    supports: &[(FeatureMap, BinaryMask)],
    query: &FeatureMap,
    s: &EvalSettings,
) -> Result<BinaryMask> {
    let fq = agnostic_feature(model, query, s)?;
    let refs: Vec<(&FeatureMap, &BinaryMask)> = supports.iter().map(|(f, m)| (f, m)).collect();
    let (out, _) = segment_forward(&refs, &fq, s.alpha1, s.alpha2)?;
    Ok(upsampled_mask(&out.combined, model.encoder.stride()))
}

/// Foreground IoU per query, averaged per category and then over categories.
/// Supports come only from the pool; queries only from the test set.
pub fn evaluate(
    model: &Model,
    pool: &FinetunePool,
    test: &TestSet,
    s: &EvalSettings,
    seed: u64,
    log: &mut AccessLog,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Empty("test set is empty".into()));
    }
    let pool_ids = pool.ids();
    if !pool_ids.is_disjoint(&test.ids()) {
        return Err(Error::Access("pool and test set overlap".into()));
    }
    let stride = model.encoder.stride();
    let mut per_category = BTreeMap::new();
    for (&c, queries) in &test.queries {
        if queries.is_empty() {
            continue;
        }
        let supports = pool
            .supports(c, &mut log.eval_supports)?
            .iter()
            .map(|x| Ok((agnostic_feature(model, &x.image, s)?, x.mask.downsample(stride)?)))
            .collect::<Result<Vec<_>>>()?;
        log.eval_queries.extend(queries.iter().map(|q| q.id.clone()));
        let scores = queries
            .par_iter()
            .map(|q: &Sample| iou(&predict_query(model, &supports, &q.image, s)?, &q.mask))
            .collect::<Result<Vec<_>>>()?;
        per_category.insert(c, scores.iter().sum::<f64>() / scores.len() as f64);
    }
    let miou = per_category.values().sum::<f64>() / per_category.len() as f64;
    Ok(EvalReport {
        seed,
        k: pool.k(),
        miou,
        per_category,
        pool_ids: pool_ids.into_iter().collect(),
    })
}

/// Counts of protocol violations found in an access log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AuditSummary {
    pub finetune_reads_outside_pool: usize,
    pub finetune_reads_of_test: usize,
    pub pool_images_as_queries: usize,
}

impl AuditSummary {
    pub fn check(log: &AccessLog, pool: &BTreeSet<String>, test: &BTreeSet<String>) -> Self {
        Self {
            finetune_reads_outside_pool: log.finetune_reads.iter().filter(|id| !pool.contains(*id)).count(),
            finetune_reads_of_test: log.finetune_reads.iter().filter(|id| test.contains(*id)).count(),
            pool_images_as_queries: log.eval_queries.iter().filter(|id| pool.contains(*id)).count(),
        }
    }

    pub fn is_clean(&self) -> bool {
        *self == Self::default()
    }

    fn add(&mut self, o: &AuditSummary) {
        self.finetune_reads_outside_pool += o.finetune_reads_outside_pool;
        self.finetune_reads_of_test += o.finetune_reads_of_test;
        self.pool_images_as_queries += o.pool_images_as_queries;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub report: EvalReport,
    pub audit: AuditSummary,
    pub finetune_reads: usize,
    pub finetune_losses: Vec<LossBreakdown>,
}

/// Split, optional fine-tune, evaluate for one seed.
pub fn run_seed(source: &Model, dataset: &Dataset, cfg: &Config, seed: u64, finetune: bool) -> Result<RunOutcome> {
    let mut rng = Rng::new(seed);
    let (pool, test) = make_strict_split(dataset, cfg.k, &mut rng)?;
    let mut log = AccessLog::default();
    let (model, losses) = if finetune {
        let mut ft_rng = rng.fork();
        finetune_target(source.clone(), &pool, &cfg.finetune_settings()?, &mut ft_rng, &mut log.finetune_reads)?
    } else {
        (source.clone(), Vec::new())
    };
    let report = evaluate(&model, &pool, &test, &EvalSettings::from_config(cfg)?, seed, &mut log)?;
    let audit = AuditSummary::check(&log, &pool.ids(), &test.ids());
    Ok(RunOutcome {
        report,
        audit,
        finetune_reads: log.finetune_reads.len(),
        finetune_losses: losses,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatedReport {
    pub label: String,
    pub seeds: Vec<u64>,
    pub per_run_miou: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub per_category: BTreeMap<usize, f64>,
    pub audit: AuditSummary,
    pub runs: Vec<EvalReport>,
    pub config: Config,
}

impl RepeatedReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn mean_std(values: &[f64], kind: StdKind) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    if values.iter().all(|&v| v == values[0]) {
        return (values[0], 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    let denom = match kind {
        StdKind::Sample if values.len() > 1 => n - 1.0,
        StdKind::Sample => return (mean, 0.0),
        StdKind::Population => n,
    };
    (mean, (ss / denom).sqrt())
}

/// Runs [`run_seed`] for every seed (in parallel) and aggregates.
pub fn repeated_eval(
    source: &Model,
    dataset: &Dataset,
    cfg: &Config,
    seeds: &[u64],
    finetune: bool,
    label: &str,
) -> Result<RepeatedReport> {
    if seeds.is_empty() {
        return Err(Error::Empty("no seeds".into()));
    }
    let outcomes = seeds
        .par_iter()
        .map(|&s| run_seed(source, dataset, cfg, s, finetune))
        .collect::<Result<Vec<_>>>()?;
    let per_run: Vec<f64> = outcomes.iter().map(|o| o.report.miou).collect();
    let (mean, std) = mean_std(&per_run, cfg.std_kind);
    let mut per_category: BTreeMap<usize, f64> = BTreeMap::new();
    let mut audit = AuditSummary::default();
    for o in &outcomes {
        audit.add(&o.audit);
        for (&c, &v) in &o.report.per_category {
            *per_category.entry(c).or_default() += v / outcomes.len() as f64;
        }
    }
    Ok(RepeatedReport {
        label: label.to_string(),
        seeds: seeds.to_vec(),
        per_run_miou: per_run,
        mean,
        std,
        per_category,
        audit,
        runs: outcomes.into_iter().map(|o| o.report).collect(),
        config: cfg.clone(),
    })
}

/// Top-2 principal directions of mean-centred vectors, by power iteration
/// with deflation. Returns (directions, per-vector coordinates).
pub fn pca_top2(vectors: &[Vec<f64>]) -> Result<([Vec<f64>; 2], Vec<[f64; 2]>)> {
    const TOL: f64 = 1e-9;
    const MAX_ITER: usize = 10_000;
    if vectors.len() < 3 {
        return Err(Error::InsufficientSamples("PCA needs at least 3 vectors".into()));
    }
    let d = vectors[0].len();
    if d == 0 || vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Shape("PCA vectors must share a nonzero length".into()));
    }
    let n = vectors.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| vectors.iter().map(|v| v[j]).sum::<f64>() / n).collect();
    let centred: Vec<Vec<f64>> = vectors.iter().map(|v| v.iter().zip(&mean).map(|(a, b)| a - b).collect()).collect();
    let mut cov = vec![0.0; d * d];
    for v in &centred {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += v[i] * v[j] / n;
            }
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if trace <= 0.0 {
        return Err(Error::Empty("PCA input has rank 0".into()));
    }
    let norm = |v: &mut Vec<f64>| {
        let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if s > 0.0 {
            v.iter_mut().for_each(|x| *x /= s);
        }
        s
    };
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(2);
    for comp in 0..2 {
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.1 * ((i * 7 + comp * 3) % 11) as f64).collect();
        let project_out = |v: &mut Vec<f64>, dirs: &[Vec<f64>]| {
            for u in dirs {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        };
        project_out(&mut v, &dirs);
        norm(&mut v);
        for _ in 0..MAX_ITER {
            let mut next: Vec<f64> = (0..d).map(|i| (0..d).map(|j| cov[i * d + j] * v[j]).sum()).collect();
            project_out(&mut next, &dirs);
            if norm(&mut next) < 1e-300 {
                break;
            }
            let align: f64 = next.iter().zip(&v).map(|(a, b)| a * b).sum();
            if align < 0.0 {
                next.iter_mut().for_each(|x| *x = -*x);
            }
            let change = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = next;
            if change < TOL {
                break;
            }
        }
        dirs.push(v);
    }
    let coords = centred
        .iter()
        .map(|v| {
            let p = |u: &Vec<f64>| v.iter().zip(u).map(|(a, b)| a * b).sum::<f64>();
            [p(&dirs[0]), p(&dirs[1])]
        })
        .collect();
    let [a, b]: [Vec<f64>; 2] = dirs.try_into().expect("two directions");
    Ok(([a, b], coords))
}

/// Writes "label,pc1,pc2" rows for the given vectors.
pub fn pca_export(vectors: &[Vec<f64>], labels: &[String], path: &Path) -> Result<Vec<[f64; 2]>> {
    if vectors.len() != labels.len() {
        return Err(Error::Shape("one label per vector required".into()));
    }
    let (_, coords) = pca_top2(vectors)?;
    let mut text = String::from("label,pc1,pc2\n");
    for (l, c) in labels.iter().zip(&coords) {
        writeln!(text, "{l},{},{}", c[0], c[1]).expect("string write");
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(coords)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub variant: String,
    pub finetuned: bool,
    pub report: RepeatedReport,
}

pub const SOURCE_ONLY_LABEL: &str = "FSS-TIs (S.O.)";

/// Trains each variant from the same initialization, evaluates all of them on
/// the same split seeds, and adds the source-only row of the full model.
pub fn ablation_suite(dataset: &Dataset, cfg: &Config, variants: &[Variant]) -> Result<Vec<AblationRow>> {
    let seeds = cfg.repeat_seeds();
    let mut rows = Vec::new();
    for &variant in variants {
        let vcfg = Config { variant, ..cfg.clone() };
        let source = train_variant(dataset, &vcfg)?;
        let report = repeated_eval(&source, dataset, &vcfg, &seeds, true, variant.label())?;
        rows.push(AblationRow {
            label: variant.label().into(),
            variant: variant.flag().into(),
            finetuned: true,
            report,
        });
        if variant == Variant::Full {
            let report = repeated_eval(&source, dataset, &vcfg, &seeds, false, SOURCE_ONLY_LABEL)?;
            rows.push(AblationRow {
                label: SOURCE_ONLY_LABEL.into(),
                variant: variant.flag().into(),
                finetuned: false,
                report,
            });
        }
    }
    Ok(rows)
}

/// Source training of the model described by `cfg`.
pub fn train_variant(dataset: &Dataset, cfg: &Config) -> Result<Model> {
    let init = Model::conv(cfg.channels, cfg.seed);
    let mut rng = Rng::new(cfg.seed ^ 0x5EED);
    Ok(train_source(dataset, init, &cfg.source_settings()?, &mut rng)?.0)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut text = String::from("label,variant,finetuned,mean_miou,std_miou\n");
    for r in rows {
        writeln!(
            text,
            "{},{},{},{:.4},{:.4}",
            r.label,
            r.variant,
            r.finetuned,
            100.0 * r.report.mean,
            100.0 * r.report.std
        )
        .expect("string write");
    }
    text
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = BinaryMask::from_fn(4, 4, |y, _| y < 2);
        let b = BinaryMask::from_fn(4, 4, |y, _| y >= 2);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        assert_eq!(iou(&BinaryMask::zeros(2, 2), &BinaryMask::zeros(2, 2)).unwrap(), 1.0);
        let c = BinaryMask::from_fn(4, 4, |y, x| y < 2 && x < 2);
        assert_eq!(iou(&c, &a).unwrap(), 0.5);
    }

    #[test]
    fn std_kinds() {
        let (m, s) = mean_std(&[1.0, 3.0], StdKind::Sample);
        assert_eq!((m, s), (2.0, 2f64.sqrt()));
        assert_eq!(mean_std(&[1.0, 3.0], StdKind::Population).1, 1.0);
        assert_eq!(mean_std(&[0.4, 0.4, 0.4], StdKind::Sample).1, 0.0);
    }

    #[test]
    fn pca_on_line_and_ordering() {
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        let (_, coords) = pca_top2(&pts).unwrap();
        assert!(coords.iter().all(|c| c[1].abs() <= 1e-6));
        let mut rng = Rng::new(1);
        let pts: Vec<Vec<f64>> = (0..50)
            .map(|_| vec![3.0 * rng.normal(), rng.normal(), 0.2 * rng.normal()])
            .collect();
        let (_, coords) = pca_top2(&pts).unwrap();
        let var = |k: usize| coords.iter().map(|c| c[k] * c[k]).sum::<f64>();
        assert!(var(0) >= var(1));
        assert!(pca_top2(&vec![vec![1.0, 2.0]; 4]).is_err());
        assert!(pca_top2(&pts[..2]).is_err());
    }
}
