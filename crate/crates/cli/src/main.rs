use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use fssti::backbone::{self, MANIFEST_FILE};
use fssti::config::{Config, Variant};
use fssti::episodes::{self, make_strict_split, Dataset, Domain};
use fssti::eval::{self, EvalSettings};
use fssti::gradcheck::{self, GradcheckOptions};
use fssti::rng::Rng;
use fssti::training::{self, Model};
use fssti::Error;

const EXIT_CHECK: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_MISSING: u8 = 3;

#[derive(Parser)]
#[command(name = "fssti", version, about = "Cross-domain few-shot segmentation with spectral ODE transforms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark and export it as FTNS/FMSK files.
    Synth(Common),
    /// Train on the source domain and write a checkpoint.
    Train(Common),
    /// Fine-tune a checkpoint on the K-shot pool of one split.
    Finetune(Common),
    /// Repeated fine-tune and evaluation; writes a report JSON.
    Eval(EvalArgs),
    /// Train and evaluate ablation variants; writes a CSV and a JSON.
    Ablate(AblateArgs),
    /// Finite-difference check of every backward pass.
    Gradcheck(GradcheckArgs),
    /// Project pooled domain-agnostic features onto their top two principal components.
    Pca(Common),
}

/// Flags share names with the config keys.
#[derive(Args, Clone, Default)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    images_per_category: Option<usize>,
    #[arg(long)]
    iterations_source: Option<usize>,
    #[arg(long)]
    iterations_finetune: Option<usize>,
    #[arg(long)]
    n_intervals: Option<usize>,
    #[arg(long)]
    h: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    data_dir: Option<String>,
    #[arg(long)]
    features_dir: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Evaluate the checkpoint as is (source-only protocol).
    #[arg(long)]
    no_finetune: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Variants to run, comma separated; defaults to all (or --variant).
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Test hook: negate the analytic gradient of checks whose name contains this.
    #[arg(long)]
    flip_sign: Option<String>,
}

enum Failure {
    Check(String),
    Usage(String),
    Missing(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(m),
            Error::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                Failure::Missing(e.to_string())
            }
            other => Failure::Runtime(other),
        }
    }
}

type CliResult = std::result::Result<(), Failure>;

fn resolve(c: &Common) -> std::result::Result<Config, Failure> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Missing(format!("config {}: {e}", p.display())))?;
            Config::from_json(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
        }
        None => Config::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = c.$f.clone() { cfg.$f = v; } )* };
    }
    set!(seed, k, repeats, image_size, channels, images_per_category, iterations_source, iterations_finetune, n_intervals, h, tau);
    macro_rules! set_opt {
        ($($f:ident),*) => { $( if c.$f.is_some() { cfg.$f = c.$f.clone(); } )* };
    }
    set_opt!(checkpoint, out, data_dir, features_dir);
    if let Some(v) = &c.variant {
        cfg.variant = Variant::parse(v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require<'a>(v: &'a Option<String>, what: &str) -> std::result::Result<&'a str, Failure> {
    v.as_deref().ok_or_else(|| Failure::Usage(format!("--{what} is required")))
}

fn load_dataset(cfg: &Config) -> std::result::Result<(Dataset, bool), Failure> {
    if let Some(dir) = &cfg.features_dir {
        let dir = Path::new(dir);
        let manifest = dir.join(MANIFEST_FILE);
        if !manifest.exists() {
            return Err(Failure::Missing(format!("no manifest at {}", manifest.display())));
        }
        let target: BTreeSet<usize> = backbone::read_manifest(&manifest)?
            .iter()
            .filter(|e| e.domain.as_deref() == Some(Domain::Target.tag()))
            .filter_map(|e| e.category)
            .collect();
        if target.is_empty() {
            return Err(Failure::Usage("external manifest tags no category with domain \"target\"".into()));
        }
        let ext = backbone::load_external_features(dir)?;
        return Ok((episodes::dataset_from_external(&ext, &target)?, true));
    }
    if let Some(dir) = &cfg.data_dir {
        let dir = Path::new(dir);
        if !dir.join(MANIFEST_FILE).exists() {
            return Err(Failure::Missing(format!("no manifest in {}", dir.display())));
        }
        return Ok((episodes::import_dataset(dir)?, false));
    }
    Ok((episodes::generate_dataset(&cfg.synth_spec())?, false))
}

fn initial_model(cfg: &Config, dataset: &Dataset, external: bool) -> std::result::Result<Model, Failure> {
    if !external {
        return Ok(Model::conv(cfg.channels, cfg.seed));
    }
    let c = dataset.samples.first().map(|s| s.image.channels()).unwrap_or(0);
    Ok(Model::projection(c))
}

fn load_model(cfg: &Config) -> std::result::Result<Model, Failure> {
    let path = cfg
        .checkpoint
        .as_deref()
        .ok_or_else(|| Failure::Missing("--checkpoint is required".into()))?;
    if !Path::new(path).exists() {
        return Err(Failure::Missing(format!("checkpoint {path} does not exist")));
    }
    Ok(training::load_checkpoint(path)?)
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text).map_err(|e| Failure::Runtime(Error::Io { path: path.into(), source: e }))
}

/// Sidecar report next to a checkpoint.
fn sidecar(path: &str) -> PathBuf {
    PathBuf::from(format!("{path}.json"))
}

fn cmd_synth(c: &Common) -> CliResult {
    let cfg = resolve(c)?;
    let out = require(&cfg.out, "out")?;
    let dataset = episodes::generate_dataset(&cfg.synth_spec())?;
    let manifest = episodes::export_dataset(&dataset, Path::new(out))?;
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_train(c: &Common) -> CliResult {
    let cfg = resolve(c)?;
    let out = require(&cfg.out, "out")?;
    let (dataset, external) = load_dataset(&cfg)?;
    let init = initial_model(&cfg, &dataset, external)?;
    let mut rng = Rng::new(cfg.seed ^ 0x5EED);
    let (model, history) = training::train_source(&dataset, init, &cfg.source_settings()?, &mut rng)?;
    training::save_checkpoint(&model, out)?;
    let last = history.last().cloned();
    write_json(
        &sidecar(out),
        &json!({ "command": "train", "config": cfg, "iterations": history.len(), "final_loss": last }),
    )?;
    println!("{out}");
    Ok(())
}

fn cmd_finetune(c: &Common) -> CliResult {
    let cfg = resolve(c)?;
    let source = load_model(&cfg)?;
    let out = require(&cfg.out, "out")?;
    let (dataset, _) = load_dataset(&cfg)?;
    let mut rng = Rng::new(cfg.seed);
    let (pool, _) = make_strict_split(&dataset, cfg.k, &mut rng)?;
    let mut reads = Vec::new();
    let (model, history) =
        training::finetune_target(source, &pool, &cfg.finetune_settings()?, &mut rng.fork(), &mut reads)?;
    training::save_checkpoint(&model, out)?;
    write_json(
        &sidecar(out),
        &json!({
            "command": "finetune",
            "config": cfg,
            "pool": pool.ids(),
            "reads": reads.len(),
            "final_loss": history.last(),
        }),
    )?;
    println!("{out}");
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> CliResult {
    let cfg = resolve(&a.common)?;
    let source = load_model(&cfg)?;
    let out = require(&cfg.out, "out")?;
    let (dataset, _) = load_dataset(&cfg)?;
    let label = if a.no_finetune { eval::SOURCE_ONLY_LABEL } else { cfg.variant.label() };
    let report = eval::repeated_eval(&source, &dataset, &cfg, &cfg.repeat_seeds(), !a.no_finetune, label)?;
    report.write_json(Path::new(out))?;
    println!(
        "{label}: mIoU {:.2} ± {:.2} over {} runs",
        100.0 * report.mean,
        100.0 * report.std,
        report.runs.len()
    );
    if !report.audit.is_clean() {
        return Err(Failure::Check(format!("access audit failed: {:?}", report.audit)));
    }
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> CliResult {
    let cfg = resolve(&a.common)?;
    let out = require(&cfg.out, "out")?;
    let variants = if !a.variants.is_empty() {
        a.variants.iter().map(|v| Variant::parse(v)).collect::<fssti::Result<Vec<_>>>()?
    } else if a.common.variant.is_some() {
        vec![cfg.variant]
    } else {
        Variant::ALL.to_vec()
    };
    let (dataset, _) = load_dataset(&cfg)?;
    let rows = eval::ablation_suite(&dataset, &cfg, &variants)?;
    let csv = eval::ablation_csv(&rows);
    fs::write(out, &csv).map_err(|e| Failure::Runtime(Error::Io { path: out.into(), source: e }))?;
    write_json(&sidecar(out), &json!({ "command": "ablate", "config": cfg, "rows": rows }))?;
    print!("{csv}");
    if let Some(r) = rows.iter().find(|r| !r.report.audit.is_clean()) {
        return Err(Failure::Check(format!("access audit failed for {}", r.label)));
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CliResult {
    let opts = GradcheckOptions {
        seed: a.seed,
        flip_sign_of: a.flip_sign.clone(),
    };
    let results = gradcheck::run_all(&opts)?;
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{status:4} {:8} {:40} max_rel_err {:.3e} (threshold {:.0e}, {} checked, {} kinks)",
            r.suite, r.name, r.max_rel_err, r.threshold, r.checked, r.skipped_kinks
        );
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn cmd_pca(c: &Common) -> CliResult {
    let cfg = resolve(c)?;
    let model = load_model(&cfg)?;
    let out = require(&cfg.out, "out")?;
    let (dataset, _) = load_dataset(&cfg)?;
    let settings = EvalSettings::from_config(&cfg)?;
    let mut vectors = Vec::with_capacity(dataset.len());
    let mut labels = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let f = eval::agnostic_feature(&model, &s.image, &settings)?;
        let (ch, h, w) = f.shape();
        let n = (h * w) as f64;
        vectors.push((0..ch).map(|k| f.plane(k).iter().sum::<f64>() / n).collect());
        labels.push(format!("{}-c{}", s.domain.tag(), s.category));
    }
    eval::pca_export(&vectors, &labels, Path::new(out))?;
    println!("{out}");
    Ok(())
}

fn configure_threads() -> CliResult {
    let Ok(v) = std::env::var("FSSTI_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("FSSTI_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Synth(c) => cmd_synth(c),
        Command::Train(c) => cmd_train(c),
        Command::Finetune(c) => cmd_finetune(c),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Pca(c) => cmd_pca(c),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(m)) => {
            eprintln!("check failed: {m}");
            ExitCode::from(EXIT_CHECK)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("usage error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Missing(m)) => {
            eprintln!("missing artifact: {m}");
            ExitCode::from(EXIT_MISSING)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CHECK)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fssti::config::StdKind;

    #[test]
    fn flags_override_config() {
        let c = Common {
            seed: Some(7),
            variant: Some("no-fft".into()),
            repeats: Some(3),
            ..Common::default()
        };
        let cfg = resolve(&c).ok().unwrap();
        assert_eq!((cfg.seed, cfg.variant, cfg.repeats), (7, Variant::NoFft, 3));
        assert_eq!(cfg.std_kind, StdKind::Sample);
    }

    #[test]
    fn bad_size_is_usage_error() {
        let c = Common {
            image_size: Some(60),
            ..Common::default()
        };
        assert!(matches!(resolve(&c), Err(Failure::Usage(_))));
    }
}
