//! Flat run configuration shared by the library entry points and the CLI.

use serde::{Deserialize, Serialize};

use crate::episodes::SynthSpec;
use crate::error::{Error, Result};
use crate::training::{AlphaPolicy, LossSettings, RegForm, TrainSettings};
use crate::ttis::{TimeGrid, TransformKind, TtisMode};

/// Component removal used by the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default, PartialOrd, Ord)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Full,
    NoOde,
    NoFft,
    NoRsp,
    NoReg,
    NoDsloss,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoOde,
        Variant::NoFft,
        Variant::NoRsp,
        Variant::NoReg,
        Variant::NoDsloss,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "FSS-TIs",
            Variant::NoOde => "FSS-TIs-ODE",
            Variant::NoFft => "FSS-TIs-FFT",
            Variant::NoRsp => "FSS-TIs-RSP",
            Variant::NoReg => "FSS-TIs-LR",
            Variant::NoDsloss => "FSS-TIs-Lds",
        }
    }

    pub fn flag(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoOde => "no-ode",
            Variant::NoFft => "no-fft",
            Variant::NoRsp => "no-rsp",
            Variant::NoReg => "no-reg",
            Variant::NoDsloss => "no-dsloss",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.flag() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }

    pub fn transform_kind(self) -> TransformKind {
        match self {
            Variant::NoOde => TransformKind::SingleAffine,
            Variant::NoFft => TransformKind::Spatial,
            _ => TransformKind::Full,
        }
    }
}

/// Population or sample standard deviation across repeats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StdKind {
    #[default]
    Sample,
    Population,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub image_size: usize,
    pub channels: usize,
    pub k: usize,
    pub n_intervals: usize,
    pub h: f64,
    pub tau: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub lr_source: f64,
    pub lr_finetune: f64,
    pub momentum: f64,
    pub grad_clip: f64,
    pub iterations_source: usize,
    pub iterations_finetune: usize,
    pub repeats: usize,
    pub variant: Variant,
    pub reg_form: RegForm,
    pub alpha_policy: AlphaPolicy,
    pub std_kind: StdKind,
    pub images_per_category: usize,
    pub data_dir: Option<String>,
    pub features_dir: Option<String>,
    pub checkpoint: Option<String>,
    pub out: Option<String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 64,
            channels: 32,
            k: 1,
            n_intervals: 10,
            h: 0.01,
            tau: 10.0,
            alpha1: 0.5,
            alpha2: 0.5,
            lr_source: 0.001,
            lr_finetune: 0.0005,
            momentum: 0.9,
            grad_clip: 50.0,
            iterations_source: 2000,
            iterations_finetune: 100,
            repeats: 20,
            variant: Variant::Full,
            reg_form: RegForm::Absolute,
            alpha_policy: AlphaPolicy::PerCall,
            std_kind: StdKind::Sample,
            images_per_category: 40,
            data_dir: None,
            features_dir: None,
            checkpoint: None,
            out: None,
        }
    }
}

impl Config {
    /// Parses JSON; errors carry the line and column of the problem.
    pub fn from_json(text: &str) -> Result<Config> {
        let cfg: Config = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("line {}, column {}: {e}", e.line(), e.column())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.image_size % 8 != 0 {
            return fail(format!("image_size {} must be a positive multiple of 8", self.image_size));
        }
        if self.channels == 0 {
            return fail("channels must be positive".into());
        }
        if self.k == 0 {
            return fail("k must be at least 1".into());
        }
        if self.k >= self.images_per_category {
            return fail(format!("k = {} leaves no test queries", self.k));
        }
        if !(self.tau > 0.0) {
            return fail("tau must be positive".into());
        }
        if !(self.lr_source >= 0.0 && self.lr_finetune >= 0.0) {
            return fail("learning rates must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)".into());
        }
        if !(self.grad_clip >= 0.0) {
            return fail("grad_clip must be non-negative (0 disables)".into());
        }
        if self.repeats == 0 {
            return fail("repeats must be at least 1".into());
        }
        TimeGrid::new(self.n_intervals, self.h)?;
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.n_intervals, self.h)
    }

    /// Loss settings for training (`perturbed` = use random spectral perturbation
    /// unless the variant removes it).
    pub fn loss_settings(&self) -> Result<LossSettings> {
        Ok(LossSettings {
            tau: self.tau,
            alpha1: self.alpha1,
            alpha2: self.alpha2,
            grid: self.grid()?,
            kind: self.variant.transform_kind(),
            mode: if self.variant == Variant::NoRsp {
                TtisMode::EvalClean
            } else {
                TtisMode::TrainPerturbed
            },
            alpha_policy: self.alpha_policy,
            use_reg: self.variant != Variant::NoReg,
            use_ds: self.variant != Variant::NoDsloss,
            reg_form: self.reg_form,
        })
    }

    pub fn source_settings(&self) -> Result<TrainSettings> {
        Ok(TrainSettings {
            iterations: self.iterations_source,
            grad_clip: self.grad_clip,
            k: self.k,
            lr: self.lr_source,
            momentum: self.momentum,
            loss: self.loss_settings()?,
        })
    }

    pub fn finetune_settings(&self) -> Result<TrainSettings> {
        Ok(TrainSettings {
            iterations: self.iterations_finetune,
            grad_clip: self.grad_clip,
            k: self.k,
            lr: self.lr_finetune,
            momentum: self.momentum,
            loss: self.loss_settings()?,
        })
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            image_size: self.image_size,
            images_per_category: self.images_per_category,
            seed: self.seed,
            ..SynthSpec::default()
        }
    }

    /// The split seeds of the repeated protocol.
    pub fn repeat_seeds(&self) -> Vec<u64> {
        (0..self.repeats as u64).map(|i| self.seed.wrapping_mul(1_000_003).wrapping_add(i)).collect()
    }
}
