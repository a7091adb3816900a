//! Central-difference checks of every hand-written backward pass.
//!
//! Each check perturbs inputs or parameters of a scalar loss `<u, op(x)>`
//! and compares against the analytic vector-Jacobian product. The error of
//! a tensor is max |fd − analytic| / max |analytic|.

use serde::Serialize;

use crate::backbone::ConvBackbone;
use crate::episodes::{generate_dataset, sample_episode, SynthSpec};
use crate::error::Result;
use crate::rng::Rng;
use crate::spectral;
use crate::tensor::FeatureMap;
use crate::training::{bce_with_grad, reg_grad, reg_loss, source_loss, LossSettings, Model, RegForm};
use crate::ttis::{self, TimeGrid, TransformKind, TtisParams};
use crate::fewshot::PredictionPair;
use crate::tensor::BinaryMask;

/// Threshold for single operations.
pub const ISOLATED_TOL: f64 = 1e-4;
/// Threshold for the composed training loss.
pub const COMPOSED_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub suite: String,
    pub name: String,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.threshold
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Test hook: negate the analytic gradient of every check whose name
    /// contains this string.
    pub flip_sign_of: Option<String>,
}

struct Checker<'a> {
    opts: &'a GradcheckOptions,
    results: Vec<CheckResult>,
}

impl Checker<'_> {
    /// `loss(i, d)` evaluates the loss with entry `i` shifted by `d`.
    /// Entries where two step sizes disagree (a kink of a binarization or
    /// argmax) are skipped and counted.
    fn check(
        &mut self,
        suite: &str,
        name: &str,
        analytic: &[f64],
        stride: usize,
        tol: f64,
        eps: f64,
        loss: impl Fn(usize, f64) -> f64,
    ) {
        let flip = self.opts.flip_sign_of.as_deref().is_some_and(|f| name.contains(f));
        let analytic: Vec<f64> = analytic.iter().map(|v| if flip { -v } else { *v }).collect();
        let scale = analytic.iter().fold(1e-8f64, |m, v| m.max(v.abs()));
        let (mut worst, mut checked, mut kinks) = (0.0f64, 0, 0);
        for i in (0..analytic.len()).step_by(stride.max(1)) {
            let fd = (loss(i, eps) - loss(i, -eps)) / (2.0 * eps);
            let fd_half = (loss(i, eps / 2.0) - loss(i, -eps / 2.0)) / eps;
            if (fd - fd_half).abs() > 0.1 * tol * scale.max(fd.abs()) {
                kinks += 1;
                continue;
            }
            worst = worst.max((fd - analytic[i]).abs() / scale);
            checked += 1;
        }
        self.results.push(CheckResult {
            suite: suite.into(),
            name: name.into(),
            max_rel_err: worst,
            threshold: tol,
            checked,
            skipped_kinks: kinks,
        });
    }
}

fn dot(a: &FeatureMap, b: &FeatureMap) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
}

fn random_map(rng: &mut Rng, c: usize, h: usize, w: usize, scale: f64) -> FeatureMap {
    FeatureMap::from_fn(c, h, w, |_, _, _| rng.uniform_range(-scale, scale))
}

fn shifted(f: &FeatureMap, i: usize, d: f64) -> FeatureMap {
    let mut g = f.clone();
    g.as_mut_slice()[i] += d;
    g
}

fn random_params(rng: &mut Rng, c: usize) -> TtisParams {
    let mut p = TtisParams::identity(c);
    for s in p.flat_slices_mut() {
        for v in s.iter_mut() {
            *v += rng.uniform_range(-0.3, 0.3);
        }
    }
    p
}

fn ttis_suite(ck: &mut Checker<'_>, rng: &mut Rng) {
    let (c, h, w) = (3, 4, 6);
    let x = random_map(rng, c, h, w, 2.0);
    let u = random_map(rng, c, h, w, 1.0);
    let alpha = 0.3;

    let g = ttis::perturb_backward(&x, alpha, &u);
    ck.check("ttis", "perturb.input", g.as_slice(), 1, ISOLATED_TOL, 1e-6, |i, d| {
        dot(&ttis::perturb_spectrum(&shifted(&x, i, d), alpha), &u)
    });

    let gv: Vec<f64> = (0..c).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let g = ttis::delta_backward(&x, &gv);
    ck.check("ttis", "delta.input", g.as_slice(), 1, ISOLATED_TOL, 1e-6, |i, d| {
        ttis::delta(&shifted(&x, i, d)).iter().zip(&gv).map(|(a, b)| a * b).sum()
    });

    let s = spectral::decompose(&x);
    let (da, dp) = spectral::reconstruct_backward(&s, &u);
    ck.check("ttis", "reconstruct.amplitude", da.as_slice(), 1, ISOLATED_TOL, 1e-6, |i, d| {
        let t = spectral::AmpPhase {
            amplitude: shifted(&s.amplitude, i, d),
            phase: s.phase.clone(),
        };
        dot(&spectral::reconstruct(&t), &u)
    });
    ck.check("ttis", "reconstruct.phase", dp.as_slice(), 1, ISOLATED_TOL, 1e-6, |i, d| {
        let t = spectral::AmpPhase {
            amplitude: s.amplitude.clone(),
            phase: shifted(&s.phase, i, d),
        };
        dot(&spectral::reconstruct(&t), &u)
    });
    let ua = random_map(rng, c, h, w, 1.0);
    let up = random_map(rng, c, h, w, 1.0);
    let g = spectral::decompose_backward(&x, &ua, &up);
    ck.check("ttis", "decompose.input", g.as_slice(), 1, ISOLATED_TOL, 1e-6, |i, d| {
        let t = spectral::decompose(&shifted(&x, i, d));
        dot(&t.amplitude, &ua) + dot(&t.phase, &up)
    });

    let params = random_params(rng, c);
    let grid = TimeGrid::new(4, 0.05).expect("valid grid");
    for (kind, tag) in [
        (TransformKind::Full, "full"),
        (TransformKind::SingleAffine, "single_affine"),
        (TransformKind::Spatial, "spatial"),
    ] {
        for (a, mode) in [(None, "clean"), (Some(alpha), "perturbed")] {
            let (_, tape) = ttis::transform_recorded(&x, &params, &grid, a, kind).expect("transform");
            let (pg, dx) = tape.backward(&params, &u);
            let run = |p: &TtisParams, f: &FeatureMap| {
                dot(&ttis::transform_recorded(f, p, &grid, a, kind).expect("transform").0, &u)
            };
            let prefix = format!("transform.{tag}.{mode}");
            ck.check("ttis", &format!("{prefix}.input"), dx.as_slice(), 1, ISOLATED_TOL, 1e-6, |i, d| {
                run(&params, &shifted(&x, i, d))
            });
            let names = ["m_amp", "m_phase", "v_amp", "v_phase"];
            let grads = pg.slices();
            for (t, name) in names.iter().enumerate() {
                if kind == TransformKind::Spatial && (t == 1 || t == 3) {
                    continue;
                }
                ck.check("ttis", &format!("{prefix}.{name}"), grads[t], 1, ISOLATED_TOL, 1e-6, |i, d| {
                    let mut p = params.clone();
                    p.flat_slices_mut()[t][i] += d;
                    run(&p, &x)
                });
            }
        }
    }
}

fn backbone_suite(ck: &mut Checker<'_>, rng: &mut Rng) {
    let mut b = ConvBackbone::seeded(4, rng.next_u64());
    for l in b.layers.iter_mut() {
        l.bias.iter_mut().for_each(|v| *v = rng.uniform_range(-0.1, 0.1));
    }
    let img = FeatureMap::from_fn(3, 8, 8, |_, _, _| rng.uniform());
    let (out, tape) = b.extract_recorded(&img).expect("valid input");
    let (c, h, w) = out.shape();
    let u = random_map(rng, c, h, w, 1.0);
    let grads = b.backward(&tape, &u);
    for (t, name) in ConvBackbone::param_names().iter().enumerate() {
        ck.check("backbone", name, &grads[t], 1, ISOLATED_TOL, 1e-6, |i, d| {
            let mut p = b.clone();
            p.param_slices_mut()[t][i] += d;
            dot(&p.extract(&img).expect("valid input"), &u)
        });
    }
}

fn loss_suite(ck: &mut Checker<'_>, rng: &mut Rng) {
    let n = 12;
    let p = PredictionPair {
        height: 3,
        width: 4,
        fg: (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
        bg: (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
    };
    let m = BinaryMask::from_fn(3, 4, |_, _| rng.uniform() < 0.5);
    let (_, g) = bce_with_grad(&p, &m, 10.0).expect("shapes match");
    let eval = |p: &PredictionPair| bce_with_grad(p, &m, 10.0).expect("shapes match").0;
    ck.check("losses", "bce.fg", &g.fg, 1, ISOLATED_TOL, 1e-6, |i, d| {
        let mut q = p.clone();
        q.fg[i] += d;
        eval(&q)
    });
    ck.check("losses", "bce.bg", &g.bg, 1, ISOLATED_TOL, 1e-6, |i, d| {
        let mut q = p.clone();
        q.bg[i] += d;
        eval(&q)
    });

    let params = random_params(rng, 3);
    for (form, tag) in [(RegForm::Signed, "signed"), (RegForm::Absolute, "absolute")] {
        let g = reg_grad(&params, form);
        for (t, name) in ["m_amp", "m_phase", "v_amp", "v_phase"].iter().enumerate() {
            ck.check("losses", &format!("reg.{tag}.{name}"), g.slices()[t], 1, ISOLATED_TOL, 1e-6, |i, d| {
                let mut p = params.clone();
                p.flat_slices_mut()[t][i] += d;
                reg_loss(&p, form)
            });
        }
    }

    let data = generate_dataset(&SynthSpec {
        image_size: 16,
        images_per_category: 4,
        seed: rng.next_u64(),
        ..SynthSpec::default()
    })
    .expect("valid spec");
    let ep = sample_episode(&data, 0, 2, rng).expect("enough images");
    let mut model = Model::conv(4, rng.next_u64());
    for s in model.ttis.flat_slices_mut() {
        s.iter_mut().for_each(|v| *v += rng.uniform_range(-0.2, 0.2));
    }
    let settings = LossSettings {
        reg_form: RegForm::Absolute,
        ..LossSettings::default()
    };
    let alpha_seed = rng.next_u64();
    let total = |m: &Model| {
        source_loss(&ep, m, &settings, &mut Rng::new(alpha_seed))
            .expect("finite loss")
            .0
            .total
    };
    let (_, grads) = source_loss(&ep, &model, &settings, &mut Rng::new(alpha_seed)).expect("finite loss");
    let names = model.param_names();
    let slices = grads.slices();
    for (t, name) in names.iter().enumerate() {
        let stride = if slices[t].len() > 200 { 17 } else { 1 };
        ck.check("losses", &format!("total.{name}"), slices[t], stride, COMPOSED_TOL, 1e-6, |i, d| {
            let mut p = model.clone();
            p.param_slices_mut()[t][i] += d;
            total(&p)
        });
    }
}

/// Runs the ttis, backbone and loss suites.
pub fn run_all(opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::new(opts.seed);
    let mut ck = Checker {
        opts,
        results: Vec::new(),
    };
    ttis_suite(&mut ck, &mut rng);
    backbone_suite(&mut ck, &mut rng);
    loss_suite(&mut ck, &mut rng);
    Ok(ck.results)
}
