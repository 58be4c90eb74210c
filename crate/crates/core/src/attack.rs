//! The l-infinity PGD attack loop with APGD step control.
//!
//! Each run draws one random start in the phase-0 ball, then alternates
//! objective evaluation and a momentum sign step. Radius phases shrink the
//! ball over time; the returned example is the best objective value among
//! iterates that are feasible at the target radius (the clean image counts).

use std::fmt;

use rayon::prelude::*;

use crate::data::Sample;
use crate::error::{ensure, Error, Result};
use crate::objectives::{loss_and_logit_grad, IterCtx, LossKind, MaskNorm};
use crate::schedules::{apgd_checkpoints, ApgdState, EpsPhases, QSchedule};
use crate::segmodel::ModelParams;
use crate::tensor::{LabelMap, Rng, Tensor};

/// Momentum weight on the fresh sign step.
pub const MOMENTUM: f64 = 0.75;
/// Initial APGD step as a multiple of the radius in force.
pub const INITIAL_STEP: f64 = 2.0;
/// Slack on the feasibility check.
pub const FEASIBILITY_TOL: f64 = 1e-6;

/// Attack objective, with Tsallis carrying its `q` schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttackLoss {
    Ce,
    Tsallis(QSchedule),
    SegPgd,
    CosPgd,
    Js,
    MaskedCe(MaskNorm),
}

impl AttackLoss {
    pub fn kind_at(&self, t: usize, total: usize) -> Result<LossKind> {
        Ok(match *self {
            AttackLoss::Ce => LossKind::Ce,
            AttackLoss::Tsallis(s) => {
                let q = s.q_at(t, total)?;
                if q >= 1.0 {
                    LossKind::Ce
                } else {
                    LossKind::Tsallis(q)
                }
            }
            AttackLoss::SegPgd => LossKind::SegPgd,
            AttackLoss::CosPgd => LossKind::CosPgd,
            AttackLoss::Js => LossKind::Js,
            AttackLoss::MaskedCe(n) => LossKind::MaskedCe(n),
        })
    }

    /// Builds from the CLI pair `--loss` / `--q-schedule`.
    pub fn from_parts(loss: &str, schedule: Option<&str>) -> Result<Self> {
        let lower = loss.trim().to_ascii_lowercase();
        let out = match lower.as_str() {
            "tsallis" => {
                let s = schedule.ok_or_else(|| {
                    Error::Parse("tsallis needs a q schedule (fixed:Q or linear:A:B)".into())
                })?;
                AttackLoss::Tsallis(s.parse()?)
            }
            other => {
                ensure!(
                    schedule.is_none(),
                    Parse,
                    "a q schedule only applies to the tsallis loss, not {other:?}"
                );
                match other.parse::<LossKind>()? {
                    LossKind::Ce => AttackLoss::Ce,
                    LossKind::SegPgd => AttackLoss::SegPgd,
                    LossKind::CosPgd => AttackLoss::CosPgd,
                    LossKind::Js => AttackLoss::Js,
                    LossKind::MaskedCe(n) => AttackLoss::MaskedCe(n),
                    LossKind::Tsallis(q) => AttackLoss::Tsallis(QSchedule::Fixed(q)),
                }
            }
        };
        if let AttackLoss::Tsallis(s) = out {
            s.validate()?;
        }
        Ok(out)
    }
}

impl fmt::Display for AttackLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttackLoss::Ce => f.write_str("ce"),
            AttackLoss::Tsallis(s) => write!(f, "tsallis[{s}]"),
            AttackLoss::SegPgd => f.write_str("segpgd"),
            AttackLoss::CosPgd => f.write_str("cospgd"),
            AttackLoss::Js => f.write_str("js"),
            AttackLoss::MaskedCe(MaskNorm::Masked) => f.write_str("maskedce"),
            AttackLoss::MaskedCe(MaskNorm::Total) => f.write_str("maskedce:total"),
        }
    }
}

impl std::str::FromStr for AttackLoss {
    type Err = Error;

    /// `ce`, `segpgd`, ..., or `tsallis[<schedule>]` as printed by `Display`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s.strip_prefix("tsallis[").and_then(|r| r.strip_suffix(']')) {
            Some(sched) => AttackLoss::from_parts("tsallis", Some(sched)),
            None => AttackLoss::from_parts(s, None),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub loss: AttackLoss,
    /// Target l-infinity radius in `(0, 1]`.
    pub eps: f64,
    pub iters: usize,
    pub phases: EpsPhases,
    pub seed: u64,
    pub restarts: usize,
}

impl AttackConfig {
    pub fn new(loss: AttackLoss, eps: f64, iters: usize) -> Self {
        Self {
            loss,
            eps,
            iters,
            phases: EpsPhases::default(),
            seed: 0,
            restarts: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.eps > 0.0 && self.eps <= 1.0,
            InvalidArgument,
            "eps must be in (0, 1], got {}",
            self.eps
        );
        ensure!(self.iters >= 1, InvalidArgument, "attack needs T >= 1");
        if let AttackLoss::Tsallis(s) = self.loss {
            s.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub adversarial: Tensor,
    /// Objective at `adversarial`, under the `q` of the iteration it was found.
    pub best_loss: f64,
    /// Objective at every evaluated iterate.
    pub loss_trace: Vec<f64>,
    /// Running best over target-feasible iterates.
    pub best_trace: Vec<f64>,
    pub iterations_used: usize,
    pub feasible: bool,
    /// Set when a non-finite objective stopped the run early.
    pub aborted: Option<String>,
}

/// Clamp to `[origin - eps, origin + eps]` intersected with `[0, 1]`.
pub fn project(x: &Tensor, origin: &Tensor, eps: f64) -> Result<Tensor> {
    ensure!(
        x.dims() == origin.dims(),
        Shape,
        "projection dims {:?} vs origin {:?}",
        x.dims(),
        origin.dims()
    );
    let mut v = x.to_f64();
    project_in_place(&mut v, &origin.to_f64(), eps);
    Tensor::from_f64(x.dims().to_vec(), &v)
}

/// `project(x + step * sign(grad))`, with `sign(0) = 0`.
pub fn pgd_step(x: &Tensor, grad: &Tensor, step: f64, origin: &Tensor, eps: f64) -> Result<Tensor> {
    ensure!(step > 0.0, InvalidArgument, "step must be positive, got {step}");
    ensure!(
        grad.dims() == x.dims(),
        Shape,
        "gradient dims {:?} vs iterate {:?}",
        grad.dims(),
        x.dims()
    );
    let mut v = x.to_f64();
    sign_step(&mut v, &grad.to_f64(), step)?;
    project_in_place(&mut v, &origin.to_f64(), eps);
    Tensor::from_f64(x.dims().to_vec(), &v)
}

pub(crate) fn project_in_place(x: &mut [f64], origin: &[f64], eps: f64) {
    for (v, &o) in x.iter_mut().zip(origin) {
        *v = v.clamp(o - eps, o + eps).clamp(0.0, 1.0);
    }
}

pub(crate) fn sign_step(x: &mut [f64], grad: &[f64], step: f64) -> Result<()> {
    for (v, &g) in x.iter_mut().zip(grad) {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("input gradient entry is {g}")));
        }
        if g > 0.0 {
            *v += step;
        } else if g < 0.0 {
            *v -= step;
        }
    }
    Ok(())
}

/// Rounds to `f32` storage so the returned example reproduces its loss.
fn round_storage(x: &mut [f64]) {
    for v in x.iter_mut() {
        *v = *v as f32 as f64;
    }
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Checks the threat-model constraint on a finished example.
pub fn is_feasible(adversarial: &Tensor, origin: &Tensor, eps: f64) -> bool {
    adversarial.dims() == origin.dims()
        && adversarial.data().iter().all(|&v| (0.0..=1.0).contains(&v))
        && adversarial
            .data()
            .iter()
            .zip(origin.data())
            .all(|(&a, &o)| ((a as f64) - (o as f64)).abs() <= eps + FEASIBILITY_TOL)
}

/// Objective and input gradient at one iterate.
fn objective(
    model: &ModelParams,
    x: &[f64],
    height: usize,
    width: usize,
    labels: &LabelMap,
    kind: LossKind,
    ctx: IterCtx,
) -> Result<(f64, Vec<f64>)> {
    let trace = model.trace_f64(x, height, width)?;
    let report = loss_and_logit_grad(kind, trace.logits(), model.classes(), labels, Some(ctx))?;
    let grad = model.backward_input(&trace, &report.logit_grad)?;
    Ok((report.scalar_loss, grad))
}

struct Best {
    x: Vec<f64>,
    loss: f64,
}

/// Attacks one image. `image_index` selects the per-image random stream.
pub fn run_attack(
    model: &ModelParams,
    image: &Tensor,
    labels: &LabelMap,
    config: &AttackConfig,
    image_index: u64,
) -> Result<AttackResult> {
    config.validate()?;
    let (c, h, w) = image.chw()?;
    ensure!(
        c == model.in_channels(),
        Shape,
        "image has {c} channels, model expects {}",
        model.in_channels()
    );
    ensure!(
        labels.height() == h && labels.width() == w,
        Shape,
        "labels are {}x{}, image {h}x{w}",
        labels.height(),
        labels.width()
    );
    ensure!(
        image.data().iter().all(|v| (0.0..=1.0).contains(v)),
        InvalidArgument,
        "clean image must lie in [0, 1]"
    );
    labels.check_classes(model.classes())?;

    let total = config.iters;
    let eps = config.eps;
    let origin = image.to_f64();
    let mut rng = Rng::for_item(config.seed, image_index);

    let (clean_loss, _) = objective(
        model,
        &origin,
        h,
        w,
        labels,
        config.loss.kind_at(0, total)?,
        IterCtx { t: 0, total },
    )?;
    let mut best = Best {
        x: origin.clone(),
        loss: clean_loss,
    };
    let mut loss_trace = Vec::with_capacity(total * config.restarts.max(1));
    let mut best_trace = Vec::with_capacity(total * config.restarts.max(1));
    let mut aborted = None;

    'restarts: for _ in 0..config.restarts.max(1) {
        let mut phase = config.phases.phase_index(0, total)?;
        let mut radius = config.phases.eps_at(0, total, eps)?;
        let mut x: Vec<f64> = origin
            .iter()
            .map(|&o| o + rng.uniform(-radius, radius))
            .collect();
        project_in_place(&mut x, &origin, radius);
        round_storage(&mut x);
        let mut x_prev = x.clone();

        let checkpoints = apgd_checkpoints(total).unwrap_or_else(|_| vec![0]);
        let mut ctrl = ApgdState::new(INITIAL_STEP, checkpoints)?;
        let mut history: Vec<f64> = Vec::with_capacity(total);
        let mut run_best: Option<(Vec<f64>, f64, Vec<f64>)> = None;

        for t in 0..total {
            let p = config.phases.phase_index(t, total)?;
            if p != phase {
                phase = p;
                radius = config.phases.eps_at(t, total, eps)?;
                project_in_place(&mut x, &origin, radius);
                project_in_place(&mut x_prev, &origin, radius);
                round_storage(&mut x);
                run_best = None;
                ctrl.reset_best();
            }

            let kind = config.loss.kind_at(t, total)?;
            let (loss, grad) = match objective(model, &x, h, w, labels, kind, IterCtx { t, total }) {
                Ok(v) if v.0.is_finite() => v,
                Ok((l, _)) => {
                    aborted = Some(format!("objective is {l} at iteration {t}"));
                    break 'restarts;
                }
                Err(Error::NonFinite(msg)) => {
                    aborted = Some(format!("{msg} at iteration {t}"));
                    break 'restarts;
                }
                Err(e) => return Err(e),
            };
            history.push(loss);
            loss_trace.push(loss);

            if loss >= best.loss && linf(&x, &origin) <= eps + FEASIBILITY_TOL {
                best = Best { x: x.clone(), loss };
            }
            best_trace.push(best.loss);
            if run_best.as_ref().is_none_or(|b| loss > b.1) {
                run_best = Some((x.clone(), loss, grad.clone()));
            }

            let mut grad = grad;
            if ctrl.is_checkpoint(t) {
                let best_now = run_best.as_ref().map_or(loss, |b| b.1);
                let decision = ctrl.update_step(t, &history, best_now)?;
                if decision.restart_from_best {
                    if let Some((bx, _, bg)) = &run_best {
                        x.clone_from(bx);
                        grad.clone_from(bg);
                    }
                }
            }
            if t + 1 == total {
                break;
            }

            let next_radius = config.phases.eps_at(t + 1, total, eps)?.min(radius);
            let step = ctrl.current_step() * radius;
            let mut z = x.clone();
            if let Err(e) = sign_step(&mut z, &grad, step) {
                aborted = Some(format!("{e} at iteration {t}"));
                break 'restarts;
            }
            project_in_place(&mut z, &origin, radius);
            let a = if t == 0 { 1.0 } else { MOMENTUM };
            let mut next: Vec<f64> = x
                .iter()
                .zip(&z)
                .zip(&x_prev)
                .map(|((&xi, &zi), &pi)| xi + a * (zi - xi) + (1.0 - a) * (xi - pi))
                .collect();
            project_in_place(&mut next, &origin, next_radius);
            round_storage(&mut next);
            x_prev = std::mem::replace(&mut x, next);
        }
    }

    let iterations_used = loss_trace.len();
    let adversarial = Tensor::from_f64(image.dims().to_vec(), &best.x)?;
    let feasible = is_feasible(&adversarial, image, eps);
    Ok(AttackResult {
        adversarial,
        best_loss: best.loss,
        loss_trace,
        best_trace,
        iterations_used,
        feasible,
        aborted,
    })
}

/// Attacks every sample; per-image failures stay per-image.
///
/// Image `i` uses the random stream `(config.seed, i)`, so results do not
/// depend on worker count or scheduling.
pub fn attack_batch(model: &ModelParams, samples: &[Sample], config: &AttackConfig) -> Vec<Result<AttackResult>> {
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| run_attack(model, &s.image, &s.labels, config, i as u64))
        .collect()
}

/// [`attack_batch`] on a dedicated pool of `workers` threads.
pub fn attack_batch_with_workers(
    model: &ModelParams,
    samples: &[Sample],
    config: &AttackConfig,
    workers: usize,
) -> Result<Vec<Result<AttackResult>>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(|| attack_batch(model, samples, config)))
}
