//! Iteration-indexed schedules: the Tsallis `q` schedule, the APGD step-size
//! controller and the multi-radius phases.

use std::fmt;
use std::str::FromStr;

use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QSchedule {
    Fixed(f64),
    /// Linear interpolation hitting both endpoints exactly.
    Linear { start: f64, end: f64 },
}

impl QSchedule {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = match *self {
            QSchedule::Fixed(q) => (q, q),
            QSchedule::Linear { start, end } => (start, end),
        };
        ensure!(
            a.is_finite() && b.is_finite() && a <= 1.0 && b <= 1.0,
            InvalidArgument,
            "q schedule values must be finite and <= 1, got {self}"
        );
        Ok(())
    }

    /// `q` used at iteration `t` of `total`, clamped to at most 1.
    pub fn q_at(&self, t: usize, total: usize) -> Result<f64> {
        ensure!(total >= 1, InvalidArgument, "q schedule needs T >= 1");
        ensure!(t < total, InvalidArgument, "iteration {t} outside 0..{total}");
        let q = match *self {
            QSchedule::Fixed(q) => q,
            QSchedule::Linear { start, .. } if total == 1 => start,
            QSchedule::Linear { start, end } => {
                if t == total - 1 {
                    end
                } else {
                    start + (end - start) * t as f64 / (total - 1) as f64
                }
            }
        };
        Ok(q.min(1.0))
    }
}

impl fmt::Display for QSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QSchedule::Fixed(q) => write!(f, "fixed:{q}"),
            QSchedule::Linear { start, end } => write!(f, "linear:{start}:{end}"),
        }
    }
}

fn parse_q(s: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("bad q value {s:?}")))?;
    ensure!(v.is_finite(), Parse, "q value {s:?} is not finite");
    Ok(v)
}

impl FromStr for QSchedule {
    type Err = Error;

    /// `fixed:<q>` or `linear:<q_start>:<q_end>`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let sched = match parts.as_slice() {
            ["fixed", q] => QSchedule::Fixed(parse_q(q)?),
            ["linear", a, b] => QSchedule::Linear {
                start: parse_q(a)?,
                end: parse_q(b)?,
            },
            _ => {
                return Err(Error::Parse(format!(
                    "q schedule {s:?} is not fixed:<q> or linear:<start>:<end>"
                )))
            }
        };
        sched.validate().map_err(|e| Error::Parse(e.to_string()))?;
        Ok(sched)
    }
}

/// Checkpoint iterations `ceil(p_j T)` with `p_0 = 0`, `p_1 = 0.22` and
/// `p_{j+1} = p_j + max(p_j - p_{j-1} - 0.03, 0.06)`, kept while `<= T`, with
/// repeated indices collapsed.
pub fn apgd_checkpoints(total: usize) -> Result<Vec<usize>> {
    ensure!(total >= 10, InvalidArgument, "APGD checkpoints need T >= 10, got {total}");
    // Fractions are exact multiples of 1/100, so work in hundredths.
    let mut out = vec![0];
    let (mut prev, mut cur) = (0usize, 22usize);
    while cur <= 100 {
        let idx = (cur * total).div_ceil(100);
        if idx > total {
            break;
        }
        // Small T can map two fractions onto the same iteration.
        if out.last() != Some(&idx) {
            out.push(idx);
        }
        let gap = (cur - prev).saturating_sub(3).max(6);
        prev = cur;
        cur += gap;
    }
    Ok(out)
}

/// Outcome of a checkpoint evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDecision {
    pub step: f64,
    pub restart_from_best: bool,
}

/// APGD step-size controller state for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ApgdState {
    current_step: f64,
    checkpoints: Vec<usize>,
    next_checkpoint: usize,
    ascent_successes_since_checkpoint: usize,
    best_loss_at_last_checkpoint: f64,
    step_halved_last_checkpoint: bool,
}

/// Fraction of improving steps an interval needs to keep its step size.
pub const APGD_RHO: f64 = 0.75;

impl ApgdState {
    pub fn new(initial_step: f64, checkpoints: Vec<usize>) -> Result<Self> {
        ensure!(
            initial_step.is_finite() && initial_step > 0.0,
            InvalidArgument,
            "initial step must be positive, got {initial_step}"
        );
        ensure!(
            checkpoints.first() == Some(&0) && checkpoints.windows(2).all(|w| w[0] < w[1]),
            InvalidArgument,
            "checkpoints must start at 0 and increase strictly: {checkpoints:?}"
        );
        Ok(Self {
            current_step: initial_step,
            checkpoints,
            next_checkpoint: 1,
            ascent_successes_since_checkpoint: 0,
            best_loss_at_last_checkpoint: f64::NEG_INFINITY,
            // The first checkpoint can only halve through the oscillation test.
            step_halved_last_checkpoint: true,
        })
    }

    pub fn current_step(&self) -> f64 {
        self.current_step
    }

    pub fn checkpoints(&self) -> &[usize] {
        &self.checkpoints
    }

    pub fn is_checkpoint(&self, t: usize) -> bool {
        self.checkpoints.get(self.next_checkpoint) == Some(&t)
    }

    pub fn ascent_successes(&self) -> usize {
        self.ascent_successes_since_checkpoint
    }

    /// Forgets the stall reference, e.g. after the radius shrinks.
    pub fn reset_best(&mut self) {
        self.best_loss_at_last_checkpoint = f64::NEG_INFINITY;
    }

    /// Evaluates the halving conditions at checkpoint `t`.
    ///
    /// `loss_history[i]` is the objective at iterate `i` and must cover
    /// `0..=t`; `best_loss` is the best objective so far.
    pub fn update_step(&mut self, t: usize, loss_history: &[f64], best_loss: f64) -> Result<StepDecision> {
        ensure!(
            self.is_checkpoint(t),
            InvalidArgument,
            "iteration {t} is not the next checkpoint"
        );
        ensure!(
            loss_history.len() > t,
            InvalidArgument,
            "loss history has {} entries, need {}",
            loss_history.len(),
            t + 1
        );
        let last = self.checkpoints[self.next_checkpoint - 1];
        let successes = (last..t).filter(|&i| loss_history[i + 1] > loss_history[i]).count();
        self.ascent_successes_since_checkpoint = successes;

        let oscillating = (successes as f64) < APGD_RHO * (t - last) as f64;
        let stalled = !self.step_halved_last_checkpoint && best_loss <= self.best_loss_at_last_checkpoint;
        let halve = oscillating || stalled;
        if halve {
            self.current_step /= 2.0;
        }
        self.step_halved_last_checkpoint = halve;
        self.best_loss_at_last_checkpoint = best_loss;
        self.next_checkpoint += 1;
        Ok(StepDecision {
            step: self.current_step,
            restart_from_best: halve,
        })
    }
}

/// Radius phases: `(multiplier, fraction of iterations)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsPhases {
    phases: Vec<(f64, f64)>,
}

impl EpsPhases {
    pub fn new(phases: Vec<(f64, f64)>) -> Result<Self> {
        ensure!(!phases.is_empty(), InvalidArgument, "at least one radius phase is required");
        for &(m, f) in &phases {
            ensure!(
                m.is_finite() && m > 0.0 && f.is_finite() && f > 0.0,
                InvalidArgument,
                "phase {m}@{f} needs a positive multiplier and fraction"
            );
        }
        ensure!(
            phases.windows(2).all(|w| w[0].0 >= w[1].0),
            InvalidArgument,
            "phase multipliers must be non-increasing"
        );
        ensure!(
            phases.last().map(|p| p.0) == Some(1.0),
            InvalidArgument,
            "final phase multiplier must be 1"
        );
        let total: f64 = phases.iter().map(|p| p.1).sum();
        ensure!(
            (total - 1.0).abs() < 1e-9,
            InvalidArgument,
            "phase fractions sum to {total}, not 1"
        );
        Ok(Self { phases })
    }

    /// Multi-radius disabled.
    pub fn single() -> Self {
        Self {
            phases: vec![(1.0, 1.0)],
        }
    }

    pub fn phases(&self) -> &[(f64, f64)] {
        &self.phases
    }

    /// Exclusive end iteration of every phase. The final phase always owns
    /// `T - 1`.
    pub fn boundaries(&self, total: usize) -> Vec<usize> {
        let n = self.phases.len();
        let mut cum = 0.0;
        let mut out = Vec::with_capacity(n);
        for (j, &(_, f)) in self.phases.iter().enumerate() {
            cum += f;
            if j + 1 == n {
                out.push(total);
            } else {
                out.push(((cum * total as f64).round() as usize).min(total.saturating_sub(1)));
            }
        }
        out
    }

    pub fn phase_index(&self, t: usize, total: usize) -> Result<usize> {
        ensure!(t < total, InvalidArgument, "iteration {t} outside 0..{total}");
        let b = self.boundaries(total);
        Ok(b.iter().position(|&end| t < end).unwrap_or(b.len() - 1))
    }

    pub fn multiplier_at(&self, t: usize, total: usize) -> Result<f64> {
        Ok(self.phases[self.phase_index(t, total)?].0)
    }

    /// Radius in force at iteration `t`.
    pub fn eps_at(&self, t: usize, total: usize, target_eps: f64) -> Result<f64> {
        Ok(self.multiplier_at(t, total)? * target_eps)
    }
}

impl Default for EpsPhases {
    /// `2x` for 30%, `1.5x` for 30%, then the target radius for 40%.
    fn default() -> Self {
        Self {
            phases: vec![(2.0, 0.3), (1.5, 0.3), (1.0, 0.4)],
        }
    }
}

impl fmt::Display for EpsPhases {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.phases.iter().map(|(m, fr)| format!("{m}@{fr}")).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for EpsPhases {
    type Err = Error;

    /// `m1@f1,m2@f2,...`
    fn from_str(s: &str) -> Result<Self> {
        let phases = s
            .split(',')
            .map(|part| {
                let (m, f) = part
                    .trim()
                    .split_once('@')
                    .ok_or_else(|| Error::Parse(format!("phase {part:?} is not m@f")))?;
                let m: f64 = m.trim().parse().map_err(|_| Error::Parse(format!("bad multiplier {m:?}")))?;
                let f: f64 = f.trim().parse().map_err(|_| Error::Parse(format!("bad fraction {f:?}")))?;
                Ok((m, f))
            })
            .collect::<Result<Vec<_>>>()?;
        EpsPhases::new(phases).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Parses a radius such as `8/255`, `0.25/255` or `0.03`.
pub fn parse_eps(s: &str) -> Result<f64> {
    let s = s.trim();
    let num = |t: &str| -> Result<f64> {
        let v: f64 = t.trim().parse().map_err(|_| Error::Parse(format!("bad number {t:?} in radius {s:?}")))?;
        ensure!(v.is_finite(), Parse, "radius {s:?} is not finite");
        Ok(v)
    };
    let eps = match s.split_once('/') {
        Some((a, b)) => {
            let d = num(b)?;
            ensure!(d != 0.0, Parse, "radius {s:?} divides by zero");
            num(a)? / d
        }
        None => num(s)?,
    };
    ensure!(eps > 0.0 && eps <= 1.0, Parse, "radius {s:?} = {eps} outside (0, 1]");
    Ok(eps)
}
