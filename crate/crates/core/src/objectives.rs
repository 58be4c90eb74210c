//! Per-pixel attack objectives and their logit gradients.
//!
//! Every objective is a mean of per-pixel terms over non-ignored pixels.
//! The reweighting baselines (SegPGD, CosPGD, masked CE) scale the CE term by
//! a per-pixel weight that is held constant during differentiation. Tsallis
//! and JS are differentiated exactly.

use std::fmt;
use std::str::FromStr;

use crate::error::{ensure, Error, Result};
use crate::tensor::{softmax_into, LabelMap, Tensor, IGNORE_INDEX};

/// Floor applied to the true-class probability before any power or log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Normaliser of the masked cross-entropy mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskNorm {
    /// Divide by the number of still-correct pixels.
    #[default]
    Masked,
    /// Divide by the number of non-ignored pixels.
    Total,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    Ce,
    /// Tsallis cross-entropy with entropic index `q`; `q == 1` is CE.
    Tsallis(f64),
    SegPgd,
    CosPgd,
    Js,
    MaskedCe(MaskNorm),
}

impl LossKind {
    pub fn needs_context(&self) -> bool {
        matches!(self, LossKind::SegPgd)
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Tsallis(_) => "tsallis",
            LossKind::SegPgd => "segpgd",
            LossKind::CosPgd => "cospgd",
            LossKind::Js => "js",
            LossKind::MaskedCe(_) => "maskedce",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::Tsallis(q) => write!(f, "tsallis:{q}"),
            LossKind::MaskedCe(MaskNorm::Total) => write!(f, "maskedce:total"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    /// `ce`, `segpgd`, `cospgd`, `js`, `maskedce[:masked|:total]`, `tsallis:<q>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        let kind = match (head.to_ascii_lowercase().as_str(), arg) {
            ("ce", None) => LossKind::Ce,
            ("segpgd", None) => LossKind::SegPgd,
            ("cospgd", None) => LossKind::CosPgd,
            ("js", None) => LossKind::Js,
            ("maskedce", None) | ("maskedce", Some("masked")) => LossKind::MaskedCe(MaskNorm::Masked),
            ("maskedce", Some("total")) => LossKind::MaskedCe(MaskNorm::Total),
            ("tsallis", Some(q)) => {
                let q: f64 = q
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad Tsallis q {q:?}")))?;
                ensure!(q.is_finite(), Parse, "Tsallis q must be finite");
                LossKind::Tsallis(q)
            }
            _ => return Err(Error::Parse(format!("unknown loss kind {s:?}"))),
        };
        Ok(kind)
    }
}

/// Iteration index for schedule-dependent objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IterCtx {
    pub t: usize,
    pub total: usize,
}

/// Objective value and gradient over a whole logit field.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelLossReport {
    /// Mean loss over the normalising pixel set.
    pub scalar_loss: f64,
    /// Gradient of `scalar_loss` w.r.t. the `[K, H, W]` logits.
    pub logit_grad: Vec<f64>,
    /// Weighted per-pixel loss before averaging; zero on ignored pixels.
    pub per_pixel_loss: Vec<f64>,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
}

impl PixelLossReport {
    pub fn logit_grad_tensor(&self) -> Result<Tensor> {
        Tensor::from_f64(vec![self.classes, self.height, self.width], &self.logit_grad)
    }
}

/// `(1 - p^(1-q)) / (1 - q)`, with `p` floored at [`PROB_FLOOR`].
pub fn tsallis_loss(p_y: f64, q: f64) -> Result<f64> {
    ensure!(q != 1.0, InvalidArgument, "q = 1 is cross-entropy; use the CE path");
    ensure!(
        p_y > 0.0 && p_y <= 1.0,
        InvalidArgument,
        "true-class probability {p_y} outside (0, 1]"
    );
    Ok(tsallis_term(p_y, q))
}

fn tsallis_term(p_y: f64, q: f64) -> f64 {
    let p = p_y.max(PROB_FLOOR);
    (1.0 - p.powf(1.0 - q)) / (1.0 - q)
}

fn ce_term(p_y: f64) -> f64 {
    -p_y.max(PROB_FLOOR).ln()
}

/// Jensen-Shannon divergence between `p` and the one-hot `e_y`. It depends on
/// `p_y` only: `(2 ln 2 + p ln p - (1 + p) ln(1 + p)) / 2`.
fn js_term(p_y: f64) -> f64 {
    let p = p_y.max(PROB_FLOOR);
    0.5 * (2.0 * std::f64::consts::LN_2 + p * p.ln() - (1.0 + p) * (1.0 + p).ln())
}

/// Scale of `(p - e_y)` in the JS logit gradient: `p ln(1 + 1/p) / 2`.
fn js_grad_scale(p_y: f64) -> f64 {
    let p = p_y.max(PROB_FLOOR);
    0.5 * p * (1.0 + 1.0 / p).ln()
}

/// Location `(1 - q) / (2 - q)` of the maximum of `p^(2(1-q)) (1-p)^2`.
pub fn grad_peak(q: f64) -> Result<f64> {
    ensure!(q.is_finite() && q < 1.0, InvalidArgument, "gradient peak needs q < 1, got {q}");
    Ok((1.0 - q) / (2.0 - q))
}

/// Lower and upper bounds on the squared logit-gradient norm of the Tsallis
/// loss at one pixel. `q = 1` gives the CE bounds.
pub fn tsallis_grad_bounds(p_y: f64, q: f64, classes: usize) -> Result<(f64, f64)> {
    ensure!(
        p_y > 0.0 && p_y <= 1.0,
        InvalidArgument,
        "true-class probability {p_y} outside (0, 1]"
    );
    ensure!(classes >= 2, InvalidArgument, "need K >= 2, got {classes}");
    let k = classes as f64;
    let w = p_y.powf(2.0 * (1.0 - q));
    let r = 1.0 - p_y;
    Ok((k / (k - 1.0) * w * r * r, w * (r + r * r)))
}

/// Per-pixel weight on the CE gradient, or `None` for exactly differentiated
/// kinds.
fn ce_weight(kind: LossKind, p: &[f64], y: usize, ctx: Option<IterCtx>) -> Option<f64> {
    let correct = || {
        let mut best = 0;
        for k in 1..p.len() {
            if p[k] > p[best] {
                best = k;
            }
        }
        best == y
    };
    match kind {
        LossKind::SegPgd => {
            let c = ctx.expect("checked by caller");
            let lambda = c.t as f64 / (2.0 * c.total as f64);
            Some(if correct() { 1.0 - lambda } else { lambda })
        }
        LossKind::CosPgd => {
            let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            Some(p[y] / norm)
        }
        LossKind::MaskedCe(_) => Some(if correct() { 1.0 } else { 0.0 }),
        _ => None,
    }
}

/// Evaluates `kind` on `[K, H, W]` logits against `labels`.
pub fn loss_and_logit_grad(
    kind: LossKind,
    logits: &[f64],
    classes: usize,
    labels: &LabelMap,
    ctx: Option<IterCtx>,
) -> Result<PixelLossReport> {
    ensure!(classes >= 2, InvalidArgument, "need K >= 2, got {classes}");
    let n = labels.pixels();
    ensure!(
        logits.len() == classes * n,
        Shape,
        "logits hold {} values, labels imply {classes}x{n}",
        logits.len()
    );
    labels.check_classes(classes)?;
    if kind.needs_context() {
        let c = ctx.ok_or_else(|| {
            Error::InvalidArgument(format!("{} needs the iteration context", kind.name()))
        })?;
        ensure!(c.total >= 1 && c.t < c.total, InvalidArgument, "bad iteration context {c:?}");
    }
    if let LossKind::Tsallis(q) = kind {
        ensure!(q.is_finite(), InvalidArgument, "Tsallis q must be finite");
    }

    let mut grad = vec![0.0; classes * n];
    let mut per_pixel = vec![0.0; n];
    let mut u = vec![0.0; classes];
    let mut p = vec![0.0; classes];
    let mut valid = 0usize;
    let mut masked = 0usize;

    for (i, &label) in labels.data().iter().enumerate() {
        if label == IGNORE_INDEX {
            continue;
        }
        valid += 1;
        let y = label as usize;
        for k in 0..classes {
            u[k] = logits[k * n + i];
        }
        if let Some(j) = u.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("logit {j} at pixel {i} is {}", u[j])));
        }
        softmax_into(&u, &mut p);
        let p_y = p[y];

        // loss term and the scale s such that the gradient is s * (p - e_y)
        let (loss, scale) = match kind {
            LossKind::Ce => (ce_term(p_y), 1.0),
            LossKind::Tsallis(q) if q == 1.0 => (ce_term(p_y), 1.0),
            LossKind::Tsallis(q) => (tsallis_term(p_y, q), p_y.max(PROB_FLOOR).powf(1.0 - q)),
            LossKind::Js => (js_term(p_y), js_grad_scale(p_y)),
            LossKind::SegPgd | LossKind::CosPgd | LossKind::MaskedCe(_) => {
                let w = ce_weight(kind, &p, y, ctx).expect("weighted kind");
                if w > 0.0 && matches!(kind, LossKind::MaskedCe(_)) {
                    masked += 1;
                }
                (w * ce_term(p_y), w)
            }
        };
        per_pixel[i] = loss;
        if scale != 0.0 {
            for k in 0..classes {
                let e = if k == y { 1.0 } else { 0.0 };
                grad[k * n + i] = scale * (p[k] - e);
            }
        }
    }

    let denom = match kind {
        LossKind::MaskedCe(MaskNorm::Masked) => masked,
        _ => valid,
    };
    let scalar_loss = if denom == 0 {
        grad.fill(0.0);
        0.0
    } else {
        let inv = 1.0 / denom as f64;
        for g in grad.iter_mut() {
            *g *= inv;
        }
        per_pixel.iter().sum::<f64>() * inv
    };
    ensure!(scalar_loss.is_finite(), NonFinite, "objective evaluated to {scalar_loss}");

    Ok(PixelLossReport {
        scalar_loss,
        logit_grad: grad,
        per_pixel_loss: per_pixel,
        classes,
        height: labels.height(),
        width: labels.width(),
    })
}

/// [`loss_and_logit_grad`] on an `f32` `[K, H, W]` field.
pub fn evaluate(kind: LossKind, logits: &Tensor, labels: &LabelMap, ctx: Option<IterCtx>) -> Result<PixelLossReport> {
    let (k, h, w) = logits.chw()?;
    ensure!(
        h == labels.height() && w == labels.width(),
        Shape,
        "logits are {h}x{w}, labels {}x{}",
        labels.height(),
        labels.width()
    );
    loss_and_logit_grad(kind, &logits.to_f64(), k, labels, ctx)
}

/// Confidence-weighting proxy for `kind` at true-class probability `p`,
/// unnormalised.
///
/// Tsallis and CE use the lower-bound proxy `p^(2(1-q)) (1-p)^2`. JS, CosPGD
/// and masked CE use their squared logit-gradient norm on a binary pixel,
/// up to the constant 2.
fn weight_proxy(kind: LossKind, p: f64) -> Result<f64> {
    let r2 = (1.0 - p) * (1.0 - p);
    Ok(match kind {
        LossKind::Ce => r2,
        LossKind::Tsallis(q) if q == 1.0 => r2,
        LossKind::Tsallis(q) => p.powf(2.0 * (1.0 - q)) * r2,
        LossKind::Js => js_grad_scale(p).powi(2) * r2,
        LossKind::CosPgd => {
            let w = p / (p * p + (1.0 - p) * (1.0 - p)).sqrt();
            w * w * r2
        }
        LossKind::MaskedCe(_) => {
            if p > 0.5 {
                r2
            } else {
                0.0
            }
        }
        LossKind::SegPgd => {
            return Err(Error::InvalidArgument(
                "segpgd weighting depends on the iteration; no confidence curve".into(),
            ))
        }
    })
}

/// Unit-maximum weighting curve of `kind` over `grid`.
pub fn weighting_curve(kind: LossKind, grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    ensure!(!grid.is_empty(), InvalidArgument, "empty probability grid");
    if let Some(p) = grid.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::InvalidArgument(format!("grid value {p} outside (0, 1)")));
    }
    let raw: Vec<f64> = grid.iter().map(|&p| weight_proxy(kind, p)).collect::<Result<_>>()?;
    let max = raw.iter().copied().fold(0.0, f64::max);
    Ok(grid
        .iter()
        .zip(raw)
        .map(|(&p, w)| (p, if max > 0.0 { w / max } else { 0.0 }))
        .collect())
}

/// Open-interval grid `step, 2 step, ...` strictly below 1.
pub fn probability_grid(step: f64) -> Result<Vec<f64>> {
    ensure!(step > 0.0 && step < 0.5, InvalidArgument, "grid step {step} not in (0, 0.5)");
    let n = (1.0 / step).round() as usize;
    Ok((1..n).map(|i| i as f64 * step).filter(|&p| p < 1.0).collect())
}
