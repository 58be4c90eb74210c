//! Reference implementations used as test oracles. Written from the defining
//! formulas, sharing no code with the library beyond its data types.

#![allow(dead_code)]

pub mod criteria;

use segattack::segmodel::ModelParams;
use segattack::tensor::{LabelMap, Rng, IGNORE_INDEX};

pub fn softmax(u: &[f64]) -> Vec<f64> {
    let m = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = u.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn ce(p: &[f64], y: usize) -> f64 {
    -p[y].ln()
}

pub fn tsallis(p: &[f64], y: usize, q: f64) -> f64 {
    (1.0 - p[y].powf(1.0 - q)) / (1.0 - q)
}

fn kl(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .filter(|(x, _)| **x > 0.0)
        .map(|(x, y)| x * (x / y).ln())
        .sum()
}

/// Jensen-Shannon divergence of `p` and the one-hot of `y`, natural log.
pub fn js(p: &[f64], y: usize) -> f64 {
    let e: Vec<f64> = (0..p.len()).map(|k| if k == y { 1.0 } else { 0.0 }).collect();
    let m: Vec<f64> = p.iter().zip(&e).map(|(a, b)| 0.5 * (a + b)).collect();
    0.5 * kl(p, &m) + 0.5 * kl(&e, &m)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = k;
        }
    }
    best
}

/// Logits of pixel `i` from a `[K, H, W]` field.
pub fn pixel(logits: &[f64], classes: usize, i: usize) -> Vec<f64> {
    let n = logits.len() / classes;
    (0..classes).map(|k| logits[k * n + i]).collect()
}

/// Oracle objective kinds. Weighted kinds carry weights frozen at a base point.
#[derive(Debug, Clone)]
pub enum RefKind {
    Ce,
    Tsallis(f64),
    Js,
    /// Per-pixel weights on CE plus the normaliser.
    Weighted { weights: Vec<f64>, denom: f64 },
}

/// Mean objective over non-ignored pixels.
pub fn objective(kind: &RefKind, logits: &[f64], classes: usize, labels: &LabelMap) -> f64 {
    let mut sum = 0.0;
    let mut valid = 0usize;
    for (i, &l) in labels.data().iter().enumerate() {
        if l == IGNORE_INDEX {
            continue;
        }
        valid += 1;
        let p = softmax(&pixel(logits, classes, i));
        let y = l as usize;
        sum += match kind {
            RefKind::Ce => ce(&p, y),
            RefKind::Tsallis(q) => tsallis(&p, y, *q),
            RefKind::Js => js(&p, y),
            RefKind::Weighted { weights, .. } => weights[i] * ce(&p, y),
        };
    }
    match kind {
        RefKind::Weighted { denom, .. } => {
            if *denom == 0.0 {
                0.0
            } else {
                sum / denom
            }
        }
        _ => sum / valid as f64,
    }
}

/// SegPGD weights at iteration `t` of `total`: `1 - t/(2T)` on correct pixels,
/// `t/(2T)` elsewhere.
pub fn segpgd_weights(logits: &[f64], classes: usize, labels: &LabelMap, t: usize, total: usize) -> RefKind {
    let lambda = t as f64 / (2.0 * total as f64);
    frozen(logits, classes, labels, false, |p, y| if argmax(p) == y { 1.0 - lambda } else { lambda })
}

/// CosPGD weights: cosine similarity of `p` and the one-hot target.
pub fn cospgd_weights(logits: &[f64], classes: usize, labels: &LabelMap) -> RefKind {
    frozen(logits, classes, labels, false, |p, y| {
        p[y] / p.iter().map(|v| v * v).sum::<f64>().sqrt()
    })
}

/// Masked CE: weight 1 on correct pixels, normalised by their count or by all
/// valid pixels.
pub fn masked_weights(logits: &[f64], classes: usize, labels: &LabelMap, by_masked: bool) -> RefKind {
    frozen(logits, classes, labels, by_masked, |p, y| if argmax(p) == y { 1.0 } else { 0.0 })
}

fn frozen(
    logits: &[f64],
    classes: usize,
    labels: &LabelMap,
    by_nonzero: bool,
    w: impl Fn(&[f64], usize) -> f64,
) -> RefKind {
    let mut weights = vec![0.0; labels.pixels()];
    let mut valid = 0.0;
    let mut nonzero = 0.0;
    for (i, &l) in labels.data().iter().enumerate() {
        if l == IGNORE_INDEX {
            continue;
        }
        valid += 1.0;
        let p = softmax(&pixel(logits, classes, i));
        weights[i] = w(&p, l as usize);
        if weights[i] > 0.0 {
            nonzero += 1.0;
        }
    }
    RefKind::Weighted {
        weights,
        denom: if by_nonzero { nonzero } else { valid },
    }
}

/// Central differences of `f` at `x`.
pub fn central_diff(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|j| {
            xp[j] = x[j] + h;
            let up = f(&xp);
            xp[j] = x[j] - h;
            let down = f(&xp);
            xp[j] = x[j];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max |a - b| / max(max |a|, max |b|)`; zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

pub fn random_labels(rng: &mut Rng, h: usize, w: usize, classes: usize, ignore_rate: f64) -> LabelMap {
    let data = (0..h * w)
        .map(|_| {
            if rng.next_f64() < ignore_rate {
                IGNORE_INDEX
            } else {
                rng.int_in(0, classes - 1) as u8
            }
        })
        .collect();
    LabelMap::new(h, w, data).unwrap()
}

pub fn random_logits(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(-scale, scale)).collect()
}

/// f64 copy of one conv layer: `[out, in, k, k]` weights and `[out]` bias.
#[derive(Debug, Clone)]
pub struct RefConv {
    pub out_ch: usize,
    pub in_ch: usize,
    pub k: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn ref_layers(model: &ModelParams) -> Vec<RefConv> {
    model
        .layers()
        .iter()
        .map(|l| {
            let d = l.weight().dims();
            RefConv {
                out_ch: d[0],
                in_ch: d[1],
                k: d[2],
                weight: l.weight().to_f64(),
                bias: l.bias().to_f64(),
            }
        })
        .collect()
}

/// Naive same-padded conv chain with ReLU between layers. Returns the logits
/// and the sign pattern of every hidden pre-activation.
pub fn ref_forward(layers: &[RefConv], image: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<bool>) {
    let mut x = image.to_vec();
    let mut pattern = Vec::new();
    for (li, l) in layers.iter().enumerate() {
        let r = (l.k / 2) as isize;
        let mut out = vec![0.0; l.out_ch * h * w];
        for o in 0..l.out_ch {
            for row in 0..h {
                for col in 0..w {
                    let mut acc = l.bias[o];
                    for c in 0..l.in_ch {
                        for ky in 0..l.k {
                            for kx in 0..l.k {
                                let yy = row as isize + ky as isize - r;
                                let xx = col as isize + kx as isize - r;
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                let wi = ((o * l.in_ch + c) * l.k + ky) * l.k + kx;
                                acc += l.weight[wi] * x[(c * h + yy as usize) * w + xx as usize];
                            }
                        }
                    }
                    out[(o * h + row) * w + col] = acc;
                }
            }
        }
        if li + 1 < layers.len() {
            for v in out.iter_mut() {
                pattern.push(*v > 0.0);
                *v = v.max(0.0);
            }
        }
        x = out;
    }
    (x, pattern)
}
