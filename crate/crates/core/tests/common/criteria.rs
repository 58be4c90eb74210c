//! Acceptance measurements. Each returns a [`Check`]; the integration tests
//! assert on it and the acceptance harness prints it.

#![allow(dead_code)]

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::PathBuf;

use segattack::attack::{attack_batch_with_workers, is_feasible, run_attack, AttackConfig, AttackLoss, AttackResult};
use segattack::data::{Sample, ShapesWorldSpec, Split, SplitSizes};
use segattack::metrics::{confusion, miou, pixel_accuracy, rank_rows, score_predictions, Metric, Scores, TieRule};
use segattack::objectives::{
    grad_peak, loss_and_logit_grad, probability_grid, tsallis_loss, weighting_curve, IterCtx, LossKind, MaskNorm,
};
use segattack::report::WideTable;
use segattack::schedules::QSchedule;
use segattack::segmodel::{Conv2d, ModelParams};
use segattack::tensor::{LabelMap, Rng, Tensor};
use segattack::train::{train, TrainConfig};

use super::*;

#[derive(Debug, Clone)]
pub struct Check {
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }
}

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn fixture(name: &str) -> String {
    std::fs::read_to_string(fixture_path(name)).unwrap()
}

// ---- objectives -------------------------------------------------------------

/// One random objective instance plus its oracle.
struct Instance {
    kind: LossKind,
    ctx: Option<IterCtx>,
    classes: usize,
    labels: LabelMap,
    logits: Vec<f64>,
}

fn oracle_for(inst: &Instance) -> RefKind {
    let (l, k, y) = (&inst.logits, inst.classes, &inst.labels);
    match inst.kind {
        LossKind::Ce => RefKind::Ce,
        LossKind::Tsallis(q) => RefKind::Tsallis(q),
        LossKind::Js => RefKind::Js,
        LossKind::SegPgd => {
            let c = inst.ctx.unwrap();
            segpgd_weights(l, k, y, c.t, c.total)
        }
        LossKind::CosPgd => cospgd_weights(l, k, y),
        LossKind::MaskedCe(n) => masked_weights(l, k, y, n == MaskNorm::Masked),
    }
}

fn random_instance(rng: &mut Rng, kind_index: usize) -> Instance {
    let classes = rng.int_in(2, 8);
    let (h, w) = (2, 3);
    let kind = match kind_index % 7 {
        0 => LossKind::Ce,
        1 => LossKind::Tsallis(rng.uniform(-3.0, 0.9)),
        2 => LossKind::SegPgd,
        3 => LossKind::CosPgd,
        4 => LossKind::Js,
        5 => LossKind::MaskedCe(MaskNorm::Masked),
        _ => LossKind::MaskedCe(MaskNorm::Total),
    };
    let total = rng.int_in(1, 50);
    let ctx = Some(IterCtx {
        t: rng.int_in(0, total - 1),
        total,
    });
    Instance {
        kind,
        ctx,
        classes,
        labels: random_labels(rng, h, w, classes, 0.1),
        logits: random_logits(rng, classes * h * w, 3.0),
    }
}

/// Analytic logit gradients against central differences of the oracle
/// objectives (weighted kinds with weights frozen at the base point).
pub fn gradient_oracle(instances: usize) -> Check {
    let mut rng = Rng::new(0x6f);
    let mut worst = 0.0f64;
    let mut worst_value = 0.0f64;
    let mut worst_kind = String::new();
    for n in 0..instances {
        let inst = random_instance(&mut rng, n);
        let rep = loss_and_logit_grad(inst.kind, &inst.logits, inst.classes, &inst.labels, inst.ctx).unwrap();
        let oracle = oracle_for(&inst);
        let value = objective(&oracle, &inst.logits, inst.classes, &inst.labels);
        worst_value = worst_value.max((value - rep.scalar_loss).abs());
        let fd = central_diff(&inst.logits, 1e-5, |u| objective(&oracle, u, inst.classes, &inst.labels));
        let e = rel_err(&rep.logit_grad, &fd);
        if e > worst {
            worst = e;
            worst_kind = inst.kind.to_string();
        }
    }
    Check::new(
        worst <= 1e-4 && worst_value <= 1e-12,
        format!("{instances} instances, max rel err {worst:.2e} ({worst_kind}), max |loss - oracle| {worst_value:.1e}"),
    )
}

/// Tsallis gradient equals `p_y^(1-q)` times the CE gradient.
pub fn confidence_weighting(instances: usize) -> Check {
    let mut rng = Rng::new(0x70);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let classes = rng.int_in(2, 8);
        let labels = random_labels(&mut rng, 2, 2, classes, 0.0);
        let logits = random_logits(&mut rng, classes * 4, 4.0);
        let q = rng.uniform(-3.0, 0.9);
        let t = loss_and_logit_grad(LossKind::Tsallis(q), &logits, classes, &labels, None).unwrap();
        let c = loss_and_logit_grad(LossKind::Ce, &logits, classes, &labels, None).unwrap();
        for (i, &y) in labels.data().iter().enumerate() {
            let p = softmax(&pixel(&logits, classes, i));
            let s = p[y as usize].powf(1.0 - q);
            for k in 0..classes {
                let j = k * 4 + i;
                worst = worst.max((t.logit_grad[j] - s * c.logit_grad[j]).abs());
            }
        }
    }
    Check::new(worst <= 1e-6, format!("{instances} instances, max abs diff {worst:.2e}"))
}

/// Squared logit-gradient norm sits between the closed-form bounds.
pub fn gradient_sandwich(instances: usize) -> Check {
    let mut rng = Rng::new(0x71);
    let mut worst_violation = f64::NEG_INFINITY;
    for _ in 0..instances {
        let classes = rng.int_in(2, 8);
        let y = rng.int_in(0, classes - 1);
        let labels = LabelMap::new(1, 1, vec![y as u8]).unwrap();
        let logits = random_logits(&mut rng, classes, 4.0);
        let q = rng.uniform(-3.0, 1.0);
        let kind = if q == 1.0 { LossKind::Ce } else { LossKind::Tsallis(q) };
        let g = loss_and_logit_grad(kind, &logits, classes, &labels, None).unwrap().logit_grad;
        let norm2: f64 = g.iter().map(|v| v * v).sum();
        let p = softmax(&logits)[y];
        let k = classes as f64;
        let w = p.powf(2.0 * (1.0 - q));
        let lower = k / (k - 1.0) * w * (1.0 - p).powi(2);
        let upper = w * ((1.0 - p) + (1.0 - p).powi(2));
        worst_violation = worst_violation.max(lower - norm2).max(norm2 - upper);
    }
    let labels = LabelMap::new(1, 1, vec![0]).unwrap();
    let g = loss_and_logit_grad(LossKind::Ce, &[0.3, 0.3], 2, &labels, None).unwrap().logit_grad;
    let eq: f64 = g.iter().map(|v| v * v).sum();
    let (lo, _) = segattack::objectives::tsallis_grad_bounds(0.5, 1.0, 2).unwrap();
    let pass = worst_violation <= 1e-9 && (eq - 0.5).abs() <= 1e-12 && (lo - 0.5).abs() <= 1e-12;
    Check::new(
        pass,
        format!("{instances} instances, max violation {worst_violation:.2e}; K=2 symmetric norm {eq}, lower bound {lo}"),
    )
}

/// Grid argmax of the weighting proxy against the closed-form peak.
pub fn gradient_peak() -> Check {
    let grid = probability_grid(1e-4).unwrap();
    let argmax_of = |kind: LossKind| {
        let c = weighting_curve(kind, &grid).unwrap();
        c.iter().cloned().fold((0.0, f64::NEG_INFINITY), |b, x| if x.1 > b.1 { x } else { b }).0
    };
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for q in [-3.0, -2.0, -1.0, 0.0, 0.5] {
        let found = argmax_of(LossKind::Tsallis(q));
        let closed = (1.0 - q) / (2.0 - q);
        worst = worst.max((found - closed).abs()).max((grad_peak(q).unwrap() - closed).abs());
        parts.push(format!("q={q}: {found:.4}"));
    }
    let ce = argmax_of(LossKind::Ce);
    let ends = (grad_peak(-3.0).unwrap() - 0.8).abs() < 1e-12 && (grad_peak(0.5).unwrap() - 1.0 / 3.0).abs() < 1e-12;
    Check::new(
        worst <= 2e-4 && ends && ce <= 1e-4 + 1e-12,
        format!("{}; ce: {ce:.4}; max deviation {worst:.1e}", parts.join(", ")),
    )
}

/// `|L_q(p) - (-ln p)|` at `q = 1 - 1e-4` over a grid of `p` in `[1e-3, 1]`.
pub fn ce_limit_pointwise() -> (f64, f64, f64) {
    let q = 1.0 - 1e-4;
    let mut worst_abs = 0.0f64;
    let mut worst_rel = 0.0f64;
    let mut at = 1.0;
    for i in 0..=10_000 {
        let p = 1e-3 + (1.0 - 1e-3) * i as f64 / 10_000.0;
        let d = (tsallis_loss(p, q).unwrap() + p.ln()).abs();
        if d > worst_abs {
            worst_abs = d;
            at = p;
        }
        if p < 1.0 {
            worst_rel = worst_rel.max(d / -p.ln());
        }
    }
    (worst_abs, at, worst_rel)
}

/// Fixed toy instance shared by the end-to-end limit check.
pub fn toy_instance() -> (ModelParams, Tensor, LabelMap) {
    let model = ModelParams::reference(3, 4, 11).unwrap();
    let mut rng = Rng::new(12);
    let img: Vec<f64> = (0..3 * 8 * 8).map(|_| rng.next_f64()).collect();
    let image = Tensor::from_f64(vec![3, 8, 8], &img).unwrap();
    let labels = random_labels(&mut rng, 8, 8, 4, 0.0);
    (model, image, labels)
}

/// Per-iteration loss traces of a near-CE Tsallis attack and a CE attack.
pub fn ce_limit_attack() -> (f64, usize) {
    let (model, image, labels) = toy_instance();
    let run = |loss| {
        let cfg = AttackConfig::new(loss, 8.0 / 255.0, 50);
        run_attack(&model, &image, &labels, &cfg, 0).unwrap()
    };
    let a = run(AttackLoss::Tsallis(QSchedule::Fixed(1.0 - 1e-6)));
    let b = run(AttackLoss::Ce);
    assert_eq!(a.loss_trace.len(), b.loss_trace.len());
    let worst = a
        .loss_trace
        .iter()
        .zip(&b.loss_trace)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    (worst, a.loss_trace.len())
}

pub fn ce_limit() -> Check {
    let (abs, at, rel) = ce_limit_pointwise();
    let (trace, n) = ce_limit_attack();
    Check::new(
        abs <= 1e-3 && trace <= 1e-3,
        format!(
            "pointwise max |L_q + ln p| = {abs:.2e} at p = {at:.4} (relative {rel:.1e}); attack traces over {n} iterations differ by {trace:.1e}"
        ),
    )
}

// ---- tables -----------------------------------------------------------------

pub fn best_of_q_table() -> Check {
    let t = WideTable::parse(&fixture("fixed_q_study.csv")).unwrap();
    let best = t.attacks.iter().position(|a| a == "best-of-q").unwrap();
    let mut bad = Vec::new();
    for row in &t.rows {
        for m in Metric::BOTH {
            let v = row.values(m);
            if v.iter().any(|x| v[best] > *x) {
                bad.push(format!("{} {}", row.label, m.name()));
            }
        }
    }
    Check::new(
        bad.is_empty() && t.rows.len() == 9,
        format!("{} rows x 2 metrics, {} violations {bad:?}", t.rows.len(), bad.len()),
    )
}

pub fn attack_ranks(rule: TieRule) -> (Vec<String>, Vec<f64>, Vec<f64>) {
    let t = WideTable::parse(&fixture("attack_comparison.csv")).unwrap();
    let r = rank_rows(&t.rows, rule).unwrap();
    (t.attacks, r.avg_acc, r.avg_miou)
}

pub fn table_ranks() -> Check {
    let mut parts = Vec::new();
    let mut within_one = false;
    let mut best_everywhere = true;
    for rule in [TieRule::Min, TieRule::Average] {
        let (attacks, acc, miou) = attack_ranks(rule);
        let ts = attacks.iter().position(|a| a == "tsallispgd").unwrap();
        within_one |= (acc[ts] - 1.38).abs() <= 0.20 && (miou[ts] - 1.57).abs() <= 0.20;
        for v in [&acc, &miou] {
            best_everywhere &= v.iter().enumerate().all(|(i, x)| i == ts || *x > v[ts]);
        }
        parts.push(format!("{rule}: acc {:.2} miou {:.2}", acc[ts], miou[ts]));
    }
    Check::new(within_one && best_everywhere, format!("tsallispgd avg rank {}", parts.join("; ")))
}

// ---- attacks ----------------------------------------------------------------

pub const ALL_LOSSES: [AttackLoss; 7] = [
    AttackLoss::Ce,
    AttackLoss::Tsallis(QSchedule::Linear { start: -2.0, end: 1.0 }),
    AttackLoss::SegPgd,
    AttackLoss::CosPgd,
    AttackLoss::Js,
    AttackLoss::MaskedCe(MaskNorm::Masked),
    AttackLoss::MaskedCe(MaskNorm::Total),
];

/// Random images and a lightly trained model for attack suites.
pub fn attack_workload(images: usize, size: usize) -> (ModelParams, Vec<Sample>) {
    let spec = ShapesWorldSpec {
        size,
        ..Default::default()
    };
    let samples: Vec<Sample> = (0..images as u64).map(|i| spec.generate(i).unwrap()).collect();
    let cfg = TrainConfig {
        epochs: 3,
        ..Default::default()
    };
    (train(&cfg, &samples).unwrap(), samples)
}

pub fn digest(results: &[AttackResult]) -> u64 {
    let mut h = DefaultHasher::new();
    for r in results {
        for v in r.adversarial.data() {
            v.to_bits().hash(&mut h);
        }
        r.best_loss.to_bits().hash(&mut h);
        for v in &r.loss_trace {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

/// The feasibility and determinism workload: `ALL_LOSSES` x images, T = 20.
pub fn determinism_runs(workers: usize) -> Vec<(f64, Sample, AttackResult)> {
    let (model, samples) = attack_workload(29, 16);
    let mut out = Vec::new();
    for (li, loss) in ALL_LOSSES.iter().enumerate() {
        let eps = [2.0, 4.0, 8.0, 16.0][li % 4] / 255.0;
        let cfg = AttackConfig {
            seed: li as u64,
            ..AttackConfig::new(*loss, eps, 20)
        };
        let res = attack_batch_with_workers(&model, &samples, &cfg, workers).unwrap();
        for (s, r) in samples.iter().zip(res) {
            out.push((eps, s.clone(), r.unwrap()));
        }
    }
    out
}

pub fn feasibility(runs: &[(f64, Sample, AttackResult)]) -> (usize, usize) {
    let mut bad = 0;
    for (eps, s, r) in runs {
        let in_box = r.adversarial.data().iter().all(|v| (0.0..=1.0).contains(v));
        let linf = r
            .adversarial
            .data()
            .iter()
            .zip(s.image.data())
            .fold(0.0f64, |m, (a, b)| m.max((*a as f64 - *b as f64).abs()));
        if !(in_box && linf <= eps + 1e-6 && r.feasible && is_feasible(&r.adversarial, &s.image, *eps)) {
            bad += 1;
        }
    }
    (runs.len(), bad)
}

pub fn run_digest(runs: &[(f64, Sample, AttackResult)]) -> u64 {
    let results: Vec<AttackResult> = runs.iter().map(|r| r.2.clone()).collect();
    digest(&results)
}

// ---- desk benchmark ---------------------------------------------------------

/// PGD steps per image used to adversarially train the desk victim.
pub const DESK_ADV_STEPS: usize = 3;

#[derive(Debug, Clone)]
pub struct DeskBench {
    pub clean_acc: f64,
    pub ce: Scores,
    pub tsallis: Scores,
}

pub fn desk_benchmark() -> DeskBench {
    let spec = ShapesWorldSpec::default();
    let sizes = SplitSizes {
        train: 256,
        val: 64,
        test: 64,
    };
    let load = |split| -> Vec<Sample> {
        let off = sizes.offset(split) as u64;
        (off..off + sizes.count(split) as u64).map(|i| spec.generate(i).unwrap()).collect()
    };
    let train_set = load(Split::Train);
    let test = load(Split::Test);
    let cfg = TrainConfig {
        adv_steps: DESK_ADV_STEPS,
        ..Default::default()
    };
    let model = train(&cfg, &train_set).unwrap();
    let truths: Vec<LabelMap> = test.iter().map(|s| s.labels.clone()).collect();
    let clean: Vec<LabelMap> = test.iter().map(|s| model.predict(&s.image).unwrap()).collect();
    let clean_acc = score_predictions(&clean, &truths, spec.classes).unwrap().acc;
    let score = |loss| {
        let c = AttackConfig::new(loss, 8.0 / 255.0, 100);
        let res = attack_batch_with_workers(&model, &test, &c, 1).unwrap();
        let preds: Vec<LabelMap> = res.iter().map(|r| model.predict(&r.as_ref().unwrap().adversarial).unwrap()).collect();
        score_predictions(&preds, &truths, spec.classes).unwrap()
    };
    DeskBench {
        clean_acc,
        ce: score(AttackLoss::Ce),
        tsallis: score(AttackLoss::Tsallis(QSchedule::Linear { start: -2.0, end: 1.0 })),
    }
}

/// `key,value` pairs of the pinned desk benchmark observation.
pub fn desk_fixture() -> Vec<(String, f64)> {
    fixture("desk_benchmark.csv")
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (k, v) = l.split_once(',').unwrap();
            (k.to_string(), v.parse().unwrap())
        })
        .collect()
}

pub fn desk_values(d: &DeskBench) -> Vec<(String, f64)> {
    vec![
        ("clean_acc".into(), d.clean_acc),
        ("ce_acc".into(), d.ce.acc),
        ("ce_miou".into(), d.ce.miou),
        ("tsallis_acc".into(), d.tsallis.acc),
        ("tsallis_miou".into(), d.tsallis.miou),
    ]
}

pub fn desk_check(d: &DeskBench) -> Check {
    let gap = d.ce.acc - d.tsallis.acc;
    Check::new(
        gap >= 1.0 && d.tsallis.miou <= d.ce.miou,
        format!(
            "clean acc {:.2}; CE acc {:.2} miou {:.2}; Tsallis acc {:.2} miou {:.2}; acc gap {gap:.2} pt",
            d.clean_acc, d.ce.acc, d.ce.miou, d.tsallis.acc, d.tsallis.miou
        ),
    )
}

// ---- metrics and model ------------------------------------------------------

pub fn hand_count() -> Check {
    let truth = LabelMap::new(2, 2, vec![0, 0, 1, 1]).unwrap();
    let pred = LabelMap::new(2, 2, vec![0, 1, 1, 1]).unwrap();
    let cm = confusion(&pred, &truth, 2).unwrap();
    let counts = cm.counts().to_vec();
    let acc = pixel_accuracy(&cm).unwrap();
    let m = miou(&cm).unwrap();
    let pass = counts == [1, 1, 0, 2] && acc == 75.0 && (m - 175.0 / 3.0).abs() < 1e-12 && format!("{m:.2}") == "58.33";
    Check::new(pass, format!("confusion {counts:?}, acc {acc}, miou {m:.4}"))
}

/// Random conv chain: reference layouts and odd-kernel variants.
fn random_model(rng: &mut Rng, n: usize) -> (ModelParams, usize) {
    let classes = rng.int_in(2, 5);
    if n % 2 == 0 {
        return (ModelParams::reference(3, classes, rng.next_u64()).unwrap(), 3);
    }
    let in_ch = rng.int_in(1, 3);
    let depth = rng.int_in(1, 3);
    let mut layers = Vec::new();
    let mut c = in_ch;
    for d in 0..depth {
        let out = if d + 1 == depth { classes } else { rng.int_in(2, 6) };
        let k = [1, 3, 5][rng.int_in(0, 2)];
        let w: Vec<f64> = (0..out * c * k * k).map(|_| rng.uniform(-0.6, 0.6)).collect();
        let b: Vec<f64> = (0..out).map(|_| rng.uniform(-0.2, 0.2)).collect();
        layers.push(
            Conv2d::new(
                Tensor::from_f64(vec![out, c, k, k], &w).unwrap(),
                Tensor::from_f64(vec![out], &b).unwrap(),
            )
            .unwrap(),
        );
        c = out;
    }
    (ModelParams::from_layers(layers).unwrap(), in_ch)
}

/// Central difference of `f` along one coordinate, or `None` if either probe
/// changes the ReLU pattern.
fn fd_coord(base: &[bool], h: f64, mut f: impl FnMut(f64) -> (f64, Vec<bool>)) -> Option<f64> {
    let (up, pu) = f(h);
    let (down, pd) = f(-h);
    (pu == base && pd == base).then(|| (up - down) / (2.0 * h))
}

pub fn model_gradients(models: usize) -> Check {
    let mut rng = Rng::new(0x72);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let (mut checked, mut skipped) = (0usize, 0usize);
    for n in 0..models {
        let (model, in_ch) = random_model(&mut rng, n);
        let (hh, ww) = (4, 5);
        let k = model.classes();
        let image: Vec<f64> = (0..in_ch * hh * ww).map(|_| rng.next_f64()).collect();
        let upstream: Vec<f64> = (0..k * hh * ww).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let dot = |v: &[f64]| v.iter().zip(&upstream).map(|(a, b)| a * b).sum::<f64>();

        let tr = model.trace_f64(&image, hh, ww).unwrap();
        let (g_img, g_params) = model.backward_full(&tr, &upstream).unwrap();
        let mut layers = ref_layers(&model);
        let (logits, base) = ref_forward(&layers, &image, hh, ww);
        assert!(rel_err(&logits, tr.logits()) < 1e-12, "forward disagrees with the naive oracle");

        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        let mut x = image.clone();
        for j in 0..x.len() {
            let x0 = x[j];
            let d = fd_coord(&base, h, |s| {
                x[j] = x0 + s;
                let (o, p) = ref_forward(&layers, &x, hh, ww);
                x[j] = x0;
                (dot(&o), p)
            });
            match d {
                Some(d) => {
                    analytic.push(g_img[j]);
                    numeric.push(d);
                }
                None => skipped += 1,
            }
        }
        for li in 0..layers.len() {
            for (which, count) in [(0, layers[li].weight.len()), (1, layers[li].bias.len())] {
                for j in 0..count {
                    let d = fd_coord(&base, h, |s| {
                        let slot = if which == 0 { &mut layers[li].weight[j] } else { &mut layers[li].bias[j] };
                        let v0 = *slot;
                        *slot = v0 + s;
                        let (o, p) = ref_forward(&layers, &image, hh, ww);
                        let slot = if which == 0 { &mut layers[li].weight[j] } else { &mut layers[li].bias[j] };
                        *slot = v0;
                        (dot(&o), p)
                    });
                    let a = if which == 0 { g_params[li].weight[j] } else { g_params[li].bias[j] };
                    match d {
                        Some(d) => {
                            analytic.push(a);
                            numeric.push(d);
                        }
                        None => skipped += 1,
                    }
                }
            }
        }
        checked += analytic.len();
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    let skip_rate = skipped as f64 / (checked + skipped) as f64;
    Check::new(
        worst <= 1e-3 && skip_rate < 0.05,
        format!("{models} models, {checked} coordinates, {skipped} skipped on ReLU flips, max rel err {worst:.2e}"),
    )
}
