//! Benchmark orchestration: attack grids, worst-case aggregation, ranking,
//! schedule selection on the validation split and weighting-curve export.

use std::path::Path;

use crate::attack::{attack_batch, AttackLoss};
use crate::config::BenchConfig;
use crate::data::{Sample, Split, SplitSource};
use crate::error::{ensure, Error, Result};
use crate::metrics::{gather_selected, rank_rows, score_predictions, sea_select, Metric, RankTable, Scores};
use crate::objectives::{probability_grid, weighting_curve, LossKind};
use crate::report::{self, CurveRow, DetailRow, ReportRow, SeaRow};
use crate::schedules::QSchedule;
use crate::segmodel::ModelParams;
use crate::tensor::LabelMap;

/// All artefacts of one benchmark run.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchOutcome {
    pub attacks: Vec<String>,
    pub rows: Vec<ReportRow>,
    pub sea: Vec<SeaRow>,
    pub details: Vec<DetailRow>,
    pub ranks: Option<RankTable>,
    /// One message per failed cell.
    pub failures: Vec<String>,
}

impl BenchOutcome {
    pub fn write(&self, dir: &Path) -> Result<()> {
        report::write_text(&dir.join("report.csv"), &report::report_csv(&self.rows)?)?;
        report::write_text(&dir.join("sea.csv"), &report::sea_csv(&self.sea)?)?;
        report::write_text(&dir.join("detail.csv"), &report::detail_csv(&self.details)?)?;
        let md = match &self.ranks {
            Some(t) => report::report_markdown(&self.rows, t)?,
            None => "no complete rows to rank\n".to_string(),
        };
        report::write_text(&dir.join("report.md"), &md)?;
        let mut failures = String::new();
        for f in &self.failures {
            failures.push_str(f);
            failures.push('\n');
        }
        report::write_text(&dir.join("failures.txt"), &failures)?;
        Ok(())
    }
}

/// Truth maps of `samples`.
fn truths(samples: &[Sample]) -> Vec<LabelMap> {
    samples.iter().map(|s| s.labels.clone()).collect()
}

fn load_split(cfg: &BenchConfig, source: &dyn SplitSource, split: Split) -> Result<Vec<Sample>> {
    let mut samples = source.load(split)?;
    if let Some(l) = cfg.dataset.limit {
        samples.truncate(l);
    }
    ensure!(!samples.is_empty(), InvalidArgument, "{} split is empty", split.as_str());
    Ok(samples)
}

/// Runs every `(victim, eps, attack)` cell on `split`.
fn run_grid(
    cfg: &BenchConfig,
    samples: &[Sample],
    victims: &[(String, ModelParams)],
    attacks: &[(String, AttackLoss)],
    sea_groups: &[(String, Vec<usize>)],
) -> Result<BenchOutcome> {
    let truth = truths(samples);
    let eps_values = cfg.eps_values()?;
    let mut rows = Vec::new();
    let mut sea = Vec::new();
    let mut details = Vec::new();
    let mut failures = Vec::new();

    for (vname, model) in victims {
        let classes = model.classes();
        for (eps_str, &eps) in cfg.eps.iter().zip(&eps_values) {
            // predictions[a] is None when the cell failed
            let mut predictions: Vec<Option<Vec<LabelMap>>> = Vec::with_capacity(attacks.len());
            for (aname, loss) in attacks {
                let acfg = cfg.attack_config(*loss, eps)?;
                let results = attack_batch(model, samples, &acfg);
                let mut preds = Vec::with_capacity(samples.len());
                let mut failed = 0usize;
                let mut loss_sum = 0.0;
                for (i, r) in results.iter().enumerate() {
                    match r {
                        Ok(res) if res.feasible => {
                            preds.push(model.predict(&res.adversarial)?);
                            loss_sum += res.best_loss;
                        }
                        Ok(_) => {
                            failed += 1;
                            failures.push(format!("{vname} eps={eps_str} {aname}: image {i} infeasible"));
                        }
                        Err(e) => {
                            failed += 1;
                            failures.push(format!("{vname} eps={eps_str} {aname}: image {i}: {e}"));
                        }
                    }
                }
                if failed > 0 {
                    predictions.push(None);
                    continue;
                }
                let s = score_predictions(&preds, &truth, classes)?;
                rows.push(ReportRow {
                    dataset: cfg.dataset.name.clone(),
                    model: vname.clone(),
                    eps: eps_str.clone(),
                    attack: aname.clone(),
                    acc: s.acc,
                    miou: s.miou,
                    rank_acc: f64::NAN,
                    rank_miou: f64::NAN,
                });
                details.push(detail_row(cfg, vname, eps_str, aname, &s, loss_sum / samples.len() as f64));
                predictions.push(Some(preds));
            }

            for (gname, members) in sea_groups {
                let Some(group) = members
                    .iter()
                    .map(|&a| predictions[a].clone())
                    .collect::<Option<Vec<_>>>()
                else {
                    failures.push(format!("{vname} eps={eps_str} sea {gname}: member cell failed"));
                    continue;
                };
                for metric in Metric::BOTH {
                    let choice = sea_select(&group, &truth, classes, metric)?;
                    let s = score_predictions(&gather_selected(&group, &choice), &truth, classes)?;
                    sea.push(SeaRow {
                        dataset: cfg.dataset.name.clone(),
                        model: vname.clone(),
                        eps: eps_str.clone(),
                        selected_by: metric.name().into(),
                        attacks: format!("{gname}[{}]", members.iter().map(|&a| attacks[a].0.as_str()).collect::<Vec<_>>().join("+")),
                        acc: s.acc,
                        miou: s.miou,
                    });
                }
            }
        }
    }

    let ranks = attach_ranks(&mut rows, attacks.len(), cfg)?;
    Ok(BenchOutcome {
        attacks: attacks.iter().map(|a| a.0.clone()).collect(),
        rows,
        sea,
        details,
        ranks,
        failures,
    })
}

fn detail_row(cfg: &BenchConfig, model: &str, eps: &str, attack: &str, s: &Scores, mean_loss: f64) -> DetailRow {
    DetailRow {
        dataset: cfg.dataset.name.clone(),
        model: model.into(),
        eps: eps.into(),
        attack: attack.into(),
        acc_mean_per_image: s.acc,
        acc_pooled: s.acc_pooled,
        miou_pooled: s.miou,
        miou_mean_per_image: s.miou_per_image,
        mean_best_loss: mean_loss,
    }
}

/// Ranks complete `(model, eps)` groups; rows of incomplete groups keep NaN ranks
/// and are dropped from the report.
fn attach_ranks(rows: &mut Vec<ReportRow>, n_attacks: usize, cfg: &BenchConfig) -> Result<Option<RankTable>> {
    let complete = |r: &ReportRow, all: &[ReportRow]| {
        all.iter().filter(|x| x.model == r.model && x.eps == r.eps).count() == n_attacks
    };
    let snapshot = rows.clone();
    rows.retain(|r| complete(r, &snapshot));
    if rows.is_empty() {
        return Ok(None);
    }
    let (_, scores) = report::rows_from_report(rows)?;
    let table = rank_rows(&scores, cfg.tie_rule)?;
    for (g, chunk) in rows.chunks_mut(n_attacks).enumerate() {
        for (a, r) in chunk.iter_mut().enumerate() {
            r.rank_acc = table.ranks_acc[g][a];
            r.rank_miou = table.ranks_miou[g][a];
        }
    }
    Ok(Some(table))
}

fn configured_attacks(cfg: &BenchConfig) -> Result<Vec<(String, AttackLoss)>> {
    cfg.attacks.iter().map(|a| Ok((a.name.clone(), a.attack_loss()?))).collect()
}

fn configured_groups(cfg: &BenchConfig) -> Vec<(String, Vec<usize>)> {
    let index = |n: &str| cfg.attacks.iter().position(|a| a.name == n).expect("validated");
    if cfg.sea.is_empty() && cfg.attacks.len() >= 2 {
        return vec![("best-of-all".into(), (0..cfg.attacks.len()).collect())];
    }
    cfg.sea
        .iter()
        .map(|g| (g.name.clone(), g.attacks.iter().map(|a| index(a)).collect()))
        .collect()
}

/// Loads every configured victim.
pub fn load_victims(cfg: &BenchConfig) -> Result<Vec<(String, ModelParams)>> {
    cfg.victims
        .iter()
        .map(|v| Ok((v.name.clone(), ModelParams::load(&v.path)?)))
        .collect()
}

/// The configured benchmark on `cfg.split`.
pub fn run_benchmark(
    cfg: &BenchConfig,
    source: &dyn SplitSource,
    victims: &[(String, ModelParams)],
) -> Result<BenchOutcome> {
    cfg.validate()?;
    ensure!(!victims.is_empty(), InvalidArgument, "no victims loaded");
    let samples = load_split(cfg, source, cfg.split)?;
    run_grid(cfg, &samples, victims, &configured_attacks(cfg)?, &configured_groups(cfg))
}

/// The six-schedule grid `q_start in {-3, -2, -1}` x `q_end in {0.5, 1}`.
pub fn default_candidates() -> Vec<QSchedule> {
    let mut out = Vec::new();
    for start in [-3.0, -2.0, -1.0] {
        for end in [0.5, 1.0] {
            out.push(QSchedule::Linear { start, end });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateScore {
    pub schedule: QSchedule,
    pub avg_rank_acc: f64,
    pub avg_rank_miou: f64,
    /// Mean over rows and both metrics.
    pub avg_rank: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub chosen: QSchedule,
    pub scores: Vec<CandidateScore>,
    pub outcome: BenchOutcome,
}

fn schedule_key(s: &QSchedule) -> (f64, f64) {
    match *s {
        QSchedule::Fixed(q) => (q, q),
        QSchedule::Linear { start, end } => (start, end),
    }
}

/// Ranks Tsallis attacks with each candidate schedule on the validation split
/// and picks the lowest pooled average rank. Ties prefer larger `q_start`,
/// then larger `q_end`. Only the validation split is read.
pub fn schedule_selection(
    cfg: &BenchConfig,
    source: &dyn SplitSource,
    victims: &[(String, ModelParams)],
    candidates: &[QSchedule],
) -> Result<Selection> {
    cfg.validate()?;
    ensure!(!candidates.is_empty(), InvalidArgument, "no candidate schedules");
    for c in candidates {
        c.validate()?;
    }
    let samples = source.load(Split::Val)?;
    ensure!(!samples.is_empty(), InvalidArgument, "validation split is empty");
    let samples: Vec<Sample> = match cfg.dataset.limit {
        Some(l) => samples.into_iter().take(l).collect(),
        None => samples,
    };
    let attacks: Vec<(String, AttackLoss)> = candidates
        .iter()
        .map(|s| (format!("tsallis[{s}]"), AttackLoss::Tsallis(*s)))
        .collect();
    let outcome = run_grid(cfg, &samples, victims, &attacks, &[])?;
    let table = outcome
        .ranks
        .clone()
        .ok_or_else(|| Error::InvalidArgument("every validation cell failed".into()))?;
    let pooled = table.pooled_avg();
    let scores: Vec<CandidateScore> = candidates
        .iter()
        .enumerate()
        .map(|(i, s)| CandidateScore {
            schedule: *s,
            avg_rank_acc: table.avg_acc[i],
            avg_rank_miou: table.avg_miou[i],
            avg_rank: pooled[i],
        })
        .collect();
    let best = scores
        .iter()
        .min_by(|a, b| {
            let (ka, kb) = (schedule_key(&a.schedule), schedule_key(&b.schedule));
            a.avg_rank
                .total_cmp(&b.avg_rank)
                .then(kb.0.total_cmp(&ka.0))
                .then(kb.1.total_cmp(&ka.1))
        })
        .expect("non-empty");
    Ok(Selection {
        chosen: best.schedule,
        scores,
        outcome,
    })
}

/// Weighting curves of `kinds` on a grid of spacing `step`.
pub fn emit_curves(kinds: &[LossKind], step: f64) -> Result<Vec<CurveRow>> {
    ensure!(!kinds.is_empty(), InvalidArgument, "no curve kinds requested");
    let grid = probability_grid(step)?;
    let mut out = Vec::new();
    for &k in kinds {
        let q = match k {
            LossKind::Tsallis(q) => q.to_string(),
            LossKind::Ce => "1".into(),
            _ => String::new(),
        };
        for (p, weight) in weighting_curve(k, &grid)? {
            out.push(CurveRow {
                kind: k.name().into(),
                q: q.clone(),
                p,
                weight,
            });
        }
    }
    Ok(out)
}
