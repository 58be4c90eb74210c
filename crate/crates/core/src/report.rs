//! CSV and Markdown encodings of benchmark results.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::metrics::{Metric, RankTable, RowScores};

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

fn from_csv<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::Parse(format!("record {}: {e}", i + 1))))
        .collect()
}

/// One `(dataset, model, eps, attack)` cell of a benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub model: String,
    pub eps: String,
    pub attack: String,
    pub acc: f64,
    pub miou: f64,
    pub rank_acc: f64,
    pub rank_miou: f64,
}

pub fn report_csv(rows: &[ReportRow]) -> Result<String> {
    to_csv(rows)
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    from_csv(text)
}

/// Attack order of first appearance and the `(dataset, model, eps)` groups.
fn group_rows(rows: &[ReportRow]) -> (Vec<String>, Vec<(String, String, String)>) {
    let mut attacks: Vec<String> = Vec::new();
    let mut groups: Vec<(String, String, String)> = Vec::new();
    for r in rows {
        if !attacks.contains(&r.attack) {
            attacks.push(r.attack.clone());
        }
        let g = (r.dataset.clone(), r.model.clone(), r.eps.clone());
        if !groups.contains(&g) {
            groups.push(g);
        }
    }
    (attacks, groups)
}

/// Converts report cells into rankable rows; every group must score every attack.
pub fn rows_from_report(rows: &[ReportRow]) -> Result<(Vec<String>, Vec<RowScores>)> {
    let (attacks, groups) = group_rows(rows);
    let scores = groups
        .iter()
        .map(|g| {
            let mut acc = Vec::with_capacity(attacks.len());
            let mut miou = Vec::with_capacity(attacks.len());
            for a in &attacks {
                let cell = rows
                    .iter()
                    .find(|r| (&r.dataset, &r.model, &r.eps) == (&g.0, &g.1, &g.2) && &r.attack == a)
                    .ok_or_else(|| Error::InvalidArgument(format!("{} {} {} has no {a} result", g.0, g.1, g.2)))?;
                acc.push(cell.acc);
                miou.push(cell.miou);
            }
            Ok(RowScores {
                label: format!("{} {} eps={}", g.0, g.1, g.2),
                acc,
                miou,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((attacks, scores))
}

/// Markdown grid: one line per `(model, eps)`, Acc/mIoU per attack, Avg. Rank last.
pub fn report_markdown(rows: &[ReportRow], table: &RankTable) -> Result<String> {
    let (attacks, groups) = group_rows(rows);
    let (_, scores) = rows_from_report(rows)?;
    let mut out = String::new();
    let _ = write!(out, "| dataset | model | eps |");
    for a in &attacks {
        let _ = write!(out, " {a} Acc | {a} mIoU |");
    }
    out.push('\n');
    out.push_str(&"|---".repeat(3 + 2 * attacks.len()));
    out.push_str("|\n");
    for (g, s) in groups.iter().zip(&scores) {
        let _ = write!(out, "| {} | {} | {} |", g.0, g.1, g.2);
        for (a, m) in s.acc.iter().zip(&s.miou) {
            let _ = write!(out, " {a:.1} | {m:.1} |");
        }
        out.push('\n');
    }
    out.push_str("| **Avg. Rank** | | |");
    for (a, m) in table.avg_acc.iter().zip(&table.avg_miou) {
        let _ = write!(out, " {a:.2} | {m:.2} |");
    }
    out.push('\n');
    Ok(out)
}

/// A wide score table: `row,<attack>/acc,<attack>/miou,...`.
#[derive(Debug, Clone, PartialEq)]
pub struct WideTable {
    pub attacks: Vec<String>,
    pub rows: Vec<RowScores>,
}

impl WideTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(text.as_bytes());
        let mut records = reader.records();
        let header = records
            .next()
            .ok_or_else(|| Error::Parse("empty score table".into()))?
            .map_err(csv_err)?;
        ensure!(
            header.len() >= 5 && header.len() % 2 == 1,
            Parse,
            "header needs a row column plus acc/miou pairs for >= 2 attacks, got {} columns",
            header.len()
        );
        let mut attacks = Vec::new();
        for c in (1..header.len()).step_by(2) {
            let (a_acc, a_miou) = (&header[c], &header[c + 1]);
            let name = a_acc
                .strip_suffix("/acc")
                .ok_or_else(|| Error::Parse(format!("column {}: expected <attack>/acc, got {a_acc:?}", c + 1)))?;
            ensure!(
                a_miou.strip_suffix("/miou") == Some(name),
                Parse,
                "column {}: expected {name}/miou, got {a_miou:?}",
                c + 2
            );
            ensure!(!attacks.iter().any(|a| a == name), Parse, "attack {name:?} appears twice");
            attacks.push(name.to_string());
        }
        let mut rows = Vec::new();
        for (i, rec) in records.enumerate() {
            let line = i + 2;
            let rec = rec.map_err(csv_err)?;
            ensure!(
                rec.len() == header.len(),
                Parse,
                "row {line} has {} columns, header has {}",
                rec.len(),
                header.len()
            );
            let mut acc = Vec::new();
            let mut miou = Vec::new();
            for c in 1..rec.len() {
                let v: f64 = rec[c].trim().parse().map_err(|_| {
                    Error::Parse(format!("row {line}, column {} ({}): bad number {:?}", c + 1, &header[c], &rec[c]))
                })?;
                ensure!(
                    v.is_finite(),
                    Parse,
                    "row {line}, column {}: non-finite value",
                    c + 1
                );
                if c % 2 == 1 {
                    acc.push(v);
                } else {
                    miou.push(v);
                }
            }
            rows.push(RowScores {
                label: rec[0].to_string(),
                acc,
                miou,
            });
        }
        ensure!(!rows.is_empty(), Parse, "score table has no rows");
        Ok(Self { attacks, rows })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["row".to_string()];
        for a in &self.attacks {
            header.push(format!("{a}/acc"));
            header.push(format!("{a}/miou"));
        }
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.label.clone()];
            for (a, m) in r.acc.iter().zip(&r.miou) {
                rec.push(a.to_string());
                rec.push(m.to_string());
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
    }

    /// The ranks in the same wide layout, with a final `avg-rank` row.
    pub fn ranks_csv(&self, table: &RankTable) -> Result<String> {
        let mut rows: Vec<RowScores> = self
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| RowScores {
                label: r.label.clone(),
                acc: table.ranks(Metric::Acc)[i].clone(),
                miou: table.ranks(Metric::Miou)[i].clone(),
            })
            .collect();
        rows.push(RowScores {
            label: "avg-rank".into(),
            acc: table.avg_acc.clone(),
            miou: table.avg_miou.clone(),
        });
        WideTable {
            attacks: self.attacks.clone(),
            rows,
        }
        .to_csv()
    }
}

/// Worst-case aggregate over a group of attacks, one line per selection metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeaRow {
    pub dataset: String,
    pub model: String,
    pub eps: String,
    pub selected_by: String,
    pub attacks: String,
    pub acc: f64,
    pub miou: f64,
}

pub fn sea_csv(rows: &[SeaRow]) -> Result<String> {
    to_csv(rows)
}

pub fn parse_sea_csv(text: &str) -> Result<Vec<SeaRow>> {
    from_csv(text)
}

/// Per-cell detail: both aggregation conventions and failure counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetailRow {
    pub dataset: String,
    pub model: String,
    pub eps: String,
    pub attack: String,
    pub acc_mean_per_image: f64,
    pub acc_pooled: f64,
    pub miou_pooled: f64,
    pub miou_mean_per_image: f64,
    pub mean_best_loss: f64,
}

pub fn detail_csv(rows: &[DetailRow]) -> Result<String> {
    to_csv(rows)
}

pub fn parse_detail_csv(text: &str) -> Result<Vec<DetailRow>> {
    from_csv(text)
}

/// `index,best_loss,feasible` for an attack results directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub index: u64,
    pub best_loss: f64,
    pub feasible: bool,
}

pub fn attack_csv(rows: &[AttackRow]) -> Result<String> {
    to_csv(rows)
}

pub fn parse_attack_csv(text: &str) -> Result<Vec<AttackRow>> {
    from_csv(text)
}

/// `kind,q,p,weight` rows for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub kind: String,
    pub q: String,
    pub p: f64,
    pub weight: f64,
}

pub fn curves_csv(rows: &[CurveRow]) -> Result<String> {
    to_csv(rows)
}

pub fn parse_curves_csv(text: &str) -> Result<Vec<CurveRow>> {
    from_csv(text)
}
