//! Confusion-matrix metrics, per-image worst-case selection and row ranking.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::{LabelMap, IGNORE_INDEX};

/// `counts[i * K + j]` = pixels with truth `i` predicted `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        ensure!(
            counts.len() == classes * classes,
            Shape,
            "{} counts for {classes} classes",
            counts.len()
        );
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn add(&mut self, other: &ConfusionMatrix) -> Result<()> {
        ensure!(
            other.classes == self.classes,
            Shape,
            "adding {}-class matrix to {}-class matrix",
            other.classes,
            self.classes
        );
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Counts `(truth, pred)` pairs; ignored truth pixels are skipped.
pub fn confusion(pred: &LabelMap, truth: &LabelMap, classes: usize) -> Result<ConfusionMatrix> {
    ensure!(
        pred.height() == truth.height() && pred.width() == truth.width(),
        Shape,
        "prediction {}x{} vs truth {}x{}",
        pred.height(),
        pred.width(),
        truth.height(),
        truth.width()
    );
    let mut cm = ConfusionMatrix::new(classes);
    for (i, (&p, &t)) in pred.data().iter().zip(truth.data()).enumerate() {
        ensure!(
            (p as usize) < classes,
            InvalidArgument,
            "prediction {p} at pixel {i} outside 0..{classes}"
        );
        if t == IGNORE_INDEX {
            continue;
        }
        ensure!(
            (t as usize) < classes,
            InvalidArgument,
            "label {t} at pixel {i} outside 0..{classes}"
        );
        cm.counts[t as usize * classes + p as usize] += 1;
    }
    Ok(cm)
}

/// `100 * trace / total`.
pub fn pixel_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    ensure!(total > 0, InvalidArgument, "pixel accuracy of an empty confusion matrix");
    Ok(100.0 * cm.correct() as f64 / total as f64)
}

/// Mean IoU in percent over classes present in truth or prediction.
pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    let k = cm.classes;
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..k {
        let row: u64 = (0..k).map(|j| cm.get(c, j)).sum();
        let col: u64 = (0..k).map(|i| cm.get(i, c)).sum();
        let inter = cm.get(c, c);
        let union = row + col - inter;
        if union > 0 {
            sum += inter as f64 / union as f64;
            present += 1;
        }
    }
    ensure!(present > 0, InvalidArgument, "mIoU with no class present");
    Ok(100.0 * sum / present as f64)
}

/// Dataset-level scores for one set of predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    /// Mean of per-image pixel accuracies.
    pub acc: f64,
    /// mIoU of the summed confusion matrix.
    pub miou: f64,
    /// Accuracy of the summed confusion matrix.
    pub acc_pooled: f64,
    /// Mean of per-image mIoU.
    pub miou_per_image: f64,
}

pub fn score_predictions(preds: &[LabelMap], truths: &[LabelMap], classes: usize) -> Result<Scores> {
    ensure!(
        preds.len() == truths.len(),
        Shape,
        "{} predictions for {} label maps",
        preds.len(),
        truths.len()
    );
    let mut pooled = ConfusionMatrix::new(classes);
    let (mut acc_sum, mut miou_sum, mut scored) = (0.0, 0.0, 0usize);
    for (p, t) in preds.iter().zip(truths) {
        let cm = confusion(p, t, classes)?;
        if cm.total() > 0 {
            acc_sum += pixel_accuracy(&cm)?;
            miou_sum += miou(&cm)?;
            scored += 1;
        }
        pooled.add(&cm)?;
    }
    ensure!(scored > 0, InvalidArgument, "no image has labelled pixels");
    Ok(Scores {
        acc: acc_sum / scored as f64,
        miou: miou(&pooled)?,
        acc_pooled: pixel_accuracy(&pooled)?,
        miou_per_image: miou_sum / scored as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Acc,
    Miou,
}

impl Metric {
    pub const BOTH: [Metric; 2] = [Metric::Acc, Metric::Miou];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Acc => "acc",
            Metric::Miou => "miou",
        }
    }
}

/// Per-image value of `metric`; `None` for images without labelled pixels.
pub fn per_image_metric(pred: &LabelMap, truth: &LabelMap, classes: usize, metric: Metric) -> Result<Option<f64>> {
    let cm = confusion(pred, truth, classes)?;
    if cm.total() == 0 {
        return Ok(None);
    }
    Ok(Some(match metric {
        Metric::Acc => pixel_accuracy(&cm)?,
        Metric::Miou => miou(&cm)?,
    }))
}

/// For every image, the index of the attack whose prediction minimises the
/// per-image `metric`. Ties keep the earliest attack.
///
/// `preds[a][i]` is attack `a`'s prediction on image `i`.
pub fn sea_select(preds: &[Vec<LabelMap>], truths: &[LabelMap], classes: usize, metric: Metric) -> Result<Vec<usize>> {
    ensure!(!preds.is_empty(), InvalidArgument, "worst-case selection needs at least one attack");
    for (a, p) in preds.iter().enumerate() {
        ensure!(
            p.len() == truths.len(),
            InvalidArgument,
            "attack {a} covers {} of {} images",
            p.len(),
            truths.len()
        );
    }
    (0..truths.len())
        .map(|i| {
            let mut best = (0usize, f64::INFINITY);
            for (a, p) in preds.iter().enumerate() {
                let v = per_image_metric(&p[i], &truths[i], classes, metric)?.unwrap_or(0.0);
                if v < best.1 {
                    best = (a, v);
                }
            }
            Ok(best.0)
        })
        .collect()
}

/// The predictions picked by [`sea_select`].
pub fn gather_selected(preds: &[Vec<LabelMap>], choice: &[usize]) -> Vec<LabelMap> {
    choice
        .iter()
        .enumerate()
        .map(|(i, &a)| preds[a][i].clone())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieRule {
    /// Tied values all take the smallest rank of their group.
    #[default]
    Min,
    /// Tied values take the mean of the ranks they span.
    Average,
}

impl fmt::Display for TieRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TieRule::Min => "min",
            TieRule::Average => "average",
        })
    }
}

impl FromStr for TieRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "min" => Ok(TieRule::Min),
            "average" | "avg" => Ok(TieRule::Average),
            other => Err(Error::Parse(format!("unknown tie rule {other:?} (min|average)"))),
        }
    }
}

/// Ascending ranks starting at 1; lower value means stronger attack.
pub fn rank_values(values: &[f64], rule: TieRule) -> Result<Vec<f64>> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("score {i} is {}", values[i])));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let r = match rule {
            TieRule::Min => (start + 1) as f64,
            TieRule::Average => (start + 1 + end) as f64 / 2.0,
        };
        for &i in &order[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    Ok(ranks)
}

/// One benchmark row: a score per attack for each metric.
#[derive(Debug, Clone, PartialEq)]
pub struct RowScores {
    pub label: String,
    pub acc: Vec<f64>,
    pub miou: Vec<f64>,
}

impl RowScores {
    pub fn values(&self, metric: Metric) -> &[f64] {
        match metric {
            Metric::Acc => &self.acc,
            Metric::Miou => &self.miou,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankTable {
    /// `ranks_acc[row][attack]`.
    pub ranks_acc: Vec<Vec<f64>>,
    pub ranks_miou: Vec<Vec<f64>>,
    pub avg_acc: Vec<f64>,
    pub avg_miou: Vec<f64>,
}

impl RankTable {
    pub fn ranks(&self, metric: Metric) -> &[Vec<f64>] {
        match metric {
            Metric::Acc => &self.ranks_acc,
            Metric::Miou => &self.ranks_miou,
        }
    }

    pub fn avg(&self, metric: Metric) -> &[f64] {
        match metric {
            Metric::Acc => &self.avg_acc,
            Metric::Miou => &self.avg_miou,
        }
    }

    /// Mean over rows and both metrics.
    pub fn pooled_avg(&self) -> Vec<f64> {
        self.avg_acc
            .iter()
            .zip(&self.avg_miou)
            .map(|(a, m)| (a + m) / 2.0)
            .collect()
    }
}

/// Ranks attacks within every row and metric and averages over rows.
pub fn rank_rows(rows: &[RowScores], rule: TieRule) -> Result<RankTable> {
    ensure!(!rows.is_empty(), InvalidArgument, "ranking needs at least one row");
    let n = rows[0].acc.len();
    ensure!(n >= 1, InvalidArgument, "row {:?} scores no attacks", rows[0].label);
    for r in rows {
        for m in Metric::BOTH {
            ensure!(
                r.values(m).len() == n,
                InvalidArgument,
                "row {:?} has {} {} scores, expected {n}",
                r.label,
                r.values(m).len(),
                m.name()
            );
        }
    }
    let rank_metric = |m: Metric| -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let ranks = rows
            .iter()
            .map(|r| rank_values(r.values(m), rule))
            .collect::<Result<Vec<_>>>()?;
        let avg = (0..n)
            .map(|a| ranks.iter().map(|row| row[a]).sum::<f64>() / rows.len() as f64)
            .collect();
        Ok((ranks, avg))
    };
    let (ranks_acc, avg_acc) = rank_metric(Metric::Acc)?;
    let (ranks_miou, avg_miou) = rank_metric(Metric::Miou)?;
    Ok(RankTable {
        ranks_acc,
        ranks_miou,
        avg_acc,
        avg_miou,
    })
}
