//! Quantile binning of effect predictions and the calibration diagnostics
//! built on it: Cal-Score, its share-of-baseline form R²_C (full and
//! restricted), bin-ordering indicators, and the top-vs-complement check.
//!
//! Bins use order-statistic thresholds, never interpolation, so membership
//! is invariant under any strictly increasing transform of the predictions.
//! Interval convention: bin j is (b_j, b_{j+1}], with the lowest bin closed
//! only by -inf; a value equal to a threshold lands in the lower bin. This
//! makes the bins an exact partition.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::metalearners::CateModel;
use crate::neyman::{ate_hat, EffectEstimate};

/// Whether the analysis hunts for harmed (negative-effect) or helped
/// (positive-effect) subgroups. Controls which extreme bin and which side of
/// a quantile cut is "of interest".
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Neg,
    Pos,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuantileBinning {
    /// The q-grid the thresholds were computed at.
    pub grid: Vec<f64>,
    /// b_q = minimal attained prediction with at least a q-fraction of
    /// training predictions at or below it. Nondecreasing.
    pub thresholds: Vec<f64>,
    /// Set when the thresholds are not strictly increasing, which leaves
    /// at least one bin structurally empty.
    pub degenerate: bool,
}

/// Compute order-statistic thresholds from raw predictions.
pub fn bin_thresholds_from(preds: &[f64], grid: &[f64]) -> Result<QuantileBinning> {
    if preds.is_empty() {
        return Err(Error::InvalidConfig(
            "cannot compute quantile thresholds from zero predictions".into(),
        ));
    }
    for pair in grid.windows(2) {
        if pair[1] < pair[0] {
            return Err(Error::InvalidConfig("quantile grid must be nondecreasing".into()));
        }
    }
    if grid.iter().any(|&q| !(0.0 < q && q < 1.0)) {
        return Err(Error::InvalidConfig(
            "quantile grid values must lie strictly inside (0, 1)".into(),
        ));
    }
    let mut sorted = preds.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let thresholds: Vec<f64> = grid
        .iter()
        .map(|&q| {
            // first index whose cumulative fraction reaches q; count of
            // values <= sorted[i] is at least i + 1
            let k = (q * n).ceil() as usize;
            let k = k.max(1).min(sorted.len());
            sorted[k - 1]
        })
        .collect();
    let degenerate = thresholds.windows(2).any(|p| p[0] >= p[1]);
    Ok(QuantileBinning {
        grid: grid.to_vec(),
        thresholds,
        degenerate,
    })
}

/// Thresholds from a model's predictions on its training fold.
pub fn bin_thresholds(
    m: &CateModel,
    d: &Dataset,
    train_idx: &[usize],
    grid: &[f64],
) -> Result<QuantileBinning> {
    bin_thresholds_from(&m.predict_rows(d, train_idx)?, grid)
}

impl QuantileBinning {
    /// Number of bins (thresholds + 1).
    pub fn k(&self) -> usize {
        self.thresholds.len() + 1
    }

    /// Bin label per prediction: the count of thresholds strictly below the
    /// value, so ties at a threshold go to the lower bin.
    pub fn assign(&self, preds: &[f64]) -> Vec<usize> {
        preds
            .iter()
            .map(|&v| self.thresholds.iter().take_while(|&&t| t < v).count())
            .collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BinRow {
    pub bin: usize,
    pub size: usize,
    /// Mean predicted effect in the bin; missing when the bin is empty.
    pub model_mean: Option<f64>,
    /// Bessel-corrected sample std of the bin's predictions (plot data).
    pub model_std: Option<f64>,
    /// Difference-in-means estimate within the bin; missing when the bin
    /// lacks a treated or control member.
    pub neyman: Option<EffectEstimate>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BinReport {
    pub rows: Vec<BinRow>,
    /// Bins without a defined difference-in-means estimate.
    pub skipped: usize,
    /// |S|: number of scored individuals; always the sum of bin sizes.
    pub total: usize,
}

/// Per-bin model means and difference-in-means estimates over the rows of
/// `idx`, whose bin labels and predictions are given in parallel.
pub fn bin_report(
    d: &Dataset,
    idx: &[usize],
    labels: &[usize],
    preds: &[f64],
    k: usize,
    outcome: &str,
) -> Result<BinReport> {
    if idx.len() != labels.len() || idx.len() != preds.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} rows, {} bin labels, {} predictions",
            idx.len(),
            labels.len(),
            preds.len()
        )));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut bin_preds: Vec<Vec<f64>> = vec![Vec::new(); k];
    for ((&row, &label), &pred) in idx.iter().zip(labels).zip(preds) {
        members[label].push(row);
        bin_preds[label].push(pred);
    }

    let mut rows = Vec::with_capacity(k);
    let mut skipped = 0;
    for j in 0..k {
        let size = members[j].len();
        let model_mean = (size > 0).then(|| bin_preds[j].iter().sum::<f64>() / size as f64);
        let model_std = (size > 1).then(|| {
            let mean = model_mean.expect("nonempty bin has a mean");
            let ss: f64 = bin_preds[j].iter().map(|p| (p - mean) * (p - mean)).sum();
            (ss / (size - 1) as f64).sqrt()
        });
        let neyman = match ate_hat(d, &members[j], outcome) {
            Ok(est) => Some(est),
            Err(Error::EmptyArm(_) | Error::EmptySubgroupArm) => None,
            Err(other) => return Err(other),
        };
        if neyman.is_none() {
            skipped += 1;
        }
        rows.push(BinRow {
            bin: j,
            size,
            model_mean,
            model_std,
            neyman,
        });
    }
    debug_assert_eq!(rows.iter().map(|r| r.size).sum::<usize>(), idx.len());
    Ok(BinReport {
        rows,
        skipped,
        total: idx.len(),
    })
}

/// Size-weighted mean absolute gap between each bin's reference value and
/// its difference-in-means estimate, over bins where both are defined.
fn weighted_gap(report: &BinReport, bins: Option<&[usize]>, reference: impl Fn(&BinRow) -> Option<f64>) -> Result<f64> {
    let selected = |j: usize| bins.map_or(true, |b| b.contains(&j));
    let mut num = 0.0;
    let mut denom = 0.0;
    for row in &report.rows {
        if !selected(row.bin) {
            continue;
        }
        let (Some(refv), Some(est)) = (reference(row), row.neyman.as_ref()) else {
            continue;
        };
        num += row.size as f64 * (refv - est.point).abs();
        denom += row.size as f64;
    }
    if denom == 0.0 {
        return Err(Error::AllBinsMissing);
    }
    Ok(num / denom)
}

pub fn cal_score(report: &BinReport) -> Result<f64> {
    weighted_gap(report, None, |row| row.model_mean)
}

/// Same gap with the constant `ate` in place of the bin model means.
pub fn cal_score_baseline(report: &BinReport, ate: f64) -> Result<f64> {
    weighted_gap(report, None, |_| Some(ate))
}

/// 1 - cal_score / cal_score_baseline. At most 1; 1 exactly when the model
/// is perfectly calibrated on the defined bins.
pub fn r2c(report: &BinReport, ate: f64) -> Result<f64> {
    restricted_r2c(report, ate, None)
}

/// R²_C over a subset of bin indices; `None` selects every bin.
pub fn restricted_r2c(report: &BinReport, ate: f64, bins: Option<&[usize]>) -> Result<f64> {
    let score = weighted_gap(report, bins, |row| row.model_mean)?;
    let baseline = weighted_gap(report, bins, |_| Some(ate))?;
    if baseline == 0.0 {
        return Err(Error::DegenerateBaseline);
    }
    Ok(1.0 - score / baseline)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OrderingIndicators {
    /// adjacent[j] = 1(tau_j <= tau_{j+1}); missing when either side is.
    pub adjacent: Vec<Option<bool>>,
    /// Whether the direction's bin of interest (lowest bin for Neg, highest
    /// for Pos) attains the extreme estimate across defined bins; ties count.
    pub extreme: Option<bool>,
    /// Adjacent pairs skipped for a missing side.
    pub skipped_pairs: usize,
}

pub fn ordering_indicators(report: &BinReport, direction: Direction) -> Result<OrderingIndicators> {
    let points: Vec<Option<f64>> = report
        .rows
        .iter()
        .map(|r| r.neyman.as_ref().map(|e| e.point))
        .collect();
    let defined: Vec<f64> = points.iter().filter_map(|p| *p).collect();
    if defined.len() < 2 {
        return Err(Error::AllBinsMissing);
    }

    let mut adjacent = Vec::with_capacity(points.len().saturating_sub(1));
    let mut skipped_pairs = 0;
    for pair in points.windows(2) {
        match (pair[0], pair[1]) {
            (Some(a), Some(b)) => adjacent.push(Some(a <= b)),
            _ => {
                adjacent.push(None);
                skipped_pairs += 1;
            }
        }
    }

    let extreme = match direction {
        Direction::Neg => points
            .first()
            .copied()
            .flatten()
            .map(|first| defined.iter().all(|&v| first <= v)),
        Direction::Pos => points
            .last()
            .copied()
            .flatten()
            .map(|last| defined.iter().all(|&v| last >= v)),
    };

    Ok(OrderingIndicators {
        adjacent,
        extreme,
        skipped_pairs,
    })
}

/// B_q: does the quantile-selected group keep its edge over the complement
/// on held-out rows? The cut point comes from training-fold predictions; the
/// two effects are estimated on the validation rows. `None` when either side
/// lacks an arm.
pub fn top_vs_complement(
    d: &Dataset,
    m: &CateModel,
    train_idx: &[usize],
    val_idx: &[usize],
    q: f64,
    direction: Direction,
    outcome: &str,
) -> Result<Option<bool>> {
    let binning = bin_thresholds(m, d, train_idx, &[q])?;
    let cut = binning.thresholds[0];
    let val_preds = m.predict_rows(d, val_idx)?;
    let mut group = Vec::new();
    let mut complement = Vec::new();
    for (&row, &pred) in val_idx.iter().zip(&val_preds) {
        let of_interest = match direction {
            Direction::Neg => pred <= cut,
            Direction::Pos => pred > cut,
        };
        if of_interest {
            group.push(row);
        } else {
            complement.push(row);
        }
    }
    let group_est = ate_hat(d, &group, outcome);
    let comp_est = ate_hat(d, &complement, outcome);
    match (group_est, comp_est) {
        (Ok(g), Ok(c)) => Ok(Some(match direction {
            Direction::Neg => g.point <= c.point,
            Direction::Pos => g.point >= c.point,
        })),
        (Err(Error::EmptyArm(_) | Error::EmptySubgroupArm), _)
        | (_, Err(Error::EmptyArm(_) | Error::EmptySubgroupArm)) => Ok(None),
        (Err(other), _) | (_, Err(other)) => Err(other),
    }
}
