//! Perturbation harness and estimator screening: run every estimator across
//! data perturbations and cross-validation folds, summarize validation-fold
//! top-subgroup t-statistics, rank estimators per perturbation, screen the
//! ones that stay in the top k everywhere, and ensemble the survivors.

use std::borrow::Cow;
use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{bin_thresholds_from, Direction};
use crate::dataset::{stratified_cv_folds, time_folds, Dataset, FoldAssignment};
use crate::error::{Error, Result};
use crate::metalearners::{fit_cate, CateEstimatorSpec, CateModel, EnsembleModel};
use crate::neyman::tstat_vs_ate;
use crate::rng::{derive_seed, Fingerprint};
use crate::rowset::RowSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PerturbationKind {
    /// Random stratified CV refold under its own seed. Exactly one of these
    /// is the `original`, whose folds carry hyperparameter tuning and are
    /// reused by the data-level perturbations below.
    RandomCv {
        seed: u64,
        #[serde(default)]
        original: bool,
    },
    /// Contiguous enrollment-time blocks instead of random folds.
    TimeCv,
    /// Re-binarize one feature from a raw side column at a new threshold.
    FeatureRethreshold {
        source: String,
        threshold: f64,
        replaces: String,
    },
    /// Swap the analysis outcome for an alternate outcome column.
    OutcomeSwap { outcome: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: PerturbationKind,
}

/// Checks the one-original invariant and name uniqueness.
/// Caps the global worker pool. Call once, before any parallel stage; the
/// schedule never affects results, only wall time.
pub fn configure_threads(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
}

pub fn validate_perturbations(perts: &[PerturbationSpec]) -> Result<()> {
    if perts.is_empty() {
        return Err(Error::InvalidConfig("no perturbations configured".into()));
    }
    let mut names = BTreeSet::new();
    for p in perts {
        if !names.insert(p.name.as_str()) {
            return Err(Error::InvalidConfig(format!(
                "duplicate perturbation name `{}`",
                p.name
            )));
        }
    }
    let originals = perts
        .iter()
        .filter(|p| matches!(p.kind, PerturbationKind::RandomCv { original: true, .. }))
        .count();
    if originals != 1 {
        return Err(Error::InvalidConfig(format!(
            "expected exactly one original random-cv perturbation, found {originals}"
        )));
    }
    Ok(())
}

pub fn original_perturbation(perts: &[PerturbationSpec]) -> Result<&PerturbationSpec> {
    perts
        .iter()
        .find(|p| matches!(p.kind, PerturbationKind::RandomCv { original: true, .. }))
        .ok_or_else(|| Error::InvalidConfig("no original random-cv perturbation".into()))
}

/// The dataset view a perturbation analyzes, plus the effective outcome name.
/// Only feature re-thresholding clones the dataset.
pub fn perturbed_view<'a>(
    d: &'a Dataset,
    p: &PerturbationSpec,
    outcome: &str,
) -> Result<(Cow<'a, Dataset>, String)> {
    match &p.kind {
        PerturbationKind::RandomCv { .. } | PerturbationKind::TimeCv => {
            d.outcome(outcome)?;
            Ok((Cow::Borrowed(d), outcome.to_string()))
        }
        PerturbationKind::OutcomeSwap { outcome: alt } => {
            d.outcome(alt)?;
            Ok((Cow::Borrowed(d), alt.clone()))
        }
        PerturbationKind::FeatureRethreshold {
            source,
            threshold,
            replaces,
        } => {
            d.outcome(outcome)?;
            let raw = d
                .aux
                .get(source)
                .ok_or_else(|| Error::MissingColumn(source.clone()))?;
            let j = d.feature_index(replaces)?;
            let mut view = d.clone();
            view.features[j] = raw.iter().map(|&v| u8::from(v >= *threshold)).collect();
            Ok((Cow::Owned(view), outcome.to_string()))
        }
    }
}

/// Fold assignment for a perturbation: random-cv draws its own stratified
/// folds, time-cv blocks on enrollment time, and the data-level
/// perturbations reuse the original's folds.
pub fn perturbation_folds(
    d: &Dataset,
    p: &PerturbationSpec,
    train_idx: &[usize],
    outcome: &str,
    k: usize,
    original_folds: Option<&FoldAssignment>,
) -> Result<FoldAssignment> {
    match &p.kind {
        PerturbationKind::RandomCv { seed, .. } => {
            stratified_cv_folds(d, train_idx, outcome, k, *seed)
        }
        PerturbationKind::TimeCv => time_folds(d, train_idx, k),
        PerturbationKind::FeatureRethreshold { .. } | PerturbationKind::OutcomeSwap { .. } => {
            original_folds
                .cloned()
                .ok_or_else(|| Error::MissingStage("original cross-validation folds".into()))
        }
    }
}

/// One (fold, q) evaluation cell: the validation-fold t-statistic of the
/// direction-appropriate quantile top subgroup, or missing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopSubgroupStat {
    pub fold: u8,
    pub q: f64,
    pub t: Option<f64>,
    pub subgroup_size: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EstimatorPerturbationResult {
    pub estimator: String,
    /// Fold-major over the q grid; always `k * q_grid.len()` entries.
    pub cells: Vec<TopSubgroupStat>,
    /// Skip-and-count mean of the defined cell t-statistics.
    pub t_bar: Option<f64>,
    pub used: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerturbationResult {
    pub perturbation: String,
    /// Hash of the estimator spec list, for tuned-hyperparameter lineage
    /// checks across perturbations.
    pub specs_fingerprint: u64,
    pub estimators: Vec<EstimatorPerturbationResult>,
    /// `models[estimator][fold]`; None where the fit or prediction failed.
    /// Not serialized: artifacts keep the summary, models are rebuilt
    /// deterministically from the same seeds when needed.
    #[serde(skip)]
    pub models: Vec<Vec<Option<CateModel>>>,
}

fn specs_fingerprint(specs: &[CateEstimatorSpec]) -> u64 {
    let mut fp = Fingerprint::new();
    fp.write(
        serde_json::to_string(specs)
            .expect("estimator specs serialize")
            .as_bytes(),
    );
    fp.finish()
}

fn skip_mean(ts: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize, usize) {
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for t in ts {
        match t {
            Some(v) => {
                sum += v;
                used += 1;
            }
            None => skipped += 1,
        }
    }
    ((used > 0).then(|| sum / used as f64), used, skipped)
}

/// Membership cut for one quantile on the training-fold predictions.
fn quantile_cut(train_preds: &[f64], q: f64) -> Result<f64> {
    Ok(bin_thresholds_from(train_preds, &[q])?.thresholds[0])
}

fn in_top(pred: f64, cut: f64, direction: Direction) -> bool {
    match direction {
        Direction::Neg => pred <= cut,
        Direction::Pos => pred > cut,
    }
}

/// Fit every estimator on each training-fold configuration and score the
/// quantile top subgroups on the validation folds. Per-cell failures are
/// recorded as missing; the sweep never aborts on degenerate fits.
#[allow(clippy::too_many_arguments)]
pub fn run_perturbation(
    d: &Dataset,
    p: &PerturbationSpec,
    specs: &[CateEstimatorSpec],
    train_idx: &[usize],
    folds: &FoldAssignment,
    outcome: &str,
    direction: Direction,
    q_grid: &[f64],
    seed: u64,
) -> Result<PerturbationResult> {
    if specs.is_empty() {
        return Err(Error::InvalidConfig("no estimators configured".into()));
    }
    if q_grid.is_empty() || q_grid.iter().any(|q| !(*q > 0.0 && *q < 1.0)) {
        return Err(Error::InvalidConfig(
            "subgroup quantiles must lie strictly inside (0, 1)".into(),
        ));
    }
    if folds.fold.len() != train_idx.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} fold labels for {} training rows",
            folds.fold.len(),
            train_idx.len()
        )));
    }
    let (view, eff_outcome) = perturbed_view(d, p, outcome)?;
    let view = view.as_ref();

    let tasks: Vec<(usize, u8)> = (0..specs.len())
        .flat_map(|ei| (0..folds.k as u8).map(move |f| (ei, f)))
        .collect();
    let per_task: Vec<(Option<CateModel>, Vec<TopSubgroupStat>)> = tasks
        .par_iter()
        .map(|&(ei, f)| {
            let missing = |f: u8| -> Vec<TopSubgroupStat> {
                q_grid
                    .iter()
                    .map(|&q| TopSubgroupStat {
                        fold: f,
                        q,
                        t: None,
                        subgroup_size: 0,
                    })
                    .collect()
            };
            let (val, fit_rows) = folds.split(train_idx, f);
            let task_seed = derive_seed(seed, &format!("{}/{}/fold{f}", p.name, specs[ei].name));
            let Ok(model) = fit_cate(&specs[ei], view, &fit_rows, &eff_outcome, task_seed)
            else {
                return (None, missing(f));
            };
            let (Ok(train_preds), Ok(val_preds)) = (
                model.predict_rows(view, &fit_rows),
                model.predict_rows(view, &val),
            ) else {
                return (None, missing(f));
            };
            let cells = q_grid
                .iter()
                .map(|&q| {
                    let Ok(cut) = quantile_cut(&train_preds, q) else {
                        return TopSubgroupStat { fold: f, q, t: None, subgroup_size: 0 };
                    };
                    let rows: Vec<usize> = val
                        .iter()
                        .zip(&val_preds)
                        .filter(|&(_, &pred)| in_top(pred, cut, direction))
                        .map(|(&row, _)| row)
                        .collect();
                    let g = RowSet::from_indices(view.n(), &rows);
                    let t = tstat_vs_ate(view, &val, &g, &eff_outcome)
                        .ok()
                        .and_then(|e| e.t_stat);
                    TopSubgroupStat { fold: f, q, t, subgroup_size: rows.len() }
                })
                .collect();
            (Some(model), cells)
        })
        .collect();

    let mut models: Vec<Vec<Option<CateModel>>> = vec![Vec::new(); specs.len()];
    let mut cells: Vec<Vec<TopSubgroupStat>> = vec![Vec::new(); specs.len()];
    for ((ei, _), (model, task_cells)) in tasks.into_iter().zip(per_task) {
        models[ei].push(model);
        cells[ei].extend(task_cells);
    }
    let estimators = specs
        .iter()
        .zip(cells)
        .map(|(spec, cells)| {
            let (t_bar, used, skipped) = skip_mean(cells.iter().map(|c| c.t));
            debug_assert_eq!(used + skipped, cells.len());
            EstimatorPerturbationResult {
                estimator: spec.name.clone(),
                cells,
                t_bar,
                used,
                skipped,
            }
        })
        .collect();
    Ok(PerturbationResult {
        perturbation: p.name.clone(),
        specs_fingerprint: specs_fingerprint(specs),
        estimators,
        models,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RankRow {
    pub estimator: String,
    /// Aligned with `RankTable::perturbations`.
    pub t_bar: Vec<Option<f64>>,
    pub rank: Vec<usize>,
    pub skipped: Vec<usize>,
    pub worst_rank: usize,
    pub screened: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RankTable {
    pub perturbations: Vec<String>,
    /// Display order: ascending worst rank, then name.
    pub rows: Vec<RankRow>,
    /// Estimators ranked in the top k under every perturbation, in input
    /// estimator order.
    pub screened: Vec<String>,
    pub top_k: usize,
}

/// Rank estimators within each perturbation (best mean t first for the
/// sought direction, missing strictly last, ties by name) and screen the
/// ones in the top k everywhere. An estimator with a missing mean in any
/// perturbation is never screened.
pub fn rank_and_screen(
    results: &[PerturbationResult],
    direction: Direction,
    top_k: usize,
) -> Result<RankTable> {
    if results.is_empty() {
        return Err(Error::InvalidConfig("no perturbation results to rank".into()));
    }
    if top_k == 0 {
        return Err(Error::InvalidConfig("top_k must be at least 1".into()));
    }
    let names: Vec<String> = results[0]
        .estimators
        .iter()
        .map(|e| e.estimator.clone())
        .collect();
    for r in results {
        let other: Vec<&str> = r.estimators.iter().map(|e| e.estimator.as_str()).collect();
        if other != names.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::InvalidConfig(format!(
                "perturbation `{}` ran a different estimator list",
                r.perturbation
            )));
        }
        if r.specs_fingerprint != results[0].specs_fingerprint {
            return Err(Error::InvalidConfig(format!(
                "perturbation `{}` was run with different tuned specs",
                r.perturbation
            )));
        }
    }
    {
        let mut seen = BTreeSet::new();
        for r in results {
            if !seen.insert(r.perturbation.as_str()) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate perturbation result `{}`",
                    r.perturbation
                )));
            }
        }
    }

    let m = names.len();
    let mut t_bar = vec![Vec::with_capacity(results.len()); m];
    let mut skipped = vec![Vec::with_capacity(results.len()); m];
    let mut rank = vec![Vec::with_capacity(results.len()); m];
    for r in results {
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| {
            let (ta, tb) = (r.estimators[a].t_bar, r.estimators[b].t_bar);
            match (ta, tb) {
                (None, None) => names[a].cmp(&names[b]),
                (None, Some(_)) => std::cmp::Ordering::Greater,
                (Some(_), None) => std::cmp::Ordering::Less,
                (Some(x), Some(y)) => {
                    let by_t = match direction {
                        Direction::Neg => x.total_cmp(&y),
                        Direction::Pos => y.total_cmp(&x),
                    };
                    by_t.then_with(|| names[a].cmp(&names[b]))
                }
            }
        });
        let mut this_rank = vec![0usize; m];
        for (pos, &ei) in order.iter().enumerate() {
            this_rank[ei] = pos + 1;
        }
        debug_assert!({
            let mut sorted = this_rank.clone();
            sorted.sort_unstable();
            sorted == (1..=m).collect::<Vec<_>>()
        });
        for ei in 0..m {
            t_bar[ei].push(r.estimators[ei].t_bar);
            skipped[ei].push(r.estimators[ei].skipped);
            rank[ei].push(this_rank[ei]);
        }
    }

    let mut rows: Vec<RankRow> = (0..m)
        .map(|ei| {
            let worst = *rank[ei].iter().max().expect("at least one perturbation");
            let complete = t_bar[ei].iter().all(|t| t.is_some());
            RankRow {
                estimator: names[ei].clone(),
                t_bar: t_bar[ei].clone(),
                rank: rank[ei].clone(),
                skipped: skipped[ei].clone(),
                worst_rank: worst,
                screened: complete && worst <= top_k,
            }
        })
        .collect();
    let screened: Vec<String> = rows
        .iter()
        .filter(|r| r.screened)
        .map(|r| r.estimator.clone())
        .collect();
    if screened.is_empty() {
        return Err(Error::EmptyScreen(top_k));
    }
    rows.sort_by(|a, b| a.worst_rank.cmp(&b.worst_rank).then_with(|| a.estimator.cmp(&b.estimator)));
    Ok(RankTable {
        perturbations: results.iter().map(|r| r.perturbation.clone()).collect(),
        rows,
        screened,
        top_k,
    })
}

/// An equal-weight ensemble of the screened estimators for one
/// (perturbation, fold) context, with that context's row split.
#[derive(Clone, Debug)]
pub struct FoldEnsemble {
    pub perturbation: String,
    pub fold: u8,
    pub model: EnsembleModel,
    pub fit_rows: Vec<usize>,
    pub val_rows: Vec<usize>,
}

/// Assemble the per-fold ensembles from already-fitted models. A screened
/// estimator must have a model on every fold of every context.
pub fn build_fold_ensembles(
    screened: &[String],
    contexts: &[(&PerturbationResult, &FoldAssignment)],
    train_idx: &[usize],
) -> Result<Vec<FoldEnsemble>> {
    if screened.is_empty() {
        return Err(Error::InvalidConfig("no screened estimators".into()));
    }
    let mut out = Vec::new();
    for (res, folds) in contexts {
        let member_idx: Vec<usize> = screened
            .iter()
            .map(|name| {
                res.estimators
                    .iter()
                    .position(|e| &e.estimator == name)
                    .ok_or_else(|| {
                        Error::InvalidConfig(format!(
                            "screened estimator `{name}` missing from `{}`",
                            res.perturbation
                        ))
                    })
            })
            .collect::<Result<_>>()?;
        for f in 0..folds.k as u8 {
            let members: Vec<CateModel> = member_idx
                .iter()
                .map(|&ei| {
                    res.models[ei][f as usize].clone().ok_or_else(|| {
                        Error::MissingStage(format!(
                            "model for `{}` on `{}` fold {f}",
                            res.estimators[ei].estimator, res.perturbation
                        ))
                    })
                })
                .collect::<Result<_>>()?;
            let (val_rows, fit_rows) = folds.split(train_idx, f);
            out.push(FoldEnsemble {
                perturbation: res.perturbation.clone(),
                fold: f,
                model: EnsembleModel::new(members)?,
                fit_rows,
                val_rows,
            });
        }
    }
    Ok(out)
}

/// Per-quantile ensemble summary across contexts: validation-fold
/// t-statistics and the full-train top subgroups they imply.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnsembleQStat {
    pub q: f64,
    /// Aligned with the ensemble context list.
    pub t_values: Vec<Option<f64>>,
    pub mean_t: Option<f64>,
    /// Sample standard deviation over the defined t values.
    pub std_t: Option<f64>,
    pub used: usize,
    pub skipped: usize,
    /// Mean pairwise percent overlap of the top subgroups.
    pub overlap_pct: Option<f64>,
    /// Top-subgroup membership over the full training population, per context.
    pub groups: Vec<RowSet>,
}

pub fn ensemble_q_stats(
    d: &Dataset,
    ensembles: &[FoldEnsemble],
    train_idx: &[usize],
    outcome: &str,
    direction: Direction,
    q_grid: &[f64],
) -> Result<Vec<EnsembleQStat>> {
    if ensembles.is_empty() {
        return Err(Error::InvalidConfig("no ensemble contexts".into()));
    }
    let preds: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = ensembles
        .iter()
        .map(|e| {
            Ok((
                e.model.predict_rows(d, &e.fit_rows)?,
                e.model.predict_rows(d, &e.val_rows)?,
                e.model.predict_rows(d, train_idx)?,
            ))
        })
        .collect::<Result<_>>()?;

    q_grid
        .iter()
        .map(|&q| {
            let mut t_values = Vec::with_capacity(ensembles.len());
            let mut groups = Vec::with_capacity(ensembles.len());
            for (e, (fit_preds, val_preds, train_preds)) in ensembles.iter().zip(&preds) {
                let cut = quantile_cut(fit_preds, q)?;
                let rows: Vec<usize> = e
                    .val_rows
                    .iter()
                    .zip(val_preds)
                    .filter(|&(_, &pred)| in_top(pred, cut, direction))
                    .map(|(&row, _)| row)
                    .collect();
                let g = RowSet::from_indices(d.n(), &rows);
                t_values.push(
                    tstat_vs_ate(d, &e.val_rows, &g, outcome)
                        .ok()
                        .and_then(|est| est.t_stat),
                );
                let member_rows: Vec<usize> = train_idx
                    .iter()
                    .zip(train_preds)
                    .filter(|&(_, &pred)| in_top(pred, cut, direction))
                    .map(|(&row, _)| row)
                    .collect();
                groups.push(RowSet::from_indices(d.n(), &member_rows));
            }
            let (mean_t, used, skipped) = skip_mean(t_values.iter().copied());
            let defined: Vec<f64> = t_values.iter().flatten().copied().collect();
            let std_t = (defined.len() > 1).then(|| {
                let mean = mean_t.expect("defined nonempty");
                let ss: f64 = defined.iter().map(|t| (t - mean).powi(2)).sum();
                (ss / (defined.len() - 1) as f64).sqrt()
            });
            let overlap_pct = (groups.len() > 1)
                .then(|| subgroup_overlap(&groups))
                .transpose()?;
            Ok(EnsembleQStat {
                q,
                t_values,
                mean_t,
                std_t,
                used,
                skipped,
                overlap_pct,
                groups,
            })
        })
        .collect()
}

/// Mean over unordered pairs of |A intersect B| / mean(|A|, |B|), in percent.
/// Two empty groups count as fully overlapping.
pub fn subgroup_overlap(groups: &[RowSet]) -> Result<f64> {
    if groups.len() < 2 {
        return Err(Error::InvalidConfig(
            "overlap needs at least two subgroups".into(),
        ));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..groups.len() {
        for j in i + 1..groups.len() {
            let mean = (groups[i].len() + groups[j].len()) as f64 / 2.0;
            let pct = if mean == 0.0 {
                100.0
            } else {
                groups[i].intersect_count(&groups[j]) as f64 / mean * 100.0
            };
            total += pct;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::BaseLearnerSpec;
    use crate::metalearners::CateStrategy;
    use crate::synth::{simulate, PlantedCell, SyntheticSpec};
    use approx::assert_abs_diff_eq;
    use std::collections::BTreeMap;

    fn cv(name: &str, seed: u64, original: bool) -> PerturbationSpec {
        PerturbationSpec {
            name: name.into(),
            kind: PerturbationKind::RandomCv { seed, original },
        }
    }

    fn synth_data(seed: u64) -> crate::synth::SyntheticData {
        let cell = crate::cellsearch::Cell {
            literals: BTreeMap::from([("x0".to_string(), 1u8), ("x1".to_string(), 1u8)]),
        };
        simulate(&SyntheticSpec {
            n: 240,
            p: 4,
            marginals: vec![0.5; 4],
            cells: vec![PlantedCell { cell, effect: -0.25 }],
            baseline_treated: 0.45,
            baseline_control: 0.5,
            treated_fraction: 0.5,
            seed,
        })
        .unwrap()
    }

    fn t_lasso() -> CateEstimatorSpec {
        CateEstimatorSpec {
            name: "t_lasso".into(),
            strategy: CateStrategy::T {
                base: BaseLearnerSpec::L1Linear { lambda: 0.01 },
            },
        }
    }

    fn s_lasso() -> CateEstimatorSpec {
        CateEstimatorSpec {
            name: "s_lasso".into(),
            strategy: CateStrategy::S {
                base: BaseLearnerSpec::L1Linear { lambda: 0.01 },
            },
        }
    }

    #[test]
    fn perturbation_specs_round_trip_with_kebab_tags() {
        let specs = vec![
            cv("cv_orig", 7, true),
            PerturbationSpec { name: "cv_time".into(), kind: PerturbationKind::TimeCv },
            PerturbationSpec {
                name: "rethreshold".into(),
                kind: PerturbationKind::FeatureRethreshold {
                    source: "age".into(),
                    threshold: 60.0,
                    replaces: "elderly".into(),
                },
            },
            PerturbationSpec {
                name: "alt_outcome".into(),
                kind: PerturbationKind::OutcomeSwap { outcome: "y_all".into() },
            },
        ];
        let json = serde_json::to_string(&specs).unwrap();
        assert!(json.contains("\"kind\":\"random-cv\""));
        assert!(json.contains("\"kind\":\"time-cv\""));
        assert!(json.contains("\"kind\":\"feature-rethreshold\""));
        assert!(json.contains("\"kind\":\"outcome-swap\""));
        let back: Vec<PerturbationSpec> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, specs);
    }

    #[test]
    fn exactly_one_original_is_enforced() {
        assert!(validate_perturbations(&[cv("a", 1, true)]).is_ok());
        assert!(validate_perturbations(&[cv("a", 1, false)]).is_err());
        assert!(validate_perturbations(&[cv("a", 1, true), cv("b", 2, true)]).is_err());
        assert!(validate_perturbations(&[cv("a", 1, true), cv("a", 2, false)]).is_err());
        assert!(validate_perturbations(&[]).is_err());
        assert_eq!(
            original_perturbation(&[cv("a", 1, false), cv("b", 2, true)])
                .unwrap()
                .name,
            "b"
        );
    }

    #[test]
    fn views_swap_outcomes_and_rethreshold_features() {
        let mut data = synth_data(3);
        let alt: Vec<u8> = data
            .dataset
            .outcome("y")
            .unwrap()
            .iter()
            .map(|&v| 1 - v)
            .collect();
        data.dataset.outcomes.insert("y_alt".into(), alt.clone());
        data.dataset
            .aux
            .insert("age".into(), (0..240).map(|i| f64::from(i % 90)).collect());
        let d = &data.dataset;

        let (view, out) = perturbed_view(d, &cv("cv_orig", 7, true), "y").unwrap();
        assert!(matches!(view, Cow::Borrowed(_)));
        assert_eq!(out, "y");

        let swap = PerturbationSpec {
            name: "alt".into(),
            kind: PerturbationKind::OutcomeSwap { outcome: "y_alt".into() },
        };
        let (view, out) = perturbed_view(d, &swap, "y").unwrap();
        assert_eq!(out, "y_alt");
        assert_eq!(view.outcome("y_alt").unwrap(), alt.as_slice());

        let rt = PerturbationSpec {
            name: "older".into(),
            kind: PerturbationKind::FeatureRethreshold {
                source: "age".into(),
                threshold: 60.0,
                replaces: "x2".into(),
            },
        };
        let (view, _) = perturbed_view(d, &rt, "y").unwrap();
        let j = d.feature_index("x2").unwrap();
        for i in 0..d.n() {
            assert_eq!(view.features[j][i], u8::from(d.aux["age"][i] >= 60.0));
        }
        // other columns untouched
        assert_eq!(view.features[0], d.features[0]);

        let missing = PerturbationSpec {
            name: "bad".into(),
            kind: PerturbationKind::OutcomeSwap { outcome: "nope".into() },
        };
        assert!(perturbed_view(d, &missing, "y").is_err());
    }

    #[test]
    fn folds_come_from_the_right_source() {
        let data = synth_data(4);
        let d = &data.dataset;
        let train: Vec<usize> = (0..d.n()).collect();
        let orig = perturbation_folds(d, &cv("cv_orig", 7, true), &train, "y", 4, None).unwrap();
        let other = perturbation_folds(d, &cv("cv_0", 8, false), &train, "y", 4, None).unwrap();
        assert_ne!(orig.fold, other.fold);

        let swap = PerturbationSpec {
            name: "alt".into(),
            kind: PerturbationKind::OutcomeSwap { outcome: "y".into() },
        };
        let reused = perturbation_folds(d, &swap, &train, "y", 4, Some(&orig)).unwrap();
        assert_eq!(reused.fold, orig.fold);
        assert!(perturbation_folds(d, &swap, &train, "y", 4, None).is_err());

        let time = PerturbationSpec { name: "t".into(), kind: PerturbationKind::TimeCv };
        let tf = perturbation_folds(d, &time, &train, "y", 4, None).unwrap();
        // enrollment time is the row index, so blocks are contiguous
        assert!(tf.fold.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn skip_mean_counts_what_it_averages() {
        let (mean, used, skipped) =
            skip_mean([Some(1.0), None, Some(3.0), None, Some(-1.0)].into_iter());
        assert_abs_diff_eq!(mean.unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!((used, skipped), (3, 2));
        let (mean, used, skipped) = skip_mean([None, None].into_iter());
        assert_eq!(mean, None);
        assert_eq!((used, skipped), (0, 2));
    }

    #[test]
    fn perturbation_sweep_fills_the_fold_by_q_grid() {
        let data = synth_data(5);
        let d = &data.dataset;
        let train: Vec<usize> = (0..d.n()).collect();
        let p = cv("cv_orig", 7, true);
        let folds = perturbation_folds(d, &p, &train, "y", 4, None).unwrap();
        let specs = vec![t_lasso(), s_lasso()];
        let q_grid = [0.2, 0.3, 0.4];
        let res = run_perturbation(
            d,
            &p,
            &specs,
            &train,
            &folds,
            "y",
            Direction::Neg,
            &q_grid,
            99,
        )
        .unwrap();
        assert_eq!(res.estimators.len(), 2);
        for (ei, est) in res.estimators.iter().enumerate() {
            assert_eq!(est.cells.len(), 12);
            assert_eq!(est.used + est.skipped, 12);
            assert!(est.t_bar.is_some());
            assert_eq!(res.models[ei].len(), 4);
            assert!(res.models[ei].iter().all(|m| m.is_some()));
            // t_bar recomputes from the cells
            let defined: Vec<f64> = est.cells.iter().filter_map(|c| c.t).collect();
            let mean = defined.iter().sum::<f64>() / defined.len() as f64;
            assert_abs_diff_eq!(est.t_bar.unwrap(), mean, epsilon = 1e-12);
        }

        let rerun = run_perturbation(
            d,
            &p,
            &specs,
            &train,
            &folds,
            "y",
            Direction::Neg,
            &q_grid,
            99,
        )
        .unwrap();
        for (a, b) in res.estimators.iter().zip(&rerun.estimators) {
            assert_eq!(a.cells, b.cells);
            assert_eq!(a.t_bar, b.t_bar);
        }
    }

    #[test]
    fn constant_outcomes_leave_every_cell_missing() {
        let data = synth_data(6);
        let mut d = data.dataset.clone();
        d.outcomes.insert("y".into(), vec![0; d.n()]);
        let train: Vec<usize> = (0..d.n()).collect();
        let p = cv("cv_orig", 7, true);
        let folds = perturbation_folds(&d, &p, &train, "y", 4, None).unwrap();
        let res = run_perturbation(
            &d,
            &p,
            &[t_lasso()],
            &train,
            &folds,
            "y",
            Direction::Neg,
            &[0.2, 0.4],
            1,
        )
        .unwrap();
        let est = &res.estimators[0];
        assert_eq!(est.t_bar, None);
        assert_eq!(est.used, 0);
        assert_eq!(est.skipped, 8);
    }

    fn fake_result(
        pert: &str,
        t_bars: &[(&str, Option<f64>)],
        fingerprint: u64,
    ) -> PerturbationResult {
        PerturbationResult {
            perturbation: pert.into(),
            specs_fingerprint: fingerprint,
            estimators: t_bars
                .iter()
                .map(|(name, t)| EstimatorPerturbationResult {
                    estimator: name.to_string(),
                    cells: Vec::new(),
                    t_bar: *t,
                    used: usize::from(t.is_some()),
                    skipped: usize::from(t.is_none()),
                })
                .collect(),
            models: t_bars.iter().map(|_| Vec::new()).collect(),
        }
    }

    #[test]
    fn ranking_orders_by_direction_with_missing_last() {
        let res = vec![fake_result(
            "p0",
            &[
                ("a", Some(-2.0)),
                ("b", Some(-3.0)),
                ("c", None),
                ("d", Some(-2.0)),
            ],
            1,
        )];
        let table = rank_and_screen(&res, Direction::Neg, 2).unwrap();
        let rank_of = |name: &str| {
            table
                .rows
                .iter()
                .find(|r| r.estimator == name)
                .unwrap()
                .rank[0]
        };
        assert_eq!(rank_of("b"), 1);
        assert_eq!(rank_of("a"), 2); // tie with d broken by name
        assert_eq!(rank_of("d"), 3);
        assert_eq!(rank_of("c"), 4); // missing ranks last
        assert_eq!(table.screened, vec!["a".to_string(), "b".to_string()]);

        let table = rank_and_screen(&res, Direction::Pos, 2).unwrap();
        assert_eq!(
            table.rows.iter().find(|r| r.estimator == "a").unwrap().rank[0],
            1
        );
    }

    #[test]
    fn screening_intersects_per_perturbation_top_k() {
        let res = vec![
            fake_result("p0", &[("a", Some(-3.0)), ("b", Some(-2.0)), ("c", Some(-1.0))], 1),
            fake_result("p1", &[("a", Some(-1.0)), ("b", Some(-3.0)), ("c", Some(-2.0))], 1),
        ];
        // a ranks 1 then 3; b ranks 2 then 1; c ranks 3 then 2
        let table = rank_and_screen(&res, Direction::Neg, 2).unwrap();
        assert_eq!(table.screened, vec!["b".to_string()]);
        let row_b = table.rows.iter().find(|r| r.estimator == "b").unwrap();
        assert_eq!(row_b.worst_rank, 2);
        assert!(row_b.screened);
        // display order is by worst rank
        assert_eq!(table.rows[0].estimator, "b");

        // an estimator missing anywhere cannot be screened even at rank <= k
        let res = vec![fake_result("p0", &[("a", None), ("b", Some(-1.0))], 1)];
        let table = rank_and_screen(&res, Direction::Neg, 2).unwrap();
        assert_eq!(table.screened, vec!["b".to_string()]);

        let res = vec![
            fake_result("p0", &[("a", Some(-3.0)), ("b", Some(-2.0))], 1),
            fake_result("p1", &[("a", Some(-1.0)), ("b", Some(-3.0))], 1),
        ];
        assert!(matches!(
            rank_and_screen(&res, Direction::Neg, 1),
            Err(Error::EmptyScreen(1))
        ));

        let solo = vec![fake_result("p0", &[("only", Some(-1.0))], 1)];
        let table = rank_and_screen(&solo, Direction::Neg, 10).unwrap();
        assert_eq!(table.screened, vec!["only".to_string()]);
    }

    #[test]
    fn lineage_and_estimator_list_mismatches_are_rejected() {
        let res = vec![
            fake_result("p0", &[("a", Some(-1.0))], 1),
            fake_result("p1", &[("a", Some(-1.0))], 2),
        ];
        assert!(rank_and_screen(&res, Direction::Neg, 1).is_err());
        let res = vec![
            fake_result("p0", &[("a", Some(-1.0))], 1),
            fake_result("p1", &[("b", Some(-1.0))], 1),
        ];
        assert!(rank_and_screen(&res, Direction::Neg, 1).is_err());
        let res = vec![
            fake_result("p0", &[("a", Some(-1.0))], 1),
            fake_result("p0", &[("a", Some(-1.0))], 1),
        ];
        assert!(rank_and_screen(&res, Direction::Neg, 1).is_err());
    }

    #[test]
    fn single_member_ensembles_reproduce_the_member() {
        let data = synth_data(8);
        let d = &data.dataset;
        let train: Vec<usize> = (0..d.n()).collect();
        let p = cv("cv_orig", 7, true);
        let folds = perturbation_folds(d, &p, &train, "y", 4, None).unwrap();
        let specs = vec![t_lasso()];
        let res = run_perturbation(
            d, &p, &specs, &train, &folds, "y", Direction::Neg, &[0.3], 42,
        )
        .unwrap();
        let ensembles =
            build_fold_ensembles(&["t_lasso".into()], &[(&res, &folds)], &train).unwrap();
        assert_eq!(ensembles.len(), 4);
        for e in &ensembles {
            let member = res.models[0][e.fold as usize].as_ref().unwrap();
            let a = e.model.predict_rows(d, &e.val_rows).unwrap();
            let b = member.predict_rows(d, &e.val_rows).unwrap();
            assert_eq!(a, b);
            // fold split partitions the training population
            assert_eq!(e.fit_rows.len() + e.val_rows.len(), train.len());
        }

        let stats =
            ensemble_q_stats(d, &ensembles, &train, "y", Direction::Neg, &[0.2, 0.4]).unwrap();
        assert_eq!(stats.len(), 2);
        for s in &stats {
            assert_eq!(s.t_values.len(), 4);
            assert_eq!(s.groups.len(), 4);
            assert_eq!(s.used + s.skipped, 4);
            assert!(s.overlap_pct.unwrap() >= 0.0 && s.overlap_pct.unwrap() <= 100.0);
            for g in &s.groups {
                let frac = g.len() as f64 / train.len() as f64;
                assert!(frac > 0.0 && frac < 1.0, "group fraction {frac}");
            }
        }

        let missing = build_fold_ensembles(&["nope".into()], &[(&res, &folds)], &train);
        assert!(missing.is_err());
    }

    #[test]
    fn overlap_percentages_match_hand_counts() {
        let a = RowSet::from_indices(10, &[0, 1, 2, 3]);
        let b = RowSet::from_indices(10, &[2, 3, 4, 5]);
        let c = RowSet::from_indices(10, &[6, 7]);
        assert_abs_diff_eq!(subgroup_overlap(&[a.clone(), a.clone()]).unwrap(), 100.0);
        assert_abs_diff_eq!(subgroup_overlap(&[a.clone(), c.clone()]).unwrap(), 0.0);
        assert_abs_diff_eq!(subgroup_overlap(&[a.clone(), b.clone()]).unwrap(), 50.0);
        // three groups average the three pairs: 50, 0, 0
        let three = subgroup_overlap(&[a.clone(), b, c]).unwrap();
        assert_abs_diff_eq!(three, 50.0 / 3.0, epsilon = 1e-12);
        assert!(subgroup_overlap(&[a]).is_err());
        let empty = RowSet::empty(10);
        assert_abs_diff_eq!(
            subgroup_overlap(&[empty.clone(), empty]).unwrap(),
            100.0
        );
    }
}
