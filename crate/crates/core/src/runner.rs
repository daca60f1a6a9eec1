//! Staged orchestration of a full analysis run: split, tune, fit across
//! perturbations, calibration reports, rank-and-screen, ensemble cell search,
//! and the single final test-set evaluation. Every stage writes a JSON
//! artifact into the output directory and the run closes with a manifest
//! recording the resolved configuration, all derived seeds, and how often the
//! held-out test outcomes were touched.
//!
//! Failures while loading, splitting, or tuning abort the run. From the fit
//! stage onward a failure degrades instead: it is recorded as a note in the
//! manifest, dependent stages are skipped, and the artifacts produced so far
//! are kept.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::calibration::{
    bin_report, bin_thresholds_from, ordering_indicators, r2c, restricted_r2c, top_vs_complement,
    BinReport, Direction,
};
use crate::cellsearch::{
    cell_overlap_matrix, cell_search, feature_importance, select_features, stabilized_cell_search,
    Cell, CoverRun, StabTable,
};
use crate::config::{base_specs, RunConfig};
use crate::dataset::{load_csv, stratified_test_split, Dataset, FoldAssignment, SplitPlan};
use crate::error::{Error, Result};
use crate::learners::{self, BaseLearnerSpec};
use crate::metalearners::{CateEstimatorSpec, CateModel, CateStrategy};
use crate::neyman::{
    ate_hat, holm_bonferroni, one_sided_p, subgroup_cate_hat, tstat_vs_ate, EffectEstimate, Tail,
};
use crate::pipeline::{
    build_fold_ensembles, ensemble_q_stats, original_perturbation, perturbation_folds,
    rank_and_screen, run_perturbation, EnsembleQStat, PerturbationKind, PerturbationResult,
    RankTable,
};
use crate::rng::{derive_seed, stream};
use crate::synth::simulate;

pub const MANIFEST_VERSION: u32 = 1;

/// Pipeline stages in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Split,
    Tune,
    Fit,
    Calibrate,
    Rank,
    CellSearch,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Split,
        Stage::Tune,
        Stage::Fit,
        Stage::Calibrate,
        Stage::Rank,
        Stage::CellSearch,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Split => "split",
            Stage::Tune => "tune",
            Stage::Fit => "fit",
            Stage::Calibrate => "calibrate",
            Stage::Rank => "rank",
            Stage::CellSearch => "cellsearch",
            Stage::Evaluate => "evaluate",
        }
    }
}

/// Run provenance written alongside the artifacts. The configuration is
/// stored with its output directory redacted so a bundle's bytes do not
/// depend on where it was written.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: RunConfig,
    pub config_fingerprint: u64,
    pub resolved_q_grid: Vec<f64>,
    pub resolved_cellsearch_qs: Vec<f64>,
    /// Seeds derived from the root seed, keyed by stage label.
    pub derived_seeds: BTreeMap<String, u64>,
    pub completed_stages: Vec<String>,
    /// Degradation notes; an empty list means a clean run.
    pub notes: Vec<String>,
    /// How many times this invocation read held-out test outcomes. A full
    /// run reads them exactly once, in the evaluate stage; partial runs not
    /// reaching it report zero.
    pub test_access_count: u32,
}

/// Per-(estimator, fold) calibration summary under the original
/// cross-validation perturbation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub estimator: String,
    pub fold: u8,
    pub collapsed: bool,
    pub r2c_train: Option<f64>,
    pub r2c_val: Option<f64>,
    /// Validation calibration restricted to the two extreme bins on the
    /// effect side of interest.
    pub restricted_val: Option<f64>,
    /// Adjacent bin-ordering checks passed / defined on validation.
    pub adjacent_pass: usize,
    pub adjacent_total: usize,
    pub extreme_ok: Option<bool>,
    /// Top-vs-complement direction checks, one per ranking quantile.
    pub bq: Vec<BqCheck>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BqCheck {
    pub q: f64,
    pub pass: Option<bool>,
}

/// One calibration-curve point: within-bin model mean against the
/// design-based estimate for the same rows.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BinPoint {
    pub estimator: String,
    pub fold: u8,
    pub split: String,
    pub bin: usize,
    pub size: usize,
    pub model_mean: Option<f64>,
    pub neyman_point: Option<f64>,
    pub neyman_std: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub rows: Vec<CalibrationRow>,
    pub bins: Vec<BinPoint>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SubgroupStats {
    pub size: usize,
    pub events: usize,
    pub n_treated: usize,
    pub n_control: usize,
    pub effect: f64,
    pub std: f64,
    /// t statistic of the subgroup effect against the same-split population
    /// average; None for the population row itself.
    pub t: Option<f64>,
}

impl SubgroupStats {
    fn from_estimate(e: &EffectEstimate, t: Option<f64>) -> Self {
        SubgroupStats {
            size: e.size(),
            events: e.events(),
            n_treated: e.n_treated,
            n_control: e.n_control,
            effect: e.point,
            std: e.std,
            t,
        }
    }
}

/// Final per-cell evaluation: training split, held-out test split, and the
/// spread of validation-fold t statistics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellEvalRow {
    /// None marks the whole-population row.
    pub cell: Option<Cell>,
    pub label: String,
    pub stab: Option<f64>,
    pub train: Option<SubgroupStats>,
    pub test: Option<SubgroupStats>,
    pub val_mean_t: Option<f64>,
    pub val_std_t: Option<f64>,
    pub val_contexts: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HolmRow {
    pub label: String,
    pub t: f64,
    pub p: f64,
    pub cutoff: f64,
    pub reject: bool,
}

/// Step-down multiple-testing adjustment over the kept cells' test-set t
/// statistics, sorted by ascending p.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HolmSection {
    pub alpha: f64,
    pub rows: Vec<HolmRow>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellEvaluation {
    pub rows: Vec<CellEvalRow>,
    pub overlap: Vec<Vec<usize>>,
    pub holm: Option<HolmSection>,
}

pub struct Runner {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub d: Dataset,
    pub true_cate: Option<Vec<f64>>,
    pub q_grid: Vec<f64>,
    pub split: Option<SplitPlan>,
    pub tuned: Option<Vec<CateEstimatorSpec>>,
    pub fit_results: Option<Vec<PerturbationResult>>,
    pub calibration: Option<CalibrationReport>,
    pub rank: Option<RankTable>,
    pub ensemble_stats: Option<Vec<EnsembleQStat>>,
    pub covers: Option<Vec<CoverRun>>,
    pub stab: Option<StabTable>,
    pub evaluation: Option<CellEvaluation>,
    pub manifest: Manifest,
}

impl Runner {
    /// Validates the configuration, loads or simulates the dataset, and
    /// prepares the output directory. Nothing is written yet.
    pub fn new(cfg: RunConfig, out: PathBuf) -> Result<Runner> {
        cfg.validate()?;
        let (d, true_cate) = match (&cfg.input, &cfg.synthetic) {
            (Some(input), None) => (load_csv(&input.path, &input.schema)?, None),
            (None, Some(spec)) => {
                let s = simulate(spec)?;
                (s.dataset, Some(s.true_cate))
            }
            _ => unreachable!("validate enforces exactly one data source"),
        };
        d.outcome(&cfg.outcome)?;
        let q_grid = cfg.resolved_q_grid();
        let resolved_cellsearch_qs = cfg.cellsearch.resolved_qs(cfg.direction);
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            config: cfg.redacted(),
            config_fingerprint: cfg.fingerprint(),
            resolved_q_grid: q_grid.clone(),
            resolved_cellsearch_qs,
            derived_seeds: BTreeMap::new(),
            completed_stages: Vec::new(),
            notes: Vec::new(),
            test_access_count: 0,
        };
        Ok(Runner {
            cfg,
            out,
            d,
            true_cate,
            q_grid,
            split: None,
            tuned: None,
            fit_results: None,
            calibration: None,
            rank: None,
            ensemble_stats: None,
            covers: None,
            stab: None,
            evaluation: None,
            manifest,
        })
    }

    fn seed_for(&mut self, label: &str) -> u64 {
        let s = derive_seed(self.cfg.seed, label);
        self.manifest.derived_seeds.insert(label.to_string(), s);
        s
    }

    fn note(&mut self, msg: String) {
        self.manifest.notes.push(msg);
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.out.join(name), text)?;
        Ok(())
    }

    pub fn write_manifest(&self) -> Result<()> {
        self.write_json("manifest.json", &self.manifest)
    }

    /// Runs stages in order through `target`. Returns whether the run
    /// degraded: a stage at or past fitting failed and was recorded as a
    /// note, skipping everything that depends on it. The manifest is always
    /// written.
    pub fn run_to(&mut self, target: Stage) -> Result<bool> {
        fs::create_dir_all(&self.out)?;
        if self.cfg.synthetic.is_some() {
            self.write_synthetic_data()?;
        }
        for stage in Stage::ALL {
            if stage > target {
                break;
            }
            let result = match stage {
                Stage::Split => self.stage_split(),
                Stage::Tune => self.stage_tune(),
                Stage::Fit => self.stage_fit(),
                Stage::Calibrate => self.stage_calibrate(),
                Stage::Rank => self.stage_rank(),
                Stage::CellSearch => self.stage_cellsearch(),
                Stage::Evaluate => self.stage_evaluate(),
            };
            match result {
                Ok(()) => self.manifest.completed_stages.push(stage.name().to_string()),
                Err(e) if stage >= Stage::Fit => {
                    self.note(format!("stage {} failed: {e}", stage.name()));
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        self.write_manifest()?;
        Ok(!self.manifest.notes.is_empty())
    }

    /// Writes the simulated dataset and its true effects so a synthetic run
    /// ships with the data it analyzed.
    pub fn write_synthetic_data(&self) -> Result<()> {
        let d = &self.d;
        let mut csv = String::new();
        for name in &d.feature_names {
            let _ = write!(csv, "{name},");
        }
        csv.push_str("treatment,");
        csv.push_str(&self.cfg.outcome);
        if d.enrollment_time.is_some() {
            csv.push_str(",enrollment_time");
        }
        csv.push('\n');
        let y = d.outcome(&self.cfg.outcome)?;
        for i in 0..d.n() {
            for col in &d.features {
                let _ = write!(csv, "{},", col[i]);
            }
            let _ = write!(csv, "{},{}", d.treatment[i], y[i]);
            if let Some(t) = &d.enrollment_time {
                let _ = write!(csv, ",{}", t[i]);
            }
            csv.push('\n');
        }
        fs::write(self.out.join("synthetic_data.csv"), csv)?;

        if let Some(tc) = &self.true_cate {
            let mut body = String::from("row,true_cate\n");
            for (i, v) in tc.iter().enumerate() {
                let _ = writeln!(body, "{i},{v}");
            }
            fs::write(self.out.join("true_cate.csv"), body)?;
        }
        Ok(())
    }

    fn plan(&self) -> Result<&SplitPlan> {
        self.split
            .as_ref()
            .ok_or_else(|| Error::MissingStage("split".into()))
    }

    fn stage_split(&mut self) -> Result<()> {
        let seed = self.seed_for("split");
        let mut plan = stratified_test_split(&self.d, &self.cfg.outcome, self.cfg.test_fraction, seed)?;
        let original = original_perturbation(&self.cfg.perturbations)?.clone();
        let orig_folds = perturbation_folds(
            &self.d,
            &original,
            &plan.train,
            &self.cfg.outcome,
            self.cfg.folds,
            None,
        )?;
        for p in &self.cfg.perturbations {
            let folds = if p.name == original.name {
                orig_folds.clone()
            } else {
                perturbation_folds(
                    &self.d,
                    p,
                    &plan.train,
                    &self.cfg.outcome,
                    self.cfg.folds,
                    Some(&orig_folds),
                )?
            };
            plan.folds.insert(p.name.clone(), folds);
        }
        self.write_json("split.json", &plan)?;
        self.split = Some(plan);
        Ok(())
    }

    /// Tunes each base-learner family once on the pooled training outcomes
    /// under the original perturbation's folds, then rewrites every matching
    /// base spec across the estimator list.
    fn stage_tune(&mut self) -> Result<()> {
        let tuned = if self.cfg.tuning.is_empty() {
            self.cfg.estimators.clone()
        } else {
            self.tune_families()?
        };
        self.write_json("tuned.json", &tuned)?;
        self.tuned = Some(tuned);
        Ok(())
    }

    fn tune_families(&mut self) -> Result<Vec<CateEstimatorSpec>> {
        let plan = self.plan()?;
        let original = original_perturbation(&self.cfg.perturbations)?;
        let folds = plan.folds[&original.name].clone();
        let train = plan.train.clone();
        let x = self.d.feature_rows(&train);
        let outcome = self.d.outcome(&self.cfg.outcome)?;
        let y: Vec<f64> = train.iter().map(|&i| outcome[i] as f64).collect();

        let mut has_l1 = false;
        let mut has_l2 = false;
        let mut forest_template: Option<BaseLearnerSpec> = None;
        for est in &self.cfg.estimators {
            for base in base_specs(&est.strategy) {
                match base {
                    BaseLearnerSpec::L1Linear { .. } => has_l1 = true,
                    BaseLearnerSpec::L2Logistic { .. } => has_l2 = true,
                    BaseLearnerSpec::RandomForest { .. } => {
                        forest_template.get_or_insert_with(|| base.clone());
                    }
                }
            }
        }

        let tuning = self.cfg.tuning.clone();
        let mut best_l1: Option<f64> = None;
        let mut best_l2: Option<f64> = None;
        let mut best_leaf: Option<usize> = None;

        if !tuning.l1_lambda.is_empty() {
            if has_l1 {
                let grid: Vec<BaseLearnerSpec> = tuning
                    .l1_lambda
                    .iter()
                    .map(|&lambda| BaseLearnerSpec::L1Linear { lambda })
                    .collect();
                let seed = self.seed_for("tune/l1-linear");
                if let BaseLearnerSpec::L1Linear { lambda } =
                    learners::tune(&grid, &x, &y, None, &folds, seed)?
                {
                    best_l1 = Some(lambda);
                }
            } else {
                self.note("l1_lambda grid ignored: no estimator uses an l1-linear base".into());
            }
        }
        if !tuning.l2_lambda.is_empty() {
            if has_l2 {
                let grid: Vec<BaseLearnerSpec> = tuning
                    .l2_lambda
                    .iter()
                    .map(|&lambda| BaseLearnerSpec::L2Logistic { lambda })
                    .collect();
                let seed = self.seed_for("tune/l2-logistic");
                if let BaseLearnerSpec::L2Logistic { lambda } =
                    learners::tune(&grid, &x, &y, None, &folds, seed)?
                {
                    best_l2 = Some(lambda);
                }
            } else {
                self.note("l2_lambda grid ignored: no estimator uses an l2-logistic base".into());
            }
        }
        if !tuning.forest_min_leaf.is_empty() {
            if let Some(BaseLearnerSpec::RandomForest {
                n_trees,
                max_depth,
                bootstrap,
                ..
            }) = forest_template
            {
                let grid: Vec<BaseLearnerSpec> = tuning
                    .forest_min_leaf
                    .iter()
                    .map(|&min_samples_leaf| BaseLearnerSpec::RandomForest {
                        n_trees,
                        min_samples_leaf,
                        max_depth,
                        bootstrap,
                    })
                    .collect();
                let seed = self.seed_for("tune/random-forest");
                if let BaseLearnerSpec::RandomForest {
                    min_samples_leaf, ..
                } = learners::tune(&grid, &x, &y, None, &folds, seed)?
                {
                    best_leaf = Some(min_samples_leaf);
                }
            } else {
                self.note("forest_min_leaf grid ignored: no estimator uses a forest base".into());
            }
        }

        let retune = |b: &BaseLearnerSpec| -> BaseLearnerSpec {
            match (b, best_l1, best_l2, best_leaf) {
                (BaseLearnerSpec::L1Linear { .. }, Some(lambda), _, _) => {
                    BaseLearnerSpec::L1Linear { lambda }
                }
                (BaseLearnerSpec::L2Logistic { .. }, _, Some(lambda), _) => {
                    BaseLearnerSpec::L2Logistic { lambda }
                }
                (
                    BaseLearnerSpec::RandomForest {
                        n_trees,
                        max_depth,
                        bootstrap,
                        ..
                    },
                    _,
                    _,
                    Some(min_samples_leaf),
                ) => BaseLearnerSpec::RandomForest {
                    n_trees: *n_trees,
                    min_samples_leaf,
                    max_depth: *max_depth,
                    bootstrap: *bootstrap,
                },
                _ => b.clone(),
            }
        };
        Ok(self
            .cfg
            .estimators
            .iter()
            .map(|est| CateEstimatorSpec {
                name: est.name.clone(),
                strategy: map_bases(&est.strategy, &retune),
            })
            .collect())
    }

    fn stage_fit(&mut self) -> Result<()> {
        let specs = self
            .tuned
            .clone()
            .ok_or_else(|| Error::MissingStage("tune".into()))?;
        let original_name = original_perturbation(&self.cfg.perturbations)?.name.clone();
        let perts = self.cfg.perturbations.clone();
        let mut results = Vec::new();
        for p in &perts {
            let folds = self.plan()?.folds[&p.name].clone();
            let train = self.plan()?.train.clone();
            let seed = self.seed_for(&format!("fit/{}", p.name));
            match run_perturbation(
                &self.d,
                p,
                &specs,
                &train,
                &folds,
                &self.cfg.outcome,
                self.cfg.direction,
                &self.q_grid,
                seed,
            ) {
                Ok(r) => results.push(r),
                Err(e) => self.note(format!("perturbation `{}` skipped: {e}", p.name)),
            }
        }
        if !results.iter().any(|r| r.perturbation == original_name) {
            return Err(Error::MissingStage(
                "original perturbation failed to fit".into(),
            ));
        }
        self.write_json("perturbations.json", &results)?;
        self.fit_results = Some(results);
        Ok(())
    }

    /// Calibration on the original perturbation only: thresholds come from
    /// fit-fold predictions and are reused on the validation fold, so the
    /// two reports share a binning.
    fn stage_calibrate(&mut self) -> Result<()> {
        let original_name = original_perturbation(&self.cfg.perturbations)?.name.clone();
        let results = self
            .fit_results
            .as_ref()
            .ok_or_else(|| Error::MissingStage("fit".into()))?;
        let orig = results
            .iter()
            .find(|r| r.perturbation == original_name)
            .ok_or_else(|| Error::MissingStage("original perturbation results".into()))?;
        let estimators = orig.estimators.clone();
        let plan = self.plan()?;
        let folds = plan.folds[&original_name].clone();
        let train = plan.train.clone();

        let mut report = CalibrationReport::default();
        let mut notes = Vec::new();
        for (ei, est) in estimators.iter().enumerate() {
            let name = &est.estimator;
            for f in 0..folds.k as u8 {
                let Some(model) = orig.models[ei][f as usize].as_ref() else {
                    notes.push(format!("calibration skipped for {name} fold {f}: no model"));
                    continue;
                };
                let (val, fit_rows) = folds.split(&train, f);
                match self.calibrate_one(model, name, f, &fit_rows, &val) {
                    Ok((row, points)) => {
                        report.rows.push(row);
                        report.bins.extend(points);
                    }
                    Err(e) => notes.push(format!("calibration failed for {name} fold {f}: {e}")),
                }
            }
        }
        for n in notes {
            self.note(n);
        }
        self.write_json("calibration.json", &report)?;
        self.calibration = Some(report);
        Ok(())
    }

    fn calibrate_one(
        &self,
        model: &CateModel,
        estimator: &str,
        fold: u8,
        fit_rows: &[usize],
        val: &[usize],
    ) -> Result<(CalibrationRow, Vec<BinPoint>)> {
        let d = &self.d;
        let outcome = &self.cfg.outcome;
        let direction = self.cfg.direction;

        let fit_preds = model.predict_rows(d, fit_rows)?;
        let binning = bin_thresholds_from(&fit_preds, &self.cfg.quantile_grid)?;
        let k = binning.k();

        let fit_labels = binning.assign(&fit_preds);
        let fit_report = bin_report(d, fit_rows, &fit_labels, &fit_preds, k, outcome)?;
        let fit_ate = ate_hat(d, fit_rows, outcome)?.point;
        let r2c_train = r2c(&fit_report, fit_ate).ok();

        let val_preds = model.predict_rows(d, val)?;
        let val_labels = binning.assign(&val_preds);
        let val_report = bin_report(d, val, &val_labels, &val_preds, k, outcome)?;
        let val_ate = ate_hat(d, val, outcome)?.point;
        let r2c_val = r2c(&val_report, val_ate).ok();

        let restricted_bins: Vec<usize> = match direction {
            Direction::Neg => vec![0, 1.min(k - 1)],
            Direction::Pos => vec![k.saturating_sub(2), k - 1],
        };
        let restricted_val = restricted_r2c(&val_report, val_ate, Some(&restricted_bins)).ok();

        let (adjacent_pass, adjacent_total, extreme_ok) =
            match ordering_indicators(&val_report, direction) {
                Ok(ord) => {
                    let defined: Vec<bool> = ord.adjacent.iter().flatten().copied().collect();
                    let pass = defined.iter().filter(|&&b| b).count();
                    (pass, defined.len(), ord.extreme)
                }
                Err(_) => (0, 0, None),
            };

        let bq = self
            .q_grid
            .iter()
            .map(|&q| BqCheck {
                q,
                pass: top_vs_complement(d, model, fit_rows, val, q, direction, outcome)
                    .ok()
                    .flatten(),
            })
            .collect();

        let mut points = Vec::new();
        let mut push_points = |split: &str, rep: &BinReport| {
            for row in &rep.rows {
                points.push(BinPoint {
                    estimator: estimator.to_string(),
                    fold,
                    split: split.to_string(),
                    bin: row.bin,
                    size: row.size,
                    model_mean: row.model_mean,
                    neyman_point: row.neyman.as_ref().map(|e| e.point),
                    neyman_std: row.neyman.as_ref().map(|e| e.std),
                });
            }
        };
        push_points("train", &fit_report);
        push_points("val", &val_report);

        Ok((
            CalibrationRow {
                estimator: estimator.to_string(),
                fold,
                collapsed: model.collapsed,
                r2c_train,
                r2c_val,
                restricted_val,
                adjacent_pass,
                adjacent_total,
                extreme_ok,
                bq,
            },
            points,
        ))
    }

    fn stage_rank(&mut self) -> Result<()> {
        let results = self
            .fit_results
            .as_ref()
            .ok_or_else(|| Error::MissingStage("fit".into()))?;
        let table = rank_and_screen(results, self.cfg.direction, self.cfg.top_k)?;
        self.write_json("rank.json", &table)?;
        self.rank = Some(table);
        Ok(())
    }

    /// Random-cv contexts whose fits are available, paired with their folds.
    fn random_cv_contexts<'a>(
        &'a self,
        results: &'a [PerturbationResult],
        plan: &'a SplitPlan,
    ) -> Vec<(&'a PerturbationResult, &'a FoldAssignment)> {
        self.cfg
            .perturbations
            .iter()
            .filter(|p| matches!(p.kind, PerturbationKind::RandomCv { .. }))
            .filter_map(|p| {
                let r = results.iter().find(|r| r.perturbation == p.name)?;
                let folds = plan.folds.get(&p.name)?;
                Some((r, folds))
            })
            .collect()
    }

    fn stage_cellsearch(&mut self) -> Result<()> {
        let rank = self
            .rank
            .as_ref()
            .ok_or_else(|| Error::MissingStage("rank".into()))?;
        let screened = rank.screened.clone();
        let results = self
            .fit_results
            .take()
            .ok_or_else(|| Error::MissingStage("fit".into()))?;
        let plan_clone;
        let (ensembles, stats, cs_stats) = {
            let plan = self.plan()?;
            plan_clone = plan.clone();
            let contexts = self.random_cv_contexts(&results, &plan_clone);
            if contexts.is_empty() {
                self.fit_results = Some(results);
                return Err(Error::InvalidConfig(
                    "no random-cv perturbation available for ensembling".into(),
                ));
            }
            let ensembles = build_fold_ensembles(&screened, &contexts, &plan_clone.train)?;
            let stats = ensemble_q_stats(
                &self.d,
                &ensembles,
                &plan_clone.train,
                &self.cfg.outcome,
                self.cfg.direction,
                &self.q_grid,
            )?;
            let qs = self.cfg.cellsearch.resolved_qs(self.cfg.direction);
            let cs_stats = ensemble_q_stats(
                &self.d,
                &ensembles,
                &plan_clone.train,
                &self.cfg.outcome,
                self.cfg.direction,
                &qs,
            )?;
            (ensembles, stats, cs_stats)
        };
        self.fit_results = Some(results);
        self.write_json("ensemble.json", &stats)?;
        self.ensemble_stats = Some(stats);

        let cs = self.cfg.cellsearch.clone();
        let cs_seed = self.seed_for("cellsearch");
        let train = plan_clone.train;
        let mut runs = Vec::new();
        for stat in &cs_stats {
            for (ci, e) in ensembles.iter().enumerate() {
                let top = &stat.groups[ci];
                if top.is_empty() || top.len() == train.len() {
                    self.note(format!(
                        "cell search skipped for {}/fold{} at q={}: degenerate top subgroup",
                        e.perturbation, e.fold, stat.q
                    ));
                    continue;
                }
                let (difference, classifier) = match feature_importance(&self.d, &train, top) {
                    Ok(pair) => pair,
                    Err(err) => {
                        self.note(format!(
                            "feature importance failed for {}/fold{} at q={}: {err}",
                            e.perturbation, e.fold, stat.q
                        ));
                        continue;
                    }
                };
                let features =
                    select_features(&difference, &classifier, cs.top_features, cs.feature_cap);
                for rep in 0..cs.repetitions {
                    let label =
                        format!("{}/fold{}/q{}/rep{}", e.perturbation, e.fold, stat.q, rep);
                    let mut rng = stream(cs_seed, &label);
                    match cell_search(
                        &self.d,
                        &train,
                        top,
                        &features,
                        cs.m,
                        cs.max_iter,
                        cs.band_frac,
                        &mut rng,
                        label.clone(),
                    ) {
                        Ok(run) => runs.push(run),
                        Err(err) => self.note(format!("cell search failed for {label}: {err}")),
                    }
                }
            }
        }
        self.write_json("covers.json", &runs)?;
        if runs.is_empty() {
            self.note("cell search produced no cover runs".into());
            self.covers = Some(runs);
            return Ok(());
        }
        let stab = stabilized_cell_search(&runs, &self.d, &train, cs.stab_threshold)?;
        self.write_json("stab.json", &stab)?;
        self.covers = Some(runs);
        self.stab = Some(stab);
        Ok(())
    }

    /// The only stage that reads held-out test outcomes; it bumps the
    /// access counter exactly once.
    fn stage_evaluate(&mut self) -> Result<()> {
        let plan = self.plan()?.clone();
        let d = &self.d;
        let outcome = self.cfg.outcome.clone();
        let direction = self.cfg.direction;

        let kept: Vec<(Cell, f64)> = self
            .stab
            .as_ref()
            .map(|t| {
                t.rows
                    .iter()
                    .filter(|r| r.stab >= t.threshold)
                    .map(|r| (r.cell.clone(), r.stab))
                    .collect()
            })
            .unwrap_or_default();

        // Validation contexts mirror the mining contexts: every random-cv
        // perturbation's folds, whether or not its fits survived.
        let val_sets: Vec<Vec<usize>> = self
            .cfg
            .perturbations
            .iter()
            .filter(|p| matches!(p.kind, PerturbationKind::RandomCv { .. }))
            .filter_map(|p| plan.folds.get(&p.name))
            .flat_map(|folds| (0..folds.k as u8).map(|f| folds.split(&plan.train, f).0))
            .collect();

        self.manifest.test_access_count += 1;
        let mut rows = Vec::new();
        let train_all = ate_hat(d, &plan.train, &outcome)?;
        let test_all = ate_hat(d, &plan.test, &outcome)?;
        rows.push(CellEvalRow {
            cell: None,
            label: "All".to_string(),
            stab: None,
            train: Some(SubgroupStats::from_estimate(&train_all, None)),
            test: Some(SubgroupStats::from_estimate(&test_all, None)),
            val_mean_t: None,
            val_std_t: None,
            val_contexts: 0,
        });

        let mut notes = Vec::new();
        for (cell, stab) in &kept {
            let members = cell.members(d)?;
            let label = cell.to_string();

            let train = match subgroup_cate_hat(d, &plan.train, &members, &outcome) {
                Ok(e) => {
                    let t = tstat_vs_ate(d, &plan.train, &members, &outcome)
                        .ok()
                        .and_then(|e| e.t_stat);
                    Some(SubgroupStats::from_estimate(&e, t))
                }
                Err(err) => {
                    notes.push(format!("train stats unavailable for {label}: {err}"));
                    None
                }
            };
            let test = match subgroup_cate_hat(d, &plan.test, &members, &outcome) {
                Ok(e) => {
                    let t = tstat_vs_ate(d, &plan.test, &members, &outcome)
                        .ok()
                        .and_then(|e| e.t_stat);
                    Some(SubgroupStats::from_estimate(&e, t))
                }
                Err(err) => {
                    notes.push(format!("test stats unavailable for {label}: {err}"));
                    None
                }
            };

            let val_ts: Vec<f64> = val_sets
                .iter()
                .filter_map(|val| {
                    tstat_vs_ate(d, val, &members, &outcome)
                        .ok()
                        .and_then(|e| e.t_stat)
                })
                .collect();
            let val_mean_t = if val_ts.is_empty() {
                None
            } else {
                Some(val_ts.iter().sum::<f64>() / val_ts.len() as f64)
            };
            let val_std_t = if val_ts.len() > 1 {
                let m = val_mean_t.unwrap();
                Some(
                    (val_ts.iter().map(|t| (t - m).powi(2)).sum::<f64>()
                        / (val_ts.len() - 1) as f64)
                        .sqrt(),
                )
            } else {
                None
            };

            rows.push(CellEvalRow {
                cell: Some(cell.clone()),
                label,
                stab: Some(*stab),
                train,
                test,
                val_mean_t,
                val_std_t,
                val_contexts: val_ts.len(),
            });
        }
        let kept_cells: Vec<Cell> = kept.iter().map(|(c, _)| c.clone()).collect();
        let overlap = if kept_cells.is_empty() {
            Vec::new()
        } else {
            cell_overlap_matrix(&kept_cells, d, &plan.train)?
        };
        for n in notes {
            self.note(n);
        }

        let holm = if self.cfg.report_pvalues {
            Some(holm_section(&rows, direction, 0.05))
        } else {
            None
        };

        let evaluation = CellEvaluation {
            rows,
            overlap,
            holm,
        };
        self.write_json("evaluation.json", &evaluation)?;
        self.evaluation = Some(evaluation);
        Ok(())
    }
}

/// Applies `f` to every base-learner spec inside a strategy.
fn map_bases(
    s: &CateStrategy,
    f: &impl Fn(&BaseLearnerSpec) -> BaseLearnerSpec,
) -> CateStrategy {
    match s {
        CateStrategy::S { base } => CateStrategy::S { base: f(base) },
        CateStrategy::T { base } => CateStrategy::T { base: f(base) },
        CateStrategy::X {
            first_stage,
            second_stage,
        } => CateStrategy::X {
            first_stage: f(first_stage),
            second_stage: f(second_stage),
        },
        CateStrategy::R { nuisance, effect } => CateStrategy::R {
            nuisance: f(nuisance),
            effect: f(effect),
        },
        CateStrategy::ExternalPlugin { path } => {
            CateStrategy::ExternalPlugin { path: path.clone() }
        }
    }
}

/// One-sided p-values for the kept cells' test-set t statistics with a
/// step-down familywise adjustment. Rows come back sorted by ascending p;
/// the cutoff column shows the level each sorted p was compared against.
fn holm_section(rows: &[CellEvalRow], direction: Direction, alpha: f64) -> HolmSection {
    let tail = match direction {
        Direction::Neg => Tail::Left,
        Direction::Pos => Tail::Right,
    };
    let entries: Vec<(String, f64, f64)> = rows
        .iter()
        .filter(|r| r.cell.is_some())
        .filter_map(|r| {
            let t = r.test.as_ref().and_then(|s| s.t)?;
            Some((r.label.clone(), t, one_sided_p(t, tail)))
        })
        .collect();
    let ps: Vec<f64> = entries.iter().map(|(_, _, p)| *p).collect();
    let reject = holm_bonferroni(&ps, alpha);
    let m = entries.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| ps[a].total_cmp(&ps[b]));
    let rows = order
        .iter()
        .enumerate()
        .map(|(pos, &i)| HolmRow {
            label: entries[i].0.clone(),
            t: entries[i].1,
            p: entries[i].2,
            cutoff: alpha / (m - pos) as f64,
            reject: reject[i],
        })
        .collect();
    HolmSection { alpha, rows }
}

/// Small synthetic configuration used across the crate's tests.
#[cfg(test)]
pub(crate) fn demo_config() -> RunConfig {
    let toml = r#"
outcome = "y"
direction = "neg"
seed = 11
folds = 3
top_k = 2

[synthetic]
n = 600
p = 6
marginals = [0.5, 0.4, 0.3, 0.5, 0.2, 0.6]
baseline_treated = 0.12
baseline_control = 0.3
treated_fraction = 0.5
seed = 5

[[synthetic.cells]]
effect = -0.1
[synthetic.cells.cell]
x1 = 1

[[estimators]]
name = "t_lasso"
strategy = "t"
base = { family = "l1-linear", lambda = 0.01 }

[[estimators]]
name = "s_logistic"
strategy = "s"
base = { family = "l2-logistic", lambda = 0.1 }

[[perturbations]]
name = "cv_orig"
kind = "random-cv"
seed = 3
original = true

[[perturbations]]
name = "cv_alt"
kind = "random-cv"
seed = 9

[cellsearch]
m = 2
max_iter = 2
repetitions = 2
top_features = 4
feature_cap = 6
"#;
    toml::from_str(toml).expect("test config parses")
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn synthetic_config() -> RunConfig {
        demo_config()
    }

    #[test]
    fn full_run_completes_all_stages() {
        let dir = TempDir::new().unwrap();
        let cfg = synthetic_config();
        let mut runner = Runner::new(cfg, dir.path().to_path_buf()).unwrap();
        runner.run_to(Stage::Evaluate).unwrap();
        assert_eq!(runner.manifest.completed_stages.len(), 7);
        assert_eq!(runner.manifest.test_access_count, 1);
        for name in [
            "split.json",
            "tuned.json",
            "perturbations.json",
            "calibration.json",
            "rank.json",
            "ensemble.json",
            "covers.json",
            "evaluation.json",
            "manifest.json",
            "synthetic_data.csv",
            "true_cate.csv",
        ] {
            assert!(dir.path().join(name).exists(), "missing {name}");
        }
        let eval = runner.evaluation.as_ref().unwrap();
        assert_eq!(eval.rows[0].label, "All");
        assert!(eval.rows[0].test.is_some());
    }

    #[test]
    fn partial_run_never_touches_test_outcomes() {
        let dir = TempDir::new().unwrap();
        let cfg = synthetic_config();
        let mut runner = Runner::new(cfg, dir.path().to_path_buf()).unwrap();
        runner.run_to(Stage::Rank).unwrap();
        assert_eq!(runner.manifest.test_access_count, 0);
        assert!(runner.evaluation.is_none());
        assert!(!dir.path().join("evaluation.json").exists());
    }

    #[test]
    fn tuning_rewrites_matching_base_specs() {
        let dir = TempDir::new().unwrap();
        let mut cfg = synthetic_config();
        cfg.tuning.l1_lambda = vec![0.001, 0.05];
        let mut runner = Runner::new(cfg, dir.path().to_path_buf()).unwrap();
        runner.run_to(Stage::Tune).unwrap();
        let tuned = runner.tuned.as_ref().unwrap();
        let CateStrategy::T { base } = &tuned[0].strategy else {
            panic!("expected t strategy");
        };
        let BaseLearnerSpec::L1Linear { lambda } = base else {
            panic!("expected l1 base");
        };
        assert!(
            *lambda == 0.001 || *lambda == 0.05,
            "tuned lambda must come from the grid"
        );
        // The logistic estimator's base is untouched: no l2 grid was given.
        let CateStrategy::S { base } = &tuned[1].strategy else {
            panic!("expected s strategy");
        };
        assert_eq!(*base, BaseLearnerSpec::L2Logistic { lambda: 0.1 });
    }

    #[test]
    fn rerun_into_fresh_dir_is_byte_identical() {
        let a = TempDir::new().unwrap();
        let b = TempDir::new().unwrap();
        for dir in [&a, &b] {
            let mut runner = Runner::new(synthetic_config(), dir.path().to_path_buf()).unwrap();
            runner.run_to(Stage::Evaluate).unwrap();
        }
        let mut names: Vec<String> = fs::read_dir(a.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert!(!names.is_empty());
        for name in names {
            let left = fs::read(a.path().join(&name)).unwrap();
            let right = fs::read(b.path().join(&name)).unwrap();
            assert_eq!(left, right, "artifact {name} differs between reruns");
        }
    }

    #[test]
    fn holm_section_orders_by_p_and_caps_cutoffs() {
        let stats = |t: f64| SubgroupStats {
            size: 50,
            events: 5,
            n_treated: 25,
            n_control: 25,
            effect: -0.1,
            std: 0.05,
            t: Some(t),
        };
        let row = |label: &str, t: f64| CellEvalRow {
            cell: Some(Cell::new([("x0".to_string(), 1)].into_iter().collect()).unwrap()),
            label: label.to_string(),
            stab: Some(1.0),
            train: None,
            test: Some(stats(t)),
            val_mean_t: None,
            val_std_t: None,
            val_contexts: 0,
        };
        let rows = vec![row("a", -1.0), row("b", -3.0), row("c", -2.0)];
        let section = holm_section(&rows, Direction::Neg, 0.05);
        assert_eq!(section.rows.len(), 3);
        let labels: Vec<&str> = section.rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, ["b", "c", "a"], "sorted by ascending p");
        assert!((section.rows[0].cutoff - 0.05 / 3.0).abs() < 1e-15);
        assert!((section.rows[2].cutoff - 0.05).abs() < 1e-15);
        assert!(section.rows[0].reject, "t = -3 clears the strictest cutoff");
    }
}
