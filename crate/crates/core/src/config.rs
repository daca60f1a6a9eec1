//! Run configuration: input source, analysis direction, grids, estimator and
//! perturbation lists, tuning grids, and cell-search parameters. Loads from
//! TOML or its JSON mirror; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibration::Direction;
use crate::dataset::CsvSchema;
use crate::error::{Error, Result};
use crate::learners::BaseLearnerSpec;
use crate::metalearners::{CateEstimatorSpec, CateStrategy};
use crate::pipeline::{validate_perturbations, PerturbationSpec};
use crate::rng::Fingerprint;
use crate::synth::SyntheticSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    pub path: PathBuf,
    pub schema: CsvSchema,
}

/// Hyperparameter grids searched once under the original perturbation's
/// folds. An empty grid keeps the configured value for that family.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuningConfig {
    pub l1_lambda: Vec<f64>,
    pub l2_lambda: Vec<f64>,
    pub forest_min_leaf: Vec<usize>,
}

impl TuningConfig {
    pub fn is_empty(&self) -> bool {
        self.l1_lambda.is_empty() && self.l2_lambda.is_empty() && self.forest_min_leaf.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CellSearchConfig {
    /// Maximum literals per cell.
    pub m: usize,
    /// Maximum cells per cover run.
    pub max_iter: usize,
    /// Randomized repetitions per (perturbation, fold, q) context.
    pub repetitions: usize,
    pub stab_threshold: f64,
    /// Quantiles defining the top subgroups mined for cells; None picks a
    /// direction default.
    pub qs: Option<Vec<f64>>,
    /// Features taken per importance measure before the union cap.
    pub top_features: usize,
    pub feature_cap: usize,
    /// Candidate band width as a fraction of the residual top-subgroup size.
    pub band_frac: f64,
}

impl Default for CellSearchConfig {
    fn default() -> Self {
        CellSearchConfig {
            m: 3,
            max_iter: 3,
            repetitions: 5,
            stab_threshold: 1.0 / 3.0,
            qs: None,
            top_features: 8,
            feature_cap: 10,
            band_frac: 0.05,
        }
    }
}

impl CellSearchConfig {
    pub fn resolved_qs(&self, direction: Direction) -> Vec<f64> {
        self.qs.clone().unwrap_or_else(|| match direction {
            Direction::Neg => vec![0.2, 0.3],
            Direction::Pos => vec![0.7, 0.8],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// CSV input; exactly one of `input` and `synthetic` must be set.
    #[serde(default)]
    pub input: Option<InputConfig>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    pub outcome: String,
    pub direction: Direction,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Output directory; not part of the run identity and redacted from the
    /// manifest so bundles stay byte-identical across locations.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_folds")]
    pub folds: usize,
    /// Quantiles for ranking top subgroups; None picks a direction default.
    #[serde(default)]
    pub q_grid: Option<Vec<f64>>,
    /// Quantile grid defining the K-bin calibration report.
    #[serde(default = "default_quantile_grid")]
    pub quantile_grid: Vec<f64>,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    pub estimators: Vec<CateEstimatorSpec>,
    pub perturbations: Vec<PerturbationSpec>,
    #[serde(default)]
    pub tuning: TuningConfig,
    #[serde(default)]
    pub cellsearch: CellSearchConfig,
    /// Emit the multiple-testing section of the cell report.
    #[serde(default)]
    pub report_pvalues: bool,
}

fn default_seed() -> u64 {
    17
}
fn default_test_fraction() -> f64 {
    0.2
}
fn default_folds() -> usize {
    4
}
fn default_quantile_grid() -> Vec<f64> {
    vec![0.2, 0.4, 0.6, 0.8]
}
fn default_top_k() -> usize {
    10
}

pub(crate) fn base_specs(strategy: &CateStrategy) -> Vec<&BaseLearnerSpec> {
    match strategy {
        CateStrategy::S { base } | CateStrategy::T { base } => vec![base],
        CateStrategy::X {
            first_stage,
            second_stage,
        } => vec![first_stage, second_stage],
        CateStrategy::R { nuisance, effect } => vec![nuisance, effect],
        CateStrategy::ExternalPlugin { .. } => Vec::new(),
    }
}

fn check_quantiles(name: &str, qs: &[f64]) -> Result<()> {
    if qs.is_empty() {
        return Err(Error::InvalidConfig(format!("{name} must not be empty")));
    }
    if qs.iter().any(|q| !(*q > 0.0 && *q < 1.0)) {
        return Err(Error::InvalidConfig(format!(
            "{name} entries must lie strictly inside (0, 1)"
        )));
    }
    if qs.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidConfig(format!("{name} must be nondecreasing")));
    }
    Ok(())
}

impl RunConfig {
    pub fn resolved_q_grid(&self) -> Vec<f64> {
        self.q_grid.clone().unwrap_or_else(|| match self.direction {
            Direction::Neg => vec![0.1, 0.2, 0.3, 0.4, 0.5],
            Direction::Pos => vec![0.5, 0.6, 0.7, 0.8, 0.9],
        })
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.input, &self.synthetic) {
            (Some(_), Some(_)) => {
                return Err(Error::InvalidConfig(
                    "configure either `input` or `synthetic`, not both".into(),
                ))
            }
            (None, None) => {
                return Err(Error::InvalidConfig(
                    "no data source: set `input` or `synthetic`".into(),
                ))
            }
            _ => {}
        }
        if self.outcome.is_empty() {
            return Err(Error::InvalidConfig("outcome name must not be empty".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::InvalidConfig("estimator list must not be empty".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for est in &self.estimators {
            if est.name.is_empty() {
                return Err(Error::InvalidConfig("estimator name must not be empty".into()));
            }
            if !names.insert(est.name.as_str()) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate estimator name `{}`",
                    est.name
                )));
            }
            for base in base_specs(&est.strategy) {
                base.validate()?;
            }
        }
        validate_perturbations(&self.perturbations)?;
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "test fraction {} outside (0, 1)",
                self.test_fraction
            )));
        }
        if self.folds < 2 {
            return Err(Error::InvalidConfig(format!("fold count {} < 2", self.folds)));
        }
        if self.top_k == 0 {
            return Err(Error::InvalidConfig("top_k must be at least 1".into()));
        }
        check_quantiles("q_grid", &self.resolved_q_grid())?;
        check_quantiles("quantile_grid", &self.quantile_grid)?;
        check_quantiles(
            "cellsearch.qs",
            &self.cellsearch.resolved_qs(self.direction),
        )?;
        let cs = &self.cellsearch;
        if cs.m < 1 || cs.max_iter < 1 || cs.repetitions < 1 || cs.top_features < 1 || cs.feature_cap < 1
        {
            return Err(Error::InvalidConfig(
                "cellsearch counts must all be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&cs.stab_threshold) {
            return Err(Error::InvalidConfig(
                "stability threshold must lie in [0, 1]".into(),
            ));
        }
        if !cs.band_frac.is_finite() || cs.band_frac < 0.0 {
            return Err(Error::InvalidConfig(
                "band fraction must be finite and nonnegative".into(),
            ));
        }
        for grid in [&self.tuning.l1_lambda, &self.tuning.l2_lambda] {
            if grid.iter().any(|l| !l.is_finite() || *l < 0.0) {
                return Err(Error::InvalidConfig(
                    "tuning penalties must be finite and nonnegative".into(),
                ));
            }
        }
        if self.tuning.forest_min_leaf.iter().any(|&l| l == 0) {
            return Err(Error::InvalidConfig(
                "tuned leaf sizes must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Parse by extension: `.json` is the JSON mirror, anything else is TOML.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            Ok(serde_json::from_str(&text)?)
        } else {
            Ok(toml::from_str(&text)?)
        }
    }

    /// Copy with location-dependent fields cleared, for manifests and
    /// fingerprints.
    pub fn redacted(&self) -> RunConfig {
        let mut c = self.clone();
        c.out_dir = None;
        c
    }

    /// Stable hash of the run identity (everything but the output location).
    pub fn fingerprint(&self) -> u64 {
        let json = serde_json::to_string(&self.redacted()).expect("config serializes");
        let mut fp = Fingerprint::new();
        fp.write(json.as_bytes());
        fp.finish()
    }
}
