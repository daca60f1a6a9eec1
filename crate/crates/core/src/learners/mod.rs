//! Supervised base learners behind one fit/predict interface.
//!
//! Three built-in families: lasso regression, L2-regularized logistic
//! regression, and a random forest over binary features. Binary outcomes are
//! fit as real-valued targets, so every family can serve as a regression
//! stage inside an effect estimator. Hyperparameters are chosen by
//! [`tune`], which minimizes mean out-of-fold squared error on a grid.

mod forest;
mod lasso;
mod logistic;

pub use forest::{Node, Tree};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::FoldAssignment;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Fingerprint};

/// Version tag written into serialized model files.
pub const MODEL_FORMAT_VERSION: u32 = 1;

fn default_bootstrap() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum BaseLearnerSpec {
    L1Linear {
        lambda: f64,
    },
    L2Logistic {
        lambda: f64,
    },
    RandomForest {
        n_trees: usize,
        min_samples_leaf: usize,
        #[serde(default)]
        max_depth: Option<usize>,
        #[serde(default = "default_bootstrap")]
        bootstrap: bool,
    },
}

impl BaseLearnerSpec {
    pub fn family(&self) -> &'static str {
        match self {
            BaseLearnerSpec::L1Linear { .. } => "l1-linear",
            BaseLearnerSpec::L2Logistic { .. } => "l2-logistic",
            BaseLearnerSpec::RandomForest { .. } => "random-forest",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            BaseLearnerSpec::L1Linear { lambda } | BaseLearnerSpec::L2Logistic { lambda } => {
                if !lambda.is_finite() || lambda < 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "regularization strength must be finite and nonnegative, got {lambda}"
                    )));
                }
            }
            BaseLearnerSpec::RandomForest {
                n_trees,
                min_samples_leaf,
                ..
            } => {
                if n_trees < 1 {
                    return Err(Error::InvalidConfig("forest needs at least one tree".into()));
                }
                if min_samples_leaf < 1 {
                    return Err(Error::InvalidConfig(
                        "min samples per leaf must be at least 1".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelParams {
    Constant { value: f64 },
    Linear { intercept: f64, coefficients: Vec<f64> },
    Logistic { intercept: f64, coefficients: Vec<f64> },
    Forest { trees: Vec<Tree> },
}

/// A trained base learner, serializable as a versioned JSON model file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedLearner {
    pub version: u32,
    pub spec: BaseLearnerSpec,
    pub n_features: usize,
    pub params: ModelParams,
    /// Stable hash of (spec, seed, training data); equal inputs give equal
    /// fingerprints regardless of thread scheduling.
    pub fingerprint: u64,
}

impl FittedLearner {
    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<f64>> {
        for row in x {
            if row.len() != self.n_features {
                return Err(Error::ShapeMismatch(format!(
                    "model expects {} features, row has {}",
                    self.n_features,
                    row.len()
                )));
            }
        }
        let out = match &self.params {
            ModelParams::Constant { value } => vec![*value; x.len()],
            ModelParams::Linear {
                intercept,
                coefficients,
            } => x
                .iter()
                .map(|row| {
                    intercept + row.iter().zip(coefficients).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect(),
            ModelParams::Logistic {
                intercept,
                coefficients,
            } => x
                .iter()
                .map(|row| {
                    let eta = intercept
                        + row.iter().zip(coefficients).map(|(a, b)| a * b).sum::<f64>();
                    logistic::sigmoid(eta).clamp(1e-15, 1.0 - 1e-15)
                })
                .collect(),
            ModelParams::Forest { trees } => {
                x.iter().map(|row| forest::predict_row(trees, row)).collect()
            }
        };
        Ok(out)
    }
}

fn check_training_inputs(
    x: &[Vec<f64>],
    y: &[f64],
    w: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let n = x.len();
    if n != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "{n} feature rows but {} targets",
            y.len()
        )));
    }
    if n < 2 {
        return Err(Error::DegenerateDesign(format!(
            "need at least 2 training rows, got {n}"
        )));
    }
    let p = x[0].len();
    if x.iter().any(|row| row.len() != p) {
        return Err(Error::ShapeMismatch("ragged feature matrix".into()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateDesign("non-finite target value".into()));
    }
    let w = match w {
        Some(w) => {
            if w.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "{n} rows but {} weights",
                    w.len()
                )));
            }
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::DegenerateDesign(
                    "weights must be finite and nonnegative".into(),
                ));
            }
            w.to_vec()
        }
        None => vec![1.0; n],
    };
    if w.iter().sum::<f64>() <= 0.0 {
        return Err(Error::DegenerateDesign("all weights are zero".into()));
    }
    Ok(w)
}

fn training_fingerprint(
    spec: &BaseLearnerSpec,
    x: &[Vec<f64>],
    y: &[f64],
    w: &[f64],
    seed: u64,
) -> u64 {
    let mut f = Fingerprint::new();
    f.write(serde_json::to_string(spec).expect("spec serializes").as_bytes());
    f.write_u64(seed);
    f.write_u64(x.len() as u64);
    f.write_u64(x.first().map_or(0, |r| r.len()) as u64);
    for row in x {
        for v in row {
            f.write_f64(*v);
        }
    }
    for v in y {
        f.write_f64(*v);
    }
    for v in w {
        f.write_f64(*v);
    }
    f.finish()
}

pub fn fit(
    spec: &BaseLearnerSpec,
    x: &[Vec<f64>],
    y: &[f64],
    w: Option<&[f64]>,
    seed: u64,
) -> Result<FittedLearner> {
    spec.validate()?;
    let w = check_training_inputs(x, y, w)?;
    let n_features = x[0].len();
    let fingerprint = training_fingerprint(spec, x, y, &w, seed);

    // A constant target needs no model in any family.
    let constant = y.iter().all(|v| *v == y[0]);
    let params = if constant {
        ModelParams::Constant { value: y[0] }
    } else {
        match *spec {
            BaseLearnerSpec::L1Linear { lambda } => {
                let fit = lasso::fit(x, y, &w, lambda);
                debug_assert!(
                    fit.objective_trace.windows(2).all(|p| p[1] <= p[0] + 1e-12),
                    "coordinate descent objective increased"
                );
                ModelParams::Linear {
                    intercept: fit.intercept,
                    coefficients: fit.coefficients,
                }
            }
            BaseLearnerSpec::L2Logistic { lambda } => {
                let fit = logistic::fit(x, y, &w, lambda);
                debug_assert!(
                    fit.nll_trace.windows(2).all(|p| p[1] <= p[0] + 1e-12),
                    "logistic objective increased on an accepted step"
                );
                ModelParams::Logistic {
                    intercept: fit.intercept,
                    coefficients: fit.coefficients,
                }
            }
            BaseLearnerSpec::RandomForest {
                n_trees,
                min_samples_leaf,
                max_depth,
                bootstrap,
            } => {
                let settings = forest::ForestSettings {
                    n_trees,
                    min_samples_leaf,
                    max_depth,
                    bootstrap,
                };
                ModelParams::Forest {
                    trees: forest::fit(x, y, &w, &settings, seed),
                }
            }
        }
    };

    Ok(FittedLearner {
        version: MODEL_FORMAT_VERSION,
        spec: spec.clone(),
        n_features,
        params,
        fingerprint,
    })
}

/// Pick the grid member with the lowest mean out-of-fold squared error;
/// ties go to the earlier grid entry.
pub fn tune(
    grid: &[BaseLearnerSpec],
    x: &[Vec<f64>],
    y: &[f64],
    w: Option<&[f64]>,
    folds: &FoldAssignment,
    seed: u64,
) -> Result<BaseLearnerSpec> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("empty hyperparameter grid".into()));
    }
    for spec in grid {
        spec.validate()?;
    }
    if grid.len() == 1 {
        return Ok(grid[0].clone());
    }
    if folds.fold.len() != x.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} fold labels for {} rows",
            folds.fold.len(),
            x.len()
        )));
    }

    let losses: Vec<f64> = grid
        .par_iter()
        .enumerate()
        .map(|(gi, spec)| -> Result<f64> {
            let mut total = 0.0;
            let mut count = 0usize;
            for f in 0..folds.k as u8 {
                let mut fit_x = Vec::new();
                let mut fit_y = Vec::new();
                let mut fit_w = Vec::new();
                let mut val_x = Vec::new();
                let mut val_y = Vec::new();
                for (i, row) in x.iter().enumerate() {
                    if folds.fold[i] == f {
                        val_x.push(row.clone());
                        val_y.push(y[i]);
                    } else {
                        fit_x.push(row.clone());
                        fit_y.push(y[i]);
                        fit_w.push(w.map_or(1.0, |w| w[i]));
                    }
                }
                if val_x.is_empty() {
                    continue;
                }
                let fold_seed = derive_seed(seed, &format!("tune/grid{gi}/fold{f}"));
                let model = fit(spec, &fit_x, &fit_y, Some(&fit_w), fold_seed)?;
                let preds = model.predict(&val_x)?;
                for (pred, truth) in preds.iter().zip(&val_y) {
                    total += (pred - truth) * (pred - truth);
                }
                count += val_y.len();
            }
            Ok(if count == 0 { f64::INFINITY } else { total / count as f64 })
        })
        .collect::<Result<Vec<f64>>>()?;

    let mut best = 0;
    for (gi, loss) in losses.iter().enumerate().skip(1) {
        if *loss < losses[best] {
            best = gi;
        }
    }
    Ok(grid[best].clone())
}
