//! Meta-learner strategies that turn supervised base learners into
//! conditional-effect estimators, plus the equal-weight ensemble.
//!
//! All strategies assume a completely randomized assignment, so propensity
//! is a constant: the treated fraction of the training rows. An estimator
//! whose training predictions have zero variance is flagged `collapsed` and
//! excluded from downstream ranking and ensembling.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::learners::{self, BaseLearnerSpec, FittedLearner};
use crate::rng::{derive_seed, Fingerprint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "kebab-case")]
pub enum CateStrategy {
    /// One regression over features plus the treatment indicator.
    S { base: BaseLearnerSpec },
    /// Separate outcome regressions per arm.
    T { base: BaseLearnerSpec },
    /// Two-stage: arm regressions, imputed per-row effects, then effect
    /// regressions blended by the propensity constant.
    X {
        first_stage: BaseLearnerSpec,
        second_stage: BaseLearnerSpec,
    },
    /// Residual-on-residual regression via a weighted pseudo-outcome.
    R {
        nuisance: BaseLearnerSpec,
        effect: BaseLearnerSpec,
    },
    /// Per-row predictions supplied by an external estimator.
    ExternalPlugin { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CateEstimatorSpec {
    pub name: String,
    #[serde(flatten)]
    pub strategy: CateStrategy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CateComponents {
    S {
        mu: FittedLearner,
    },
    T {
        mu1: FittedLearner,
        mu0: FittedLearner,
    },
    X {
        mu1: FittedLearner,
        mu0: FittedLearner,
        tau1: FittedLearner,
        tau0: FittedLearner,
    },
    R {
        nuisance: FittedLearner,
        effect: FittedLearner,
    },
    External {
        predictions: BTreeMap<usize, f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CateModel {
    pub spec: CateEstimatorSpec,
    pub components: CateComponents,
    pub train_idx: Vec<usize>,
    /// Treated fraction of the training rows.
    pub propensity_constant: f64,
    /// True when training predictions are constant or non-finite.
    pub collapsed: bool,
    pub fingerprint: u64,
}

impl CateModel {
    /// Effect predictions for arbitrary feature rows. External-plugin models
    /// are keyed by dataset row and cannot answer this; use
    /// [`CateModel::predict_rows`] for those.
    pub fn predict_cate(&self, x: &[Vec<f64>]) -> Result<Vec<f64>> {
        match &self.components {
            CateComponents::S { mu } => {
                let mut with_t: Vec<Vec<f64>> = Vec::with_capacity(x.len());
                for row in x {
                    let mut r = row.clone();
                    r.push(1.0);
                    with_t.push(r);
                }
                let on = mu.predict(&with_t)?;
                for r in &mut with_t {
                    *r.last_mut().expect("treatment column") = 0.0;
                }
                let off = mu.predict(&with_t)?;
                Ok(on.iter().zip(&off).map(|(a, b)| a - b).collect())
            }
            CateComponents::T { mu1, mu0 } => {
                let a = mu1.predict(x)?;
                let b = mu0.predict(x)?;
                Ok(a.iter().zip(&b).map(|(a, b)| a - b).collect())
            }
            CateComponents::X { tau1, tau0, .. } => {
                let t1 = tau1.predict(x)?;
                let t0 = tau0.predict(x)?;
                let g = self.propensity_constant;
                Ok(t1
                    .iter()
                    .zip(&t0)
                    .map(|(t1, t0)| g * t0 + (1.0 - g) * t1)
                    .collect())
            }
            CateComponents::R { effect, .. } => effect.predict(x),
            CateComponents::External { .. } => Err(Error::InvalidConfig(
                "external-plugin predictions are keyed by dataset row; use predict_rows".into(),
            )),
        }
    }

    /// Effect predictions for dataset rows, the form every pipeline stage
    /// uses. Works for all strategies including external plugins.
    pub fn predict_rows(&self, d: &Dataset, idx: &[usize]) -> Result<Vec<f64>> {
        if let CateComponents::External { predictions } = &self.components {
            return idx
                .iter()
                .map(|&i| {
                    predictions
                        .get(&i)
                        .copied()
                        .ok_or(Error::MissingPrediction(i))
                })
                .collect();
        }
        self.predict_cate(&d.feature_rows(idx))
    }
}

/// Equal-weight average of member estimators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub members: Vec<CateModel>,
}

impl EnsembleModel {
    pub fn new(members: Vec<CateModel>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InvalidConfig(
                "ensemble needs at least one member".into(),
            ));
        }
        let first = &members[0].train_idx;
        if members.iter().any(|m| &m.train_idx != first) {
            return Err(Error::InvalidConfig(
                "ensemble members were trained on different index sets".into(),
            ));
        }
        Ok(EnsembleModel { members })
    }

    pub fn predict_cate(&self, x: &[Vec<f64>]) -> Result<Vec<f64>> {
        let per_member: Vec<Vec<f64>> = self
            .members
            .iter()
            .map(|m| m.predict_cate(x))
            .collect::<Result<_>>()?;
        Ok(mean_across(&per_member))
    }

    pub fn predict_rows(&self, d: &Dataset, idx: &[usize]) -> Result<Vec<f64>> {
        let per_member: Vec<Vec<f64>> = self
            .members
            .iter()
            .map(|m| m.predict_rows(d, idx))
            .collect::<Result<_>>()?;
        Ok(mean_across(&per_member))
    }
}

fn mean_across(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows[0].len();
    let k = rows.len() as f64;
    (0..n)
        .map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / k)
        .collect()
}

/// Plugin prediction file: CSV with a `row_index,cate_prediction` header.
pub fn load_plugin_predictions(path: &Path) -> Result<BTreeMap<usize, f64>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = BTreeMap::new();
    for record in reader.deserialize() {
        let (row, pred): (usize, f64) = record?;
        if out.insert(row, pred).is_some() {
            return Err(Error::InvalidConfig(format!(
                "duplicate plugin prediction for row {row}"
            )));
        }
    }
    Ok(out)
}

struct TrainView {
    rows: Vec<Vec<f64>>,
    y: Vec<f64>,
    /// Positions within `train_idx`, per arm.
    treated: Vec<usize>,
    control: Vec<usize>,
}

fn train_view(d: &Dataset, train_idx: &[usize], outcome: &str) -> Result<TrainView> {
    let y_col = d.outcome(outcome)?;
    let rows = d.feature_rows(train_idx);
    let y: Vec<f64> = train_idx.iter().map(|&i| f64::from(y_col[i])).collect();
    let mut treated = Vec::new();
    let mut control = Vec::new();
    for (pos, &i) in train_idx.iter().enumerate() {
        if d.treatment[i] == 1 {
            treated.push(pos);
        } else {
            control.push(pos);
        }
    }
    if treated.is_empty() {
        return Err(Error::EmptyArm("treated"));
    }
    if control.is_empty() {
        return Err(Error::EmptyArm("control"));
    }
    Ok(TrainView {
        rows,
        y,
        treated,
        control,
    })
}

fn gather(rows: &[Vec<f64>], y: &[f64], at: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let x = at.iter().map(|&p| rows[p].clone()).collect();
    let t = at.iter().map(|&p| y[p]).collect();
    (x, t)
}

pub fn fit_cate(
    spec: &CateEstimatorSpec,
    d: &Dataset,
    train_idx: &[usize],
    outcome: &str,
    seed: u64,
) -> Result<CateModel> {
    let view = train_view(d, train_idx, outcome)?;
    let propensity = view.treated.len() as f64 / train_idx.len() as f64;

    let components = match &spec.strategy {
        CateStrategy::S { base } => {
            let mut rows = view.rows.clone();
            for (pos, &i) in train_idx.iter().enumerate() {
                rows[pos].push(f64::from(d.treatment[i]));
            }
            let mu = learners::fit(base, &rows, &view.y, None, derive_seed(seed, "s/mu"))?;
            CateComponents::S { mu }
        }
        CateStrategy::T { base } => {
            let (x1, y1) = gather(&view.rows, &view.y, &view.treated);
            let (x0, y0) = gather(&view.rows, &view.y, &view.control);
            let mu1 = learners::fit(base, &x1, &y1, None, derive_seed(seed, "t/mu1"))?;
            let mu0 = learners::fit(base, &x0, &y0, None, derive_seed(seed, "t/mu0"))?;
            CateComponents::T { mu1, mu0 }
        }
        CateStrategy::X {
            first_stage,
            second_stage,
        } => {
            let (x1, y1) = gather(&view.rows, &view.y, &view.treated);
            let (x0, y0) = gather(&view.rows, &view.y, &view.control);
            let mu1 = learners::fit(first_stage, &x1, &y1, None, derive_seed(seed, "x/mu1"))?;
            let mu0 = learners::fit(first_stage, &x0, &y0, None, derive_seed(seed, "x/mu0"))?;
            // imputed individual effects per arm
            let d1: Vec<f64> = mu0
                .predict(&x1)?
                .iter()
                .zip(&y1)
                .map(|(m, y)| y - m)
                .collect();
            let d0: Vec<f64> = mu1
                .predict(&x0)?
                .iter()
                .zip(&y0)
                .map(|(m, y)| m - y)
                .collect();
            let tau1 = learners::fit(second_stage, &x1, &d1, None, derive_seed(seed, "x/tau1"))?;
            let tau0 = learners::fit(second_stage, &x0, &d0, None, derive_seed(seed, "x/tau0"))?;
            CateComponents::X {
                mu1,
                mu0,
                tau1,
                tau0,
            }
        }
        CateStrategy::R { nuisance, effect } => {
            let m_hat = learners::fit(
                nuisance,
                &view.rows,
                &view.y,
                None,
                derive_seed(seed, "r/nuisance"),
            )?;
            let m_pred = m_hat.predict(&view.rows)?;
            let mut targets = Vec::with_capacity(train_idx.len());
            let mut weights = Vec::with_capacity(train_idx.len());
            for (pos, &i) in train_idx.iter().enumerate() {
                let y_res = view.y[pos] - m_pred[pos];
                let t_res = f64::from(d.treatment[i]) - propensity;
                targets.push(y_res / t_res);
                weights.push(t_res * t_res);
            }
            let tau = learners::fit(
                effect,
                &view.rows,
                &targets,
                Some(&weights),
                derive_seed(seed, "r/effect"),
            )?;
            CateComponents::R {
                nuisance: m_hat,
                effect: tau,
            }
        }
        CateStrategy::ExternalPlugin { path } => {
            let predictions = load_plugin_predictions(path)?;
            CateComponents::External { predictions }
        }
    };

    let mut model = CateModel {
        spec: spec.clone(),
        components,
        train_idx: train_idx.to_vec(),
        propensity_constant: propensity,
        collapsed: false,
        fingerprint: 0,
    };
    let train_preds = model.predict_rows(d, train_idx)?;
    let finite = train_preds.iter().all(|p| p.is_finite());
    let constant = train_preds.iter().all(|p| *p == train_preds[0]);
    model.collapsed = !finite || constant;
    model.fingerprint = model_fingerprint(spec, train_idx, outcome, seed, &model);
    Ok(model)
}

fn model_fingerprint(
    spec: &CateEstimatorSpec,
    train_idx: &[usize],
    outcome: &str,
    seed: u64,
    model: &CateModel,
) -> u64 {
    let mut f = Fingerprint::new();
    f.write(serde_json::to_string(spec).expect("spec serializes").as_bytes());
    f.write(outcome.as_bytes());
    f.write_u64(seed);
    for &i in train_idx {
        f.write_u64(i as u64);
    }
    match &model.components {
        CateComponents::S { mu } => f.write_u64(mu.fingerprint),
        CateComponents::T { mu1, mu0 } => {
            f.write_u64(mu1.fingerprint);
            f.write_u64(mu0.fingerprint);
        }
        CateComponents::X {
            mu1,
            mu0,
            tau1,
            tau0,
        } => {
            f.write_u64(mu1.fingerprint);
            f.write_u64(mu0.fingerprint);
            f.write_u64(tau1.fingerprint);
            f.write_u64(tau0.fingerprint);
        }
        CateComponents::R { nuisance, effect } => {
            f.write_u64(nuisance.fingerprint);
            f.write_u64(effect.fingerprint);
        }
        CateComponents::External { predictions } => {
            for (row, pred) in predictions {
                f.write_u64(*row as u64);
                f.write_f64(*pred);
            }
        }
    }
    f.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::io::Write as _;

    fn forest_base(min_leaf: usize) -> BaseLearnerSpec {
        BaseLearnerSpec::RandomForest {
            n_trees: 1,
            min_samples_leaf: min_leaf,
            max_depth: None,
            bootstrap: false,
        }
    }

    /// One binary feature; outcomes arranged so each cell's arm means are
    /// simple fractions.
    fn cell_dataset() -> Dataset {
        // x=0: treated y {1,0,1}, control y {0,0}
        // x=1: treated y {0,0},   control y {1,1,0}
        let x = vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        let t = vec![1, 1, 1, 0, 0, 1, 1, 0, 0, 0];
        let y = vec![1, 0, 1, 0, 0, 0, 0, 1, 1, 0];
        Dataset::from_parts(
            vec!["x".into()],
            vec![x],
            t,
            BTreeMap::from([("y".to_string(), y)]),
            None,
            BTreeMap::new(),
        )
        .unwrap()
    }

    #[test]
    fn t_learner_with_saturated_trees_matches_cell_difference_in_means() {
        let d = cell_dataset();
        let idx: Vec<usize> = (0..d.n()).collect();
        let spec = CateEstimatorSpec {
            name: "t_rf".into(),
            strategy: CateStrategy::T {
                base: forest_base(1),
            },
        };
        let model = fit_cate(&spec, &d, &idx, "y", 5).unwrap();
        let preds = model.predict_cate(&[vec![0.0], vec![1.0]]).unwrap();
        assert_abs_diff_eq!(preds[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(preds[1], 0.0 - 2.0 / 3.0, epsilon = 1e-12);
        assert!(!model.collapsed);
    }

    #[test]
    fn treatment_blind_s_learner_collapses() {
        let d = cell_dataset();
        let idx: Vec<usize> = (0..d.n()).collect();
        let spec = CateEstimatorSpec {
            name: "s_shrunk".into(),
            strategy: CateStrategy::S {
                base: BaseLearnerSpec::L1Linear { lambda: 1e9 },
            },
        };
        let model = fit_cate(&spec, &d, &idx, "y", 5).unwrap();
        assert!(model.collapsed);
        let preds = model.predict_rows(&d, &idx).unwrap();
        assert!(preds.iter().all(|&p| p == 0.0));
    }

    /// Balanced arms and single-leaf trees for both R-learner stages: the
    /// weighted pseudo-outcome regression reduces to the difference in means.
    #[test]
    fn constant_r_learner_recovers_the_ate_on_a_balanced_design() {
        let x = vec![0, 1, 0, 1, 0, 1, 0, 1];
        let t = vec![1, 1, 1, 1, 0, 0, 0, 0];
        let y = vec![1, 1, 0, 1, 0, 1, 0, 0];
        let d = Dataset::from_parts(
            vec!["x".into()],
            vec![x],
            t,
            BTreeMap::from([("y".to_string(), y)]),
            None,
            BTreeMap::new(),
        )
        .unwrap();
        let idx: Vec<usize> = (0..8).collect();
        let spec = CateEstimatorSpec {
            name: "r_const".into(),
            strategy: CateStrategy::R {
                nuisance: forest_base(8),
                effect: forest_base(8),
            },
        };
        let model = fit_cate(&spec, &d, &idx, "y", 2).unwrap();
        assert_abs_diff_eq!(model.propensity_constant, 0.5, epsilon = 0.0);
        let ate = crate::neyman::ate_hat(&d, &idx, "y").unwrap().point;
        let pred = model.predict_cate(&[vec![0.0]]).unwrap()[0];
        assert_abs_diff_eq!(pred, ate, epsilon = 1e-6);
    }

    #[test]
    fn x_learner_with_balanced_arms_averages_the_stage_two_fits() {
        let x = vec![0, 0, 1, 1, 0, 0, 1, 1];
        let t = vec![1, 1, 1, 1, 0, 0, 0, 0];
        let y = vec![1, 0, 1, 1, 0, 1, 0, 0];
        let d2 = Dataset::from_parts(
            vec!["x".into()],
            vec![x],
            t,
            BTreeMap::from([("y".to_string(), y)]),
            None,
            BTreeMap::new(),
        )
        .unwrap();
        let idx: Vec<usize> = (0..8).collect();
        let spec = CateEstimatorSpec {
            name: "x_rf".into(),
            strategy: CateStrategy::X {
                first_stage: forest_base(1),
                second_stage: forest_base(1),
            },
        };
        let model = fit_cate(&spec, &d2, &idx, "y", 7).unwrap();
        assert_abs_diff_eq!(model.propensity_constant, 0.5, epsilon = 0.0);
        let grid = vec![vec![0.0], vec![1.0]];
        let blended = model.predict_cate(&grid).unwrap();
        let CateComponents::X { tau1, tau0, .. } = &model.components else {
            panic!("expected X components");
        };
        let t1 = tau1.predict(&grid).unwrap();
        let t0 = tau0.predict(&grid).unwrap();
        for i in 0..2 {
            assert_abs_diff_eq!(blended[i], (t1[i] + t0[i]) / 2.0, epsilon = 1e-12);
        }
    }

    fn external_model(idx: &[usize], value: f64) -> CateModel {
        let predictions: BTreeMap<usize, f64> = idx
            .iter()
            .map(|&i| (i, if i % 2 == 0 { value } else { -value }))
            .collect();
        CateModel {
            spec: CateEstimatorSpec {
                name: format!("plugin_{value}"),
                strategy: CateStrategy::ExternalPlugin {
                    path: PathBuf::from("unused"),
                },
            },
            components: CateComponents::External { predictions },
            train_idx: idx.to_vec(),
            propensity_constant: 0.5,
            collapsed: false,
            fingerprint: 0,
        }
    }

    #[test]
    fn opposite_members_cancel_in_the_ensemble() {
        let d = cell_dataset();
        let idx: Vec<usize> = (0..d.n()).collect();
        let a = external_model(&idx, 0.3);
        let mut b = external_model(&idx, 0.3);
        if let CateComponents::External { predictions } = &mut b.components {
            for v in predictions.values_mut() {
                *v = -*v;
            }
        }
        let ensemble = EnsembleModel::new(vec![a, b]).unwrap();
        let preds = ensemble.predict_rows(&d, &idx).unwrap();
        assert!(preds.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn singleton_ensemble_is_the_identity() {
        let d = cell_dataset();
        let idx: Vec<usize> = (0..d.n()).collect();
        let member = external_model(&idx, 0.25);
        let alone = member.predict_rows(&d, &idx).unwrap();
        let ensemble = EnsembleModel::new(vec![member]).unwrap();
        assert_eq!(ensemble.predict_rows(&d, &idx).unwrap(), alone);
    }

    #[test]
    fn ensemble_prediction_is_the_member_mean() {
        let d = cell_dataset();
        let idx: Vec<usize> = (0..d.n()).collect();
        let members: Vec<CateModel> = (0..5)
            .map(|k| {
                let spec = CateEstimatorSpec {
                    name: format!("t_rf_{k}"),
                    strategy: CateStrategy::T {
                        base: BaseLearnerSpec::RandomForest {
                            n_trees: 7,
                            min_samples_leaf: 1,
                            max_depth: None,
                            bootstrap: true,
                        },
                    },
                };
                fit_cate(&spec, &d, &idx, "y", 100 + k).unwrap()
            })
            .collect();
        let per_member: Vec<Vec<f64>> = members
            .iter()
            .map(|m| m.predict_rows(&d, &idx).unwrap())
            .collect();
        let ensemble = EnsembleModel::new(members).unwrap();
        let combined = ensemble.predict_rows(&d, &idx).unwrap();
        for (i, c) in combined.iter().enumerate() {
            let mean = per_member.iter().map(|p| p[i]).sum::<f64>() / 5.0;
            assert_abs_diff_eq!(*c, mean, epsilon = 1e-15);
        }
    }

    #[test]
    fn mismatched_training_sets_are_rejected() {
        let d = cell_dataset();
        let idx: Vec<usize> = (0..d.n()).collect();
        let a = external_model(&idx, 0.3);
        let b = external_model(&idx[..8], 0.3);
        let err = EnsembleModel::new(vec![a, b]).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    #[test]
    fn plugin_predictions_load_and_missing_rows_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.csv");
        let mut file = std::fs::File::create(&path).unwrap();
        writeln!(file, "row_index,cate_prediction").unwrap();
        for i in 0..9 {
            writeln!(file, "{i},{}", 0.1 * i as f64).unwrap();
        }
        drop(file);

        let d = cell_dataset();
        let idx: Vec<usize> = (0..d.n()).collect();
        let spec = CateEstimatorSpec {
            name: "plugin".into(),
            strategy: CateStrategy::ExternalPlugin { path: path.clone() },
        };
        // row 9 has no prediction: collapsed-detection over train rows fails
        let err = fit_cate(&spec, &d, &idx, "y", 1).unwrap_err();
        assert!(matches!(err, Error::MissingPrediction(9)));

        let model = fit_cate(&spec, &d, &idx[..9], "y", 1).unwrap();
        let preds = model.predict_rows(&d, &idx[..9]).unwrap();
        assert_abs_diff_eq!(preds[3], 0.3, epsilon = 1e-12);
        assert!(!model.collapsed);
    }

    #[test]
    fn empty_arm_is_rejected() {
        let d = cell_dataset();
        // rows 0..3 are all treated
        let err = fit_cate(
            &CateEstimatorSpec {
                name: "t".into(),
                strategy: CateStrategy::T {
                    base: forest_base(1),
                },
            },
            &d,
            &[0, 1, 2],
            "y",
            1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::EmptyArm("control")));
    }

    #[test]
    fn models_round_trip_through_json_and_fingerprints_are_stable() {
        let d = cell_dataset();
        let idx: Vec<usize> = (0..d.n()).collect();
        let spec = CateEstimatorSpec {
            name: "x_rf".into(),
            strategy: CateStrategy::X {
                first_stage: forest_base(1),
                second_stage: forest_base(2),
            },
        };
        let a = fit_cate(&spec, &d, &idx, "y", 11).unwrap();
        let b = fit_cate(&spec, &d, &idx, "y", 11).unwrap();
        assert_eq!(a, b);
        let c = fit_cate(&spec, &d, &idx, "y", 12).unwrap();
        assert_ne!(a.fingerprint, c.fingerprint);

        let json = serde_json::to_string(&a).unwrap();
        let back: CateModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, a);
        assert_eq!(
            back.predict_rows(&d, &idx).unwrap(),
            a.predict_rows(&d, &idx).unwrap()
        );
    }

    #[test]
    fn strategy_tags_serialize_kebab_case() {
        let spec = CateEstimatorSpec {
            name: "t_lasso".into(),
            strategy: CateStrategy::T {
                base: BaseLearnerSpec::L1Linear { lambda: 0.01 },
            },
        };
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(
            json,
            r#"{"name":"t_lasso","strategy":"t","base":{"family":"l1-linear","lambda":0.01}}"#
        );
        let back: CateEstimatorSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
    }
}
