//! Synthetic completely randomized trials with planted cell-shaped effects,
//! used by the oracle tests and the `simulate` subcommand.
//!
//! Features are independent Bernoulli draws, treatment is assigned to an
//! exact count of rows by seeded shuffle, and each row's outcome risk is its
//! arm baseline shifted by the summed effects of every planted cell that
//! contains the row. The shift lands on the treated arm when that keeps the
//! risk inside [0, 1]; otherwise the control arm absorbs the opposite shift,
//! which realizes the same treatment effect. Rows where neither arm can
//! absorb the shift are an InvalidRisk error.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cellsearch::Cell;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedCell {
    pub cell: Cell,
    /// Additive treatment effect on outcome risk for members.
    pub effect: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub p: usize,
    /// Per-feature Bernoulli probability, length p.
    pub marginals: Vec<f64>,
    #[serde(default)]
    pub cells: Vec<PlantedCell>,
    pub baseline_treated: f64,
    pub baseline_control: f64,
    pub treated_fraction: f64,
    pub seed: u64,
}

#[derive(Debug)]
pub struct SyntheticData {
    pub dataset: Dataset,
    /// Realized risk difference (treated minus control) per row.
    pub true_cate: Vec<f64>,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidConfig("need at least 2 rows".into()));
        }
        if self.p == 0 {
            return Err(Error::InvalidConfig("need at least one feature".into()));
        }
        if self.marginals.len() != self.p {
            return Err(Error::ShapeMismatch(format!(
                "{} marginals for {} features",
                self.marginals.len(),
                self.p
            )));
        }
        if self
            .marginals
            .iter()
            .any(|m| !m.is_finite() || !(0.0..=1.0).contains(m))
        {
            return Err(Error::InvalidConfig(
                "feature marginals must lie in [0, 1]".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.baseline_treated) {
            return Err(Error::InvalidRisk {
                arm: "treated",
                risk: self.baseline_treated,
            });
        }
        if !(0.0..=1.0).contains(&self.baseline_control) {
            return Err(Error::InvalidRisk {
                arm: "control",
                risk: self.baseline_control,
            });
        }
        if !(self.treated_fraction > 0.0 && self.treated_fraction < 1.0) {
            return Err(Error::InvalidConfig(
                "treated fraction must lie strictly inside (0, 1)".into(),
            ));
        }
        for planted in &self.cells {
            if !planted.effect.is_finite() {
                return Err(Error::InvalidConfig("planted effect must be finite".into()));
            }
        }
        Ok(())
    }
}

pub fn feature_name(j: usize) -> String {
    format!("x{j}")
}

pub fn simulate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let n = spec.n;

    let mut frng = stream(spec.seed, "features");
    let features: Vec<Vec<u8>> = spec
        .marginals
        .iter()
        .map(|&m| (0..n).map(|_| u8::from(frng.gen::<f64>() < m)).collect())
        .collect();
    let feature_names: Vec<String> = (0..spec.p).map(feature_name).collect();

    // planted literals resolved to column indices up front
    let col_of = |name: &str| -> Result<usize> {
        feature_names
            .iter()
            .position(|f| f == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let mut planted: Vec<(Vec<(usize, u8)>, f64)> = Vec::with_capacity(spec.cells.len());
    for pc in &spec.cells {
        let lits = pc
            .cell
            .literals
            .iter()
            .map(|(name, &v)| Ok((col_of(name)?, v)))
            .collect::<Result<Vec<_>>>()?;
        planted.push((lits, pc.effect));
    }

    let n_treated = (spec.treated_fraction * n as f64).round_ties_even() as usize;
    let n_treated = n_treated.clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(spec.seed, "assign"));
    let mut treatment = vec![0u8; n];
    for &i in &order[..n_treated] {
        treatment[i] = 1;
    }

    let mut orng = stream(spec.seed, "outcomes");
    let mut y = vec![0u8; n];
    let mut true_cate = vec![0.0; n];
    for i in 0..n {
        let shift: f64 = planted
            .iter()
            .filter(|(lits, _)| lits.iter().all(|&(j, v)| features[j][i] == v))
            .map(|&(_, e)| e)
            .sum();
        let treated_shifted = spec.baseline_treated + shift;
        let (risk_treated, risk_control) = if (0.0..=1.0).contains(&treated_shifted) {
            (treated_shifted, spec.baseline_control)
        } else {
            let control_shifted = spec.baseline_control - shift;
            if !(0.0..=1.0).contains(&control_shifted) {
                return Err(Error::InvalidRisk {
                    arm: "treated",
                    risk: treated_shifted,
                });
            }
            (spec.baseline_treated, control_shifted)
        };
        true_cate[i] = risk_treated - risk_control;
        let risk = if treatment[i] == 1 {
            risk_treated
        } else {
            risk_control
        };
        y[i] = u8::from(orng.gen::<f64>() < risk);
    }

    let enrollment_time = Some((0..n).map(|i| i as f64).collect());
    let dataset = Dataset::from_parts(
        feature_names,
        features,
        treatment,
        BTreeMap::from([("y".to_string(), y)]),
        enrollment_time,
        BTreeMap::new(),
    )?;
    Ok(SyntheticData { dataset, true_cate })
}
