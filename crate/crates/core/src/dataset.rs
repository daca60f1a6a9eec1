//! Trial data: binary covariates, binary treatment, binary outcomes.
//!
//! Columns are stored column-major; rows are addressed by load order. All
//! splitting here is stratified on the (treatment, outcome) pair so that
//! rare-event counts stay balanced across partitions and folds.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    /// Column-major: `features[j][i]` is feature j of row i.
    pub features: Vec<Vec<u8>>,
    pub treatment: Vec<u8>,
    pub outcomes: BTreeMap<String, Vec<u8>>,
    pub enrollment_time: Option<Vec<f64>>,
    /// Raw numeric side columns kept for re-thresholding perturbations.
    pub aux: BTreeMap<String, Vec<f64>>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.treatment.len()
    }

    pub fn p(&self) -> usize {
        self.features.len()
    }

    pub fn outcome(&self, name: &str) -> Result<&[u8]> {
        self.outcomes
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    pub fn feature_index(&self, name: &str) -> Result<usize> {
        self.feature_names
            .iter()
            .position(|f| f == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    /// Feature row as f64, in feature-column order.
    pub fn feature_row(&self, i: usize) -> Vec<f64> {
        self.features.iter().map(|col| f64::from(col[i])).collect()
    }

    /// Feature matrix for the given rows.
    pub fn feature_rows(&self, idx: &[usize]) -> Vec<Vec<f64>> {
        idx.iter().map(|&i| self.feature_row(i)).collect()
    }

    pub fn from_parts(
        feature_names: Vec<String>,
        features: Vec<Vec<u8>>,
        treatment: Vec<u8>,
        outcomes: BTreeMap<String, Vec<u8>>,
        enrollment_time: Option<Vec<f64>>,
        aux: BTreeMap<String, Vec<f64>>,
    ) -> Result<Self> {
        let n = treatment.len();
        if feature_names.len() != features.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature names for {} feature columns",
                feature_names.len(),
                features.len()
            )));
        }
        for (name, col) in feature_names.iter().zip(&features) {
            check_len(name, col.len(), n)?;
            check_binary(name, col)?;
        }
        check_binary("treatment", &treatment)?;
        for (name, col) in &outcomes {
            check_len(name, col.len(), n)?;
            check_binary(name, col)?;
        }
        if let Some(t) = &enrollment_time {
            check_len("enrollment_time", t.len(), n)?;
        }
        for (name, col) in &aux {
            check_len(name, col.len(), n)?;
        }
        if !treatment.iter().any(|&t| t == 1) {
            return Err(Error::EmptyArm("treated"));
        }
        if !treatment.iter().any(|&t| t == 0) {
            return Err(Error::EmptyArm("control"));
        }
        Ok(Dataset {
            feature_names,
            features,
            treatment,
            outcomes,
            enrollment_time,
            aux,
        })
    }
}

fn check_len(name: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::ShapeMismatch(format!(
            "column `{name}` has {got} rows, expected {want}"
        )));
    }
    Ok(())
}

fn check_binary(name: &str, col: &[u8]) -> Result<()> {
    for (i, &v) in col.iter().enumerate() {
        if v > 1 {
            return Err(Error::NonBinaryValue {
                row: i,
                column: name.to_string(),
                value: v.to_string(),
            });
        }
    }
    Ok(())
}

/// Column roles for CSV loading. Cells must parse as numbers; binary columns
/// must be exactly 0 or 1. Empty cells are rejected unless the column has a
/// fill value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub features: Vec<String>,
    pub treatment: String,
    pub outcomes: Vec<String>,
    #[serde(default)]
    pub time: Option<String>,
    #[serde(default)]
    pub aux: Vec<String>,
    /// Per-column replacement for empty cells. Columns not listed reject
    /// missing values.
    #[serde(default)]
    pub fill: BTreeMap<String, f64>,
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let col_of = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };

    let feature_cols: Vec<usize> = schema
        .features
        .iter()
        .map(|f| col_of(f))
        .collect::<Result<_>>()?;
    let treatment_col = col_of(&schema.treatment)?;
    let outcome_cols: Vec<usize> = schema
        .outcomes
        .iter()
        .map(|f| col_of(f))
        .collect::<Result<_>>()?;
    let time_col = schema.time.as_deref().map(col_of).transpose()?;
    let aux_cols: Vec<usize> = schema.aux.iter().map(|f| col_of(f)).collect::<Result<_>>()?;

    let mut features: Vec<Vec<u8>> = vec![Vec::new(); feature_cols.len()];
    let mut treatment: Vec<u8> = Vec::new();
    let mut outcomes: Vec<Vec<u8>> = vec![Vec::new(); outcome_cols.len()];
    let mut time: Vec<f64> = Vec::new();
    let mut aux: Vec<Vec<f64>> = vec![Vec::new(); aux_cols.len()];

    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let numeric = |col: usize, name: &str| -> Result<f64> {
            let raw = record.get(col).unwrap_or("").trim();
            if raw.is_empty() {
                return match schema.fill.get(name) {
                    Some(&v) => Ok(v),
                    None => Err(Error::MissingValue {
                        row,
                        column: name.to_string(),
                    }),
                };
            }
            raw.parse::<f64>().map_err(|_| Error::NonBinaryValue {
                row,
                column: name.to_string(),
                value: raw.to_string(),
            })
        };
        let binary = |col: usize, name: &str| -> Result<u8> {
            let v = numeric(col, name)?;
            if v == 0.0 {
                Ok(0)
            } else if v == 1.0 {
                Ok(1)
            } else {
                Err(Error::NonBinaryValue {
                    row,
                    column: name.to_string(),
                    value: v.to_string(),
                })
            }
        };

        for (j, &col) in feature_cols.iter().enumerate() {
            features[j].push(binary(col, &schema.features[j])?);
        }
        treatment.push(binary(treatment_col, &schema.treatment)?);
        for (j, &col) in outcome_cols.iter().enumerate() {
            outcomes[j].push(binary(col, &schema.outcomes[j])?);
        }
        if let Some(col) = time_col {
            time.push(numeric(col, schema.time.as_deref().unwrap())?);
        }
        for (j, &col) in aux_cols.iter().enumerate() {
            aux[j].push(numeric(col, &schema.aux[j])?);
        }
    }

    let outcome_map: BTreeMap<String, Vec<u8>> = schema
        .outcomes
        .iter()
        .cloned()
        .zip(outcomes)
        .collect();
    let aux_map: BTreeMap<String, Vec<f64>> = schema.aux.iter().cloned().zip(aux).collect();
    Dataset::from_parts(
        schema.features.clone(),
        features,
        treatment,
        outcome_map,
        time_col.map(|_| time),
        aux_map,
    )
}

/// Test/train partition plus the fold assignments attached to it later.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub test: Vec<usize>,
    pub train: Vec<usize>,
    /// Fold assignments over `train` (parallel vectors), keyed by name.
    pub folds: BTreeMap<String, FoldAssignment>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    /// `fold[i]` is the fold of `train[i]`.
    pub fold: Vec<u8>,
}

impl FoldAssignment {
    /// (validation rows, training rows) for fold `f`, as dataset row ids.
    pub fn split(&self, train: &[usize], f: u8) -> (Vec<usize>, Vec<usize>) {
        let mut val = Vec::new();
        let mut fit = Vec::new();
        for (i, &row) in train.iter().enumerate() {
            if self.fold[i] == f {
                val.push(row);
            } else {
                fit.push(row);
            }
        }
        (val, fit)
    }
}

fn strata(d: &Dataset, outcome: &[u8], idx: &[usize]) -> [Vec<usize>; 4] {
    let mut out: [Vec<usize>; 4] = Default::default();
    for &i in idx {
        let s = (d.treatment[i] * 2 + outcome[i]) as usize;
        out[s].push(i);
    }
    out
}

fn round_half_even(x: f64) -> usize {
    x.round_ties_even().max(0.0) as usize
}

/// Hold out `test_fraction` of the rows, stratified on (treatment, outcome).
///
/// Per-stratum targets are rounded half-to-even; the largest stratum absorbs
/// the difference so the global test count is exactly the rounded fraction
/// of n.
pub fn stratified_test_split(
    d: &Dataset,
    outcome: &str,
    test_fraction: f64,
    seed: u64,
) -> Result<SplitPlan> {
    if !(0.0..1.0).contains(&test_fraction) || test_fraction <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "test fraction {test_fraction} outside (0, 1)"
        )));
    }
    let y = d.outcome(outcome)?;
    let all: Vec<usize> = (0..d.n()).collect();
    let groups = strata(d, y, &all);

    let global_target = round_half_even(d.n() as f64 * test_fraction);
    let mut targets: Vec<usize> = groups
        .iter()
        .map(|g| round_half_even(g.len() as f64 * test_fraction))
        .collect();
    let assigned: usize = targets.iter().sum();
    let largest = (0..4)
        .max_by_key(|&s| (groups[s].len(), std::cmp::Reverse(s)))
        .unwrap();
    let adjusted = targets[largest] as i64 + global_target as i64 - assigned as i64;
    if adjusted < 0 {
        return Err(Error::InvalidConfig(format!(
            "cannot reach global test target {global_target}"
        )));
    }
    targets[largest] = adjusted as usize;

    let mut test = Vec::with_capacity(global_target);
    for (s, group) in groups.iter().enumerate() {
        let target = targets[s];
        if group.len() < target {
            return Err(Error::StratumTooSmall {
                t: (s / 2) as u8,
                y: (s % 2) as u8,
                size: group.len(),
                target,
            });
        }
        let mut rows = group.clone();
        let mut r = rng::stream(seed, &format!("test-split/stratum{s}"));
        rows.shuffle(&mut r);
        test.extend_from_slice(&rows[..target]);
    }
    test.sort_unstable();
    let in_test = crate::rowset::RowSet::from_indices(d.n(), &test);
    let train: Vec<usize> = (0..d.n()).filter(|&i| !in_test.contains(i)).collect();
    if train.is_empty() {
        return Err(Error::InvalidConfig(
            "test fraction leaves no training rows".to_string(),
        ));
    }
    Ok(SplitPlan {
        seed,
        test,
        train,
        folds: BTreeMap::new(),
    })
}

/// Assign the rows in `train` to k cross-validation folds, stratified on
/// (treatment, outcome); fold sizes within each stratum differ by at most 1.
pub fn stratified_cv_folds(
    d: &Dataset,
    train: &[usize],
    outcome: &str,
    k: usize,
    seed: u64,
) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("fold count {k} < 2")));
    }
    let y = d.outcome(outcome)?;
    let pos_in_train: BTreeMap<usize, usize> =
        train.iter().enumerate().map(|(p, &row)| (row, p)).collect();
    let mut fold = vec![0u8; train.len()];
    for (s, group) in strata(d, y, train).iter().enumerate() {
        let mut rows = group.clone();
        let mut r = rng::stream(seed, &format!("cv-folds/stratum{s}"));
        rows.shuffle(&mut r);
        for (i, row) in rows.into_iter().enumerate() {
            fold[pos_in_train[&row]] = (i % k) as u8;
        }
    }
    Ok(FoldAssignment { k, fold })
}

/// Assign the rows in `train` to k contiguous blocks of enrollment time,
/// earliest block first; remainder rows go to the earliest blocks. Ties in
/// time fall back to load order.
pub fn time_folds(d: &Dataset, train: &[usize], k: usize) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("fold count {k} < 2")));
    }
    let time = d.enrollment_time.as_ref().ok_or(Error::MissingTime)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.sort_by(|&a, &b| {
        time[train[a]]
            .partial_cmp(&time[train[b]])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(train[a].cmp(&train[b]))
    });
    let n = train.len();
    let base = n / k;
    let rem = n % k;
    let mut fold = vec![0u8; n];
    let mut cursor = 0usize;
    for f in 0..k {
        let size = base + usize::from(f < rem);
        for &pos in &order[cursor..cursor + size] {
            fold[pos] = f as u8;
        }
        cursor += size;
    }
    Ok(FoldAssignment { k, fold })
}
