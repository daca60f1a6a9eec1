//! Interpretable subgroup discovery: feature scoring for a top subgroup,
//! enumeration of small conjunctive cells with true/false-positive counts,
//! the iterative cover search, and the stability aggregation across
//! repeated randomized runs.
//!
//! A cell is a conjunction of feature=value literals over binary features;
//! its region is the set of rows satisfying all literals. Cell B is a
//! sub-cell of A when B's region is contained in A's, which for
//! conjunctions over binary features is exactly literal-set containment in
//! the other direction. The relation is used reflexively where noted.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::learners::{self, BaseLearnerSpec, ModelParams};
use crate::rowset::RowSet;

/// Ridge strength for the membership classifier. The scale of the scores is
/// irrelevant downstream (they are rank statistics after normalization);
/// the penalty only keeps separable fits finite.
const MEMBERSHIP_RIDGE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, u8>", into = "BTreeMap<String, u8>")]
pub struct Cell {
    /// feature name -> required value; keys unique by construction.
    pub literals: BTreeMap<String, u8>,
}

impl TryFrom<BTreeMap<String, u8>> for Cell {
    type Error = Error;
    fn try_from(literals: BTreeMap<String, u8>) -> Result<Self> {
        Cell::new(literals)
    }
}

impl From<Cell> for BTreeMap<String, u8> {
    fn from(c: Cell) -> Self {
        c.literals
    }
}

impl Cell {
    pub fn new(literals: BTreeMap<String, u8>) -> Result<Self> {
        if literals.is_empty() {
            return Err(Error::InvalidConfig("a cell needs at least one literal".into()));
        }
        if literals.values().any(|&v| v > 1) {
            return Err(Error::InvalidConfig("cell literals must be binary".into()));
        }
        Ok(Cell { literals })
    }

    /// Rows of `d` inside the cell's region.
    pub fn members(&self, d: &Dataset) -> Result<RowSet> {
        let mut set = RowSet::full(d.n());
        for (name, &want) in &self.literals {
            let col = &d.features[d.feature_index(name)?];
            let mut keep = RowSet::empty(d.n());
            for (i, &v) in col.iter().enumerate() {
                if v == want {
                    keep.insert(i);
                }
            }
            set = set.intersect(&keep);
        }
        Ok(set)
    }

    /// Region containment (reflexive): every literal of `other` appears in
    /// `self` with the same value.
    pub fn is_subcell_of(&self, other: &Cell) -> bool {
        other
            .literals
            .iter()
            .all(|(name, v)| self.literals.get(name) == Some(v))
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, (name, v)) in self.literals.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{name}={v}")?;
        }
        write!(f, "}}")
    }
}

/// Mean-difference and membership-classifier importance scores per feature,
/// each normalized to unit absolute sum (or identically zero).
pub fn feature_importance(
    d: &Dataset,
    idx: &[usize],
    top: &RowSet,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (inside, outside): (Vec<usize>, Vec<usize>) =
        idx.iter().copied().partition(|&i| top.contains(i));
    if inside.is_empty() || outside.is_empty() {
        return Err(Error::InvalidConfig(
            "top subgroup and its complement must both be nonempty".into(),
        ));
    }

    let mut difference = Vec::with_capacity(d.p());
    for col in &d.features {
        let mean_in =
            inside.iter().map(|&i| f64::from(col[i])).sum::<f64>() / inside.len() as f64;
        let mean_out =
            outside.iter().map(|&i| f64::from(col[i])).sum::<f64>() / outside.len() as f64;
        difference.push(mean_in - mean_out);
    }

    let x = d.feature_rows(idx);
    let membership: Vec<f64> = idx
        .iter()
        .map(|&i| f64::from(top.contains(i)))
        .collect();
    let model = learners::fit(
        &BaseLearnerSpec::L2Logistic {
            lambda: MEMBERSHIP_RIDGE,
        },
        &x,
        &membership,
        None,
        0,
    )?;
    let classifier = match &model.params {
        ModelParams::Logistic { coefficients, .. } => coefficients.clone(),
        // constant membership cannot happen past the emptiness check above
        _ => vec![0.0; d.p()],
    };

    Ok((normalize(difference), normalize(classifier)))
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let total: f64 = v.iter().map(|x| x.abs()).sum();
    if total == 0.0 {
        v
    } else {
        v.into_iter().map(|x| x / total).collect()
    }
}

/// Union of the top-k features under each score, capped: when the union
/// exceeds `cap`, the lowest features by summed absolute score are dropped.
/// Returns sorted feature indices.
pub fn select_features(
    difference: &[f64],
    classifier: &[f64],
    k: usize,
    cap: usize,
) -> Vec<usize> {
    let top_k = |scores: &[f64]| -> Vec<usize> {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .abs()
                .total_cmp(&scores[a].abs())
                .then(a.cmp(&b))
        });
        order.truncate(k);
        order
    };
    let mut union: BTreeSet<usize> = top_k(difference).into_iter().collect();
    union.extend(top_k(classifier));

    let mut chosen: Vec<usize> = union.into_iter().collect();
    if chosen.len() > cap {
        chosen.sort_by(|&a, &b| {
            let sa = difference[a].abs() + classifier[a].abs();
            let sb = difference[b].abs() + classifier[b].abs();
            sb.total_cmp(&sa).then(a.cmp(&b))
        });
        chosen.truncate(cap);
        chosen.sort_unstable();
    }
    chosen
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellCount {
    pub cell: Cell,
    /// members inside the top subgroup (and the residual population)
    pub tp: usize,
    /// members outside the top subgroup (and inside the residual population)
    pub fp: usize,
}

/// TP/FP counts for every cell of at most `m` literals over `features`
/// (both polarities), computed by shared-prefix bitset intersection.
/// `excluded` rows are removed from the population first.
pub fn enumerate_cells(
    d: &Dataset,
    idx: &[usize],
    features: &[usize],
    m: usize,
    top: &RowSet,
    excluded: &RowSet,
) -> Result<Vec<CellCount>> {
    if m < 1 {
        return Err(Error::InvalidConfig("cells need at least one literal".into()));
    }
    if features.is_empty() {
        return Err(Error::InvalidConfig("no features to enumerate cells over".into()));
    }
    let mut pop = RowSet::from_indices(d.n(), idx);
    pop.subtract(excluded);
    let top_pop = pop.intersect(top);
    let mut comp_pop = pop;
    comp_pop.subtract(&top_pop);

    // per (feature, value) membership over all rows
    let value_sets: Vec<[RowSet; 2]> = features
        .iter()
        .map(|&f| {
            let mut zero = RowSet::empty(d.n());
            let mut one = RowSet::empty(d.n());
            for (i, &v) in d.features[f].iter().enumerate() {
                if v == 1 {
                    one.insert(i);
                } else {
                    zero.insert(i);
                }
            }
            [zero, one]
        })
        .collect();

    let mut out = Vec::new();
    let mut literals: Vec<(usize, u8)> = Vec::new();
    enumerate_into(
        d,
        features,
        &value_sets,
        m,
        0,
        &top_pop,
        &comp_pop,
        &mut literals,
        &mut out,
    );
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn enumerate_into(
    d: &Dataset,
    features: &[usize],
    value_sets: &[[RowSet; 2]],
    m: usize,
    start: usize,
    cur_top: &RowSet,
    cur_comp: &RowSet,
    literals: &mut Vec<(usize, u8)>,
    out: &mut Vec<CellCount>,
) {
    for pos in start..features.len() {
        for v in 0..2u8 {
            let next_top = cur_top.intersect(&value_sets[pos][v as usize]);
            let next_comp = cur_comp.intersect(&value_sets[pos][v as usize]);
            literals.push((features[pos], v));
            let cell = Cell {
                literals: literals
                    .iter()
                    .map(|&(f, v)| (d.feature_names[f].clone(), v))
                    .collect(),
            };
            out.push(CellCount {
                cell,
                tp: next_top.len(),
                fp: next_comp.len(),
            });
            if literals.len() < m {
                enumerate_into(
                    d,
                    features,
                    value_sets,
                    m,
                    pos + 1,
                    &next_top,
                    &next_comp,
                    literals,
                    out,
                );
            }
            literals.pop();
        }
    }
}

/// One step of the cover search: band-filter by TP-FP, prune candidates
/// that are proper sub-cells of other candidates, then draw uniformly.
/// `None` means Stop (no cell with positive TP-FP remains).
pub fn cell_search_step(
    counts: &[CellCount],
    top_size: usize,
    band_frac: f64,
    rng: &mut ChaCha8Rng,
) -> Option<Cell> {
    let delta = |c: &CellCount| c.tp as i64 - c.fp as i64;
    let delta_max = counts.iter().map(&delta).max()?;
    if delta_max <= 0 {
        return None;
    }
    let floor = (delta_max as f64 - band_frac * top_size as f64).max(0.0);
    let in_band: Vec<&CellCount> = counts
        .iter()
        .filter(|c| delta(c) as f64 >= floor)
        .collect();
    let survivors: Vec<&CellCount> = in_band
        .iter()
        .filter(|c| {
            !in_band.iter().any(|other| {
                c.cell != other.cell && c.cell.is_subcell_of(&other.cell)
            })
        })
        .copied()
        .collect();
    debug_assert!(!survivors.is_empty(), "a maximal candidate always remains");
    let pick = rng.gen_range(0..survivors.len());
    Some(survivors[pick].cell.clone())
}

/// An ordered cell cover from one randomized search run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverRun {
    /// Provenance label, e.g. "fold1/q0.2/rep3".
    pub label: String,
    pub cells: Vec<Cell>,
}

/// Iterative cover search: enumerate on the residual population, pick a
/// cell, remove its members, repeat until Stop or `max_iter` cells.
pub fn cell_search(
    d: &Dataset,
    idx: &[usize],
    top: &RowSet,
    features: &[usize],
    m: usize,
    max_iter: usize,
    band_frac: f64,
    rng: &mut ChaCha8Rng,
    label: String,
) -> Result<CoverRun> {
    let mut excluded = RowSet::empty(d.n());
    let mut cells = Vec::new();
    let pop = RowSet::from_indices(d.n(), idx);
    for _ in 0..max_iter {
        let mut residual_top = pop.intersect(top);
        residual_top.subtract(&excluded);
        if residual_top.is_empty() {
            break;
        }
        let counts = enumerate_cells(d, idx, features, m, top, &excluded)?;
        let Some(cell) = cell_search_step(&counts, residual_top.len(), band_frac, rng) else {
            break;
        };
        let members = cell.members(d)?;
        for row in members.intersect(&pop).iter() {
            excluded.insert(row);
        }
        cells.push(cell);
    }
    Ok(CoverRun { label, cells })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StabRow {
    pub cell: Cell,
    /// Stability score; 1 means the cell itself appeared in every run.
    pub stab: f64,
    /// Fraction of runs whose cover contains the cell verbatim.
    pub run_frequency: f64,
    /// Mean 1-based position within the covers that contain it.
    pub mean_rank: Option<f64>,
    /// Population count on the reference index set.
    pub size: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StabTable {
    /// Sorted by descending stability; ties by cell notation.
    pub rows: Vec<StabRow>,
    pub threshold: f64,
    pub runs: usize,
}

/// Aggregate repeated cover runs: Stab(C) averages, over runs, the total
/// relative size of cover cells that are (reflexively) sub-cells of C.
/// Sizes are counted on `idx`, the full reference population.
pub fn stabilized_cell_search(
    runs: &[CoverRun],
    d: &Dataset,
    idx: &[usize],
    threshold: f64,
) -> Result<StabTable> {
    if runs.is_empty() {
        return Err(Error::InvalidConfig("no cover runs to aggregate".into()));
    }
    let pop = RowSet::from_indices(d.n(), idx);
    let mut candidates: BTreeMap<Cell, usize> = BTreeMap::new();
    for run in runs {
        for cell in &run.cells {
            if !candidates.contains_key(cell) {
                let size = cell.members(d)?.intersect(&pop).len();
                candidates.insert(cell.clone(), size);
            }
        }
    }

    let mut rows = Vec::with_capacity(candidates.len());
    for (cell, size) in &candidates {
        let mut stab = 0.0;
        let mut appearances = 0usize;
        let mut rank_sum = 0usize;
        for run in runs {
            for (pos, found) in run.cells.iter().enumerate() {
                if found.is_subcell_of(cell) && *size > 0 {
                    stab += candidates[found] as f64 / *size as f64;
                }
                if found == cell {
                    appearances += 1;
                    rank_sum += pos + 1;
                }
            }
        }
        rows.push(StabRow {
            cell: cell.clone(),
            stab: stab / runs.len() as f64,
            run_frequency: appearances as f64 / runs.len() as f64,
            mean_rank: (appearances > 0).then(|| rank_sum as f64 / appearances as f64),
            size: *size,
        });
    }
    rows.sort_by(|a, b| {
        b.stab
            .total_cmp(&a.stab)
            .then_with(|| a.cell.to_string().cmp(&b.cell.to_string()))
    });
    Ok(StabTable {
        rows,
        threshold,
        runs: runs.len(),
    })
}

/// Pairwise member-intersection counts; the diagonal holds cell sizes.
pub fn cell_overlap_matrix(cells: &[Cell], d: &Dataset, idx: &[usize]) -> Result<Vec<Vec<usize>>> {
    let pop = RowSet::from_indices(d.n(), idx);
    let sets: Vec<RowSet> = cells
        .iter()
        .map(|c| Ok(c.members(d)?.intersect(&pop)))
        .collect::<Result<_>>()?;
    let k = sets.len();
    let mut matrix = vec![vec![0usize; k]; k];
    for i in 0..k {
        for j in i..k {
            let count = sets[i].intersect_count(&sets[j]);
            matrix[i][j] = count;
            matrix[j][i] = count;
        }
    }
    Ok(matrix)
}
