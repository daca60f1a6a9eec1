//! Difference-in-means effect estimates, the subgroup-vs-average t-statistic,
//! normal-tail p-values, and Holm step-down multiple-testing control.
//!
//! Everything here conditions on the realized treatment assignment: variances
//! are Bessel-corrected sample variances of the observed arms.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rowset::RowSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tail {
    Left,
    Right,
}

/// A risk-difference estimate with its standard error and optional
/// t-statistic, plus the arm counts it was computed from.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub point: f64,
    pub std: f64,
    pub t_stat: Option<f64>,
    pub n_treated: usize,
    pub n_control: usize,
    pub events_treated: usize,
    pub events_control: usize,
}

impl EffectEstimate {
    pub fn events(&self) -> usize {
        self.events_treated + self.events_control
    }

    pub fn size(&self) -> usize {
        self.n_treated + self.n_control
    }
}

struct Arm {
    n: usize,
    events: usize,
}

impl Arm {
    fn mean(&self) -> f64 {
        self.events as f64 / self.n as f64
    }

    /// Bessel-corrected sample variance of a 0/1 column: e(n-e) / (n(n-1)).
    /// Defined as 0 for n < 2 (no estimable spread).
    fn var(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        let e = self.events as f64;
        e * (n - e) / (n * (n - 1.0))
    }
}

fn arms(d: &Dataset, y: &[u8], idx: &[usize], g: Option<&RowSet>) -> (Arm, Arm) {
    let mut treated = Arm { n: 0, events: 0 };
    let mut control = Arm { n: 0, events: 0 };
    for &i in idx {
        if let Some(set) = g {
            if !set.contains(i) {
                continue;
            }
        }
        let arm = if d.treatment[i] == 1 {
            &mut treated
        } else {
            &mut control
        };
        arm.n += 1;
        arm.events += usize::from(y[i] == 1);
    }
    (treated, control)
}

fn estimate(treated: Arm, control: Arm) -> EffectEstimate {
    EffectEstimate {
        point: treated.mean() - control.mean(),
        std: (treated.var() / treated.n as f64 + control.var() / control.n as f64).sqrt(),
        t_stat: None,
        n_treated: treated.n,
        n_control: control.n,
        events_treated: treated.events,
        events_control: control.events,
    }
}

/// Plug-in average-treatment-effect estimate over `idx`.
pub fn ate_hat(d: &Dataset, idx: &[usize], outcome: &str) -> Result<EffectEstimate> {
    let y = d.outcome(outcome)?;
    let (treated, control) = arms(d, y, idx, None);
    if treated.n == 0 {
        return Err(Error::EmptyArm("treated"));
    }
    if control.n == 0 {
        return Err(Error::EmptyArm("control"));
    }
    Ok(estimate(treated, control))
}

/// Plug-in subgroup effect estimate over `idx ∩ g`.
pub fn subgroup_cate_hat(
    d: &Dataset,
    idx: &[usize],
    g: &RowSet,
    outcome: &str,
) -> Result<EffectEstimate> {
    let y = d.outcome(outcome)?;
    let (treated, control) = arms(d, y, idx, Some(g));
    if treated.n == 0 || control.n == 0 {
        return Err(Error::EmptySubgroupArm);
    }
    Ok(estimate(treated, control))
}

/// t-statistic comparing the subgroup effect against the average effect over
/// the same index set.
///
/// The returned estimate carries the contrast: `point` = τ̂_G − τ̂_ATE, `std`
/// = the square root of the four-block conditional variance, `t_stat` =
/// point/std (missing when the variance estimate is zero). Counts and events
/// refer to the subgroup's arms.
pub fn tstat_vs_ate(
    d: &Dataset,
    idx: &[usize],
    g: &RowSet,
    outcome: &str,
) -> Result<EffectEstimate> {
    let y = d.outcome(outcome)?;
    let (g_t, g_c) = arms(d, y, idx, Some(g));
    let (all_t, all_c) = arms(d, y, idx, None);
    let (gc_t, gc_c) = (
        Arm {
            n: all_t.n - g_t.n,
            events: all_t.events - g_t.events,
        },
        Arm {
            n: all_c.n - g_c.n,
            events: all_c.events - g_c.events,
        },
    );
    for (block, name) in [
        (&g_t, "subgroup treated"),
        (&g_c, "subgroup control"),
        (&gc_t, "complement treated"),
        (&gc_c, "complement control"),
    ] {
        if block.n < 2 {
            return Err(Error::BlockTooSmall(format!(
                "{name} has {} member(s), need at least 2",
                block.n
            )));
        }
    }

    let gap = (g_t.mean() - g_c.mean()) - (all_t.mean() - all_c.mean());
    let w_c = gc_c.n as f64 / all_c.n as f64;
    let w_t = gc_t.n as f64 / all_t.n as f64;
    let var = w_c * w_c * (g_c.var() / g_c.n as f64 + gc_c.var() / gc_c.n as f64)
        + w_t * w_t * (g_t.var() / g_t.n as f64 + gc_t.var() / gc_t.n as f64);
    let std = var.sqrt();
    Ok(EffectEstimate {
        point: gap,
        std,
        t_stat: if var > 0.0 { Some(gap / std) } else { None },
        n_treated: g_t.n,
        n_control: g_c.n,
        events_treated: g_t.events,
        events_control: g_c.events,
    })
}

/// Standard-normal tail probability of `t`, clamped into (0, 1).
pub fn one_sided_p(t: f64, tail: Tail) -> f64 {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let p = match tail {
        Tail::Left => normal.cdf(t),
        Tail::Right => 1.0 - normal.cdf(t),
    };
    p.clamp(1e-300, 1.0 - 1e-16)
}

/// Holm step-down rejections at family-wise error rate `alpha`, mapped back
/// to input order. Rejects while the k-th smallest p ≤ alpha/(m−k+1).
pub fn holm_bonferroni(pvals: &[f64], alpha: f64) -> Vec<bool> {
    let m = pvals.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvals[a].partial_cmp(&pvals[b]).unwrap().then(a.cmp(&b)));
    let mut reject = vec![false; m];
    for (k, &i) in order.iter().enumerate() {
        if pvals[i] <= alpha / (m - k) as f64 {
            reject[i] = true;
        } else {
            break;
        }
    }
    reject
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::collections::BTreeMap;

    /// Dataset with the given per-arm (events, size) outcome counts and a
    /// single subgroup-defining feature set on the first `g_*` rows per arm.
    fn from_counts(treated: (usize, usize), control: (usize, usize)) -> Dataset {
        let (e1, n1) = treated;
        let (e0, n0) = control;
        let mut t = Vec::new();
        let mut y = Vec::new();
        t.extend(std::iter::repeat(1u8).take(n1));
        y.extend((0..n1).map(|i| u8::from(i < e1)));
        t.extend(std::iter::repeat(0u8).take(n0));
        y.extend((0..n0).map(|i| u8::from(i < e0)));
        let n = t.len();
        Dataset::from_parts(
            vec!["F0".into()],
            vec![vec![0; n]],
            t,
            BTreeMap::from([("Y".into(), y)]),
            None,
            BTreeMap::new(),
        )
        .unwrap()
    }

    #[test]
    fn ate_matches_published_aggregates() {
        let d = from_counts((56, 4047), (121, 4029));
        let idx: Vec<usize> = (0..d.n()).collect();
        let est = ate_hat(&d, &idx, "Y").unwrap();
        assert_abs_diff_eq!(est.point, -0.016, epsilon = 5e-4);
        assert_abs_diff_eq!(est.std, 0.003, epsilon = 5e-4);

        let d = from_counts((41, 4047), (18, 4029));
        let est = ate_hat(&d, &idx, "Y").unwrap();
        assert_abs_diff_eq!(est.point, 0.006, epsilon = 5e-4);
        assert_abs_diff_eq!(est.std, 0.002, epsilon = 5e-4);
    }

    #[test]
    fn extreme_outcomes_have_zero_std() {
        let d = from_counts((3, 3), (0, 3));
        let idx: Vec<usize> = (0..6).collect();
        let est = ate_hat(&d, &idx, "Y").unwrap();
        assert_eq!(est.point, 1.0);
        assert_eq!(est.std, 0.0);
    }

    #[test]
    fn full_subgroup_equals_ate_exactly() {
        let d = from_counts((17, 40), (9, 35));
        let idx: Vec<usize> = (0..d.n()).collect();
        let full = RowSet::full(d.n());
        let a = ate_hat(&d, &idx, "Y").unwrap();
        let b = subgroup_cate_hat(&d, &idx, &full, "Y").unwrap();
        assert_eq!(a.point, b.point);
        assert_eq!(a.std, b.std);
        assert_eq!(
            (a.events_treated, a.events_control),
            (b.events_treated, b.events_control)
        );
    }

    #[test]
    fn four_row_toy_subgroup_effect() {
        // treated in G: outcomes {1, 0}; control in G: {0, 0}
        let d = from_counts((1, 2), (0, 2));
        let g = RowSet::full(d.n());
        let est = subgroup_cate_hat(&d, &[0, 1, 2, 3], &g, "Y").unwrap();
        assert_eq!(est.point, 0.5);
    }

    #[test]
    fn empty_subgroup_arm_is_an_error() {
        let d = from_counts((1, 2), (0, 2));
        let g = RowSet::from_indices(d.n(), &[0, 1]); // treated rows only
        assert!(matches!(
            subgroup_cate_hat(&d, &[0, 1, 2, 3], &g, "Y"),
            Err(Error::EmptySubgroupArm)
        ));
    }

    #[test]
    fn constant_outcomes_make_t_missing() {
        let d = from_counts((4, 4), (0, 4));
        let idx: Vec<usize> = (0..8).collect();
        // subgroup: 2 treated + 2 control rows; every block constant
        let g = RowSet::from_indices(d.n(), &[0, 1, 4, 5]);
        let est = tstat_vs_ate(&d, &idx, &g, "Y").unwrap();
        assert_eq!(est.std, 0.0);
        assert!(est.t_stat.is_none());
    }

    #[test]
    fn small_block_is_an_error() {
        let d = from_counts((2, 5), (1, 5));
        let idx: Vec<usize> = (0..10).collect();
        let g = RowSet::from_indices(d.n(), &[0, 5]); // 1 treated, 1 control
        assert!(matches!(
            tstat_vs_ate(&d, &idx, &g, "Y"),
            Err(Error::BlockTooSmall(_))
        ));
    }

    #[test]
    fn p_value_mapping() {
        assert_abs_diff_eq!(one_sided_p(-1.96, Tail::Left), 0.025, epsilon = 5e-4);
        assert_abs_diff_eq!(one_sided_p(2.650, Tail::Right), 0.004, epsilon = 5e-4);
        assert_eq!(one_sided_p(0.0, Tail::Left), 0.5);
        assert_eq!(one_sided_p(0.0, Tail::Right), 0.5);
    }

    #[test]
    fn holm_rejects_published_set() {
        // The published table is rounded to 3-4 significant digits, and its
        // third comparison (p = 0.0167 vs cutoff 0.05/3) only clears at that
        // display precision: the exact tail probability of t = 2.128 is
        // 0.0166685, above the exact cutoff by 2e-6. Reproduce the published
        // arithmetic: round both sides to 4 decimals, then step down.
        let t = [2.650, 2.251, 2.128, 2.012, 1.664];
        let expected = [0.004, 0.012, 0.0167, 0.022, 0.048];
        let p: Vec<f64> = t.iter().map(|&t| one_sided_p(t, Tail::Right)).collect();
        for (pi, ei) in p.iter().zip(&expected) {
            assert_abs_diff_eq!(pi, ei, epsilon = 5e-4);
        }
        let round4 = |x: f64| (x * 1e4).round() / 1e4;
        let m = p.len();
        for (k, pi) in p.iter().enumerate() {
            assert!(round4(*pi) <= round4(0.05 / (m - k) as f64));
        }
        // exact arithmetic still rejects the two clear leaders
        let exact = holm_bonferroni(&p, 0.05);
        assert!(exact[0] && exact[1]);
    }

    #[test]
    fn holm_single_large_p() {
        assert_eq!(holm_bonferroni(&[0.5], 0.05), vec![false]);
    }

    #[test]
    fn holm_stops_at_first_failure() {
        // cutoffs are 0.05/3, 0.025, 0.05: 0.03 > 0.025 stops the walk after
        // the first rejection
        assert_eq!(
            holm_bonferroni(&[0.01, 0.03, 0.9], 0.05),
            vec![true, false, false]
        );
        // out-of-order input maps back to input positions
        assert_eq!(
            holm_bonferroni(&[0.9, 0.01, 0.02], 0.05),
            vec![false, true, true]
        );
    }
}
