//! Bagged CART regression trees over binary features.
//!
//! Splits maximize weighted variance reduction; each split considers a
//! random subset of ceil(sqrt(p)) features. Trees draw independent RNG
//! streams from (seed, tree index), so training is schedule-independent
//! and may run in parallel.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Node {
    Leaf { value: f64 },
    /// Rows with feature value <= 0.5 go left.
    Split { feature: usize, left: usize, right: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { value } => return value,
                Node::Split { feature, left, right } => {
                    at = if row[feature] <= 0.5 { left } else { right };
                }
            }
        }
    }
}

pub(crate) struct ForestSettings {
    pub n_trees: usize,
    pub min_samples_leaf: usize,
    pub max_depth: Option<usize>,
    pub bootstrap: bool,
}

/// Weighted sums over a set of rows: count is unweighted.
#[derive(Clone, Copy, Default)]
struct Moments {
    count: usize,
    w: f64,
    wy: f64,
    wyy: f64,
}

impl Moments {
    fn add(&mut self, wi: f64, yi: f64) {
        self.count += 1;
        self.w += wi;
        self.wy += wi * yi;
        self.wyy += wi * yi * yi;
    }

    fn sse(&self) -> f64 {
        if self.w <= 0.0 {
            return 0.0;
        }
        (self.wyy - self.wy * self.wy / self.w).max(0.0)
    }

    fn mean(&self) -> f64 {
        if self.w > 0.0 {
            self.wy / self.w
        } else {
            0.0
        }
    }
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    w: &'a [f64],
    p: usize,
    features_per_split: usize,
    min_leaf: usize,
    max_depth: Option<usize>,
    nodes: Vec<Node>,
    rng: rand_chacha::ChaCha8Rng,
}

impl Builder<'_> {
    /// Returns the index of the subtree root built over `rows`.
    fn build(&mut self, rows: &[usize], depth: usize) -> usize {
        let mut total = Moments::default();
        for &i in rows {
            total.add(self.w[i], self.y[i]);
        }
        let depth_capped = self.max_depth.is_some_and(|d| depth >= d);
        if depth_capped || rows.len() < 2 * self.min_leaf || total.sse() <= 1e-12 {
            return self.leaf(total.mean());
        }

        // sample candidate features without replacement
        let mut candidates: Vec<usize> = (0..self.p).collect();
        for k in 0..self.features_per_split.min(self.p) {
            let pick = self.rng.gen_range(k..self.p);
            candidates.swap(k, pick);
        }
        candidates.truncate(self.features_per_split.min(self.p));

        let mut best: Option<(f64, usize)> = None;
        for &j in &candidates {
            let mut ones = Moments::default();
            for &i in rows {
                if self.x[i][j] > 0.5 {
                    ones.add(self.w[i], self.y[i]);
                }
            }
            let zeros_count = rows.len() - ones.count;
            if ones.count < self.min_leaf || zeros_count < self.min_leaf {
                continue;
            }
            let zeros = Moments {
                count: zeros_count,
                w: total.w - ones.w,
                wy: total.wy - ones.wy,
                wyy: total.wyy - ones.wyy,
            };
            if ones.w <= 0.0 || zeros.w <= 0.0 {
                continue;
            }
            let reduction = total.sse() - ones.sse() - zeros.sse();
            if reduction > 1e-12 && best.map_or(true, |(r, _)| reduction > r) {
                best = Some((reduction, j));
            }
        }
        let Some((_, feature)) = best else {
            return self.leaf(total.mean());
        };

        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
            rows.iter().partition(|&&i| self.x[i][feature] <= 0.5);
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf { value: 0.0 }); // placeholder until children exist
        let left = self.build(&left_rows, depth + 1);
        let right = self.build(&right_rows, depth + 1);
        self.nodes[at] = Node::Split { feature, left, right };
        at
    }

    fn leaf(&mut self, value: f64) -> usize {
        self.nodes.push(Node::Leaf { value });
        self.nodes.len() - 1
    }
}

pub(crate) fn fit(
    x: &[Vec<f64>],
    y: &[f64],
    w: &[f64],
    settings: &ForestSettings,
    seed: u64,
) -> Vec<Tree> {
    let n = x.len();
    let p = x[0].len();
    let features_per_split = ((p as f64).sqrt().ceil() as usize).max(1);
    (0..settings.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream(seed, &format!("tree/{t}"));
            let rows: Vec<usize> = if settings.bootstrap {
                (0..n).map(|_| rng.gen_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            let mut builder = Builder {
                x,
                y,
                w,
                p,
                features_per_split,
                min_leaf: settings.min_samples_leaf,
                max_depth: settings.max_depth,
                nodes: Vec::new(),
                rng,
            };
            let root = builder.build(&rows, 0);
            debug_assert_eq!(root, 0);
            Tree { nodes: builder.nodes }
        })
        .collect()
}

pub(crate) fn predict_row(trees: &[Tree], row: &[f64]) -> f64 {
    trees.iter().map(|t| t.predict_row(row)).sum::<f64>() / trees.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn toy() -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
        let x = vec![
            vec![0.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![1.0, 1.0],
            vec![0.0, 0.0],
            vec![1.0, 1.0],
        ];
        let y = vec![0.0, 1.0, 1.0, 0.0, 1.0, 1.0];
        let w = vec![1.0; 6];
        (x, y, w)
    }

    #[test]
    fn single_leaf_tree_predicts_the_mean() {
        let (x, y, w) = toy();
        let settings = ForestSettings {
            n_trees: 1,
            min_samples_leaf: y.len(),
            max_depth: None,
            bootstrap: false,
        };
        let trees = fit(&x, &y, &w, &settings, 9);
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        assert_eq!(trees.len(), 1);
        assert_abs_diff_eq!(predict_row(&trees, &[0.0, 1.0]), mean, epsilon = 1e-12);
    }

    #[test]
    fn depth_zero_cap_also_yields_the_root_mean() {
        let (x, y, w) = toy();
        let settings = ForestSettings {
            n_trees: 1,
            min_samples_leaf: 1,
            max_depth: Some(0),
            bootstrap: false,
        };
        let trees = fit(&x, &y, &w, &settings, 9);
        assert_eq!(trees[0].nodes.len(), 1);
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        assert_abs_diff_eq!(predict_row(&trees, &[1.0, 0.0]), mean, epsilon = 1e-12);
    }

    #[test]
    fn fully_grown_tree_recovers_weighted_group_means() {
        // one binary feature, weights chosen so group means are lopsided
        let x = vec![vec![0.0], vec![0.0], vec![1.0], vec![1.0]];
        let y = vec![0.0, 1.0, 0.0, 1.0];
        let w = vec![3.0, 1.0, 1.0, 4.0];
        let settings = ForestSettings {
            n_trees: 1,
            min_samples_leaf: 1,
            max_depth: None,
            bootstrap: false,
        };
        let trees = fit(&x, &y, &w, &settings, 3);
        assert_abs_diff_eq!(predict_row(&trees, &[0.0]), 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(predict_row(&trees, &[1.0]), 0.8, epsilon = 1e-12);
    }

    #[test]
    fn forest_prediction_is_the_mean_of_tree_leaves() {
        let (x, y, w) = toy();
        let settings = ForestSettings {
            n_trees: 25,
            min_samples_leaf: 1,
            max_depth: None,
            bootstrap: true,
        };
        let trees = fit(&x, &y, &w, &settings, 42);
        for row in &x {
            let by_hand: f64 =
                trees.iter().map(|t| t.predict_row(row)).sum::<f64>() / trees.len() as f64;
            assert_abs_diff_eq!(predict_row(&trees, row), by_hand, epsilon = 0.0);
            // convex-hull property for binary targets
            let p = predict_row(&trees, row);
            assert!((0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn training_is_deterministic_and_schedule_independent() {
        let (x, y, w) = toy();
        let settings = ForestSettings {
            n_trees: 8,
            min_samples_leaf: 1,
            max_depth: None,
            bootstrap: true,
        };
        let a = fit(&x, &y, &w, &settings, 7);
        let b = fit(&x, &y, &w, &settings, 7);
        assert_eq!(a, b);
        let c = fit(&x, &y, &w, &settings, 8);
        assert_ne!(a, c);
    }
}
