//! Weighted lasso regression solved by cyclic coordinate descent.
//!
//! Objective: (1 / 2W) Σ wᵢ (yᵢ − β₀ − xᵢᵀβ)² + λ ‖β‖₁ with W = Σ wᵢ.
//! The intercept is never penalized.

pub(crate) struct LassoFit {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    /// Penalized objective before the first sweep and after each sweep.
    pub objective_trace: Vec<f64>,
}

const TOL: f64 = 1e-7;
const MAX_SWEEPS: usize = 10_000;

pub(crate) fn objective(
    x: &[Vec<f64>],
    y: &[f64],
    w: &[f64],
    lambda: f64,
    intercept: f64,
    beta: &[f64],
) -> f64 {
    let w_total: f64 = w.iter().sum();
    let mut sse = 0.0;
    for (i, row) in x.iter().enumerate() {
        let fitted = intercept + dot(row, beta);
        let r = y[i] - fitted;
        sse += w[i] * r * r;
    }
    let l1: f64 = beta.iter().map(|b| b.abs()).sum();
    sse / (2.0 * w_total) + lambda * l1
}

fn dot(row: &[f64], beta: &[f64]) -> f64 {
    row.iter().zip(beta).map(|(a, b)| a * b).sum()
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

pub(crate) fn fit(x: &[Vec<f64>], y: &[f64], w: &[f64], lambda: f64) -> LassoFit {
    let n = x.len();
    let p = if n == 0 { 0 } else { x[0].len() };
    let w_total: f64 = w.iter().sum();

    // Second moments per coordinate; zero for a constant-zero column, which
    // then keeps its coefficient pinned at zero.
    let mut z = vec![0.0; p];
    for (i, row) in x.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            z[j] += w[i] * v * v;
        }
    }
    for zj in &mut z {
        *zj /= w_total;
    }

    let mut beta = vec![0.0; p];
    let mut intercept = y
        .iter()
        .zip(w)
        .map(|(yi, wi)| wi * yi)
        .sum::<f64>()
        / w_total;
    let mut residual: Vec<f64> = y.iter().map(|yi| yi - intercept).collect();

    let mut trace = vec![objective(x, y, w, lambda, intercept, &beta)];
    for _ in 0..MAX_SWEEPS {
        let mut max_update = 0.0_f64;
        for j in 0..p {
            if z[j] == 0.0 {
                continue;
            }
            let mut rho = 0.0;
            for (i, row) in x.iter().enumerate() {
                rho += w[i] * row[j] * residual[i];
            }
            rho = rho / w_total + z[j] * beta[j];
            let updated = soft_threshold(rho, lambda) / z[j];
            let delta = updated - beta[j];
            if delta != 0.0 {
                for (i, row) in x.iter().enumerate() {
                    residual[i] -= row[j] * delta;
                }
                beta[j] = updated;
                max_update = max_update.max(delta.abs());
            }
        }
        let shift = residual
            .iter()
            .zip(w)
            .map(|(ri, wi)| wi * ri)
            .sum::<f64>()
            / w_total;
        if shift != 0.0 {
            intercept += shift;
            for r in &mut residual {
                *r -= shift;
            }
            max_update = max_update.max(shift.abs());
        }
        trace.push(objective(x, y, w, lambda, intercept, &beta));
        if max_update <= TOL {
            break;
        }
    }

    LassoFit {
        intercept,
        coefficients: beta,
        objective_trace: trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    // Identity-like design plus an all-zero row makes the least-squares
    // solution unique and hand-computable: intercept = y of the zero row,
    // each coefficient = its row's y minus that intercept.
    #[test]
    fn unregularized_fit_matches_exact_least_squares() {
        let x = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 0.0, 0.0],
        ];
        let y = [1.2, -0.4, 3.0, 0.5];
        let w = [1.0; 4];
        let fit = fit(&x, &y, &w, 0.0);
        assert_abs_diff_eq!(fit.intercept, 0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(fit.coefficients[0], 0.7, epsilon = 1e-6);
        assert_abs_diff_eq!(fit.coefficients[1], -0.9, epsilon = 1e-6);
        assert_abs_diff_eq!(fit.coefficients[2], 2.5, epsilon = 1e-6);
    }

    #[test]
    fn total_shrinkage_leaves_weighted_mean() {
        let x = vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 1.0],
            vec![0.0, 0.0],
        ];
        let y = [2.0, 0.0, 4.0, 1.0];
        let w = [1.0, 2.0, 3.0, 4.0];
        let fit = fit(&x, &y, &w, 1e9);
        assert!(fit.coefficients.iter().all(|&b| b == 0.0));
        let mean = (2.0 + 0.0 + 12.0 + 4.0) / 10.0;
        assert_abs_diff_eq!(fit.intercept, mean, epsilon = 1e-12);
    }

    #[test]
    fn objective_never_increases_across_sweeps() {
        let x = vec![
            vec![1.0, 1.0, 0.0],
            vec![1.0, 0.0, 1.0],
            vec![0.0, 1.0, 1.0],
            vec![0.0, 0.0, 0.0],
            vec![1.0, 1.0, 1.0],
            vec![0.0, 1.0, 0.0],
        ];
        let y = [3.1, -0.2, 0.7, 0.05, 2.4, 1.1];
        let w = [1.0, 0.5, 2.0, 1.0, 1.5, 0.25];
        let fit = fit(&x, &y, &w, 0.01);
        for pair in fit.objective_trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12);
        }
    }
}
