//! Weighted L2-regularized logistic regression via damped Newton steps.
//!
//! Objective: (1 / W) Σ wᵢ ℓ(yᵢ, ηᵢ) + (λ / 2) ‖β‖₂² with W = Σ wᵢ, where
//! ℓ is the negative Bernoulli log-likelihood and the intercept is not
//! penalized. Targets may be any reals in [0, 1].

pub(crate) struct LogisticFit {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    /// Objective before the first step and after each accepted step.
    pub nll_trace: Vec<f64>,
}

const GRAD_TOL: f64 = 1e-7;
const MAX_ITER: usize = 200;

pub(crate) fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(eta)) - y * eta, computed without overflow.
fn bernoulli_nll(y: f64, eta: f64) -> f64 {
    if eta >= 0.0 {
        (1.0 - y) * eta + (-eta).exp().ln_1p()
    } else {
        -y * eta + eta.exp().ln_1p()
    }
}

/// beta[0] is the intercept, beta[1..] the feature coefficients.
fn penalized_nll(x: &[Vec<f64>], y: &[f64], w: &[f64], lambda: f64, beta: &[f64]) -> f64 {
    let w_total: f64 = w.iter().sum();
    let mut nll = 0.0;
    for (i, row) in x.iter().enumerate() {
        let eta = beta[0] + row.iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>();
        nll += w[i] * bernoulli_nll(y[i], eta);
    }
    let ridge: f64 = beta[1..].iter().map(|b| b * b).sum();
    nll / w_total + 0.5 * lambda * ridge
}

/// Solve the symmetric positive definite system a·x = b in place via
/// Cholesky. Returns None when a pivot is not positive.
fn cholesky_solve(a: &mut [Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let d = b.len();
    for j in 0..d {
        for k in 0..j {
            let ajk = a[j][k];
            for i in j..d {
                a[i][j] -= a[i][k] * ajk;
            }
        }
        if a[j][j] <= 0.0 {
            return None;
        }
        let pivot = a[j][j].sqrt();
        for i in j..d {
            a[i][j] /= pivot;
        }
    }
    // forward then backward substitution against the lower factor
    let mut x = b.to_vec();
    for i in 0..d {
        for k in 0..i {
            x[i] -= a[i][k] * x[k];
        }
        x[i] /= a[i][i];
    }
    for i in (0..d).rev() {
        for k in i + 1..d {
            x[i] -= a[k][i] * x[k];
        }
        x[i] /= a[i][i];
    }
    Some(x)
}

pub(crate) fn fit(x: &[Vec<f64>], y: &[f64], w: &[f64], lambda: f64) -> LogisticFit {
    let p = if x.is_empty() { 0 } else { x[0].len() };
    let d = p + 1;
    let w_total: f64 = w.iter().sum();

    let mut beta = vec![0.0; d];
    let mut nll = penalized_nll(x, y, w, lambda, &beta);
    let mut trace = vec![nll];

    for _ in 0..MAX_ITER {
        // gradient and Hessian of the penalized objective
        let mut grad = vec![0.0; d];
        let mut hess = vec![vec![0.0; d]; d];
        for (i, row) in x.iter().enumerate() {
            let eta = beta[0] + row.iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>();
            let prob = sigmoid(eta);
            let g = w[i] * (prob - y[i]) / w_total;
            let h = w[i] * prob * (1.0 - prob) / w_total;
            grad[0] += g;
            hess[0][0] += h;
            for (j, &vj) in row.iter().enumerate() {
                grad[j + 1] += g * vj;
                hess[j + 1][0] += h * vj;
                for (k, &vk) in row.iter().enumerate().take(j + 1) {
                    hess[j + 1][k + 1] += h * vj * vk;
                }
            }
        }
        for j in 1..d {
            grad[j] += lambda * beta[j];
            hess[j][j] += lambda;
        }
        let grad_norm = grad.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
        if grad_norm <= GRAD_TOL {
            break;
        }

        // Newton direction, with escalating ridge jitter if the Hessian is
        // numerically singular (possible at lambda = 0 on separated data)
        let mut step = None;
        let mut jitter = 0.0;
        for _ in 0..6 {
            let mut a: Vec<Vec<f64>> = hess.clone();
            if jitter > 0.0 {
                for (j, row) in a.iter_mut().enumerate() {
                    row[j] += jitter;
                }
            }
            if let Some(s) = cholesky_solve(&mut a, &grad) {
                step = Some(s);
                break;
            }
            jitter = if jitter == 0.0 { 1e-10 } else { jitter * 1e3 };
        }
        let step = match step {
            Some(s) => s,
            None => break,
        };

        // backtracking line search on the Newton direction
        let descent: f64 = grad.iter().zip(&step).map(|(g, s)| g * s).sum();
        let mut eta = 1.0;
        let mut accepted = false;
        while eta > 1e-10 {
            let candidate: Vec<f64> = beta
                .iter()
                .zip(&step)
                .map(|(b, s)| b - eta * s)
                .collect();
            let candidate_nll = penalized_nll(x, y, w, lambda, &candidate);
            if candidate_nll <= nll - 1e-4 * eta * descent {
                beta = candidate;
                nll = candidate_nll;
                trace.push(nll);
                accepted = true;
                break;
            }
            eta *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    LogisticFit {
        intercept: beta[0],
        coefficients: beta[1..].to_vec(),
        nll_trace: trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    // With a single binary feature and no penalty, the maximum-likelihood
    // fit is saturated: predicted probability per feature level equals that
    // level's empirical outcome rate.
    #[test]
    fn unpenalized_fit_recovers_group_rates() {
        let x = vec![
            vec![0.0],
            vec![0.0],
            vec![0.0],
            vec![1.0],
            vec![1.0],
            vec![1.0],
        ];
        let y = [0.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let w = [1.0; 6];
        let fit = fit(&x, &y, &w, 0.0);
        let p0 = sigmoid(fit.intercept);
        let p1 = sigmoid(fit.intercept + fit.coefficients[0]);
        assert_abs_diff_eq!(p0, 1.0 / 3.0, epsilon = 1e-6);
        assert_abs_diff_eq!(p1, 2.0 / 3.0, epsilon = 1e-6);
    }

    #[test]
    fn separated_data_orders_probabilities_with_the_direction() {
        let x = vec![vec![0.0], vec![0.0], vec![1.0], vec![1.0]];
        let y = [0.0, 0.0, 1.0, 1.0];
        let w = [1.0; 4];
        let fit = fit(&x, &y, &w, 0.0);
        let p0 = sigmoid(fit.intercept);
        let p1 = sigmoid(fit.intercept + fit.coefficients[0]);
        assert!(p1 > p0);
        assert!(p0 > 0.0 && p1 < 1.0);
    }

    #[test]
    fn objective_never_increases_across_accepted_steps() {
        let x = vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 1.0],
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
        ];
        let y = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let w = [1.0, 2.0, 1.0, 0.5, 1.0, 1.5];
        let fit = fit(&x, &y, &w, 0.05);
        for pair in fit.nll_trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12);
        }
    }
}
