//! Sequential minimal optimization for the soft-margin SVM dual.
//!
//! Solves `min_a 1/2 a'Qa - e'a` s.t. `0 <= a_i <= C`, `y'a = 0`, with
//! `Q_ij = y_i y_j K_ij`, using second-order working-set selection. The
//! stopping rule is the maximal-violating-pair gap `m(a) - M(a) <= tol`;
//! any bias chosen inside `[M, m]` then satisfies every per-point KKT
//! condition to within `tol`.

use crate::error::{Error, Result};

const TAU: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoParams {
    pub c: f64,
    pub tol: f64,
    /// Iteration cap; `None` uses `max(10^7, 100 n)`.
    pub max_iter: Option<usize>,
}

impl Default for SmoParams {
    fn default() -> Self {
        SmoParams {
            c: 1.0,
            tol: 1e-3,
            max_iter: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualSolution {
    pub alpha: Vec<f64>,
    /// Bias `b` of `f(x) = sum_i alpha_i y_i K(x_i, x) + b`.
    pub bias: f64,
    /// Dual objective in maximisation form, `sum a - 1/2 a'Qa`.
    pub objective: f64,
    pub iterations: usize,
    /// Final maximal-violating-pair gap.
    pub violation: f64,
}

/// Dual objective `sum a - 1/2 a'Qa` evaluated directly from the Gram matrix.
pub fn dual_objective(gram: &[f64], y: &[f64], alpha: &[f64]) -> f64 {
    let n = y.len();
    let mut quad = 0.0;
    for i in 0..n {
        if alpha[i] == 0.0 {
            continue;
        }
        for j in 0..n {
            quad += alpha[i] * alpha[j] * y[i] * y[j] * gram[i * n + j];
        }
    }
    alpha.iter().sum::<f64>() - 0.5 * quad
}

/// Runs SMO on a dense row-major Gram matrix with labels in `{-1, +1}`.
pub fn solve_dual(gram: &[f64], y: &[f64], params: &SmoParams) -> Result<DualSolution> {
    solve_dual_traced(gram, y, params, None)
}

/// As [`solve_dual`], optionally recording the dual objective after every
/// iteration.
pub fn solve_dual_traced(
    gram: &[f64],
    y: &[f64],
    params: &SmoParams,
    mut trace: Option<&mut Vec<f64>>,
) -> Result<DualSolution> {
    let n = y.len();
    if n == 0 || gram.len() != n * n {
        return Err(Error::Training(format!("gram matrix of {} entries for {n} samples", gram.len())));
    }
    if y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(Error::Training("labels must be +1 or -1".into()));
    }
    if !(params.c > 0.0) || !(params.tol > 0.0) {
        return Err(Error::Config("C and tol must be positive".into()));
    }
    let c = params.c;
    let max_iter = params.max_iter.unwrap_or_else(|| 10_000_000usize.max(100 * n));
    let k = |i: usize, j: usize| gram[i * n + j];
    let qd: Vec<f64> = (0..n).map(|i| k(i, i)).collect();

    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let upper = |a: f64| a >= c;
    let lower = |a: f64| a <= 0.0;

    let mut iter = 0;
    let violation;
    loop {
        // i: maximal violator in I_up
        let mut gmax = f64::NEG_INFINITY;
        let mut gmax_idx = usize::MAX;
        for t in 0..n {
            if y[t] > 0.0 {
                if !upper(alpha[t]) && -grad[t] >= gmax {
                    gmax = -grad[t];
                    gmax_idx = t;
                }
            } else if !lower(alpha[t]) && grad[t] >= gmax {
                gmax = grad[t];
                gmax_idx = t;
            }
        }
        // j: second-order selection in I_low
        let mut gmax2 = f64::NEG_INFINITY;
        let mut gmin_idx = usize::MAX;
        let mut obj_diff_min = f64::INFINITY;
        if gmax_idx != usize::MAX {
            let i = gmax_idx;
            for j in 0..n {
                if y[j] > 0.0 {
                    if !lower(alpha[j]) {
                        let grad_diff = gmax + grad[j];
                        if grad[j] >= gmax2 {
                            gmax2 = grad[j];
                        }
                        if grad_diff > 0.0 {
                            let quad = qd[i] + qd[j] - 2.0 * y[i] * k(i, j);
                            let od = -(grad_diff * grad_diff) / if quad > 0.0 { quad } else { TAU };
                            if od <= obj_diff_min {
                                gmin_idx = j;
                                obj_diff_min = od;
                            }
                        }
                    }
                } else if !upper(alpha[j]) {
                    let grad_diff = gmax - grad[j];
                    if -grad[j] >= gmax2 {
                        gmax2 = -grad[j];
                    }
                    if grad_diff > 0.0 {
                        let quad = qd[i] + qd[j] + 2.0 * y[i] * k(i, j);
                        let od = -(grad_diff * grad_diff) / if quad > 0.0 { quad } else { TAU };
                        if od <= obj_diff_min {
                            gmin_idx = j;
                            obj_diff_min = od;
                        }
                    }
                }
            }
        }
        let gap = if gmax_idx == usize::MAX || gmax2 == f64::NEG_INFINITY { 0.0 } else { gmax + gmax2 };
        if gap < params.tol || gmin_idx == usize::MAX {
            violation = gap.max(0.0);
            break;
        }
        if iter >= max_iter {
            return Err(Error::Convergence {
                iterations: iter,
                violation: gap,
            });
        }
        iter += 1;

        let (i, j) = (gmax_idx, gmin_idx);
        let (old_ai, old_aj) = (alpha[i], alpha[j]);
        // Q_ij = y_i y_j K_ij
        let qij = y[i] * y[j] * k(i, j);
        if y[i] != y[j] {
            let quad = qd[i] + qd[j] + 2.0 * qij;
            let quad = if quad > 0.0 { quad } else { TAU };
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = qd[i] + qd[j] - 2.0 * qij;
            let quad = if quad > 0.0 { quad } else { TAU };
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let dai = alpha[i] - old_ai;
        let daj = alpha[j] - old_aj;
        for t in 0..n {
            grad[t] += y[t] * (y[i] * k(i, t) * dai + y[j] * k(j, t) * daj);
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(objective_from_grad(&alpha, &grad));
        }
    }

    // rho: mean of y_i G_i over free vectors, else midpoint of the feasible interval
    let mut ub = f64::INFINITY;
    let mut lb = f64::NEG_INFINITY;
    let mut nr_free = 0usize;
    let mut sum_free = 0.0;
    for t in 0..n {
        let yg = y[t] * grad[t];
        if upper(alpha[t]) {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if lower(alpha[t]) {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            nr_free += 1;
            sum_free += yg;
        }
    }
    let rho = if nr_free > 0 {
        sum_free / nr_free as f64
    } else if ub.is_finite() && lb.is_finite() {
        (ub + lb) / 2.0
    } else if ub.is_finite() {
        ub
    } else if lb.is_finite() {
        lb
    } else {
        0.0
    };

    Ok(DualSolution {
        objective: objective_from_grad(&alpha, &grad),
        alpha,
        bias: -rho,
        iterations: iter,
        violation,
    })
}

/// `sum a - 1/2 a'Qa` using `G = Qa - e`.
fn objective_from_grad(alpha: &[f64], grad: &[f64]) -> f64 {
    -0.5 * alpha.iter().zip(grad).map(|(a, g)| a * (g - 1.0)).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decision(gram: &[f64], y: &[f64], sol: &DualSolution, t: usize) -> f64 {
        let n = y.len();
        (0..n).map(|i| sol.alpha[i] * y[i] * gram[i * n + t]).sum::<f64>() + sol.bias
    }

    #[test]
    fn two_separable_points() {
        // 1-d points at +1 and -1 with linear kernel: alpha = 1/2, b = 0
        let gram = vec![1.0, -1.0, -1.0, 1.0];
        let y = vec![1.0, -1.0];
        let sol = solve_dual(&gram, &y, &SmoParams { c: 100.0, tol: 1e-9, max_iter: None }).unwrap();
        assert!((sol.alpha[0] - 0.5).abs() < 1e-12);
        assert!((sol.alpha[1] - 0.5).abs() < 1e-12);
        assert!(sol.bias.abs() < 1e-12);
        assert!((sol.objective - 0.5).abs() < 1e-12);
        assert!((decision(&gram, &y, &sol, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn box_constraint_binds_for_small_c() {
        let gram = vec![1.0, -1.0, -1.0, 1.0];
        let y = vec![1.0, -1.0];
        let sol = solve_dual(&gram, &y, &SmoParams { c: 0.1, tol: 1e-9, max_iter: None }).unwrap();
        assert_eq!(sol.alpha, vec![0.1, 0.1]);
        assert!((sol.objective - dual_objective(&gram, &y, &sol.alpha)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(solve_dual(&[1.0], &[0.5], &SmoParams::default()).is_err());
        assert!(solve_dual(&[1.0, 0.0], &[1.0], &SmoParams::default()).is_err());
        assert!(solve_dual(&[], &[], &SmoParams::default()).is_err());
    }

    #[test]
    fn iteration_cap_reports_violation() {
        let gram = vec![1.0, 0.2, 0.1, 0.2, 1.0, 0.3, 0.1, 0.3, 1.0];
        let y = vec![1.0, -1.0, 1.0];
        let err = solve_dual(&gram, &y, &SmoParams { c: 10.0, tol: 1e-12, max_iter: Some(0) }).unwrap_err();
        match err {
            Error::Convergence { iterations: 0, violation } => assert!(violation > 0.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_class_leaves_alpha_zero() {
        let gram = vec![1.0, 0.5, 0.5, 1.0];
        let y = vec![1.0, 1.0];
        let sol = solve_dual(&gram, &y, &SmoParams::default()).unwrap();
        assert_eq!(sol.alpha, vec![0.0, 0.0]);
    }
}
