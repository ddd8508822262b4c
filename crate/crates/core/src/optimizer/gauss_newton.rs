//! Damped Gauss-Newton for nonlinear least squares.
//!
//! Minimizes `0.5 |r(x)|^2` by iterating `x <- x + delta` with
//! `(J^T J + lambda I) delta = -J^T r`. The Levenberg damping `lambda`
//! starts at zero and grows whenever a step fails to decrease the
//! objective, so rank-deficient Jacobians (flat NGF regions) stay solvable.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::optimizer::{OptimizerReport, StopReason};

#[derive(Debug, Clone, Copy)]
pub struct GaussNewtonConfig {
    pub max_iter: usize,
    /// Absolute tolerance on `|J^T r|`.
    pub grad_tol: f64,
    /// Relative tolerance against the initial `|J^T r|` (0 disables).
    pub grad_tol_rel: f64,
    /// Stop when the accepted step is shorter than this.
    pub step_tol: f64,
}

impl Default for GaussNewtonConfig {
    fn default() -> Self {
        GaussNewtonConfig { max_iter: 50, grad_tol: 1e-10, grad_tol_rel: 0.0, step_tol: 1e-10 }
    }
}

const LAMBDA_INIT: f64 = 1e-4;
const LAMBDA_GROW: f64 = 10.0;
const LAMBDA_SHRINK: f64 = 3.0;
const LAMBDA_MAX: f64 = 1e12;

pub fn gauss_newton<F>(
    mut residual_fn: F,
    x0: &[f64],
    cfg: &GaussNewtonConfig,
) -> Result<(Vec<f64>, OptimizerReport)>
where
    F: FnMut(&[f64]) -> Result<(DVector<f64>, DMatrix<f64>)>,
{
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);

    let (mut r, mut jac) = residual_fn(x.as_slice())?;
    check_finite(&r, &jac)?;
    let mut f = 0.5 * r.norm_squared();
    let initial_objective = f;
    let mut grad = jac.transpose() * &r;
    let g0_norm = grad.norm();
    let threshold = cfg.grad_tol.max(cfg.grad_tol_rel * g0_norm);

    let mut trace = vec![f];
    let mut lambda = 0.0f64;
    let mut iterations = 0;
    let mut stop_reason = StopReason::MaxIter;

    if g0_norm <= threshold {
        stop_reason = StopReason::GradientTol;
    } else {
        while iterations < cfg.max_iter {
            let jtj = jac.transpose() * &jac;
            // Inner damping loop: grow lambda until a step decreases 0.5|r|^2.
            let accepted = loop {
                let mut a = jtj.clone();
                for i in 0..n {
                    a[(i, i)] += lambda;
                }
                let delta = match a.cholesky() {
                    Some(chol) => chol.solve(&(-&grad)),
                    None => {
                        lambda = if lambda == 0.0 { LAMBDA_INIT } else { lambda * LAMBDA_GROW };
                        if lambda > LAMBDA_MAX {
                            break None;
                        }
                        continue;
                    }
                };
                let x_new = &x + &delta;
                let (r_new, jac_new) = residual_fn(x_new.as_slice())?;
                check_finite(&r_new, &jac_new)?;
                let f_new = 0.5 * r_new.norm_squared();
                if f_new < f {
                    lambda = if lambda < 1e-14 { 0.0 } else { lambda / LAMBDA_SHRINK };
                    break Some((x_new, r_new, jac_new, f_new, delta.norm()));
                }
                lambda = if lambda == 0.0 { LAMBDA_INIT } else { lambda * LAMBDA_GROW };
                if lambda > LAMBDA_MAX {
                    break None;
                }
            };

            match accepted {
                Some((x_new, r_new, jac_new, f_new, step_norm)) => {
                    x = x_new;
                    r = r_new;
                    jac = jac_new;
                    f = f_new;
                    grad = jac.transpose() * &r;
                    iterations += 1;
                    trace.push(f);
                    if grad.norm() <= threshold {
                        stop_reason = StopReason::GradientTol;
                        break;
                    }
                    if step_norm <= cfg.step_tol {
                        stop_reason = StopReason::StepTol;
                        break;
                    }
                }
                None => {
                    stop_reason = StopReason::LineSearchFail;
                    break;
                }
            }
        }
    }

    let report = OptimizerReport {
        iterations,
        initial_objective,
        final_objective: f,
        gradient_norm: grad.norm(),
        stop_reason,
        trace,
    };
    Ok((x.as_slice().to_vec(), report))
}

fn check_finite(r: &DVector<f64>, jac: &DMatrix<f64>) -> Result<()> {
    if r.iter().any(|v| !v.is_finite()) || jac.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("gauss_newton: residual or Jacobian is not finite".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_least_squares_in_one_iteration() {
        // r = A x - b with invertible A: one undamped step solves exactly.
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, -1.0, 3.0]);
        let b = DVector::from_column_slice(&[5.0, 4.0]);
        let a_c = a.clone();
        let b_c = b.clone();
        let (x, report) = gauss_newton(
            move |x: &[f64]| {
                let xv = DVector::from_column_slice(x);
                Ok((&a_c * xv - &b_c, a_c.clone()))
            },
            &[0.0, 0.0],
            &GaussNewtonConfig::default(),
        )
        .unwrap();
        let expect = a.lu().solve(&b).unwrap();
        assert_eq!(report.iterations, 1);
        assert!((x[0] - expect[0]).abs() < 1e-10 && (x[1] - expect[1]).abs() < 1e-10);
        assert_eq!(report.stop_reason, StopReason::GradientTol);
    }

    #[test]
    fn scalar_residual_converges_to_zero() {
        let (x, report) = gauss_newton(
            |x: &[f64]| Ok((DVector::from_column_slice(&[x[0]]), DMatrix::from_row_slice(1, 1, &[1.0]))),
            &[5.0],
            &GaussNewtonConfig::default(),
        )
        .unwrap();
        assert!(x[0].abs() < 1e-10);
        assert!(report.is_monotone());
    }

    #[test]
    fn rosenbrock_residual_form() {
        let cfg = GaussNewtonConfig { max_iter: 200, ..Default::default() };
        let (x, report) = gauss_newton(
            |x: &[f64]| {
                let r = DVector::from_column_slice(&[10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]]);
                let j = DMatrix::from_row_slice(2, 2, &[-20.0 * x[0], 10.0, -1.0, 0.0]);
                Ok((r, j))
            },
            &[-1.2, 1.0],
            &cfg,
        )
        .unwrap();
        assert!((x[0] - 1.0).abs() < 1e-6 && (x[1] - 1.0).abs() < 1e-6, "{x:?}");
        assert!(report.final_objective < 1e-12);
        assert!(report.is_monotone());
    }

    #[test]
    fn nan_residual_aborts() {
        let out = gauss_newton(
            |_x: &[f64]| Ok((DVector::from_column_slice(&[f64::NAN]), DMatrix::from_row_slice(1, 1, &[1.0]))),
            &[1.0],
            &GaussNewtonConfig::default(),
        );
        assert!(matches!(out, Err(Error::Numerical(_))));
    }

    #[test]
    fn deterministic_iterate_sequence() {
        let run = || {
            gauss_newton(
                |x: &[f64]| {
                    let r = DVector::from_column_slice(&[x[0] * x[0] - 2.0, x[0] - x[1]]);
                    let j = DMatrix::from_row_slice(2, 2, &[2.0 * x[0], 0.0, 1.0, -1.0]);
                    Ok((r, j))
                },
                &[3.0, 0.0],
                &GaussNewtonConfig::default(),
            )
            .unwrap()
        };
        let (xa, ra) = run();
        let (xb, rb) = run();
        assert_eq!(xa, xb);
        assert_eq!(ra.trace, rb.trace);
    }
}
