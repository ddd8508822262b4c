//! L-BFGS with two-loop recursion and a strong-Wolfe line search.
//!
//! The strong-Wolfe search (sufficient decrease + curvature) guarantees
//! `s^T y > 0` for accepted steps, which the two-loop recursion assumes;
//! pairs with `s^T y <= 1e-10 |s||y|` are skipped anyway as a safeguard.

use crate::error::{Error, Result};
use crate::optimizer::{dot, norm, OptimizerReport, StopReason};

#[derive(Debug, Clone, Copy)]
pub struct LbfgsConfig {
    /// Number of stored correction pairs.
    pub memory: usize,
    pub max_iter: usize,
    /// Absolute tolerance on the gradient norm.
    pub grad_tol: f64,
    /// Relative tolerance against the initial gradient norm (0 disables).
    pub grad_tol_rel: f64,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    /// Function evaluations allowed per line search.
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            memory: 10,
            max_iter: 100,
            grad_tol: 1e-8,
            grad_tol_rel: 0.0,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 20,
        }
    }
}

const CURVATURE_SKIP: f64 = 1e-10;

pub fn lbfgs<F>(mut f_and_grad: F, x0: &[f64], cfg: &LbfgsConfig) -> Result<(Vec<f64>, OptimizerReport)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if cfg.memory == 0 {
        return Err(Error::invalid("lbfgs: memory must be > 0"));
    }
    let mut x = x0.to_vec();
    let (mut f, mut g) = f_and_grad(&x)?;
    check_finite(f, &g)?;
    let initial_objective = f;
    let g0_norm = norm(&g);
    let threshold = cfg.grad_tol.max(cfg.grad_tol_rel * g0_norm);

    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();

    let mut trace = vec![f];
    let mut iterations = 0;
    let mut stop_reason = StopReason::MaxIter;

    if g0_norm <= threshold {
        stop_reason = StopReason::GradientTol;
    } else {
        while iterations < cfg.max_iter {
            let mut d = two_loop(&g, &s_hist, &y_hist, &rho_hist);
            let mut dg = dot(&d, &g);
            if dg >= 0.0 {
                // Not a descent direction: drop the history and restart.
                s_hist.clear();
                y_hist.clear();
                rho_hist.clear();
                d = g.iter().map(|v| -v).collect();
                dg = dot(&d, &g);
            }

            let alpha_init = if s_hist.is_empty() && iterations == 0 {
                (1.0 / norm(&g).max(1e-12)).min(1.0)
            } else {
                1.0
            };
            let ls = strong_wolfe(&mut f_and_grad, &x, &d, f, dg, alpha_init, cfg)?;
            let (x_new, f_new, g_new) = match ls {
                Some(v) => v,
                None => {
                    stop_reason = StopReason::LineSearchFail;
                    break;
                }
            };

            let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > CURVATURE_SKIP * norm(&s) * norm(&y) {
                if s_hist.len() == cfg.memory {
                    s_hist.remove(0);
                    y_hist.remove(0);
                    rho_hist.remove(0);
                }
                rho_hist.push(1.0 / sy);
                s_hist.push(s);
                y_hist.push(y);
            }

            x = x_new;
            f = f_new;
            g = g_new;
            iterations += 1;
            trace.push(f);
            if norm(&g) <= threshold {
                stop_reason = StopReason::GradientTol;
                break;
            }
        }
    }

    let report = OptimizerReport {
        iterations,
        initial_objective,
        final_objective: f,
        gradient_norm: norm(&g),
        stop_reason,
        trace,
    };
    Ok((x, report))
}

/// Two-loop recursion: implicit product of the inverse-Hessian estimate
/// with the gradient, returned negated as the search direction.
fn two_loop(g: &[f64], s_hist: &[Vec<f64>], y_hist: &[Vec<f64>], rho_hist: &[f64]) -> Vec<f64> {
    let mut q = g.to_vec();
    let m = s_hist.len();
    if m == 0 {
        return q.iter().map(|v| -v).collect();
    }
    let mut alpha = vec![0.0; m];
    for i in (0..m).rev() {
        alpha[i] = rho_hist[i] * dot(&s_hist[i], &q);
        for (qk, yk) in q.iter_mut().zip(&y_hist[i]) {
            *qk -= alpha[i] * yk;
        }
    }
    // H0 = (s^T y / y^T y) I from the most recent pair.
    let gamma = dot(&s_hist[m - 1], &y_hist[m - 1]) / dot(&y_hist[m - 1], &y_hist[m - 1]);
    for qk in q.iter_mut() {
        *qk *= gamma;
    }
    for i in 0..m {
        let beta = rho_hist[i] * dot(&y_hist[i], &q);
        for (qk, sk) in q.iter_mut().zip(&s_hist[i]) {
            *qk += (alpha[i] - beta) * sk;
        }
    }
    q.iter().map(|v| -v).collect()
}

type LinePoint = (Vec<f64>, f64, Vec<f64>);

/// Strong-Wolfe line search (bracket then zoom with cubic interpolation).
/// Returns None when no acceptable step is found within the trial budget.
fn strong_wolfe<F>(
    f_and_grad: &mut F,
    x: &[f64],
    d: &[f64],
    phi0: f64,
    dphi0: f64,
    alpha_init: f64,
    cfg: &LbfgsConfig,
) -> Result<Option<LinePoint>>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut evals = 0usize;
    let mut probe = |alpha: f64| -> Result<(f64, f64, Vec<f64>, Vec<f64>)> {
        let xa: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + alpha * di).collect();
        let (fa, ga) = f_and_grad(&xa)?;
        check_finite(fa, &ga)?;
        Ok((fa, dot(&ga, d), xa, ga))
    };

    let mut alpha_prev = 0.0;
    let mut phi_prev = phi0;
    let mut dphi_prev = dphi0;
    let mut alpha = alpha_init;
    let alpha_max = 1e6;

    let mut bracket: Option<(f64, f64, f64, f64, f64, f64)> = None; // (lo, phi_lo, dphi_lo, hi, phi_hi, dphi_hi)
    while evals < cfg.max_line_search {
        let (phi_a, dphi_a, xa, ga) = probe(alpha)?;
        evals += 1;
        if phi_a > phi0 + cfg.c1 * alpha * dphi0 || (evals > 1 && phi_a >= phi_prev) {
            bracket = Some((alpha_prev, phi_prev, dphi_prev, alpha, phi_a, dphi_a));
            break;
        }
        if dphi_a.abs() <= -cfg.c2 * dphi0 {
            return Ok(Some((xa, phi_a, ga)));
        }
        if dphi_a >= 0.0 {
            bracket = Some((alpha, phi_a, dphi_a, alpha_prev, phi_prev, dphi_prev));
            break;
        }
        alpha_prev = alpha;
        phi_prev = phi_a;
        dphi_prev = dphi_a;
        alpha = (2.0 * alpha).min(alpha_max);
        if alpha >= alpha_max {
            return Ok(None);
        }
    }

    let (mut lo, mut phi_lo, mut dphi_lo, mut hi, mut phi_hi, mut dphi_hi) = match bracket {
        Some(b) => b,
        None => return Ok(None),
    };

    let mut best: Option<LinePoint> = None;
    while evals < cfg.max_line_search {
        let mut alpha = cubic_interpolate(lo, phi_lo, dphi_lo, hi, phi_hi, dphi_hi);
        // Keep the trial safely inside the bracket.
        let (a, b) = if lo < hi { (lo, hi) } else { (hi, lo) };
        let margin = 0.1 * (b - a);
        if !alpha.is_finite() || alpha <= a + margin * 1e-3 || alpha >= b - margin * 1e-3 {
            alpha = 0.5 * (a + b);
        }
        let (phi_a, dphi_a, xa, ga) = probe(alpha)?;
        evals += 1;
        if phi_a > phi0 + cfg.c1 * alpha * dphi0 || phi_a >= phi_lo {
            hi = alpha;
            phi_hi = phi_a;
            dphi_hi = dphi_a;
        } else {
            if dphi_a.abs() <= -cfg.c2 * dphi0 {
                return Ok(Some((xa, phi_a, ga)));
            }
            if dphi_a * (hi - lo) >= 0.0 {
                hi = lo;
                phi_hi = phi_lo;
                dphi_hi = dphi_lo;
            }
            lo = alpha;
            phi_lo = phi_a;
            dphi_lo = dphi_a;
            if phi_a < phi0 {
                best = Some((xa, phi_a, ga));
            }
        }
        if (hi - lo).abs() < 1e-16 {
            break;
        }
    }
    // Budget exhausted: fall back to the best sufficient-decrease point, if any.
    Ok(best)
}

/// Minimizer of the cubic interpolating (x1, f1, g1) and (x2, f2, g2);
/// exact for quadratics.
fn cubic_interpolate(x1: f64, f1: f64, g1: f64, x2: f64, f2: f64, g2: f64) -> f64 {
    let d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    let d2_sq = d1 * d1 - g1 * g2;
    if d2_sq < 0.0 {
        return f64::NAN;
    }
    let d2 = d2_sq.sqrt() * (x2 - x1).signum();
    x2 - (x2 - x1) * (g2 + d2 - d1) / (g2 - g1 + 2.0 * d2)
}

fn check_finite(f: f64, g: &[f64]) -> Result<()> {
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("lbfgs: objective or gradient is not finite".into()));
    }
    Ok(())
}
