//! Limited-memory BFGS with Armijo backtracking.
//!
//! Deterministic and single-threaded. Objective evaluations that fail or
//! return non-finite values during the line search are treated as
//! rejected steps, so the optimizer can skirt regions where the
//! covariance factorization breaks down instead of aborting.

use std::collections::VecDeque;

use crate::error::Result;

#[derive(Debug, Clone)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iter: usize,
    /// Convergence test: infinity norm of the gradient.
    pub grad_tol: f64,
    pub c1: f64,
    pub shrink: f64,
    pub max_backtracks: u32,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            memory: 10,
            max_iter: 500,
            grad_tol: 1e-6,
            c1: 1e-4,
            shrink: 0.5,
            max_backtracks: 50,
        }
    }
}

/// One accepted iterate, for the diagnostics CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub step_size: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    GradTol,
    MaxIter,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct OptOutcome {
    pub x: Vec<f64>,
    pub objective: f64,
    pub grad_inf_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub stop: StopReason,
    pub trace: Vec<TraceRow>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, &x| m.max(x.abs()))
}

type Pair = (Vec<f64>, Vec<f64>, f64); // (s, y, 1/s'y)

fn two_loop(grad: &[f64], history: &VecDeque<Pair>) -> Vec<f64> {
    let mut q = grad.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let alpha = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= alpha * yi;
        }
        alphas.push(alpha);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), alpha) in history.iter().zip(alphas.into_iter().rev()) {
        let beta = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (alpha - beta) * si;
        }
    }
    for qi in q.iter_mut() {
        *qi = -*qi;
    }
    q
}

/// Minimize `eval`, which returns the objective and, when asked, its
/// gradient. An `Err` from the very first evaluation propagates; later
/// failures end the run with `StopReason::LineSearchFailed`.
pub fn minimize<F>(opts: &LbfgsOptions, x0: &[f64], mut eval: F) -> Result<OptOutcome>
where
    F: FnMut(&[f64], bool) -> Result<(f64, Option<Vec<f64>>)>,
{
    let (mut f, g0) = eval(x0, true)?;
    let mut g = g0.expect("gradient requested");
    let mut x = x0.to_vec();
    let mut ginf = inf_norm(&g);
    let mut trace = vec![TraceRow {
        iteration: 0,
        objective: f,
        grad_norm: ginf,
        step_size: 0.0,
    }];
    if ginf <= opts.grad_tol {
        return Ok(OptOutcome {
            x,
            objective: f,
            grad_inf_norm: ginf,
            iterations: 0,
            converged: true,
            stop: StopReason::GradTol,
            trace,
        });
    }

    let mut history: VecDeque<Pair> = VecDeque::with_capacity(opts.memory);
    let mut stop = StopReason::MaxIter;
    let mut iterations = 0;

    for iter in 1..=opts.max_iter {
        let mut d = two_loop(&g, &history);
        let mut dg = dot(&d, &g);
        if !(dg < 0.0) {
            // curvature information unusable; restart from steepest descent
            history.clear();
            d = g.iter().map(|&v| -v).collect();
            dg = -dot(&g, &g);
        }

        let mut t = 1.0;
        let mut accepted: Option<(Vec<f64>, f64)> = None;
        for _ in 0..opts.max_backtracks {
            let xt: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + t * di).collect();
            match eval(&xt, false) {
                Ok((ft, _)) if ft.is_finite() && ft <= f + opts.c1 * t * dg => {
                    accepted = Some((xt, ft));
                    break;
                }
                _ => t *= opts.shrink,
            }
        }
        let Some((xt, _ft)) = accepted else {
            stop = StopReason::LineSearchFailed;
            break;
        };
        let Ok((f_new, Some(g_new))) = eval(&xt, true) else {
            stop = StopReason::LineSearchFailed;
            break;
        };

        let s: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        let s_norm = dot(&s, &s).sqrt();
        let y_norm = dot(&yv, &yv).sqrt();
        if sy > 1e-10 * s_norm * y_norm {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back((s, yv, 1.0 / sy));
        }

        x = xt;
        f = f_new;
        g = g_new;
        ginf = inf_norm(&g);
        iterations = iter;
        trace.push(TraceRow {
            iteration: iter,
            objective: f,
            grad_norm: ginf,
            step_size: t,
        });
        if ginf <= opts.grad_tol {
            stop = StopReason::GradTol;
            break;
        }
    }

    Ok(OptOutcome {
        x,
        objective: f,
        grad_inf_norm: ginf,
        iterations,
        converged: stop == StopReason::GradTol,
        stop,
        trace,
    })
}
