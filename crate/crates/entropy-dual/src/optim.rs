//! Limited-memory quasi-Newton minimization with a strong Wolfe line search.
//!
//! The objective may refuse a point (returns `None`); the line search treats
//! that as `+∞` and backtracks.

use std::collections::VecDeque;

use serde::Serialize;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LbfgsOptions {
    pub history: usize,
    pub max_iters: usize,
    /// Stop once `½ gᵀH₀g ≤ tol·(1 + |f|)`.
    pub tol: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_evals_per_search: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self { history: 10, max_iters: 500, tol: 1e-10, c1: 1e-4, c2: 0.9, max_evals_per_search: 40 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LbfgsReport {
    pub iterations: usize,
    pub evaluations: usize,
    pub value: f64,
    /// `½ gᵀH₀g` at the returned point.
    pub decrement: f64,
    pub grad_norm: f64,
    pub converged: bool,
    /// Objective after each accepted step.
    pub history: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += a * xi);
}

struct Probe {
    step: f64,
    f: f64,
    g: Vec<f64>,
    slope: f64,
}

/// Minimizes `f` from `x`. `precond(g)` applies the initial inverse Hessian.
pub fn minimize<F, P>(x: &mut [f64], mut f: F, precond: P, opts: &LbfgsOptions) -> Option<LbfgsReport>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
    P: Fn(&[f64]) -> Vec<f64>,
{
    let (mut fx, mut gx) = f(x)?;
    let mut evals = 1;
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.history);
    let mut history = vec![fx];
    let mut hg = precond(&gx);
    let mut dec = 0.5 * dot(&gx, &hg);
    let mut iters = 0;
    let mut converged = dec <= opts.tol * (1.0 + fx.abs());
    while !converged && iters < opts.max_iters {
        // Two-loop recursion.
        let mut q = gx.clone();
        let mut alphas = Vec::with_capacity(mem.len());
        for (s, y, rho) in mem.iter().rev() {
            let a = rho * dot(s, &q);
            axpy(-a, y, &mut q);
            alphas.push(a);
        }
        let mut r = precond(&q);
        if let Some((s, y, _)) = mem.back() {
            // Scale H₀ by the latest curvature estimate relative to the preconditioner.
            let hy = precond(y);
            let gamma = dot(s, y) / dot(y, &hy);
            if gamma.is_finite() && gamma > 0.0 {
                r.iter_mut().for_each(|v| *v *= gamma);
            }
        }
        for ((s, y, rho), a) in mem.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &r);
            axpy(a - b, s, &mut r);
        }
        let mut d: Vec<f64> = r.into_iter().map(|v| -v).collect();
        let mut slope = dot(&gx, &d);
        if !(slope < 0.0) {
            mem.clear();
            d = hg.iter().map(|v| -v).collect();
            slope = dot(&gx, &d);
            if !(slope < 0.0) {
                break;
            }
        }
        let Some(probe) = wolfe_search(x, fx, slope, &d, 1.0, &mut f, opts, &mut evals) else {
            if mem.is_empty() {
                break;
            }
            mem.clear();
            continue;
        };
        let s: Vec<f64> = d.iter().map(|v| v * probe.step).collect();
        let y: Vec<f64> = probe.g.iter().zip(&gx).map(|(a, b)| a - b).collect();
        axpy(1.0, &s, x);
        let sy = dot(&s, &y);
        if sy > 1e-300 {
            if mem.len() == opts.history {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        fx = probe.f;
        gx = probe.g;
        hg = precond(&gx);
        dec = 0.5 * dot(&gx, &hg);
        history.push(fx);
        iters += 1;
        converged = dec <= opts.tol * (1.0 + fx.abs());
    }
    Some(LbfgsReport {
        iterations: iters,
        evaluations: evals,
        value: fx,
        decrement: dec,
        grad_norm: dot(&gx, &gx).sqrt(),
        converged,
        history,
    })
}

fn eval_at<F>(x: &[f64], d: &[f64], t: f64, f: &mut F, evals: &mut usize) -> Option<Probe>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let mut xt = x.to_vec();
    axpy(t, d, &mut xt);
    *evals += 1;
    let (v, g) = f(&xt)?;
    if !v.is_finite() || g.iter().any(|x| !x.is_finite()) {
        return None;
    }
    let slope = dot(&g, d);
    Some(Probe { step: t, f: v, g, slope })
}

fn cubic_min(a: &Probe, b: &Probe) -> f64 {
    let (lo, hi) = if a.step < b.step { (a, b) } else { (b, a) };
    let h = hi.step - lo.step;
    let d1 = lo.slope + hi.slope - 3.0 * (lo.f - hi.f) / (lo.step - hi.step);
    let disc = d1 * d1 - lo.slope * hi.slope;
    let mid = 0.5 * (lo.step + hi.step);
    if disc < 0.0 {
        return mid;
    }
    let d2 = disc.sqrt();
    let t = hi.step - h * (hi.slope + d2 - d1) / (hi.slope - lo.slope + 2.0 * d2);
    let margin = 0.1 * h;
    if !t.is_finite() || t < lo.step + margin || t > hi.step - margin {
        mid
    } else {
        t
    }
}

#[allow(clippy::too_many_arguments)]
fn wolfe_search<F>(
    x: &[f64],
    f0: f64,
    slope0: f64,
    d: &[f64],
    first: f64,
    f: &mut F,
    opts: &LbfgsOptions,
    evals: &mut usize,
) -> Option<Probe>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let start = Probe { step: 0.0, f: f0, g: Vec::new(), slope: slope0 };
    let mut prev = Probe { step: 0.0, f: f0, g: Vec::new(), slope: slope0 };
    let mut t = first;
    let mut budget = opts.max_evals_per_search;
    let mut refused_cap = f64::INFINITY;
    let mut best: Option<Probe> = None;
    while budget > 0 {
        budget -= 1;
        let probe = match eval_at(x, d, t, f, evals) {
            Some(p) => p,
            None => {
                // Outside the domain: shrink towards the last good step.
                refused_cap = refused_cap.min(t);
                t = prev.step + 0.3 * (t - prev.step);
                continue;
            }
        };
        let armijo = probe.f <= f0 + opts.c1 * t * slope0;
        if armijo && best.as_ref().is_none_or(|b| probe.f < b.f) {
            best = Some(Probe { step: probe.step, f: probe.f, g: probe.g.clone(), slope: probe.slope });
        }
        if !armijo || (prev.step > 0.0 && probe.f >= prev.f) {
            return zoom(x, d, &start, prev, probe, f, opts, evals, budget).or(best);
        }
        if probe.slope.abs() <= -opts.c2 * slope0 {
            return Some(probe);
        }
        if probe.slope >= 0.0 {
            return zoom(x, d, &start, probe, prev, f, opts, evals, budget).or(best);
        }
        let next = if refused_cap.is_finite() { 0.5 * (t + refused_cap) } else { 2.0 * t };
        prev = probe;
        t = next;
    }
    best
}

#[allow(clippy::too_many_arguments)]
fn zoom<F>(
    x: &[f64],
    d: &[f64],
    start: &Probe,
    mut lo: Probe,
    mut hi: Probe,
    f: &mut F,
    opts: &LbfgsOptions,
    evals: &mut usize,
    mut budget: usize,
) -> Option<Probe>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    while budget > 0 {
        budget -= 1;
        let t = cubic_min(&lo, &hi);
        if (hi.step - lo.step).abs() < 1e-14 * lo.step.abs().max(1e-300) {
            break;
        }
        let Some(probe) = eval_at(x, d, t, f, evals) else {
            hi = Probe { step: t, f: f64::INFINITY, g: Vec::new(), slope: 0.0 };
            continue;
        };
        if probe.f > start.f + opts.c1 * t * start.slope || probe.f >= lo.f {
            hi = probe;
        } else {
            if probe.slope.abs() <= -opts.c2 * start.slope {
                return Some(probe);
            }
            if probe.slope * (hi.step - lo.step) >= 0.0 {
                hi = lo;
            }
            lo = probe;
        }
    }
    if lo.step > 0.0 {
        Some(lo)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let mut x = vec![-1.2, 1.0];
        let rep = minimize(
            &mut x,
            |x| {
                let (a, b) = (x[0], x[1]);
                let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
                let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
                Some((f, g))
            },
            |g| g.to_vec(),
            &LbfgsOptions { tol: 1e-20, max_iters: 200, ..Default::default() },
        )
        .unwrap();
        assert!((x[0] - 1.0).abs() < 1e-6 && (x[1] - 1.0).abs() < 1e-6, "{x:?} {rep:?}");
        assert!(rep.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn respects_refused_region() {
        // f = −log(1 − x) + x², domain x < 1.
        let mut x = vec![0.9];
        let rep = minimize(
            &mut x,
            |x| {
                if x[0] >= 1.0 {
                    return None;
                }
                Some((-(1.0 - x[0]).ln() + x[0] * x[0], vec![1.0 / (1.0 - x[0]) + 2.0 * x[0]]))
            },
            |g| g.to_vec(),
            &LbfgsOptions { tol: 1e-24, ..Default::default() },
        )
        .unwrap();
        // Stationary point solves 1/(1−x) = −2x.
        let exact = (1.0 - 3f64.sqrt()) / 2.0;
        assert!((x[0] - exact).abs() < 1e-8, "{x:?} {rep:?}");
    }
}
