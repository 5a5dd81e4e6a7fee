//! Time integration of the sharp formulation and its diagnostics.

use rayon::prelude::*;
use serde::Serialize;

use crate::grid::{FieldShape, GridField, LinearOperator, PeriodicGrid, Spectral};
use crate::sym;
use crate::systems::{SystemError, SystemSpec};

/// `κ(t) = e^{−γt}`, `Κ(t) = ∫ₜᵀ κ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeightSchedule {
    pub gamma: f64,
    pub t_end: f64,
}

impl WeightSchedule {
    pub fn new(gamma: f64, t_end: f64) -> Result<Self, SystemError> {
        if !(gamma >= 0.0 && gamma.is_finite()) || !(t_end > 0.0 && t_end.is_finite()) {
            return Err(SystemError::Param("schedule needs gamma >= 0 and T > 0".into()));
        }
        Ok(Self { gamma, t_end })
    }

    pub fn kappa(&self, t: f64) -> f64 {
        (-self.gamma * t).exp()
    }

    pub fn big_kappa(&self, t: f64) -> f64 {
        let g = self.gamma;
        let s = (self.t_end - t).max(0.0);
        if g * s < 1e-8 {
            // Series of e^{−γt}(1 − e^{−γs})/γ for small γs.
            self.kappa(t) * s * (1.0 - 0.5 * g * s + g * g * s * s / 6.0)
        } else {
            self.kappa(t) * (-(-g * s).exp_m1()) / g
        }
    }

    /// Exact mean of `κ` over `[a, b]`.
    pub fn kappa_average(&self, a: f64, b: f64) -> f64 {
        (self.big_kappa(a) - self.big_kappa(b)) / (b - a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StrongOptions {
    /// Recorded intervals on `[0, T]`.
    pub intervals: usize,
    /// RK4 steps per recorded interval.
    pub substeps: usize,
    pub t_end: f64,
    pub dealias: bool,
    pub blowup: f64,
    pub tol: f64,
}

impl StrongOptions {
    pub fn new(t_end: f64, intervals: usize, substeps: usize) -> Self {
        Self { intervals, substeps, t_end, dealias: true, blowup: 1e6, tol: 1e-13 }
    }

    pub fn dt(&self) -> f64 {
        self.t_end / (self.intervals * self.substeps) as f64
    }

    /// Smallest `substeps` with `dt ≤ c_cfl·h^ν`, `h = 1/k_max` of the
    /// retained spectrum and `ν` the symbol order.
    pub fn with_cfl(sys: &SystemSpec, grid: &PeriodicGrid, t_end: f64, intervals: usize, c_cfl: f64, dealias: bool) -> Self {
        let cap = cfl_cap(sys, grid, c_cfl, dealias);
        let substeps = ((t_end / intervals as f64) / cap).ceil().max(1.0) as usize;
        Self { dealias, ..Self::new(t_end, intervals, substeps) }
    }
}

pub fn cfl_cap(sys: &SystemSpec, grid: &PeriodicGrid, c_cfl: f64, dealias: bool) -> f64 {
    let kmax = if dealias {
        grid.dealiased_kmax()
    } else {
        (0..grid.dim()).map(|a| 2.0 * std::f64::consts::PI / grid.lengths[a] * (grid.points[a] / 2) as f64).fold(0.0, f64::max)
    };
    let nu = sys.symbol.order().max(1) as i32;
    c_cfl * (1.0 / kmax.max(1.0)).powi(nu)
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub grid: PeriodicGrid,
    pub times: Vec<f64>,
    /// `v^#` at each recorded node.
    pub sharp: Vec<GridField>,
    /// `v` at each recorded node.
    pub states: Vec<GridField>,
    pub blown_up: bool,
    pub final_valid_time: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dt(&self) -> f64 {
        self.times[1] - self.times[0]
    }
}

/// Right side of the sharp system.
pub struct SharpRhs<'a> {
    sys: &'a SystemSpec,
    op: LinearOperator,
    spectral: Spectral,
    mask: Option<Vec<f64>>,
    tol: f64,
}

impl<'a> SharpRhs<'a> {
    pub fn new(sys: &'a SystemSpec, grid: &PeriodicGrid, dealias: bool, tol: f64) -> Result<Self, SystemError> {
        let op = sys.operator(grid)?;
        let spectral = Spectral::new(grid);
        let mask = dealias.then(|| spectral.dealias_mask());
        Ok(Self { sys, op, spectral, mask, tol })
    }

    /// Returns `(∂ₜv^#, v)`.
    pub fn eval(&self, w: &GridField, guess: Option<&GridField>) -> Result<(GridField, GridField), SystemError> {
        let v = self.sys.unsharp_field(w, self.tol, guess)?;
        let out = self.eval_at(w, &v)?;
        Ok((out, v))
    }

    /// `∂ₜv^#` given `v = ∇K*(v^#)`.
    pub fn eval_at(&self, w: &GridField, v: &GridField) -> Result<GridField, SystemError> {
        let b = self.op.apply_lstar(w)?;
        let r: Result<GridField, ()> = crate::grid::map_pointwise(&[v, &b], &w.grid, FieldShape::Vector(self.sys.n), |_, x, o| {
            self.sys.pairing_gradient(&x[0], &x[1], o);
            o.iter_mut().for_each(|g| *g = -*g);
            Ok(())
        });
        let mut out = r.expect("infallible");
        let n = self.sys.n;
        if let Some(mask) = &self.mask {
            for c in 0..n {
                let mut s = self.spectral.forward(out.component(c));
                s.iter_mut().zip(mask).for_each(|(z, m)| *z *= m);
                let back = self.spectral.inverse_real(s);
                out.component_mut(c).copy_from_slice(&back);
            }
        }
        Ok(out)
    }
}

/// RK4 on `v^#` from `sharp0`; `dt` may be negative.
#[allow(clippy::too_many_arguments)]
pub fn integrate_sharp_from(
    sys: &SystemSpec,
    sharp0: &GridField,
    dt: f64,
    intervals: usize,
    substeps: usize,
    dealias: bool,
    blowup: f64,
    tol: f64,
) -> Result<Trajectory, SystemError> {
    let grid = sharp0.grid.clone();
    let rhs = SharpRhs::new(sys, &grid, dealias, tol)?;
    let mut w = sharp0.clone();
    let mut v = sys.unsharp_field(&w, tol, None)?;
    let mut traj = Trajectory {
        grid: grid.clone(),
        times: vec![0.0],
        sharp: vec![w.clone()],
        states: vec![v.clone()],
        blown_up: false,
        final_valid_time: 0.0,
    };
    let mut t = 0.0;
    for _ in 0..intervals {
        for _ in 0..substeps {
            let step = (|| -> Result<GridField, SystemError> {
                let k1 = rhs.eval_at(&w, &v)?;
                let mut tmp = w.clone();
                tmp.axpy(0.5 * dt, &k1);
                let (k2, _) = rhs.eval(&tmp, Some(&v))?;
                let mut tmp = w.clone();
                tmp.axpy(0.5 * dt, &k2);
                let (k3, _) = rhs.eval(&tmp, Some(&v))?;
                let mut tmp = w.clone();
                tmp.axpy(dt, &k3);
                let (k4, _) = rhs.eval(&tmp, Some(&v))?;
                let mut next = w.clone();
                next.axpy(dt / 6.0, &k1);
                next.axpy(dt / 3.0, &k2);
                next.axpy(dt / 3.0, &k3);
                next.axpy(dt / 6.0, &k4);
                Ok(next)
            })();
            let next = match step {
                Ok(n) if n.data.iter().all(|x| x.is_finite()) && n.max_abs() <= blowup => n,
                _ => {
                    traj.blown_up = true;
                    return Ok(traj);
                }
            };
            w = next;
            t += dt;
            v = sys.unsharp_field(&w, tol, Some(&v))?;
        }
        traj.times.push(t);
        traj.sharp.push(w.clone());
        traj.states.push(v.clone());
        traj.final_valid_time = t;
    }
    Ok(traj)
}

/// Integrates from `v0` on `[0, T]`, recording `intervals + 1` nodes.
pub fn integrate_sharp(sys: &SystemSpec, v0: &GridField, opts: &StrongOptions) -> Result<Trajectory, SystemError> {
    if v0.shape != FieldShape::Vector(sys.n) {
        return Err(SystemError::Param("initial data must be an n-vector field".into()));
    }
    if opts.intervals == 0 || opts.substeps == 0 || !(opts.t_end > 0.0) {
        return Err(SystemError::Param("need T > 0 and at least one step".into()));
    }
    let w0 = sys.sharp_field(v0);
    let mut traj = integrate_sharp_from(sys, &w0, opts.dt(), opts.intervals, opts.substeps, opts.dealias, opts.blowup, opts.tol)?;
    // Keep the caller's v0 exactly at the first node.
    traj.states[0] = v0.clone();
    Ok(traj)
}

/// `∫_Ω K(v)`.
pub fn total_entropy(sys: &SystemSpec, v: &GridField) -> f64 {
    let len = v.len();
    let vol = v.grid.cell_volume();
    // Collected first so the sum is ordered and runs are reproducible.
    (0..len).into_par_iter().map(|p| sys.entropy_value(&v.point(p))).collect::<Vec<f64>>().iter().sum::<f64>() * vol
}

pub fn entropy_series(sys: &SystemSpec, traj: &Trajectory) -> Vec<f64> {
    traj.states.iter().map(|v| total_entropy(sys, v)).collect()
}

/// Max relative deviation of the entropy series from its first value.
pub fn entropy_drift(series: &[f64]) -> f64 {
    let k0 = series[0];
    series.iter().map(|k| (k - k0).abs()).fold(0.0, f64::max) / k0.abs().max(1e-300)
}

fn extreme_eigen<F: Fn(usize, &[f64]) -> f64 + Sync>(big_n: usize, b: &GridField, f: F) -> f64 {
    (0..b.len()).into_par_iter().map(|p| f(big_n, &b.point(p))).reduce(|| f64::NEG_INFINITY, f64::max)
}

/// Max over nodes `t ≤ T1` of `λ_max(−2L*v^#)`, floored at 0.
pub fn select_gamma(sys: &SystemSpec, traj: &Trajectory, t1: f64) -> Result<f64, SystemError> {
    let op = sys.operator(&traj.grid)?;
    let mut g = 0.0f64;
    for (t, w) in traj.times.iter().zip(&traj.sharp) {
        if *t > t1 + 1e-12 {
            break;
        }
        let b = op.apply_lstar(w)?.scaled(-2.0);
        g = g.max(extreme_eigen(sys.big_n, &b, sym::max_eigenvalue));
    }
    Ok(g)
}

/// Per node, min over `x` of `λ_min(κ(t)I + 2Κ(t)L*v^#)`.
pub fn node_margins(sys: &SystemSpec, traj: &Trajectory, schedule: &WeightSchedule) -> Result<Vec<f64>, SystemError> {
    let op = sys.operator(&traj.grid)?;
    let big = sys.big_n;
    traj.times
        .iter()
        .zip(&traj.sharp)
        .map(|(t, w)| {
            let mut c = op.apply_lstar(w)?.scaled(2.0 * schedule.big_kappa(*t));
            let k = schedule.kappa(*t);
            for l in 0..big {
                c.component_mut(sym::packed_index(big, l, l)).iter_mut().for_each(|x| *x += k);
            }
            Ok(-extreme_eigen(big, &c, |n, p| -sym::min_eigenvalue(n, p)))
        })
        .collect()
}

/// Min over recorded `(t, x)` of `λ_min(κ(t)I + 2Κ(t)L*v^#)`.
pub fn feasibility_margin(sys: &SystemSpec, traj: &Trajectory, schedule: &WeightSchedule) -> Result<f64, SystemError> {
    Ok(node_margins(sys, traj, schedule)?.into_iter().fold(f64::INFINITY, f64::min))
}

/// `∫_Ω (u − v)·(u^# − v^#)`.
pub fn jeffreys_divergence(sys: &SystemSpec, u: &GridField, v: &GridField) -> f64 {
    let n = sys.n;
    let vol = u.grid.cell_volume();
    (0..u.len())
        .into_par_iter()
        .map(|p| {
            let (a, b) = (u.point(p), v.point(p));
            let (mut sa, mut sb) = (vec![0.0; n], vec![0.0; n]);
            sys.entropy.gradient(&a, &mut sa);
            sys.entropy.gradient(&b, &mut sb);
            (0..n).map(|i| (a[i] - b[i]) * (sa[i] - sb[i])).sum::<f64>()
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum::<f64>()
        * vol
}

#[derive(Debug, Clone, Serialize)]
pub struct GronwallReport {
    pub gamma_hat: f64,
    pub c: f64,
    pub divergence: Vec<f64>,
    /// `max_t ς(t) / (ς(0)e^{2(c+γ̂)t})`.
    pub worst_ratio: f64,
}

/// Measures the constants of the uniqueness estimate on two runs sharing a
/// time axis, and compares the divergence with its exponential bound.
pub fn gronwall_check(sys: &SystemSpec, a: &Trajectory, b: &Trajectory) -> Result<GronwallReport, SystemError> {
    let op = sys.operator(&a.grid)?;
    let big = sys.big_n;
    let mut gamma_hat = 0.0f64;
    let mut c = 0.0f64;
    for (wa, wb) in a.sharp.iter().zip(&b.sharp) {
        let ba = op.apply_lstar(wa)?;
        let bb = op.apply_lstar(wb)?;
        gamma_hat = gamma_hat.max(extreme_eigen(big, &ba, sym::max_eigenvalue));
        gamma_hat = gamma_hat.max(extreme_eigen(big, &bb, sym::max_eigenvalue));
        let mut s = ba.clone();
        s.axpy(1.0, &bb);
        c = c.max(extreme_eigen(big, &s.scaled(-1.0), sym::max_eigenvalue));
    }
    let divergence: Vec<f64> = a.states.iter().zip(&b.states).map(|(u, v)| jeffreys_divergence(sys, u, v)).collect();
    let s0 = divergence[0];
    let worst_ratio = a.times.iter().zip(&divergence).map(|(t, s)| s / (s0 * (2.0 * (c + gamma_hat) * t).exp())).fold(0.0, f64::max);
    Ok(GronwallReport { gamma_hat, c, divergence, worst_ratio })
}

/// Pre-shock horizon `0.8 / max(−∂ₓ K'(v₀))` for the scalar law.
pub fn scalar_shock_horizon(sys: &SystemSpec, v0: &GridField) -> f64 {
    let w = sys.sharp_field(v0);
    let d = crate::grid::spectral_derivative(&w, &[1]);
    let steep = d.data.iter().fold(0.0f64, |m, x| m.max(-x));
    if steep <= 0.0 {
        f64::INFINITY
    } else {
        0.8 / steep
    }
}
