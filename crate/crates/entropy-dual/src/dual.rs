//! Discrete dual maximization over a potential `a` on a space-time grid.
//!
//! `a` lives at time nodes `t_k = k·dt`, `k = 0..=M`, with `a_M = 0`. Cells
//! carry `E_c = (a_{c+1} − a_c)/dt` and `C_c = κ̄_c I + B_c + B_{c+1}`, where
//! `B_k = L*a_k` and `κ̄_c` is the exact cell mean of `κ`. The discrete
//! objective is
//!
//! ```text
//! J(a) = −Σ_c dt·(v₀, E_c) + Σ_c dt·Σ_x vol·G(E_c(x), C_c(x)),
//! G(E, C) = inf_y  y·E + ½F(y):C.
//! ```

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::grid::{self, FieldShape, GridError, GridField, LinearOperator, PeriodicGrid};
use crate::optim::{self, LbfgsOptions};
use crate::strong::{Trajectory, WeightSchedule};
use crate::sym;
use crate::systems::{SystemError, SystemSpec};

#[derive(Debug, thiserror::Error)]
pub enum DualError {
    #[error("cone condition violated: smallest eigenvalue {0:e}")]
    Infeasible(f64),
    #[error("conjugate minimization did not converge (gradient norm {0:e})")]
    NonConvergence(f64),
    #[error("invalid input: {0}")]
    Param(String),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, Serialize)]
pub struct ConjugateResult {
    pub value: f64,
    pub argmin: Vec<f64>,
    /// `F(y*)`, packed.
    pub flux: Vec<f64>,
    pub iterations: usize,
}

fn objective_at(sys: &SystemSpec, y: &[f64], e: &[f64], c: &[f64]) -> f64 {
    sym::dot(y, e) + 0.5 * sym::dot(&sys.flux(y), c)
}

/// `inf_y y·E + ½F(y):C` by damped Newton.
pub fn pointwise_conjugate(sys: &SystemSpec, e: &[f64], c: &[f64], tol: f64, guess: Option<&[f64]>) -> Result<ConjugateResult, DualError> {
    let n = sys.n;
    if e.len() != n || c.len() != sys.packed_len() {
        return Err(DualError::Param("conjugate inputs have the wrong size".into()));
    }
    let scale = 1.0 + c.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let lam = sym::min_eigenvalue(sys.big_n, c);
    if lam < -tol * scale {
        return Err(DualError::Infeasible(lam));
    }
    // Inside the tolerance band: clip to the cone.
    let clipped;
    let c = if lam < 0.0 {
        clipped = sym::project_psd(sys.big_n, c);
        &clipped[..]
    } else {
        c
    };
    // Divergence at a near-singular `C` means `E` leaves its range: value −∞.
    let degenerate = lam <= 1e-8 * scale;
    let fail = |gn: f64| if degenerate { DualError::Infeasible(lam) } else { DualError::NonConvergence(gn) };
    let mut y = guess.map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
    let gtol = tol * (1.0 + e.iter().fold(0.0f64, |m, x| m.max(x.abs())) + scale);
    let mut f = objective_at(sys, &y, e, c);
    if !f.is_finite() {
        y = vec![0.0; n];
        f = objective_at(sys, &y, e, c);
    }
    let mut g = vec![0.0; n];
    let mut iters = 0;
    loop {
        sys.pairing_gradient(&y, c, &mut g);
        g.iter_mut().zip(e).for_each(|(gi, ei)| *gi = ei + 0.5 * *gi);
        let gn = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if gn <= gtol {
            break;
        }
        if iters >= 200 || !gn.is_finite() {
            return Err(fail(gn));
        }
        iters += 1;
        let h = DMatrix::from_row_slice(n, n, &sys.pairing_hessian(&y, c)).scale(0.5);
        let rhs = DVector::from_iterator(n, g.iter().map(|x| -x));
        let mut shift = 0.0;
        let d = loop {
            let mut hs = h.clone();
            for i in 0..n {
                hs[(i, i)] += shift;
            }
            if let Some(ch) = hs.cholesky() {
                break ch.solve(&rhs);
            }
            shift = if shift == 0.0 { 1e-12 * (1.0 + h.abs().max()) } else { shift * 10.0 };
            if shift > 1e12 {
                return Err(fail(gn));
            }
        };
        let slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        // Newton decrement at roundoff level: the value is exact to working precision.
        if -slope <= 1e-20 * (1.0 + f.abs()) {
            break;
        }
        if -slope <= 1e-12 * (1.0 + f.abs()) {
            // Inside the quadratic region value differences drown in roundoff;
            // take the full step.
            y.iter_mut().zip(d.iter()).for_each(|(a, b)| *a += b);
            f = objective_at(sys, &y, e, c);
            continue;
        }
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = y.iter().zip(d.iter()).map(|(a, b)| a + t * b).collect();
            let ft = objective_at(sys, &trial, e, c);
            if ft.is_finite() && ft <= f + 1e-4 * t * slope {
                y = trial;
                f = ft;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // At roundoff level the model step cannot improve `f`; accept when
            // the gradient is already small relative to the data.
            if gn <= 1e3 * gtol {
                break;
            }
            return Err(fail(gn));
        }
    }
    Ok(ConjugateResult { value: f, flux: sys.flux(&y), argmin: y, iterations: iters })
}

/// Spatial part of a (possibly space-time) grid.
pub fn spatial(grid: &PeriodicGrid) -> PeriodicGrid {
    PeriodicGrid { time: None, ..grid.clone() }
}

/// A potential with its derived fields.
#[derive(Debug, Clone)]
pub struct DualState {
    /// Space-time grid; fields live on its spatial part.
    pub grid: PeriodicGrid,
    /// `a_k`, `k = 0..=M`, with `a_M ≡ 0`.
    pub a: Vec<GridField>,
    /// `E_c` on cells.
    pub e: Vec<GridField>,
    /// `B_k = L*a_k` on nodes.
    pub b: Vec<GridField>,
    pub value: f64,
    pub cone_margin: f64,
}

impl DualState {
    /// Builds `E` and `B` from `a_0..a_{M−1}` (or all `M + 1` nodes, the last zero).
    pub fn from_potential(sys: &SystemSpec, grid: &PeriodicGrid, op: &LinearOperator, mut a: Vec<GridField>) -> Result<Self, DualError> {
        let (_, steps) = grid.time.ok_or_else(|| DualError::Param("dual grid needs a time axis".into()))?;
        let space = spatial(grid);
        if a.len() == steps {
            a.push(GridField::zeros(&space, FieldShape::Vector(sys.n)));
        }
        if a.len() != steps + 1 {
            return Err(DualError::Param(format!("expected {} potential nodes, got {}", steps + 1, a.len())));
        }
        if a[steps].data.iter().any(|&x| x != 0.0) {
            return Err(DualError::Param("potential must vanish at the final time".into()));
        }
        let dt = grid.time_step().expect("time axis");
        let e = (0..steps)
            .map(|c| {
                let mut d = a[c + 1].sub(&a[c]);
                d.data.iter_mut().for_each(|x| *x /= dt);
                d
            })
            .collect();
        let b = a.par_iter().map(|ak| op.apply_lstar(ak)).collect::<Result<Vec<_>, _>>()?;
        Ok(Self { grid: grid.clone(), a, e, b, value: f64::NAN, cone_margin: f64::NAN })
    }

    pub fn steps(&self) -> usize {
        self.e.len()
    }

    /// `max |(B_{k+1} − B_k)/dt − L*E_k|`.
    pub fn constraint_residual(&self, op: &LinearOperator) -> Result<f64, DualError> {
        let dt = self.grid.time_step().expect("time axis");
        let mut worst = 0.0f64;
        for (c, e) in self.e.iter().enumerate() {
            let le = op.apply_lstar(e)?;
            let db = self.b[c + 1].sub(&self.b[c]);
            for (x, y) in db.data.iter().zip(&le.data) {
                worst = worst.max((x / dt - y).abs());
            }
        }
        Ok(worst)
    }
}

/// Pointwise minimizers of one evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    /// `y*` per cell.
    pub argmin: Vec<GridField>,
    /// `F(y*)` per cell.
    pub flux: Vec<GridField>,
}

/// Everything needed to evaluate the discrete objective on one grid.
pub struct DualProblem<'a> {
    pub sys: &'a SystemSpec,
    pub grid: PeriodicGrid,
    pub space: PeriodicGrid,
    pub schedule: WeightSchedule,
    pub v0: GridField,
    pub op: LinearOperator,
    pub dt: f64,
    pub steps: usize,
    /// Exact cell means of `κ`.
    pub kbar: Vec<f64>,
    pub tol: f64,
}

impl<'a> DualProblem<'a> {
    pub fn new(sys: &'a SystemSpec, v0: &GridField, grid: &PeriodicGrid, schedule: &WeightSchedule, tol: f64) -> Result<Self, DualError> {
        let (t_end, steps) = grid.time.ok_or_else(|| DualError::Param("dual grid needs a time axis".into()))?;
        if (t_end - schedule.t_end).abs() > 1e-12 * t_end {
            return Err(DualError::Param("schedule horizon differs from the grid horizon".into()));
        }
        let space = spatial(grid);
        if v0.grid != space || v0.shape != FieldShape::Vector(sys.n) {
            return Err(DualError::Param("initial data must be an n-vector field on the spatial grid".into()));
        }
        let dt = t_end / steps as f64;
        let kbar = (0..steps).map(|c| schedule.kappa_average(c as f64 * dt, (c + 1) as f64 * dt)).collect();
        Ok(Self { sys, op: sys.operator(&space)?, grid: grid.clone(), space, schedule: *schedule, v0: v0.clone(), dt, steps, kbar, tol })
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn state(&self, a: Vec<GridField>) -> Result<DualState, DualError> {
        DualState::from_potential(self.sys, &self.grid, &self.op, a)
    }

    pub fn zero_state(&self) -> Result<DualState, DualError> {
        self.state(vec![GridField::zeros(&self.space, FieldShape::Vector(self.sys.n)); self.steps])
    }

    fn with_identity(&self, m: &mut GridField, k: f64) {
        for l in 0..self.sys.big_n {
            m.component_mut(sym::packed_index(self.sys.big_n, l, l)).iter_mut().for_each(|x| *x += k);
        }
    }

    /// `C_c = κ̄_c I + B_c + B_{c+1}`.
    pub fn cell_matrix(&self, state: &DualState, c: usize) -> GridField {
        let mut m = state.b[c].clone();
        m.axpy(1.0, &state.b[c + 1]);
        self.with_identity(&mut m, self.kbar[c]);
        m
    }

    /// `κ(t_k)I + 2B_k`.
    pub fn node_matrix(&self, state: &DualState, k: usize) -> GridField {
        let mut m = state.b[k].scaled(2.0);
        self.with_identity(&mut m, self.schedule.kappa(self.time(k)));
        m
    }

    /// Min over nodes `k < M` and points of `λ_min(κ(t_k)I + 2B_k)`.
    pub fn node_margin(&self, state: &DualState) -> f64 {
        let big = self.sys.big_n;
        (0..self.steps)
            .into_par_iter()
            .map(|k| -grid::max_pointwise(&self.node_matrix(state, k), |p| -sym::min_eigenvalue(big, p)))
            .reduce(|| f64::INFINITY, f64::min)
    }

    /// Min over cells of `λ_min(C_c)`.
    pub fn cell_margin(&self, state: &DualState) -> f64 {
        let big = self.sys.big_n;
        (0..self.steps)
            .into_par_iter()
            .map(|c| -grid::max_pointwise(&self.cell_matrix(state, c), |p| -sym::min_eigenvalue(big, p)))
            .reduce(|| f64::INFINITY, f64::min)
    }

    pub fn evaluate(&self, state: &DualState, guess: Option<&[GridField]>) -> Result<Evaluation, DualError> {
        let n = self.sys.n;
        let vol = self.space.cell_volume();
        let cells: Vec<(f64, GridField, GridField)> = (0..self.steps)
            .into_par_iter()
            .map(|c| -> Result<_, DualError> {
                let cm = self.cell_matrix(state, c);
                let e = &state.e[c];
                let len = self.space.len();
                let mut y = GridField::zeros(&self.space, FieldShape::Vector(n));
                let mut fl = GridField::zeros(&self.space, FieldShape::Sym(self.sys.big_n));
                let mut sum = 0.0;
                let (mut ep, mut cp, mut gp) = (vec![0.0; n], vec![0.0; cm.components()], vec![0.0; n]);
                for p in 0..len {
                    e.point_into(p, &mut ep);
                    cm.point_into(p, &mut cp);
                    let g = guess.map(|g| {
                        g[c].point_into(p, &mut gp);
                        &gp[..]
                    });
                    let r = pointwise_conjugate(self.sys, &ep, &cp, self.tol, g)?;
                    sum += r.value - sym::dot(&ep, &self.v0.point(p));
                    y.set_point(p, &r.argmin);
                    fl.set_point(p, &r.flux);
                }
                Ok((sum * vol * self.dt, y, fl))
            })
            .collect::<Result<_, _>>()?;
        let mut value = 0.0;
        let mut argmin = Vec::with_capacity(self.steps);
        let mut flux = Vec::with_capacity(self.steps);
        for (v, y, f) in cells {
            value += v;
            argmin.push(y);
            flux.push(f);
        }
        Ok(Evaluation { value, argmin, flux })
    }

    /// Gradient of `J` with respect to `a_0..a_{M−1}` by the envelope theorem.
    pub fn gradient(&self, ev: &Evaluation) -> Result<Vec<GridField>, DualError> {
        let vol = self.space.cell_volume();
        let lf = ev.flux.par_iter().map(|f| self.op.apply_l(f)).collect::<Result<Vec<_>, _>>()?;
        let mut out = Vec::with_capacity(self.steps);
        for k in 0..self.steps {
            let mut g = ev.argmin[k].scaled(-vol);
            g.axpy(0.5 * self.dt * vol, &lf[k]);
            if k == 0 {
                g.axpy(vol, &self.v0);
            } else {
                g.axpy(vol, &ev.argmin[k - 1]);
                g.axpy(0.5 * self.dt * vol, &lf[k - 1]);
            }
            out.push(g);
        }
        Ok(out)
    }

    /// `μ Σ_{k<M, x} max(0, −λ_min(κ(t_k)I + 2B_k))²` and its gradient in `a`.
    pub fn penalty(&self, state: &DualState, mu: f64) -> Result<(f64, Vec<GridField>), DualError> {
        let big = self.sys.big_n;
        let parts = (0..self.steps)
            .into_par_iter()
            .map(|k| -> Result<(f64, GridField), DualError> {
                let m = self.node_matrix(state, k);
                let mut acc = GridField::zeros(&self.space, FieldShape::Sym(big));
                let mut val = 0.0;
                let mut any = false;
                let mut buf = vec![0.0; m.components()];
                for p in 0..self.space.len() {
                    m.point_into(p, &mut buf);
                    if sym::min_eigenvalue(big, &buf) >= 0.0 {
                        continue;
                    }
                    let (lam, outer) = sym::min_eigenpair_outer(big, &buf);
                    if lam >= 0.0 {
                        continue;
                    }
                    let h = -lam;
                    val += mu * h * h;
                    // d(μh²)/dB = −2μh·2·vvᵀ.
                    let scaled: Vec<f64> = outer.iter().map(|x| -4.0 * mu * h * x).collect();
                    acc.set_point(p, &scaled);
                    any = true;
                }
                let g = if any { self.op.apply_l(&acc)? } else { GridField::zeros(&self.space, FieldShape::Vector(self.sys.n)) };
                Ok((val, g))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let value = parts.iter().map(|p| p.0).sum();
        Ok((value, parts.into_iter().map(|p| p.1).collect()))
    }

    /// `Κ(0)|Ω| tr F(0) / 2`, the value at `a ≡ 0`.
    pub fn lower_bound(&self) -> f64 {
        self.schedule.big_kappa(0.0) * self.space.volume() * self.sys.flux_zero_trace() / 2.0
    }

    /// Block-tridiagonal (in time) approximation of `−∇²J` at `y = 0`,
    /// diagonal in Fourier modes.
    pub fn preconditioner(&self) -> Preconditioner {
        Preconditioner::new(self)
    }
}

/// Dense `L*`: rows `slot·len + x`, columns `i·len + p`.
fn lstar_matrix(pb: &DualProblem<'_>) -> Result<DMatrix<f64>, DualError> {
    let n = pb.sys.n;
    let len = pb.space.len();
    let packed = pb.sys.packed_len();
    let cols = (0..n * len)
        .into_par_iter()
        .map(|j| {
            let mut u = GridField::zeros(&pb.space, FieldShape::Vector(n));
            u.data[j] = 1.0;
            pb.op.apply_lstar(&u).map(|f| f.data)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DMatrix::from_fn(packed * len, n * len, |r, j| cols[j][r]))
}

/// `−∇²(J − penalty)` as block-tridiagonal in time (`diag`, `upper`), with a
/// Gauss–Newton term for the penalty.
fn newton_system(
    pb: &DualProblem<'_>,
    state: &DualState,
    ev: &Evaluation,
    mu: f64,
    lmat: &DMatrix<f64>,
) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
    let sys = pb.sys;
    let (n, len, packed, big) = (sys.n, pb.space.len(), sys.packed_len(), sys.big_n);
    let m = n * len;
    let w = pb.dt * pb.space.cell_volume();
    let inv_dt = 1.0 / pb.dt;
    let cells: Vec<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> = (0..pb.steps)
        .into_par_iter()
        .map(|c| {
            let cm = pb.cell_matrix(state, c);
            let mut q = DMatrix::<f64>::zeros(m, m);
            let mut hinv = Vec::with_capacity(len);
            let (mut y, mut cp, mut col) = (vec![0.0; n], vec![0.0; packed], vec![0.0; n]);
            let mut unit = vec![0.0; packed];
            for x in 0..len {
                ev.argmin[c].point_into(x, &mut y);
                cm.point_into(x, &mut cp);
                let h = DMatrix::from_row_slice(n, n, &sys.pairing_hessian(&y, &cp)).scale(0.5);
                hinv.push(h.clone().try_inverse().unwrap_or_else(|| DMatrix::zeros(n, n)));
                for s in 0..packed {
                    unit[s] = 1.0;
                    sys.pairing_gradient(&y, &unit, &mut col);
                    unit[s] = 0.0;
                    for i in 0..n {
                        if col[i] != 0.0 {
                            let mut row = q.row_mut(i * len + x);
                            row += lmat.row(s * len + x) * (0.5 * col[i]);
                        }
                    }
                }
            }
            let mut pm = q.clone();
            let mut nm = q;
            for i in 0..m {
                pm[(i, i)] -= inv_dt;
                nm[(i, i)] += inv_dt;
            }
            let weigh = |a: &DMatrix<f64>| {
                let mut out = DMatrix::<f64>::zeros(m, m);
                for x in 0..len {
                    for i in 0..n {
                        let mut row = out.row_mut(i * len + x);
                        for j in 0..n {
                            let hij = hinv[x][(i, j)];
                            if hij != 0.0 {
                                row += a.row(j * len + x) * (w * hij);
                            }
                        }
                    }
                }
                out
            };
            let wp = weigh(&pm);
            let wn = weigh(&nm);
            (pm.transpose() * &wp, nm.transpose() * &wn, pm.transpose() * &wn)
        })
        .collect();
    let mut diag = vec![DMatrix::<f64>::zeros(m, m); pb.steps];
    let mut upper = Vec::with_capacity(pb.steps);
    for (c, (pp, nn, pn)) in cells.into_iter().enumerate() {
        diag[c] += pp;
        if c + 1 < pb.steps {
            diag[c + 1] += nn;
        }
        upper.push(pn);
    }
    for (k, d) in diag.iter_mut().enumerate() {
        let nodem = pb.node_matrix(state, k);
        let mut buf = vec![0.0; packed];
        for x in 0..len {
            nodem.point_into(x, &mut buf);
            if sym::min_eigenvalue(big, &buf) >= 0.0 {
                continue;
            }
            let (lam, outer) = sym::min_eigenpair_outer(big, &buf);
            if lam >= 0.0 {
                continue;
            }
            let mut r = DVector::<f64>::zeros(m);
            for (s, o) in outer.iter().enumerate() {
                if *o != 0.0 {
                    r.axpy(-2.0 * o, &lmat.row(s * len + x).transpose(), 1.0);
                }
            }
            d.ger(2.0 * mu, &r, &r, 1.0);
        }
    }
    (diag, upper)
}

/// Solves the block-tridiagonal SPD system; `None` if a pivot fails.
fn block_solve(diag: &[DMatrix<f64>], upper: &[DMatrix<f64>], rhs: &[DVector<f64>]) -> Option<Vec<DVector<f64>>> {
    let k_len = diag.len();
    let mut chols = Vec::with_capacity(k_len);
    let mut z: Vec<DMatrix<f64>> = Vec::with_capacity(k_len);
    let mut r: Vec<DVector<f64>> = Vec::with_capacity(k_len);
    for k in 0..k_len {
        let mut s = diag[k].clone();
        let mut rk = rhs[k].clone();
        if k > 0 {
            s -= upper[k - 1].transpose() * &z[k - 1];
            rk -= z[k - 1].transpose() * &r[k - 1];
        }
        let ridge = 1e-14 * (0..s.nrows()).map(|i| s[(i, i)].abs()).fold(0.0, f64::max);
        for i in 0..s.nrows() {
            s[(i, i)] += ridge;
        }
        let ch = s.cholesky()?;
        if k + 1 < k_len {
            z.push(ch.solve(&upper[k]));
        }
        r.push(rk);
        chols.push(ch);
    }
    let mut x = vec![DVector::zeros(0); k_len];
    for k in (0..k_len).rev() {
        let mut xk = chols[k].solve(&r[k]);
        if k + 1 < k_len {
            xk -= &z[k] * &x[k + 1];
        }
        x[k] = xk;
    }
    Some(x)
}

/// Inverse of a per-mode block-tridiagonal model Hessian.
pub struct Preconditioner {
    n: usize,
    steps: usize,
    len: usize,
    spectral: grid::Spectral,
    /// Per mode: inverted pivot blocks and upper blocks of the block LU.
    pivots: Vec<Vec<DMatrix<Complex64>>>,
    uppers: Vec<Vec<DMatrix<Complex64>>>,
}

impl Preconditioner {
    fn new(pb: &DualProblem<'_>) -> Self {
        let sys = pb.sys;
        let n = sys.n;
        let len = pb.space.len();
        let packed = sys.packed_len();
        let vol = pb.space.cell_volume();
        let zero = vec![0.0; n];
        // Gm: ℝ^packed → ℝⁿ, P ↦ ∇_y(F:P) at y = 0.
        let mut gm = DMatrix::<f64>::zeros(n, packed);
        let mut col = vec![0.0; n];
        for s in 0..packed {
            let mut unit = vec![0.0; packed];
            unit[s] = 1.0;
            sys.pairing_gradient(&zero, &unit, &mut col);
            for i in 0..n {
                gm[(i, s)] = col[i];
            }
        }
        let mut h1 = DMatrix::from_row_slice(n, n, &sys.pairing_hessian(&zero, &sym::identity(sys.big_n))).scale(0.5);
        let top = h1.abs().max().max(1.0);
        for i in 0..n {
            h1[(i, i)] += 1e-8 * top;
        }
        let h1inv = h1.try_inverse().unwrap_or_else(|| DMatrix::identity(n, n));
        let h1inv = h1inv.map(|x| Complex64::new(x, 0.0));
        let gmc = gm.map(|x| Complex64::new(x, 0.0));
        let eye = DMatrix::<Complex64>::identity(n, n);
        let inv_dt = Complex64::new(1.0 / pb.dt, 0.0);
        let weights: Vec<f64> = pb.kbar.iter().map(|k| pb.dt * vol / k).collect();
        let steps = pb.steps;
        let (pivots, uppers): (Vec<_>, Vec<_>) = (0..len)
            .into_par_iter()
            .map(|p| {
                let mut s_hat = DMatrix::<Complex64>::zeros(packed, n);
                for (slot, comp, v) in pb.op.lstar_symbol_at(p) {
                    s_hat[(slot, comp)] += v;
                }
                let q = (&gmc * &s_hat).scale(0.5);
                let pm = &q - &eye * inv_dt;
                let nm = &q + &eye * inv_dt;
                let x = pm.adjoint() * &h1inv * &pm;
                let y = nm.adjoint() * &h1inv * &nm;
                let z = pm.adjoint() * &h1inv * &nm;
                let mut piv = Vec::with_capacity(steps);
                let mut ups = Vec::with_capacity(steps);
                let mut prev: Option<(DMatrix<Complex64>, DMatrix<Complex64>)> = None;
                for k in 0..steps {
                    let w = Complex64::new(weights[k], 0.0);
                    let mut d = &x * w;
                    if k > 0 {
                        d += &y * Complex64::new(weights[k - 1], 0.0);
                    }
                    if let Some((pinv, up)) = &prev {
                        // Schur update: D_k − U_{k−1}ᴴ D'_{k−1}⁻¹ U_{k−1}.
                        d -= up.adjoint() * pinv * up;
                    }
                    let dinv = d.clone().try_inverse().unwrap_or_else(|| DMatrix::identity(n, n));
                    let up = &z * w;
                    piv.push(dinv.clone());
                    ups.push(up.clone());
                    prev = Some((dinv, up));
                }
                (piv, ups)
            })
            .unzip();
        Self { n, steps, len, spectral: grid::Spectral::new(&pb.space), pivots, uppers }
    }

    /// Applies the model inverse Hessian to a flattened gradient.
    pub fn apply(&self, g: &[f64]) -> Vec<f64> {
        let (n, len, steps) = (self.n, self.len, self.steps);
        let spec: Vec<Vec<Complex64>> =
            (0..steps * n).into_par_iter().map(|kc| self.spectral.forward(&g[kc * len..(kc + 1) * len])).collect();
        let solved: Vec<Vec<DVector<Complex64>>> = (0..len)
            .into_par_iter()
            .map(|p| {
                let piv = &self.pivots[p];
                let ups = &self.uppers[p];
                // Forward elimination.
                let mut rhs: Vec<DVector<Complex64>> = Vec::with_capacity(steps);
                for k in 0..steps {
                    let mut r = DVector::from_iterator(n, (0..n).map(|c| spec[k * n + c][p]));
                    if k > 0 {
                        let prev = &rhs[k - 1];
                        r -= ups[k - 1].adjoint() * (&piv[k - 1] * prev);
                    }
                    rhs.push(r);
                }
                // Back substitution.
                let mut x: Vec<DVector<Complex64>> = vec![DVector::zeros(n); steps];
                for k in (0..steps).rev() {
                    let mut r = rhs[k].clone();
                    if k + 1 < steps {
                        r -= &ups[k] * &x[k + 1];
                    }
                    x[k] = &piv[k] * r;
                }
                x
            })
            .collect();
        let mut out = vec![0.0; g.len()];
        out.par_chunks_mut(len).enumerate().for_each(|(kc, chunk)| {
            let (k, c) = (kc / n, kc % n);
            let s: Vec<Complex64> = (0..len).map(|p| solved[p][k][c]).collect();
            chunk.copy_from_slice(&self.spectral.inverse_real(s));
        });
        out
    }
}

/// Discrete objective at `state`; fills `state.value`.
pub fn dual_objective(
    sys: &SystemSpec,
    v0: &GridField,
    state: &mut DualState,
    schedule: &WeightSchedule,
    tol: f64,
) -> Result<f64, DualError> {
    let pb = DualProblem::new(sys, v0, &state.grid, schedule, tol)?;
    let ev = pb.evaluate(state, None)?;
    state.value = ev.value;
    Ok(ev.value)
}

/// Gradient of the discrete objective in `a_0..a_{M−1}`.
pub fn dual_gradient(
    sys: &SystemSpec,
    v0: &GridField,
    state: &DualState,
    schedule: &WeightSchedule,
    tol: f64,
) -> Result<Vec<GridField>, DualError> {
    let pb = DualProblem::new(sys, v0, &state.grid, schedule, tol)?;
    let ev = pb.evaluate(state, None)?;
    pb.gradient(&ev)
}

pub fn cone_penalty(sys: &SystemSpec, state: &DualState, schedule: &WeightSchedule, mu: f64) -> Result<(f64, Vec<GridField>), DualError> {
    if !(mu > 0.0) {
        return Err(DualError::Param("penalty weight must be positive".into()));
    }
    let space = spatial(&state.grid);
    let v0 = GridField::zeros(&space, FieldShape::Vector(sys.n));
    DualProblem::new(sys, &v0, &state.grid, schedule, 1e-12)?.penalty(state, mu)
}

#[derive(Debug, Clone, Serialize)]
pub enum DualStart {
    Zero,
    /// Smooth random potential damped by `Κ(t)/Κ(0)`; amplitude halves until feasible.
    Random {
        seed: u64,
        amplitude: f64,
        modes: usize,
    },
    #[serde(skip)]
    Given(Vec<GridField>),
}

#[derive(Debug, Clone, Serialize)]
pub struct DualOptions {
    pub mu0: f64,
    pub mu_stages: usize,
    pub max_iters: usize,
    /// Relative stationarity target on the model Newton decrement.
    pub tol: f64,
    /// Pointwise conjugate gradient tolerance.
    pub conj_tol: f64,
    pub history: usize,
    pub precondition: bool,
    /// Damped Newton iterations after a stage that L-BFGS leaves unconverged,
    /// used when one time block has at most `newton_block` unknowns.
    pub newton_iters: usize,
    pub newton_block: usize,
    pub start: DualStart,
}

impl Default for DualOptions {
    fn default() -> Self {
        Self {
            mu0: 1.0,
            mu_stages: 4,
            max_iters: 400,
            tol: 1e-12,
            conj_tol: 1e-11,
            history: 10,
            precondition: true,
            newton_iters: 60,
            newton_block: 256,
            start: DualStart::Random { seed: 7, amplitude: 1e-3, modes: 3 },
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    pub mu: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub objective: f64,
    pub penalty: f64,
    pub decrement: f64,
    pub newton_iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct DualSolution {
    pub state: DualState,
    /// Final `J` without the penalty.
    pub value: f64,
    pub lower_bound: f64,
    pub penalty: f64,
    /// Plain gradient norm of `J − penalty` at the final state.
    pub stationarity: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `J − penalty` after every accepted step, all stages.
    pub history: Vec<f64>,
    pub stages: Vec<StageReport>,
}

fn flatten(fields: &[GridField]) -> Vec<f64> {
    fields.iter().flat_map(|f| f.data.iter().copied()).collect()
}

fn unflatten(x: &[f64], space: &PeriodicGrid, n: usize, steps: usize) -> Vec<GridField> {
    let block = n * space.len();
    (0..steps)
        .map(|k| GridField { grid: space.clone(), shape: FieldShape::Vector(n), data: x[k * block..(k + 1) * block].to_vec() })
        .collect()
}

fn starting_potential(pb: &DualProblem<'_>, start: &DualStart) -> Result<Vec<GridField>, DualError> {
    let n = pb.sys.n;
    match start {
        DualStart::Zero => Ok(vec![GridField::zeros(&pb.space, FieldShape::Vector(n)); pb.steps]),
        DualStart::Given(a) => {
            let mut a = a.clone();
            if a.len() == pb.steps + 1 {
                a.pop();
            }
            if a.len() != pb.steps {
                return Err(DualError::Param("given potential has the wrong number of nodes".into()));
            }
            Ok(a)
        }
        DualStart::Random { seed, amplitude, modes } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let base = grid::random_smooth(&pb.space, FieldShape::Vector(n), *modes, 1.0, &mut rng);
            let k0 = pb.schedule.big_kappa(0.0);
            let mut amp = *amplitude;
            for _ in 0..60 {
                let a: Vec<GridField> = (0..pb.steps).map(|k| base.scaled(amp * pb.schedule.big_kappa(pb.time(k)) / k0)).collect();
                let st = pb.state(a.clone())?;
                if pb.node_margin(&st) > 0.0 && pb.cell_margin(&st) > 0.0 {
                    return Ok(a);
                }
                amp *= 0.5;
            }
            Ok(vec![GridField::zeros(&pb.space, FieldShape::Vector(n)); pb.steps])
        }
    }
}

/// Damped Newton on `J − μ·penalty`; returns (iterations, decrement, converged).
fn newton_refine(
    pb: &DualProblem<'_>,
    x: &mut Vec<f64>,
    mu: f64,
    lmat: &DMatrix<f64>,
    opts: &DualOptions,
    guess: &mut Option<Vec<GridField>>,
    history: &mut Vec<f64>,
) -> Result<(usize, f64, bool), DualError> {
    let n = pb.sys.n;
    let block = n * pb.space.len();
    let phi = |x: &[f64], guess: Option<&[GridField]>| -> Option<(DualState, Evaluation, f64)> {
        let st = pb.state(unflatten(x, &pb.space, n, pb.steps)).ok()?;
        let ev = pb.evaluate(&st, guess).ok()?;
        let (pen, _) = pb.penalty(&st, mu).ok()?;
        let v = ev.value - pen;
        Some((st, ev, v))
    };
    let Some((mut st, mut ev, mut val)) = phi(x, guess.as_deref()).or_else(|| phi(x, None)) else {
        return Ok((0, f64::INFINITY, false));
    };
    let mut dec = f64::INFINITY;
    // Levenberg–Marquardt shift relative to the mean diagonal.
    let mut lm = 1e-8;
    for it in 0..opts.newton_iters {
        let mut g = flatten(&pb.gradient(&ev)?);
        let (_, pg) = pb.penalty(&st, mu)?;
        g.iter_mut().zip(flatten(&pg)).for_each(|(a, b)| *a -= b);
        let (diag, upper) = newton_system(pb, &st, &ev, mu, lmat);
        let rhs: Vec<DVector<f64>> = g.chunks(block).map(DVector::from_column_slice).collect();
        let scale = diag.iter().map(|d| d.trace()).sum::<f64>() / (diag.len() * block) as f64;
        let mut accepted = None;
        let mut first = true;
        while lm < 1e12 {
            let shifted: Vec<DMatrix<f64>> = diag.iter().map(|d| d + DMatrix::identity(block, block) * (lm * scale)).collect();
            let Some(sol) = block_solve(&shifted, &upper, &rhs) else {
                lm *= 10.0;
                continue;
            };
            let d: Vec<f64> = sol.iter().flat_map(|v| v.iter().copied()).collect();
            let pred = 0.5 * sym::dot(&g, &d);
            if first {
                dec = pred;
                first = false;
                if dec <= opts.tol * (1.0 + val.abs()) {
                    *guess = Some(ev.argmin);
                    return Ok((it, dec, true));
                }
            }
            let trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + b).collect();
            match phi(&trial, Some(&ev.argmin)) {
                Some((s2, e2, v2)) if v2 >= val + 1e-4 * pred => {
                    accepted = Some((trial, s2, e2, v2));
                    break;
                }
                _ => lm *= 10.0,
            }
        }
        let Some((trial, s2, e2, v2)) = accepted else {
            *guess = Some(ev.argmin);
            return Ok((it, dec, false));
        };
        lm = (lm / 3.0).max(1e-12);
        *x = trial;
        st = s2;
        ev = e2;
        val = v2;
        history.push(val);
    }
    *guess = Some(ev.argmin);
    Ok((opts.newton_iters, dec, false))
}

/// Maximizes `J − penalty` by preconditioned limited-memory ascent with a
/// penalty ladder `μ₀·10^s`.
pub fn solve_dual(
    sys: &SystemSpec,
    v0: &GridField,
    grid: &PeriodicGrid,
    schedule: &WeightSchedule,
    opts: &DualOptions,
) -> Result<DualSolution, DualError> {
    let pb = DualProblem::new(sys, v0, grid, schedule, opts.conj_tol)?;
    let n = sys.n;
    let mut x = flatten(&starting_potential(&pb, &opts.start)?);
    let pre = if opts.precondition { Some(pb.preconditioner()) } else { None };
    let mut guess: Option<Vec<GridField>> = None;
    let mut history = Vec::new();
    let mut stages = Vec::new();
    let mut total_iters = 0;
    let mut converged = false;
    let mut lmat: Option<DMatrix<f64>> = None;
    for s in 0..opts.mu_stages.max(1) {
        let mu = opts.mu0 * 10f64.powi(s as i32);
        let lopts = LbfgsOptions { history: opts.history, max_iters: opts.max_iters, tol: opts.tol, ..Default::default() };
        let rep = optim::minimize(
            &mut x,
            |x| {
                let st = pb.state(unflatten(x, &pb.space, n, pb.steps)).ok()?;
                let ev = pb.evaluate(&st, guess.as_deref()).ok()?;
                let g = pb.gradient(&ev).ok()?;
                let (pen, pg) = pb.penalty(&st, mu).ok()?;
                let mut grad = flatten(&g);
                grad.iter_mut().zip(flatten(&pg)).for_each(|(a, b)| *a = -(*a - b));
                guess = Some(ev.argmin);
                Some((-(ev.value - pen), grad))
            },
            |g| match &pre {
                Some(p) => p.apply(g),
                None => g.to_vec(),
            },
            &lopts,
        )
        .ok_or_else(|| DualError::Param("starting potential is outside the cone".into()))?;
        total_iters += rep.iterations;
        history.extend(rep.history.iter().map(|v| -v));
        let mut stage_conv = rep.converged;
        let mut decrement = rep.decrement;
        let mut newton_iterations = 0;
        if !stage_conv && opts.newton_iters > 0 && n * pb.space.len() <= opts.newton_block {
            if lmat.is_none() {
                lmat = Some(lstar_matrix(&pb)?);
            }
            let nr = newton_refine(&pb, &mut x, mu, lmat.as_ref().expect("built"), opts, &mut guess, &mut history)?;
            newton_iterations = nr.0;
            decrement = nr.1;
            stage_conv = nr.2;
            total_iters += newton_iterations;
        }
        let st = pb.state(unflatten(&x, &pb.space, n, pb.steps))?;
        let ev = pb.evaluate(&st, guess.as_deref())?;
        let (pen, _) = pb.penalty(&st, mu)?;
        stages.push(StageReport {
            mu,
            iterations: rep.iterations,
            evaluations: rep.evaluations,
            objective: ev.value,
            penalty: pen,
            decrement,
            newton_iterations,
            converged: stage_conv,
        });
        converged = stage_conv;
    }
    let mut state = pb.state(unflatten(&x, &pb.space, n, pb.steps))?;
    let ev = pb.evaluate(&state, guess.as_deref())?;
    let mu = opts.mu0 * 10f64.powi(opts.mu_stages.max(1) as i32 - 1);
    let (pen, pg) = pb.penalty(&state, mu)?;
    let mut grad = flatten(&pb.gradient(&ev)?);
    grad.iter_mut().zip(flatten(&pg)).for_each(|(a, b)| *a -= b);
    state.value = ev.value;
    state.cone_margin = pb.node_margin(&state);
    Ok(DualSolution {
        value: ev.value,
        lower_bound: pb.lower_bound(),
        penalty: pen,
        stationarity: grad.iter().map(|v| v * v).sum::<f64>().sqrt(),
        iterations: total_iters,
        converged,
        history,
        stages,
        state,
    })
}

/// `v^#(t_k) = −(1/Κ(t_k)) Σ_{c ≥ k} dt·E_c` and `v = ∇K*(v^#)` for `k < M`.
pub fn recover_primal(
    sys: &SystemSpec,
    e: &[GridField],
    grid: &PeriodicGrid,
    schedule: &WeightSchedule,
    tol: f64,
) -> Result<Trajectory, DualError> {
    let (_, steps) = grid.time.ok_or_else(|| DualError::Param("dual grid needs a time axis".into()))?;
    if e.len() != steps {
        return Err(DualError::Param("one E field per time cell expected".into()));
    }
    let dt = grid.time_step().expect("time axis");
    let space = spatial(grid);
    let mut acc = GridField::zeros(&space, FieldShape::Vector(sys.n));
    let mut sharp = vec![acc.clone(); steps];
    for k in (0..steps).rev() {
        acc.axpy(dt, &e[k]);
        sharp[k] = acc.scaled(-1.0 / schedule.big_kappa(k as f64 * dt));
    }
    let mut states = Vec::with_capacity(steps);
    let mut prev: Option<GridField> = None;
    for w in &sharp {
        let v = sys.unsharp_field(w, tol, prev.as_ref())?;
        prev = Some(v.clone());
        states.push(v);
    }
    let times: Vec<f64> = (0..steps).map(|k| k as f64 * dt).collect();
    Ok(Trajectory { grid: space, final_valid_time: *times.last().unwrap_or(&0.0), times, sharp, states, blown_up: false })
}
