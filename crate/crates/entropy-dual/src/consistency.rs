//! Strong-to-dual construction, zero-gap verification, subsolution probes and
//! the Hopf–Lax cross-check for the quadratic Hamilton–Jacobi instance.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dual::{self, DualError, DualOptions, DualProblem, DualState};
use crate::grid::{self, FieldShape, GridError, GridField, PeriodicGrid};
use crate::optim::{self, LbfgsOptions};
use crate::strong::{self, Trajectory, WeightSchedule};
use crate::sym;
use crate::systems::{self, LambdaCone, SystemError, SystemSpec};

#[derive(Debug, thiserror::Error)]
pub enum ConsistencyError {
    #[error("invalid input: {0}")]
    Param(String),
    #[error("subsolution violates the Λ-order: margin {0:e}")]
    NotSubsolution(f64),
    #[error(transparent)]
    Dual(#[from] DualError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// `a_k = Κ(t_k) v^#(t_k)` on the trajectory's nodes.
pub fn build_dual_from_strong(sys: &SystemSpec, traj: &Trajectory, schedule: &WeightSchedule) -> Result<DualState, ConsistencyError> {
    if traj.len() < 2 {
        return Err(ConsistencyError::Param("trajectory needs at least two nodes".into()));
    }
    let steps = traj.len() - 1;
    let t_end = traj.times[steps];
    if (t_end - schedule.t_end).abs() > 1e-9 * t_end.max(1.0) {
        return Err(ConsistencyError::Param(format!("trajectory ends at {t_end}, schedule at {}", schedule.t_end)));
    }
    let grid = traj.grid.clone().with_time(t_end, steps)?;
    let op = sys.operator(&traj.grid)?;
    let a: Vec<GridField> = (0..steps).map(|k| traj.sharp[k].scaled(schedule.big_kappa(traj.times[k]))).collect();
    Ok(DualState::from_potential(sys, &grid, &op, a)?)
}

/// `Κ(0)·(∫K(v₀) + ½|Ω| tr F(0))`.
pub fn reference_value(sys: &SystemSpec, v0: &GridField, schedule: &WeightSchedule) -> f64 {
    schedule.big_kappa(0.0) * (strong::total_entropy(sys, v0) + 0.5 * v0.grid.volume() * sys.flux_zero_trace())
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ConsistencyTolerances {
    /// Relative to `1 + |reference|`.
    pub gap: f64,
    pub recovery: f64,
    pub constraint: f64,
    pub margin: f64,
    /// Allowed excess of a solver value over the candidate, relative.
    pub maximality: f64,
}

impl Default for ConsistencyTolerances {
    fn default() -> Self {
        Self { gap: 1e-6, recovery: 1e-8, constraint: 1e-8, margin: 1e-10, maximality: 1e-6 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ConsistencyOptions {
    pub tolerances: ConsistencyTolerances,
    pub conj_tol: f64,
    /// Run the optimizer too and compare its value with the candidate.
    pub solve: Option<DualOptions>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConsistencyReport {
    pub objective_at_candidate: f64,
    pub reference: f64,
    pub relative_gap: f64,
    pub constraint_residual: f64,
    pub cone_margin: f64,
    pub feasibility_margin: f64,
    /// Max over interior nodes of the L² distance between recovered and strong states.
    pub recovery_error: f64,
    pub solver_value: Option<f64>,
    pub hypothesis_ok: bool,
    pub hypothesis_note: Option<String>,
    pub tolerances: ConsistencyTolerances,
    pub pass: bool,
}

fn l2_distance(a: &GridField, b: &GridField) -> f64 {
    (a.sub(b).norm().powi(2) * a.grid.cell_volume()).sqrt()
}

pub fn verify_consistency(
    sys: &SystemSpec,
    traj: &Trajectory,
    schedule: &WeightSchedule,
    opts: &ConsistencyOptions,
) -> Result<ConsistencyReport, ConsistencyError> {
    let tol = opts.tolerances;
    let conj_tol = if opts.conj_tol > 0.0 { opts.conj_tol } else { 1e-12 };
    let feas = strong::feasibility_margin(sys, traj, schedule)?;
    let hypothesis_ok = feas >= -tol.margin;
    let hypothesis_note =
        (!hypothesis_ok).then(|| format!("weighted cone condition fails along the strong solution (margin {feas:e}); increase gamma"));
    let mut state = build_dual_from_strong(sys, traj, schedule)?;
    let v0 = &traj.states[0];
    let pb = DualProblem::new(sys, v0, &state.grid, schedule, conj_tol)?;
    let reference = reference_value(sys, v0, schedule);
    let objective = match pb.evaluate(&state, None) {
        Ok(ev) => ev.value,
        Err(DualError::Infeasible(_)) if !hypothesis_ok => f64::NAN,
        Err(e) => return Err(e.into()),
    };
    state.value = objective;
    let cone_margin = pb.node_margin(&state);
    state.cone_margin = cone_margin;
    let constraint_residual = state.constraint_residual(&pb.op)?;
    let recovered = dual::recover_primal(sys, &state.e, &state.grid, schedule, conj_tol)?;
    let steps = state.steps();
    let recovery_error = (1..steps).map(|k| l2_distance(&recovered.states[k], &traj.states[k])).fold(0.0, f64::max);
    let relative_gap = (objective - reference).abs() / (1.0 + reference.abs());
    let solver_value = match &opts.solve {
        Some(o) => Some(dual::solve_dual(sys, v0, &state.grid, schedule, o)?.value),
        None => None,
    };
    let maximal = solver_value.is_none_or(|s| s <= objective + tol.maximality * (1.0 + objective.abs()));
    let pass = relative_gap <= tol.gap
        && recovery_error <= tol.recovery
        && constraint_residual <= tol.constraint * (1.0 + state.b.iter().map(|b| b.max_abs()).fold(0.0, f64::max))
        && cone_margin >= -tol.margin
        && maximal;
    Ok(ConsistencyReport {
        objective_at_candidate: objective,
        reference,
        relative_gap,
        constraint_residual,
        cone_margin,
        feasibility_margin: feas,
        recovery_error,
        solver_value,
        hypothesis_ok,
        hypothesis_note,
        tolerances: tol,
        pass,
    })
}

// ---------------------------------------------------------------------------
// Subsolutions

/// `(v, M)` on trajectory nodes with `M − F(v)` Λ-nonnegative.
#[derive(Debug, Clone)]
pub struct Subsolution {
    pub times: Vec<f64>,
    pub v: Vec<GridField>,
    pub m: Vec<GridField>,
    /// `K̃(t) = ½∫tr M − ½|Ω| tr F(0)`.
    pub entropy: Vec<f64>,
}

fn half_trace_integral(big: usize, m: &GridField) -> f64 {
    let vol = m.grid.cell_volume();
    0.5 * vol * (0..big).map(|l| m.component(sym::packed_index(big, l, l)).iter().sum::<f64>()).sum::<f64>()
}

impl Subsolution {
    pub fn from_parts(sys: &SystemSpec, times: Vec<f64>, v: Vec<GridField>, m: Vec<GridField>) -> Result<Self, ConsistencyError> {
        if times.len() != v.len() || v.len() != m.len() {
            return Err(ConsistencyError::Param("times, v and M must have equal lengths".into()));
        }
        let offset = |f: &GridField| 0.5 * f.grid.volume() * sys.flux_zero_trace();
        let entropy = m.iter().map(|mk| half_trace_integral(sys.big_n, mk) - offset(mk)).collect();
        Ok(Self { times, v, m, entropy })
    }

    /// Min over points, nodes and sampled `P ∈ Λ ∩ PSD` of `(M − F(v)):P`.
    pub fn order_margin(&self, sys: &SystemSpec, samples: usize, seed: u64) -> f64 {
        let cone = LambdaCone::new(sys);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let qs: Vec<Vec<f64>> = (0..samples).map(|_| cone.sample(&mut rng)).collect();
        self.v
            .par_iter()
            .zip(&self.m)
            .map(|(v, m)| {
                let f = sys.flux_field(v);
                let d = m.sub(&f);
                -grid::max_pointwise(&d, |p| -qs.iter().map(|q| sym::dot(p, q)).fold(f64::INFINITY, f64::min))
            })
            .reduce(|| f64::INFINITY, f64::min)
    }
}

/// `M = F(v) + g(t) I` along a strong trajectory.
pub fn subsolution_inflate(sys: &SystemSpec, traj: &Trajectory, g: &[f64]) -> Result<Subsolution, ConsistencyError> {
    if g.len() != traj.len() {
        return Err(ConsistencyError::Param("one inflation value per node expected".into()));
    }
    if g.iter().any(|x| !(*x >= 0.0)) {
        return Err(ConsistencyError::Param("inflation profile must be nonnegative".into()));
    }
    let big = sys.big_n;
    let m = traj
        .states
        .iter()
        .zip(g)
        .map(|(v, gk)| {
            let mut f = sys.flux_field(v);
            for l in 0..big {
                f.component_mut(sym::packed_index(big, l, l)).iter_mut().for_each(|x| *x += gk);
            }
            f
        })
        .collect();
    Subsolution::from_parts(sys, traj.times.clone(), traj.states.clone(), m)
}

fn phi1(u: f64) -> f64 {
    if u.abs() < 1e-3 {
        1.0 - u / 2.0 + u * u / 6.0 - u * u * u / 24.0
    } else {
        -(-u).exp_m1() / u
    }
}

fn phi2(u: f64) -> f64 {
    if u.abs() < 1e-3 {
        0.5 - u / 3.0 + u * u / 8.0 - u * u * u / 30.0
    } else {
        (1.0 - (-u).exp() * (1.0 + u)) / (u * u)
    }
}

/// `∫ κ(t) K̃(t) dt` for the piecewise-linear interpolant of `K̃` on `times`.
pub fn weighted_entropy_integral(times: &[f64], series: &[f64], schedule: &WeightSchedule) -> f64 {
    assert_eq!(times.len(), series.len(), "one value per node");
    let g = schedule.gamma;
    times
        .windows(2)
        .zip(series.windows(2))
        .map(|(t, k)| {
            let h = t[1] - t[0];
            let u = g * h;
            let base = schedule.kappa(t[0]) * h;
            let right = phi2(u);
            base * ((phi1(u) - right) * k[0] + right * k[1])
        })
        .sum()
}

// ---------------------------------------------------------------------------
// Dafermos probe

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DafermosOptions {
    pub tol: f64,
    /// Λ ∩ PSD samples constraining the adversary.
    pub samples: usize,
    /// Fresh samples used to certify its result.
    pub certify_samples: usize,
    /// Fourier modes per axis in the perturbation family.
    pub modes: usize,
    pub seed: u64,
}

impl Default for DafermosOptions {
    fn default() -> Self {
        Self { tol: 1e-6, samples: 48, certify_samples: 400, modes: 2, seed: 11 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DafermosReport {
    pub t1: f64,
    /// `½∫₀^{T1} κ (M, I)`.
    pub weighted: f64,
    /// `(Κ(0) − Κ(T1))·K₀`.
    pub reference: f64,
    pub order_margin: f64,
    /// Lowest value reached by the adversarial search, after certification.
    pub adversarial_min: f64,
    pub adversarial_shift: f64,
    pub perturbation_dim: usize,
    /// First node pair where the entropy pattern holds, if any.
    pub pattern_pair: Option<(usize, usize)>,
    pub adversarial_pattern_pair: Option<(usize, usize)>,
    pub pass: bool,
}

/// Orthonormal basis of low-mode symmetric fields `P` with `LP = 0`.
pub fn kernel_basis(sys: &SystemSpec, space: &PeriodicGrid, modes: usize) -> Result<Vec<Vec<f64>>, ConsistencyError> {
    let op = sys.operator(space)?;
    let (n, len, packed) = (sys.n, space.len(), sys.packed_len());
    let cols = (0..n * len)
        .into_par_iter()
        .map(|j| {
            let mut u = GridField::zeros(space, FieldShape::Vector(n));
            u.data[j] = 1.0;
            op.apply_lstar(&u).map(|f| f.data)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let a = DMatrix::from_fn(packed * len, n * len, |r, j| cols[j][r]);
    let gram = a.transpose() * &a;
    let cutoff = 1e-9 * gram.amax() * gram.nrows() as f64;
    let gram_pinv = gram.pseudo_inverse(cutoff).map_err(|e| ConsistencyError::Param(e.into()))?;
    let mut profiles: Vec<Vec<f64>> = vec![vec![1.0; len]];
    for axis in 0..space.dim() {
        for k in 1..=modes {
            let w = 2.0 * std::f64::consts::PI * k as f64 / space.lengths[axis];
            let coords: Vec<f64> = (0..len).map(|p| space.coordinates(p)[axis]).collect();
            profiles.push(coords.iter().map(|x| (w * x).cos()).collect());
            profiles.push(coords.iter().map(|x| (w * x).sin()).collect());
        }
    }
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for prof in &profiles {
        for s in 0..packed {
            let mut z = DVector::<f64>::zeros(packed * len);
            z.rows_mut(s * len, len).copy_from_slice(prof);
            let z = &z - &a * (&gram_pinv * (a.transpose() * &z));
            let mut z = z;
            for b in &basis {
                let c = b.dot(&z);
                z.axpy(-c, b, 1.0);
            }
            let nrm = z.norm();
            if nrm > 1e-8 * (len as f64).sqrt() {
                basis.push(z / nrm);
            }
        }
    }
    Ok(basis.into_iter().map(|b| b.data.into()).collect())
}

/// First `(i0, i1)`, `i1 − i0 ≥ 2`, with `K̃ ≤ K` on `(0, t_{i1})` and
/// `K̃ < K` on `(t_{i0}, t_{i1})`, at tolerance `tol`.
pub fn entropy_pattern(sub: &[f64], strong: &[f64], tol: f64) -> Option<(usize, usize)> {
    let m = sub.len().min(strong.len());
    let le: Vec<bool> = (0..m).map(|k| sub[k] <= strong[k] + tol).collect();
    let lt: Vec<bool> = (0..m).map(|k| sub[k] < strong[k] - tol).collect();
    for i1 in 2..m {
        if !(1..i1).all(|k| le[k]) {
            continue;
        }
        for i0 in 0..=i1 - 2 {
            if (i0 + 1..i1).all(|k| lt[k]) {
                return Some((i0, i1));
            }
        }
    }
    None
}

pub fn dafermos_check(
    sys: &SystemSpec,
    sub: &Subsolution,
    traj: &Trajectory,
    schedule: &WeightSchedule,
    t1: f64,
    opts: &DafermosOptions,
) -> Result<DafermosReport, ConsistencyError> {
    let last = traj.times.iter().rposition(|t| *t <= t1 + 1e-12).unwrap_or(0);
    if last < 1 || sub.times.len() <= last {
        return Err(ConsistencyError::Param("subsolution and trajectory must cover [0, T1]".into()));
    }
    let order_margin = sub.order_margin(sys, opts.certify_samples, opts.seed ^ 0x5eed);
    if order_margin < -1e-10 {
        return Err(ConsistencyError::NotSubsolution(order_margin));
    }
    let times = &traj.times[..=last];
    let t1 = times[last];
    let space = &traj.grid;
    let offset = 0.5 * space.volume() * sys.flux_zero_trace();
    let full: Vec<f64> = sub.entropy[..=last].iter().map(|k| k + offset).collect();
    let weighted = weighted_entropy_integral(times, &full, schedule);
    let k0 = strong::total_entropy(sys, &traj.states[0]) + offset;
    let mass = schedule.big_kappa(0.0) - schedule.big_kappa(t1);
    let reference = mass * k0;
    let strong_series = strong::entropy_series(sys, traj);

    // Adversary: a static perturbation P with LP = 0 lowering tr P under the Λ-order.
    let basis = kernel_basis(sys, space, opts.modes)?;
    let cone = LambdaCone::new(sys);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let qs: Vec<Vec<f64>> = (0..opts.samples).map(|_| cone.sample(&mut rng)).collect();
    let (len, packed, big) = (space.len(), sys.packed_len(), sys.big_n);
    let vol = space.cell_volume();
    let diag: Vec<usize> = (0..big).map(|l| sym::packed_index(big, l, l)).collect();
    let trace_of = |b: &[f64]| vol * diag.iter().map(|&s| b[s * len..(s + 1) * len].iter().sum::<f64>()).sum::<f64>();
    let traces: Vec<f64> = basis.iter().map(|b| trace_of(b)).collect();
    // Pairings of each basis field with each sample at each point.
    let pair: Vec<Vec<f64>> = basis
        .par_iter()
        .map(|b| {
            let mut out = Vec::with_capacity(len * qs.len());
            for x in 0..len {
                for q in &qs {
                    out.push((0..packed).map(|s| b[s * len + x] * q[s]).sum::<f64>());
                }
            }
            out
        })
        .collect();
    let nb = basis.len();
    let mut c = vec![0.0; nb];
    let ridge = 1e-8;
    for mu in [1e2, 1e4, 1e6, 1e8] {
        let f = |c: &[f64]| -> Option<(f64, Vec<f64>)> {
            let mut val = sym::dot(c, &traces) + 0.5 * ridge * sym::dot(c, c);
            let mut g: Vec<f64> = traces.iter().zip(c).map(|(t, ci)| t + ridge * ci).collect();
            let cons = len * qs.len();
            for r in 0..cons {
                let s: f64 = (0..nb).map(|i| c[i] * pair[i][r]).sum();
                if s < 0.0 {
                    val += mu * s * s;
                    for i in 0..nb {
                        g[i] += 2.0 * mu * s * pair[i][r];
                    }
                }
            }
            Some((val, g))
        };
        optim::minimize(&mut c, f, |g| g.to_vec(), &LbfgsOptions { max_iters: 300, tol: 1e-14, ..Default::default() });
    }
    // Certify on fresh samples; repair by the smallest identity shift.
    let p: Vec<f64> = (0..packed * len).map(|r| (0..nb).map(|i| c[i] * basis[i][r]).sum()).collect();
    let fresh: Vec<Vec<f64>> = (0..opts.certify_samples).map(|_| cone.sample(&mut rng)).chain(qs.iter().cloned()).collect();
    let mut shift = 0.0f64;
    let mut pt = vec![0.0; packed];
    for x in 0..len {
        for s in 0..packed {
            pt[s] = p[s * len + x];
        }
        for q in &fresh {
            let tr: f64 = diag.iter().map(|&s| q[s]).sum();
            shift = shift.max(-sym::dot(&pt, q) / tr);
        }
    }
    let tau = sym::dot(&c, &traces) + shift * big as f64 * space.volume();
    let adversarial_min = weighted + 0.5 * mass * tau;
    let adv_series: Vec<f64> = sub.entropy.iter().map(|k| k + 0.5 * tau).collect();
    let pattern_pair = entropy_pattern(&sub.entropy[..=last], &strong_series[..=last], opts.tol * (1.0 + k0.abs()));
    let adversarial_pattern_pair = entropy_pattern(&adv_series[..=last], &strong_series[..=last], opts.tol * (1.0 + k0.abs()));
    let floor = reference - opts.tol * (1.0 + reference.abs());
    let pass = weighted >= floor && adversarial_min >= floor && pattern_pair.is_none() && adversarial_pattern_pair.is_none();
    Ok(DafermosReport {
        t1,
        weighted,
        reference,
        order_margin,
        adversarial_min,
        adversarial_shift: shift,
        perturbation_dim: nb,
        pattern_pair,
        adversarial_pattern_pair,
        pass,
    })
}

// ---------------------------------------------------------------------------
// Hopf–Lax cross-check

/// Maps `ψ₀` on a torus of length `L` with horizon `T` to the unit torus and
/// unit horizon: `ψ₀'(x') = (T/L²)·ψ₀(L x')`. Values are per grid point.
pub fn normalize_hopf_lax(psi0: &GridField, t_end: f64) -> Result<GridField, ConsistencyError> {
    if psi0.grid.dim() != 1 || psi0.components() != 1 {
        return Err(ConsistencyError::Param("Hopf–Lax data is a scalar field on a 1-D torus".into()));
    }
    let l = psi0.grid.lengths[0];
    let unit = PeriodicGrid::line(psi0.len(), 1.0)?;
    Ok(GridField { grid: unit, shape: FieldShape::Vector(1), data: psi0.data.iter().map(|x| x * t_end / (l * l)).collect() })
}

/// `W₂²` on the unit circle between cell masses `m` (cells centred at
/// `i·h`, constant density inside) and the uniform measure, and its gradient.
pub fn w2_to_uniform(m: &[f64]) -> (f64, Vec<f64>) {
    let n = m.len();
    let h = 1.0 / n as f64;
    let start = -0.5 * h;
    // e_j = start + j h − S_j: offset of the quantile map from the identity at cell edges.
    let mut e = vec![0.0; n + 1];
    let mut s = 0.0;
    for j in 0..=n {
        e[j] = start + j as f64 * h - s;
        if j < n {
            s += m[j];
        }
    }
    let (mut i1, mut i2) = (0.0, 0.0);
    for i in 0..n {
        i1 += m[i] * (e[i] + e[i + 1]) / 2.0;
        i2 += m[i] * (e[i] * e[i] + e[i] * e[i + 1] + e[i + 1] * e[i + 1]) / 3.0;
    }
    let value = i2 - i1 * i1;
    // ∂/∂e_j, then e_j depends on m_i for i < j with slope −1.
    let de: Vec<f64> = (0..=n)
        .map(|j| {
            let mut d = 0.0;
            if j > 0 {
                let mm = m[j - 1];
                d += mm * (e[j - 1] + 2.0 * e[j]) / 3.0 - 2.0 * i1 * mm / 2.0;
            }
            if j < n {
                let mm = m[j];
                d += mm * (2.0 * e[j] + e[j + 1]) / 3.0 - 2.0 * i1 * mm / 2.0;
            }
            d
        })
        .collect();
    let mut grad = vec![0.0; n];
    let mut tail = 0.0;
    for i in (0..n).rev() {
        tail += de[i + 1];
        let direct = (e[i] * e[i] + e[i] * e[i + 1] + e[i + 1] * e[i + 1]) / 3.0 - 2.0 * i1 * (e[i] + e[i + 1]) / 2.0;
        grad[i] = direct - tail;
    }
    (value.max(0.0), grad)
}

/// Euclidean projection onto `{m ≥ 0, Σm = total}`.
pub fn project_simplex(x: &[f64], total: f64) -> Vec<f64> {
    let mut u = x.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    let mut theta = 0.0;
    for (j, v) in u.iter().enumerate() {
        acc += v;
        let t = (acc - total) / (j + 1) as f64;
        if v - t > 0.0 {
            theta = t;
        }
    }
    x.iter().map(|v| (v - theta).max(0.0)).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct HopfLaxReport {
    pub dual_value: f64,
    pub dual_converged: bool,
    /// `−min_ρ Ψ(ρ) + ½W₂²(ρ, 1)`.
    pub hopf_lax_value: f64,
    pub hopf_lax_iterations: usize,
    /// Projected-gradient residual at the final density.
    pub hopf_lax_residual: f64,
    pub relative_gap: f64,
    pub density: Vec<f64>,
    pub flagged: bool,
}

#[derive(Debug, Clone)]
pub struct HopfLaxOptions {
    pub steps: usize,
    pub iterations: usize,
    pub dual: DualOptions,
    /// Residual above which the descent branch is flagged.
    pub residual_tol: f64,
}

impl Default for HopfLaxOptions {
    fn default() -> Self {
        Self { steps: 64, iterations: 40, dual: DualOptions::default(), residual_tol: 1e-6 }
    }
}

/// Minimizes `Σ ψ_i m_i + ½W₂²(m, uniform)` over the unit simplex.
pub fn hopf_lax_descent(psi: &[f64], iterations: usize) -> (Vec<f64>, f64, f64) {
    let n = psi.len();
    let obj = |m: &[f64]| {
        let (w, gw) = w2_to_uniform(m);
        let g: Vec<f64> = psi.iter().zip(&gw).map(|(p, q)| p + 0.5 * q).collect();
        (sym::dot(psi, m) + 0.5 * w, g)
    };
    let mut m = vec![1.0 / n as f64; n];
    let (mut f, mut g) = obj(&m);
    // Curvature of ½W₂² along the first mode, in mass coordinates.
    let mut step = 4.0 * std::f64::consts::PI.powi(2) / n as f64;
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    for _ in 0..iterations {
        if let Some((pm, pg)) = &prev {
            let s: Vec<f64> = m.iter().zip(pm).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = g.iter().zip(pg).map(|(a, b)| a - b).collect();
            let sy = sym::dot(&s, &y);
            if sy > 0.0 {
                step = sym::dot(&s, &s) / sy;
            }
        }
        let mut accepted = false;
        for _ in 0..60 {
            let trial_in: Vec<f64> = m.iter().zip(&g).map(|(a, b)| a - step * b).collect();
            let trial = project_simplex(&trial_in, 1.0);
            let d: Vec<f64> = trial.iter().zip(&m).map(|(a, b)| a - b).collect();
            let (ft, gt) = obj(&trial);
            if ft <= f - 1e-4 / step * sym::dot(&d, &d) {
                prev = Some((std::mem::replace(&mut m, trial), std::mem::replace(&mut g, gt)));
                f = ft;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let probe = project_simplex(&m.iter().zip(&g).map(|(a, b)| a - b).collect::<Vec<_>>(), 1.0);
    let residual = probe.iter().zip(&m).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    (m, f, residual)
}

/// Compares the dual solver on the HJ instance with an independent Hopf–Lax
/// minimization. `psi0` lives on the unit torus; the horizon is 1, `γ = 0`.
pub fn hopf_lax_crosscheck(psi0: &GridField, opts: &HopfLaxOptions) -> Result<HopfLaxReport, ConsistencyError> {
    let space = &psi0.grid;
    if space.dim() != 1 || psi0.components() != 1 || (space.volume() - 1.0).abs() > 1e-12 {
        return Err(ConsistencyError::Param("Hopf–Lax cross-check needs a scalar field on the unit 1-D torus".into()));
    }
    let sys = systems::make_system("hj", &systems::SystemParams { d: 1, ..Default::default() })?;
    let schedule = WeightSchedule::new(0.0, 1.0)?;
    let space = dual::spatial(space);
    let psi0 = GridField { grid: space.clone(), ..psi0.clone() };
    let v0 = grid::spectral_derivative(&psi0, &[1]);
    let dgrid = space.clone().with_time(1.0, opts.steps)?;
    let sol = dual::solve_dual(&sys, &v0, &dgrid, &schedule, &opts.dual)?;
    let (density, fmin, residual) = hopf_lax_descent(&psi0.data, opts.iterations);
    let hopf_lax_value = -fmin;
    let relative_gap = (sol.value - hopf_lax_value).abs() / hopf_lax_value.abs().max(1e-300);
    Ok(HopfLaxReport {
        dual_value: sol.value,
        dual_converged: sol.converged,
        hopf_lax_value,
        hopf_lax_iterations: opts.iterations,
        hopf_lax_residual: residual,
        relative_gap,
        density,
        flagged: !sol.converged || residual > opts.residual_tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{make_system, SystemParams};
    use std::f64::consts::PI;

    #[test]
    fn weighted_integral_matches_closed_forms() {
        let times: Vec<f64> = (0..=10).map(|k| 0.1 * k as f64).collect();
        let ones = vec![1.0; times.len()];
        let flat = WeightSchedule::new(0.0, 1.0).unwrap();
        assert!((weighted_entropy_integral(&times, &ones, &flat) - 1.0).abs() < 1e-14);
        let decaying = WeightSchedule::new(2.5, 1.0).unwrap();
        assert!((weighted_entropy_integral(&times, &ones, &decaying) - decaying.big_kappa(0.0)).abs() < 1e-14);
        // Linear data is integrated exactly: ∫₀¹ t e^{−γt} dt.
        let g: f64 = 2.5;
        let exact = (1.0 - (-g).exp() * (1.0 + g)) / (g * g);
        assert!((weighted_entropy_integral(&times, &times, &decaying) - exact).abs() < 1e-13);
        assert_eq!(weighted_entropy_integral(&times, &[0.0; 11], &decaying), 0.0);
    }

    #[test]
    fn w2_of_a_single_cell_and_uniform() {
        let n = 16;
        let uniform = vec![1.0 / n as f64; n];
        assert!(w2_to_uniform(&uniform).0 < 1e-15);
        // All mass in one cell: transported coordinate has variance (1 − h)²/12.
        let mut one = vec![0.0; n];
        one[3] = 1.0;
        let h = 1.0 / n as f64;
        assert!((w2_to_uniform(&one).0 - (1.0 - h).powi(2) / 12.0).abs() < 1e-14);
    }

    #[test]
    fn w2_gradient_matches_differences() {
        let m: Vec<f64> = (0..12).map(|i| 1.0 + 0.3 * (i as f64).sin()).collect();
        let total: f64 = m.iter().sum();
        let m: Vec<f64> = m.iter().map(|x| x / total).collect();
        let (_, g) = w2_to_uniform(&m);
        for i in 0..m.len() {
            let h = 1e-6;
            let (mut p, mut q) = (m.clone(), m.clone());
            p[i] += h;
            q[i] -= h;
            let fd = (w2_to_uniform(&p).0 - w2_to_uniform(&q).0) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn hopf_lax_descent_matches_classical_value() {
        // Small ψ₀ = A cos 2πx on the unit torus: no caustic before t = 1, and
        // −∫ψ(1, x) dx = ½∫|ψ₀'|² = A²π².
        let n = 64;
        let a = 1e-3;
        let psi: Vec<f64> = (0..n).map(|i| a * (2.0 * PI * i as f64 / n as f64).cos()).collect();
        let (m, f, res) = hopf_lax_descent(&psi, 40);
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(res < 1e-10);
        assert!((-f - a * a * PI * PI).abs() < 2e-3 * a * a * PI * PI, "{} vs {}", -f, a * a * PI * PI);
    }

    #[test]
    fn constant_potential_gives_zero() {
        let (_, f, _) = hopf_lax_descent(&[0.3; 8], 40);
        assert!((f - 0.3).abs() < 1e-14);
    }

    #[test]
    fn simplex_projection() {
        let p = project_simplex(&[0.5, -1.0, 2.0, 0.1], 1.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert!(p.iter().all(|x| *x >= 0.0));
        assert_eq!(project_simplex(&p, 1.0), p);
    }

    #[test]
    fn pattern_detection() {
        let strong = vec![1.0; 6];
        assert_eq!(entropy_pattern(&[1.0, 1.0, 0.5, 0.5, 1.0, 1.0], &strong, 1e-9), Some((1, 3)));
        assert_eq!(entropy_pattern(&[1.0, 2.0, 0.5, 0.5, 1.0, 1.0], &strong, 1e-9), None);
        assert_eq!(entropy_pattern(&strong, &strong, 1e-9), None);
    }

    #[test]
    fn kernel_basis_is_annihilated() {
        for name in ["gkdv", "nls"] {
            let sys = make_system(name, &SystemParams::default()).unwrap();
            let space = PeriodicGrid::line(16, 2.0 * PI).unwrap();
            let op = sys.operator(&space).unwrap();
            let basis = kernel_basis(&sys, &space, 2).unwrap();
            assert!(!basis.is_empty());
            for b in &basis {
                let f = GridField { grid: space.clone(), shape: FieldShape::Sym(sys.big_n), data: b.clone() };
                let r = op.apply_l(&f).unwrap().max_abs();
                assert!(r < 1e-10, "{name} {r:e}");
            }
        }
    }

    #[test]
    fn inflation_shifts_entropy_by_trace() {
        let sys = make_system("nls", &SystemParams::default()).unwrap();
        let space = PeriodicGrid::line(16, 1.0).unwrap();
        let v = GridField::from_fn(&space, FieldShape::Vector(sys.n), |x| vec![0.1 * (2.0 * PI * x[0]).sin(); 4]);
        let traj = Trajectory {
            grid: space.clone(),
            times: vec![0.0, 0.5],
            sharp: vec![sys.sharp_field(&v); 2],
            states: vec![v.clone(); 2],
            blown_up: false,
            final_valid_time: 0.5,
        };
        let k = strong::total_entropy(&sys, &v);
        let sub = subsolution_inflate(&sys, &traj, &[0.0, 1.0]).unwrap();
        assert!((sub.entropy[0] - k).abs() < 1e-13);
        assert!((sub.entropy[1] - k - sys.big_n as f64 / 2.0).abs() < 1e-12);
        assert!(sub.order_margin(&sys, 50, 1) >= -1e-10);
        assert!(subsolution_inflate(&sys, &traj, &[0.0, -1.0]).is_err());
    }

    #[test]
    fn reference_for_zero_data() {
        let sys = make_system("gkdv", &SystemParams::default()).unwrap();
        let space = PeriodicGrid::line(8, 1.0).unwrap();
        let v0 = GridField::zeros(&space, FieldShape::Vector(sys.n));
        let sch = WeightSchedule::new(0.0, 2.0).unwrap();
        let r = reference_value(&sys, &v0, &sch);
        assert!((r - 2.0 * sys.flux_zero_trace() / 2.0).abs() < 1e-14);
    }
}
