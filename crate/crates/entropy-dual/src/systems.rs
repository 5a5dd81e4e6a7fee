//! Concrete instances `∂ₜv = L(F(v))` and the checks of their structural
//! assumptions.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::entropy::{self, EntropySpec, GkdvEntropy, Quadratic, RadialEntropy, Real};
use crate::grid::{self, FieldShape, GridField, LinearOperator, OperatorSymbol, PeriodicGrid};
use crate::sym;

#[derive(Debug, thiserror::Error)]
pub enum SystemError {
    #[error("unknown system '{0}'")]
    Unknown(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error(transparent)]
    Grid(#[from] grid::GridError),
    #[error(transparent)]
    Entropy(#[from] entropy::EntropyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum SystemKind {
    ScalarLaw,
    Gkdv { alpha: f64 },
    Nls { d: usize, q: f64 },
    Nlkg { d: usize, q: f64 },
    HamiltonJacobi { d: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SystemParams {
    pub alpha: f64,
    pub q: f64,
    /// `None` picks the certified value from [`choose_epsilon`].
    pub epsilon: Option<f64>,
    pub d: usize,
}

impl Default for SystemParams {
    fn default() -> Self {
        Self { alpha: 2.0, q: 1.0, epsilon: None, d: 1 }
    }
}

/// The padding scalar appended to `v̄`.
#[derive(Debug, Clone, Copy)]
enum Pad {
    /// `|v₀|^α`
    AbsPow(f64),
    /// `(v₀² + v₁²)^q`
    RhoPow(f64),
}

impl Pad {
    fn value(&self, v: &[f64]) -> f64 {
        match *self {
            Pad::AbsPow(a) => v[0].abs().pow_r(a),
            Pad::RhoPow(q) => (v[0] * v[0] + v[1] * v[1]).pow_r(q),
        }
    }

    /// Nonzero entries of `∇φ` (indices 0 and 1 at most).
    fn gradient(&self, v: &[f64]) -> [f64; 2] {
        match *self {
            Pad::AbsPow(a) => {
                let u = v[0];
                if u == 0.0 {
                    [0.0, 0.0]
                } else {
                    [a * u.abs().pow_r(a - 1.0) * u.signum(), 0.0]
                }
            }
            Pad::RhoPow(q) => {
                let rho = v[0] * v[0] + v[1] * v[1];
                if rho == 0.0 {
                    return [0.0, 0.0];
                }
                let f = 2.0 * q * rho.pow_r(q - 1.0);
                [f * v[0], f * v[1]]
            }
        }
    }

    /// Upper-left 2×2 block of `∇²φ`, row-major.
    fn hessian(&self, v: &[f64]) -> [f64; 4] {
        match *self {
            Pad::AbsPow(a) => {
                let u = v[0];
                if u == 0.0 {
                    return [0.0; 4];
                }
                [a * (a - 1.0) * u.abs().pow_r(a - 2.0), 0.0, 0.0, 0.0]
            }
            Pad::RhoPow(q) => {
                let rho = v[0] * v[0] + v[1] * v[1];
                if rho == 0.0 {
                    return [0.0; 4];
                }
                let f = 2.0 * q * rho.pow_r(q - 1.0);
                let g = 4.0 * q * (q - 1.0) * rho.pow_r(q - 2.0);
                let off = g * v[0] * v[1];
                [f + g * v[0] * v[0], off, off, f + g * v[1] * v[1]]
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum FluxForm {
    /// `F = K(v)·ones(2,2)`.
    ScalarLaw,
    /// `F = ε v̄⊗v̄` plus the diagonal padding.
    Padded(Pad),
    /// `F = v⊗v`.
    Outer,
}

#[derive(Clone)]
pub struct SystemSpec {
    pub name: String,
    pub kind: SystemKind,
    pub n: usize,
    pub big_n: usize,
    pub epsilon: f64,
    pub entropy: Arc<dyn EntropySpec<f64>>,
    pub symbol: OperatorSymbol,
    /// Orthonormal packed basis of `Λ`.
    pub lambda_basis: Vec<Vec<f64>>,
    form: FluxForm,
}

impl std::fmt::Debug for SystemSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SystemSpec")
            .field("name", &self.name)
            .field("kind", &self.kind)
            .field("n", &self.n)
            .field("big_n", &self.big_n)
            .field("epsilon", &self.epsilon)
            .finish()
    }
}

fn axis(d: usize, m: usize, order: usize) -> Vec<usize> {
    let mut a = vec![0; d];
    a[m] = order;
    a
}

fn gkdv_symbol(alpha: f64, eps: f64) -> OperatorSymbol {
    let e = 1.0 / eps;
    let c = 1.0 / (alpha + 1.0);
    let mut s = OperatorSymbol::new(2, 4);
    s.term(0, 0, 2, vec![2], -e).term(0, 1, 3, vec![1], c * e).term(0, 0, 1, vec![1], e);
    s.term(1, 0, 2, vec![3], -e).term(1, 1, 3, vec![2], c * e).term(1, 0, 1, vec![2], e);
    s
}

fn nls_symbol(d: usize, eps: f64) -> OperatorSymbol {
    let e = 1.0 / eps;
    let n = 2 * d + 2;
    let big = 2 * d + 4;
    let last = big - 1;
    let (fi, bi) = (3, 3 + d);
    let zero = vec![0; d];
    let mut s = OperatorSymbol::new(n, big);
    for m in 0..d {
        s.term(0, 0, bi + m, axis(d, m, 1), -e);
        s.term(1, 0, fi + m, axis(d, m, 1), e);
    }
    s.term(0, 2, last, zero.clone(), e).term(0, 0, 2, zero.clone(), e);
    s.term(1, 1, last, zero.clone(), -e).term(1, 0, 1, zero, -e);
    for m in 0..d {
        let (cf, cb) = (2 + m, 2 + d + m);
        for j in 0..d {
            s.term(cf, 0, bi + m, axis(d, j, 2), -e);
            s.term(cb, 0, fi + m, axis(d, j, 2), e);
        }
        s.term(cf, 2, last, axis(d, m, 1), e).term(cf, 0, 2, axis(d, m, 1), e);
        s.term(cb, 1, last, axis(d, m, 1), -e).term(cb, 0, 1, axis(d, m, 1), -e);
    }
    s
}

fn nlkg_symbol(d: usize, eps: f64) -> OperatorSymbol {
    let e = 1.0 / eps;
    let n = 2 * d + 4;
    let big = 2 * d + 6;
    let last = big - 1;
    let (fi, bi, ui, vi) = (3, 3 + d, 3 + 2 * d, 4 + 2 * d);
    let zero = vec![0; d];
    let mut s = OperatorSymbol::new(n, big);
    s.term(0, 0, ui, zero.clone(), e);
    s.term(1, 0, vi, zero.clone(), e);
    for m in 0..d {
        s.term(2 + m, 0, ui, axis(d, m, 1), e);
        s.term(2 + d + m, 0, vi, axis(d, m, 1), e);
    }
    let (cu, cv) = (2 + 2 * d, 3 + 2 * d);
    for m in 0..d {
        s.term(cu, 0, fi + m, axis(d, m, 1), e);
        s.term(cv, 0, bi + m, axis(d, m, 1), e);
    }
    s.term(cu, 1, last, zero.clone(), -e).term(cu, 0, 1, zero.clone(), -e);
    s.term(cv, 2, last, zero.clone(), -e).term(cv, 0, 2, zero, -e);
    s
}

fn hj_symbol(d: usize) -> OperatorSymbol {
    let mut s = OperatorSymbol::new(d, d);
    for i in 0..d {
        for m in 0..d {
            s.term(i, m, m, axis(d, i, 1), -0.5);
        }
    }
    s
}

/// `I`, a unit matrix per off-diagonal entry the symbol touches, and the
/// diagonal coefficient pattern of each `(component, α)` group.
fn lambda_basis_for(symbol: &OperatorSymbol) -> Vec<Vec<f64>> {
    let big = symbol.big_n;
    let len = sym::packed_len(big);
    let mut cands = vec![sym::identity(big)];
    for slot in symbol.touched_slots() {
        let (l, m) = sym::packed_entries(big)[slot];
        if l != m {
            let mut e = vec![0.0; len];
            e[slot] = 1.0;
            cands.push(e);
        }
    }
    let mut groups: Vec<(usize, Vec<usize>, Vec<f64>)> = Vec::new();
    for t in &symbol.terms {
        if t.entry.0 != t.entry.1 {
            continue;
        }
        let slot = sym::packed_index(big, t.entry.0, t.entry.1);
        match groups.iter_mut().find(|g| g.0 == t.component && g.1 == t.alpha) {
            Some(g) => g.2[slot] += t.coefficient,
            None => {
                let mut p = vec![0.0; len];
                p[slot] = t.coefficient;
                groups.push((t.component, t.alpha.clone(), p));
            }
        }
    }
    cands.extend(groups.into_iter().map(|g| g.2));
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for mut c in cands {
        for b in &basis {
            let p = sym::dot(&c, b);
            c.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let nrm = sym::dot(&c, &c).sqrt();
        if nrm > 1e-10 {
            c.iter_mut().for_each(|x| *x /= nrm);
            basis.push(c);
        }
    }
    basis
}

pub fn make_system(name: &str, params: &SystemParams) -> Result<SystemSpec, SystemError> {
    let eps = match params.epsilon {
        Some(e) if !(e > 0.0 && e.is_finite()) => return Err(SystemError::Param("epsilon must be positive".into())),
        Some(e) => e,
        None => choose_epsilon(name, params)?,
    };
    make_with_epsilon(name, params, eps)
}

/// As [`make_system`] with a scalar-law entropy other than `v²/2`.
pub fn scalar_law(k: Arc<dyn EntropySpec<f64>>) -> Result<SystemSpec, SystemError> {
    if k.dim() != 1 {
        return Err(SystemError::Param("scalar-law entropy must be one-dimensional".into()));
    }
    let mut s = OperatorSymbol::new(1, 2);
    s.term(0, 0, 1, vec![1], -1.0);
    let lambda_basis = lambda_basis_for(&s);
    Ok(SystemSpec {
        name: "scalar".into(),
        kind: SystemKind::ScalarLaw,
        n: 1,
        big_n: 2,
        epsilon: 1.0,
        entropy: k,
        symbol: s,
        lambda_basis,
        form: FluxForm::ScalarLaw,
    })
}

fn make_with_epsilon(name: &str, params: &SystemParams, eps: f64) -> Result<SystemSpec, SystemError> {
    let check_d = |d: usize| {
        if d == 0 {
            Err(SystemError::Param("spatial dimension must be at least 1".into()))
        } else {
            Ok(d)
        }
    };
    let check_q = |q: f64| {
        if q >= 0.5 && q.is_finite() {
            Ok(q)
        } else {
            Err(SystemError::Param("q must be at least 1/2".into()))
        }
    };
    let (kind, n, big_n, entropy, symbol, form): (_, _, _, Arc<dyn EntropySpec<f64>>, _, _) = match name {
        "scalar" | "burgers" => return scalar_law(Arc::new(Quadratic::new(1))),
        "gkdv" => {
            let alpha = params.alpha;
            if !(alpha >= 1.0 && alpha.is_finite()) {
                return Err(SystemError::Param("alpha must be at least 1".into()));
            }
            let k = Arc::new(GkdvEntropy { alpha });
            (SystemKind::Gkdv { alpha }, 2, 4, k, gkdv_symbol(alpha, eps), FluxForm::Padded(Pad::AbsPow(alpha)))
        }
        "nls" => {
            let (d, q) = (check_d(params.d)?, check_q(params.q)?);
            let n = 2 * d + 2;
            let k = Arc::new(RadialEntropy { n, q });
            (SystemKind::Nls { d, q }, n, n + 2, k, nls_symbol(d, eps), FluxForm::Padded(Pad::RhoPow(q)))
        }
        "nlkg" => {
            let (d, q) = (check_d(params.d)?, check_q(params.q)?);
            let n = 2 * d + 4;
            let k = Arc::new(RadialEntropy { n, q });
            (SystemKind::Nlkg { d, q }, n, n + 2, k, nlkg_symbol(d, eps), FluxForm::Padded(Pad::RhoPow(q)))
        }
        "hj" => {
            let d = check_d(params.d)?;
            (SystemKind::HamiltonJacobi { d }, d, d, Arc::new(Quadratic::new(d)), hj_symbol(d), FluxForm::Outer)
        }
        other => return Err(SystemError::Unknown(other.into())),
    };
    let epsilon = if matches!(form, FluxForm::Padded(_)) { eps } else { 1.0 };
    let lambda_basis = lambda_basis_for(&symbol);
    Ok(SystemSpec { name: name.into(), kind, n, big_n, epsilon, entropy, symbol, lambda_basis, form })
}

impl SystemSpec {
    pub fn uses_epsilon(&self) -> bool {
        matches!(self.form, FluxForm::Padded(_))
    }

    pub fn packed_len(&self) -> usize {
        sym::packed_len(self.big_n)
    }

    pub fn entropy_value(&self, v: &[f64]) -> f64 {
        self.entropy.value(v)
    }

    fn vbar(&self, pad: Pad, v: &[f64]) -> Vec<f64> {
        let mut b = Vec::with_capacity(self.big_n);
        b.push(1.0);
        b.extend_from_slice(v);
        b.push(pad.value(v));
        b
    }

    /// `F(v)`, packed.
    pub fn flux(&self, v: &[f64]) -> Vec<f64> {
        let big = self.big_n;
        let mut out = vec![0.0; sym::packed_len(big)];
        match self.form {
            FluxForm::ScalarLaw => {
                let k = self.entropy.value(v);
                for (s, (l, m)) in sym::packed_entries(big).into_iter().enumerate() {
                    out[s] = k * sym::entry_scale(l, m);
                }
            }
            FluxForm::Outer => {
                for (s, (l, m)) in sym::packed_entries(big).into_iter().enumerate() {
                    out[s] = v[l] * v[m] * sym::entry_scale(l, m);
                }
            }
            FluxForm::Padded(pad) => {
                let b = self.vbar(pad, v);
                let diag = 2.0 * self.entropy.value(v) / big as f64;
                for (s, (l, m)) in sym::packed_entries(big).into_iter().enumerate() {
                    out[s] = if l == m { diag } else { self.epsilon * b[l] * b[m] * sym::SQRT2 };
                }
                out[0] += self.epsilon + 1.0;
            }
        }
        out
    }

    /// `∂ₗF(v)` for every `l`, packed.
    pub fn flux_partials(&self, v: &[f64]) -> Vec<Vec<f64>> {
        let big = self.big_n;
        let len = sym::packed_len(big);
        let mut grad = vec![0.0; self.n];
        self.entropy.gradient(v, &mut grad);
        (0..self.n)
            .map(|k| {
                let mut out = vec![0.0; len];
                match self.form {
                    FluxForm::ScalarLaw => {
                        for (s, (l, m)) in sym::packed_entries(big).into_iter().enumerate() {
                            out[s] = grad[0] * sym::entry_scale(l, m);
                        }
                    }
                    FluxForm::Outer => {
                        for (s, (l, m)) in sym::packed_entries(big).into_iter().enumerate() {
                            let d = if l == k { v[m] } else { 0.0 } + if m == k { v[l] } else { 0.0 };
                            out[s] = d * sym::entry_scale(l, m);
                        }
                    }
                    FluxForm::Padded(pad) => {
                        let b = self.vbar(pad, v);
                        let gp = pad.gradient(v);
                        let db = |j: usize| -> f64 {
                            if j == 1 + k {
                                1.0
                            } else if j == big - 1 && k < 2 {
                                gp[k]
                            } else {
                                0.0
                            }
                        };
                        for (s, (l, m)) in sym::packed_entries(big).into_iter().enumerate() {
                            out[s] =
                                if l == m { 2.0 * grad[k] / big as f64 } else { self.epsilon * (db(l) * b[m] + b[l] * db(m)) * sym::SQRT2 };
                        }
                    }
                }
                out
            })
            .collect()
    }

    /// `∇_v (F(v):P)` written into `out`.
    pub fn pairing_gradient(&self, v: &[f64], p: &[f64], out: &mut [f64]) {
        let big = self.big_n;
        let n = self.n;
        match self.form {
            FluxForm::ScalarLaw => {
                let total = p[0] + p[2] + sym::SQRT2 * p[1];
                self.entropy.gradient(v, out);
                out[0] *= total;
            }
            FluxForm::Outer => {
                for l in 0..n {
                    let mut s = 0.0;
                    for m in 0..n {
                        s += p[sym::packed_index(n, l, m)] / sym::entry_scale(l, m) * v[m];
                    }
                    out[l] = 2.0 * s;
                }
            }
            FluxForm::Padded(pad) => {
                let b = self.vbar(pad, v);
                let tr = sym::trace(big, p);
                self.entropy.gradient(v, out);
                out.iter_mut().for_each(|g| *g *= 2.0 * tr / big as f64);
                let eps2 = 2.0 * self.epsilon;
                let row = |l: usize| -> f64 {
                    (0..big)
                        .filter(|&m| m != l)
                        .map(|m| {
                            let q = p[sym::packed_index(big, l, m)];
                            if q == 0.0 {
                                0.0
                            } else {
                                q / sym::SQRT2 * b[m]
                            }
                        })
                        .sum()
                };
                for (i, o) in out.iter_mut().enumerate() {
                    *o += eps2 * row(1 + i);
                }
                let gp = pad.gradient(v);
                if gp != [0.0, 0.0] {
                    let r = row(big - 1);
                    out[0] += eps2 * gp[0] * r;
                    out[1] += eps2 * gp[1] * r;
                }
            }
        }
    }

    /// Row-major `n×n` Hessian of `y ↦ F(y):P` at `v`.
    pub fn pairing_hessian(&self, v: &[f64], p: &[f64]) -> Vec<f64> {
        let big = self.big_n;
        let n = self.n;
        let mut h = vec![0.0; n * n];
        match self.form {
            FluxForm::ScalarLaw => {
                let total = p[0] + p[2] + sym::SQRT2 * p[1];
                self.entropy.hessian(v, &mut h);
                h[0] *= total;
            }
            FluxForm::Outer => {
                for l in 0..n {
                    for m in 0..n {
                        h[l * n + m] = 2.0 * p[sym::packed_index(n, l, m)] / sym::entry_scale(l, m);
                    }
                }
            }
            FluxForm::Padded(pad) => {
                let b = self.vbar(pad, v);
                let tr = sym::trace(big, p);
                self.entropy.hessian(v, &mut h);
                h.iter_mut().for_each(|x| *x *= 2.0 * tr / big as f64);
                let eps = self.epsilon;
                let gp = pad.gradient(v);
                // ∇v̄_j as a sparse vector: (index, value) pairs.
                let grad_bar = |j: usize| -> Vec<(usize, f64)> {
                    if j == 0 {
                        vec![]
                    } else if j < big - 1 {
                        vec![(j - 1, 1.0)]
                    } else {
                        (0..n.min(2)).filter(|&i| gp[i] != 0.0).map(|i| (i, gp[i])).collect()
                    }
                };
                for l in 0..big {
                    for m in (l + 1)..big {
                        let q = p[sym::packed_index(big, l, m)] / sym::SQRT2;
                        if q == 0.0 {
                            continue;
                        }
                        // Each unordered pair appears twice in F:P.
                        for (i, gi) in grad_bar(l) {
                            for (j, gj) in grad_bar(m) {
                                let c = 2.0 * eps * q * gi * gj;
                                h[i * n + j] += c;
                                h[j * n + i] += c;
                            }
                        }
                    }
                }
                let last = big - 1;
                let mut w = 0.0;
                for l in 0..last {
                    let q = p[sym::packed_index(big, l, last)] / sym::SQRT2;
                    if q != 0.0 && b[l] != 0.0 {
                        w += q * b[l];
                    }
                }
                if w != 0.0 {
                    let hp = pad.hessian(v);
                    let k = n.min(2);
                    for i in 0..k {
                        for j in 0..k {
                            h[i * n + j] += 2.0 * eps * w * hp[i * 2 + j];
                        }
                    }
                }
            }
        }
        h
    }

    pub fn flux_zero_trace(&self) -> f64 {
        sym::trace(self.big_n, &self.flux(&vec![0.0; self.n]))
    }

    /// Orthogonal projection onto `Λ`.
    pub fn lambda_project(&self, xi: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; xi.len()];
        for b in &self.lambda_basis {
            let c = sym::dot(xi, b);
            out.iter_mut().zip(b).for_each(|(o, x)| *o += c * x);
        }
        out
    }

    /// Frobenius distance from `Λ`.
    pub fn lambda_residual(&self, xi: &[f64]) -> f64 {
        let p = self.lambda_project(xi);
        xi.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }

    pub fn operator(&self, grid: &PeriodicGrid) -> Result<LinearOperator, SystemError> {
        Ok(LinearOperator::new(&self.symbol, grid)?)
    }

    /// `F(v)` at every grid point.
    pub fn flux_field(&self, v: &GridField) -> GridField {
        let r: Result<GridField, ()> = grid::map_pointwise(&[v], &v.grid, FieldShape::Sym(self.big_n), |_, x, o| {
            o.copy_from_slice(&self.flux(&x[0]));
            Ok(())
        });
        r.expect("infallible")
    }

    pub fn sharp_field(&self, v: &GridField) -> GridField {
        let r: Result<GridField, ()> = grid::map_pointwise(&[v], &v.grid, FieldShape::Vector(self.n), |_, x, o| {
            self.entropy.gradient(&x[0], o);
            Ok(())
        });
        r.expect("infallible")
    }

    pub fn unsharp_field(&self, w: &GridField, tol: f64, guess: Option<&GridField>) -> Result<GridField, SystemError> {
        let k: &dyn EntropySpec<f64> = &*self.entropy;
        let out = match guess {
            Some(g) => grid::map_pointwise(&[w, g], &w.grid, FieldShape::Vector(self.n), |_, x, o| {
                entropy::unsharp_into(k, &x[0], tol, Some(&x[1]), o)
            }),
            None => grid::map_pointwise(&[w], &w.grid, FieldShape::Vector(self.n), |_, x, o| entropy::unsharp_into(k, &x[0], tol, None, o)),
        };
        Ok(out?)
    }
}

// ---------------------------------------------------------------------------
// Λ ∩ PSD sampling

#[derive(Debug, Clone)]
pub struct LambdaCone {
    pub big_n: usize,
    pub basis: Vec<Vec<f64>>,
}

impl LambdaCone {
    pub fn new(sys: &SystemSpec) -> Self {
        Self { big_n: sys.big_n, basis: sys.lambda_basis.clone() }
    }

    fn project(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for b in &self.basis {
            let c = sym::dot(x, b);
            out.iter_mut().zip(b).for_each(|(o, v)| *o += c * v);
        }
        out
    }

    /// A matrix in `Λ` with `λ_min ≥ 0`, unit Frobenius norm.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let len = sym::packed_len(self.big_n);
        let mut p = vec![0.0; len];
        for b in &self.basis {
            let c: f64 = rng.sample(StandardNormal);
            p.iter_mut().zip(b).for_each(|(o, v)| *o += c * v);
        }
        for _ in 0..5 {
            p = self.project(&sym::project_psd(self.big_n, &p));
        }
        // I ∈ Λ, so a diagonal shift keeps the sample in Λ.
        let lam = sym::min_eigenvalue(self.big_n, &p);
        if lam < 0.0 {
            for l in 0..self.big_n {
                p[sym::packed_index(self.big_n, l, l)] -= lam;
            }
        }
        let nrm = sym::dot(&p, &p).sqrt();
        if nrm > 0.0 {
            p.iter_mut().for_each(|x| *x /= nrm);
        } else {
            p = sym::identity(self.big_n);
        }
        p
    }

    pub fn residuals(&self, p: &[f64]) -> (f64, f64) {
        let proj = self.project(p);
        let r = p.iter().zip(&proj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        (r, sym::min_eigenvalue(self.big_n, p))
    }
}

fn sample_state(sys: &SystemSpec, rng: &mut ChaCha8Rng, radius: f64) -> Vec<f64> {
    // Log-uniform magnitude so that both small and large states appear.
    let mag = radius * 10f64.powf(-3.0 * rng.random::<f64>());
    (0..sys.n).map(|_| mag * rng.random_range(-1.0..1.0)).collect()
}

fn min_sym_eig(n: usize, h: &[f64]) -> f64 {
    if n == 1 {
        return h[0];
    }
    let m = nalgebra::DMatrix::from_row_slice(n, n, h);
    nalgebra::SymmetricEigen::new(m).eigenvalues.min()
}

// ---------------------------------------------------------------------------
// Checks

/// Max of `|(F(v), L*v^#)| / scale` over random smooth `v^#`.
pub fn check_conservativity(sys: &SystemSpec, grid: &PeriodicGrid, trials: usize, seed: u64, amplitude: f64) -> Result<f64, SystemError> {
    let op = sys.operator(grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let w = grid::random_smooth(grid, FieldShape::Vector(sys.n), 4, amplitude, &mut rng);
        let v = sys.unsharp_field(&w, 1e-13, None)?;
        let f = sys.flux_field(&v);
        let b = op.apply_lstar(&w)?;
        let scale = 1.0 + f.norm() * b.norm();
        worst = worst.max(f.inner(&b).abs() / scale);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvexityReport {
    pub min_eigenvalue: f64,
    pub worst_state: Vec<f64>,
    pub worst_matrix: Vec<f64>,
    pub samples: usize,
}

/// Smallest Hessian eigenvalue of `y ↦ F(y):P` over sampled `P ∈ Λ∩PSD` and states.
pub fn check_lambda_convexity(sys: &SystemSpec, cone: &LambdaCone, trials: usize, seed: u64) -> ConvexityReport {
    let chunk = 64;
    let results: Vec<(f64, Vec<f64>, Vec<f64>)> = (0..trials.div_ceil(chunk))
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (c as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut best = (f64::INFINITY, vec![], vec![]);
            for _ in 0..chunk.min(trials - c * chunk) {
                let p = if rng.random::<f64>() < 0.05 { sym::identity(sys.big_n) } else { cone.sample(&mut rng) };
                let v = sample_state(sys, &mut rng, 10.0);
                let lam = min_sym_eig(sys.n, &sys.pairing_hessian(&v, &p));
                if lam < best.0 {
                    best = (lam, v, p);
                }
            }
            best
        })
        .collect();
    let best = results.into_iter().fold((f64::INFINITY, vec![], vec![]), |a, b| if b.0 < a.0 { b } else { a });
    ConvexityReport { min_eigenvalue: best.0, worst_state: best.1, worst_matrix: best.2, samples: trials }
}

#[derive(Debug, Clone, Serialize)]
pub struct OrderReport {
    pub min_pairing: f64,
    pub max_flux_ratio: f64,
    pub max_partial_ratio: f64,
}

/// `F(v):P ≥ 0` on `Λ∩PSD` and growth of the `Λ`-parts of `F`, `∂ₗF`.
pub fn check_lambda_order(sys: &SystemSpec, cone: &LambdaCone, trials: usize, seed: u64, radius: f64) -> OrderReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = OrderReport { min_pairing: f64::INFINITY, max_flux_ratio: 0.0, max_partial_ratio: 0.0 };
    let mut grad = vec![0.0; sys.n];
    for t in 0..trials {
        let p = cone.sample(&mut rng);
        let v = if t == 0 { vec![0.0; sys.n] } else { sample_state(sys, &mut rng, radius) };
        let f = sys.flux(&v);
        rep.min_pairing = rep.min_pairing.min(sym::dot(&f, &p));
        let pf = sys.lambda_project(&f);
        let k = sys.entropy_value(&v);
        rep.max_flux_ratio = rep.max_flux_ratio.max(sym::dot(&pf, &pf).sqrt() / (k + 1.0));
        sys.entropy.gradient(&v, &mut grad);
        let gn = sym::dot(&grad, &grad).sqrt();
        for dl in sys.flux_partials(&v) {
            let mut pd = sys.lambda_project(&dl);
            // Diagonal growth is governed by ∇K itself; test the off-diagonal part.
            for l in 0..sys.big_n {
                pd[sym::packed_index(sys.big_n, l, l)] = 0.0;
            }
            rep.max_partial_ratio = rep.max_partial_ratio.max(sym::dot(&pd, &pd).sqrt() / (gn + 1.0));
        }
    }
    rep
}

#[derive(Debug, Clone, Serialize)]
pub struct LoewnerWitness {
    pub matrix: Vec<f64>,
    pub state: Vec<f64>,
    pub eigenvalue: f64,
    /// `f(mid) − (f(a)+f(b))/2` along the eigenvector; positive certifies non-convexity.
    pub midpoint_gap: f64,
}

fn fd_hessian(f: &dyn Fn(&[f64]) -> f64, y: &[f64], h: f64) -> Vec<f64> {
    let n = y.len();
    let mut out = vec![0.0; n * n];
    let mut z = y.to_vec();
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            for (si, sj, w) in [(1.0, 1.0, 1.0), (1.0, -1.0, -1.0), (-1.0, 1.0, -1.0), (-1.0, -1.0, 1.0)] {
                z.copy_from_slice(y);
                z[i] += si * h;
                z[j] += sj * h;
                acc += w * f(&z);
            }
            let v = acc / (4.0 * h * h);
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    out
}

/// The block matrix on the last two rows/columns of GKdV.
pub fn loewner_matrix(big_n: usize) -> Vec<f64> {
    let mut p = vec![0.0; sym::packed_len(big_n)];
    let (a, b) = (big_n - 2, big_n - 1);
    p[sym::packed_index(big_n, a, a)] = 1.0;
    p[sym::packed_index(big_n, b, b)] = 1.0;
    p[sym::packed_index(big_n, a, b)] = sym::SQRT2;
    p
}

/// Searches states for a negative finite-difference Hessian eigenvalue of
/// `y ↦ F(y):P`.
pub fn loewner_counterexample(sys: &SystemSpec, p: &[f64]) -> Option<LoewnerWitness> {
    let f = |y: &[f64]| sym::dot(&sys.flux(y), p);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let h = 1e-4;
    let grid: Vec<f64> = (-20..=20).map(|i| i as f64 * 0.5).collect();
    for &u in &grid {
        for &w in &grid {
            let mut y = vec![0.0; sys.n];
            y[0] = u;
            if sys.n > 1 {
                y[1] = w;
            }
            let hess = fd_hessian(&f, &y, h);
            let lam = min_sym_eig(sys.n, &hess);
            if best.as_ref().is_none_or(|b| lam < b.0) {
                best = Some((lam, y));
            }
        }
    }
    let (lam, y) = best?;
    if lam >= -1e-6 {
        return None;
    }
    let hess = fd_hessian(&f, &y, h);
    let e = nalgebra::SymmetricEigen::new(nalgebra::DMatrix::from_row_slice(sys.n, sys.n, &hess));
    let idx = e.eigenvalues.imin();
    let dir: Vec<f64> = e.eigenvectors.column(idx).iter().copied().collect();
    let step = 1e-2;
    let a: Vec<f64> = y.iter().zip(&dir).map(|(x, d)| x - step * d).collect();
    let b: Vec<f64> = y.iter().zip(&dir).map(|(x, d)| x + step * d).collect();
    let gap = f(&y) - 0.5 * (f(&a) + f(&b));
    Some(LoewnerWitness { matrix: p.to_vec(), state: y, eigenvalue: lam, midpoint_gap: gap })
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceReport {
    /// Max of `|L(qI)|`, relative to `max|q|`.
    pub identity_residual: f64,
    /// Max pointwise `|tr L*ζ|`.
    pub max_trace: f64,
    pub verified: bool,
}

pub fn check_strong_trace(sys: &SystemSpec, grid: &PeriodicGrid, trials: usize, seed: u64) -> Result<TraceReport, SystemError> {
    let op = sys.operator(grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut id_res = 0.0f64;
    let mut max_tr = 0.0f64;
    let big = sys.big_n;
    for _ in 0..trials {
        let q = grid::random_smooth(grid, FieldShape::Vector(1), 4, 1.0, &mut rng);
        let mut xi = GridField::zeros(grid, FieldShape::Sym(big));
        for l in 0..big {
            xi.component_mut(sym::packed_index(big, l, l)).copy_from_slice(q.component(0));
        }
        let lq = op.apply_l(&xi)?;
        id_res = id_res.max(lq.max_abs() / q.max_abs().max(1e-300));
        let zeta = grid::random_smooth(grid, FieldShape::Vector(sys.n), 4, 1.0, &mut rng);
        let b = op.apply_lstar(&zeta)?;
        for p in 0..grid.len() {
            max_tr = max_tr.max(sym::trace(big, &b.point(p)).abs());
        }
    }
    Ok(TraceReport { identity_residual: id_res, max_trace: max_tr, verified: id_res <= 1e-12 })
}

/// Largest `ε = 2^{-k}` passing the convexity and order checks on a fixed
/// certification set.
pub fn choose_epsilon(name: &str, params: &SystemParams) -> Result<f64, SystemError> {
    let probe = make_with_epsilon(name, params, 1.0)?;
    if !probe.uses_epsilon() {
        return Ok(1.0);
    }
    let cone = LambdaCone::new(&probe);
    let mut rng = ChaCha8Rng::seed_from_u64(0xE551_1017);
    let mut mats: Vec<Vec<f64>> = (0..400).map(|_| cone.sample(&mut rng)).collect();
    mats.push(sym::identity(probe.big_n));
    let mut states: Vec<Vec<f64>> = (0..400).map(|_| sample_state(&probe, &mut rng, 10.0)).collect();
    // Points on the axes, where the Hessian bound is tight.
    for i in 0..probe.n {
        for s in [1e-3, 0.1, 0.5, 1.0, 2.0, 5.0] {
            for sign in [1.0, -1.0] {
                let mut v = vec![0.0; probe.n];
                v[i] = sign * s;
                states.push(v.clone());
                if probe.n > 1 {
                    v[(i + 1) % probe.n] = sign * s;
                    states.push(v);
                }
            }
        }
    }
    for k in 0..12 {
        let eps = 0.5f64.powi(k);
        let sys = make_with_epsilon(name, params, eps)?;
        let ok = mats.par_iter().all(|p| {
            states.iter().all(|v| min_sym_eig(sys.n, &sys.pairing_hessian(v, p)) >= -1e-10 && sym::dot(&sys.flux(v), p) >= -1e-10)
        });
        if ok {
            return Ok(eps);
        }
    }
    Err(SystemError::Param(format!("no admissible epsilon found for '{name}'")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sys(name: &str, eps: f64) -> SystemSpec {
        make_system(name, &SystemParams { epsilon: Some(eps), ..Default::default() }).unwrap()
    }

    fn all() -> Vec<SystemSpec> {
        ["scalar", "gkdv", "nls", "nlkg", "hj"].iter().map(|n| sys(n, 0.1)).collect()
    }

    #[test]
    fn dimensions() {
        let dims: Vec<(usize, usize)> = all().iter().map(|s| (s.n, s.big_n)).collect();
        assert_eq!(dims, vec![(1, 2), (2, 4), (4, 6), (6, 8), (1, 1)]);
        assert!(make_system("kdv", &SystemParams::default()).is_err());
        assert!(make_system("gkdv", &SystemParams { alpha: 0.5, ..Default::default() }).is_err());
        assert!(make_system("nls", &SystemParams { q: 0.25, epsilon: Some(0.1), ..Default::default() }).is_err());
    }

    #[test]
    fn flux_spot_values() {
        let g = sys("gkdv", 0.1);
        let f0 = g.flux(&[0.0, 0.0]);
        assert!((f0[0] - 1.1).abs() < 1e-15);
        assert!((sym::trace(4, &f0) - 1.1).abs() < 1e-15);
        assert_eq!(f0.iter().filter(|x| **x != 0.0).count(), 1);
        let s = sys("scalar", 0.1);
        let f1 = sym::unpack(2, &s.flux(&[1.0]));
        assert!(f1.iter().all(|x| (x - 0.5).abs() < 1e-15));
        let h = make_system("hj", &SystemParams { d: 2, ..Default::default() }).unwrap();
        assert!((h.entropy_value(&[3.0, 4.0]) - 12.5).abs() < 1e-12);
    }

    #[test]
    fn entropy_is_half_trace_of_flux_increment() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for s in all() {
            let f0 = s.flux(&vec![0.0; s.n]);
            for _ in 0..50 {
                let v: Vec<f64> = (0..s.n).map(|_| rng.random_range(-3.0..3.0)).collect();
                let f = s.flux(&v);
                let half: f64 = 0.5 * (sym::trace(s.big_n, &f) - sym::trace(s.big_n, &f0));
                let k = s.entropy_value(&v);
                assert!((half - k).abs() <= 1e-12 * (1.0 + k), "{}: {half} vs {k}", s.name);
            }
        }
    }

    #[test]
    fn partials_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for s in all() {
            for _ in 0..20 {
                let v: Vec<f64> = (0..s.n).map(|_| rng.random_range(-2.0..2.0)).collect();
                let parts = s.flux_partials(&v);
                for (l, part) in parts.iter().enumerate() {
                    let h = 1e-6;
                    let mut a = v.clone();
                    let mut b = v.clone();
                    a[l] += h;
                    b[l] -= h;
                    let (fa, fb) = (s.flux(&a), s.flux(&b));
                    for k in 0..part.len() {
                        let fd = (fa[k] - fb[k]) / (2.0 * h);
                        assert!((fd - part[k]).abs() <= 1e-6 * (1.0 + fd.abs()), "{} ∂{l} slot {k}", s.name);
                    }
                }
                let cone = LambdaCone::new(&s);
                let p = cone.sample(&mut rng);
                let mut g = vec![0.0; s.n];
                s.pairing_gradient(&v, &p, &mut g);
                for (l, part) in parts.iter().enumerate() {
                    assert!((g[l] - sym::dot(part, &p)).abs() < 1e-10 * (1.0 + g[l].abs()));
                }
                let hess = s.pairing_hessian(&v, &p);
                let h = 1e-5;
                for l in 0..s.n {
                    let mut a = v.clone();
                    let mut b = v.clone();
                    a[l] += h;
                    b[l] -= h;
                    let (mut ga, mut gb) = (vec![0.0; s.n], vec![0.0; s.n]);
                    s.pairing_gradient(&a, &p, &mut ga);
                    s.pairing_gradient(&b, &p, &mut gb);
                    for m in 0..s.n {
                        let fd = (ga[m] - gb[m]) / (2.0 * h);
                        assert!((fd - hess[m * s.n + l]).abs() < 1e-5 * (1.0 + fd.abs()), "{} H[{m},{l}]", s.name);
                    }
                }
            }
        }
    }

    #[test]
    fn gkdv_sharp_second_component_is_identity() {
        let g = sys("gkdv", 0.1);
        let w = entropy::sharp(&*g.entropy, &[0.7, -1.3]);
        assert_eq!(w[1], -1.3);
        assert!((w[0] - (0.7 + 0.49 * 0.7 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn gkdv_operator_example() {
        let s = sys("gkdv", 0.1);
        let grid = PeriodicGrid::line(32, 2.0 * PI).unwrap();
        let mut xi = GridField::zeros(&grid, FieldShape::Sym(4));
        let slot = sym::packed_index(4, 0, 2);
        for p in 0..grid.len() {
            xi.data[slot * grid.len() + p] = sym::SQRT2 * grid.coordinates(p)[0].sin();
        }
        let l = grid::apply_l(&s.symbol, &xi).unwrap();
        for p in 0..grid.len() {
            let x = grid.coordinates(p)[0];
            assert!((l.point(p)[0] - 10.0 * x.sin()).abs() < 1e-12 * 10.0 * 32.0);
            assert!((l.point(p)[1] - 10.0 * x.cos()).abs() < 1e-12 * 10.0 * 32.0);
        }
    }

    #[test]
    fn lambda_patterns_match_displays() {
        let g = sys("gkdv", 0.1);
        assert_eq!(g.lambda_basis.len(), 4);
        let mut e = vec![0.0; 10];
        e[sym::packed_index(4, 1, 1)] = 1.0;
        let p = sym::unpack(4, &g.lambda_project(&e));
        for l in 0..4 {
            assert!((p[(l, l)] - 0.25).abs() < 1e-14);
        }
        let scalar = sys("scalar", 0.1);
        assert_eq!(scalar.lambda_basis.len(), 2);
        assert_eq!(sys("nls", 0.1).lambda_basis.len(), 7);
        assert_eq!(sys("hj", 0.1).lambda_basis.len(), 1);
        for s in all() {
            let len = s.packed_len();
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let x: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = s.lambda_project(&x);
            let pp = s.lambda_project(&p);
            assert!(p.iter().zip(&pp).all(|(a, b)| (a - b).abs() < 1e-13));
            assert!(sym::dot(&p, &p) <= sym::dot(&x, &x) + 1e-13);
            assert!(s.lambda_residual(&sym::identity(s.big_n)) < 1e-13);
        }
    }

    #[test]
    fn lstar_lands_in_lambda() {
        let grid = PeriodicGrid::line(32, 2.0 * PI).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for s in all() {
            let u = grid::random_smooth(&grid, FieldShape::Vector(s.n), 5, 1.0, &mut rng);
            let b = grid::apply_lstar(&s.symbol, &u).unwrap();
            for p in 0..grid.len() {
                assert!(s.lambda_residual(&b.point(p)) < 1e-12, "{}", s.name);
            }
        }
    }

    #[test]
    fn cone_samples_are_admissible() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in all() {
            let cone = LambdaCone::new(&s);
            for _ in 0..50 {
                let (r, lam) = cone.residuals(&cone.sample(&mut rng));
                assert!(r < 1e-10 && lam >= -1e-12, "{}: {r} {lam}", s.name);
            }
        }
    }

    #[test]
    fn conservativity_small_grid() {
        let grid = PeriodicGrid::line(64, 2.0 * PI).unwrap();
        for s in all().into_iter().filter(|s| s.name != "hj") {
            assert!(check_conservativity(&s, &grid, 3, 2, 0.5).unwrap() < 1e-11, "{}", s.name);
        }
    }

    #[test]
    fn hj_fails_trace_route() {
        let grid = PeriodicGrid::line(32, 2.0 * PI).unwrap();
        let r = check_strong_trace(&sys("hj", 0.1), &grid, 2, 0).unwrap();
        assert!(!r.verified);
        let r = check_strong_trace(&sys("gkdv", 0.1), &grid, 2, 0).unwrap();
        assert!(r.verified && r.max_trace < 1e-12);
    }

    #[test]
    fn identity_pairing_hessian_is_twice_entropy_hessian() {
        for s in all() {
            let v: Vec<f64> = (0..s.n).map(|i| 0.3 * (i as f64 + 1.0)).collect();
            let h = s.pairing_hessian(&v, &sym::identity(s.big_n));
            let mut k = vec![0.0; s.n * s.n];
            s.entropy.hessian(&v, &mut k);
            for (a, b) in h.iter().zip(&k) {
                assert!((a - 2.0 * b).abs() < 1e-12, "{}", s.name);
            }
        }
    }

    #[test]
    fn epsilon_caps() {
        let p1 = SystemParams { alpha: 1.0, ..Default::default() };
        let p2 = SystemParams { alpha: 2.0, ..Default::default() };
        let e1 = choose_epsilon("gkdv", &p1).unwrap();
        let e2 = choose_epsilon("gkdv", &p2).unwrap();
        assert!(e1 >= 1.0 / 64.0);
        assert!(e2 < e1);
        assert_eq!(choose_epsilon("hj", &p1).unwrap(), 1.0);
    }

    #[test]
    fn loewner_controls() {
        for alpha in [1.0, 2.0] {
            let s = make_system("gkdv", &SystemParams { alpha, epsilon: Some(0.1), ..Default::default() }).unwrap();
            let w = loewner_counterexample(&s, &loewner_matrix(4)).expect("witness");
            assert!(w.eigenvalue < -1e-6 && w.midpoint_gap > 0.0);
            assert!(loewner_counterexample(&s, &sym::identity(4)).is_none());
        }
    }
}
