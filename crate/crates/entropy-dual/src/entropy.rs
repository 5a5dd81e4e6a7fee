//! N-functions and the Orlicz toolkit built on them.
//!
//! Everything here is generic over [`Real`] so the same code runs in `f32`
//! and `f64`; the solvers further up the stack only use `f64`.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub trait Real: Float + FromPrimitive + Debug + Default + Send + Sync + 'static {
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal fits the scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
    /// `powf`, routed through `powi` for small integer exponents.
    fn pow_r(self, p: Self) -> Self {
        if p.fract() == Self::zero() && p.abs() < Self::lit(64.0) {
            self.powi(p.to_i32().unwrap_or(0))
        } else {
            self.powf(p)
        }
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EntropyError {
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("tolerance must be positive")]
    BadTolerance,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("gradient inversion did not converge, residual {residual:e}")]
    NoConvergence { residual: f64 },
    #[error("invalid input: {0}")]
    Input(String),
}

/// Nominal growth indices `(p, q, r)`: `p ≤ v·∇K/K ≤ q` for `|v| ≥ r`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GrowthBounds {
    pub p: f64,
    pub q: f64,
    pub r: f64,
}

/// An N-function `K: ℝⁿ → ℝ₊` with first and second derivatives.
pub trait EntropySpec<R: Real>: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, y: &[R]) -> R;
    fn gradient(&self, y: &[R], out: &mut [R]);
    /// Row-major `n × n`.
    fn hessian(&self, y: &[R], out: &mut [R]);
    /// Inverse of the gradient map when it can be evaluated without a
    /// general Newton solve. Returns `false` when unavailable.
    fn closed_form_inverse(&self, _w: &[R], _out: &mut [R]) -> bool {
        false
    }
    fn growth_bounds(&self) -> GrowthBounds;
}

impl<R: Real, E: EntropySpec<R> + ?Sized> EntropySpec<R> for std::sync::Arc<E> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn value(&self, y: &[R]) -> R {
        (**self).value(y)
    }
    fn gradient(&self, y: &[R], out: &mut [R]) {
        (**self).gradient(y, out)
    }
    fn hessian(&self, y: &[R], out: &mut [R]) {
        (**self).hessian(y, out)
    }
    fn closed_form_inverse(&self, w: &[R], out: &mut [R]) -> bool {
        (**self).closed_form_inverse(w, out)
    }
    fn growth_bounds(&self) -> GrowthBounds {
        (**self).growth_bounds()
    }
}

fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    a.iter().zip(b).fold(R::zero(), |s, (x, y)| s + *x * *y)
}

fn norm_inf<R: Real>(a: &[R]) -> R {
    a.iter().fold(R::zero(), |m, x| m.max(x.abs()))
}

// ---------------------------------------------------------------------------
// Concrete N-functions

/// `K(y) = c·|y|²/2`.
#[derive(Debug, Clone)]
pub struct Quadratic<R> {
    pub n: usize,
    pub c: R,
}

impl<R: Real> Quadratic<R> {
    pub fn new(n: usize) -> Self {
        Self { n, c: R::one() }
    }

    pub fn scaled(n: usize, c: R) -> Self {
        Self { n, c }
    }
}

impl<R: Real> EntropySpec<R> for Quadratic<R> {
    fn dim(&self) -> usize {
        self.n
    }
    fn value(&self, y: &[R]) -> R {
        self.c * dot(y, y) / R::lit(2.0)
    }
    fn gradient(&self, y: &[R], out: &mut [R]) {
        for (o, v) in out.iter_mut().zip(y) {
            *o = self.c * *v;
        }
    }
    fn hessian(&self, _y: &[R], out: &mut [R]) {
        let n = self.n;
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = if i == j { self.c } else { R::zero() };
            }
        }
    }
    fn closed_form_inverse(&self, w: &[R], out: &mut [R]) -> bool {
        for (o, v) in out.iter_mut().zip(w) {
            *o = *v / self.c;
        }
        true
    }
    fn growth_bounds(&self) -> GrowthBounds {
        GrowthBounds { p: 2.0, q: 2.0, r: 0.0 }
    }
}

/// Solve `x + x^{m}/m = s` for `x ≥ 0` (`m > 1`), by Newton from an upper bound.
fn solve_power_shift<R: Real>(m: R, s: R) -> R {
    if s <= R::zero() {
        return R::zero();
    }
    let mut x = s.min((m * s).pow_r(R::one() / m));
    for _ in 0..100 {
        let f = x + x.pow_r(m) / m - s;
        let df = R::one() + x.pow_r(m - R::one());
        let next = x - f / df;
        if !(next < x) || next < R::zero() {
            break;
        }
        let done = (x - next) <= R::epsilon() * R::lit(4.0) * x.max(R::min_positive_value());
        x = next;
        if done {
            break;
        }
    }
    x
}

/// Inverse of `σ ↦ σ^{1/α}(1 + σ/(α+1))` on `σ ≥ 0`.
pub fn gkdv_xi<R: Real>(alpha: R, s: R) -> R {
    let x = solve_power_shift(alpha + R::one(), s.abs());
    x.pow_r(alpha)
}

/// Entropy of the extended GKdV system, `v = (u, w)`.
#[derive(Debug, Clone)]
pub struct GkdvEntropy<R> {
    pub alpha: R,
}

impl<R: Real> EntropySpec<R> for GkdvEntropy<R> {
    fn dim(&self) -> usize {
        2
    }
    fn value(&self, y: &[R]) -> R {
        let a = self.alpha;
        let (u, w) = (y[0], y[1]);
        let two = R::lit(2.0);
        (u * u + w * w) / two + u.abs().pow_r(a + two) / ((a + two) * (a + R::one()))
    }
    fn gradient(&self, y: &[R], out: &mut [R]) {
        let a = self.alpha;
        out[0] = y[0] + y[0].abs().pow_r(a) * y[0] / (a + R::one());
        out[1] = y[1];
    }
    fn hessian(&self, y: &[R], out: &mut [R]) {
        out[0] = R::one() + y[0].abs().pow_r(self.alpha);
        out[1] = R::zero();
        out[2] = R::zero();
        out[3] = R::one();
    }
    fn closed_form_inverse(&self, w: &[R], out: &mut [R]) -> bool {
        let xi = gkdv_xi(self.alpha, w[0]);
        out[0] = w[0] / (R::one() + xi / (self.alpha + R::one()));
        out[1] = w[1];
        true
    }
    fn growth_bounds(&self) -> GrowthBounds {
        GrowthBounds { p: 2.0, q: self.alpha.to_f64_lossy() + 2.0, r: 0.0 }
    }
}

/// `K(v) = |v|²/2 + ρ^{q+1}/(2(q+1))` with `ρ = v₁² + v₂²`; the NLS and
/// NLKG entropies.
#[derive(Debug, Clone)]
pub struct RadialEntropy<R> {
    pub n: usize,
    pub q: R,
}

impl<R: Real> RadialEntropy<R> {
    fn rho(y: &[R]) -> R {
        y[0] * y[0] + y[1] * y[1]
    }
}

impl<R: Real> EntropySpec<R> for RadialEntropy<R> {
    fn dim(&self) -> usize {
        self.n
    }
    fn value(&self, y: &[R]) -> R {
        let two = R::lit(2.0);
        let rho = Self::rho(y);
        dot(y, y) / two + rho.pow_r(self.q + R::one()) / (two * (self.q + R::one()))
    }
    fn gradient(&self, y: &[R], out: &mut [R]) {
        let f = R::one() + Self::rho(y).pow_r(self.q);
        out.copy_from_slice(y);
        out[0] = y[0] * f;
        out[1] = y[1] * f;
    }
    fn hessian(&self, y: &[R], out: &mut [R]) {
        let n = self.n;
        for v in out.iter_mut() {
            *v = R::zero();
        }
        for i in 0..n {
            out[i * n + i] = R::one();
        }
        let rho = Self::rho(y);
        let q = self.q;
        let f = R::one() + rho.pow_r(q);
        let g = if rho > R::zero() { R::lit(2.0) * q * rho.pow_r(q - R::one()) } else { R::zero() };
        out[0] = f + g * y[0] * y[0];
        out[1] = g * y[0] * y[1];
        out[n] = g * y[0] * y[1];
        out[n + 1] = f + g * y[1] * y[1];
    }
    fn closed_form_inverse(&self, w: &[R], out: &mut [R]) -> bool {
        out.copy_from_slice(w);
        let s = (w[0] * w[0] + w[1] * w[1]).sqrt();
        let r = solve_power_shift_radial(self.q, s);
        let f = R::one() + r.pow_r(R::lit(2.0) * self.q);
        out[0] = w[0] / f;
        out[1] = w[1] / f;
        true
    }
    fn growth_bounds(&self) -> GrowthBounds {
        GrowthBounds { p: 2.0, q: 2.0 * self.q.to_f64_lossy() + 2.0, r: 0.0 }
    }
}

/// Solve `r(1 + r^{2q}) = s` for `r ≥ 0`.
fn solve_power_shift_radial<R: Real>(q: R, s: R) -> R {
    if s <= R::zero() {
        return R::zero();
    }
    let m = R::lit(2.0) * q + R::one();
    let mut x = s.min(s.pow_r(R::one() / m));
    for _ in 0..100 {
        let f = x + x.pow_r(m) - s;
        let df = R::one() + m * x.pow_r(m - R::one());
        let next = x - f / df;
        if !(next < x) || next < R::zero() {
            break;
        }
        let done = (x - next) <= R::epsilon() * R::lit(4.0) * x.max(R::min_positive_value());
        x = next;
        if done {
            break;
        }
    }
    x
}

/// The Legendre transform `K*` of an N-function, evaluated numerically.
pub struct Conjugate<'a, R: Real> {
    pub base: &'a dyn EntropySpec<R>,
    pub tol: R,
}

impl<R: Real> EntropySpec<R> for Conjugate<'_, R> {
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn value(&self, w: &[R]) -> R {
        conjugate_value(self.base, w, self.tol).unwrap_or(R::nan())
    }
    fn gradient(&self, w: &[R], out: &mut [R]) {
        match unsharp(self.base, w, self.tol) {
            Ok(v) => out.copy_from_slice(&v),
            Err(_) => out.iter_mut().for_each(|o| *o = R::nan()),
        }
    }
    fn hessian(&self, w: &[R], out: &mut [R]) {
        let n = self.dim();
        let y = unsharp(self.base, w, self.tol).unwrap_or_else(|_| vec![R::nan(); n]);
        let mut h = vec![R::zero(); n * n];
        self.base.hessian(&y, &mut h);
        for j in 0..n {
            let mut e = vec![R::zero(); n];
            e[j] = R::one();
            let mut m = h.clone();
            if !solve_dense(&mut m, &mut e, n) {
                e.iter_mut().for_each(|v| *v = R::nan());
            }
            for i in 0..n {
                out[i * n + j] = e[i];
            }
        }
    }
    fn growth_bounds(&self) -> GrowthBounds {
        let b = self.base.growth_bounds();
        GrowthBounds { p: b.q / (b.q - 1.0), q: b.p / (b.p - 1.0), r: b.r }
    }
}

// ---------------------------------------------------------------------------
// Gradient inversion

/// Gaussian elimination with partial pivoting; `a` is row-major, overwritten.
pub(crate) fn solve_dense<R: Real>(a: &mut [R], b: &mut [R], n: usize) -> bool {
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if a[r * n + col].abs() > a[piv * n + col].abs() {
                piv = r;
            }
        }
        if !(a[piv * n + col].abs() > R::zero()) {
            return false;
        }
        if piv != col {
            for c in 0..n {
                a.swap(col * n + c, piv * n + c);
            }
            b.swap(col, piv);
        }
        let d = a[col * n + col];
        for r in col + 1..n {
            let f = a[r * n + col] / d;
            if f != R::zero() {
                for c in col..n {
                    let v = a[col * n + c];
                    a[r * n + c] = a[r * n + c] - f * v;
                }
                let v = b[col];
                b[r] = b[r] - f * v;
            }
        }
    }
    for col in (0..n).rev() {
        let mut s = b[col];
        for c in col + 1..n {
            s = s - a[col * n + c] * b[c];
        }
        b[col] = s / a[col * n + col];
    }
    b.iter().all(|v| v.is_finite())
}

fn residual_tol<R: Real>(tol: R, w: &[R]) -> R {
    let floor = R::epsilon() * R::lit(64.0);
    tol.max(floor) * R::one().max(norm_inf(w))
}

/// Minimize `K(y) − w·y` by damped Newton starting from `y`.
fn newton_invert<R: Real>(k: &dyn EntropySpec<R>, w: &[R], y: &mut [R], tol: R) -> Result<(), EntropyError> {
    let n = k.dim();
    let tol_abs = residual_tol(tol, w);
    let phi = |y: &[R]| k.value(y) - dot(y, w);
    let mut g = vec![R::zero(); n];
    let mut h = vec![R::zero(); n * n];
    let mut trial = vec![R::zero(); n];
    let mut g_trial = vec![R::zero(); n];
    let resid = |y: &[R], g: &mut [R]| {
        k.gradient(y, g);
        for (gi, wi) in g.iter_mut().zip(w) {
            *gi = *gi - *wi;
        }
        norm_inf(g)
    };
    let mut res = resid(y, &mut g);
    for _ in 0..200 {
        if res <= tol_abs {
            return Ok(());
        }
        k.hessian(y, &mut h);
        let mut d: Vec<R> = g.iter().map(|v| -*v).collect();
        if !solve_dense(&mut h, &mut d, n) || dot(&d, &g) >= R::zero() {
            d = g.iter().map(|v| -*v).collect();
        }
        let slope = dot(&d, &g);
        let f0 = phi(y);
        let mut t = R::one();
        let mut accepted = false;
        for _ in 0..60 {
            for i in 0..n {
                trial[i] = y[i] + t * d[i];
            }
            let r_trial = resid(&trial, &mut g_trial);
            let f1 = phi(&trial);
            if f1.is_finite() && (f1 <= f0 + R::lit(1e-4) * t * slope || r_trial <= (R::one() - R::lit(1e-4) * t) * res) {
                accepted = true;
                break;
            }
            t = t * R::lit(0.5);
        }
        if !accepted {
            // Safeguard: bisect the directional derivative along d.
            let dir = |s: R, buf: &mut [R], gb: &mut [R]| {
                for i in 0..n {
                    buf[i] = y[i] + s * d[i];
                }
                resid(buf, gb);
                dot(gb, &d)
            };
            let (mut lo, mut hi) = (R::zero(), R::one());
            let mut grow = 0;
            while dir(hi, &mut trial, &mut g_trial) < R::zero() && grow < 200 {
                lo = hi;
                hi = hi * R::lit(2.0);
                grow += 1;
            }
            for _ in 0..200 {
                let mid = (lo + hi) / R::lit(2.0);
                if mid <= lo || mid >= hi {
                    break;
                }
                if dir(mid, &mut trial, &mut g_trial) < R::zero() {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            t = (lo + hi) / R::lit(2.0);
            for i in 0..n {
                trial[i] = y[i] + t * d[i];
            }
            if t <= R::zero() {
                return Err(EntropyError::NoConvergence { residual: res.to_f64_lossy() });
            }
        }
        y.copy_from_slice(&trial);
        res = resid(y, &mut g);
    }
    if res <= tol_abs * R::lit(1e3) {
        Ok(())
    } else {
        Err(EntropyError::NoConvergence { residual: res.to_f64_lossy() })
    }
}

/// `v ↦ ∇K(v)`.
pub fn sharp<R: Real>(k: &dyn EntropySpec<R>, v: &[R]) -> Vec<R> {
    let mut out = vec![R::zero(); k.dim()];
    k.gradient(v, &mut out);
    out
}

/// The unique `v` with `∇K(v) = w`.
pub fn unsharp<R: Real>(k: &dyn EntropySpec<R>, w: &[R], tol: R) -> Result<Vec<R>, EntropyError> {
    let mut out = vec![R::zero(); k.dim()];
    unsharp_into(k, w, tol, None, &mut out)?;
    Ok(out)
}

/// As [`unsharp`], writing into `out`; `guess` warm-starts the Newton solve.
pub fn unsharp_into<R: Real>(k: &dyn EntropySpec<R>, w: &[R], tol: R, guess: Option<&[R]>, out: &mut [R]) -> Result<(), EntropyError> {
    if !(tol > R::zero()) {
        return Err(EntropyError::BadTolerance);
    }
    if w.len() != k.dim() {
        return Err(EntropyError::Dimension { expected: k.dim(), got: w.len() });
    }
    if let Some(i) = w.iter().position(|v| !v.is_finite()) {
        return Err(EntropyError::NonFinite(i));
    }
    if k.closed_form_inverse(w, out) && out.iter().all(|v| v.is_finite()) {
        return Ok(());
    }
    match guess {
        Some(g) => out.copy_from_slice(g),
        None => out.iter_mut().for_each(|v| *v = R::zero()),
    }
    newton_invert(k, w, out, tol)
}

/// `K*(w) = sup_y (y·w − K(y))`.
pub fn conjugate_value<R: Real>(k: &dyn EntropySpec<R>, w: &[R], tol: R) -> Result<R, EntropyError> {
    let y = unsharp(k, w, tol)?;
    Ok(dot(&y, w) - k.value(&y))
}

// ---------------------------------------------------------------------------
// Sampled functions and norms

/// Samples of an `ℝⁿ`-valued function on a uniform rectangular grid, point-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledFunction<R> {
    pub n: usize,
    pub shape: Vec<usize>,
    pub spacing: Vec<R>,
    pub data: Vec<R>,
}

impl<R: Real> SampledFunction<R> {
    pub fn new(n: usize, shape: Vec<usize>, spacing: Vec<R>, data: Vec<R>) -> Result<Self, EntropyError> {
        if shape.len() != spacing.len() || shape.is_empty() {
            return Err(EntropyError::Input("shape and spacing must have equal nonzero length".into()));
        }
        if spacing.iter().any(|h| !(*h > R::zero())) {
            return Err(EntropyError::Input("cell volume must be positive".into()));
        }
        let count: usize = shape.iter().product();
        if data.len() != count * n {
            return Err(EntropyError::Dimension { expected: count * n, got: data.len() });
        }
        Ok(Self { n, shape, spacing, data })
    }

    pub fn constant(n: usize, shape: Vec<usize>, spacing: Vec<R>, value: &[R]) -> Result<Self, EntropyError> {
        let count: usize = shape.iter().product();
        let data = (0..count).flat_map(|_| value.iter().copied()).collect();
        Self::new(n, shape, spacing, data)
    }

    pub fn count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn cell_volume(&self) -> R {
        self.spacing.iter().fold(R::one(), |a, b| a * *b)
    }

    pub fn point(&self, i: usize) -> &[R] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn scaled(&self, s: R) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = *v * s);
        out
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == R::zero())
    }

    fn check_finite(&self) -> Result<(), EntropyError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(EntropyError::NonFinite(i)),
            None => Ok(()),
        }
    }
}

/// `∫ K(f)` by midpoint quadrature.
pub fn modular<R: Real>(f: &SampledFunction<R>, k: &dyn EntropySpec<R>) -> Result<R, EntropyError> {
    f.check_finite()?;
    if f.n != k.dim() {
        return Err(EntropyError::Dimension { expected: k.dim(), got: f.n });
    }
    Ok(scaled_modular(f, k, R::one()))
}

fn scaled_modular<R: Real>(f: &SampledFunction<R>, k: &dyn EntropySpec<R>, s: R) -> R {
    let mut buf = vec![R::zero(); f.n];
    let mut total = R::zero();
    for i in 0..f.count() {
        for (b, v) in buf.iter_mut().zip(f.point(i)) {
            *b = *v * s;
        }
        total = total + k.value(&buf);
    }
    total * f.cell_volume()
}

/// `inf{λ > 0 : ∫K(f/λ) ≤ 1}` by bisection to relative tolerance `tol`.
pub fn luxemburg_norm<R: Real>(f: &SampledFunction<R>, k: &dyn EntropySpec<R>, tol: R) -> Result<R, EntropyError> {
    if !(tol > R::zero()) {
        return Err(EntropyError::BadTolerance);
    }
    modular(f, k)?;
    if f.is_zero() {
        return Ok(R::zero());
    }
    let m = |lam: R| scaled_modular(f, k, R::one() / lam);
    let two = R::lit(2.0);
    let (mut lo, mut hi) = (R::one(), R::one());
    while m(hi) > R::one() {
        hi = hi * two;
    }
    while m(lo) <= R::one() && lo > R::min_positive_value() {
        lo = lo / two;
    }
    while hi - lo > tol.max(R::epsilon() * two) * hi {
        let mid = (lo + hi) / two;
        if m(mid) <= R::one() {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Amemiya form of the Orlicz norm, `inf_{k>0} (1 + ∫K(kf))/k`.
///
/// The numerator `k·m'(k) − m(k) − 1` of the derivative is nondecreasing, so
/// the minimizer is its unique root.
pub fn orlicz_norm<R: Real>(f: &SampledFunction<R>, k: &dyn EntropySpec<R>, tol: R) -> Result<R, EntropyError> {
    if !(tol > R::zero()) {
        return Err(EntropyError::BadTolerance);
    }
    modular(f, k)?;
    if f.is_zero() {
        return Ok(R::zero());
    }
    let vol = f.cell_volume();
    let mut buf = vec![R::zero(); f.n];
    let mut grad = vec![R::zero(); f.n];
    let mut numerator = |s: R| {
        let mut m = R::zero();
        let mut dm = R::zero();
        for i in 0..f.count() {
            let p = f.point(i);
            for (b, v) in buf.iter_mut().zip(p) {
                *b = *v * s;
            }
            m = m + k.value(&buf);
            k.gradient(&buf, &mut grad);
            dm = dm + dot(&grad, p);
        }
        s * dm * vol - m * vol - R::one()
    };
    let two = R::lit(2.0);
    let (mut lo, mut hi) = (R::one(), R::one());
    while numerator(hi) < R::zero() {
        hi = hi * two;
    }
    while numerator(lo) >= R::zero() && lo > R::min_positive_value() {
        lo = lo / two;
    }
    while hi - lo > tol.max(R::epsilon() * two) * hi {
        let mid = (lo + hi) / two;
        if numerator(mid) < R::zero() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let kk = (lo + hi) / two;
    Ok((R::one() + scaled_modular(f, k, kk)) / kk)
}

/// `F(t,x) = (1/t)∫₀ᵗ f(s,x) ds` with the time axis first; values live at
/// cell centres, so the first cell returns its own value.
pub fn hardy_average<R: Real>(f: &SampledFunction<R>) -> Result<SampledFunction<R>, EntropyError> {
    f.check_finite()?;
    let nt = f.shape[0];
    let per_slice = f.count() / nt * f.n;
    let dt = f.spacing[0];
    let half = R::lit(0.5);
    let mut out = f.clone();
    let mut acc = vec![R::zero(); per_slice];
    for c in 0..nt {
        let slice = &f.data[c * per_slice..(c + 1) * per_slice];
        let t = (R::from_usize(c).unwrap() + half) * dt;
        for j in 0..per_slice {
            out.data[c * per_slice + j] = (acc[j] + slice[j] * dt * half) / t;
            acc[j] = acc[j] + slice[j] * dt;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct NFunctionReport {
    pub samples: usize,
    /// Sampled max and min of `v·∇K(v)/K(v)`.
    pub ratio_max: f64,
    pub ratio_min: f64,
    /// Sampled min of `v·∇K(v)/K*(∇K(v))`.
    pub conjugate_ratio_min: f64,
    pub delta2_k: f64,
    pub delta2_kstar: f64,
    /// Max of `K*(v#)/(K(v)+1)` and `K(v)/(K*(v#)+1)`.
    pub kstar_over_k: f64,
    pub k_over_kstar: f64,
    pub even: bool,
    pub positive: bool,
    pub strictly_convex: bool,
    pub min_hessian_eigenvalue: f64,
}

/// Sampled N-function diagnostics over radii in `[r_lo, r_hi]`.
pub fn n_function_report<R: Real>(
    k: &dyn EntropySpec<R>,
    sample_box: (f64, f64),
    count: usize,
    seed: u64,
) -> Result<NFunctionReport, EntropyError> {
    if count == 0 {
        return Err(EntropyError::Input("count must be at least 1".into()));
    }
    let (r_lo, r_hi) = sample_box;
    if !(r_lo > 0.0 && r_hi >= r_lo) {
        return Err(EntropyError::Input("sample box must satisfy 0 < lo <= hi".into()));
    }
    let n = k.dim();
    let tol = R::lit(1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = NFunctionReport {
        samples: count,
        ratio_max: f64::NEG_INFINITY,
        ratio_min: f64::INFINITY,
        conjugate_ratio_min: f64::INFINITY,
        delta2_k: 0.0,
        delta2_kstar: 0.0,
        kstar_over_k: 0.0,
        k_over_kstar: 0.0,
        even: true,
        positive: k.value(&vec![R::zero(); n]) == R::zero(),
        strictly_convex: true,
        min_hessian_eigenvalue: f64::INFINITY,
    };
    let mut h = vec![R::zero(); n * n];
    for _ in 0..count {
        let mut dir: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let len = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        let radius = (r_lo.ln() + rng.random::<f64>() * (r_hi / r_lo).ln()).exp();
        dir.iter_mut().for_each(|x| *x *= radius / len);
        let v: Vec<R> = dir.iter().map(|x| R::lit(*x)).collect();
        let kv = k.value(&v);
        let w = sharp(k, &v);
        let vw = dot(&v, &w);
        let kstar = vw - kv;
        let neg: Vec<R> = v.iter().map(|x| -*x).collect();
        let two_v: Vec<R> = v.iter().map(|x| *x * R::lit(2.0)).collect();
        let two_w: Vec<R> = w.iter().map(|x| *x * R::lit(2.0)).collect();
        let kstar2 = conjugate_value(k, &two_w, tol)?;
        let (kv, vw, kstar, kstar2) = (kv.to_f64_lossy(), vw.to_f64_lossy(), kstar.to_f64_lossy(), kstar2.to_f64_lossy());
        rep.ratio_max = rep.ratio_max.max(vw / kv);
        rep.ratio_min = rep.ratio_min.min(vw / kv);
        rep.conjugate_ratio_min = rep.conjugate_ratio_min.min(vw / kstar);
        rep.delta2_k = rep.delta2_k.max(k.value(&two_v).to_f64_lossy() / (kv + 1.0));
        rep.delta2_kstar = rep.delta2_kstar.max(kstar2 / (kstar + 1.0));
        rep.kstar_over_k = rep.kstar_over_k.max(kstar / (kv + 1.0));
        rep.k_over_kstar = rep.k_over_kstar.max(kv / (kstar + 1.0));
        let kneg = k.value(&neg).to_f64_lossy();
        if (kneg - kv).abs() > 1e-12 * (1.0 + kv.abs()) {
            rep.even = false;
        }
        if !(kv > 0.0) {
            rep.positive = false;
        }
        k.hessian(&v, &mut h);
        let hm = nalgebra::DMatrix::from_fn(n, n, |i, j| h[i * n + j].to_f64_lossy());
        let lam = nalgebra::SymmetricEigen::new(hm).eigenvalues.min();
        rep.min_hessian_eigenvalue = rep.min_hessian_eigenvalue.min(lam);
        if !(lam > 0.0) {
            rep.strictly_convex = false;
        }
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_line(n: usize, count: usize, value: &[f64]) -> SampledFunction<f64> {
        SampledFunction::constant(n, vec![count], vec![1.0 / count as f64], value).unwrap()
    }

    #[test]
    fn modular_of_constants() {
        let q = Quadratic::<f64>::new(1);
        assert_eq!(modular(&unit_line(1, 8, &[0.0]), &q).unwrap(), 0.0);
        assert_relative_eq!(modular(&unit_line(1, 8, &[3.0]), &q).unwrap(), 4.5, epsilon = 1e-14);
        let g = GkdvEntropy { alpha: 2.0 };
        assert_relative_eq!(modular(&unit_line(2, 5, &[1.0, 0.0]), &g).unwrap(), 7.0 / 12.0, epsilon = 1e-14);
    }

    #[test]
    fn modular_rejects_nan() {
        let q = Quadratic::<f64>::new(1);
        let f = SampledFunction::new(1, vec![2], vec![0.5], vec![1.0, f64::NAN]).unwrap();
        assert_eq!(modular(&f, &q), Err(EntropyError::NonFinite(1)));
    }

    #[test]
    fn luxemburg_of_constant() {
        let q = Quadratic::<f64>::new(1);
        let v = luxemburg_norm(&unit_line(1, 4, &[3.0]), &q, 1e-12).unwrap();
        assert_relative_eq!(v, 3.0 / 2f64.sqrt(), max_relative = 1e-11);
        assert_eq!(luxemburg_norm(&unit_line(1, 4, &[0.0]), &q, 1e-12).unwrap(), 0.0);
    }

    #[test]
    fn amemiya_of_unit_square() {
        let q = Quadratic::<f64>::scaled(1, 2.0);
        let v = orlicz_norm(&unit_line(1, 4, &[1.0]), &q, 1e-13).unwrap();
        assert_relative_eq!(v, 2.0, max_relative = 1e-10);
    }

    #[test]
    fn gkdv_sharp_spot_value() {
        let g = GkdvEntropy { alpha: 2.0 };
        let s = sharp(&g, &[1.0, 0.0]);
        assert_relative_eq!(s[0], 4.0 / 3.0, epsilon = 1e-15);
        assert_eq!(s[1], 0.0);
        let back = unsharp(&g, &s, 1e-12).unwrap();
        assert_relative_eq!(back[0], 1.0, epsilon = 1e-13);
    }

    #[test]
    fn xi_inverts_its_defining_map() {
        for &alpha in &[1.0, 1.5, 2.0, 3.0] {
            for &sigma in &[0.0, 1e-6, 0.3, 2.0, 50.0] {
                let s: f64 = f64::powf(sigma, 1.0 / alpha) * (1.0 + sigma / (alpha + 1.0));
                assert_relative_eq!(gkdv_xi(alpha, s), sigma, epsilon = 1e-12, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn conjugate_of_quadratic_matches_brute_force() {
        let q = Quadratic::<f64>::new(1);
        for &w in &[-2.0, -0.3, 0.0, 0.7, 1.5] {
            let exact = conjugate_value(&q, &[w], 1e-12).unwrap();
            let brute = (-4000..=4000).map(|i| i as f64 * 1e-3).map(|y| y * w - y * y / 2.0).fold(f64::NEG_INFINITY, f64::max);
            assert_relative_eq!(exact, w * w / 2.0, epsilon = 1e-14);
            assert!((exact - brute).abs() < 1e-6);
        }
    }

    #[test]
    fn newton_path_matches_closed_form() {
        struct NoClosedForm(GkdvEntropy<f64>);
        impl EntropySpec<f64> for NoClosedForm {
            fn dim(&self) -> usize {
                2
            }
            fn value(&self, y: &[f64]) -> f64 {
                self.0.value(y)
            }
            fn gradient(&self, y: &[f64], out: &mut [f64]) {
                self.0.gradient(y, out)
            }
            fn hessian(&self, y: &[f64], out: &mut [f64]) {
                self.0.hessian(y, out)
            }
            fn growth_bounds(&self) -> GrowthBounds {
                self.0.growth_bounds()
            }
        }
        let g = GkdvEntropy { alpha: 1.5 };
        let plain = NoClosedForm(g.clone());
        for w in [[3.0, -1.0], [-0.01, 0.2], [40.0, 7.0], [0.0, 0.0]] {
            let a = unsharp(&g, &w, 1e-12).unwrap();
            let b = unsharp(&plain, &w, 1e-12).unwrap();
            assert_relative_eq!(a[0], b[0], epsilon = 1e-11, max_relative = 1e-11);
            assert_relative_eq!(a[1], b[1], epsilon = 1e-11);
        }
    }

    #[test]
    fn hardy_average_of_constant_and_ramp() {
        let nt = 200;
        let dt = 1.0 / nt as f64;
        let c = SampledFunction::constant(1, vec![nt], vec![dt], &[2.5]).unwrap();
        assert!(hardy_average(&c).unwrap().data.iter().all(|v| (v - 2.5).abs() < 1e-13));
        let ramp: Vec<f64> = (0..nt).map(|i| (i as f64 + 0.5) * dt).collect();
        let f = SampledFunction::new(1, vec![nt], vec![dt], ramp.clone()).unwrap();
        let h = hardy_average(&f).unwrap();
        for (i, v) in h.data.iter().enumerate() {
            // Midpoint cumulation is exact for the ramp up to dt²/(8t).
            assert!((v - ramp[i] / 2.0).abs() <= dt * dt / (8.0 * ramp[i]) + 1e-14);
        }
    }

    #[test]
    fn quadratic_report_has_exponent_two() {
        let q = Quadratic::<f64>::new(3);
        let r = n_function_report(&q, (1e-3, 1e3), 200, 7).unwrap();
        assert_relative_eq!(r.ratio_max, 2.0, epsilon = 1e-10);
        assert_relative_eq!(r.ratio_min, 2.0, epsilon = 1e-10);
        assert_relative_eq!(r.conjugate_ratio_min, 2.0, epsilon = 1e-10);
        assert!(r.even && r.positive && r.strictly_convex);
    }

    #[test]
    fn gkdv_report_exponent_below_alpha_plus_two() {
        let g = GkdvEntropy { alpha: 2.0 };
        let r = n_function_report(&g, (1e-3, 1e3), 500, 3).unwrap();
        assert!(r.ratio_max <= 4.0 + 1e-12, "{}", r.ratio_max);
        assert!(r.even && r.positive && r.strictly_convex);
        assert!(r.delta2_k.is_finite() && r.delta2_kstar.is_finite());
    }

    #[test]
    fn single_precision_paths_run() {
        let g = GkdvEntropy::<f32> { alpha: 2.0 };
        let s = sharp(&g, &[1.0f32, 0.5]);
        let back = unsharp(&g, &s, 1e-6).unwrap();
        assert!((back[0] - 1.0).abs() < 1e-5 && (back[1] - 0.5).abs() < 1e-6);
        let f = SampledFunction::<f32>::constant(2, vec![4], vec![0.25], &[1.0, 0.0]).unwrap();
        assert!((modular(&f, &g).unwrap() - 7.0 / 12.0).abs() < 1e-6);
    }
}
