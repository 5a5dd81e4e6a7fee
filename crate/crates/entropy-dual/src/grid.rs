//! Periodic grids, Fourier multipliers and the operators `L`, `L*`.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rustfft::{Fft, FftPlanner};
use serde::Serialize;

use crate::sym;

#[derive(Debug, thiserror::Error)]
pub enum GridError {
    #[error("invalid grid: {0}")]
    Invalid(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed field file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeriodicGrid {
    pub points: Vec<usize>,
    pub lengths: Vec<f64>,
    /// `(T, steps)` when the grid carries a time axis.
    pub time: Option<(f64, usize)>,
}

impl PeriodicGrid {
    pub fn new(points: Vec<usize>, lengths: Vec<f64>) -> Result<Self, GridError> {
        if points.is_empty() || points.len() != lengths.len() {
            return Err(GridError::Invalid("points and lengths need equal nonzero length".into()));
        }
        if points.iter().any(|&p| p < 4 || p % 2 != 0) {
            return Err(GridError::Invalid("points per axis must be even and at least 4".into()));
        }
        if lengths.iter().any(|&l| !(l > 0.0)) {
            return Err(GridError::Invalid("lengths must be positive".into()));
        }
        Ok(Self { points, lengths, time: None })
    }

    pub fn line(points: usize, length: f64) -> Result<Self, GridError> {
        Self::new(vec![points], vec![length])
    }

    pub fn with_time(mut self, t_end: f64, steps: usize) -> Result<Self, GridError> {
        if !(t_end > 0.0) || steps == 0 {
            return Err(GridError::Invalid("time axis needs T > 0 and steps >= 1".into()));
        }
        self.time = Some((t_end, steps));
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.points.len()
    }

    pub fn len(&self) -> usize {
        self.points.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.lengths[axis] / self.points[axis] as f64
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|a| self.spacing(a)).product()
    }

    pub fn volume(&self) -> f64 {
        self.lengths.iter().product()
    }

    /// Multi-index of flat point `p` (last axis fastest).
    pub fn unravel(&self, mut p: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for a in (0..self.dim()).rev() {
            idx[a] = p % self.points[a];
            p /= self.points[a];
        }
        idx
    }

    pub fn coordinates(&self, p: usize) -> Vec<f64> {
        self.unravel(p).iter().enumerate().map(|(a, &i)| i as f64 * self.spacing(a)).collect()
    }

    /// Signed integer wave index along an axis.
    pub fn wave_index(&self, axis: usize, i: usize) -> i64 {
        let n = self.points[axis];
        if i <= n / 2 {
            i as i64
        } else {
            i as i64 - n as i64
        }
    }

    pub fn wavenumber(&self, axis: usize, i: usize) -> f64 {
        2.0 * PI / self.lengths[axis] * self.wave_index(axis, i) as f64
    }

    /// Largest wavenumber kept by the 2/3 rule, over all axes.
    pub fn dealiased_kmax(&self) -> f64 {
        (0..self.dim()).map(|a| 2.0 * PI / self.lengths[a] * (self.points[a] / 3) as f64).fold(0.0, f64::max)
    }

    pub fn time_step(&self) -> Option<f64> {
        self.time.map(|(t, s)| t / s as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FieldShape {
    Vector(usize),
    Sym(usize),
}

impl FieldShape {
    pub fn components(&self) -> usize {
        match *self {
            FieldShape::Vector(n) => n,
            FieldShape::Sym(n) => sym::packed_len(n),
        }
    }
}

/// Samples on a spatial grid, component-major: `data[c * len + p]`.
/// Symmetric fields hold packed entries.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub grid: PeriodicGrid,
    pub shape: FieldShape,
    pub data: Vec<f64>,
}

impl GridField {
    pub fn zeros(grid: &PeriodicGrid, shape: FieldShape) -> Self {
        let data = vec![0.0; grid.len() * shape.components()];
        Self { grid: grid.clone(), shape, data }
    }

    pub fn from_fn(grid: &PeriodicGrid, shape: FieldShape, f: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        let mut out = Self::zeros(grid, shape);
        let len = grid.len();
        for p in 0..len {
            let vals = f(&grid.coordinates(p));
            for (c, v) in vals.into_iter().enumerate() {
                out.data[c * len + p] = v;
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn components(&self) -> usize {
        self.shape.components()
    }

    pub fn component(&self, c: usize) -> &[f64] {
        let n = self.len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn component_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn point(&self, p: usize) -> Vec<f64> {
        let n = self.len();
        (0..self.components()).map(|c| self.data[c * n + p]).collect()
    }

    pub fn point_into(&self, p: usize, out: &mut [f64]) {
        let n = self.len();
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.data[c * n + p];
        }
    }

    pub fn set_point(&mut self, p: usize, vals: &[f64]) {
        let n = self.len();
        for (c, v) in vals.iter().enumerate() {
            self.data[c * n + p] = *v;
        }
    }

    /// Grid inner product `Σ f·g·cellvol`.
    pub fn inner(&self, other: &GridField) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum::<f64>() * self.grid.cell_volume()
    }

    pub fn norm(&self) -> f64 {
        self.inner(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn mean(&self, c: usize) -> f64 {
        self.component(c).iter().sum::<f64>() / self.len() as f64
    }

    pub fn axpy(&mut self, a: f64, x: &GridField) {
        for (s, v) in self.data.iter_mut().zip(&x.data) {
            *s += a * v;
        }
    }

    pub fn scaled(&self, a: f64) -> GridField {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= a);
        out
    }

    pub fn sub(&self, other: &GridField) -> GridField {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }
}

const POINT_CHUNK: usize = 512;

/// Evaluates `f(p, inputs_at_p, out_at_p)` at every grid point. Chunks of
/// points run in parallel; small grids stay on the calling thread.
pub fn map_pointwise<E, F>(inputs: &[&GridField], grid: &PeriodicGrid, out_shape: FieldShape, f: F) -> Result<GridField, E>
where
    E: Send,
    F: Fn(usize, &[Vec<f64>], &mut [f64]) -> Result<(), E> + Sync,
{
    let len = grid.len();
    let n_out = out_shape.components();
    let mut vals = vec![0.0; len * n_out];
    let run = |start: usize, chunk: &mut [f64]| -> Result<(), E> {
        let mut bufs: Vec<Vec<f64>> = inputs.iter().map(|g| vec![0.0; g.components()]).collect();
        for (k, o) in chunk.chunks_mut(n_out.max(1)).enumerate() {
            let p = start + k;
            for (b, g) in bufs.iter_mut().zip(inputs) {
                g.point_into(p, b);
            }
            f(p, &bufs, o)?;
        }
        Ok(())
    };
    if n_out > 0 {
        if len <= POINT_CHUNK {
            run(0, &mut vals)?;
        } else {
            use rayon::prelude::*;
            vals.par_chunks_mut(POINT_CHUNK * n_out)
                .enumerate()
                .map(|(c, chunk)| run(c * POINT_CHUNK, chunk))
                .collect::<Result<Vec<()>, E>>()?;
        }
    }
    let mut out = GridField::zeros(grid, out_shape);
    for p in 0..len {
        for c in 0..n_out {
            out.data[c * len + p] = vals[p * n_out + c];
        }
    }
    Ok(out)
}

/// Max of `f` over grid points.
pub fn max_pointwise<F: Fn(&[f64]) -> f64 + Sync>(field: &GridField, f: F) -> f64 {
    let r: Result<GridField, ()> = map_pointwise(&[field], &field.grid, FieldShape::Vector(1), |_, x, o| {
        o[0] = f(&x[0]);
        Ok(())
    });
    r.map(|g| g.data.into_iter().fold(f64::NEG_INFINITY, f64::max)).unwrap_or(f64::NAN)
}

// ---------------------------------------------------------------------------
// Spectral machinery

/// Cached FFT plans for one grid.
#[derive(Clone)]
pub struct Spectral {
    pub grid: PeriodicGrid,
    forward: Vec<Arc<dyn Fft<f64>>>,
    inverse: Vec<Arc<dyn Fft<f64>>>,
}

impl std::fmt::Debug for Spectral {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Spectral").field("grid", &self.grid).finish()
    }
}

impl Spectral {
    pub fn new(grid: &PeriodicGrid) -> Self {
        let mut planner = FftPlanner::new();
        let forward = grid.points.iter().map(|&n| planner.plan_fft_forward(n)).collect();
        let inverse = grid.points.iter().map(|&n| planner.plan_fft_inverse(n)).collect();
        Self { grid: grid.clone(), forward, inverse }
    }

    fn transform(&self, data: &mut [Complex64], plans: &[Arc<dyn Fft<f64>>]) {
        let pts = &self.grid.points;
        if pts.len() == 1 {
            plans[0].process(data);
            return;
        }
        for axis in 0..pts.len() {
            let n = pts[axis];
            let stride: usize = pts[axis + 1..].iter().product();
            let outer = data.len() / (n * stride);
            let mut line = vec![Complex64::new(0.0, 0.0); n];
            for o in 0..outer {
                for s in 0..stride {
                    let base = o * n * stride + s;
                    for i in 0..n {
                        line[i] = data[base + i * stride];
                    }
                    plans[axis].process(&mut line);
                    for i in 0..n {
                        data[base + i * stride] = line[i];
                    }
                }
            }
        }
    }

    pub fn forward(&self, real: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = real.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform(&mut buf, &self.forward);
        buf
    }

    /// Inverse transform, normalized, real part.
    pub fn inverse_real(&self, mut spec: Vec<Complex64>) -> Vec<f64> {
        self.transform(&mut spec, &self.inverse);
        let s = 1.0 / spec.len() as f64;
        spec.into_iter().map(|c| c.re * s).collect()
    }

    /// Multiplier of `∂^α`; Nyquist modes of odd-order axes are zeroed.
    pub fn derivative_multiplier(&self, alpha: &[usize]) -> Vec<Complex64> {
        let g = &self.grid;
        (0..g.len())
            .map(|p| {
                let idx = g.unravel(p);
                let mut m = Complex64::new(1.0, 0.0);
                for (a, &order) in alpha.iter().enumerate() {
                    if order == 0 {
                        continue;
                    }
                    if order % 2 == 1 && idx[a] == g.points[a] / 2 {
                        return Complex64::new(0.0, 0.0);
                    }
                    let ik = Complex64::new(0.0, g.wavenumber(a, idx[a]));
                    m *= ik.powu(order as u32);
                }
                m
            })
            .collect()
    }

    pub fn dealias_mask(&self) -> Vec<f64> {
        let g = &self.grid;
        (0..g.len())
            .map(|p| {
                let idx = g.unravel(p);
                let keep = (0..g.dim()).all(|a| g.wave_index(a, idx[a]).unsigned_abs() as usize <= g.points[a] / 3);
                if keep {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// `∂^α f`, componentwise.
pub fn spectral_derivative(f: &GridField, alpha: &[usize]) -> GridField {
    let sp = Spectral::new(&f.grid);
    let mult = sp.derivative_multiplier(alpha);
    let mut out = f.clone();
    for c in 0..f.components() {
        let mut s = sp.forward(f.component(c));
        s.iter_mut().zip(&mult).for_each(|(v, m)| *v *= m);
        out.component_mut(c).copy_from_slice(&sp.inverse_real(s));
    }
    out
}

/// 2/3-rule truncation, componentwise.
pub fn dealias(f: &GridField) -> GridField {
    let sp = Spectral::new(&f.grid);
    let mask = sp.dealias_mask();
    let mut out = f.clone();
    for c in 0..f.components() {
        let mut s = sp.forward(f.component(c));
        s.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
        out.component_mut(c).copy_from_slice(&sp.inverse_real(s));
    }
    out
}

fn bump(x: f64) -> f64 {
    if x.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - x * x)).exp()
    }
}

/// Cosine transform of the unnormalized bump on `[-1, 1]`.
fn bump_transform(omega: f64) -> f64 {
    // The bump is flat to all orders at ±1, so the trapezoid rule converges
    // spectrally.
    let m = 2000;
    let h = 2.0 / m as f64;
    (1..m).map(|i| -1.0 + i as f64 * h).map(|x| bump(x) * (omega * x).cos()).sum::<f64>() * h
}

/// Convolution with the bump kernel of radius `L_min/(4k)`.
pub fn mollify(f: &GridField, k: usize) -> Result<GridField, GridError> {
    if k == 0 {
        return Err(GridError::Invalid("mollification index must be at least 1".into()));
    }
    let g = &f.grid;
    let radius = g.lengths.iter().cloned().fold(f64::INFINITY, f64::min) / (4.0 * k as f64);
    let norm = bump_transform(0.0);
    let mut axis_tables = Vec::new();
    for a in 0..g.dim() {
        let table: Vec<f64> = (0..g.points[a]).map(|i| bump_transform(g.wavenumber(a, i) * radius) / norm).collect();
        axis_tables.push(table);
    }
    let sp = Spectral::new(g);
    let mult: Vec<f64> = (0..g.len()).map(|p| g.unravel(p).iter().enumerate().map(|(a, &i)| axis_tables[a][i]).product()).collect();
    let mut out = f.clone();
    for c in 0..f.components() {
        let mut s = sp.forward(f.component(c));
        s.iter_mut().zip(&mult).for_each(|(v, m)| *v *= m);
        out.component_mut(c).copy_from_slice(&sp.inverse_real(s));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Operator symbols

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SymbolTerm {
    /// Output component `i` of `L`.
    pub component: usize,
    /// Matrix entry `(l, m)`, `l ≤ m`.
    pub entry: (usize, usize),
    pub alpha: Vec<usize>,
    pub coefficient: f64,
}

/// `L(Ξ)_i = Σ b·∂^α Ξ_lm` over the listed terms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OperatorSymbol {
    pub n: usize,
    pub big_n: usize,
    pub terms: Vec<SymbolTerm>,
}

impl OperatorSymbol {
    pub fn new(n: usize, big_n: usize) -> Self {
        Self { n, big_n, terms: Vec::new() }
    }

    pub fn term(&mut self, component: usize, l: usize, m: usize, alpha: Vec<usize>, coefficient: f64) -> &mut Self {
        let entry = if l <= m { (l, m) } else { (m, l) };
        assert!(component < self.n && entry.1 < self.big_n, "symbol term out of range");
        self.terms.push(SymbolTerm { component, entry, alpha, coefficient });
        self
    }

    pub fn order(&self) -> usize {
        self.terms.iter().map(|t| t.alpha.iter().sum::<usize>()).max().unwrap_or(0)
    }

    /// Packed slots touched by the symbol.
    pub fn touched_slots(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.terms.iter().map(|t| sym::packed_index(self.big_n, t.entry.0, t.entry.1)).collect();
        s.sort_unstable();
        s.dedup();
        s
    }
}

/// An operator symbol bound to a grid, with multipliers precomputed.
#[derive(Debug, Clone)]
pub struct LinearOperator {
    pub symbol: OperatorSymbol,
    pub spectral: Spectral,
    /// Per term: packed slot, input-to-packed scale, multiplier.
    plan: Vec<(usize, f64, Vec<Complex64>)>,
    slots: Vec<usize>,
}

impl LinearOperator {
    pub fn new(symbol: &OperatorSymbol, grid: &PeriodicGrid) -> Result<Self, GridError> {
        if symbol.terms.iter().any(|t| t.alpha.len() != grid.dim()) {
            return Err(GridError::Dimension("multi-index length differs from grid dimension".into()));
        }
        let spectral = Spectral::new(grid);
        let plan = symbol
            .terms
            .iter()
            .map(|t| {
                let slot = sym::packed_index(symbol.big_n, t.entry.0, t.entry.1);
                let scale = t.coefficient / sym::entry_scale(t.entry.0, t.entry.1);
                (slot, scale, spectral.derivative_multiplier(&t.alpha))
            })
            .collect();
        Ok(Self { symbol: symbol.clone(), spectral, plan, slots: symbol.touched_slots() })
    }

    pub fn grid(&self) -> &PeriodicGrid {
        &self.spectral.grid
    }

    /// Symbol of `L*` at flat mode `p` as `(packed slot, component, value)`.
    pub fn lstar_symbol_at(&self, p: usize) -> Vec<(usize, usize, Complex64)> {
        self.symbol.terms.iter().zip(&self.plan).map(|(t, (slot, scale, mult))| (*slot, t.component, mult[p].conj() * *scale)).collect()
    }

    pub fn apply_l(&self, xi: &GridField) -> Result<GridField, GridError> {
        if xi.shape != FieldShape::Sym(self.symbol.big_n) || xi.grid != *self.grid() {
            return Err(GridError::Dimension("apply_L expects a symmetric field on the operator grid".into()));
        }
        let len = xi.len();
        let zero = Complex64::new(0.0, 0.0);
        let mut acc = vec![vec![zero; len]; self.symbol.n];
        let mut used = vec![false; self.symbol.n];
        let spectra: Vec<Option<Vec<Complex64>>> = (0..xi.components())
            .map(|c| if self.slots.binary_search(&c).is_ok() { Some(self.spectral.forward(xi.component(c))) } else { None })
            .collect();
        for (term, (slot, scale, mult)) in self.symbol.terms.iter().zip(&self.plan) {
            let src = spectra[*slot].as_ref().expect("slot transformed");
            let dst = &mut acc[term.component];
            used[term.component] = true;
            for ((d, s), m) in dst.iter_mut().zip(src).zip(mult) {
                *d += s * m * *scale;
            }
        }
        let mut out = GridField::zeros(self.grid(), FieldShape::Vector(self.symbol.n));
        for (i, spec) in acc.into_iter().enumerate() {
            if used[i] {
                out.component_mut(i).copy_from_slice(&self.spectral.inverse_real(spec));
            }
        }
        Ok(out)
    }

    pub fn apply_lstar(&self, u: &GridField) -> Result<GridField, GridError> {
        if u.shape != FieldShape::Vector(self.symbol.n) || u.grid != *self.grid() {
            return Err(GridError::Dimension("apply_Lstar expects an n-vector field on the operator grid".into()));
        }
        let len = u.len();
        let zero = Complex64::new(0.0, 0.0);
        let comps: Vec<bool> = (0..self.symbol.n).map(|i| self.symbol.terms.iter().any(|t| t.component == i)).collect();
        let spectra: Vec<Option<Vec<Complex64>>> =
            (0..self.symbol.n).map(|i| if comps[i] { Some(self.spectral.forward(u.component(i))) } else { None }).collect();
        let big_n = self.symbol.big_n;
        let mut acc = vec![vec![zero; len]; sym::packed_len(big_n)];
        for (term, (slot, scale, mult)) in self.symbol.terms.iter().zip(&self.plan) {
            let src = spectra[term.component].as_ref().expect("component transformed");
            let dst = &mut acc[*slot];
            for ((d, s), m) in dst.iter_mut().zip(src).zip(mult) {
                *d += s * m.conj() * *scale;
            }
        }
        let mut out = GridField::zeros(self.grid(), FieldShape::Sym(big_n));
        for slot in &self.slots {
            let spec = std::mem::take(&mut acc[*slot]);
            out.component_mut(*slot).copy_from_slice(&self.spectral.inverse_real(spec));
        }
        Ok(out)
    }
}

pub fn apply_l(symbol: &OperatorSymbol, xi: &GridField) -> Result<GridField, GridError> {
    LinearOperator::new(symbol, &xi.grid)?.apply_l(xi)
}

pub fn apply_lstar(symbol: &OperatorSymbol, u: &GridField) -> Result<GridField, GridError> {
    LinearOperator::new(symbol, &u.grid)?.apply_lstar(u)
}

/// A real trigonometric polynomial with wave indices up to `modes` per axis
/// and Gaussian-ish random coefficients of size `amplitude`.
pub fn random_smooth(grid: &PeriodicGrid, shape: FieldShape, modes: usize, amplitude: f64, rng: &mut ChaCha8Rng) -> GridField {
    let sp = Spectral::new(grid);
    let mut out = GridField::zeros(grid, shape);
    let len = grid.len();
    for c in 0..shape.components() {
        let mut spec = vec![Complex64::new(0.0, 0.0); len];
        for (p, s) in spec.iter_mut().enumerate() {
            let idx = grid.unravel(p);
            let ok = (0..grid.dim()).all(|a| grid.wave_index(a, idx[a]).unsigned_abs() as usize <= modes);
            if ok {
                let decay: f64 = (0..grid.dim()).map(|a| 1.0 + grid.wave_index(a, idx[a]).abs() as f64).product();
                *s = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) / decay;
            }
        }
        let vals = sp.inverse_real(spec);
        let peak = vals.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        out.component_mut(c).iter_mut().zip(vals).for_each(|(o, v)| *o = amplitude * v / peak);
    }
    out
}

/// Max over trials of `|(LΞ,u) − (Ξ,L*u)| / (‖LΞ‖‖u‖ + ‖Ξ‖‖L*u‖)`.
pub fn adjoint_residual(symbol: &OperatorSymbol, grid: &PeriodicGrid, trials: usize, seed: u64) -> Result<f64, GridError> {
    use rand::SeedableRng;
    let op = LinearOperator::new(symbol, grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modes = grid.points.iter().min().copied().unwrap_or(4) / 2 - 1;
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let xi = random_smooth(grid, FieldShape::Sym(symbol.big_n), modes, 1.0, &mut rng);
        let u = random_smooth(grid, FieldShape::Vector(symbol.n), modes, 1.0, &mut rng);
        let lxi = op.apply_l(&xi)?;
        let lsu = op.apply_lstar(&u)?;
        let scale = lxi.norm() * u.norm() + xi.norm() * lsu.norm();
        if scale > 0.0 {
            worst = worst.max((lxi.inner(&u) - xi.inner(&lsu)).abs() / scale);
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Serialization

const MAGIC: &[u8; 4] = b"GFLD";

/// Writes a stack of fields on one grid: header, then little-endian doubles.
pub fn write_binary<W: Write>(mut w: W, fields: &[GridField]) -> Result<(), GridError> {
    let first = fields.first().ok_or_else(|| GridError::Format("no fields to write".into()))?;
    if fields.iter().any(|f| f.grid != first.grid || f.shape != first.shape) {
        return Err(GridError::Dimension("all fields in a stack must share grid and shape".into()));
    }
    w.write_all(MAGIC)?;
    w.write_all(&1u32.to_le_bytes())?;
    w.write_all(&(first.grid.dim() as u32).to_le_bytes())?;
    for (&p, &l) in first.grid.points.iter().zip(&first.grid.lengths) {
        w.write_all(&(p as u64).to_le_bytes())?;
        w.write_all(&l.to_le_bytes())?;
    }
    let (tag, dim) = match first.shape {
        FieldShape::Vector(n) => (0u8, n),
        FieldShape::Sym(n) => (1u8, n),
    };
    w.write_all(&[tag])?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    w.write_all(&(fields.len() as u64).to_le_bytes())?;
    for f in fields {
        for v in &f.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_binary<R: Read>(mut r: R) -> Result<Vec<GridField>, GridError> {
    fn take<const K: usize, R: Read>(r: &mut R) -> Result<[u8; K], GridError> {
        let mut b = [0u8; K];
        r.read_exact(&mut b)?;
        Ok(b)
    }
    if &take::<4, _>(&mut r)? != MAGIC {
        return Err(GridError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut r)?);
    if version != 1 {
        return Err(GridError::Format(format!("unsupported version {version}")));
    }
    let d = u32::from_le_bytes(take(&mut r)?) as usize;
    let mut points = Vec::new();
    let mut lengths = Vec::new();
    for _ in 0..d {
        points.push(u64::from_le_bytes(take(&mut r)?) as usize);
        lengths.push(f64::from_le_bytes(take(&mut r)?));
    }
    let grid = PeriodicGrid::new(points, lengths)?;
    let tag = take::<1, _>(&mut r)?[0];
    let dim = u32::from_le_bytes(take(&mut r)?) as usize;
    let shape = match tag {
        0 => FieldShape::Vector(dim),
        1 => FieldShape::Sym(dim),
        t => return Err(GridError::Format(format!("unknown shape tag {t}"))),
    };
    let count = u64::from_le_bytes(take(&mut r)?) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut f = GridField::zeros(&grid, shape);
        for v in f.data.iter_mut() {
            *v = f64::from_le_bytes(take(&mut r)?);
        }
        out.push(f);
    }
    Ok(out)
}

/// CSV with coordinates then components; symmetric fields list matrix entries.
pub fn write_csv<W: Write>(mut w: W, f: &GridField) -> Result<(), GridError> {
    let g = &f.grid;
    let mut header: Vec<String> = (0..g.dim()).map(|a| format!("x{a}")).collect();
    let entries = match f.shape {
        FieldShape::Vector(n) => {
            header.extend((0..n).map(|c| format!("c{c}")));
            None
        }
        FieldShape::Sym(n) => {
            let e = sym::packed_entries(n);
            header.extend(e.iter().map(|(l, m)| format!("m{l}_{m}")));
            Some(e)
        }
    };
    writeln!(w, "{}", header.join(","))?;
    for p in 0..g.len() {
        let mut row: Vec<String> = g.coordinates(p).iter().map(|x| format!("{x:.12e}")).collect();
        let vals = f.point(p);
        for (c, v) in vals.iter().enumerate() {
            let v = match &entries {
                Some(e) => v / sym::entry_scale(e[c].0, e[c].1),
                None => *v,
            };
            row.push(format!("{v:.12e}"));
        }
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn line(n: usize) -> PeriodicGrid {
        PeriodicGrid::line(n, 2.0 * PI).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(PeriodicGrid::line(5, 1.0).is_err());
        assert!(PeriodicGrid::line(2, 1.0).is_err());
        assert!(PeriodicGrid::line(8, 0.0).is_err());
        assert!(PeriodicGrid::line(8, 1.0).unwrap().with_time(0.0, 4).is_err());
    }

    #[test]
    fn derivative_of_sine() {
        let g = line(32);
        let f = GridField::from_fn(&g, FieldShape::Vector(1), |x| vec![x[0].sin()]);
        let d = spectral_derivative(&f, &[1]);
        for p in 0..g.len() {
            assert!((d.data[p] - g.coordinates(p)[0].cos()).abs() < 1e-13);
        }
        let c = GridField::from_fn(&g, FieldShape::Vector(1), |_| vec![3.0]);
        assert!(spectral_derivative(&c, &[3]).max_abs() < 1e-13);
    }

    #[test]
    fn fourier_round_trip() {
        let g = PeriodicGrid::new(vec![8, 6], vec![1.0, 2.0]).unwrap();
        let sp = Spectral::new(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vals: Vec<f64> = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let back = sp.inverse_real(sp.forward(&vals));
        for (a, b) in vals.iter().zip(&back) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn dealias_keeps_low_modes() {
        let g = line(64);
        let f = GridField::from_fn(&g, FieldShape::Vector(2), |x| vec![(3.0 * x[0]).cos(), 1.0 + (20.0 * x[0]).sin()]);
        let d = dealias(&f);
        assert!(d.sub(&f).max_abs() < 1e-13);
        let h = GridField::from_fn(&g, FieldShape::Vector(1), |x| vec![(30.0 * x[0]).sin()]);
        assert!(dealias(&h).max_abs() < 1e-13);
    }

    #[test]
    fn scalar_law_symbol_examples() {
        let g = line(64);
        let mut s = OperatorSymbol::new(1, 2);
        s.term(0, 0, 1, vec![1], -1.0);
        let xi = GridField::from_fn(&g, FieldShape::Sym(2), |x| vec![0.0, sym::SQRT2 * x[0].sin(), 0.0]);
        let l = apply_l(&s, &xi).unwrap();
        for p in 0..g.len() {
            assert!((l.data[p] + g.coordinates(p)[0].cos()).abs() < 1e-13);
        }
        let kappa = GridField::from_fn(&g, FieldShape::Vector(1), |x| vec![x[0].sin()]);
        let ls = apply_lstar(&s, &kappa).unwrap();
        for p in 0..g.len() {
            let entry = ls.point(p)[1] / sym::SQRT2;
            assert!((entry - 0.5 * g.coordinates(p)[0].cos()).abs() < 1e-13);
            assert_eq!(ls.point(p)[0], 0.0);
        }
        assert!(adjoint_residual(&s, &g, 5, 3).unwrap() < 1e-12);
    }

    #[test]
    fn zero_symbol_has_zero_residual() {
        let s = OperatorSymbol::new(2, 3);
        assert_eq!(adjoint_residual(&s, &line(16), 3, 0).unwrap(), 0.0);
    }

    #[test]
    fn mollifier_preserves_mass_and_converges() {
        let g = line(128);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vals: Vec<f64> = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = GridField { grid: g.clone(), shape: FieldShape::Vector(1), data: vals };
        let m = mollify(&f, 2).unwrap();
        assert!((m.mean(0) - f.mean(0)).abs() < 1e-13);
        let smooth = GridField::from_fn(&g, FieldShape::Vector(1), |x| vec![x[0].sin() + 0.3 * (2.0 * x[0]).cos()]);
        let mut last = f64::INFINITY;
        for k in [1, 2, 4, 8] {
            let err = mollify(&smooth, k).unwrap().sub(&smooth).norm();
            assert!(err < last);
            last = err;
        }
        assert!(mollify(&smooth, 4096).unwrap().sub(&smooth).max_abs() < 1e-6);
    }

    #[test]
    fn binary_round_trip() {
        let g = PeriodicGrid::new(vec![4, 6], vec![1.0, 3.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_smooth(&g, FieldShape::Sym(3), 1, 1.0, &mut rng);
        let b = random_smooth(&g, FieldShape::Sym(3), 1, 2.0, &mut rng);
        let mut buf = Vec::new();
        write_binary(&mut buf, &[a.clone(), b.clone()]).unwrap();
        let back = read_binary(&buf[..]).unwrap();
        assert_eq!(back, vec![a, b]);
        let mut csv = Vec::new();
        write_csv(&mut csv, &back[0]).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 25);
    }
}
