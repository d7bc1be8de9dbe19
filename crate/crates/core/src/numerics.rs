//! Dense linear algebra and Gaussian sampling shared by the agents.
//!
//! Matrices are small (d up to a few hundred) and dense. Solves go through a
//! Cholesky factorization; only the extreme eigenvalues are ever needed, so
//! they come from power and inverse-power iteration.

use std::ops::{Deref, DerefMut};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_EIG_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITERS: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("matrix is not positive definite (pivot {pivot} at index {index})")]
    NonPositiveDefinite { index: usize, pivot: f64 },
    #[error("eigenvalue iteration did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize, estimate: EigBounds },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix is not symmetric at ({row}, {col})")]
    NotSymmetric { row: usize, col: usize },
    #[error("non-finite entry")]
    NonFinite,
}

/// Real vector. Dereferences to a slice.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(pub Vec<f64>);

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Symmetric matrix stored densely in row-major order.
///
/// Construction checks symmetry; positive definiteness is checked lazily by
/// [`Cholesky::factor`], so the type also carries PSD covariances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpdMatrix {
    dim: usize,
    entries: Vec<f64>,
}

impl SpdMatrix {
    pub fn new(dim: usize, entries: Vec<f64>) -> Result<Self, NumericsError> {
        if entries.len() != dim * dim {
            return Err(NumericsError::DimensionMismatch {
                expected: dim * dim,
                got: entries.len(),
            });
        }
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(NumericsError::NonFinite);
        }
        for i in 0..dim {
            for j in (i + 1)..dim {
                let (a, b) = (entries[i * dim + j], entries[j * dim + i]);
                let scale = a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
                if (a - b).abs() > 1e-12 * scale {
                    return Err(NumericsError::NotSymmetric { row: i, col: j });
                }
            }
        }
        Ok(SpdMatrix { dim, entries })
    }

    /// `scale * I`
    pub fn scaled_identity(dim: usize, scale: f64) -> Self {
        let mut entries = vec![0.0; dim * dim];
        for i in 0..dim {
            entries[i * dim + i] = scale;
        }
        SpdMatrix { dim, entries }
    }

    pub fn identity(dim: usize) -> Self {
        Self::scaled_identity(dim, 1.0)
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let dim = diag.len();
        let mut m = Self::scaled_identity(dim, 0.0);
        for (i, d) in diag.iter().enumerate() {
            m.entries[i * dim + i] = *d;
        }
        m
    }

    /// Averages `m` with its transpose.
    pub fn symmetrized(m: &DenseMatrix) -> Self {
        let dim = m.dim();
        let mut entries = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                entries[i * dim + j] = 0.5 * (m.get(i, j) + m.get(j, i));
            }
        }
        SpdMatrix { dim, entries }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.dim..(i + 1) * self.dim]
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vector {
        let mut out = vec![0.0; self.dim];
        self.mul_vec_into(x, &mut out);
        Vector(out)
    }

    pub fn mul_vec_into(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(i), x);
        }
    }

    /// `A + phi phi^T`, returned as a new matrix.
    pub fn rank1_update(&self, phi: &[f64]) -> Result<SpdMatrix, NumericsError> {
        let mut out = self.clone();
        out.rank1_update_in_place(phi)?;
        Ok(out)
    }

    /// Adds `phi phi^T`. Each off-diagonal product is computed once and
    /// written to both triangles, so symmetry is preserved bit for bit.
    pub fn rank1_update_in_place(&mut self, phi: &[f64]) -> Result<(), NumericsError> {
        if phi.len() != self.dim {
            return Err(NumericsError::DimensionMismatch {
                expected: self.dim,
                got: phi.len(),
            });
        }
        let d = self.dim;
        for i in 0..d {
            if phi[i] == 0.0 {
                continue;
            }
            self.entries[i * d + i] += phi[i] * phi[i];
            for j in (i + 1)..d {
                let p = phi[i] * phi[j];
                self.entries[i * d + j] += p;
                self.entries[j * d + i] += p;
            }
        }
        Ok(())
    }

    pub fn to_dense(&self) -> DenseMatrix {
        DenseMatrix {
            dim: self.dim,
            entries: self.entries.clone(),
        }
    }

    pub fn frobenius(&self) -> f64 {
        norm(&self.entries)
    }
}

/// General square matrix, used for products of non-commuting symmetric
/// factors.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    dim: usize,
    entries: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(dim: usize) -> Self {
        DenseMatrix {
            dim,
            entries: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        SpdMatrix::identity(dim).to_dense()
    }

    pub fn from_rows(dim: usize, entries: Vec<f64>) -> Self {
        assert_eq!(entries.len(), dim * dim);
        DenseMatrix { dim, entries }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.entries[i * self.dim + j] = v;
    }

    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        let d = self.dim;
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for k in 0..d {
                let a = self.entries[i * d + k];
                if a == 0.0 {
                    continue;
                }
                let row = &other.entries[k * d..(k + 1) * d];
                for (o, b) in out[i * d..(i + 1) * d].iter_mut().zip(row) {
                    *o += a * b;
                }
            }
        }
        DenseMatrix { dim: d, entries: out }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vector {
        let d = self.dim;
        Vector((0..d).map(|i| dot(&self.entries[i * d..(i + 1) * d], x)).collect())
    }

    pub fn transpose(&self) -> DenseMatrix {
        let d = self.dim;
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                out[j * d + i] = self.entries[i * d + j];
            }
        }
        DenseMatrix { dim: d, entries: out }
    }

    /// `self + alpha * other`
    pub fn add_scaled(&self, alpha: f64, other: &DenseMatrix) -> DenseMatrix {
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| a + alpha * b)
            .collect();
        DenseMatrix { dim: self.dim, entries }
    }

    /// Integer power by repeated squaring. Intended for symmetric bases:
    /// each product is re-projected onto the symmetric matrices to stop
    /// round-off from accumulating an antisymmetric part.
    pub fn sym_pow(&self, mut exp: u64) -> DenseMatrix {
        let mut result = DenseMatrix::identity(self.dim);
        let mut base = self.clone();
        while exp > 0 {
            if exp & 1 == 1 {
                result = SpdMatrix::symmetrized(&result.matmul(&base)).to_dense();
            }
            exp >>= 1;
            if exp > 0 {
                base = SpdMatrix::symmetrized(&base.matmul(&base)).to_dense();
            }
        }
        result
    }
}

/// Lower-triangular Cholesky factor `L` with `A = L L^T`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    dim: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    pub fn factor(a: &SpdMatrix) -> Result<Self, NumericsError> {
        let d = a.dim;
        let mut l = vec![0.0; d * d];
        for j in 0..d {
            let mut diag = a.get(j, j);
            for k in 0..j {
                diag -= l[j * d + k] * l[j * d + k];
            }
            if diag <= 0.0 || !diag.is_finite() {
                return Err(NumericsError::NonPositiveDefinite { index: j, pivot: diag });
            }
            let ljj = diag.sqrt();
            l[j * d + j] = ljj;
            for i in (j + 1)..d {
                let mut s = a.get(i, j);
                for k in 0..j {
                    s -= l[i * d + k] * l[j * d + k];
                }
                l[i * d + j] = s / ljj;
            }
        }
        Ok(Cholesky { dim: d, lower: l })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vector, NumericsError> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x)?;
        Ok(Vector(x))
    }

    pub fn solve_in_place(&self, x: &mut [f64]) -> Result<(), NumericsError> {
        let d = self.dim;
        if x.len() != d {
            return Err(NumericsError::DimensionMismatch { expected: d, got: x.len() });
        }
        let l = &self.lower;
        for i in 0..d {
            let mut s = x[i];
            for k in 0..i {
                s -= l[i * d + k] * x[k];
            }
            x[i] = s / l[i * d + i];
        }
        for i in (0..d).rev() {
            let mut s = x[i];
            for k in (i + 1)..d {
                s -= l[k * d + i] * x[k];
            }
            x[i] = s / l[i * d + i];
        }
        Ok(())
    }

    /// `x^T A^{-1} x`
    pub fn inverse_quadratic_form(&self, x: &[f64]) -> Result<f64, NumericsError> {
        let d = self.dim;
        if x.len() != d {
            return Err(NumericsError::DimensionMismatch { expected: d, got: x.len() });
        }
        // ||L^{-1} x||^2
        let l = &self.lower;
        let mut y = x.to_vec();
        for i in 0..d {
            let mut s = y[i];
            for k in 0..i {
                s -= l[i * d + k] * y[k];
            }
            y[i] = s / l[i * d + i];
        }
        Ok(dot(&y, &y))
    }

    /// Dense inverse. Only the posterior oracle needs this.
    pub fn inverse(&self) -> DenseMatrix {
        let d = self.dim;
        let mut out = DenseMatrix::zeros(d);
        let mut e = vec![0.0; d];
        for j in 0..d {
            e.iter_mut().for_each(|x| *x = 0.0);
            e[j] = 1.0;
            self.solve_in_place(&mut e).expect("dimension checked");
            for i in 0..d {
                out.set(i, j, e[i]);
            }
        }
        out
    }
}

/// Solves `A x = b` for symmetric positive definite `A`.
pub fn spd_solve(a: &SpdMatrix, b: &[f64]) -> Result<Vector, NumericsError> {
    if b.len() != a.dim {
        return Err(NumericsError::DimensionMismatch { expected: a.dim, got: b.len() });
    }
    Cholesky::factor(a)?.solve(b)
}

/// `||x||_{A^{-1}} = sqrt(x^T A^{-1} x)`
pub fn inverse_norm(a: &SpdMatrix, x: &[f64]) -> Result<f64, NumericsError> {
    Ok(Cholesky::factor(a)?.inverse_quadratic_form(x)?.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigBounds {
    pub lambda_max: f64,
    pub lambda_min: f64,
    pub kappa: f64,
}

impl EigBounds {
    pub fn new(lambda_max: f64, lambda_min: f64) -> Self {
        EigBounds {
            lambda_max,
            lambda_min,
            kappa: lambda_max / lambda_min,
        }
    }
}

/// Eigenvector estimates carried between calls so that slowly changing
/// matrices (a design matrix gaining one rank-1 term per episode) converge in
/// a handful of iterations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EigWarmStart {
    top: Option<Vec<f64>>,
    bottom: Option<Vec<f64>>,
}

/// Extreme eigenvalues of an SPD matrix.
pub fn eig_extremes(a: &SpdMatrix, tol: f64) -> Result<EigBounds, NumericsError> {
    eig_extremes_warm(a, tol, DEFAULT_MAX_ITERS, &mut EigWarmStart::default())
}

pub fn eig_extremes_warm(
    a: &SpdMatrix,
    tol: f64,
    max_iters: usize,
    warm: &mut EigWarmStart,
) -> Result<EigBounds, NumericsError> {
    let d = a.dim;
    let chol = Cholesky::factor(a)?;
    // one-hot features give a diagonal design; read the spectrum off it
    if (0..d).all(|i| (0..d).all(|j| i == j || a.entries[i * d + j] == 0.0)) {
        let diag = (0..d).map(|i| a.entries[i * d + i]);
        let lambda_max = diag.clone().fold(f64::MIN, f64::max);
        let lambda_min = diag.fold(f64::MAX, f64::min);
        return Ok(EigBounds::new(lambda_max, lambda_min));
    }
    let start = |prev: &Option<Vec<f64>>| match prev {
        Some(v) if v.len() == d => v.clone(),
        _ => default_start(d),
    };

    let mut top = start(&warm.top);
    let (rq_max, ok_max) = power_iterate(&mut top, tol, max_iters, |x, out| a.mul_vec_into(x, out));
    let mut bottom = start(&warm.bottom);
    let (rq_inv, ok_min) = power_iterate(&mut bottom, tol, max_iters, |x, out| {
        out.copy_from_slice(x);
        chol.solve_in_place(out).expect("dimension checked");
    });
    warm.top = Some(top);
    warm.bottom = Some(bottom);

    let lambda_max = rq_max;
    let lambda_min = (1.0 / rq_inv).min(lambda_max);
    let bounds = EigBounds::new(lambda_max, lambda_min);
    if ok_max && ok_min {
        Ok(bounds)
    } else {
        Err(NumericsError::NoConvergence {
            iterations: max_iters,
            estimate: bounds,
        })
    }
}

fn default_start(d: usize) -> Vec<f64> {
    // Slightly tilted ones vector, so no eigenvector of a structured matrix
    // is orthogonal to it by accident.
    let v: Vec<f64> = (0..d).map(|i| 1.0 + 1e-3 * std::f64::consts::SQRT_2 * i as f64).collect();
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

/// Power iteration on the operator `apply`, starting from `v` (overwritten
/// with the final unit iterate). Returns the Rayleigh quotient and whether
/// the stopping rule fired.
///
/// Stops when the geometric-tail estimate of the remaining Rayleigh-quotient
/// movement, `delta * rho / (1 - rho)` with `rho` the ratio of successive
/// changes, drops below `tol * |rq|`. This keeps near-degenerate leading
/// pairs from stopping early on a small but slowly shrinking step.
fn power_iterate(
    v: &mut [f64],
    tol: f64,
    max_iters: usize,
    apply: impl Fn(&[f64], &mut [f64]),
) -> (f64, bool) {
    let d = v.len();
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        v.copy_from_slice(&default_start(d));
    } else {
        v.iter_mut().for_each(|x| *x /= n);
    }
    let mut w = vec![0.0; d];
    apply(v, &mut w);
    let mut rq = dot(v, &w);
    let mut prev_delta: Option<f64> = None;
    for _ in 0..max_iters {
        let wn = norm(&w);
        if wn == 0.0 {
            return (0.0, true);
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / wn;
        }
        apply(v, &mut w);
        let next = dot(v, &w);
        let delta = (next - rq).abs();
        rq = next;
        let scale = tol * rq.abs().max(f64::MIN_POSITIVE);
        if delta == 0.0 {
            return (rq, true);
        }
        if let Some(pd) = prev_delta {
            let rho = (delta / pd).min(1.0 - 1e-12);
            let tail = delta * rho / (1.0 - rho);
            if delta <= scale && tail <= scale {
                return (rq, true);
            }
        }
        prev_delta = Some(delta);
    }
    (rq, false)
}

/// Draws a vector of i.i.d. standard normals (ziggurat sampler).
pub fn gaussian_sample<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vector {
    let mut v = vec![0.0; dim];
    fill_gaussian(&mut v, rng);
    Vector(v)
}

pub fn fill_gaussian<R: Rng + ?Sized>(out: &mut [f64], rng: &mut R) {
    for x in out.iter_mut() {
        *x = rng.sample(StandardNormal);
    }
}
