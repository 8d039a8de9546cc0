//! Dense linear algebra on truncated Hilbert spaces.
//!
//! Every space is represented by coordinates in a fixed orthonormal basis, so
//! adjoints are transposes and Hilbert–Schmidt norms are Frobenius norms.

use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Default relative tolerance for PSD checks, square roots and pseudo-inverses.
pub const DEFAULT_TOL_PSD: f64 = 1e-10;

/// A vector of coordinates in a fixed orthonormal basis.
#[derive(Clone, PartialEq)]
pub struct HilbertVec(DVector<f64>);

impl HilbertVec {
    pub fn zeros(dim: usize) -> Self {
        HilbertVec(DVector::zeros(dim))
    }

    pub fn from_vec(coords: Vec<f64>) -> Self {
        HilbertVec(DVector::from_vec(coords))
    }

    pub fn from_slice(coords: &[f64]) -> Self {
        HilbertVec(DVector::from_column_slice(coords))
    }

    /// The `i`-th basis vector `e_i`.
    pub fn basis(dim: usize, i: usize) -> Self {
        let mut v = DVector::zeros(dim);
        v[i] = 1.0;
        HilbertVec(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.norm_squared()
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn dot(&self, other: &HilbertVec) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.0.dot(&other.0)
    }

    pub fn scaled(&self, a: f64) -> HilbertVec {
        HilbertVec(&self.0 * a)
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: f64, x: &HilbertVec) {
        self.0.axpy(a, &x.0, 1.0);
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|c| *c == 0.0)
    }

    pub(crate) fn inner(&self) -> &DVector<f64> {
        &self.0
    }
}

impl fmt::Debug for HilbertVec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("HilbertVec").field(&self.coords()).finish()
    }
}

impl Add for &HilbertVec {
    type Output = HilbertVec;
    fn add(self, rhs: &HilbertVec) -> HilbertVec {
        HilbertVec(&self.0 + &rhs.0)
    }
}

impl Sub for &HilbertVec {
    type Output = HilbertVec;
    fn sub(self, rhs: &HilbertVec) -> HilbertVec {
        HilbertVec(&self.0 - &rhs.0)
    }
}

impl Add for HilbertVec {
    type Output = HilbertVec;
    fn add(self, rhs: HilbertVec) -> HilbertVec {
        HilbertVec(self.0 + rhs.0)
    }
}

impl Sub for HilbertVec {
    type Output = HilbertVec;
    fn sub(self, rhs: HilbertVec) -> HilbertVec {
        HilbertVec(self.0 - rhs.0)
    }
}

impl Neg for HilbertVec {
    type Output = HilbertVec;
    fn neg(self) -> HilbertVec {
        HilbertVec(-self.0)
    }
}

impl AddAssign<&HilbertVec> for HilbertVec {
    fn add_assign(&mut self, rhs: &HilbertVec) {
        self.0 += &rhs.0;
    }
}

impl SubAssign<&HilbertVec> for HilbertVec {
    fn sub_assign(&mut self, rhs: &HilbertVec) {
        self.0 -= &rhs.0;
    }
}

impl Mul<&HilbertVec> for f64 {
    type Output = HilbertVec;
    fn mul(self, rhs: &HilbertVec) -> HilbertVec {
        HilbertVec(&rhs.0 * self)
    }
}

impl Serialize for HilbertVec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.coords().serialize(s)
    }
}

impl<'de> Deserialize<'de> for HilbertVec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let coords = Vec::<f64>::deserialize(d)?;
        if coords.is_empty() {
            return Err(serde::de::Error::custom("vector must have positive dimension"));
        }
        Ok(HilbertVec::from_vec(coords))
    }
}

/// A dense operator `H -> G` stored as a `dim_out x dim_in` matrix.
#[derive(Clone, PartialEq)]
pub struct LinearOp(DMatrix<f64>);

impl LinearOp {
    pub fn zeros(dim_out: usize, dim_in: usize) -> Self {
        LinearOp(DMatrix::zeros(dim_out, dim_in))
    }

    pub fn identity(dim: usize) -> Self {
        LinearOp(DMatrix::identity(dim, dim))
    }

    /// Rectangular identity: `e_i -> e_i` for `i < min(dim_out, dim_in)`.
    pub fn embedding(dim_out: usize, dim_in: usize) -> Self {
        LinearOp(DMatrix::identity(dim_out, dim_in))
    }

    pub fn diag(values: &[f64]) -> Self {
        LinearOp(DMatrix::from_diagonal(&DVector::from_column_slice(values)))
    }

    /// Build from row-major entries.
    pub fn from_row_slice(dim_out: usize, dim_in: usize, entries: &[f64]) -> Self {
        LinearOp(DMatrix::from_row_slice(dim_out, dim_in, entries))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim_out = rows.len();
        if dim_out == 0 {
            return Err(Error::InvalidArgument("operator needs at least one row".into()));
        }
        let dim_in = rows[0].len();
        if dim_in == 0 {
            return Err(Error::InvalidArgument("operator needs at least one column".into()));
        }
        for r in rows {
            if r.len() != dim_in {
                return Err(Error::DimensionMismatch {
                    context: "operator rows",
                    expected: dim_in,
                    actual: r.len(),
                });
            }
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Ok(Self::from_row_slice(dim_out, dim_in, &flat))
    }

    pub fn from_fn(dim_out: usize, dim_in: usize, f: impl FnMut(usize, usize) -> f64) -> Self {
        LinearOp(DMatrix::from_fn(dim_out, dim_in, f))
    }

    pub fn dim_in(&self) -> usize {
        self.0.ncols()
    }

    pub fn dim_out(&self) -> usize {
        self.0.nrows()
    }

    pub fn entry(&self, row: usize, col: usize) -> f64 {
        self.0[(row, col)]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim_out())
            .map(|i| (0..self.dim_in()).map(|j| self.0[(i, j)]).collect())
            .collect()
    }

    pub fn apply(&self, x: &HilbertVec) -> HilbertVec {
        debug_assert_eq!(self.dim_in(), x.dim());
        HilbertVec(&self.0 * x.inner())
    }

    /// `self ∘ rhs`
    pub fn compose(&self, rhs: &LinearOp) -> Result<LinearOp> {
        if self.dim_in() != rhs.dim_out() {
            return Err(Error::DimensionMismatch {
                context: "operator composition",
                expected: self.dim_in(),
                actual: rhs.dim_out(),
            });
        }
        Ok(LinearOp(&self.0 * &rhs.0))
    }

    pub fn adjoint(&self) -> LinearOp {
        LinearOp(self.0.transpose())
    }

    pub fn scaled(&self, a: f64) -> LinearOp {
        LinearOp(&self.0 * a)
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// Hilbert–Schmidt (Frobenius) norm.
    pub fn hs_norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn hs_norm_sq(&self) -> f64 {
        self.0.norm_squared()
    }

    /// Operator norm, i.e. the largest singular value.
    pub fn op_norm(&self) -> f64 {
        if self.0.iter().all(|v| *v == 0.0) {
            return 0.0;
        }
        self.0
            .clone()
            .singular_values()
            .iter()
            .copied()
            .fold(0.0, f64::max)
    }

    pub fn max_asymmetry(&self) -> f64 {
        if self.dim_in() != self.dim_out() {
            return f64::INFINITY;
        }
        let n = self.dim_in();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((self.0[(i, j)] - self.0[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }

    /// Frobenius distance to `other`.
    pub fn distance(&self, other: &LinearOp) -> f64 {
        (&self.0 - &other.0).norm()
    }

    /// Eigen-decomposition of a symmetric operator, ascending eigenvalues.
    pub fn symmetric_eigen(&self) -> (Vec<f64>, LinearOp) {
        let sym = (&self.0 + self.0.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|a, b| eig.eigenvalues[*a].total_cmp(&eig.eigenvalues[*b]));
        let values = order.iter().map(|i| eig.eigenvalues[*i]).collect();
        let n = self.dim_in();
        let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
        (values, LinearOp(vectors))
    }

    pub fn column(&self, j: usize) -> HilbertVec {
        HilbertVec(self.0.column(j).into_owned())
    }

    pub(crate) fn inner(&self) -> &DMatrix<f64> {
        &self.0
    }
}

impl fmt::Debug for LinearOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("LinearOp").field(&self.rows()).finish()
    }
}

impl Add for &LinearOp {
    type Output = LinearOp;
    fn add(self, rhs: &LinearOp) -> LinearOp {
        LinearOp(&self.0 + &rhs.0)
    }
}

impl Sub for &LinearOp {
    type Output = LinearOp;
    fn sub(self, rhs: &LinearOp) -> LinearOp {
        LinearOp(&self.0 - &rhs.0)
    }
}

impl AddAssign<&LinearOp> for LinearOp {
    fn add_assign(&mut self, rhs: &LinearOp) {
        self.0 += &rhs.0;
    }
}

impl Serialize for LinearOp {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for LinearOp {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        LinearOp::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// A `K`-valued bilinear form on `G x G`, stored as `dim_k` matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct BilinearTensor {
    dim_k: usize,
    dim_g: usize,
    entries: Vec<f64>,
}

impl BilinearTensor {
    pub fn zeros(dim_k: usize, dim_g: usize) -> Self {
        BilinearTensor {
            dim_k,
            dim_g,
            entries: vec![0.0; dim_k * dim_g * dim_g],
        }
    }

    /// Scalar inner product `(g1, g2) -> <g1, g2>`.
    pub fn inner_product(dim_g: usize) -> Self {
        Self::from_matrix(&LinearOp::identity(dim_g))
    }

    /// Scalar form `(g1, g2) -> <m g2, g1>`.
    pub fn from_matrix(m: &LinearOp) -> Self {
        Self::from_components(std::slice::from_ref(m))
    }

    /// One matrix per `K` coordinate.
    pub fn from_components(ms: &[LinearOp]) -> Self {
        let dim_g = ms[0].dim_in();
        let mut t = Self::zeros(ms.len(), dim_g);
        for (k, m) in ms.iter().enumerate() {
            assert_eq!(m.dim_in(), dim_g);
            assert_eq!(m.dim_out(), dim_g);
            for a in 0..dim_g {
                for b in 0..dim_g {
                    t.set(k, a, b, m.entry(a, b));
                }
            }
        }
        t
    }

    pub fn dim_k(&self) -> usize {
        self.dim_k
    }

    pub fn dim_g(&self) -> usize {
        self.dim_g
    }

    fn idx(&self, k: usize, a: usize, b: usize) -> usize {
        (k * self.dim_g + a) * self.dim_g + b
    }

    pub fn get(&self, k: usize, a: usize, b: usize) -> f64 {
        self.entries[self.idx(k, a, b)]
    }

    pub fn set(&mut self, k: usize, a: usize, b: usize, v: f64) {
        let i = self.idx(k, a, b);
        self.entries[i] = v;
    }

    pub fn component(&self, k: usize) -> LinearOp {
        LinearOp::from_fn(self.dim_g, self.dim_g, |a, b| self.get(k, a, b))
    }

    /// `ζ(g1, g2) = Σ_{a,b} ζ_k[a][b] g1[a] g2[b]` for each `k`.
    pub fn eval(&self, g1: &HilbertVec, g2: &HilbertVec) -> HilbertVec {
        debug_assert_eq!(g1.dim(), self.dim_g);
        debug_assert_eq!(g2.dim(), self.dim_g);
        let (x, y) = (g1.coords(), g2.coords());
        let out = (0..self.dim_k)
            .map(|k| {
                let mut acc = 0.0;
                for a in 0..self.dim_g {
                    let row = &self.entries[self.idx(k, a, 0)..self.idx(k, a, 0) + self.dim_g];
                    let inner: f64 = row.iter().zip(y).map(|(z, yb)| z * yb).sum();
                    acc += x[a] * inner;
                }
                acc
            })
            .collect();
        HilbertVec::from_vec(out)
    }

    pub fn scaled(&self, a: f64) -> Self {
        BilinearTensor {
            dim_k: self.dim_k,
            dim_g: self.dim_g,
            entries: self.entries.iter().map(|v| v * a).collect(),
        }
    }

    pub fn add(&self, other: &BilinearTensor) -> Self {
        assert_eq!((self.dim_k, self.dim_g), (other.dim_k, other.dim_g));
        BilinearTensor {
            dim_k: self.dim_k,
            dim_g: self.dim_g,
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    /// Largest absolute entry; used for finite-difference tolerances.
    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub fn hs_norm(op: &LinearOp) -> f64 {
    op.hs_norm()
}

/// `x ⊗ y`, the operator `z -> <y, z> x`.
pub fn outer(x: &HilbertVec, y: &HilbertVec) -> LinearOp {
    LinearOp(x.inner() * y.inner().transpose())
}

/// `Tr_{S,R}(ζ) = Σ_j ζ(S h_j, R h_j)` over the standard basis of the domain.
pub fn trace_bilinear(zeta: &BilinearTensor, s: &LinearOp, r: &LinearOp) -> Result<HilbertVec> {
    trace_bilinear_in_basis(zeta, s, r, &LinearOp::identity(s.dim_in()))
}

/// Same trace, summed over the orthonormal basis given by the columns of `basis`.
pub fn trace_bilinear_in_basis(
    zeta: &BilinearTensor,
    s: &LinearOp,
    r: &LinearOp,
    basis: &LinearOp,
) -> Result<HilbertVec> {
    if s.dim_in() != r.dim_in() {
        return Err(Error::DimensionMismatch {
            context: "trace_bilinear domain",
            expected: s.dim_in(),
            actual: r.dim_in(),
        });
    }
    for op in [s, r] {
        if op.dim_out() != zeta.dim_g() {
            return Err(Error::DimensionMismatch {
                context: "trace_bilinear range",
                expected: zeta.dim_g(),
                actual: op.dim_out(),
            });
        }
    }
    if basis.dim_out() != s.dim_in() {
        return Err(Error::DimensionMismatch {
            context: "trace_bilinear basis",
            expected: s.dim_in(),
            actual: basis.dim_out(),
        });
    }
    let mut acc = HilbertVec::zeros(zeta.dim_k());
    for j in 0..basis.dim_in() {
        let h = basis.column(j);
        acc += &zeta.eval(&s.apply(&h), &r.apply(&h));
    }
    Ok(acc)
}

fn check_psd_input(q: &LinearOp, tol: f64) -> Result<(Vec<f64>, LinearOp, f64)> {
    if q.dim_in() != q.dim_out() {
        return Err(Error::DimensionMismatch {
            context: "square operator",
            expected: q.dim_out(),
            actual: q.dim_in(),
        });
    }
    let (values, vectors) = q.symmetric_eigen();
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let asym = q.max_asymmetry();
    if asym > tol * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::NotSymmetric {
            asymmetry: asym,
            tolerance: tol * scale,
        });
    }
    let lambda_max = values.iter().copied().fold(0.0, f64::max);
    if let Some(&min) = values.first() {
        if min < -tol * scale {
            return Err(Error::NotPositiveSemidefinite { eigenvalue: min });
        }
    }
    Ok((values, vectors, lambda_max))
}

fn spectral_map(values: &[f64], vectors: &LinearOp, f: impl Fn(f64) -> f64) -> LinearOp {
    let d = DMatrix::from_diagonal(&DVector::from_iterator(
        values.len(),
        values.iter().map(|v| f(*v)),
    ));
    LinearOp(vectors.inner() * d * vectors.inner().transpose())
}

/// Symmetric PSD square root; eigenvalues at rounding level or negative within
/// tolerance are clipped to 0.
pub fn psd_sqrt(q: &LinearOp, tol: f64) -> Result<LinearOp> {
    let (values, vectors, lambda_max) = check_psd_input(q, tol)?;
    let floor = 64.0 * f64::EPSILON * lambda_max;
    Ok(spectral_map(&values, &vectors, |v| {
        if v <= floor {
            0.0
        } else {
            v.sqrt()
        }
    }))
}

/// Pseudo-inverse of `Q^{1/2}`; singular values below `tol * σ_max` are treated as zero.
pub fn pinv_sqrt(q: &LinearOp, tol: f64) -> Result<LinearOp> {
    let (values, vectors, lambda_max) = check_psd_input(q, tol)?;
    let sigma_max = lambda_max.max(0.0).sqrt();
    Ok(spectral_map(&values, &vectors, |v| {
        let s = v.max(0.0).sqrt();
        if s <= tol * sigma_max || s == 0.0 {
            0.0
        } else {
            1.0 / s
        }
    }))
}
