//! Dense row-major `f64` matrices with the handful of factorizations the
//! merge solvers need: products, a one-sided Jacobi SVD, and the
//! Moore–Penrose pseudoinverse built on top of it.
//!
//! Vectors are represented as `1 × d` matrices throughout.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Default relative truncation threshold for [`pinv`].
pub const DEFAULT_PINV_REL_TOL: f64 = 1e-12;

const JACOBI_MAX_SWEEPS: usize = 80;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Matrix::from_vec".into()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds from row slices. Panics on ragged input; intended for literals.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), n_cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::from_vec(n_rows, n_cols, data).expect("finite literal")
    }

    /// A `1 × d` row vector.
    pub fn row_vector(values: &[f64]) -> Self {
        Self::from_rows(&[values])
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    /// Internal constructor for results of arithmetic on finite inputs.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix::from_raw(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    /// Gathers the listed rows (in order) into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix::from_raw(indices.len(), self.cols, data)
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::shape(
                    "vstack",
                    format!("column counts differ ({} vs {cols})", p.cols),
                ));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Matrix::from_raw(rows, cols, data))
    }

    fn same_shape(&self, other: &Matrix, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "hadamard")?;
        Ok(self.zip_map(other, |a, b| a * b))
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        self.map(|v| v * alpha)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        Matrix::from_raw(
            self.rows,
            self.cols,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "t_matmul",
                format!("{:?}ᵀ · {:?}", self.shape(), other.shape()),
            ));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let a = self.row(r);
            let b = other.row(r);
            for (i, &ai) in a.iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &bj) in dst.iter_mut().zip(b) {
                    *d += ai * bj;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · self`.
    pub fn gram(&self) -> Matrix {
        self.t_matmul(self).expect("same row count")
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sq().sqrt()
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// Largest singular value.
    pub fn spectral_norm(&self) -> Result<f64> {
        if self.is_empty() {
            return Ok(0.0);
        }
        Ok(svd(self)?.sigma.first().copied().unwrap_or(0.0))
    }

    /// `‖self − other‖_F / max(‖other‖_F, tiny)`.
    pub fn rel_diff(&self, other: &Matrix) -> f64 {
        let diff: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        diff / other.frobenius_norm().max(f64::MIN_POSITIVE)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Standard matrix product with `f64` accumulation.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{:?} · {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for r in 0..a.rows {
        let dst = &mut out.data[r * b.cols..(r + 1) * b.cols];
        for (k, &aik) in a.row(r).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (d, &bkj) in dst.iter_mut().zip(b.row(k)) {
                *d += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Thin singular value decomposition `a = u · diag(sigma) · vt`.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    /// `m × k` with orthonormal columns, `k = min(m, n)`.
    pub u: Matrix,
    /// Non-negative, descending.
    pub sigma: Vec<f64>,
    /// `k × n` with orthonormal rows.
    pub vt: Matrix,
}

impl SvdFactors {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for r in 0..us.rows {
            for (c, s) in self.sigma.iter().enumerate() {
                us[(r, c)] *= s;
            }
        }
        matmul(&us, &self.vt).expect("consistent factors")
    }

    /// Number of singular values above `rel_tol · sigma_max`.
    pub fn rank(&self, rel_tol: f64) -> usize {
        let cutoff = rel_tol * self.sigma.first().copied().unwrap_or(0.0);
        self.sigma.iter().filter(|&&s| s > cutoff && s > 0.0).count()
    }
}

/// Thin SVD by one-sided Jacobi rotations.
///
/// Wide inputs are handled by factoring the transpose.
pub fn svd(a: &Matrix) -> Result<SvdFactors> {
    if !a.is_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }
    if a.rows < a.cols {
        let t = svd_tall(&a.transpose())?;
        return Ok(SvdFactors {
            u: t.vt.transpose(),
            sigma: t.sigma,
            vt: t.u.transpose(),
        });
    }
    svd_tall(a)
}

fn svd_tall(a: &Matrix) -> Result<SvdFactors> {
    let (m, n) = a.shape();
    // Work column-major: cols[j] is column j of the evolving A·V.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let eps = f64::EPSILON;
    // columns below this squared norm are numerically zero
    let negligible = {
        let f = eps * a.frobenius_norm();
        f * f
    };
    let mut converged = n < 2;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for i in 0..m {
                        alpha += cp[i] * cp[i];
                        beta += cq[i] * cq[i];
                        gamma += cp[i] * cq[i];
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || alpha <= negligible || beta <= negligible || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::Numerical {
            context: "svd".into(),
            detail: format!("one-sided Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps"),
        });
    }

    let mut order: Vec<(f64, usize)> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| (c.iter().map(|x| x * x).sum::<f64>().sqrt(), j))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let sigma_max = order.first().map_or(0.0, |o| o.0);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut vt = Matrix::zeros(n, n);
    for (k, &(s, j)) in order.iter().enumerate() {
        // Columns at round-off level carry no direction worth keeping;
        // they are completed to an orthonormal basis below.
        let negligible = s == 0.0 || s <= sigma_max * eps * (m.max(n) as f64);
        if negligible {
            u_cols.push(Vec::new());
        } else {
            u_cols.push(cols[j].iter().map(|x| x / s).collect());
        }
        sigma.push(s);
        for i in 0..n {
            vt[(k, i)] = v[j][i];
        }
    }
    complete_orthonormal(&mut u_cols, m);

    let mut u = Matrix::zeros(m, n);
    for (k, col) in u_cols.iter().enumerate() {
        for i in 0..m {
            u[(i, k)] = col[i];
        }
    }
    Ok(SvdFactors { u, sigma, vt })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (xp, xq) in cp.iter_mut().zip(cq.iter_mut()) {
        let a = *xp;
        let b = *xq;
        *xp = c * a - s * b;
        *xq = s * a + c * b;
    }
}

/// Fills empty slots with unit vectors orthogonal to everything else,
/// re-orthogonalizing the existing ones against round-off as it goes.
fn complete_orthonormal(cols: &mut [Vec<f64>], m: usize) {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for col in cols.iter_mut() {
        if col.is_empty() {
            continue;
        }
        orthogonalize(col, &basis);
        basis.push(col.clone());
    }
    let mut candidate = 0;
    for col in cols.iter_mut() {
        if !col.is_empty() {
            continue;
        }
        loop {
            assert!(candidate < m, "ran out of basis candidates");
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            if orthogonalize(&mut e, &basis) > 1e-6 {
                *col = e.clone();
                basis.push(e);
                break;
            }
        }
    }
}

/// Two-pass Gram–Schmidt; returns the norm before normalization.
fn orthogonalize(x: &mut [f64], basis: &[Vec<f64>]) -> f64 {
    for _ in 0..2 {
        for b in basis {
            let d: f64 = x.iter().zip(b).map(|(a, b)| a * b).sum();
            for (xi, bi) in x.iter_mut().zip(b) {
                *xi -= d * bi;
            }
        }
    }
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for xi in x.iter_mut() {
            *xi /= norm;
        }
    }
    norm
}

/// Moore–Penrose pseudoinverse with relative singular-value truncation:
/// values with `σ ≤ rel_tol · σ_max` are treated as zero.
pub fn pinv(a: &Matrix, rel_tol: f64) -> Result<Matrix> {
    check_rel_tol(rel_tol)?;
    let f = svd(a)?;
    Ok(pinv_from_svd(&f, rel_tol, a.rows(), a.cols()))
}

pub(crate) fn check_rel_tol(rel_tol: f64) -> Result<()> {
    if !(rel_tol > 0.0 && rel_tol < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "pinv relative tolerance must lie in (0, 1), got {rel_tol}"
        )));
    }
    Ok(())
}

fn pinv_from_svd(f: &SvdFactors, rel_tol: f64, rows: usize, cols: usize) -> Matrix {
    let rank = f.rank(rel_tol);
    // V_r · diag(1/σ) · U_rᵀ, accumulated as a sum of rank-one terms.
    let mut out = Matrix::zeros(cols, rows);
    for k in 0..rank {
        let inv = 1.0 / f.sigma[k];
        for i in 0..cols {
            let vik = f.vt[(k, i)] * inv;
            if vik == 0.0 {
                continue;
            }
            let dst = out.row_mut(i);
            for (j, d) in dst.iter_mut().enumerate() {
                *d += vik * f.u[(j, k)];
            }
        }
    }
    out
}

/// Numerical rank at the given relative tolerance.
pub fn rank(a: &Matrix, rel_tol: f64) -> Result<usize> {
    Ok(svd(a)?.rank(rel_tol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_dot() {
        let id = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let b = Matrix::from_rows(&[[3.0, 4.0], [5.0, 6.0]]);
        assert_eq!(matmul(&id, &b).unwrap(), b);
        let r = Matrix::from_rows(&[[1.0, 2.0]]);
        let c = Matrix::from_rows(&[[3.0], [4.0]]);
        assert_eq!(matmul(&r, &c).unwrap(), Matrix::from_rows(&[[11.0]]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 5, 4);
        let b = random(&mut rng, 4, 3);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive(&a, &b)) < 1e-14);
        assert!(a.t_matmul(&a).unwrap().max_abs_diff(&naive(&a.transpose(), &a)) < 1e-14);
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape { .. })));
    }

    #[test]
    fn from_vec_rejects_nan_and_bad_len() {
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::from_vec(2, 2, vec![1.0]).is_err());
    }

    #[test]
    fn svd_of_diagonal_and_zero() {
        let f = svd(&Matrix::diag(&[3.0, 2.0])).unwrap();
        assert_eq!(f.sigma, vec![3.0, 2.0]);
        let f = svd(&Matrix::diag(&[2.0, 3.0])).unwrap();
        assert_eq!(f.sigma, vec![3.0, 2.0]);

        let z = svd(&Matrix::zeros(4, 3)).unwrap();
        assert!(z.sigma.iter().all(|&s| s == 0.0));
        let utu = z.u.t_matmul(&z.u).unwrap();
        assert!(utu.max_abs_diff(&Matrix::identity(3)) < 1e-12);
    }

    #[test]
    fn svd_reconstructs_tall_and_wide() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(m, n) in &[(6, 3), (3, 6), (7, 7), (1, 5), (5, 1)] {
            let a = random(&mut rng, m, n);
            let f = svd(&a).unwrap();
            assert!(f.reconstruct().rel_diff(&a) < 1e-12, "{m}x{n}");
            let k = m.min(n);
            assert!(f.u.t_matmul(&f.u).unwrap().max_abs_diff(&Matrix::identity(k)) < 1e-12);
            let vvt = matmul(&f.vt, &f.vt.transpose()).unwrap();
            assert!(vvt.max_abs_diff(&Matrix::identity(k)) < 1e-12);
            assert!(f.sigma.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn svd_rank_deficient_keeps_orthonormal_u() {
        // rank 1, 4 x 3
        let a = Matrix::from_rows(&[
            [1.0, 2.0, 3.0],
            [2.0, 4.0, 6.0],
            [0.0, 0.0, 0.0],
            [-1.0, -2.0, -3.0],
        ]);
        let f = svd(&a).unwrap();
        assert_eq!(f.rank(1e-12), 1);
        assert!(f.reconstruct().rel_diff(&a) < 1e-10);
        assert!(f.u.t_matmul(&f.u).unwrap().max_abs_diff(&Matrix::identity(3)) < 1e-10);
    }

    #[test]
    fn pinv_small_cases() {
        let p = pinv(&Matrix::diag(&[2.0, 0.0]), DEFAULT_PINV_REL_TOL).unwrap();
        assert!(p.max_abs_diff(&Matrix::diag(&[0.5, 0.0])) < 1e-15);

        let ones = Matrix::from_rows(&[[1.0], [1.0]]);
        let p = pinv(&ones, DEFAULT_PINV_REL_TOL).unwrap();
        assert!(p.max_abs_diff(&Matrix::from_rows(&[[0.5, 0.5]])) < 1e-15);

        let z = pinv(&Matrix::zeros(3, 2), DEFAULT_PINV_REL_TOL).unwrap();
        assert_eq!(z, Matrix::zeros(2, 3));
    }

    #[test]
    fn pinv_rejects_bad_tolerance() {
        assert!(pinv(&Matrix::identity(2), 0.0).is_err());
        assert!(pinv(&Matrix::identity(2), 1.0).is_err());
    }
}
