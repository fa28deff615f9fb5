//! Dense row-major linear algebra in `f64`.
//!
//! Only what the rest of the crate needs: Cholesky factorization of SPD
//! matrices, SPD solves with log-determinants, and a brute-force dominant
//! eigenpair routine used as a reference in tests.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ridge added to near-singular SPD matrices before factorization.
pub const SPD_JITTER: f64 = 1e-6;

const SYMMETRY_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-12;

/// A dense real vector with finite entries.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vector"));
        }
        Ok(Self { data })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            data: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.data
    }

    pub fn norm(&self) -> f64 {
        norm2(&self.data)
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.data
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.data
    }
}

/// A dense row-major real matrix with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diag(&vec![1.0; n])
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols))
            .map(|i| self[(i, i)])
            .collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::ShapeMismatch(format!(
                "matvec: {}x{} matrix with vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "matmul: {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a != 0.0 {
                    axpy(a, other.row(k), out.row_mut(i));
                }
            }
        }
        Ok(out)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `(A + Aᵀ) / 2`.
    pub fn symmetrized(&self) -> Result<Matrix> {
        self.require_square("symmetrize")?;
        let mut s = self.clone();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let v = 0.5 * (self[(i, j)] + self[(j, i)]);
                s[(i, j)] = v;
                s[(j, i)] = v;
            }
        }
        Ok(s)
    }

    pub fn add_ridge(&mut self, tau: f64) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] += tau;
        }
    }

    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        (0..self.rows)
            .all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= rel_tol * scale))
    }

    fn require_square(&self, op: &str) -> Result<()> {
        if self.is_square() {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{op}: {}x{} matrix is not square",
                self.rows, self.cols
            )))
        }
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm2(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Returns `x / ‖x‖₂`, or `None` when the norm is zero or not finite.
pub fn normalized(x: &[f64]) -> Option<Vec<f64>> {
    let n = norm2(x);
    if n > 0.0 && n.is_finite() {
        Some(x.iter().map(|v| v / n).collect())
    } else {
        None
    }
}

/// Lower-triangular Cholesky factor `L` with `L·Lᵀ = A`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    l: Matrix,
}

impl CholeskyFactor {
    pub fn lower(&self) -> &Matrix {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.rows
    }

    /// Solves `A·x = b` by forward then backward substitution.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim();
        if b.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "solve: rhs of length {} for a {n}x{n} system",
                b.len()
            )));
        }
        let l = &self.l;
        let mut y = b.to_vec();
        for i in 0..n {
            let s = dot(&l.row(i)[..i], &y[..i]);
            y[i] = (y[i] - s) / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l[(k, i)] * y[k];
            }
            y[i] = s / l[(i, i)];
        }
        Ok(y)
    }

    /// `log|A| = 2·Σ log L_ii`.
    pub fn logdet(&self) -> f64 {
        2.0 * self.l.diag().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> Result<Matrix> {
        let n = self.dim();
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = self.solve(&e)?;
            e[j] = 0.0;
            for (i, v) in col.into_iter().enumerate() {
                inv[(i, j)] = v;
            }
        }
        inv.symmetrized()
    }
}

/// Cholesky factorization of a symmetric positive definite matrix.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    cholesky_factor(a).map(|f| f.l)
}

pub fn cholesky_factor(a: &Matrix) -> Result<CholeskyFactor> {
    a.require_square("cholesky")?;
    if !a.is_symmetric(SYMMETRY_TOL) {
        return Err(Error::ShapeMismatch(
            "cholesky: matrix is not symmetric".into(),
        ));
    }
    let n = a.rows;
    let max_diag = a.diag().into_iter().fold(0.0f64, f64::max);
    let threshold = PIVOT_TOL * max_diag;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let s = dot(&l.row(j)[..j], &l.row(j)[..j]);
        let pivot = a[(j, j)] - s;
        if !(pivot > threshold) || !pivot.is_finite() {
            return Err(Error::NotSpd { row: j, pivot });
        }
        let ljj = pivot.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let s = dot(&l.row(i)[..j], &l.row(j)[..j]);
            l[(i, j)] = (a[(i, j)] - s) / ljj;
        }
    }
    Ok(CholeskyFactor { l })
}

/// Symmetrizes `a`, then factors it, adding a growing ridge (starting at
/// `tau`) when the plain factorization fails.
pub fn cholesky_jittered(a: &Matrix, tau: f64) -> Result<CholeskyFactor> {
    let sym = a.symmetrized()?;
    match cholesky_factor(&sym) {
        Ok(f) => Ok(f),
        Err(first) => {
            let mut ridge = tau.max(f64::MIN_POSITIVE);
            for _ in 0..8 {
                let mut m = sym.clone();
                m.add_ridge(ridge);
                if let Ok(f) = cholesky_factor(&m) {
                    return Ok(f);
                }
                ridge *= 10.0;
            }
            Err(first)
        }
    }
}

/// Solves `a·x = b` for SPD `a` and returns `(x, log|a|)`.
pub fn spd_solve_and_logdet(a: &Matrix, b: &[f64]) -> Result<(Vector, f64)> {
    if b.len() != a.rows() {
        return Err(Error::ShapeMismatch(format!(
            "spd_solve: rhs of length {} for {} rows",
            b.len(),
            a.rows()
        )));
    }
    let f = cholesky_factor(a)?;
    let x = f.solve(b)?;
    Ok((Vector::new(x)?, f.logdet()))
}

const ORACLE_MAX_STEPS: usize = 500_000;

/// Dominant eigenpair of a symmetric matrix by exhaustive power iteration.
///
/// Slow on purpose; it is a reference for the cheap one-step estimates used
/// during training. Runs until the direction (compared up to sign) changes by
/// less than `1e-14` between steps, for at most 500 000 steps.
pub fn dominant_eig_oracle(a: &Matrix) -> Result<(f64, Vector)> {
    a.require_square("dominant_eig_oracle")?;
    let n = a.rows;
    if n == 0 {
        return Err(Error::ShapeMismatch("empty matrix".into()));
    }
    let start: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * (i as f64).sin()).collect();
    let mut v = normalized(&start).expect("nonzero start");
    let mut last_change = f64::INFINITY;
    for _ in 0..ORACLE_MAX_STEPS {
        let av = a.matvec(&v)?;
        let Some(next) = normalized(&av) else {
            // A·v = 0: v lies in the null space, eigenvalue 0 is dominant only
            // for the zero matrix.
            return Ok((0.0, Vector::new(v)?));
        };
        let same: f64 = next.iter().zip(&v).map(|(x, y)| (x - y).powi(2)).sum();
        let flip: f64 = next.iter().zip(&v).map(|(x, y)| (x + y).powi(2)).sum();
        last_change = same.min(flip).sqrt();
        // Keep a consistent sign so a negative eigenvalue does not oscillate.
        v = if flip < same {
            next.iter().map(|x| -x).collect()
        } else {
            next
        };
        if last_change < 1e-14 {
            break;
        }
    }
    if last_change > 1e-10 {
        return Err(Error::NoConvergence(ORACLE_MAX_STEPS));
    }
    let av = a.matvec(&v)?;
    let lambda = dot(&v, &av);
    Ok((lambda, Vector::new(v)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let b = Matrix::new(
            n,
            n,
            (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let mut a = b.matmul(&b.transpose()).unwrap();
        a.add_ridge(0.5);
        a
    }

    #[test]
    fn cholesky_identity_is_identity() {
        assert_eq!(cholesky(&Matrix::identity(3)).unwrap(), Matrix::identity(3));
    }

    #[test]
    fn cholesky_reconstructs_input() {
        let a = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let l = cholesky(&a).unwrap();
        let llt = l.matmul(&l.transpose()).unwrap();
        for (x, y) in llt.as_slice().iter().zip(a.as_slice()) {
            assert!((x - y).abs() <= 1e-12);
        }
        assert!(l.diag().iter().all(|&d| d > 0.0));
        assert_eq!(l[(0, 1)], 0.0);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(cholesky(&a), Err(Error::NotSpd { .. })));
    }

    #[test]
    fn cholesky_rejects_asymmetric() {
        let a = Matrix::from_rows(&[vec![2.0, 1.0], vec![0.0, 2.0]]).unwrap();
        assert!(matches!(cholesky(&a), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn jitter_rescues_rank_deficient_covariance() {
        let a = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(cholesky(&a).is_err());
        let f = cholesky_jittered(&a, SPD_JITTER).unwrap();
        assert!(f.logdet().is_finite());
    }

    #[test]
    fn solve_identity_and_diagonal() {
        let (x, ld) = spd_solve_and_logdet(&Matrix::identity(2), &[3.0, 4.0]).unwrap();
        assert_eq!(x.as_slice(), &[3.0, 4.0]);
        assert_eq!(ld, 0.0);

        let (x, ld) = spd_solve_and_logdet(&Matrix::from_diag(&[2.0, 8.0]), &[1.0, 1.0]).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-15 && (x[1] - 0.125).abs() < 1e-15);
        assert!((ld - 16f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn solve_residual_random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = random_spd(5, &mut rng);
            let b: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (x, _) = spd_solve_and_logdet(&a, &b).unwrap();
            let ax = a.matvec(&x).unwrap();
            let r: Vec<f64> = ax.iter().zip(&b).map(|(p, q)| p - q).collect();
            assert!(norm2(&r) <= 1e-10 * norm2(&b));
        }
    }

    #[test]
    fn cholesky_reconstruction_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 1..9 {
            let a = random_spd(n, &mut rng);
            let l = cholesky(&a).unwrap();
            let llt = l.matmul(&l.transpose()).unwrap();
            let scale = a.max_abs();
            for (x, y) in llt.as_slice().iter().zip(a.as_slice()) {
                assert!((x - y).abs() <= 1e-10 * scale);
            }
        }
    }

    #[test]
    fn oracle_diagonal_and_analytic_cases() {
        let (l, v) = dominant_eig_oracle(&Matrix::from_diag(&[3.0, 1.0, 0.5])).unwrap();
        assert!((l - 3.0).abs() < 1e-12);
        assert!((v[0].abs() - 1.0).abs() < 1e-12);

        let a = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let (l, v) = dominant_eig_oracle(&a).unwrap();
        assert!((l - 3.0).abs() < 1e-12);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((v[0].abs() - s).abs() < 1e-12 && (v[1].abs() - s).abs() < 1e-12);
        assert!(v[0] * v[1] > 0.0);
    }

    #[test]
    fn oracle_handles_negative_dominant_eigenvalue() {
        let (l, v) = dominant_eig_oracle(&Matrix::from_diag(&[1.0, -4.0])).unwrap();
        assert!((l + 4.0).abs() < 1e-12);
        assert!((v[1].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_residual_random_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10;
        let raw: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = Matrix::new(n, n, raw).unwrap().symmetrized().unwrap();
        let (l, v) = dominant_eig_oracle(&a).unwrap();
        let av = a.matvec(&v).unwrap();
        let r: f64 = av
            .iter()
            .zip(v.iter())
            .map(|(x, y)| (x - l * y).powi(2))
            .sum();
        assert!(r.sqrt() <= 1e-8);
    }

    /// Eigenvalues of a small SPD matrix by repeated oracle calls with
    /// Hotelling deflation.
    fn eigenvalues_by_deflation(a: &Matrix) -> Vec<f64> {
        let n = a.rows();
        let mut m = a.clone();
        let mut out = Vec::new();
        for _ in 0..n {
            let (l, v) = dominant_eig_oracle(&m).unwrap();
            out.push(l);
            for i in 0..n {
                for j in 0..n {
                    m[(i, j)] -= l * v[i] * v[j];
                }
            }
        }
        out
    }

    #[test]
    fn logdet_matches_deflated_eigenvalues() {
        let cases = [
            Matrix::from_rows(&[vec![4.0, 1.0], vec![1.0, 2.0]]).unwrap(),
            Matrix::from_rows(&[
                vec![5.0, 1.0, 0.5],
                vec![1.0, 3.0, 0.2],
                vec![0.5, 0.2, 1.0],
            ])
            .unwrap(),
        ];
        for a in &cases {
            let (_, ld) = spd_solve_and_logdet(a, &vec![1.0; a.rows()]).unwrap();
            let expected: f64 = eigenvalues_by_deflation(a).iter().map(|l| l.ln()).sum();
            assert!((ld - expected).abs() < 1e-8, "{ld} vs {expected}");
        }
    }

    #[test]
    fn vector_rejects_non_finite() {
        assert!(Vector::new(vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::new(1, 2, vec![1.0, f64::INFINITY]).is_err());
        assert!(Matrix::new(2, 2, vec![1.0]).is_err());
    }
}
