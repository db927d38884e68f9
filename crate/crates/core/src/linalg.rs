//! Dense row-major matrices and the spectral routines built on them.
//!
//! Products and reductions loop in a fixed order so results are bitwise
//! reproducible. Decompositions go through nalgebra.

use std::ops::{Index, IndexMut};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let n = d.len();
        let mut m = Mat::zeros(n, n);
        for (i, &v) in d.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch { expected: rows * cols, got: data.len() });
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        if r == 0 {
            return Err(Error::InvalidInput("matrix needs at least one row".into()));
        }
        let c = rows[0].len();
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::DimensionMismatch { expected: c, got: row.len() });
            }
            data.extend_from_slice(row);
        }
        Ok(Mat { rows: r, cols: c, data })
    }

    pub fn scalar(v: f64) -> Self {
        Mat { rows: 1, cols: 1, data: vec![v] }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// Matrix product. Panics on inner-dimension mismatch.
    pub fn matmul(&self, other: &Mat) -> Mat {
        let mut out = Mat::zeros(self.rows, other.cols);
        matmul_into(self, other, &mut out);
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.rows];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x) {
                acc += a * b;
            }
            y[i] = acc;
        }
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Mat { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Mat { rows: self.rows, cols: self.cols, data }
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Mat) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute deviation from symmetry.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// Block-diagonal embedding `[[self, 0], [0, other]]`.
    pub fn block_diag(&self, other: &Mat) -> Mat {
        let mut out = Mat::zeros(self.rows + other.rows, self.cols + other.cols);
        out.set_block(0, 0, self);
        out.set_block(self.rows, self.cols, other);
        out
    }

    pub fn set_block(&mut self, r0: usize, c0: usize, b: &Mat) {
        for i in 0..b.rows {
            for j in 0..b.cols {
                self[(r0 + i, c0 + j)] = b[(i, j)];
            }
        }
    }

    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Mat {
        let mut out = Mat::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                out[(i, j)] = self[(r0 + i, c0 + j)];
            }
        }
        out
    }

    pub fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn from_nalgebra(m: &DMatrix<f64>) -> Mat {
        let mut out = Mat::zeros(m.nrows(), m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out[(i, j)] = m[(i, j)];
            }
        }
        out
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// `out = a * b`, overwriting `out`. No allocation.
pub fn matmul_into(a: &Mat, b: &Mat, out: &mut Mat) {
    assert_eq!(a.cols, b.rows, "matmul inner dimension mismatch");
    assert_eq!((out.rows, out.cols), (a.rows, b.cols));
    let (n, k, m) = (a.rows, a.cols, b.cols);
    out.data.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..n {
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            let orow = &mut out.data[i * m..(i + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

pub fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn require_finite(m: &Mat) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput("matrix has non-finite entries".into()))
    }
}

fn require_square(m: &Mat) -> Result<()> {
    if m.is_square() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("expected square matrix, got {}x{}", m.rows, m.cols)))
    }
}

fn singular_values(m: &Mat) -> Vec<f64> {
    m.to_nalgebra().singular_values().iter().copied().collect()
}

/// Largest singular value.
pub fn spectral_norm(m: &Mat) -> Result<f64> {
    require_finite(m)?;
    if m.rows == 1 || m.cols == 1 {
        return Ok(m.frobenius());
    }
    Ok(singular_values(m).into_iter().fold(0.0, f64::max))
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &Mat) -> Result<Vec<f64>> {
    require_square(m)?;
    require_finite(m)?;
    let mut ev: Vec<f64> = m.to_nalgebra().symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    Ok(ev)
}

/// Logarithmic norm for the spectral norm: the top eigenvalue of the symmetric part.
pub fn log_norm(m: &Mat) -> Result<f64> {
    require_square(m)?;
    let sym = m.add(&m.transpose()).scale(0.5);
    Ok(*sym_eigenvalues(&sym)?.last().unwrap())
}

/// Matrix exponential (Pade scaling and squaring, via nalgebra).
pub fn matrix_exp(m: &Mat) -> Result<Mat> {
    require_square(m)?;
    require_finite(m)?;
    if m.rows == 1 {
        return Ok(Mat::scalar(m.data[0].exp()));
    }
    Ok(Mat::from_nalgebra(&m.to_nalgebra().exp()))
}

/// Symmetric PSD square root. Eigenvalues in `[-tol, 0)` are clamped to zero.
pub fn sqrt_psd(m: &Mat, tol: f64) -> Result<Mat> {
    require_square(m)?;
    require_finite(m)?;
    let asym = m.asymmetry();
    if asym > tol {
        return Err(Error::InvalidInput(format!("matrix asymmetric by {asym:.3e} > tol {tol:.3e}")));
    }
    let n = m.rows;
    if n == 1 {
        let v = m.data[0];
        if v < -tol {
            return Err(Error::NotPsd(v));
        }
        return Ok(Mat::scalar(v.max(0.0).sqrt()));
    }
    let sym = m.add(&m.transpose()).scale(0.5);
    let eig = sym.to_nalgebra().symmetric_eigen();
    let lo = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if lo < -tol {
        return Err(Error::NotPsd(lo));
    }
    let q = &eig.eigenvectors;
    let mut out = Mat::zeros(n, n);
    for k in 0..n {
        let s = eig.eigenvalues[k].max(0.0).sqrt();
        if s == 0.0 {
            continue;
        }
        for i in 0..n {
            let qik = q[(i, k)] * s;
            for j in 0..n {
                out[(i, j)] += qik * q[(j, k)];
            }
        }
    }
    // Remove rounding asymmetry.
    let out_t = out.transpose();
    Ok(out.add(&out_t).scale(0.5))
}

/// Ratio of extreme singular values.
pub fn condition_number(m: &Mat) -> Result<f64> {
    require_square(m)?;
    require_finite(m)?;
    let sv = singular_values(m);
    let hi = sv.iter().copied().fold(0.0, f64::max);
    let lo = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if hi == 0.0 || lo < 1e-14 * hi {
        return Err(Error::Singular(if hi == 0.0 { 0.0 } else { lo / hi }));
    }
    Ok(hi / lo)
}

/// Dense inverse via LU.
pub fn inverse(m: &Mat) -> Result<Mat> {
    require_square(m)?;
    m.to_nalgebra()
        .try_inverse()
        .map(|inv| Mat::from_nalgebra(&inv))
        .ok_or(Error::Singular(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lcg_mat(n: usize, m: usize, seed: u64) -> Mat {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut data = Vec::with_capacity(n * m);
        for _ in 0..n * m {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            data.push(((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0);
        }
        Mat::from_vec(n, m, data).unwrap()
    }

    /// Power iteration on MᵀM, run to convergence. Independent of nalgebra.
    fn power_norm(m: &Mat) -> f64 {
        let mtm = m.transpose().matmul(m);
        let mut v = vec![1.0; m.cols()];
        let mut lam = 0.0;
        for _ in 0..20000 {
            let w = mtm.matvec(&v);
            let nw = norm2(&w);
            v = w.iter().map(|x| x / nw).collect();
            lam = nw;
        }
        lam.sqrt()
    }

    #[test]
    fn spectral_norm_examples() {
        assert!((spectral_norm(&Mat::identity(3)).unwrap() - 1.0).abs() < 1e-14);
        assert!((spectral_norm(&Mat::from_diag(&[2.0, -5.0])).unwrap() - 5.0).abs() < 1e-14);
        let m = lcg_mat(8, 8, 7);
        let a = spectral_norm(&m).unwrap();
        let b = power_norm(&m);
        assert!((a - b).abs() <= 1e-10 * b, "{a} vs {b}");
    }

    #[test]
    fn spectral_norm_rejects_nan() {
        let mut m = Mat::identity(2);
        m[(0, 1)] = f64::NAN;
        assert!(matches!(spectral_norm(&m), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn log_norm_examples() {
        assert!((log_norm(&Mat::identity(3).scale(-1.0)).unwrap() + 1.0).abs() < 1e-14);
        let nil = Mat::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert!((log_norm(&nil).unwrap() - 0.5).abs() < 1e-14);
        assert!(log_norm(&Mat::zeros(2, 3)).is_err());
        let a = lcg_mat(5, 5, 3);
        let h = 1e-7;
        let ih = Mat::identity(5).add(&a.scale(h));
        let fd = (spectral_norm(&ih).unwrap() - 1.0) / h;
        assert!((fd - log_norm(&a).unwrap()).abs() < 1e-5);
    }

    #[test]
    fn matrix_exp_examples() {
        let z = matrix_exp(&Mat::zeros(3, 3)).unwrap();
        assert!(z.sub(&Mat::identity(3)).max_abs() < 1e-15);
        let d = matrix_exp(&Mat::from_diag(&[0.5, -1.0, 2.0])).unwrap();
        let want = Mat::from_diag(&[0.5f64.exp(), (-1.0f64).exp(), 2.0f64.exp()]);
        assert!(d.sub(&want).max_abs() < 1e-13);
        let nil = Mat::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let e = matrix_exp(&nil).unwrap();
        let want = Mat::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        assert!(e.sub(&want).max_abs() < 1e-15);
    }

    #[test]
    fn sqrt_psd_examples() {
        let i = sqrt_psd(&Mat::identity(3), 1e-12).unwrap();
        assert!(i.sub(&Mat::identity(3)).max_abs() < 1e-14);
        let s = sqrt_psd(&Mat::from_diag(&[4.0, 9.0]), 1e-12).unwrap();
        assert!(s.sub(&Mat::from_diag(&[2.0, 3.0])).max_abs() < 1e-14);
        let g = lcg_mat(6, 6, 11);
        let spd = g.matmul(&g.transpose()).add(&Mat::identity(6).scale(0.1));
        let r = sqrt_psd(&spd, 1e-12).unwrap();
        assert!(r.matmul(&r).sub(&spd).max_abs() < 1e-10);
    }

    #[test]
    fn sqrt_psd_errors() {
        assert!(matches!(sqrt_psd(&Mat::from_diag(&[1.0, -1.0]), 1e-12), Err(Error::NotPsd(_))));
        let asym = Mat::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(sqrt_psd(&asym, 1e-12), Err(Error::InvalidInput(_))));
        // Small negative eigenvalue within tolerance is clamped.
        let s = sqrt_psd(&Mat::from_diag(&[1.0, -1e-14]), 1e-12).unwrap();
        assert_eq!(s[(1, 1)], 0.0);
    }

    #[test]
    fn condition_number_examples() {
        assert!((condition_number(&Mat::identity(4)).unwrap() - 1.0).abs() < 1e-14);
        assert!((condition_number(&Mat::from_diag(&[10.0, 1.0])).unwrap() - 10.0).abs() < 1e-12);
        assert!(matches!(
            condition_number(&Mat::from_diag(&[1.0, 0.0])),
            Err(Error::Singular(_))
        ));
    }

    fn arb_mat(n: usize) -> impl Strategy<Value = Mat> {
        proptest::collection::vec(-3.0f64..3.0, n * n)
            .prop_map(move |d| Mat::from_vec(n, n, d).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn norm_is_submultiplicative(a in arb_mat(4), b in arb_mat(4)) {
            let ab = spectral_norm(&a.matmul(&b)).unwrap();
            let bound = spectral_norm(&a).unwrap() * spectral_norm(&b).unwrap();
            prop_assert!(ab <= bound * (1.0 + 1e-12) + 1e-12);
        }

        #[test]
        fn log_norm_within_norm(a in arb_mat(4)) {
            let n = spectral_norm(&a).unwrap();
            let mu = log_norm(&a).unwrap();
            prop_assert!(-n - 1e-12 <= mu && mu <= n + 1e-12);
        }

        #[test]
        fn sqrt_psd_roundtrip(g in arb_mat(4)) {
            let spd = g.matmul(&g.transpose());
            let s = sqrt_psd(&spd, 1e-9).unwrap();
            prop_assert!(s.asymmetry() == 0.0);
            prop_assert!(sym_eigenvalues(&s).unwrap()[0] >= -1e-9);
            prop_assert!(s.matmul(&s).sub(&spd).max_abs() <= 1e-8);
        }

        #[test]
        fn exp_inverse_pair(g in arb_mat(3)) {
            let nrm = spectral_norm(&g).unwrap();
            let a = if nrm > 5.0 { g.scale(5.0 / nrm) } else { g };
            let p = matrix_exp(&a).unwrap().matmul(&matrix_exp(&a.scale(-1.0)).unwrap());
            prop_assert!(p.sub(&Mat::identity(3)).max_abs() <= 1e-10);
        }
    }
}
