//! Dense complex matrices and the few factorizations the solver needs.

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;

pub const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
pub const ONE: C64 = C64 { re: 1.0, im: 0.0 };
pub const I: C64 = C64 { re: 0.0, im: 1.0 };

/// Row-major dense complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CMat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<C64>,
}

/// `c = alpha * a * b + beta * c` on row-major slices.
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: C64,
    a: &[C64],
    b: &[C64],
    beta: C64,
    c: &mut [C64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    // Complex64 is repr(C) {re, im}, identical in layout to [f64; 2].
    unsafe {
        matrixmultiply::zgemm(
            matrixmultiply::CGemmOption::Standard,
            matrixmultiply::CGemmOption::Standard,
            m,
            k,
            n,
            [alpha.re, alpha.im],
            a.as_ptr() as *const [f64; 2],
            k as isize,
            1,
            b.as_ptr() as *const [f64; 2],
            n as isize,
            1,
            [beta.re, beta.im],
            c.as_mut_ptr() as *mut [f64; 2],
            n as isize,
            1,
        );
    }
}

impl CMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CMat { rows, cols, data: vec![ZERO; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = ONE;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        CMat { rows, cols, data }
    }

    pub fn from_diag(d: &[C64]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, v) in d.iter().enumerate() {
            m.data[i * d.len() + i] = *v;
        }
        m
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> C64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut C64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn matmul(&self, other: &CMat) -> CMat {
        assert_eq!(self.cols, other.rows, "matmul shape");
        let mut out = CMat::zeros(self.rows, other.cols);
        gemm(self.rows, self.cols, other.cols, ONE, &self.data, &other.data, ZERO, &mut out.data);
        out
    }

    pub fn matvec(&self, v: &[C64]) -> Vec<C64> {
        assert_eq!(self.cols, v.len());
        (0..self.rows)
            .map(|r| {
                let row = &self.data[r * self.cols..(r + 1) * self.cols];
                row.iter().zip(v).map(|(a, b)| a * b).sum()
            })
            .collect()
    }

    pub fn add(&self, other: &CMat) -> CMat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        CMat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &CMat) -> CMat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        CMat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn scale(&self, s: C64) -> CMat {
        CMat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|a| a * s).collect() }
    }

    pub fn transpose(&self) -> CMat {
        CMat::from_fn(self.cols, self.rows, |r, c| self.at(c, r))
    }

    pub fn adjoint(&self) -> CMat {
        CMat::from_fn(self.cols, self.rows, |r, c| self.at(c, r).conj())
    }

    pub fn conj(&self) -> CMat {
        CMat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|a| a.conj()).collect() }
    }

    pub fn norm_fro(&self) -> f64 {
        self.data.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn norm_max(&self) -> f64 {
        self.data.iter().fold(0.0, |m, a| m.max(a.norm()))
    }

    pub fn to_na(&self) -> DMatrix<C64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn from_na(m: &DMatrix<C64>) -> CMat {
        CMat::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)])
    }

    /// Largest singular value.
    pub fn spectral_norm(&self) -> f64 {
        spectral_norm_slice(self.rows, self.cols, &self.data)
    }

    pub fn inverse(&self) -> Option<CMat> {
        assert_eq!(self.rows, self.cols);
        self.to_na().try_inverse().map(|m| CMat::from_na(&m))
    }

    /// 2-norm condition number via singular values.
    pub fn condition_number(&self) -> f64 {
        let sv = self.to_na().singular_values();
        let max = sv.iter().cloned().fold(0.0, f64::max);
        let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
        if min == 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }

    /// Solve `self * x = b` by LU.
    pub fn solve(&self, b: &[C64]) -> Option<Vec<C64>> {
        let lu = self.to_na().lu();
        let rhs = nalgebra::DVector::from_column_slice(b);
        lu.solve(&rhs).map(|x| x.iter().cloned().collect())
    }
}

/// Matrix exponential by scaling and squaring with a Taylor kernel.
pub fn expm(a: &CMat) -> CMat {
    assert_eq!(a.rows, a.cols);
    let n = a.rows;
    let nrm = a.data.iter().map(|v| v.norm()).fold(0.0, f64::max) * n as f64;
    let mut sq = 0u32;
    let mut scale = 1.0;
    while nrm * scale > 0.5 {
        scale *= 0.5;
        sq += 1;
    }
    let x = a.scale(C64::new(scale, 0.0));
    let mut out = CMat::identity(n);
    let mut term = CMat::identity(n);
    for k in 1..=18 {
        term = term.matmul(&x).scale(C64::new(1.0 / k as f64, 0.0));
        out = out.add(&term);
        if term.norm_max() < 1e-18 * out.norm_max() {
            break;
        }
    }
    for _ in 0..sq {
        out = out.matmul(&out);
    }
    out
}

pub fn spectral_norm_slice(rows: usize, cols: usize, data: &[C64]) -> f64 {
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    if rows == 1 || cols == 1 {
        return data.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
    }
    let m = DMatrix::from_row_slice(rows, cols, data);
    m.singular_values().iter().cloned().fold(0.0, f64::max)
}

/// Eigen-decomposition of a Hermitian 2x2 matrix `[[a, b], [conj b, d]]`.
/// Returns ascending eigenvalues and the unitary whose columns are eigenvectors.
pub fn herm2_eig(m: [[C64; 2]; 2]) -> ([f64; 2], [[C64; 2]; 2]) {
    let a = m[0][0].re;
    let d = m[1][1].re;
    let b = 0.5 * (m[0][1] + m[1][0].conj());
    let half = 0.5 * (a - d);
    let r = (half * half + b.norm_sqr()).sqrt();
    let mean = 0.5 * (a + d);
    let lo = mean - r;
    let hi = mean + r;
    if b.norm() <= 1e-300 {
        if a <= d {
            return ([a, d], [[ONE, ZERO], [ZERO, ONE]]);
        }
        return ([d, a], [[ZERO, ONE], [ONE, ZERO]]);
    }
    // Eigenvector for the lower eigenvalue, stable choice per branch; the
    // upper one is its orthogonal complement so the basis stays unitary when
    // the eigenvalues nearly coincide.
    let v1 = [b, C64::new(lo - a, 0.0)];
    let v2 = [C64::new(lo - d, 0.0), b.conj()];
    let n1 = (v1[0].norm_sqr() + v1[1].norm_sqr()).sqrt();
    let n2 = (v2[0].norm_sqr() + v2[1].norm_sqr()).sqrt();
    let u = if n1 >= n2 { [v1[0] / n1, v1[1] / n1] } else { [v2[0] / n2, v2[1] / n2] };
    let v = [-u[1].conj(), u[0].conj()];
    ([lo, hi], [[u[0], v[0]], [u[1], v[1]]])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let a = CMat::from_fn(3, 4, |r, c| C64::new(r as f64 + 0.5, c as f64 - 1.0));
        let b = CMat::from_fn(4, 2, |r, c| C64::new((r * c) as f64, 1.0 + r as f64));
        let c = a.matmul(&b);
        for r in 0..3 {
            for col in 0..2 {
                let want: C64 = (0..4).map(|k| a.at(r, k) * b.at(k, col)).sum();
                assert!((c.at(r, col) - want).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn herm2_reconstructs() {
        let m = [[C64::new(2.0, 0.0), C64::new(0.3, -0.7)], [C64::new(0.3, 0.7), C64::new(-1.0, 0.0)]];
        let (lam, u) = herm2_eig(m);
        assert!(lam[0] <= lam[1]);
        for r in 0..2 {
            for c in 0..2 {
                let rec: C64 = (0..2).map(|k| u[r][k] * lam[k] * u[c][k].conj()).sum();
                assert!((rec - m[r][c]).norm() < 1e-13, "{rec} vs {}", m[r][c]);
            }
        }
    }

    #[test]
    fn herm2_nearly_degenerate_is_unitary() {
        let m = [[C64::new(40.68, 0.0), C64::new(2e-21, -8e-21)], [C64::new(2e-21, 8e-21), C64::new(40.68, 0.0)]];
        let (_, u) = herm2_eig(m);
        let ip = u[0][0].conj() * u[0][1] + u[1][0].conj() * u[1][1];
        assert!(ip.norm() < 1e-15);
        for c in 0..2 {
            assert!(((u[0][c].norm_sqr() + u[1][c].norm_sqr()) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn expm_of_rotation_generator() {
        let t = 0.7;
        let a = CMat::from_fn(2, 2, |r, c| match (r, c) {
            (0, 1) => C64::new(-t, 0.0),
            (1, 0) => C64::new(t, 0.0),
            _ => ZERO,
        });
        let e = expm(&a);
        assert!((e.at(0, 0).re - t.cos()).abs() < 1e-14);
        assert!((e.at(1, 0).re - t.sin()).abs() < 1e-14);
        let big = expm(&a.scale(C64::new(20.0, 0.0)));
        assert!((big.at(0, 0).re - (20.0 * t).cos()).abs() < 1e-12);
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        let m = CMat::from_diag(&[C64::new(1.0, 0.0), C64::new(0.0, -3.0)]);
        assert!((m.spectral_norm() - 3.0).abs() < 1e-12);
    }
}
