//! Tiny dense real linear algebra for the fitters and the optimizer.
//!
//! Systems here never exceed ~10 unknowns, so plain row-major `Vec`s with
//! partial pivoting and Householder QR are all that is needed.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows);
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.cols, v.len());
        (0..self.rows)
            .map(|i| (0..self.cols).fold(T::zero(), |acc, j| acc + self[(i, j)] * v[j]))
            .collect()
    }
}

impl<T> std::ops::Index<(usize, usize)> for Mat<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Mat<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// Solves `a x = b` for square `a` by Gaussian elimination with partial
/// pivoting.
pub fn solve<T: Real>(a: &Mat<T>, b: &[T]) -> Result<Vec<T>> {
    let n = a.rows;
    if a.cols != n || b.len() != n {
        return Err(Error::invalid("solve: dimension mismatch"));
    }
    let mut m = a.clone();
    let mut x = b.to_vec();
    let scale = m
        .data
        .iter()
        .fold(T::zero(), |acc, v| acc.max(v.abs()))
        .max(T::min_positive_value());
    let tiny = scale * T::eps_times(16.0 * n as f64);

    for col in 0..n {
        let (piv, pmax) =
            (col..n)
                .map(|r| (r, m[(r, col)].abs()))
                .fold(
                    (col, T::zero()),
                    |best, cur| if cur.1 > best.1 { cur } else { best },
                );
        if pmax <= tiny {
            return Err(Error::invalid("solve: singular matrix"));
        }
        if piv != col {
            for j in 0..n {
                m.data.swap(col * n + j, piv * n + j);
            }
            x.swap(col, piv);
        }
        let d = m[(col, col)];
        for r in (col + 1)..n {
            let f = m[(r, col)] / d;
            if f == T::zero() {
                continue;
            }
            for j in col..n {
                let v = m[(col, j)];
                m[(r, j)] -= f * v;
            }
            let xc = x[col];
            x[r] -= f * xc;
        }
    }
    for col in (0..n).rev() {
        let mut s = x[col];
        for j in (col + 1)..n {
            s -= m[(col, j)] * x[j];
        }
        x[col] = s / m[(col, col)];
    }
    Ok(x)
}

/// Inverse of a small square matrix.
pub fn inverse<T: Real>(a: &Mat<T>) -> Result<Mat<T>> {
    let n = a.rows;
    let mut inv = Mat::zeros(n, n);
    for j in 0..n {
        let mut e = vec![T::zero(); n];
        e[j] = T::one();
        let col = solve(a, &e)?;
        for i in 0..n {
            inv[(i, j)] = col[i];
        }
    }
    Ok(inv)
}

/// Least-squares solution of the overdetermined system `a x ≈ b` using
/// Householder QR. Errors if `a` is numerically rank deficient.
pub fn lstsq<T: Real>(a: &Mat<T>, b: &[T]) -> Result<Vec<T>> {
    let (m, n) = (a.rows, a.cols);
    if b.len() != m {
        return Err(Error::invalid("lstsq: rhs length mismatch"));
    }
    if m < n {
        return Err(Error::invalid("lstsq: fewer equations than unknowns"));
    }
    let mut r = a.clone();
    let mut y = b.to_vec();
    let norm_a = r
        .data
        .iter()
        .fold(T::zero(), |acc, v| acc + *v * *v)
        .sqrt()
        .max(T::min_positive_value());

    for k in 0..n {
        let mut alpha = T::zero();
        for i in k..m {
            alpha += r[(i, k)] * r[(i, k)];
        }
        alpha = alpha.sqrt();
        if alpha <= norm_a * T::eps_times(64.0 * m.max(n) as f64) {
            return Err(Error::invalid("lstsq: rank-deficient design matrix"));
        }
        if r[(k, k)] > T::zero() {
            alpha = -alpha;
        }
        // v = x - alpha e1
        let mut v: Vec<T> = (k..m).map(|i| r[(i, k)]).collect();
        v[0] -= alpha;
        let vnorm2 = v.iter().fold(T::zero(), |acc, x| acc + *x * *x);
        if vnorm2 == T::zero() {
            continue;
        }
        let two = T::lit(2.0);
        for j in k..n {
            let dot = (k..m).fold(T::zero(), |acc, i| acc + v[i - k] * r[(i, j)]);
            let f = two * dot / vnorm2;
            for i in k..m {
                r[(i, j)] -= f * v[i - k];
            }
        }
        let dot = (k..m).fold(T::zero(), |acc, i| acc + v[i - k] * y[i]);
        let f = two * dot / vnorm2;
        for i in k..m {
            y[i] -= f * v[i - k];
        }
    }
    let mut x = vec![T::zero(); n];
    for k in (0..n).rev() {
        let mut s = y[k];
        for j in (k + 1)..n {
            s -= r[(k, j)] * x[j];
        }
        x[k] = s / r[(k, k)];
    }
    Ok(x)
}
