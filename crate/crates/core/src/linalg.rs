//! Minimal dense containers: 3-vectors and row-major matrices.
//!
//! The shapes in this crate are small and fixed (3-wide spatial axis,
//! channel-count matrices), so hand-rolled storage beats a general tensor
//! library both in clarity and in inner-loop speed.

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

/// A spatial 3-vector. Stored as a plain array so feature maps stay contiguous.
pub type Vec3<R> = [R; 3];

#[inline]
pub fn dot3<R: Real>(a: &Vec3<R>, b: &Vec3<R>) -> R {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm3<R: Real>(a: &Vec3<R>) -> R {
    dot3(a, a).sqrt()
}

#[inline]
pub fn sub3<R: Real>(a: &Vec3<R>, b: &Vec3<R>) -> Vec3<R> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add3<R: Real>(a: &Vec3<R>, b: &Vec3<R>) -> Vec3<R> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale3<R: Real>(a: &Vec3<R>, s: R) -> Vec3<R> {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn axpy3<R: Real>(out: &mut Vec3<R>, s: R, a: &Vec3<R>) {
    out[0] += s * a[0];
    out[1] += s * a[1];
    out[2] += s * a[2];
}

#[inline]
pub fn cross3<R: Real>(a: &Vec3<R>, b: &Vec3<R>) -> Vec3<R> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn dist3_sq<R: Real>(a: &Vec3<R>, b: &Vec3<R>) -> R {
    let d = sub3(a, b);
    dot3(&d, &d)
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<R> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<R>,
}

impl<R: Real> Matrix<R> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![R::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = R::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<R>]) -> Self {
        let ncols = rows.first().map_or(0, Vec::len);
        debug_assert!(rows.iter().all(|r| r.len() == ncols));
        Matrix {
            rows: rows.len(),
            cols: ncols,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> R {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: R) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[R] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [R] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// y = M x
    pub fn matvec(&self, x: &[R]) -> Vec<R> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| {
                self.row(r)
                    .iter()
                    .zip(x)
                    .fold(R::zero(), |acc, (&m, &v)| acc + m * v)
            })
            .collect()
    }

    /// y = Mᵀ x
    pub fn matvec_t(&self, x: &[R]) -> Vec<R> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![R::zero(); self.cols];
        for r in 0..self.rows {
            let xr = x[r];
            for (o, &m) in out.iter_mut().zip(self.row(r)) {
                *o += xr * m;
            }
        }
        out
    }
}
