//! Small dense square matrices: channel mixing, determinant, inverse.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// Row-major n×n matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    n: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Shape(format!(
                "{} values cannot form a {n}x{n} matrix",
                data.len()
            )));
        }
        Ok(Self { n, data })
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m.data[i * n + j] = f(i, j);
            }
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            n: self.n,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn transposed(&self) -> Self {
        Self::from_fn(self.n, |i, j| self.get(j, i))
    }

    /// Applies the matrix to the C×(H·W) view of `x`: out[c] = Σ_d M[c,d]·x[d].
    pub fn mix(&self, x: &FeatureMap) -> FeatureMap {
        assert_eq!(self.n, x.channels(), "mixing matrix does not match channels");
        let (c, h, w) = x.shape();
        let mut out = FeatureMap::zeros(c, h, w);
        for i in 0..c {
            let row = &self.data[i * c..(i + 1) * c];
            let dst = out.plane_mut(i);
            for (d, &coef) in row.iter().enumerate() {
                if coef == 0.0 {
                    continue;
                }
                for (o, &v) in dst.iter_mut().zip(x.plane(d)) {
                    *o += coef * v;
                }
            }
        }
        out
    }

    /// Mᵀ applied to the C×(H·W) view.
    pub fn mix_transposed(&self, x: &FeatureMap) -> FeatureMap {
        self.transposed().mix(x)
    }

    /// LU factorization with partial pivoting. Returns (factors, permutation sign)
    /// or `None` when a pivot vanishes.
    fn lu(&self) -> Option<(Vec<f64>, Vec<usize>, f64)> {
        let n = self.n;
        let mut a = self.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for k in 0..n {
            let p = (k..n)
                .max_by(|&i, &j| a[i * n + k].abs().total_cmp(&a[j * n + k].abs()))
                .unwrap_or(k);
            if a[p * n + k] == 0.0 {
                return None;
            }
            if p != k {
                for j in 0..n {
                    a.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            for i in k + 1..n {
                let factor = a[i * n + k] / a[k * n + k];
                a[i * n + k] = factor;
                for j in k + 1..n {
                    a[i * n + j] -= factor * a[k * n + j];
                }
            }
        }
        Some((a, perm, sign))
    }

    pub fn determinant(&self) -> f64 {
        if self.n == 0 {
            return 1.0;
        }
        match self.lu() {
            None => 0.0,
            Some((a, _, sign)) => (0..self.n).fold(sign, |acc, i| acc * a[i * self.n + i]),
        }
    }

    pub fn inverse(&self) -> Option<Matrix> {
        let n = self.n;
        let (a, perm, _) = self.lu()?;
        let mut inv = Matrix::zeros(n);
        for col in 0..n {
            let mut x: Vec<f64> = (0..n).map(|i| if perm[i] == col { 1.0 } else { 0.0 }).collect();
            for i in 0..n {
                for j in 0..i {
                    x[i] -= a[i * n + j] * x[j];
                }
            }
            for i in (0..n).rev() {
                for j in i + 1..n {
                    x[i] -= a[i * n + j] * x[j];
                }
                x[i] /= a[i * n + i];
            }
            for i in 0..n {
                inv.data[i * n + col] = x[i];
            }
        }
        Some(inv)
    }

    /// ∂det(M)/∂M = det(M)·M⁻ᵀ. Falls back to explicit cofactors when M is singular.
    pub fn determinant_gradient(&self) -> Matrix {
        let det = self.determinant();
        if det != 0.0 {
            if let Some(inv) = self.inverse() {
                return inv.transposed().scaled(det);
            }
        }
        Matrix::from_fn(self.n, |i, j| {
            let minor = self.minor(i, j);
            let s = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            s * minor.determinant()
        })
    }

    fn minor(&self, row: usize, col: usize) -> Matrix {
        let n = self.n;
        let mut data = Vec::with_capacity((n - 1) * (n - 1));
        for i in (0..n).filter(|&i| i != row) {
            for j in (0..n).filter(|&j| j != col) {
                data.push(self.get(i, j));
            }
        }
        Matrix { n: n - 1, data }
    }
}
