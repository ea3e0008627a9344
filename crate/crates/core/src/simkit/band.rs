//! Symmetric banded matrices with an in-place Cholesky factorization.

use crate::error::{Error, Result};

/// Lower band of a symmetric matrix: `data[i * (bw + 1) + k] = A[i][i - k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandMatrix {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, bw: usize) -> Self {
        BandMatrix {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn half_bandwidth(&self) -> usize {
        self.bw
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        if hi - lo > self.bw {
            0.0
        } else {
            self.data[hi * (self.bw + 1) + (hi - lo)]
        }
    }

    /// Adds `v` to `A[i][j]` (and, by symmetry, `A[j][i]`).
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        assert!(hi - lo <= self.bw, "entry ({i},{j}) outside band {}", self.bw);
        self.data[hi * (self.bw + 1) + (hi - lo)] += v;
    }

    /// `self + k·other`, same band layout required.
    pub fn axpy(&self, k: f64, other: &BandMatrix) -> BandMatrix {
        assert_eq!((self.n, self.bw), (other.n, other.bw));
        BandMatrix {
            n: self.n,
            bw: self.bw,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + k * b).collect(),
        }
    }

    /// `y = A·x`
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        let w = self.bw + 1;
        y.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.n {
            let row = &self.data[i * w..(i + 1) * w];
            y[i] += row[0] * x[i];
            for k in 1..w.min(i + 1) {
                let j = i - k;
                y[i] += row[k] * x[j];
                y[j] += row[k] * x[i];
            }
        }
    }

    /// `y = self·x + other·z` in one sweep; both matrices share the band.
    pub fn matvec_pair(&self, other: &BandMatrix, x: &[f64], z: &[f64], y: &mut [f64]) {
        assert_eq!((self.n, self.bw), (other.n, other.bw));
        let w = self.bw + 1;
        y.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.n {
            let ra = &self.data[i * w..(i + 1) * w];
            let rb = &other.data[i * w..(i + 1) * w];
            let mut yi = ra[0] * x[i] + rb[0] * z[i];
            for k in 1..w.min(i + 1) {
                let j = i - k;
                yi += ra[k] * x[j] + rb[k] * z[j];
                y[j] += ra[k] * x[i] + rb[k] * z[i];
            }
            y[i] += yi;
        }
    }

    pub fn is_symmetric_banded(&self) -> bool {
        self.data.len() == self.n * (self.bw + 1)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| (0..self.n).map(|j| self.get(i, j)).collect()).collect()
    }

    /// Cholesky factor `L` with `A = L·Lᵀ`, in the same band layout.
    pub fn cholesky(&self) -> Result<BandCholesky> {
        let w = self.bw + 1;
        let mut l = self.data.clone();
        for i in 0..self.n {
            let jmin = i.saturating_sub(self.bw);
            for j in jmin..=i {
                let mut s = l[i * w + (i - j)];
                let kmin = jmin.max(j.saturating_sub(self.bw));
                for k in kmin..j {
                    s -= l[i * w + (i - k)] * l[j * w + (j - k)];
                }
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(Error::Config(format!("matrix not positive definite at row {i}")));
                    }
                    l[i * w] = s.sqrt();
                } else {
                    l[i * w + (i - j)] = s / l[j * w];
                }
            }
        }
        let inv_diag = (0..self.n).map(|i| 1.0 / l[i * w]).collect();
        Ok(BandCholesky {
            n: self.n,
            bw: self.bw,
            l,
            inv_diag,
        })
    }
}

#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    bw: usize,
    l: Vec<f64>,
    inv_diag: Vec<f64>,
}

impl BandCholesky {
    /// Solves `A·x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let w = self.bw + 1;
        for i in 0..self.n {
            let mut s = b[i];
            for k in 1..w.min(i + 1) {
                s -= self.l[i * w + k] * b[i - k];
            }
            b[i] = s * self.inv_diag[i];
        }
        for i in (0..self.n).rev() {
            let mut s = b[i];
            for k in 1..w.min(self.n - i) {
                s -= self.l[(i + k) * w + k] * b[i + k];
            }
            b[i] = s * self.inv_diag[i];
        }
    }

    /// Solves for a right-hand side with nonzeros only at `idx`; entries
    /// before the first nonzero stay zero in the forward sweep.
    pub fn solve_sparse(&self, idx: &[usize], vals: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let Some(&start) = idx.iter().min() else {
            return;
        };
        for (&i, &v) in idx.iter().zip(vals) {
            out[i] += v;
        }
        let w = self.bw + 1;
        for i in start..self.n {
            let mut s = out[i];
            for k in 1..w.min(i - start + 1) {
                s -= self.l[i * w + k] * out[i - k];
            }
            out[i] = s * self.inv_diag[i];
        }
        for i in (0..self.n).rev() {
            let mut s = out[i];
            for k in 1..w.min(self.n - i) {
                s -= self.l[(i + k) * w + k] * out[i + k];
            }
            out[i] = s * self.inv_diag[i];
        }
    }
}
