//! Symmetric positive-definite banded matrices and their Cholesky factor.

use crate::error::{Error, Result};

/// Lower band of a symmetric matrix: entry `(i, j)`, `i - bw <= j <= i`.
#[derive(Debug, Clone)]
pub(crate) struct BandMatrix {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        i * (self.bw + 1) + (i - j)
    }

    /// Add `v` to entry `(i, j)` (and implicitly `(j, i)`).
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    #[cfg(test)]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bw {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    /// In-place Cholesky factorization `A = L Lᵀ`.
    pub fn cholesky(mut self) -> Result<Cholesky> {
        let (n, bw) = (self.n, self.bw);
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for k in lo..=i {
                let mut sum = self.data[self.idx(i, k)];
                for m in lo.max(k.saturating_sub(bw))..k {
                    sum -= self.data[self.idx(i, m)] * self.data[self.idx(k, m)];
                }
                let at = self.idx(i, k);
                if i == k {
                    if !(sum > 0.0) || !sum.is_finite() {
                        return Err(Error::Numerical(format!("pressure system is singular (pivot {i})")));
                    }
                    self.data[at] = sum.sqrt();
                } else {
                    self.data[at] = sum / self.data[self.idx(k, k)];
                }
            }
        }
        Ok(Cholesky { l: self })
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Cholesky {
    l: BandMatrix,
}

impl Cholesky {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let l = &self.l;
        let (n, bw) = (l.n, l.bw);
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for m in i.saturating_sub(bw)..i {
                s -= l.data[l.idx(i, m)] * y[m];
            }
            y[i] = s / l.data[l.idx(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for m in i + 1..(i + bw + 1).min(n) {
                s -= l.data[l.idx(m, i)] * y[m];
            }
            y[i] = s / l.data[l.idx(i, i)];
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fieldio::RngStream;

    #[test]
    fn solves_random_banded_spd() {
        let (n, bw) = (40, 5);
        let mut s = RngStream::new(3);
        let mut a = BandMatrix::zeros(n, bw);
        for i in 0..n {
            for j in i.saturating_sub(bw)..i {
                let v = s.normal();
                a.add(i, j, v);
                a.add(i, i, v.abs() + 0.1);
                a.add(j, j, v.abs() + 0.1);
            }
            a.add(i, i, 1.0);
        }
        let x: Vec<f64> = (0..n).map(|_| s.normal()).collect();
        let b: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| a.get(i, j) * x[j]).sum())
            .collect();
        let got = a.cholesky().unwrap().solve(&b);
        for (g, e) in got.iter().zip(&x) {
            assert!((g - e).abs() < 1e-10);
        }
    }

    #[test]
    fn indefinite_is_rejected() {
        let mut a = BandMatrix::zeros(2, 1);
        a.add(0, 0, 1.0);
        a.add(1, 0, 2.0);
        a.add(1, 1, 1.0);
        assert!(a.cholesky().unwrap_err().to_string().contains("singular"));
    }
}
