//! Symmetric banded matrices and their Cholesky factorization.

/// Symmetric `n × n` matrix with half-bandwidth `kd`, lower band stored row-wise:
/// `data[i * (kd + 1) + d] = A[i][i - d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandedSym {
    n: usize,
    kd: usize,
    data: Vec<f64>,
}

impl BandedSym {
    pub fn zeros(n: usize, kd: usize) -> Self {
        Self { n, kd, data: vec![0.0; n * (kd + 1)] }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn half_bandwidth(&self) -> usize {
        self.kd
    }

    fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        (i - j <= self.kd).then(|| i * (self.kd + 1) + (i - j))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.slot(i, j).map_or(0.0, |k| self.data[k])
    }

    /// Adds `v` to the symmetric pair `(i, j)`, `(j, i)`; off-band entries panic.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.slot(i, j).unwrap_or_else(|| panic!("entry ({i}, {j}) outside band {}", self.kd));
        self.data[k] += v;
    }

    pub fn add_diagonal(&mut self, mu: f64) {
        for i in 0..self.n {
            self.data[i * (self.kd + 1)] += mu;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.data[i * (self.kd + 1)]).collect()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            for d in 0..=self.kd.min(i) {
                let a = self.data[i * (self.kd + 1) + d];
                let j = i - d;
                y[i] += a * x[j];
                if d > 0 {
                    y[j] += a * x[i];
                }
            }
        }
        y
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| (0..self.n).map(|j| self.get(i, j)).collect()).collect()
    }

    /// `A = L Lᵀ`, or `None` when a pivot is not positive (the matrix is not
    /// positive definite to working precision).
    pub fn cholesky(&self) -> Option<BandedCholesky> {
        let (n, kd) = (self.n, self.kd);
        let w = kd + 1;
        let mut l = self.data.clone();
        for j in 0..n {
            let lo = j.saturating_sub(kd);
            let mut s = l[j * w];
            for k in lo..j {
                let v = l[j * w + (j - k)];
                s -= v * v;
            }
            if !(s > 0.0) || !s.is_finite() {
                return None;
            }
            let piv = s.sqrt();
            l[j * w] = piv;
            for i in j + 1..=(j + kd).min(n - 1) {
                let lo = i.saturating_sub(kd);
                let mut s = l[i * w + (i - j)];
                for k in lo..j {
                    s -= l[i * w + (i - k)] * l[j * w + (j - k)];
                }
                l[i * w + (i - j)] = s / piv;
            }
        }
        Some(BandedCholesky { n, kd, l })
    }
}

#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    kd: usize,
    l: Vec<f64>,
}

impl BandedCholesky {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let w = self.kd + 1;
        let mut y = b.to_vec();
        for i in 0..self.n {
            let lo = i.saturating_sub(self.kd);
            let mut s = y[i];
            for k in lo..i {
                s -= self.l[i * w + (i - k)] * y[k];
            }
            y[i] = s / self.l[i * w];
        }
        for i in (0..self.n).rev() {
            let hi = (i + self.kd).min(self.n - 1);
            let mut s = y[i];
            for k in i + 1..=hi {
                s -= self.l[k * w + (k - i)] * y[k];
            }
            y[i] = s / self.l[i * w];
        }
        y
    }

    /// `log det A`.
    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.n).map(|i| self.l[i * (self.kd + 1)].ln()).sum::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_tridiagonal_laplacian() {
        let n = 50;
        let mut a = BandedSym::zeros(n, 1);
        for i in 0..n {
            a.add(i, i, 2.0);
            if i > 0 {
                a.add(i, i - 1, -1.0);
            }
        }
        let x: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let b = a.mul_vec(&x);
        let y = a.cholesky().unwrap().solve(&b);
        for (p, q) in x.iter().zip(&y) {
            assert!((p - q).abs() < 1e-11);
        }
    }

    #[test]
    fn indefinite_is_rejected() {
        let mut a = BandedSym::zeros(2, 1);
        a.add(0, 0, 1.0);
        a.add(1, 1, 1.0);
        a.add(0, 1, 2.0);
        assert!(a.cholesky().is_none());
    }
}
