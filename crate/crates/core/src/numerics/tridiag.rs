//! Tridiagonal operators and direct solvers.

use num_complex::Complex64;

/// Row `i` acts as `lower[i] x[i-1] + diag[i] x[i] + upper[i] x[i+1]`.
#[derive(Debug, Clone)]
pub struct Tridiag {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Tridiag {
    pub fn zeros(n: usize) -> Self {
        Tridiag { lower: vec![0.0; n], diag: vec![0.0; n], upper: vec![0.0; n] }
    }

    pub fn n(&self) -> usize {
        self.diag.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut y = vec![0.0; n];
        // difference form keeps constants in the kernel exactly when diag = -(lower + upper)
        for i in 0..n {
            let mut s = (self.diag[i] + (self.lower[i] + self.upper[i])) * x[i];
            if i > 0 {
                s += self.lower[i] * (x[i - 1] - x[i]);
            }
            if i + 1 < n {
                s += self.upper[i] * (x[i + 1] - x[i]);
            }
            y[i] = s;
        }
        y
    }

    /// Adds `v[i]` to the diagonal of every row except frozen (all-zero) ones.
    pub fn add_potential(&mut self, v: &[f64], frozen_last: bool) {
        let n = self.n();
        let stop = if frozen_last { n - 1 } else { n };
        for i in 0..stop {
            self.diag[i] += v[i];
        }
    }

    /// Upper bound on the real parts of the eigenvalues (Gershgorin rows).
    pub fn gershgorin_max(&self) -> f64 {
        (0..self.n())
            .map(|i| self.diag[i] + self.lower[i].abs() + self.upper[i].abs())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Solves `(z I - s A) y = x` for complex `z`, real scale `s`, by the Thomas algorithm.
    /// Pivoting is unnecessary when the spectrum of `sA` is real and `z` is off the real axis.
    pub fn shifted_solve(&self, z: Complex64, s: f64, x: &[f64], work: &mut Vec<Complex64>) -> Vec<Complex64> {
        let n = self.n();
        work.clear();
        work.resize(n, Complex64::new(0.0, 0.0));
        let mut y = vec![Complex64::new(0.0, 0.0); n];
        // forward sweep: work holds modified super-diagonal
        let mut denom = z - s * self.diag[0];
        let mut prev_c = Complex64::new(-s * self.upper[0], 0.0) / denom;
        work[0] = prev_c;
        y[0] = Complex64::new(x[0], 0.0) / denom;
        for i in 1..n {
            let a = -s * self.lower[i];
            denom = z - s * self.diag[i] - a * prev_c;
            if i + 1 < n {
                prev_c = Complex64::new(-s * self.upper[i], 0.0) / denom;
                work[i] = prev_c;
            }
            y[i] = (x[i] - a * y[i - 1]) / denom;
        }
        for i in (0..n - 1).rev() {
            let c = work[i];
            y[i] = y[i] - c * y[i + 1];
        }
        y
    }
}

/// Solves a general real tridiagonal system with partial pivoting.
/// `sub[i]` couples row `i+1` to column `i`, `sup[i]` couples row `i` to column `i+1`.
pub fn solve_pivoted(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    if n == 1 {
        return vec![rhs[0] / nonzero(diag[0])];
    }
    let mut d = diag.to_vec();
    let mut du = sup.to_vec();
    let mut dl = sub.to_vec();
    let mut du2 = vec![0.0; n];
    let mut b = rhs.to_vec();
    for i in 0..n - 1 {
        if d[i].abs() >= dl[i].abs() {
            let f = dl[i] / nonzero(d[i]);
            d[i + 1] -= f * du[i];
            b[i + 1] -= f * b[i];
        } else {
            let f = d[i] / dl[i];
            d[i] = dl[i];
            let tmp = d[i + 1];
            d[i + 1] = du[i] - f * tmp;
            du[i] = tmp;
            if i + 1 < n - 1 {
                du2[i] = du[i + 1];
                du[i + 1] *= -f;
            }
            b.swap(i, i + 1);
            b[i + 1] -= f * b[i];
        }
        dl[i] = 0.0;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = b[n - 1] / nonzero(d[n - 1]);
    x[n - 2] = (b[n - 2] - du[n - 2] * x[n - 1]) / nonzero(d[n - 2]);
    for i in (0..n.saturating_sub(2)).rev() {
        x[i] = (b[i] - du[i] * x[i + 1] - du2[i] * x[i + 2]) / nonzero(d[i]);
    }
    x
}

fn nonzero(x: f64) -> f64 {
    if x == 0.0 {
        f64::MIN_POSITIVE.sqrt()
    } else {
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pivoted_solve_matches_product() {
        let n = 9;
        let sub: Vec<f64> = (0..n - 1).map(|i| 3.0 + i as f64).collect();
        let diag: Vec<f64> = (0..n).map(|i| 0.1 * (i as f64 - 4.0)).collect();
        let sup: Vec<f64> = (0..n - 1).map(|i| 1.0 - 0.3 * i as f64).collect();
        let xs: Vec<f64> = (0..n).map(|i| (i as f64).sin() + 0.5).collect();
        let mut b = vec![0.0; n];
        for i in 0..n {
            b[i] = diag[i] * xs[i];
            if i > 0 {
                b[i] += sub[i - 1] * xs[i - 1];
            }
            if i + 1 < n {
                b[i] += sup[i] * xs[i + 1];
            }
        }
        let got = solve_pivoted(&sub, &diag, &sup, &b);
        for i in 0..n {
            assert!((got[i] - xs[i]).abs() < 1e-10, "{i}: {} {}", got[i], xs[i]);
        }
    }

    #[test]
    fn shifted_solve_inverts() {
        let mut a = Tridiag::zeros(6);
        for i in 0..6 {
            a.diag[i] = -2.0 - i as f64;
            if i > 0 {
                a.lower[i] = 1.0;
            }
            if i < 5 {
                a.upper[i] = 0.7;
            }
        }
        let z = Complex64::new(0.3, 1.1);
        let x: Vec<f64> = (0..6).map(|i| i as f64 - 2.0).collect();
        let mut w = Vec::new();
        let y = a.shifted_solve(z, 0.5, &x, &mut w);
        // check (z - 0.5 A) y = x
        for i in 0..6 {
            let mut s = z * y[i] - 0.5 * a.diag[i] * y[i];
            if i > 0 {
                s -= 0.5 * a.lower[i] * y[i - 1];
            }
            if i < 5 {
                s -= 0.5 * a.upper[i] * y[i + 1];
            }
            assert!((s - Complex64::new(x[i], 0.0)).norm() < 1e-12);
        }
    }
}
