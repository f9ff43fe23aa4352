//! Symmetric tridiagonal eigenproblems by Sturm bisection and inverse iteration.

use super::tridiag::solve_pivoted;

#[derive(Debug, Clone)]
pub struct SymTridiag {
    pub diag: Vec<f64>,
    /// `off[i]` couples entries `i` and `i+1`.
    pub off: Vec<f64>,
}

impl SymTridiag {
    pub fn n(&self) -> usize {
        self.diag.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n();
        (0..n)
            .map(|i| {
                let mut s = self.diag[i] * x[i];
                if i > 0 {
                    s += self.off[i - 1] * x[i - 1];
                }
                if i + 1 < n {
                    s += self.off[i] * x[i + 1];
                }
                s
            })
            .collect()
    }

    fn bounds(&self) -> (f64, f64) {
        let n = self.n();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..n {
            let r = if i > 0 { self.off[i - 1].abs() } else { 0.0 } + if i + 1 < n { self.off[i].abs() } else { 0.0 };
            lo = lo.min(self.diag[i] - r);
            hi = hi.max(self.diag[i] + r);
        }
        (lo, hi)
    }

    /// Number of eigenvalues strictly below `x`.
    pub fn count_below(&self, x: f64) -> usize {
        let mut count = 0;
        let mut q = self.diag[0] - x;
        let tiny = f64::MIN_POSITIVE.sqrt();
        for i in 0..self.n() {
            if i > 0 {
                let denom = if q == 0.0 { tiny } else { q };
                q = self.diag[i] - x - self.off[i - 1] * self.off[i - 1] / denom;
            }
            if q < 0.0 {
                count += 1;
            }
        }
        count
    }

    /// The `k`-th largest eigenvalue, `k = 0` being the top one.
    pub fn kth_largest(&self, k: usize) -> f64 {
        let n = self.n();
        assert!(k < n);
        let target = n - 1 - k; // index in ascending order
        let (mut lo, mut hi) = self.bounds();
        let scale = lo.abs().max(hi.abs()).max(1e-300);
        lo -= 1e-12 * scale;
        hi += 1e-12 * scale;
        for _ in 0..400 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi || hi - lo < 4.0 * f64::EPSILON * mid.abs().max(1e-300) {
                break;
            }
            if self.count_below(mid) > target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Eigenvector for an accurate eigenvalue by inverse iteration,
    /// orthogonalized against `against` (unit vectors in the Euclidean product).
    pub fn eigenvector(&self, lambda: f64, against: &[Vec<f64>]) -> Vec<f64> {
        let n = self.n();
        // a relative nudge keeps the shifted matrix nonsingular without spoiling
        // convergence on graded grids, where the spectral radius can be astronomically large
        let shift = lambda + 1e-14 * lambda.abs().max(f64::MIN_POSITIVE);
        let diag: Vec<f64> = self.diag.iter().map(|d| d - shift).collect();
        let mut x: Vec<f64> = (0..n).map(|i| 1.0 + 0.37 * ((i as f64) * 0.618).sin()).collect();
        for _ in 0..4 {
            orthogonalize(&mut x, against);
            normalize(&mut x);
            x = solve_pivoted(&self.off, &diag, &self.off, &x);
            if x.iter().any(|v| !v.is_finite()) {
                x = (0..n).map(|i| if i == n / 2 { 1.0 } else { 0.0 }).collect();
            }
        }
        orthogonalize(&mut x, against);
        normalize(&mut x);
        x
    }

    /// `‖S x - λ x‖₂` for unit `x`.
    pub fn residual(&self, lambda: f64, x: &[f64]) -> f64 {
        let sx = self.apply(x);
        sx.iter().zip(x).map(|(a, b)| (a - lambda * b).powi(2)).sum::<f64>().sqrt()
    }

    /// Top `k` eigenpairs in descending order of eigenvalue.
    pub fn top(&self, k: usize) -> Vec<(f64, Vec<f64>)> {
        self.select((0..k.min(self.n())).map(|i| self.kth_largest(i)).collect())
    }

    /// Bottom `k` eigenpairs in ascending order of eigenvalue.
    pub fn bottom(&self, k: usize) -> Vec<(f64, Vec<f64>)> {
        let n = self.n();
        self.select((0..k.min(n)).map(|i| self.kth_largest(n - 1 - i)).collect())
    }

    fn select(&self, lambdas: Vec<f64>) -> Vec<(f64, Vec<f64>)> {
        let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(lambdas.len());
        let mut out = Vec::with_capacity(lambdas.len());
        for (i, &l) in lambdas.iter().enumerate() {
            // only nearby eigenvectors can contaminate inverse iteration
            let close: Vec<Vec<f64>> = (0..i)
                .filter(|&j| (lambdas[j] - l).abs() < 1e-3 * l.abs().max(1.0))
                .map(|j| vecs[j].clone())
                .collect();
            let v = self.eigenvector(l, &close);
            vecs.push(v.clone());
            out.push((l, v));
        }
        out
    }
}

fn orthogonalize(x: &mut [f64], against: &[Vec<f64>]) {
    for v in against {
        let c: f64 = x.iter().zip(v).map(|(a, b)| a * b).sum();
        x.iter_mut().zip(v).for_each(|(a, b)| *a -= c * b);
    }
}

fn normalize(x: &mut [f64]) {
    let s = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if s > 0.0 {
        x.iter_mut().for_each(|v| *v /= s);
    }
}
