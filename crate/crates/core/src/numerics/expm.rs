//! Action of the exponential of a tridiagonal operator with real spectrum.
//!
//! Uses the Cauchy integral `e^{A} = (2πi)^{-1} ∮ e^z (z - A)^{-1} dz` on a
//! parabolic contour enclosing the negative real axis, discretized by the
//! trapezoid rule. Conjugate symmetry halves the number of complex solves.
//! Operators with eigenvalues on the positive side are shifted by a
//! Gershgorin bound first.

use num_complex::Complex64;

use super::Tridiag;

const NODES: usize = 40;

/// `e^{tA} x` for an operator `A` similar to a real symmetric matrix.
pub fn expm_apply(a: &Tridiag, t: f64, x: &[f64]) -> Vec<f64> {
    let shift = (t * a.gershgorin_max()).max(0.0);
    let mut out = vec![0.0; x.len()];
    let mut work = Vec::new();
    let nf = NODES as f64;
    let h = 2.0 * std::f64::consts::PI / nf;
    for k in NODES / 2..NODES {
        let theta = -std::f64::consts::PI + (k as f64 + 0.5) * h;
        let z = nf * Complex64::new(0.1309 - 0.1194 * theta * theta, 0.25 * theta);
        let dz = nf * Complex64::new(-0.2388 * theta, 0.25);
        // (z - (tA - shift))^{-1} x = ((z + shift) - tA)^{-1} x
        let y = a.shifted_solve(z + shift, t, x, &mut work);
        let c = z.exp() * dz;
        for (o, yi) in out.iter_mut().zip(&y) {
            *o += (c * yi).im;
        }
    }
    let scale = 2.0 / nf * shift.exp();
    out.iter_mut().for_each(|v| *v *= scale);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(a: f64) -> Tridiag {
        let mut t = Tridiag::zeros(1);
        t.diag[0] = a;
        t
    }

    #[test]
    fn scalar_exponentials() {
        for &a in &[0.0, -1e-3, -1.0, -10.0, -100.0, -1e6, 0.5, 3.0] {
            let got = expm_apply(&scalar(a), 1.0, &[1.0])[0];
            let want = a.exp();
            assert!((got - want).abs() < 1e-12 * want.max(1.0), "a={a}: {got} vs {want}");
        }
    }

    #[test]
    fn two_by_two_nonsymmetric_similar_to_symmetric() {
        // A = D^{-1} S D with S symmetric
        let s = [[-2.0, 1.0], [1.0, -3.0]];
        let dd = [1.0, 4.0];
        let mut a = Tridiag::zeros(2);
        a.diag = vec![s[0][0], s[1][1]];
        a.upper[0] = s[0][1] * dd[1] / dd[0];
        a.lower[1] = s[1][0] * dd[0] / dd[1];
        // eigen-decomposition of S by hand
        let tr: f64 = -5.0;
        let det: f64 = 5.0;
        let disc = (tr * tr / 4.0 - det).sqrt();
        let l1 = tr / 2.0 + disc;
        let l2 = tr / 2.0 - disc;
        let x = [1.0, 0.0];
        let got = expm_apply(&a, 0.7, &x);
        // e^{tS} via Sylvester: (e^{t l1}(S - l2) - e^{t l2}(S - l1)) / (l1 - l2)
        let e1 = (0.7 * l1).exp();
        let e2 = (0.7 * l2).exp();
        let es = |i: usize, j: usize| {
            let id = if i == j { 1.0 } else { 0.0 };
            (e1 * (s[i][j] - l2 * id) - e2 * (s[i][j] - l1 * id)) / (l1 - l2)
        };
        // e^{tA} = D^{-1} e^{tS} D
        let want0 = es(0, 0) * dd[0] / dd[0] * x[0];
        let want1 = es(1, 0) * dd[0] / dd[1] * x[0];
        assert!((got[0] - want0).abs() < 1e-12);
        assert!((got[1] - want1).abs() < 1e-12);
    }
}
