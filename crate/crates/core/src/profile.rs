//! Expander profiles `U_α` and exponent bookkeeping.
//!
//! `U'' + ((d-1)/ρ + ρ/2) U' + U/(p-1) + |U|^{p-1} U = 0`, `U(0) = α`, `U'(0) = 0`.
//! Along the ray `ρ^{2/(p-1)} U(ρ)` settles to a constant `ℓ(α)`.

use std::sync::Arc;

use crate::numerics::{RadialField, RadialGrid};
use crate::{gate, Error, Result};

/// `p_JL(d)`; infinite for `d <= 10`.
pub fn joseph_lundgren(d: usize) -> Result<f64> {
    if d < 3 {
        return gate(format!("dimension d={d} must satisfy d >= 3"));
    }
    if d <= 10 {
        return Ok(f64::INFINITY);
    }
    let df = d as f64;
    Ok(1.0 + 4.0 / (df - 4.0 - 2.0 * (df - 1.0).sqrt()))
}

/// `q_c = d(p-1)/2`.
pub fn critical_exponent(d: usize, p: f64) -> Result<f64> {
    if d < 3 {
        return gate(format!("dimension d={d} must satisfy d >= 3"));
    }
    if !(p > 1.0) {
        return gate(format!("power p={p} must satisfy p > 1"));
    }
    let df = d as f64;
    // (dp - d)/2 rather than d(p-1)/2: exact at the Fujita endpoint p = 1 + 2/d
    Ok((df * p - df) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PowerClass {
    BelowFujita,
    JlSubcritical,
    JlSupercritical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PowerRange {
    pub class: PowerClass,
    /// `1 + 2/d < p < 1 + 4/(d-2)`.
    pub haraux_weissler: bool,
}

pub fn validate_power_range(d: usize, p: f64) -> Result<PowerRange> {
    critical_exponent(d, p)?;
    let df = d as f64;
    let fujita = 1.0 + 2.0 / df;
    let jl = joseph_lundgren(d)?;
    let class = if p <= fujita {
        PowerClass::BelowFujita
    } else if p < jl {
        PowerClass::JlSubcritical
    } else {
        PowerClass::JlSupercritical
    };
    let haraux_weissler = p > fujita && p < 1.0 + 4.0 / (df - 2.0);
    Ok(PowerRange { class, haraux_weissler })
}

/// Rejects powers at or below the Fujita exponent, naming the inequality.
pub fn require_above_fujita(d: usize, p: f64) -> Result<()> {
    if validate_power_range(d, p)?.class == PowerClass::BelowFujita {
        return gate(format!("1+2/d < p violated: p={p}, 1+2/d={}", 1.0 + 2.0 / d as f64));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct ProfileOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Relative oscillation of `ρ^{2/(p-1)} U` over the outer tenth of the grid
    /// above which the tail is flagged as unsettled.
    pub tail_tolerance: f64,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        ProfileOptions { rtol: 1e-11, atol: 1e-14, tail_tolerance: 1e-3 }
    }
}

#[derive(Debug, Clone)]
pub struct ProfileSolution {
    pub alpha: f64,
    pub p: f64,
    pub d: usize,
    pub grid: Arc<RadialGrid>,
    pub u: RadialField,
    pub du: RadialField,
    pub ell: f64,
    pub residual: f64,
    pub tail_oscillation: f64,
    pub tail_unsettled: bool,
    series_radius: f64,
    series_coeff: f64,
    /// Every accepted integrator state `(ρ, U, U')`, for Hermite interpolation.
    dense: Vec<[f64; 3]>,
}

fn rhs(rho: f64, y: [f64; 2], p: f64, d: f64) -> [f64; 2] {
    let (u, v) = (y[0], y[1]);
    let nl = u.abs().powf(p - 1.0) * u;
    [v, -((d - 1.0) / rho + 0.5 * rho) * v - u / (p - 1.0) - nl]
}

// Dormand–Prince 5(4) tableau
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// One Dormand–Prince step; returns the fifth-order state and the error estimate.
fn dp_step(rho: f64, y: [f64; 2], h: f64, p: f64, d: f64) -> ([f64; 2], [f64; 2]) {
    let mut k = [[0.0; 2]; 7];
    for s in 0..7 {
        let mut ys = y;
        for j in 0..s {
            ys[0] += h * A[s][j] * k[j][0];
            ys[1] += h * A[s][j] * k[j][1];
        }
        k[s] = rhs(rho + C[s] * h, ys, p, d);
    }
    let mut y5 = y;
    let mut err = [0.0; 2];
    for s in 0..7 {
        let b5 = if s < 6 { A[6][s] } else { 0.0 };
        for i in 0..2 {
            y5[i] += h * b5 * k[s][i];
            err[i] += h * (b5 - B4[s]) * k[s][i];
        }
    }
    (y5, err)
}

pub fn integrate_profile(alpha: f64, p: f64, d: usize, rho_max: f64, n: usize) -> Result<ProfileSolution> {
    integrate_profile_with(alpha, p, d, rho_max, n, ProfileOptions::default())
}

pub fn integrate_profile_with(
    alpha: f64,
    p: f64,
    d: usize,
    rho_max: f64,
    n: usize,
    opts: ProfileOptions,
) -> Result<ProfileSolution> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return gate(format!("initial value alpha={alpha} must be positive"));
    }
    require_above_fujita(d, p)?;
    let grid = Arc::new(RadialGrid::new(d, rho_max, n, 1.0)?);
    let df = d as f64;
    let coeff = -(alpha / (p - 1.0) + alpha.powf(p)) / (2.0 * df);
    // keep the neglected ρ⁴ term of the series far below round-off
    let core = (alpha / coeff.abs()).sqrt();
    let rs = 1e-4 * core.min(1.0);
    let series = |r: f64| [alpha + coeff * r * r, 2.0 * coeff * r];

    let nodes = grid.nodes().to_vec();
    let mut u = vec![0.0; n];
    let mut du = vec![0.0; n];
    let mut rho = rs;
    let mut y = series(rs);
    let mut dense = vec![[0.0, alpha, 0.0], [rs, y[0], y[1]]];
    let mut h = 0.1 * rs;
    let blow = 1e8 * alpha.max(1.0);
    for (j, &target) in nodes.iter().enumerate() {
        if target <= rs {
            let s = series(target);
            u[j] = s[0];
            du[j] = s[1];
            continue;
        }
        while rho < target {
            let last = target - rho <= h * (1.0 + 1e-12);
            let step = if last { target - rho } else { h };
            let (yn, e) = dp_step(rho, y, step, p, df);
            let sc0 = opts.atol + opts.rtol * y[0].abs().max(yn[0].abs());
            let sc1 = opts.atol + opts.rtol * y[1].abs().max(yn[1].abs());
            let err = (e[0] / sc0).abs().max((e[1] / sc1).abs());
            if !err.is_finite() || !yn[0].is_finite() {
                h = 0.2 * step;
            } else if err <= 1.0 {
                rho = if last { target } else { rho + step };
                y = yn;
                dense.push([rho, y[0], y[1]]);
                let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                if !last || fac < 1.0 {
                    h = step * fac;
                }
            } else {
                h = step * (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
            }
            if y[0].abs() > blow || !y[0].is_finite() || h < 1e-14 * rho.max(rs) {
                return Err(Error::Numerical(format!(
                    "profile integration blew up; last valid rho={:.6e}",
                    dense.last().map(|s| s[0]).unwrap_or(0.0)
                )));
            }
        }
        u[j] = y[0];
        du[j] = y[1];
    }

    let a = 2.0 / (p - 1.0);
    // strip the ρ^{-2} correction of the two-term tail so ell is the true limit
    let tail_amp = |rho: f64, v: f64| {
        let mut amp = rho.powf(a) * v;
        for _ in 0..4 {
            let c = a * (a + 1.0) - (df - 1.0) * a + amp.abs().powf(p - 1.0);
            amp = rho.powf(a) * v / (1.0 + c / (rho * rho));
        }
        amp
    };
    let ell = tail_amp(rho_max, u[n - 1]);
    let start = (9 * n) / 10;
    let tail: Vec<f64> = (start..n).map(|j| tail_amp(nodes[j], u[j])).collect();
    let (mn, mx) = tail.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let tail_oscillation = if ell != 0.0 { (mx - mn) / ell.abs() } else { f64::INFINITY };
    let residual = ode_residual(&nodes, &u, &du, p, df);

    let grid_ref = grid.clone();
    Ok(ProfileSolution {
        alpha,
        p,
        d,
        u: RadialField::new(grid_ref.clone(), u),
        du: RadialField::new(grid_ref, du),
        grid,
        ell,
        residual,
        tail_oscillation,
        tail_unsettled: !(tail_oscillation < opts.tail_tolerance),
        series_radius: rs,
        series_coeff: coeff,
        dense,
    })
}

/// Sup over interior nodes of the ODE defect, with derivatives taken by
/// five-point finite differences of the sampled `U` and `U'`.
fn ode_residual(nodes: &[f64], u: &[f64], du: &[f64], p: f64, d: f64) -> f64 {
    let n = nodes.len();
    let mut worst: f64 = 0.0;
    for j in 2..n - 2 {
        let w = fd_weights(&nodes[j - 2..j + 3], nodes[j]);
        let (mut u1, mut v1) = (0.0, 0.0);
        for k in 0..5 {
            u1 += w[k] * u[j - 2 + k];
            v1 += w[k] * du[j - 2 + k];
        }
        let r = nodes[j];
        let f = rhs(r, [u[j], du[j]], p, d);
        worst = worst.max((u1 - f[0]).abs()).max((v1 - f[1]).abs());
    }
    worst
}

/// First-derivative weights at `x` from Lagrange interpolation on `xs`.
fn fd_weights(xs: &[f64], x: f64) -> Vec<f64> {
    let m = xs.len();
    (0..m)
        .map(|k| {
            let denom: f64 = (0..m).filter(|&o| o != k).map(|o| xs[k] - xs[o]).product();
            let mut num = 0.0;
            for i in 0..m {
                if i == k {
                    continue;
                }
                let prod: f64 = (0..m).filter(|&o| o != k && o != i).map(|o| x - xs[o]).product();
                num += prod;
            }
            num / denom
        })
        .collect()
}

impl ProfileSolution {
    pub fn decay_exponent(&self) -> f64 {
        2.0 / (self.p - 1.0)
    }

    /// `(U(ρ), U'(ρ))` anywhere on `[0, ∞)`: series near the origin, Hermite
    /// interpolation of the integrator's accepted steps, and the two-term
    /// algebraic tail `ℓ ρ^{-a}(1 + c/ρ²)` beyond `ρ_max`.
    pub fn eval(&self, rho: f64) -> (f64, f64) {
        let rho = rho.abs();
        if rho <= self.series_radius {
            let c = self.series_coeff;
            return (self.alpha + c * rho * rho, 2.0 * c * rho);
        }
        let rmax = self.grid.rho_max();
        if rho > rmax {
            let a = self.decay_exponent();
            let df = self.d as f64;
            let c = a * (a + 1.0) - (df - 1.0) * a + self.ell.abs().powf(self.p - 1.0);
            let amp = self.ell;
            let val = amp * (rho.powf(-a) + c * rho.powf(-a - 2.0));
            let der = amp * (-a * rho.powf(-a - 1.0) - (a + 2.0) * c * rho.powf(-a - 3.0));
            return (val, der);
        }
        let i = self.dense.partition_point(|s| s[0] < rho).clamp(1, self.dense.len() - 1);
        let (s0, s1) = (self.dense[i - 1], self.dense[i]);
        let h = s1[0] - s0[0];
        let t = (rho - s0[0]) / h;
        // U'' from the equation at both ends gives a quintic Hermite interpolant
        let f0 = rhs(s0[0].max(1e-300), [s0[1], s0[2]], self.p, self.d as f64)[1];
        let f1 = rhs(s1[0], [s1[1], s1[2]], self.p, self.d as f64)[1];
        let f0 = if s0[0] == 0.0 { 2.0 * self.series_coeff } else { f0 };
        quintic_hermite(t, h, [s0[1], s0[2], f0], [s1[1], s1[2], f1])
    }

    /// Samples `U` on any grid.
    pub fn sample_on(&self, grid: &Arc<RadialGrid>) -> RadialField {
        RadialField::from_fn(grid.clone(), |r| self.eval(r).0)
    }
}

/// Value and derivative of the quintic matching value, slope and curvature at both ends.
fn quintic_hermite(t: f64, h: f64, a: [f64; 3], b: [f64; 3]) -> (f64, f64) {
    let (t2, t3, t4, t5) = (t * t, t * t * t, t.powi(4), t.powi(5));
    let h00 = 1.0 - 10.0 * t3 + 15.0 * t4 - 6.0 * t5;
    let h10 = t - 6.0 * t3 + 8.0 * t4 - 3.0 * t5;
    let h20 = 0.5 * t2 - 1.5 * t3 + 1.5 * t4 - 0.5 * t5;
    let h01 = 10.0 * t3 - 15.0 * t4 + 6.0 * t5;
    let h11 = -4.0 * t3 + 7.0 * t4 - 3.0 * t5;
    let h21 = 0.5 * t3 - t4 + 0.5 * t5;
    let val = h00 * a[0] + h10 * h * a[1] + h20 * h * h * a[2] + h01 * b[0] + h11 * h * b[1] + h21 * h * h * b[2];
    let d00 = -30.0 * t2 + 60.0 * t3 - 30.0 * t4;
    let d10 = 1.0 - 18.0 * t2 + 32.0 * t3 - 15.0 * t4;
    let d20 = t - 4.5 * t2 + 6.0 * t3 - 2.5 * t4;
    let d01 = 30.0 * t2 - 60.0 * t3 + 30.0 * t4;
    let d11 = -12.0 * t2 + 28.0 * t3 - 15.0 * t4;
    let d21 = 1.5 * t2 - 4.0 * t3 + 2.5 * t4;
    let der = (d00 * a[0] + d10 * h * a[1] + d20 * h * h * a[2] + d01 * b[0] + d11 * h * b[1] + d21 * h * h * b[2]) / h;
    (val, der)
}

/// `ū(t, r) = t^{-1/(p-1)} U(r/√t)` on `target`.
pub fn physical_self_similar(ps: &ProfileSolution, t: f64, target: &Arc<RadialGrid>) -> Result<RadialField> {
    if !(t > 0.0) {
        return gate(format!("time t={t} must be positive"));
    }
    let amp = t.powf(-1.0 / (ps.p - 1.0));
    let st = t.sqrt();
    Ok(RadialField::from_fn(target.clone(), |r| amp * ps.eval(r / st).0))
}

/// `ℓ ρ^{-2/(p-1)}` inside `R̄`, zero outside.
pub fn singular_datum(ell: f64, p: f64, grid: &Arc<RadialGrid>, rbar: f64) -> Result<RadialField> {
    if rbar > grid.rho_max() {
        return gate(format!("truncation radius Rbar={rbar} exceeds rho_max={}", grid.rho_max()));
    }
    let a = 2.0 / (p - 1.0);
    Ok(RadialField::from_fn(grid.clone(), |r| if r <= rbar { ell * r.powf(-a) } else { 0.0 }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::lp_norm;

    #[test]
    fn exponents() {
        assert!(joseph_lundgren(3).unwrap().is_infinite());
        assert!((joseph_lundgren(11).unwrap() - (1.0 + 4.0 / (7.0 - 2.0 * 10f64.sqrt()))).abs() < 1e-12);
        assert!((joseph_lundgren(11).unwrap() - 6.9221).abs() < 1e-4);
        assert!((joseph_lundgren(12).unwrap() - 3.9266).abs() < 1e-4);
        assert!(joseph_lundgren(2).is_err());
        assert_eq!(critical_exponent(3, 3.0).unwrap(), 3.0);
        assert_eq!(critical_exponent(4, 2.0).unwrap(), 2.0);
        for d in 3..9 {
            assert_eq!(critical_exponent(d, 1.0 + 2.0 / d as f64).unwrap(), 1.0);
        }
        assert!(critical_exponent(3, 1.0).is_err());
    }

    #[test]
    fn power_ranges() {
        let r = validate_power_range(3, 3.0).unwrap();
        assert_eq!(r.class, PowerClass::JlSubcritical);
        assert!(r.haraux_weissler);
        assert_eq!(validate_power_range(11, 8.0).unwrap().class, PowerClass::JlSupercritical);
        assert_eq!(validate_power_range(5, 1.1).unwrap().class, PowerClass::BelowFujita);
        assert!(require_above_fujita(5, 1.1).unwrap_err().to_string().contains("1+2/d < p"));
    }

    #[test]
    fn profile_alpha_one() {
        let ps = integrate_profile(1.0, 3.0, 3, 40.0, 20000).unwrap();
        assert!(ps.residual < 1e-6, "{}", ps.residual);
        assert!(!ps.tail_unsettled, "{}", ps.tail_oscillation);
        assert!((ps.u.values[0] - 1.0).abs() < 1e-4);
        assert!(ps.du.values[0].abs() < 1e-2);
        assert!(ps.u.sup() <= 1.0 + 1e-12);
        let big = integrate_profile(1.0, 3.0, 3, 80.0, 40000).unwrap();
        assert!(((big.ell - ps.ell) / ps.ell).abs() < 1e-3, "{} {}", ps.ell, big.ell);
        assert!(ps.ell > 0.0);
    }

    #[test]
    fn two_tolerances_agree() {
        let a = integrate_profile_with(1.0, 3.0, 3, 20.0, 4000, ProfileOptions { rtol: 1e-9, ..Default::default() }).unwrap();
        let b = integrate_profile_with(1.0, 3.0, 3, 20.0, 4000, ProfileOptions { rtol: 1e-12, ..Default::default() }).unwrap();
        let diff = a.u.values.iter().zip(&b.u.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-5, "{diff}");
    }

    #[test]
    fn small_alpha_is_bounded_by_alpha_and_linear() {
        let mut prev = f64::INFINITY;
        for &alpha in &[0.1, 0.03, 0.01, 0.001] {
            let ps = integrate_profile(alpha, 3.0, 3, 40.0, 8000).unwrap();
            assert!(ps.u.sup() <= alpha * (1.0 + 1e-12));
            assert!(ps.ell.abs() < prev);
            prev = ps.ell.abs();
            // linear regime: ℓ/α is nearly constant
            if alpha <= 0.01 {
                let lin = integrate_profile(alpha * 0.5, 3.0, 3, 40.0, 8000).unwrap();
                assert!((2.0 * lin.ell / ps.ell - 1.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn ell_is_continuous() {
        let a0 = 1.3;
        let ells: Vec<f64> = [-2e-3, -1e-3, 0.0, 1e-3, 2e-3]
            .iter()
            .map(|da| integrate_profile(a0 + da, 3.0, 3, 30.0, 6000).unwrap().ell)
            .collect();
        for w in ells.windows(2) {
            assert!((w[1] - w[0]).abs() < 1e-2);
        }
        assert!((ells[3] - ells[2]).abs() < (ells[4] - ells[2]).abs() + 1e-12);
    }

    #[test]
    fn eval_matches_nodes_and_scales() {
        let ps = integrate_profile(1.0, 3.0, 3, 40.0, 20000).unwrap();
        for j in [0, 17, 1000, 19998] {
            let r = ps.grid.nodes()[j];
            let (u, du) = ps.eval(r);
            assert!((u - ps.u.values[j]).abs() < 1e-10);
            assert!((du - ps.du.values[j]).abs() < 1e-8);
        }
        // the tail continues smoothly past rho_max
        let (a, _) = ps.eval(40.0);
        let (b, _) = ps.eval(40.0 + 1e-9);
        assert!((a - b).abs() < 1e-9);
        let target = Arc::new(RadialGrid::new(3, 4.0, 400, 1.0).unwrap());
        let t = 0.3;
        let u1 = physical_self_similar(&ps, t, &target).unwrap();
        let u4 = physical_self_similar(&ps, 4.0 * t, &target).unwrap();
        for j in (0..199).step_by(7) {
            let r = target.nodes()[j];
            let k = target.locate(2.0 * r - 1e-12);
            assert!((u4.values[k] - 0.5 * u1.values[j]).abs() < 1e-4);
        }
        let at_one = physical_self_similar(&ps, 1.0, &target).unwrap();
        assert!((at_one.values[5] - ps.eval(target.nodes()[5]).0).abs() < 1e-14);
        let tiny = Arc::new(RadialGrid::new(3, 1e-3, 100, 1.0).unwrap());
        let near0 = physical_self_similar(&ps, 0.25, &tiny).unwrap();
        assert!((near0.values[0] - 2.0).abs() < 1e-4);
        assert!(physical_self_similar(&ps, 0.0, &target).is_err());
    }

    #[test]
    fn singular_datum_norms() {
        let g = Arc::new(RadialGrid::new(3, 2.0, 4000, 1.0).unwrap());
        let f = singular_datum(1.0, 3.0, &g, 1.0).unwrap();
        let n2 = lp_norm(&f, 2.0).unwrap();
        assert!((n2 - (4.0 * std::f64::consts::PI).sqrt()).abs() < 1e-2, "{n2}");
        assert_eq!(singular_datum(0.0, 3.0, &g, 1.0).unwrap().sup(), 0.0);
        assert!(singular_datum(1.0, 3.0, &g, 3.0).is_err());
        // at q = q_c = 3 the norm diverges logarithmically as nodes approach the origin
        let coarse = Arc::new(RadialGrid::new(3, 2.0, 1000, 1.0).unwrap());
        let fine = Arc::new(RadialGrid::new(3, 2.0, 1000, 2.0).unwrap());
        let a = lp_norm(&singular_datum(1.0, 3.0, &coarse, 1.0).unwrap(), 3.0).unwrap();
        let b = lp_norm(&singular_datum(1.0, 3.0, &fine, 1.0).unwrap(), 3.0).unwrap();
        assert!(b > 1.1 * a, "{a} {b}");
    }
}
