//! Linearization of the expander in similarity variables and its top spectrum.
//!
//! `L_α = Δ + (ρ/2)∂_ρ + 1/(p-1) + p|U_α|^{p-1}` is self-adjoint in
//! `L²(ρ^{d-1}e^{ρ²/4}dρ)`. The finite-volume form with Gaussian-weighted
//! cells is conjugated by the square roots of the cell weights into a
//! symmetric tridiagonal matrix, whose top eigenvalues come from Sturm
//! bisection.

use std::sync::Arc;

use rayon::prelude::*;

use crate::numerics::eig::SymTridiag;
use crate::numerics::{expm, RadialField, RadialGrid, Tridiag};
use crate::profile::{critical_exponent, integrate_profile, validate_power_range, PowerClass, ProfileSolution};
use crate::{gate, Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct SpectralGrid {
    pub rho_max: f64,
    pub n: usize,
    pub grading: f64,
}

impl Default for SpectralGrid {
    fn default() -> Self {
        // grading resolves the core of large-α profiles, whose width is ~α^{-(p-1)/2}
        SpectralGrid { rho_max: 30.0, n: 3000, grading: 2.0 }
    }
}

impl SpectralGrid {
    pub fn build(&self, d: usize) -> Result<Arc<RadialGrid>> {
        Ok(Arc::new(RadialGrid::new(d, self.rho_max, self.n, self.grading)?))
    }

    pub fn doubled(&self) -> Self {
        SpectralGrid { n: 2 * self.n, ..*self }
    }
}

/// Profile integration settings shared by sweeps.
#[derive(Debug, Clone, Copy)]
pub struct ProfileGrid {
    pub rho_max: f64,
    pub n: usize,
}

impl Default for ProfileGrid {
    fn default() -> Self {
        ProfileGrid { rho_max: 40.0, n: 20000 }
    }
}

#[derive(Debug, Clone)]
pub struct LinearizedOperator {
    pub profile: Option<Arc<ProfileSolution>>,
    pub p: f64,
    pub d: usize,
    pub eta: f64,
    pub grid: Arc<RadialGrid>,
    /// `p|U_α|^{p-1}` at the nodes.
    pub potential: Vec<f64>,
    /// `U_α` at the nodes (zero for the free operator).
    pub base: Vec<f64>,
    /// Finite-volume generator; the outer row is zero (Dirichlet data held fixed).
    pub generator: Tridiag,
    /// Gaussian-weighted cell volumes `W_j`.
    pub cell_weights: Vec<f64>,
    /// Symmetric form `W^{1/2} L W^{-1/2}` on the interior nodes.
    pub matrix: SymTridiag,
}

#[derive(Debug, Clone)]
pub struct SpectralReport {
    pub eigenvalues: Vec<f64>,
    /// Eigenfunctions on the operator grid, sup-normalized and positive at the origin.
    pub eigenfields: Vec<RadialField>,
    pub threshold: f64,
    pub residuals: Vec<f64>,
    pub converged: Vec<bool>,
}

fn check_eta(d: usize, p: f64, eta: f64) -> Result<()> {
    let qc = critical_exponent(d, p)?;
    if !(eta >= 1.0 && eta < qc) {
        return gate(format!("1 <= eta < d(p-1)/2 violated: eta={eta}, d(p-1)/2={qc}"));
    }
    Ok(())
}

pub fn assemble_linearized(ps: Arc<ProfileSolution>, eta: f64) -> Result<LinearizedOperator> {
    let grid = SpectralGrid::default().build(ps.d)?;
    assemble_linearized_on(Some(ps.clone()), ps.p, ps.d, eta, grid)
}

/// `profile = None` assembles the free operator `L_0`.
pub fn assemble_linearized_on(
    profile: Option<Arc<ProfileSolution>>,
    p: f64,
    d: usize,
    eta: f64,
    grid: Arc<RadialGrid>,
) -> Result<LinearizedOperator> {
    check_eta(d, p, eta)?;
    if grid.d() != d {
        return gate("operator grid dimension does not match the profile");
    }
    if 0.25 * grid.rho_max().powi(2) > 600.0 {
        return gate(format!("rho_max={} overflows the Gaussian weight", grid.rho_max()));
    }
    let n = grid.n();
    let base: Vec<f64> = match &profile {
        Some(ps) => grid.nodes().iter().map(|&r| ps.eval(r).0).collect(),
        None => vec![0.0; n],
    };
    let mut potential: Vec<f64> = base.iter().map(|u| p * u.abs().powf(p - 1.0)).collect();
    potential[n - 1] = 0.0;
    let mut generator = grid.weighted_operator(0.25);
    let shifted: Vec<f64> = potential.iter().map(|v| v + 1.0 / (p - 1.0)).collect();
    generator.add_potential(&shifted, true);
    let cell_weights = grid.cell_volumes(0.25);
    let cond = grid.conductances(0.25);
    let m = n - 1;
    let diag: Vec<f64> = (0..m).map(|j| generator.diag[j]).collect();
    let off: Vec<f64> = (0..m - 1).map(|j| cond[j] / (cell_weights[j] * cell_weights[j + 1]).sqrt()).collect();
    Ok(LinearizedOperator {
        profile,
        p,
        d,
        eta,
        grid,
        potential,
        base,
        generator,
        cell_weights,
        matrix: SymTridiag { diag, off },
    })
}

impl LinearizedOperator {
    /// `1/(p-1) - d/(2η)`.
    pub fn threshold(&self) -> f64 {
        1.0 / (self.p - 1.0) - self.d as f64 / (2.0 * self.eta)
    }

    /// Largest mismatch between the conjugated generator and its transpose.
    pub fn symmetry_defect(&self) -> f64 {
        let g = &self.generator;
        let w = &self.cell_weights;
        let mut worst: f64 = 0.0;
        for j in 0..self.matrix.n() - 1 {
            let up = g.upper[j] * (w[j] / w[j + 1]).sqrt();
            let lo = g.lower[j + 1] * (w[j + 1] / w[j]).sqrt();
            worst = worst.max((up - lo).abs() / up.abs().max(lo.abs()).max(1e-300));
        }
        worst
    }

    pub fn apply(&self, f: &RadialField) -> RadialField {
        f.with_values(self.generator.apply(&f.values))
    }

    /// `Σ W_j f_j g_j` over interior nodes.
    pub fn weighted_inner(&self, f: &[f64], g: &[f64]) -> f64 {
        (0..self.matrix.n()).map(|j| self.cell_weights[j] * f[j] * g[j]).sum()
    }

    /// Number of discrete eigenvalues above the threshold.
    pub fn count_above_threshold(&self) -> usize {
        self.matrix.n() - self.matrix.count_below(self.threshold())
    }

    fn to_field(&self, y: &[f64]) -> RadialField {
        let mut v: Vec<f64> = y.iter().zip(&self.cell_weights).map(|(a, w)| a / w.sqrt()).collect();
        v.push(0.0);
        let sup = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let pivot = if v[0].abs() > 1e-8 * sup {
            v[0]
        } else {
            *v.iter().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap()
        };
        let s = pivot.signum() / sup;
        RadialField::new(self.grid.clone(), v.iter().map(|x| x * s).collect())
    }
}

pub fn top_eigenpairs(op: &LinearizedOperator, k: usize) -> Result<SpectralReport> {
    if k == 0 {
        return gate("number of eigenpairs k must be >= 1");
    }
    let pairs = op.matrix.top(k);
    let mut report = SpectralReport {
        eigenvalues: Vec::with_capacity(k),
        eigenfields: Vec::with_capacity(k),
        threshold: op.threshold(),
        residuals: Vec::with_capacity(k),
        converged: Vec::with_capacity(k),
    };
    for (lambda, y) in pairs {
        let res = op.matrix.residual(lambda, &y);
        report.eigenvalues.push(lambda);
        report.residuals.push(res);
        report.converged.push(res <= 1e-6 && lambda.is_finite());
        report.eigenfields.push(op.to_field(&y));
    }
    Ok(report)
}

/// Top eigenvalue only.
pub fn lambda_max(op: &LinearizedOperator) -> f64 {
    op.matrix.kth_largest(0)
}

/// Growth rate of `e^{τL}x` for a pseudo-random start, fitted on the second
/// half of `[0, span]` in the weighted norm.
pub fn lyapunov_rate(op: &LinearizedOperator, span: f64, steps: usize, seed: u64) -> f64 {
    use rand::Rng;
    let mut rng = crate::rng::path_rng(seed, 0);
    let n = op.grid.n();
    let mut x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    x[n - 1] = 0.0;
    let dt = span / steps as f64;
    let mut log_norm = 0.0;
    let mut series = Vec::with_capacity(steps);
    for k in 1..=steps {
        x = expm::expm_apply(&op.generator, dt, &x);
        let nrm = op.weighted_inner(&x, &x).sqrt();
        log_norm += nrm.ln();
        x.iter_mut().for_each(|v| *v /= nrm);
        series.push((k as f64 * dt, log_norm));
    }
    let tail = &series[steps / 2..];
    fit_slope(tail)
}

pub(crate) fn fit_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// `λ_max(α)` from a fresh profile integration.
pub fn lambda_max_at(alpha: f64, p: f64, d: usize, eta: f64, pg: ProfileGrid, sg: SpectralGrid) -> Result<f64> {
    let ps = Arc::new(integrate_profile(alpha, p, d, pg.rho_max, pg.n)?);
    let op = assemble_linearized_on(Some(ps), p, d, eta, sg.build(d)?)?;
    Ok(lambda_max(&op))
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub alpha: f64,
    pub lambda_max: Option<f64>,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn unstable(&self) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter_map(|r| r.lambda_max.filter(|&l| l > 0.0).map(|l| (r.alpha, l)))
            .collect()
    }

    pub fn min_positive(&self) -> Option<(f64, f64)> {
        self.unstable().into_iter().min_by(|a, b| a.1.total_cmp(&b.1))
    }
}

pub fn unstable_eigenvalue_sweep(
    p: f64,
    d: usize,
    alphas: &[f64],
    eta: f64,
    pg: ProfileGrid,
    sg: SpectralGrid,
) -> Result<SweepTable> {
    crate::profile::require_above_fujita(d, p)?;
    check_eta(d, p, eta)?;
    let rows = alphas
        .par_iter()
        .map(|&alpha| match lambda_max_at(alpha, p, d, eta, pg, sg) {
            Ok(l) => SweepRow { alpha, lambda_max: Some(l), skipped: None },
            Err(e) => SweepRow { alpha, lambda_max: None, skipped: Some(e.to_string()) },
        })
        .collect();
    Ok(SweepTable { rows })
}

#[derive(Debug, Clone)]
pub struct SmallEigenvalue {
    pub alpha: f64,
    pub lambda: f64,
    /// `(α, λ_max)` at the ends of the final bracket: below the window and above it.
    pub lower: (f64, f64),
    pub upper: (f64, f64),
    pub evaluations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct SmallSearch {
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub scan_factor: f64,
    pub max_bisections: usize,
    /// Extra cap on λ*, e.g. `1/(p-1) - d/(2r)` for the branch experiment.
    pub cap: Option<f64>,
    pub profile: ProfileGrid,
    pub grid: SpectralGrid,
}

impl Default for SmallSearch {
    fn default() -> Self {
        SmallSearch {
            alpha_min: 0.05,
            alpha_max: 64.0,
            scan_factor: 1.25,
            max_bisections: 60,
            cap: None,
            profile: ProfileGrid::default(),
            grid: SpectralGrid::default(),
        }
    }
}

/// Locates `α*` with `0 < λ_max(α*) < eps` (and below `cap`), by scanning for the
/// first sign change of `λ_max` and bisecting into the middle of the window.
pub fn find_small_unstable_alpha(p: f64, d: usize, eps: f64, eta: f64, cfg: SmallSearch) -> Result<SmallEigenvalue> {
    if validate_power_range(d, p)?.class != PowerClass::JlSubcritical {
        return gate(format!("1+2/d < p < p_JL violated: p={p}, d={d}"));
    }
    if !(eps > 0.0) {
        return gate(format!("eps={eps} must be positive"));
    }
    check_eta(d, p, eta)?;
    let eval = |a: f64| lambda_max_at(a, p, d, eta, cfg.profile, cfg.grid);
    let mut evaluations = 0;
    let mut prev: Option<(f64, f64)> = None;
    let mut alpha = cfg.alpha_min;
    let mut bracket = None;
    while alpha <= cfg.alpha_max {
        let l = eval(alpha)?;
        evaluations += 1;
        if l > 0.0 {
            bracket = Some((prev, (alpha, l)));
            break;
        }
        prev = Some((alpha, l));
        alpha *= cfg.scan_factor;
    }
    let (lo, hi) = match bracket {
        Some((lo, hi)) => (lo, hi),
        None => {
            return Err(Error::Numerical(format!(
                "no positive eigenvalue on alpha in [{}, {}]",
                cfg.alpha_min, cfg.alpha_max
            )))
        }
    };
    let upper = cfg.cap.map_or(eps, |c| c.min(eps));
    if !(upper > 0.0) {
        return gate(format!("eigenvalue window (0, {upper}) is empty"));
    }
    if eps.is_infinite() && cfg.cap.is_none() {
        let lo = lo.unwrap_or(hi);
        return Ok(SmallEigenvalue { alpha: hi.0, lambda: hi.1, lower: lo, upper: hi, evaluations });
    }
    let Some(mut lo) = lo else {
        return Err(Error::Numerical(format!("lambda_max already positive at alpha_min={}", cfg.alpha_min)));
    };
    let mut hi = hi;
    // aim at the middle of the window so refinement cannot push λ* out of it
    let (want_lo, want_hi) = (0.2 * upper, 0.8 * upper);
    if hi.1 > want_lo && hi.1 < want_hi {
        return Ok(SmallEigenvalue { alpha: hi.0, lambda: hi.1, lower: lo, upper: hi, evaluations });
    }
    for _ in 0..cfg.max_bisections {
        let mid = 0.5 * (lo.0 + hi.0);
        let l = eval(mid)?;
        evaluations += 1;
        if l > want_lo && l < want_hi {
            return Ok(SmallEigenvalue { alpha: mid, lambda: l, lower: lo, upper: hi, evaluations });
        }
        if l <= want_lo {
            lo = (mid, l);
        } else {
            hi = (mid, l);
        }
    }
    Err(Error::Numerical(format!(
        "bisection exhausted: lambda({})={}, lambda({})={}",
        lo.0, lo.1, hi.0, hi.1
    )))
}
