//! Flows in similarity variables `v(τ, ρ) = t^{1/(p-1)} u(t, r)`, `ρ = r/√t`, `τ = ln t`.

use std::sync::Arc;

use crate::numerics::{expm, intersection_norm, lp_norm, RadialField, RadialGrid};
use crate::spectrum::LinearizedOperator;
use crate::{gate, Error, Result};

/// Norm columns kept alongside a trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormKey {
    Eta,
    Gamma,
    GammaOverP,
    EtaGamma,
    Sup,
}

impl NormKey {
    pub const ALL: [NormKey; 5] = [NormKey::Eta, NormKey::Gamma, NormKey::GammaOverP, NormKey::EtaGamma, NormKey::Sup];

    pub fn label(self) -> &'static str {
        match self {
            NormKey::Eta => "L_eta",
            NormKey::Gamma => "L_gamma",
            NormKey::GammaOverP => "L_gamma_over_p",
            NormKey::EtaGamma => "L_eta_gamma",
            NormKey::Sup => "L_inf",
        }
    }

    fn column(self) -> usize {
        NormKey::ALL.iter().position(|&k| k == self).unwrap()
    }
}

/// Integrability exponents for the norm table; the branch construction uses `η = 1`, `γ = pr`.
#[derive(Debug, Clone, Copy)]
pub struct NormSpec {
    pub eta: f64,
    pub gamma: f64,
    pub p: f64,
}

impl NormSpec {
    pub fn new(eta: f64, gamma: f64, p: f64) -> Result<Self> {
        if !(eta >= 1.0 && gamma >= eta && gamma / p >= 1.0) {
            return gate(format!("norm exponents need 1 <= eta <= gamma and gamma/p >= 1: eta={eta}, gamma={gamma}, p={p}"));
        }
        Ok(NormSpec { eta, gamma, p })
    }

    pub fn evaluate(&self, f: &RadialField) -> Result<[f64; 5]> {
        Ok([
            lp_norm(f, self.eta)?,
            lp_norm(f, self.gamma)?,
            lp_norm(f, self.gamma / self.p)?,
            intersection_norm(f, self.eta, self.gamma)?,
            f.sup(),
        ])
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub fields: Vec<RadialField>,
    /// One row per time, columns ordered as `NormKey::ALL`.
    pub norms: Vec<[f64; 5]>,
    pub blew_up: bool,
    pub truncated: bool,
}

impl Trajectory {
    pub fn new() -> Self {
        Trajectory { times: Vec::new(), fields: Vec::new(), norms: Vec::new(), blew_up: false, truncated: false }
    }

    pub fn push(&mut self, t: f64, f: RadialField, norms: [f64; 5]) {
        self.times.push(t);
        self.fields.push(f);
        self.norms.push(norms);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn norm_series(&self, key: NormKey) -> Vec<f64> {
        self.norms.iter().map(|r| r[key.column()]).collect()
    }

    pub fn last(&self) -> Option<&RadialField> {
        self.fields.last()
    }

    pub fn norm_table_csv(&self) -> String {
        let mut s = String::from("tau");
        for k in NormKey::ALL {
            s.push(',');
            s.push_str(k.label());
        }
        s.push('\n');
        for (t, row) in self.times.iter().zip(&self.norms) {
            s.push_str(&format!("{t:.12e}"));
            for v in row {
                s.push_str(&format!(",{v:.12e}"));
            }
            s.push('\n');
        }
        s
    }
}

impl Default for Trajectory {
    fn default() -> Self {
        Self::new()
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return gate(format!("t={t} must be positive"));
    }
    Ok(())
}

/// Exact rescaling: the nodes of the result are `r_j/√t`.
pub fn to_similarity(f: &RadialField, t: f64, p: f64) -> Result<RadialField> {
    check_time(t)?;
    let g = &f.grid;
    let grid = Arc::new(RadialGrid::new(g.d(), g.rho_max() / t.sqrt(), g.n(), g.grading())?);
    let amp = t.powf(1.0 / (p - 1.0));
    Ok(RadialField::new(grid, f.values.iter().map(|v| amp * v).collect()))
}

/// Exact rescaling: the nodes of the result are `√t ρ_j`.
pub fn from_similarity(v: &RadialField, t: f64, p: f64) -> Result<RadialField> {
    check_time(t)?;
    let g = &v.grid;
    let grid = Arc::new(RadialGrid::new(g.d(), g.rho_max() * t.sqrt(), g.n(), g.grading())?);
    let amp = t.powf(-1.0 / (p - 1.0));
    Ok(RadialField::new(grid, v.values.iter().map(|x| amp * x).collect()))
}

/// Rescales and interpolates onto `target` (zero beyond the source domain).
pub fn to_similarity_on(f: &RadialField, t: f64, p: f64, target: &Arc<RadialGrid>) -> Result<RadialField> {
    Ok(to_similarity(f, t, p)?.resample(target))
}

pub fn from_similarity_on(v: &RadialField, t: f64, p: f64, target: &Arc<RadialGrid>) -> Result<RadialField> {
    Ok(from_similarity(v, t, p)?.resample(target))
}

/// `n(U+w) - n(U) - p|U|^{p-1}w` with `n(f) = |f|^{p-1}f`.
pub fn perturbation_nonlinearity(base: f64, w: f64, p: f64) -> f64 {
    let nl = |f: f64| f.abs().powf(p - 1.0) * f;
    if base != 0.0 && w.abs() < 1e-4 * base.abs() {
        // binomial series: the direct difference cancels catastrophically here
        let x = w / base;
        let c2 = p * (p - 1.0) / 2.0;
        let c3 = c2 * (p - 2.0) / 3.0;
        let c4 = c3 * (p - 3.0) / 4.0;
        return nl(base) * x * x * (c2 + x * (c3 + x * c4));
    }
    nl(base + w) - nl(base) - p * base.abs().powf(p - 1.0) * w
}

#[derive(Debug, Clone, Copy)]
pub struct EvolveOptions {
    pub dt: f64,
    /// Record every `record_every` steps (the final state is always recorded).
    pub record_every: usize,
    /// Drop the nonlinearity (pure linear semigroup).
    pub linear: bool,
    /// Sup-norm beyond which the run is declared blown up.
    pub blowup_sup: f64,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        EvolveOptions { dt: 0.05, record_every: 10, linear: false, blowup_sup: 1e6 }
    }
}

/// `∂_τ w = L_α w + N_α(w)` by the exponential trapezoid rule; the linear part is exact.
pub fn evolve_perturbation(
    w0: &RadialField,
    op: &LinearizedOperator,
    tau0: f64,
    tau1: f64,
    norms: NormSpec,
    opts: EvolveOptions,
) -> Result<Trajectory> {
    evolve_until(w0, op, tau0, tau1, norms, opts, |_, _| false)
}

/// As `evolve_perturbation`, stopping after the first recorded row for which `stop` holds.
pub fn evolve_until(
    w0: &RadialField,
    op: &LinearizedOperator,
    tau0: f64,
    tau1: f64,
    norms: NormSpec,
    opts: EvolveOptions,
    stop: impl Fn(f64, &[f64; 5]) -> bool,
) -> Result<Trajectory> {
    if !(tau1 > tau0) {
        return gate(format!("tau1={tau1} must exceed tau0={tau0}"));
    }
    if !(opts.dt > 0.0) || opts.record_every == 0 {
        return gate("dt must be positive and record_every at least 1");
    }
    let w0 = if Arc::ptr_eq(&w0.grid, &op.grid) { w0.clone() } else { w0.resample(&op.grid) };
    let n = op.grid.n();
    let steps = ((tau1 - tau0) / opts.dt).ceil().max(1.0) as usize;
    let dt = (tau1 - tau0) / steps as f64;
    let p = op.p;
    let nonlin = |w: &[f64]| -> Vec<f64> {
        let mut out: Vec<f64> = if opts.linear {
            vec![0.0; n]
        } else {
            w.iter().zip(&op.base).map(|(&wi, &u)| perturbation_nonlinearity(u, wi, p)).collect()
        };
        out[n - 1] = 0.0;
        out
    };
    let mut traj = Trajectory::new();
    let mut w = w0.values.clone();
    w[n - 1] = 0.0;
    let first = op.grid.clone();
    let f0 = RadialField::new(first, w.clone());
    let row = norms.evaluate(&f0)?;
    traj.push(tau0, f0, row);
    if stop(tau0, &row) {
        traj.truncated = true;
        return Ok(traj);
    }
    for k in 1..=steps {
        let nw = nonlin(&w);
        let pred_in: Vec<f64> = w.iter().zip(&nw).map(|(a, b)| a + dt * b).collect();
        let pred = expm::expm_apply(&op.generator, dt, &pred_in);
        let np = nonlin(&pred);
        let half_in: Vec<f64> = w.iter().zip(&nw).map(|(a, b)| a + 0.5 * dt * b).collect();
        let half = expm::expm_apply(&op.generator, dt, &half_in);
        w = half.iter().zip(&np).map(|(a, b)| a + 0.5 * dt * b).collect();
        w[n - 1] = 0.0;
        let tau = tau0 + k as f64 * dt;
        let sup = w.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if !sup.is_finite() || sup > opts.blowup_sup {
            traj.blew_up = true;
            traj.truncated = true;
            return Ok(traj);
        }
        if k % opts.record_every == 0 || k == steps {
            let f = RadialField::new(op.grid.clone(), w.clone());
            let row = norms.evaluate(&f)?;
            traj.push(tau, f, row);
            if stop(tau, &row) {
                traj.truncated = k < steps;
                return Ok(traj);
            }
        }
    }
    Ok(traj)
}

#[derive(Debug, Clone)]
pub struct GrowthFit {
    pub rate: f64,
    pub r_squared: f64,
    /// `R² < 0.99`.
    pub poor_fit: bool,
}

/// Least-squares slope of `ln ‖·‖` against time over the trailing half of the samples.
pub fn growth_rate(tr: &Trajectory, key: NormKey) -> Result<GrowthFit> {
    fit_log_series(&tr.times, &tr.norm_series(key), 0.5)
}

pub fn fit_log_series(times: &[f64], values: &[f64], trailing: f64) -> Result<GrowthFit> {
    if times.len() < 10 {
        return gate(format!("growth fit needs at least 10 samples, got {}", times.len()));
    }
    if let Some(v) = values.iter().find(|v| !(**v > 0.0)) {
        return gate(format!("growth fit needs positive norms, found {v}"));
    }
    let start = ((1.0 - trailing) * times.len() as f64).floor() as usize;
    let pts: Vec<(f64, f64)> = times[start..].iter().zip(&values[start..]).map(|(&t, &v)| (t, v.ln())).collect();
    let rate = crate::spectrum::fit_slope(&pts);
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let ss_tot: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let ss_res: f64 = pts.iter().map(|p| (p.1 - my - rate * (p.0 - mx)).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(GrowthFit { rate, r_squared, poor_fit: r_squared < 0.99 })
}

#[derive(Debug, Clone)]
pub struct AncientSurrogate {
    pub trajectory: Trajectory,
    /// Amplitude of `U^lin` at `tau_start`.
    pub delta: f64,
    /// Fitted shift `c` in `‖ψ(τ)‖_{γ/p} ≈ e^{λ(τ-c)}‖U^lin‖_{γ/p}`.
    pub shift: f64,
    /// `‖ψ‖_{L^{η,γ}} < eps` at every recorded time.
    pub upper_bound_holds: bool,
    /// `‖ψ‖_{γ/p} > e^{λ(τ-c)}‖U^lin‖_{γ/p}/2` at every recorded time.
    pub lower_bound_holds: bool,
    /// Slope of `ln ‖ψ‖_{γ/p}` over the whole run.
    pub fitted_rate: f64,
}

/// Forward-shooting stand-in for the ancient solution: start on the unstable
/// mode at `tau_start` with an amplitude that reaches `eps/2` at `tau_end`.
pub fn approximate_ancient_solution(
    op: &LinearizedOperator,
    ulin: &RadialField,
    lambda: f64,
    eps: f64,
    tau_start: f64,
    tau_end: f64,
    norms: NormSpec,
    opts: EvolveOptions,
) -> Result<AncientSurrogate> {
    if !(lambda > 0.0) {
        return gate(format!("lambda={lambda} must be positive"));
    }
    if !(eps > 0.0) {
        return gate(format!("eps={eps} must be positive"));
    }
    let ulin_norms = norms.evaluate(ulin)?;
    let span = tau_end - tau_start;
    let delta = 0.5 * eps / ((lambda * span).exp() * ulin_norms[NormKey::EtaGamma.column()]);
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::Numerical(format!("initial amplitude underflows: delta={delta}")));
    }
    let w0 = ulin.scaled(delta);
    let col = NormKey::EtaGamma.column();
    let trajectory = evolve_until(&w0, op, tau_start, tau_end, norms, opts, |_, row| row[col] >= eps)?;
    let upper_bound_holds = !trajectory.truncated && trajectory.norms.iter().all(|r| r[col] < eps);
    let gp = NormKey::GammaOverP.column();
    let base = ulin_norms[gp];
    let shifts: Vec<f64> = trajectory
        .times
        .iter()
        .zip(&trajectory.norms)
        .map(|(&t, r)| t - (r[gp] / base).ln() / lambda)
        .collect();
    let shift = shifts.iter().sum::<f64>() / shifts.len() as f64;
    let lower_bound_holds = trajectory
        .times
        .iter()
        .zip(&trajectory.norms)
        .all(|(&t, r)| r[gp] > (lambda * (t - shift)).exp() * base / 2.0);
    let fitted_rate = fit_log_series(&trajectory.times, &trajectory.norm_series(NormKey::GammaOverP), 1.0)
        .map(|f| f.rate)
        .unwrap_or(f64::NAN);
    Ok(AncientSurrogate { trajectory, delta, shift, upper_bound_holds, lower_bound_holds, fitted_rate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::{integrate_profile, physical_self_similar};
    use crate::spectrum::{assemble_linearized_on, lambda_max, top_eigenpairs, SpectralGrid};

    fn operator(alpha: f64) -> LinearizedOperator {
        let ps = Arc::new(integrate_profile(alpha, 3.0, 3, 40.0, 20000).unwrap());
        let grid = SpectralGrid { rho_max: 30.0, n: 1200, grading: 2.0 }.build(3).unwrap();
        assemble_linearized_on(Some(ps), 3.0, 3, 1.0, grid).unwrap()
    }

    fn spec() -> NormSpec {
        NormSpec::new(1.0, 12.0, 3.0).unwrap()
    }

    #[test]
    fn rescaling_round_trip_and_identity() {
        let grid = Arc::new(RadialGrid::new(3, 10.0, 400, 1.5).unwrap());
        let f = RadialField::from_fn(grid.clone(), |r| (1.0 + r * r).recip() * (0.3 * r).cos());
        let same = to_similarity(&f, 1.0, 3.0).unwrap();
        assert_eq!(same.values, f.values);
        for &t in &[0.01, 0.7, 5.0] {
            let back = from_similarity(&to_similarity(&f, t, 3.0).unwrap(), t, 3.0).unwrap();
            for (a, b) in back.values.iter().zip(&f.values) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in back.grid.nodes().iter().zip(grid.nodes()) {
                assert!((a - b).abs() < 1e-12 * b.max(1.0));
            }
            let back_on = from_similarity_on(&to_similarity(&f, t, 3.0).unwrap(), t, 3.0, &grid).unwrap();
            for (a, b) in back_on.values.iter().zip(&f.values) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        assert!(to_similarity(&f, 0.0, 3.0).is_err());
        assert!(from_similarity(&f, -1.0, 3.0).is_err());
    }

    #[test]
    fn self_similar_solution_is_static() {
        let ps = integrate_profile(1.0, 3.0, 3, 40.0, 20000).unwrap();
        let phys = Arc::new(RadialGrid::new(3, 12.0, 4000, 2.0).unwrap());
        let sim = Arc::new(RadialGrid::new(3, 3.0, 300, 1.0).unwrap());
        let views: Vec<RadialField> = [0.1, 1.0]
            .iter()
            .map(|&t| to_similarity_on(&physical_self_similar(&ps, t, &phys).unwrap(), t, 3.0, &sim).unwrap())
            .collect();
        for j in 0..sim.n() - 1 {
            let want = ps.eval(sim.nodes()[j]).0;
            assert!((views[0].values[j] - views[1].values[j]).abs() < 1e-4);
            assert!((views[1].values[j] - want).abs() < 1e-4);
        }
    }

    #[test]
    fn nonlinearity_is_quadratic_and_accurate() {
        for &u in &[0.3, 1.0, -0.8] {
            for &w in &[1e-3, 1e-5, 1e-7, -2e-6] {
                let exact = 3.0 * u * w * w + w * w * w;
                let got = perturbation_nonlinearity(u, w, 3.0);
                assert!((got - exact).abs() <= 1e-8 * exact.abs(), "{u} {w}: {got} vs {exact}");
            }
        }
        assert_eq!(perturbation_nonlinearity(0.7, 0.0, 2.5), 0.0);
    }

    #[test]
    fn zero_perturbation_stays_zero() {
        let op = operator(1.0);
        let w0 = RadialField::zeros(op.grid.clone());
        let tr = evolve_perturbation(&w0, &op, 0.0, 20.0, spec(), EvolveOptions { dt: 0.1, ..Default::default() }).unwrap();
        assert!(tr.norm_series(NormKey::Sup).iter().all(|&s| s <= 1e-8));
    }

    #[test]
    fn small_unstable_mode_grows_at_eigenvalue() {
        let op = operator(1.0);
        let rep = top_eigenpairs(&op, 1).unwrap();
        let lam = rep.eigenvalues[0];
        let w0 = rep.eigenfields[0].scaled(1e-6);
        let opts = EvolveOptions { dt: 0.1, record_every: 5, ..Default::default() };
        let tr = evolve_perturbation(&w0, &op, 0.0, 20.0, spec(), opts).unwrap();
        for key in [NormKey::GammaOverP, NormKey::Gamma, NormKey::EtaGamma] {
            let fit = growth_rate(&tr, key).unwrap();
            assert!(((fit.rate - lam) / lam).abs() < 0.02, "{key:?}: {} vs {lam}", fit.rate);
            assert!(!fit.poor_fit);
        }
        let half = evolve_perturbation(&w0, &op, 0.0, 20.0, spec(), EvolveOptions { dt: 0.05, record_every: 10, ..opts }).unwrap();
        let a = tr.norms.last().unwrap();
        let b = half.norms.last().unwrap();
        for (x, y) in a.iter().zip(b) {
            assert!(((x - y) / y).abs() < 1e-4);
        }
    }

    #[test]
    fn deviation_from_linear_flow_is_quadratic() {
        let op = operator(1.0);
        let v = top_eigenpairs(&op, 1).unwrap().eigenfields.remove(0);
        let opts = EvolveOptions { dt: 0.1, record_every: 50, ..Default::default() };
        let mut pts = Vec::new();
        for &a in &[1e-4, 1e-5, 1e-6] {
            let w0 = v.scaled(a);
            let nl = evolve_perturbation(&w0, &op, 0.0, 5.0, spec(), opts).unwrap();
            let lin = evolve_perturbation(&w0, &op, 0.0, 5.0, spec(), EvolveOptions { linear: true, ..opts }).unwrap();
            let diff = nl.last().unwrap().axpy(-1.0, lin.last().unwrap());
            pts.push((a.ln(), lp_norm(&diff, 2.0).unwrap().ln()));
        }
        let slope = crate::spectrum::fit_slope(&pts);
        assert!((slope - 2.0).abs() < 0.2, "{slope}");
    }

    #[test]
    fn growth_rate_on_synthetic_series() {
        let grid = Arc::new(RadialGrid::new(3, 1.0, 16, 1.0).unwrap());
        let mut tr = Trajectory::new();
        let mut flat = Trajectory::new();
        for k in 0..40 {
            let t = 0.25 * k as f64;
            let v = (0.3 * t).exp();
            tr.push(t, RadialField::zeros(grid.clone()), [v; 5]);
            flat.push(t, RadialField::zeros(grid.clone()), [2.0; 5]);
        }
        assert!((growth_rate(&tr, NormKey::Gamma).unwrap().rate - 0.3).abs() < 1e-6);
        assert!(growth_rate(&flat, NormKey::Gamma).unwrap().rate.abs() < 1e-12);
        let mut short = Trajectory::new();
        short.push(0.0, RadialField::zeros(grid.clone()), [1.0; 5]);
        assert!(growth_rate(&short, NormKey::Eta).is_err());
        let mut zero = tr.clone();
        zero.norms[30][1] = 0.0;
        assert!(growth_rate(&zero, NormKey::Gamma).is_err());
    }

    #[test]
    fn ancient_surrogate_bounds_and_shift() {
        let op = operator(1.0);
        let rep = top_eigenpairs(&op, 1).unwrap();
        let lam = lambda_max(&op);
        let ulin = &rep.eigenfields[0];
        let (ts, te) = (-10.0 / lam, 0.0);
        let opts = EvolveOptions { dt: 0.2, record_every: 10, ..Default::default() };
        let run = approximate_ancient_solution(&op, ulin, lam, 0.1, ts, te, spec(), opts).unwrap();
        assert!(run.upper_bound_holds && run.lower_bound_holds);
        assert!(((run.fitted_rate - lam) / lam).abs() < 0.1);
        let first = run.trajectory.norms[0][NormKey::EtaGamma.column()];
        let last = run.trajectory.norms.last().unwrap()[NormKey::EtaGamma.column()];
        let want = (-lam * (te - ts)).exp();
        assert!(((first / last) / want - 1.0).abs() < 0.1);

        let smaller = approximate_ancient_solution(&op, ulin, lam, 0.01, ts, te, spec(), opts).unwrap();
        let shift = smaller.shift - run.shift;
        let want = 10f64.ln() / lam;
        assert!(((shift - want) / want).abs() < 0.05, "{shift} vs {want}");

        let wrong = approximate_ancient_solution(&op, ulin, 2.0 * lam, 0.1, ts, te, spec(), opts).unwrap();
        assert!(!wrong.lower_bound_holds);
    }
}
