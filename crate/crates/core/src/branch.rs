//! Two distinct solutions from one compactly supported datum.
//!
//! With `ū` the expander, `u'` the transported ancient solution and `z` the
//! stochastic convolution, the branches are `u₁ = z + ū - w₁` and
//! `u₂ = z + ū + u' - w₂`, where each `w` solves the auxiliary problem
//! `∂_t w = Δw + p|ū|^{p-1}w + f̃(w)`, `w(0) = ũ₀ - u₀`, by Picard iteration
//! up to a stopping time read off the monitored norms of `z`.

use std::sync::Arc;

use crate::noise::{
    build_noise_coloring, default_decay_exponent, required_smoothness, sample_mode_path, MonitorState, NoiseColoring,
    PathMonitor, StopClause, StoppingTimeRecord,
};
use crate::numerics::{expm, lp_norm, RadialField, RadialGrid};
use crate::profile::{critical_exponent, integrate_profile, validate_power_range, PowerClass, ProfileSolution};
use crate::simvar::{approximate_ancient_solution, AncientSurrogate, EvolveOptions, NormSpec};
use crate::spectrum::{assemble_linearized_on, find_small_unstable_alpha, top_eigenpairs, SmallSearch, SpectralGrid};
use crate::{gate, numerical, Result};

/// Fields sampled on a common time list.
#[derive(Debug, Clone)]
pub struct FieldSeries {
    pub times: Vec<f64>,
    pub fields: Vec<RadialField>,
}

impl FieldSeries {
    pub fn new(times: Vec<f64>, fields: Vec<RadialField>) -> Self {
        assert_eq!(times.len(), fields.len());
        FieldSeries { times, fields }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Samples with `t <= t_max`.
    pub fn truncated(&self, t_max: f64) -> FieldSeries {
        let k = self.times.partition_point(|&t| t <= t_max);
        FieldSeries { times: self.times[..k].to_vec(), fields: self.fields[..k].to_vec() }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ZNorm {
    pub value: f64,
    pub sup_r: f64,
    pub sup_weighted: f64,
    /// `t^a ‖w(t)‖_{L^{pr}}` is negligible at the earliest positive sample, or decays towards
    /// `t = 0` at least like `t^{a/2}` over the earliest decade.
    pub vanishes_at_zero: bool,
}

/// Weight exponent `(d/2r)((p-1)/p)` of the `L^{pr}` part of the norm.
pub fn z_weight_exponent(p: f64, d: usize, r: f64) -> f64 {
    d as f64 / (2.0 * r) * ((p - 1.0) / p)
}

/// `sup_t ‖w(t)‖_{L^r} + sup_t t^{(d/2r)((p-1)/p)} ‖w(t)‖_{L^{pr}}` over samples in `(0, T]`.
pub fn z_norm(tr: &FieldSeries, p: f64, d: usize, r: f64, t_max: f64) -> Result<ZNorm> {
    let a = z_weight_exponent(p, d, r);
    let mut sup_r: f64 = 0.0;
    let mut sup_w: f64 = 0.0;
    let mut first_weighted = None;
    let mut early = Vec::new();
    for (t, f) in tr.times.iter().zip(&tr.fields) {
        if *t > t_max {
            break;
        }
        sup_r = sup_r.max(lp_norm(f, r)?);
        if *t > 0.0 {
            let wv = t.powf(a) * lp_norm(f, p * r)?;
            sup_w = sup_w.max(wv);
            let t0 = *first_weighted.get_or_insert((*t, wv));
            if *t <= 10.0 * t0.0 {
                early.push((*t, wv));
            }
        }
    }
    if first_weighted.is_none() && tr.times.first().map_or(true, |&t| t > t_max) {
        return gate("z-norm needs at least one sample in (0, T]");
    }
    let vanishes_at_zero = match first_weighted {
        Some((_, v)) => {
            let (ts, vs): (Vec<f64>, Vec<f64>) = early.into_iter().unzip();
            sup_w == 0.0 || v <= 1e-2 * sup_w || (ts.len() >= 3 && loglog_slope(&ts, &vs) >= 0.5 * a)
        }
        None => true,
    };
    Ok(ZNorm { value: sup_r + sup_w, sup_r, sup_weighted: sup_w, vanishes_at_zero })
}

fn nl(x: f64, p: f64) -> f64 {
    x.abs().powf(p - 1.0) * x
}

/// `f̃(w) = -[n(ū+u'-w+z) - n(ū+u') + p|ū|^{p-1}(w-z)] - p|ū|^{p-1}z`, evaluated
/// without the catastrophic cancellation that the singular `ū` would cause.
pub fn forcing_value(w: f64, z: f64, ubar: f64, uprime: f64, p: f64) -> f64 {
    let base = ubar + uprime;
    let delta = z - w;
    let pot_base = p * base.abs().powf(p - 1.0);
    let pot_bar = p * ubar.abs().powf(p - 1.0);
    let remainder = crate::simvar::perturbation_nonlinearity(base, delta, p);
    -((pot_base - pot_bar) * delta + remainder) - pot_bar * z
}

pub fn nonlinear_forcing(w: &RadialField, z: &RadialField, ubar: &RadialField, uprime: &RadialField, p: f64) -> RadialField {
    w.with_values(
        (0..w.values.len())
            .map(|j| forcing_value(w.values[j], z.values[j], ubar.values[j], uprime.values[j], p))
            .collect(),
    )
}

/// Solution map of `∂_t w = Δw + p|ū|^{p-1}w + f`, `w(0) = g`, on a fixed time mesh:
/// exponential midpoint for the potential, trapezoid for the forcing. The potential is
/// dropped on the first interval `[0, t₁]`, where it is not integrable at the origin.
pub struct SingularLinearFlow {
    pub grid: Arc<RadialGrid>,
    pub mesh: Vec<f64>,
    potentials: Vec<Option<Vec<f64>>>,
}

impl SingularLinearFlow {
    /// `profile = None` switches the potential off (plain heat flow).
    pub fn new(grid: Arc<RadialGrid>, profile: Option<&ProfileSolution>, mesh: Vec<f64>) -> Result<Self> {
        if mesh.len() < 2 || mesh[0] != 0.0 || mesh.windows(2).any(|w| !(w[1] > w[0])) {
            return gate("time mesh must start at 0 and increase strictly");
        }
        let n = grid.n();
        let potentials = (0..mesh.len() - 1)
            .map(|k| {
                let ps = profile?;
                if k == 0 {
                    return None;
                }
                let tm = 0.5 * (mesh[k] + mesh[k + 1]);
                let amp = tm.powf(-1.0 / (ps.p - 1.0));
                let st = tm.sqrt();
                let mut v: Vec<f64> =
                    grid.nodes().iter().map(|&r| ps.p * (amp * ps.eval(r / st).0).abs().powf(ps.p - 1.0)).collect();
                v[n - 1] = 0.0;
                Some(v)
            })
            .collect();
        Ok(SingularLinearFlow { grid, mesh, potentials })
    }

    /// `𝒮[g, f]` at every mesh time; `forcing[k]` is `f(t_k)`.
    pub fn solve(&self, g: &[f64], forcing: Option<&[Vec<f64>]>) -> Vec<Vec<f64>> {
        let n = self.grid.n();
        let lap = self.grid.laplacian();
        let mut out = Vec::with_capacity(self.mesh.len());
        out.push(g.to_vec());
        let f_at = |k: usize| -> Option<&Vec<f64>> { forcing.map(|f| &f[k]) };
        for k in 0..self.mesh.len() - 1 {
            let h = self.mesh[k + 1] - self.mesh[k];
            let mut x = out[k].clone();
            if let Some(f) = f_at(k) {
                x.iter_mut().zip(f).take(n - 1).for_each(|(a, b)| *a += 0.5 * h * b);
            }
            let mut y = match &self.potentials[k] {
                Some(v) => {
                    let mut a = lap.clone();
                    a.add_potential(v, true);
                    expm::expm_apply(&a, h, &x)
                }
                None => expm::expm_apply(&lap, h, &x),
            };
            if let Some(f) = f_at(k + 1) {
                y.iter_mut().zip(f).take(n - 1).for_each(|(a, b)| *a += 0.5 * h * b);
            }
            out.push(y);
        }
        out
    }
}

/// `𝒮[w₀, f]` on `mesh` with potential `p|ū|^{p-1}` built from `profile`.
pub fn linear_inhom_solve(
    w0: &RadialField,
    forcing: Option<&[Vec<f64>]>,
    profile: Option<&ProfileSolution>,
    mesh: Vec<f64>,
) -> Result<FieldSeries> {
    let flow = SingularLinearFlow::new(w0.grid.clone(), profile, mesh)?;
    let vals = flow.solve(&w0.values, forcing);
    Ok(FieldSeries::new(flow.mesh.clone(), vals.into_iter().map(|v| w0.with_values(v)).collect()))
}

#[derive(Debug, Clone, Copy)]
pub struct PhysicalGrid {
    pub radius: f64,
    pub n: usize,
    pub grading: f64,
}

impl Default for PhysicalGrid {
    fn default() -> Self {
        // grading 4 keeps a few dozen nodes inside the √t core down to t ~ 1e-16
        PhysicalGrid { radius: 4.0, n: 4096, grading: 4.0 }
    }
}

#[derive(Debug, Clone)]
pub struct NoiseSpec {
    /// `None` takes the smoothness demanded for `(d, p, q)`.
    pub s: Option<f64>,
    pub decay_exponent: Option<f64>,
    pub cutoff: usize,
    pub silent: bool,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec { s: None, decay_exponent: None, cutoff: 200, silent: false }
    }
}

#[derive(Debug, Clone)]
pub struct BranchConfig {
    pub d: usize,
    pub p: f64,
    pub q: f64,
    pub epsilon: f64,
    pub r: f64,
    pub q_a: f64,
    /// `None` asks the spectrum module for a small unstable eigenvalue.
    pub alpha_star: Option<f64>,
    pub lambda_search_eps: f64,
    pub rbar: f64,
    /// `e^T`: end of the ancient-solution window and cap on the stopping time.
    pub horizon: f64,
    /// Smallness of `sup ‖ψ‖_{L^{1,pr}}`.
    pub psi_eps: f64,
    /// Constants `C`, `C'` in the stopping-time clauses.
    pub clause_c: f64,
    pub clause_c_prime: f64,
    pub grid: PhysicalGrid,
    pub spectral_grid: SpectralGrid,
    pub mesh_ratio: f64,
    /// Index of the node whose radius squared sets the earliest mesh time.
    pub floor_node: usize,
    /// Decades below the stopping time used for the separation fit.
    pub fit_decades: f64,
    pub noise: NoiseSpec,
    pub perturbation: Option<RadialField>,
    pub picard_tol: f64,
    pub picard_max_iter: usize,
    /// Iterates taken even after the tolerance is met, so the contraction ratio is observed.
    pub picard_min_iter: usize,
    pub ancient_dt: f64,
}

impl BranchConfig {
    /// Parameters from `(d, p, q)` with `ε` at the midpoint of its admissible interval.
    pub fn new(d: usize, p: f64, q: f64) -> Result<Self> {
        let qc = critical_exponent(d, p)?;
        let lo = d as f64 * (p - 1.0) / (2.0 * q) - p;
        let hi = d as f64 * (p - 1.0) / (2.0 * q) - 1.0;
        let epsilon = 0.5 * (lo.max(0.0) + hi);
        let r = (p + epsilon) * q;
        let cfg = BranchConfig {
            d,
            p,
            q,
            epsilon,
            r,
            q_a: r / p,
            alpha_star: None,
            lambda_search_eps: 0.05,
            rbar: 1.0,
            horizon: 1e-2,
            psi_eps: 0.1,
            clause_c: 1.0,
            clause_c_prime: 1.0,
            grid: PhysicalGrid::default(),
            spectral_grid: SpectralGrid::default(),
            mesh_ratio: 1.05,
            floor_node: 32,
            fit_decades: 5.0,
            noise: NoiseSpec::default(),
            perturbation: None,
            picard_tol: 1e-8,
            picard_max_iter: 60,
            picard_min_iter: 3,
            ancient_dt: 0.2,
        };
        if !(q >= 1.0 && q < qc) {
            return gate(format!("1 <= q < q_c violated: q={q}, q_c={qc}"));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if validate_power_range(self.d, self.p)?.class != PowerClass::JlSubcritical {
            return gate(format!("1+2/d < p < p_JL violated: p={}, d={}", self.p, self.d));
        }
        let qc = critical_exponent(self.d, self.p)?;
        let lo = self.d as f64 * (self.p - 1.0) / (2.0 * self.q) - self.p;
        let hi = self.d as f64 * (self.p - 1.0) / (2.0 * self.q) - 1.0;
        if !(self.epsilon > lo && self.epsilon < hi) {
            return gate(format!("epsilon={} outside ({lo}, {hi})", self.epsilon));
        }
        if !(1.0 <= self.q && self.q < self.q_a && self.q_a < qc && qc < self.r) {
            return gate(format!(
                "1 <= q < q_a < q_c < r violated: q={}, q_a={}, q_c={qc}, r={}",
                self.q, self.q_a, self.r
            ));
        }
        if !(self.rbar > 0.0 && self.rbar < self.grid.radius) {
            return gate(format!("Rbar={} must lie inside the grid radius {}", self.rbar, self.grid.radius));
        }
        if !(self.horizon > 0.0 && self.mesh_ratio > 1.0) {
            return gate("horizon must be positive and mesh ratio above 1");
        }
        let (c, cp, e, p) = (self.clause_c, self.clause_c_prime, self.psi_eps, self.p);
        let ok = if p > 2.0 { c * e <= 0.5 && cp * e.powf(p - 1.0) <= 0.25 } else { c * e.powf(p - 1.0) <= 0.5 && cp * e.powf(p - 1.0) <= 0.25 };
        if !ok {
            return gate(format!("ancient smallness psi_eps={e} too large for C={c}, C'={cp}"));
        }
        Ok(())
    }

    /// `1/(p-1) - d/(2r)`: the unstable eigenvalue must stay below it.
    pub fn instability_cap(&self) -> f64 {
        1.0 / (self.p - 1.0) - self.d as f64 / (2.0 * self.r)
    }

    /// `1/(p-1) - d/(2r) - λ*`.
    pub fn separation_exponent(&self, lambda: f64) -> f64 {
        self.instability_cap() - lambda
    }
}

/// Everything that does not depend on the noise path.
pub struct BranchSetup {
    pub cfg: BranchConfig,
    pub profile: Arc<ProfileSolution>,
    pub alpha: f64,
    pub lambda: f64,
    pub ancient: AncientSurrogate,
    pub grid: Arc<RadialGrid>,
    /// `{0} ∪ {e^T ϑ^{-m}}` down to the floor time.
    pub mesh: Vec<f64>,
    pub u0: RadialField,
    pub w0: RadialField,
    /// `ℓ r^{-2/(p-1)}` on the whole grid.
    pub singular: RadialField,
    /// `M = ‖𝒮[w₀, 0]‖_{Z^{e^T}}`.
    pub m: f64,
    pub coloring: NoiseColoring,
    pub s_required: f64,
    pub s_binds_at_zero: bool,
}

impl BranchSetup {
    pub fn prepare(cfg: BranchConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, p) = (cfg.d, cfg.p);
        let cap = cfg.instability_cap();
        let alpha = match cfg.alpha_star {
            Some(a) => a,
            None => {
                let search = SmallSearch { cap: Some(cap), grid: cfg.spectral_grid, ..Default::default() };
                find_small_unstable_alpha(p, d, cfg.lambda_search_eps, 1.0, search)?.alpha
            }
        };
        let profile = Arc::new(integrate_profile(alpha, p, d, 40.0, 20000)?);
        let op = assemble_linearized_on(Some(profile.clone()), p, d, 1.0, cfg.spectral_grid.build(d)?)?;
        let rep = top_eigenpairs(&op, 1)?;
        let lambda = rep.eigenvalues[0];
        if !(lambda > 0.0 && lambda < cap) {
            return gate(format!("need 0 < lambda* < 1/(p-1) - d/(2r) = {cap}, got {lambda} at alpha={alpha}"));
        }

        let grid = Arc::new(RadialGrid::new(d, cfg.grid.radius, cfg.grid.n, cfg.grid.grading)?);
        let t_floor = grid.nodes()[cfg.floor_node.min(grid.n() - 1)].powi(2);
        if !(t_floor < cfg.horizon) {
            return gate("floor time exceeds the horizon");
        }
        let mut mesh = vec![cfg.horizon];
        while let Some(&t) = mesh.last() {
            let next = t / cfg.mesh_ratio;
            if next < t_floor {
                break;
            }
            mesh.push(next);
        }
        mesh.push(0.0);
        mesh.reverse();

        // ancient solution over the whole mesh window, in the linear regime long before e^T
        let norms = NormSpec::new(1.0, p * cfg.r, p)?;
        let tau_end = cfg.horizon.ln();
        let span = (10.0 / lambda).max(tau_end - mesh[1].ln() + 1.0);
        let opts = EvolveOptions { dt: cfg.ancient_dt, record_every: 1, ..Default::default() };
        let ancient =
            approximate_ancient_solution(&op, &rep.eigenfields[0], lambda, cfg.psi_eps, tau_end - span, tau_end, norms, opts)?;
        if !ancient.upper_bound_holds {
            return numerical("ancient surrogate left the eps-ball before e^T");
        }

        let a = 2.0 / (p - 1.0);
        let ell = profile.ell;
        let singular = RadialField::from_fn(grid.clone(), |r| ell * r.powf(-a));
        let mut u0 = singular.with_values(
            grid.nodes().iter().zip(&singular.values).map(|(&r, &v)| if r <= cfg.rbar { v } else { 0.0 }).collect(),
        );
        if let Some(v0) = &cfg.perturbation {
            u0 = u0.axpy(1.0, &v0.resample(&grid));
        }
        let w0 = singular.axpy(-1.0, &u0);

        let flow = SingularLinearFlow::new(grid.clone(), Some(&profile), mesh.clone())?;
        let free = flow.solve(&w0.values, None);
        let series = FieldSeries::new(mesh.clone(), free.into_iter().map(|v| w0.with_values(v)).collect());
        let m = z_norm(&series, p, d, cfg.r, cfg.horizon)?.value;

        let (s_required, s_binds_at_zero) = required_smoothness(d, p, cfg.q);
        let s = cfg.noise.s.unwrap_or(s_required);
        let beta = cfg.noise.decay_exponent.unwrap_or_else(|| default_decay_exponent(d, s));
        let mut coloring = build_noise_coloring(grid.clone(), s, cfg.q, beta, cfg.noise.cutoff)?;
        if cfg.noise.silent {
            coloring = coloring.silenced();
        }
        Ok(BranchSetup {
            cfg,
            profile,
            alpha,
            lambda,
            ancient,
            grid,
            mesh,
            u0,
            w0,
            singular,
            m,
            coloring,
            s_required,
            s_binds_at_zero,
        })
    }

    /// `ψ(τ)` by linear interpolation between recorded steps.
    pub fn psi_at(&self, tau: f64) -> Result<RadialField> {
        let tr = &self.ancient.trajectory;
        let k = tr.times.partition_point(|&t| t < tau);
        if k == 0 || k >= tr.times.len() {
            return gate(format!("tau={tau} outside the ancient window"));
        }
        let (t0, t1) = (tr.times[k - 1], tr.times[k]);
        let s = (tau - t0) / (t1 - t0);
        Ok(tr.fields[k - 1].scaled(1.0 - s).axpy(s, &tr.fields[k]))
    }

    /// `u'(t) = t^{-1/(p-1)} ψ(ln t, ·/√t)` on the physical grid.
    pub fn uprime_at(&self, t: f64) -> Result<RadialField> {
        let psi = self.psi_at(t.ln())?;
        crate::simvar::from_similarity_on(&psi, t, self.cfg.p, &self.grid)
    }

    /// `ū(t)`, with the singular datum at `t = 0`.
    pub fn ubar_at(&self, t: f64) -> Result<RadialField> {
        if t == 0.0 {
            return Ok(self.singular.clone());
        }
        crate::profile::physical_self_similar(&self.profile, t, &self.grid)
    }

    /// The stopping-time clauses of the fixed-point argument.
    pub fn clauses(&self) -> Vec<StopClause<'static>> {
        let BranchConfig { p, d, r, clause_c: c, clause_c_prime: cp, .. } = self.cfg;
        let m = self.m;
        let zn = |s: &MonitorState| s.running_max[1] + s.running_max[2];
        if p > 2.0 {
            let a = 1.0 / (p - 1.0) - d as f64 / (2.0 * r);
            vec![
                StopClause::new("self-map", m / 2.0, move |s: &MonitorState| {
                    let z = zn(s);
                    c * (z + s.t.powf(a) * (m * m + m.powf(p) + z * z + z.powf(p)))
                }),
                StopClause::new("contraction", 0.25, move |s: &MonitorState| {
                    let z = zn(s);
                    cp * s.t.powf(a) * (m + m.powf(p - 1.0) + z + z.powf(p - 1.0))
                }),
            ]
        } else {
            let b = 1.0 - d as f64 * (p - 1.0) / (2.0 * r);
            vec![
                StopClause::new("self-map", m / 2.0, move |s: &MonitorState| {
                    let z = zn(s);
                    c * (z + s.t.powf(b) * (m.powf(p) + z.powf(p)))
                }),
                StopClause::new("contraction", 0.25, move |s: &MonitorState| {
                    let z = zn(s);
                    cp * s.t.powf(b) * (m.powf(p - 1.0) + z.powf(p - 1.0))
                }),
            ]
        }
    }
}

#[derive(Debug, Clone)]
pub struct PicardReport {
    pub iterations: usize,
    pub residuals: Vec<f64>,
    /// `residual[k] / residual[k-1]` from the second iterate on.
    pub ratios: Vec<f64>,
    pub contraction_ok: bool,
    /// `‖w‖_{Z^{T'}} / ‖w₀‖_{L^r}`.
    pub energy_ratio: f64,
    pub vanishing_weight: bool,
}

/// Residuals below this multiple of `M` are treated as round-off and end the certificate.
const ROUNDOFF_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct BranchResult {
    pub seed: u64,
    pub stop: StoppingTimeRecord,
    pub times: Vec<f64>,
    pub w1: FieldSeries,
    pub w2: FieldSeries,
    pub u1: FieldSeries,
    pub u2: FieldSeries,
    /// The noise path `z` on `times`.
    pub z: FieldSeries,
    pub z_monitor: PathMonitor,
    /// `‖u₁(t) - u₂(t)‖_{L^r}`, aligned with `times`.
    pub separation: Vec<f64>,
    pub fitted_slope: f64,
    pub expected_slope: f64,
    pub picard: [PicardReport; 2],
    /// `(t, residual of u₁, residual of u₂)` at the probe times.
    pub duhamel: Vec<(f64, f64, f64)>,
}

impl BranchResult {
    pub fn separation_csv(&self) -> String {
        let mut s = String::from("t,sep_Lr\n");
        for (t, v) in self.times.iter().zip(&self.separation).skip(1) {
            s.push_str(&format!("{t:.12e},{v:.12e}\n"));
        }
        s
    }

    /// Continuity of `u_i - z` in `L^q`; `z` is continuous on its own.
    pub fn continuity(&self, q: f64) -> Result<[ContinuityReport; 2]> {
        let mild = |u: &FieldSeries| {
            let fields = u.fields.iter().zip(&self.z.fields).map(|(a, b)| a.axpy(-1.0, b)).collect();
            continuity_diagnostic(&FieldSeries::new(u.times.clone(), fields), q)
        };
        Ok([mild(&self.u1)?, mild(&self.u2)?])
    }

    pub fn max_duhamel_residual(&self) -> f64 {
        self.duhamel.iter().map(|r| r.1.max(r.2)).fold(0.0, f64::max)
    }
}

struct Drivers {
    times: Vec<f64>,
    z: Vec<RadialField>,
    ubar: Vec<RadialField>,
}

fn solve_w_on(
    setup: &BranchSetup,
    flow: &SingularLinearFlow,
    drivers: &Drivers,
    uprime: &[RadialField],
) -> Result<(FieldSeries, PicardReport)> {
    let cfg = &setup.cfg;
    let (p, d, r) = (cfg.p, cfg.d, cfg.r);
    let t_end = *drivers.times.last().unwrap();
    let base = flow.solve(&setup.w0.values, None);
    let as_series = |vals: &[Vec<f64>]| {
        FieldSeries::new(drivers.times.clone(), vals.iter().map(|v| setup.w0.with_values(v.clone())).collect())
    };
    let mut w = base.clone();
    let mut residuals = Vec::new();
    let mut ratios = Vec::new();
    let mut hot_streak = 0;
    for it in 1..=cfg.picard_max_iter {
        let forcing: Vec<Vec<f64>> = (0..drivers.times.len())
            .map(|k| {
                (0..w[k].len())
                    .map(|j| {
                        forcing_value(w[k][j], drivers.z[k].values[j], drivers.ubar[k].values[j], uprime[k].values[j], p)
                    })
                    .collect()
            })
            .collect();
        let duhamel = flow.solve(&vec![0.0; setup.grid.n()], Some(&forcing));
        let next: Vec<Vec<f64>> =
            base.iter().zip(&duhamel).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect();
        let diff: Vec<Vec<f64>> =
            next.iter().zip(&w).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect()).collect();
        let res = z_norm(&as_series(&diff), p, d, r, t_end)?.value;
        if !res.is_finite() {
            return numerical(format!("Picard iterate {it} is not finite"));
        }
        if let Some(&prev) = residuals.last() {
            if prev > ROUNDOFF_FLOOR * setup.m {
                let ratio: f64 = res / prev;
                ratios.push(ratio);
                hot_streak = if ratio > 0.9 { hot_streak + 1 } else { 0 };
                if hot_streak >= 3 {
                    return numerical(format!("Picard ratios above 0.9 for 3 iterates: {ratios:?}"));
                }
            }
        }
        residuals.push(res);
        w = next;
        if res < cfg.picard_tol && (it >= cfg.picard_min_iter || res <= ROUNDOFF_FLOOR * setup.m) {
            let series = as_series(&w);
            let zn = z_norm(&series, p, d, r, t_end)?;
            let w0n = lp_norm(&setup.w0, r)?;
            let report = PicardReport {
                iterations: it,
                contraction_ok: ratios.iter().all(|&q| q <= 0.6),
                residuals,
                ratios,
                energy_ratio: if w0n > 0.0 { zn.value / w0n } else { 0.0 },
                vanishing_weight: zn.vanishes_at_zero,
            };
            return Ok((series, report));
        }
    }
    numerical(format!("Picard did not reach {} in {} iterations: {residuals:?}", cfg.picard_tol, cfg.picard_max_iter))
}

/// Relative Duhamel residual of `u` at `probes`:
/// `‖u(t) - z(t) - e^{tΔ}u₀ - ∫₀ᵗ e^{(t-s)Δ} n(u(s)) ds‖_{L^q} / ‖u(t)‖_{L^q}`.
pub fn duhamel_residuals(u: &FieldSeries, z: &[RadialField], u0: &RadialField, p: f64, q: f64, probes: &[usize]) -> Result<Vec<f64>> {
    let grid = &u0.grid;
    let n = grid.n();
    let lap = grid.laplacian();
    let nl_at = |k: usize| -> Vec<f64> {
        let mut v: Vec<f64> = u.fields[k].values.iter().map(|&x| nl(x, p)).collect();
        v[n - 1] = 0.0;
        v
    };
    let mut out = Vec::with_capacity(probes.len());
    let last = probes.iter().copied().max().unwrap_or(0);
    // right-endpoint rule on [0, t₁] avoids evaluating n(u₀) at the singular origin
    let t1 = u.times[1];
    let mut dk = expm::expm_apply(&lap, t1, &u0.values);
    let mut nk = nl_at(1);
    dk.iter_mut().zip(&nk).take(n - 1).for_each(|(a, b)| *a += t1 * b);
    let mut residual_at = |k: usize, dk: &[f64]| -> Result<()> {
        if probes.contains(&k) {
            let diff = u.fields[k].with_values(
                (0..n).map(|j| u.fields[k].values[j] - z[k].values[j] - dk[j]).collect(),
            );
            out.push(lp_norm(&diff, q)? / lp_norm(&u.fields[k], q)?.max(f64::MIN_POSITIVE));
        }
        Ok(())
    };
    residual_at(1, &dk)?;
    for k in 1..last {
        let h = u.times[k + 1] - u.times[k];
        let mut x = dk.clone();
        x.iter_mut().zip(&nk).take(n - 1).for_each(|(a, b)| *a += 0.5 * h * b);
        dk = expm::expm_apply(&lap, h, &x);
        nk = nl_at(k + 1);
        dk.iter_mut().zip(&nk).take(n - 1).for_each(|(a, b)| *a += 0.5 * h * b);
        residual_at(k + 1, &dk)?;
    }
    Ok(out)
}

/// Least-squares slope of `ln y` against `ln t`.
pub fn loglog_slope(times: &[f64], values: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> =
        times.iter().zip(values).filter(|(t, v)| **t > 0.0 && **v > 0.0).map(|(t, v)| (t.ln(), v.ln())).collect();
    crate::spectrum::fit_slope(&pts)
}

/// `which = 1` solves with `u' = 0`, `which = 2` with the transported ancient solution.
pub fn solve_w(setup: &BranchSetup, which: u8, seed: u64) -> Result<(FieldSeries, PicardReport, StoppingTimeRecord)> {
    let (drivers, stop, _) = drive(setup, seed)?;
    let flow = SingularLinearFlow::new(setup.grid.clone(), Some(&setup.profile), drivers.times.clone())?;
    let up = uprimes(setup, &drivers.times, which)?;
    let (w, rep) = solve_w_on(setup, &flow, &drivers, &up)?;
    Ok((w, rep, stop))
}

fn uprimes(setup: &BranchSetup, times: &[f64], which: u8) -> Result<Vec<RadialField>> {
    times
        .iter()
        .map(|&t| {
            if which == 1 || t == 0.0 {
                Ok(RadialField::zeros(setup.grid.clone()))
            } else {
                setup.uprime_at(t)
            }
        })
        .collect()
}

fn drive(setup: &BranchSetup, seed: u64) -> Result<(Drivers, StoppingTimeRecord, PathMonitor)> {
    let cfg = &setup.cfg;
    let mut rng = crate::rng::path_rng(seed, 0);
    let path = sample_mode_path(&setup.coloring, &setup.mesh, &mut rng)?;
    let exps = [cfg.q, cfg.r, cfg.p * cfg.r];
    let z_full: Vec<RadialField> = (0..setup.mesh.len()).map(|k| path.field(&setup.coloring, k)).collect();
    let norms: Vec<Vec<f64>> = z_full
        .iter()
        .map(|f| exps.iter().map(|&e| lp_norm(f, e)).collect::<Result<Vec<f64>>>())
        .collect::<Result<_>>()?;
    let monitor = PathMonitor::from_norms(exps.to_vec(), setup.mesh.clone(), norms);
    let stop = crate::noise::stopping_time(&monitor, &setup.clauses(), cfg.horizon)?;
    let k_end = setup.mesh.partition_point(|&t| t <= stop.value);
    if k_end < 3 {
        return numerical(format!("stopping time {} leaves no usable mesh", stop.value));
    }
    let times = setup.mesh[..k_end].to_vec();
    let ubar = times.iter().map(|&t| setup.ubar_at(t)).collect::<Result<Vec<_>>>()?;
    let z = z_full[..k_end].to_vec();
    Ok((Drivers { times, z, ubar }, stop, monitor))
}

/// Both branches for one noise path.
pub fn assemble_branches(setup: &BranchSetup, seed: u64) -> Result<BranchResult> {
    let cfg = &setup.cfg;
    let (p, r) = (cfg.p, cfg.r);
    let (drivers, stop, z_monitor) = drive(setup, seed)?;
    let times = drivers.times.clone();
    let flow = SingularLinearFlow::new(setup.grid.clone(), Some(&setup.profile), times.clone())?;
    let up1 = uprimes(setup, &times, 1)?;
    let up2 = uprimes(setup, &times, 2)?;
    let ((w1, rep1), (w2, rep2)) = {
        let (a, b) = rayon::join(
            || solve_w_on(setup, &flow, &drivers, &up1),
            || solve_w_on(setup, &flow, &drivers, &up2),
        );
        (a?, b?)
    };
    let build = |w: &FieldSeries, up: &[RadialField]| -> FieldSeries {
        let fields = (0..times.len())
            .map(|k| {
                let v = (0..setup.grid.n())
                    .map(|j| drivers.z[k].values[j] + drivers.ubar[k].values[j] + up[k].values[j] - w.fields[k].values[j])
                    .collect();
                setup.w0.with_values(v)
            })
            .collect();
        FieldSeries::new(times.clone(), fields)
    };
    let u1 = build(&w1, &up1);
    let u2 = build(&w2, &up2);
    let separation: Vec<f64> = (0..times.len())
        .map(|k| lp_norm(&u1.fields[k].axpy(-1.0, &u2.fields[k]), r))
        .collect::<Result<_>>()?;
    let t_stop = *times.last().unwrap();
    let t_lo = t_stop * 10f64.powf(-cfg.fit_decades);
    let window: Vec<usize> = (1..times.len()).filter(|&k| times[k] >= t_lo).collect();
    let fitted_slope = loglog_slope(
        &window.iter().map(|&k| times[k]).collect::<Vec<_>>(),
        &window.iter().map(|&k| separation[k]).collect::<Vec<_>>(),
    );
    let probes: Vec<usize> = (0..10).map(|i| window[(i * (window.len() - 1)) / 9]).collect();
    let d1 = duhamel_residuals(&u1, &drivers.z, &setup.u0, p, cfg.q, &probes)?;
    let d2 = duhamel_residuals(&u2, &drivers.z, &setup.u0, p, cfg.q, &probes)?;
    let duhamel = probes.iter().zip(d1.iter().zip(&d2)).map(|(&k, (a, b))| (times[k], *a, *b)).collect();
    let z = FieldSeries::new(times.clone(), drivers.z);
    Ok(BranchResult {
        seed,
        stop,
        times,
        w1,
        w2,
        u1,
        u2,
        z,
        z_monitor,
        separation,
        fitted_slope,
        expected_slope: -cfg.separation_exponent(setup.lambda),
        picard: [rep1, rep2],
        duhamel,
    })
}

#[derive(Debug, Clone)]
pub struct ContinuityReport {
    /// Largest `‖u(t_{k+1}) - u(t_k)‖_{L^q}` per level, coarsest first.
    pub moduli: Vec<f64>,
    pub ratios: Vec<f64>,
    pub passes: bool,
    /// Time at which each level's largest increment starts.
    pub worst_at: Vec<f64>,
}

/// Moduli of continuity in `L^q` on the sample list and its 2- and 4-fold coarsenings.
pub fn continuity_diagnostic(u: &FieldSeries, q: f64) -> Result<ContinuityReport> {
    continuity_from_increments(&u.times, |i, j| lp_norm(&u.fields[j].axpy(-1.0, &u.fields[i]), q))
}

/// Same diagnostic for any sampled path, given the distance between samples `i` and `j`.
pub fn continuity_from_increments(times: &[f64], mut dist: impl FnMut(usize, usize) -> Result<f64>) -> Result<ContinuityReport> {
    if times.len() < 9 {
        return gate("continuity diagnostic needs at least 9 samples");
    }
    let mut moduli = Vec::new();
    let mut worst_at = Vec::new();
    for stride in [4usize, 2, 1] {
        let idx: Vec<usize> = (0..times.len()).step_by(stride).collect();
        let mut best = (0.0f64, times[0]);
        for w in idx.windows(2) {
            let m = dist(w[0], w[1])?;
            if m > best.0 {
                best = (m, times[w[0]]);
            }
        }
        moduli.push(best.0);
        worst_at.push(best.1);
    }
    let ratios: Vec<f64> = moduli.windows(2).map(|w| if w[1] > 0.0 { w[0] / w[1] } else { f64::INFINITY }).collect();
    let passes = moduli.iter().all(|&m| m == 0.0) || ratios.iter().all(|&r| r >= 1.3);
    Ok(ContinuityReport { moduli, ratios, passes, worst_at })
}
