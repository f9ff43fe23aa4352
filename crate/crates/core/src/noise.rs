//! Colored radial Wiener process `W = JB`, its stochastic convolution
//! `z(t) = ∫₀ᵗ e^{(t-s)Δ} dW_s`, path monitoring and stopping times.
//!
//! `J` is diagonal in the eigenbasis of the discrete Dirichlet Laplacian on
//! the radial grid, so every mode of `z` is an independent Ornstein–Uhlenbeck
//! process and can be advanced exactly over any time increment.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::numerics::eig::SymTridiag;
use crate::numerics::{lp_norm, sphere_area, RadialField, RadialGrid};
use crate::{gate, Result};

/// Smoothness demanded of the noise: `max(0, (d/q)(1 - 2q/(p(p-1)(d+2q))) - 1)`.
/// The flag reports whether the outer max binds at zero.
pub fn required_smoothness(d: usize, p: f64, q: f64) -> (f64, bool) {
    let df = d as f64;
    let raw = (df / q) * (1.0 - 2.0 * q / (p * (p - 1.0) * (df + 2.0 * q))) - 1.0;
    (raw.max(0.0), raw <= 0.0)
}

/// One full derivative of margin over the `s`-weighted square summability.
pub fn default_decay_exponent(d: usize, s: f64) -> f64 {
    s + d as f64 / 2.0 + 1.0
}

#[derive(Debug, Clone)]
pub struct NoiseColoring {
    pub grid: Arc<RadialGrid>,
    /// Eigenvalues of `-Δ`, ascending.
    pub mu: Vec<f64>,
    /// Eigenfunctions at the nodes, orthonormal in `⟨f, g⟩ = ω_{d-1} Σ V_j f_j g_j`.
    pub modes: Vec<Vec<f64>>,
    pub sigmas: Vec<f64>,
    pub s_target: f64,
    pub q_target: f64,
    pub decay_exponent: f64,
    /// Estimated `Σ_{j>J} / Σ_{j≤J}` of `σ_j²(1+μ_j)^s`.
    pub tail_ratio: f64,
}

impl NoiseColoring {
    pub fn cutoff(&self) -> usize {
        self.mu.len()
    }

    /// Same modes with all amplitudes zero.
    pub fn silenced(&self) -> Self {
        NoiseColoring { sigmas: vec![0.0; self.sigmas.len()], ..self.clone() }
    }

    pub fn is_silent(&self) -> bool {
        self.sigmas.iter().all(|&s| s == 0.0)
    }

    /// Discrete inner product the modes are orthonormal in.
    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        let vol = self.grid.cell_volumes(0.0);
        sphere_area(self.grid.d()) * (0..self.grid.n()).map(|j| vol[j] * f[j] * g[j]).sum::<f64>()
    }

    /// `Σ_j c_j e_j`.
    pub fn synthesize(&self, coeffs: &[f64]) -> RadialField {
        let mut v = vec![0.0; self.grid.n()];
        for (c, e) in coeffs.iter().zip(&self.modes) {
            if *c != 0.0 {
                v.iter_mut().zip(e).for_each(|(a, b)| *a += c * b);
            }
        }
        RadialField::new(self.grid.clone(), v)
    }

    /// Per-node variance `dt Σ_j σ_j² e_j(ρ)²` of a Wiener increment.
    pub fn increment_variance(&self, dt: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.grid.n()];
        for (s, e) in self.sigmas.iter().zip(&self.modes) {
            v.iter_mut().zip(e).for_each(|(a, b)| *a += dt * s * s * b * b);
        }
        v
    }

    /// Mode variances `E z_j(t)²`.
    pub fn ou_variances(&self, t: f64) -> Vec<f64> {
        self.mu.iter().zip(&self.sigmas).map(|(&m, &s)| ou_variance(m, s, t)).collect()
    }

    /// `E‖z(t)‖²_{L²}` by Parseval.
    pub fn expected_energy(&self, t: f64) -> f64 {
        self.ou_variances(t).iter().sum()
    }
}

/// `σ²(1 - e^{-2μt})/(2μ)`, continuous at `μ = 0`.
pub fn ou_variance(mu: f64, sigma: f64, t: f64) -> f64 {
    let x = 2.0 * mu * t;
    let factor = if x.abs() < 1e-8 { t * (1.0 - 0.5 * x) } else { -(-x).exp_m1() / (2.0 * mu) };
    sigma * sigma * factor
}

pub fn build_noise_coloring(grid: Arc<RadialGrid>, s: f64, q: f64, decay_exponent: f64, cutoff: usize) -> Result<NoiseColoring> {
    if !(s >= 0.0) {
        return gate(format!("smoothness s={s} must be >= 0"));
    }
    if !(q >= 1.0) {
        return gate(format!("integrability q={q} must be >= 1"));
    }
    let n = grid.n();
    if cutoff == 0 || cutoff > n - 1 {
        return gate(format!("mode cutoff {cutoff} must lie in 1..={}", n - 1));
    }
    let excess = 2.0 * (decay_exponent - s);
    if !(excess > 1.0) {
        return gate(format!(
            "decay exponent {decay_exponent} gives a divergent s-weighted series (2(beta-s)={excess} <= 1)"
        ));
    }
    let lap = grid.laplacian();
    let vol = grid.cell_volumes(0.0);
    let cond = grid.conductances(0.0);
    let m = n - 1;
    let sym = SymTridiag {
        diag: (0..m).map(|j| lap.diag[j]).collect(),
        off: (0..m - 1).map(|j| cond[j] / (vol[j] * vol[j + 1]).sqrt()).collect(),
    };
    let omega = sphere_area(grid.d());
    let mut mu = Vec::with_capacity(cutoff);
    let mut modes = Vec::with_capacity(cutoff);
    for (lambda, y) in sym.top(cutoff) {
        mu.push(-lambda);
        let mut e: Vec<f64> = y.iter().zip(&vol).map(|(a, v)| a / (omega * v).sqrt()).collect();
        e.push(0.0);
        // fix the sign so draws are reproducible across builds
        if e[0] < 0.0 {
            e.iter_mut().for_each(|x| *x = -*x);
        }
        modes.push(e);
    }
    let sigmas: Vec<f64> = mu.iter().map(|m| (1.0 + m).powf(-decay_exponent / 2.0)).collect();
    let terms: Vec<f64> = mu.iter().zip(&sigmas).map(|(m, sg)| sg * sg * (1.0 + m).powf(s)).collect();
    let partial: f64 = terms.iter().sum();
    // terms behave like j^{-2(β-s)} (Weyl), so the tail is about T_J J / (2(β-s) - 1)
    let tail = terms[cutoff - 1] * cutoff as f64 / (excess - 1.0);
    let tail_ratio = tail / partial;
    if tail_ratio >= 1e-3 {
        return gate(format!("noise tail not negligible at cutoff {cutoff}: tail/partial = {tail_ratio:.3e}"));
    }
    Ok(NoiseColoring { grid, mu, modes, sigmas, s_target: s, q_target: q, decay_exponent, tail_ratio })
}

/// `Σ_j σ_j √dt ξ_j e_j`.
pub fn sample_wiener_increment<R: Rng>(nc: &NoiseColoring, dt: f64, rng: &mut R) -> Result<RadialField> {
    if !(dt >= 0.0) {
        return gate(format!("dt={dt} must be non-negative"));
    }
    let coeffs: Vec<f64> = nc
        .sigmas
        .iter()
        .map(|s| {
            let xi: f64 = rng.sample(StandardNormal);
            s * dt.sqrt() * xi
        })
        .collect();
    Ok(nc.synthesize(&coeffs))
}

/// Mode coefficients of `z` at the sampled times, with the normal draws that produced them.
#[derive(Debug, Clone)]
pub struct ModePath {
    pub times: Vec<f64>,
    pub coeffs: Vec<Vec<f64>>,
    /// `draws[k]` drove the step from `times[k]` to `times[k+1]`.
    pub draws: Vec<Vec<f64>>,
}

impl ModePath {
    pub fn field(&self, nc: &NoiseColoring, k: usize) -> RadialField {
        nc.synthesize(&self.coeffs[k])
    }

    /// Restriction to every `stride`-th sample (the same Brownian path, coarser).
    pub fn subsample(&self, stride: usize) -> ModePath {
        let idx: Vec<usize> = (0..self.times.len()).step_by(stride.max(1)).collect();
        ModePath {
            times: idx.iter().map(|&k| self.times[k]).collect(),
            coeffs: idx.iter().map(|&k| self.coeffs[k].clone()).collect(),
            draws: Vec::new(),
        }
    }
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.first() != Some(&0.0) {
        return gate("time list must start at 0");
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return gate("time list must be strictly increasing");
    }
    Ok(())
}

/// Exact OU update of every mode across the given times, `z(0) = 0`.
pub fn sample_mode_path<R: Rng>(nc: &NoiseColoring, times: &[f64], rng: &mut R) -> Result<ModePath> {
    check_times(times)?;
    let draws: Vec<Vec<f64>> = (1..times.len())
        .map(|_| (0..nc.cutoff()).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    replay_mode_path(nc, times, draws)
}

/// Rebuilds a path from recorded draws.
pub fn replay_mode_path(nc: &NoiseColoring, times: &[f64], draws: Vec<Vec<f64>>) -> Result<ModePath> {
    check_times(times)?;
    if draws.len() + 1 != times.len() {
        return gate("one draw vector per time step is required");
    }
    let mut coeffs = Vec::with_capacity(times.len());
    let mut c = vec![0.0; nc.cutoff()];
    coeffs.push(c.clone());
    for (k, xi) in draws.iter().enumerate() {
        let h = times[k + 1] - times[k];
        for j in 0..c.len() {
            let decay = (-nc.mu[j] * h).exp();
            c[j] = decay * c[j] + ou_variance(nc.mu[j], nc.sigmas[j], h).sqrt() * xi[j];
        }
        coeffs.push(c.clone());
    }
    Ok(ModePath { times: times.to_vec(), coeffs, draws })
}

/// Norm records of `z` in `L^{e}` for each monitored exponent, with running maxima.
#[derive(Debug, Clone)]
pub struct PathMonitor {
    pub exponents: Vec<f64>,
    pub times: Vec<f64>,
    pub norms: Vec<Vec<f64>>,
    pub running_max: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct MonitorState<'a> {
    pub t: f64,
    pub norms: &'a [f64],
    pub running_max: &'a [f64],
}

impl PathMonitor {
    pub fn from_norms(exponents: Vec<f64>, times: Vec<f64>, norms: Vec<Vec<f64>>) -> Self {
        let mut running_max = Vec::with_capacity(norms.len());
        let mut cur = vec![0.0f64; exponents.len()];
        for row in &norms {
            cur.iter_mut().zip(row).for_each(|(a, b)| *a = a.max(*b));
            running_max.push(cur.clone());
        }
        PathMonitor { exponents, times, norms, running_max }
    }

    pub fn record(nc: &NoiseColoring, path: &ModePath, exponents: &[f64]) -> Result<Self> {
        let mut norms = Vec::with_capacity(path.times.len());
        for k in 0..path.times.len() {
            let f = path.field(nc, k);
            norms.push(exponents.iter().map(|&e| lp_norm(&f, e)).collect::<Result<Vec<f64>>>()?);
        }
        Ok(Self::from_norms(exponents.to_vec(), path.times.clone(), norms))
    }

    pub fn state(&self, k: usize) -> MonitorState<'_> {
        MonitorState { t: self.times[k], norms: &self.norms[k], running_max: &self.running_max[k] }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t");
        for e in &self.exponents {
            s.push_str(&format!(",L_{e}"));
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

#[derive(Debug, Clone)]
pub struct StochasticConvolution {
    pub path: ModePath,
    pub monitor: PathMonitor,
}

/// `z` on a uniform mesh of `[0, horizon]`, monitored in `L^e` for each exponent.
pub fn stochastic_convolution<R: Rng>(
    nc: &NoiseColoring,
    horizon: f64,
    dt: f64,
    exponents: &[f64],
    rng: &mut R,
) -> Result<StochasticConvolution> {
    if !(horizon > 0.0 && dt > 0.0) {
        return gate(format!("horizon={horizon} and dt={dt} must be positive"));
    }
    let steps = (horizon / dt).round().max(1.0) as usize;
    let times: Vec<f64> = (0..=steps).map(|k| horizon * k as f64 / steps as f64).collect();
    let path = sample_mode_path(nc, &times, rng)?;
    let monitor = PathMonitor::record(nc, &path, exponents)?;
    Ok(StochasticConvolution { path, monitor })
}

/// A functional of the running monitor state paired with its threshold.
pub struct StopClause<'a> {
    pub name: String,
    pub functional: Box<dyn Fn(&MonitorState) -> f64 + Send + Sync + 'a>,
    pub threshold: f64,
}

impl<'a> StopClause<'a> {
    pub fn new(name: impl Into<String>, threshold: f64, functional: impl Fn(&MonitorState) -> f64 + Send + Sync + 'a) -> Self {
        StopClause { name: name.into(), functional: Box::new(functional), threshold }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoppingTimeRecord {
    pub value: f64,
    /// Name of the clause that fired, or `"horizon"`.
    pub trigger: String,
    pub thresholds: Vec<f64>,
}

/// First monitored time at which any clause reaches its threshold, capped at `horizon`.
pub fn stopping_time(monitor: &PathMonitor, clauses: &[StopClause], horizon: f64) -> Result<StoppingTimeRecord> {
    if clauses.is_empty() {
        return gate("stopping time needs at least one clause");
    }
    if !(horizon > 0.0) {
        return gate(format!("horizon={horizon} must be positive"));
    }
    let thresholds = clauses.iter().map(|c| c.threshold).collect();
    for k in 0..monitor.times.len() {
        let st = monitor.state(k);
        if st.t > horizon {
            break;
        }
        if let Some(c) = clauses.iter().find(|c| (c.functional)(&st) >= c.threshold) {
            if st.t <= 0.0 {
                return crate::numerical(format!("clause '{}' already active at t=0", c.name));
            }
            return Ok(StoppingTimeRecord { value: st.t, trigger: c.name.clone(), thresholds });
        }
    }
    Ok(StoppingTimeRecord { value: horizon, trigger: "horizon".into(), thresholds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::path_rng;
    use rayon::prelude::*;

    fn coloring(n: usize, cutoff: usize) -> NoiseColoring {
        let grid = Arc::new(RadialGrid::new(3, 4.0, n, 1.5).unwrap());
        let (s, _) = required_smoothness(3, 3.0, 2.0);
        build_noise_coloring(grid, s, 2.0, default_decay_exponent(3, s), cutoff).unwrap()
    }

    #[test]
    fn smoothness_formula() {
        let (s, binds) = required_smoothness(3, 3.0, 2.0);
        assert!((s - (1.5 * (1.0 - 2.0 / 21.0) - 1.0)).abs() < 1e-14);
        assert!((s - 0.357142857).abs() < 1e-6 && !binds);
        let (s1, binds1) = required_smoothness(3, 3.0, 10.0);
        assert_eq!(s1, 0.0);
        assert!(binds1);
    }

    #[test]
    fn modes_are_orthonormal_laplacian_eigenfunctions() {
        let nc = coloring(600, 40);
        assert!(nc.mu.windows(2).all(|w| w[0] < w[1]) && nc.mu[0] > 0.0);
        for i in 0..40 {
            for j in 0..=i {
                let ip = nc.inner(&nc.modes[i], &nc.modes[j]);
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((ip - want).abs() < 1e-10, "{i},{j}: {ip}");
            }
        }
        // the lowest Dirichlet mode of the ball of radius R in d=3 has μ = (π/R)²
        let want = (std::f64::consts::PI / 4.0).powi(2);
        assert!((nc.mu[0] - want).abs() < 1e-3 * want);
        assert!(nc.tail_ratio < 1e-3);
    }

    #[test]
    fn divergent_coloring_is_rejected() {
        let grid = Arc::new(RadialGrid::new(3, 4.0, 200, 1.0).unwrap());
        assert!(build_noise_coloring(grid.clone(), 0.5, 2.0, 0.9, 50).is_err());
        assert!(build_noise_coloring(grid.clone(), 0.0, 2.0, 0.8, 20).is_err());
        assert!(build_noise_coloring(grid, 0.0, 2.0, 3.0, 500).is_err());
    }

    #[test]
    fn increments_have_the_right_variance() {
        let nc = coloring(300, 40);
        let dt = 0.01;
        let samples: Vec<RadialField> = (0..10_000u64)
            .into_par_iter()
            .map(|i| sample_wiener_increment(&nc, dt, &mut path_rng(11, i)).unwrap())
            .collect();
        let want = nc.increment_variance(dt);
        for j in (0..290).step_by(29) {
            let emp = samples.iter().map(|f| f.values[j].powi(2)).sum::<f64>() / samples.len() as f64;
            assert!((emp / want[j] - 1.0).abs() < 0.05, "node {j}: {emp} vs {}", want[j]);
        }
        let a = sample_wiener_increment(&nc, dt, &mut path_rng(3, 4)).unwrap();
        let b = sample_wiener_increment(&nc, dt, &mut path_rng(3, 4)).unwrap();
        assert_eq!(a.values, b.values);
        let z = sample_wiener_increment(&nc, 0.0, &mut path_rng(3, 4)).unwrap();
        assert!(z.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ou_moments_and_gaussianity() {
        let nc = coloring(300, 40);
        let times: Vec<f64> = (0..=20).map(|k| 0.05 * k as f64).collect();
        let paths: Vec<ModePath> = (0..10_000u64)
            .into_par_iter()
            .map(|i| sample_mode_path(&nc, &times, &mut path_rng(21, i)).unwrap())
            .collect();
        let t = *times.last().unwrap();
        let var = nc.ou_variances(t);
        for &j in &[0, 3, 10, 20, 39] {
            let xs: Vec<f64> = paths.iter().map(|p| p.coeffs[20][j]).collect();
            let m2 = xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64;
            assert!((m2 / var[j] - 1.0).abs() < 0.05, "mode {j}: {m2} vs {}", var[j]);
        }
        let energy: f64 = paths
            .iter()
            .map(|p| lp_norm(&p.field(&nc, 20), 2.0).unwrap().powi(2))
            .sum::<f64>()
            / paths.len() as f64;
        assert!((energy / nc.expected_energy(t) - 1.0).abs() < 0.05);
        for &node in &[0usize, 50, 150, 250] {
            let xs: Vec<f64> = paths.iter().map(|p| p.field(&nc, 20).values[node]).collect();
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let m3 = xs.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
            assert!((m3 / m2.powf(1.5)).abs() < 0.1);
        }
        for &m in &[0.0f64, 1e-9, 0.7, 30.0] {
            let dt = 0.013f64;
            let two = (-2.0 * m * dt).exp() * ou_variance(m, 1.3, dt) + ou_variance(m, 1.3, dt);
            assert!((two - ou_variance(m, 1.3, 2.0 * dt)).abs() < 1e-10);
        }
    }

    #[test]
    fn silent_noise_and_zero_start() {
        let nc = coloring(200, 20).silenced();
        let sc = stochastic_convolution(&nc, 1.0, 0.1, &[2.0, 4.0, 12.0], &mut path_rng(1, 0)).unwrap();
        assert!(sc.monitor.norms.iter().flatten().all(|&v| v == 0.0));
        let loud = coloring(200, 20);
        let sc = stochastic_convolution(&loud, 1.0, 0.1, &[2.0, 4.0], &mut path_rng(1, 0)).unwrap();
        assert!(sc.monitor.norms[0].iter().all(|&v| v == 0.0));
        assert!(sc.monitor.norms[5][0] > 0.0);
    }

    #[test]
    fn path_continuity_under_refinement() {
        let nc = coloring(300, 40);
        let mut worst = Vec::new();
        for &dt in &[0.04, 0.01, 0.0025] {
            let sc = stochastic_convolution(&nc, 0.4, dt, &[2.0], &mut path_rng(8, 0)).unwrap();
            let jump = (1..sc.path.times.len())
                .map(|k| {
                    let d: f64 = sc.path.coeffs[k].iter().zip(&sc.path.coeffs[k - 1]).map(|(a, b)| (a - b).powi(2)).sum();
                    d.sqrt()
                })
                .fold(0.0f64, f64::max);
            worst.push(jump);
        }
        assert!(worst[0] > worst[1] && worst[1] > worst[2], "{worst:?}");
    }

    #[test]
    fn stopping_times() {
        let nc = coloring(300, 40);
        let fine = stochastic_convolution(&nc, 1.0, 0.0025, &[2.0], &mut path_rng(4, 0)).unwrap();
        let never = [StopClause::new("z", f64::INFINITY, |s: &MonitorState| s.running_max[0])];
        let rec = stopping_time(&fine.monitor, &never, 1.0).unwrap();
        assert_eq!((rec.value, rec.trigger.as_str()), (1.0, "horizon"));
        assert!(stopping_time(&fine.monitor, &[], 1.0).is_err());

        let level = 0.5 * fine.monitor.running_max.last().unwrap()[0];
        let clause = || [StopClause::new("z", level, |s: &MonitorState| s.running_max[0])];
        let t_fine = stopping_time(&fine.monitor, &clause(), 1.0).unwrap().value;
        let mut prev = t_fine;
        for stride in [2, 4, 8] {
            let coarse = fine.path.subsample(stride);
            let mon = PathMonitor::record(&nc, &coarse, &[2.0]).unwrap();
            let t = stopping_time(&mon, &clause(), 1.0).unwrap().value;
            assert!(t >= prev && t - prev <= 0.0025 * stride as f64 + 1e-12);
            prev = t;
        }

        // altering the path after the stopping time changes nothing
        let k = fine.monitor.times.iter().position(|&t| t == t_fine).unwrap();
        let mut norms = fine.monitor.norms.clone();
        for row in norms.iter_mut().skip(k + 1) {
            row[0] *= 7.0;
        }
        let spliced = PathMonitor::from_norms(vec![2.0], fine.monitor.times.clone(), norms);
        assert_eq!(stopping_time(&spliced, &clause(), 1.0).unwrap().value, t_fine);

        // with no noise the deterministic power-of-t clause decides
        let quiet = stochastic_convolution(&nc.silenced(), 1.0, 0.01, &[2.0], &mut path_rng(4, 0)).unwrap();
        let mixed = [
            StopClause::new("z", 1e-3, |s: &MonitorState| s.running_max[0]),
            StopClause::new("power", 0.5, |s: &MonitorState| s.t.powf(0.25)),
        ];
        let rec = stopping_time(&quiet.monitor, &mixed, 1.0).unwrap();
        assert_eq!(rec.trigger, "power");
        assert!((rec.value - 0.0625).abs() <= 0.01);
    }
}
