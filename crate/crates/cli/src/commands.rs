use std::sync::Arc;

use heatlab::branch::{assemble_branches, BranchConfig, BranchSetup};
use heatlab::noise::{build_noise_coloring, default_decay_exponent, required_smoothness, stochastic_convolution};
use heatlab::numerics::RadialGrid;
use heatlab::profile::{critical_exponent, integrate_profile, require_above_fujita};
use heatlab::randomize::{
    build_block_partition, lq_moment_check, mild_fixed_point, random_data_gate, randomize, smoothing_tail_estimate,
    success_probability, LatticeField, MildConfig, RandomDataParams, SmoothingNorm, SuccessFit, Torus,
};
use heatlab::rng::path_rng;
use heatlab::simvar::{
    approximate_ancient_solution, evolve_perturbation, growth_rate, EvolveOptions, NormKey, NormSpec,
};
use heatlab::spectrum::{
    assemble_linearized_on, find_small_unstable_alpha, top_eigenpairs, ProfileGrid, SmallSearch, SpectralGrid,
};
use rayon::prelude::*;
use serde_json::{json, Map, Value};

use crate::args::*;
use crate::output::{columns_csv, num, MemberStatus, Sink};
use crate::stats::{has_quorum, Summary};
use crate::CliError;

pub struct Outcome {
    pub runs: Vec<MemberStatus>,
    pub summary: Option<Value>,
    /// Set when fewer than the quorum of members succeeded.
    pub failure: Option<String>,
}

/// Gates that need no heavy computation, checked before anything runs.
pub fn validate(cmd: &Command) -> Result<(), CliError> {
    match cmd {
        Command::Profile(a) => {
            critical_exponent(a.d, a.p)?;
            if a.stride == 0 {
                return Err(CliError::Usage("--stride must be at least 1".into()));
            }
        }
        Command::Spectrum(a) => {
            critical_exponent(a.d, a.p)?;
            if a.alpha.is_none() && a.alpha_sweep.is_empty() && a.find_small.is_none() {
                return Err(CliError::Usage("spectrum needs --alpha, --alpha-sweep or --find-small".into()));
            }
            if a.k == 0 {
                return Err(CliError::Usage("--k must be at least 1".into()));
            }
        }
        Command::Simvar(a) => {
            critical_exponent(a.d, a.p)?;
            NormSpec::new(a.eta, a.gamma.unwrap_or(2.0 * a.p), a.p)?;
        }
        Command::Noise(a) => {
            require_above_fujita(a.d, a.p)?;
            let qc = critical_exponent(a.d, a.p)?;
            if !(a.q >= 1.0 && a.q < qc) {
                return Err(heatlab::Error::Gate(format!("1 <= q < q_c violated: q={}, q_c={qc}", a.q)).into());
            }
            if a.paths == 0 {
                return Err(CliError::Usage("--paths must be at least 1".into()));
            }
        }
        Command::Branch(a) => {
            branch_config(a)?;
            if a.paths == 0 {
                return Err(CliError::Usage("--paths must be at least 1".into()));
            }
        }
        Command::Randomize(a) => {
            if matches!(a.mode, RandomizeMode::Solve | RandomizeMode::SuccessCurve) {
                random_data_gate(a.d, a.p, a.q, a.allow_low_dim)?;
            }
            if a.ensemble == 0 {
                return Err(CliError::Usage("--ensemble must be at least 1".into()));
            }
        }
        Command::Report(_) => {}
    }
    Ok(())
}

pub fn dispatch(cmd: &Command, seed: u64, sink: &mut Sink) -> Result<Outcome, CliError> {
    match cmd {
        Command::Profile(a) => profile(a, sink),
        Command::Spectrum(a) => spectrum(a, sink),
        Command::Simvar(a) => simvar(a, sink),
        Command::Noise(a) => noise(a, seed, sink),
        Command::Branch(a) => branch(a, seed, sink),
        Command::Randomize(a) => randomize_cmd(a, seed, sink),
        Command::Report(_) => Err(CliError::Usage("report is handled separately".into())),
    }
}

fn single(seed: u64, summary: Value) -> Outcome {
    Outcome { runs: vec![MemberStatus { member: 0, seed, status: "ok", error: None }], summary: Some(summary), failure: None }
}

/// Runs members concurrently; results come back in member order.
fn ensemble<T: Send>(seeds: &[u64], f: impl Fn(usize, u64) -> Result<T, CliError> + Sync) -> Vec<Result<T, CliError>> {
    (0..seeds.len()).into_par_iter().map(|i| f(i, seeds[i])).collect()
}

/// Statuses and successful values; a lone member's error is passed through unchanged.
fn settle<T>(seeds: &[u64], results: Vec<Result<T, CliError>>) -> Result<(Vec<MemberStatus>, Vec<(usize, T)>, Option<String>), CliError> {
    if results.len() == 1 && results[0].is_err() {
        return Err(results.into_iter().next().unwrap().err().unwrap());
    }
    let mut runs = Vec::new();
    let mut ok = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => {
                runs.push(MemberStatus { member: i, seed: seeds[i], status: "ok", error: None });
                ok.push((i, v));
            }
            Err(e) => runs.push(MemberStatus { member: i, seed: seeds[i], status: "failed", error: Some(e.to_string()) }),
        }
    }
    let failure = (!has_quorum(ok.len(), runs.len()))
        .then(|| format!("only {} of {} members succeeded", ok.len(), runs.len()));
    Ok((runs, ok, failure))
}

fn profile(a: &ProfileArgs, sink: &mut Sink) -> Result<Outcome, CliError> {
    let ps = integrate_profile(a.alpha, a.p, a.d, a.rho_max, a.n)?;
    let expo = 2.0 / (a.p - 1.0);
    let mut body = String::from("rho,U,dU,rho_pow_U\n");
    let nodes = ps.grid.nodes();
    for j in (0..nodes.len()).step_by(a.stride) {
        let (r, u) = (nodes[j], ps.u.values[j]);
        body.push_str(&format!("{},{},{},{}\n", num(r), num(u), num(ps.du.values[j]), num(r.powf(expo) * u)));
    }
    sink.csv("profile.csv", &body)?;
    let summary = json!({
        "alpha": ps.alpha,
        "p": ps.p,
        "d": ps.d,
        "ell": ps.ell,
        "residual": ps.residual,
        "tail_oscillation": ps.tail_oscillation,
        "tail_unsettled": ps.tail_unsettled,
    });
    sink.json("profile.json", &summary)?;
    Ok(single(0, summary))
}

fn spectrum(a: &SpectrumArgs, sink: &mut Sink) -> Result<Outcome, CliError> {
    let pg = ProfileGrid { rho_max: a.profile_rho_max, n: a.profile_n };
    let sg = SpectralGrid { rho_max: a.rho_max, n: a.n, ..Default::default() };
    let alphas: Vec<f64> = a.alpha.into_iter().chain(a.alpha_sweep.iter().copied()).collect();
    let mut summary = Map::new();
    let mut runs = Vec::new();
    let mut failure = None;

    if !alphas.is_empty() {
        let results: Vec<_> = alphas
            .par_iter()
            .map(|&alpha| -> Result<_, CliError> {
                let ps = integrate_profile(alpha, a.p, a.d, pg.rho_max, pg.n)?;
                let op = assemble_linearized_on(Some(Arc::new(ps)), a.p, a.d, a.eta, sg.build(a.d)?)?;
                Ok(top_eigenpairs(&op, a.k)?)
            })
            .collect();
        let seeds = vec![0; alphas.len()];
        let (r, ok, f) = settle(&seeds, results)?;
        runs = r;
        failure = f;

        let mut body = String::from("alpha");
        (1..=a.k).for_each(|j| body.push_str(&format!(",lambda_{j}")));
        body.push('\n');
        let mut rows = Vec::new();
        for (i, &alpha) in alphas.iter().enumerate() {
            body.push_str(&num(alpha));
            let rep = ok.iter().find(|(j, _)| *j == i).map(|(_, r)| r);
            for j in 0..a.k {
                body.push(',');
                if let Some(l) = rep.and_then(|r| r.eigenvalues.get(j)) {
                    body.push_str(&num(*l));
                }
            }
            body.push('\n');
            rows.push(match rep {
                Some(r) => json!({
                    "alpha": alpha,
                    "eigenvalues": r.eigenvalues,
                    "residuals": r.residuals,
                    "converged": r.converged,
                    "threshold": r.threshold,
                }),
                None => json!({ "alpha": alpha, "error": runs[i].error }),
            });
        }
        sink.csv("spectrum.csv", &body)?;
        if let (1, Some((_, rep))) = (alphas.len(), ok.first()) {
            for (j, f) in rep.eigenfields.iter().enumerate() {
                sink.csv(&format!("eigenfield_{}.csv", j + 1), &f.to_csv())?;
            }
        }
        summary.insert("rows".into(), rows.into());
    }

    if let Some(eps) = a.find_small {
        let search = SmallSearch { profile: pg, grid: sg, ..Default::default() };
        let small = find_small_unstable_alpha(a.p, a.d, eps, a.eta, search)?;
        summary.insert(
            "small".into(),
            json!({
                "eps": eps,
                "alpha": small.alpha,
                "lambda": small.lambda,
                "lower": [small.lower.0, small.lower.1],
                "upper": [small.upper.0, small.upper.1],
                "evaluations": small.evaluations,
            }),
        );
    }
    if runs.is_empty() {
        runs.push(MemberStatus { member: 0, seed: 0, status: "ok", error: None });
    }
    let summary = Value::Object(summary);
    sink.json("spectrum.json", &summary)?;
    Ok(Outcome { runs, summary: Some(summary), failure })
}

fn simvar(a: &SimvarArgs, sink: &mut Sink) -> Result<Outcome, CliError> {
    let ps = integrate_profile(a.alpha, a.p, a.d, 40.0, 20000)?;
    let sg = SpectralGrid { rho_max: a.rho_max, n: a.n, ..Default::default() };
    let op = assemble_linearized_on(Some(Arc::new(ps)), a.p, a.d, a.eta, sg.build(a.d)?)?;
    let rep = top_eigenpairs(&op, 1)?;
    let lambda = rep.eigenvalues[0];
    let norms = NormSpec::new(a.eta, a.gamma.unwrap_or(2.0 * a.p), a.p)?;
    let opts = EvolveOptions { dt: a.dt, record_every: a.record_every, linear: a.linear, ..Default::default() };

    let summary = match a.mode {
        SimvarMode::Perturb => {
            if !(lambda > 0.0) && a.span.is_none() {
                return Err(CliError::Usage(format!("top eigenvalue {lambda} is not positive; pass --span")));
            }
            let span = a.span.unwrap_or_else(|| (0.1 / a.amplitude).ln() / lambda);
            let w0 = rep.eigenfields[0].scaled(a.amplitude);
            let tr = evolve_perturbation(&w0, &op, 0.0, span, norms, opts)?;
            sink.csv("norm_table.csv", &tr.norm_table_csv())?;
            let mut growth = Map::new();
            for key in NormKey::ALL {
                if let Ok(g) = growth_rate(&tr, key) {
                    growth.insert(key.label().into(), json!({ "rate": g.rate, "r_squared": g.r_squared, "poor_fit": g.poor_fit }));
                }
            }
            json!({
                "mode": "perturb",
                "lambda": lambda,
                "growth": growth,
                "blew_up": tr.blew_up,
                "truncated": tr.truncated,
            })
        }
        SimvarMode::Ancient => {
            let anc = approximate_ancient_solution(&op, &rep.eigenfields[0], lambda, a.eps, -a.span.unwrap_or(10.0 / lambda), 0.0, norms, opts)?;
            sink.csv("norm_table.csv", &anc.trajectory.norm_table_csv())?;
            json!({
                "mode": "ancient",
                "lambda": lambda,
                "delta": anc.delta,
                "shift": anc.shift,
                "fitted_rate": anc.fitted_rate,
                "upper_bound_holds": anc.upper_bound_holds,
                "lower_bound_holds": anc.lower_bound_holds,
            })
        }
    };
    sink.json("simvar.json", &summary)?;
    Ok(single(0, summary))
}

fn noise(a: &NoiseArgs, seed: u64, sink: &mut Sink) -> Result<Outcome, CliError> {
    let grid = Arc::new(RadialGrid::new(a.d, a.radius, a.n, a.grading)?);
    let (s_required, _) = required_smoothness(a.d, a.p, a.q);
    let s = a.s.unwrap_or(s_required);
    let beta = a.beta.unwrap_or_else(|| default_decay_exponent(a.d, s));
    let nc = build_noise_coloring(grid, s, a.q, beta, a.cutoff)?;
    let exponents = [2.0, a.q];

    let seeds = vec![seed; a.paths];
    let results = ensemble(&seeds, |i, seed| {
        let mut rng = path_rng(seed, i as u64);
        let sc = stochastic_convolution(&nc, a.horizon, a.dt, &exponents, &mut rng)?;
        let last = sc.monitor.norms.last().cloned().unwrap_or_default();
        let sup_q = sc.monitor.running_max.last().map_or(0.0, |r| r[1]);
        Ok((sc.monitor.to_csv(), last[0].powi(2), sup_q))
    });
    let (runs, ok, failure) = settle(&seeds, results)?;
    for (i, (csv, _, _)) in &ok {
        sink.csv(&format!("monitor_{i:05}.csv"), csv)?;
    }
    let energies: Vec<f64> = ok.iter().map(|(_, v)| v.1).collect();
    let sups: Vec<f64> = ok.iter().map(|(_, v)| v.2).collect();
    let expected = nc.expected_energy(a.horizon);
    let energy = Summary::of(&energies);
    let summary = json!({
        "s": s,
        "s_required": s_required,
        "beta": beta,
        "modes": nc.cutoff(),
        "expected_energy": expected,
        "energy": energy,
        "energy_ratio": energy.as_ref().map(|e| e.mean / expected),
        "sup_lq": Summary::of(&sups),
    });
    sink.json("noise.json", &summary)?;
    Ok(Outcome { runs, summary: Some(summary), failure })
}

fn branch_config(a: &BranchArgs) -> Result<BranchConfig, CliError> {
    require_above_fujita(a.d, a.p)?;
    let mut cfg = BranchConfig::new(a.d, a.p, a.q)?;
    cfg.alpha_star = a.alpha;
    cfg.lambda_search_eps = a.lambda_eps;
    cfg.rbar = a.rbar;
    cfg.horizon = a.horizon;
    cfg.noise.s = a.s;
    cfg.noise.decay_exponent = a.beta;
    cfg.noise.cutoff = a.cutoff;
    cfg.noise.silent = a.silent;
    cfg.validate()?;
    Ok(cfg)
}

fn branch(a: &BranchArgs, seed: u64, sink: &mut Sink) -> Result<Outcome, CliError> {
    let setup = BranchSetup::prepare(branch_config(a)?)?;
    let seeds: Vec<u64> = (0..a.paths as u64).map(|i| seed + i).collect();
    let q = setup.cfg.q;
    let results = ensemble(&seeds, |_, s| {
        let res = assemble_branches(&setup, s)?;
        let cont = res.continuity(q)?;
        let member = json!({
            "seed": s,
            "fitted_slope": res.fitted_slope,
            "expected_slope": res.expected_slope,
            "max_duhamel_residual": res.max_duhamel_residual(),
            "stop": { "value": res.stop.value, "trigger": res.stop.trigger },
            "picard": res.picard.iter().map(|r| json!({
                "iterations": r.iterations,
                "max_ratio": r.ratios.iter().copied().fold(0.0, f64::max),
                "contraction_ok": r.contraction_ok,
                "vanishing_weight": r.vanishing_weight,
            })).collect::<Vec<_>>(),
            "continuity": cont.iter().map(|c| json!({ "ratios": c.ratios, "passes": c.passes })).collect::<Vec<_>>(),
        });
        Ok((res.separation_csv(), res.fitted_slope, member))
    });
    let (runs, ok, failure) = settle(&seeds, results)?;
    let mut members = Vec::new();
    for (i, (csv, _, member)) in &ok {
        sink.csv(&format!("separation_{}.csv", seeds[*i]), csv)?;
        sink.json(&format!("branch_{}.json", seeds[*i]), member)?;
        members.push(member.clone());
    }
    let slopes: Vec<f64> = ok.iter().map(|(_, v)| v.1).collect();
    let summary = json!({
        "alpha": setup.alpha,
        "lambda": setup.lambda,
        "r": setup.cfg.r,
        "m": setup.m,
        "expected_slope": -setup.cfg.separation_exponent(setup.lambda),
        "slope": Summary::of(&slopes),
        "members": members,
    });
    sink.json("branch.json", &summary)?;
    Ok(Outcome { runs, summary: Some(summary), failure })
}

fn gate_report(params: &RandomDataParams) -> Value {
    json!({
        "d": params.d,
        "p": params.p,
        "q": params.q,
        "q_c": params.qc,
        "r": params.r,
        "case": format!("{:?}", params.case),
        "s0": params.s0,
        "eps_prime": params.eps_prime,
        "alpha_prime": params.alpha_prime,
        "gamma": params.gamma,
        "gamma_prime": params.gamma_prime,
        "self_map_power": params.self_map_power,
        "contraction_power": params.contraction_power,
        "kappa": params.kappa,
    })
}

fn fit_json(f: &Option<SuccessFit>) -> Value {
    match f {
        Some(f) => json!({ "kappa": f.kappa, "slope": f.slope, "intercept": f.intercept, "points": f.points, "scale": f.scale() }),
        None => Value::Null,
    }
}

fn randomize_cmd(a: &RandomizeArgs, seed: u64, sink: &mut Sink) -> Result<Outcome, CliError> {
    let gate = random_data_gate(a.d, a.p, a.q, a.allow_low_dim);
    let gate_json = match &gate {
        Ok(params) => json!({ "admissible": true, "params": gate_report(params) }),
        Err(e) => json!({ "admissible": false, "reason": e.to_string() }),
    };
    sink.json("gate.json", &gate_json)?;

    let torus = Torus::new(a.d, a.half_width, a.n)?;
    let bp = build_block_partition(torus.clone(), a.cutoff)?;
    let w2 = 2.0 * a.width * a.width;
    let u0 = LatticeField::from_fn(torus.clone(), |x| a.amplitude * (-x.iter().map(|v| v * v).sum::<f64>() / w2).exp());
    let cfg = MildConfig { horizon: a.horizon, steps: a.steps, scheme_constant: a.scheme_constant, ..Default::default() };

    match a.mode {
        RandomizeMode::Moments => {
            let rep = lq_moment_check(&u0, &bp, a.q, a.ensemble, seed)?;
            let (rho, m): (Vec<f64>, Vec<f64>) = rep.rho_moments.iter().copied().unzip();
            sink.csv("rho_moments.csv", &columns_csv(&["rho", "moment"], &[&rho, &m]))?;
            let summary = json!({
                "mode": "moments",
                "q": rep.q,
                "samples": rep.samples,
                "mean_sq": rep.mean_sq,
                "mean_sq_half": rep.mean_sq_half,
                "bound_rhs": rep.bound_rhs,
                "ratio": rep.ratio,
                "ratio_half": rep.ratio_half,
                "growth_slope": rep.growth_slope,
            });
            sink.json("moments.json", &summary)?;
            Ok(single(seed, summary))
        }
        RandomizeMode::Tails => {
            let norm = SmoothingNorm {
                gamma: a.norm_gamma,
                sigma: a.norm_sigma,
                theta2: a.norm_theta2,
                theta3: a.norm_theta3,
                alpha: a.norm_alpha,
                horizon: a.norm_horizon,
                quad_nodes: a.quad_nodes,
            };
            let rep = smoothing_tail_estimate(&u0, &bp, norm, a.ensemble, seed)?;
            let (lam, pe): (Vec<f64>, Vec<f64>) = rep.survival.iter().copied().unzip();
            let bound: Vec<f64> = match &rep.fit {
                Some(f) => lam.iter().map(|l| (f.envelope_a - f.b * l * l).exp()).collect(),
                None => vec![f64::NAN; lam.len()],
            };
            sink.csv("survival.csv", &columns_csv(&["lambda", "P_emp", "bound_fit"], &[&lam, &pe, &bound]))?;
            let fit = rep.fit.as_ref().map(|f| {
                json!({
                    "a": f.a,
                    "b": f.b,
                    "envelope_a": f.envelope_a,
                    "dominated": f.dominated,
                    "extreme_excess": f.extreme_excess,
                    "fit_points": f.fit_points,
                })
            });
            let summary = json!({
                "mode": "tails",
                "samples": rep.norms.len(),
                "mean_norm": rep.mean_norm,
                "mean_norm_quarter": rep.mean_norm_quarter,
                "h_minus_alpha": rep.h_minus_alpha,
                "fit": fit,
            });
            sink.json("tails.json", &summary)?;
            Ok(single(seed, summary))
        }
        RandomizeMode::Solve => {
            let params = gate?;
            let seeds: Vec<u64> = (0..a.ensemble as u64).map(|i| seed + i).collect();
            let results = ensemble(&seeds, |_, s| {
                let datum = randomize(&u0, &bp, s)?;
                let sol = mild_fixed_point(&datum, &params, &cfg)?;
                let lq: Vec<f64> = sol
                    .v
                    .iter()
                    .map(|v| LatticeField::from_physical(torus.clone(), v)?.lp_norm(a.q))
                    .collect::<heatlab::Result<_>>()?;
                let csv = columns_csv(&["t", "v_Lq"], &[&sol.times, &lq]);
                let max_ratio = sol.certificate.ratios.iter().copied().fold(0.0, f64::max);
                Ok((csv, sol.stop.value, sol.sup_lq, max_ratio, sol.certificate.contraction_ok && sol.continuity.passes))
            });
            let (runs, ok, failure) = settle(&seeds, results)?;
            for (i, v) in &ok {
                sink.csv(&format!("solve_{}.csv", seeds[*i]), &v.0)?;
            }
            let col = |k: usize| -> Vec<f64> {
                ok.iter().map(|(_, v)| [v.1, v.2, v.3][k]).collect()
            };
            let summary = json!({
                "mode": "solve",
                "stop_time": Summary::of(&col(0)),
                "sup_lq": Summary::of(&col(1)),
                "max_picard_ratio": Summary::of(&col(2)),
                "certified": ok.iter().filter(|(_, v)| v.4).count(),
                "ball_radius": cfg.ball_radius(a.p),
            });
            sink.json("solve.json", &summary)?;
            Ok(Outcome { runs, summary: Some(summary), failure })
        }
        RandomizeMode::SuccessCurve => {
            let params = gate?;
            let ts: Vec<f64> = (0..a.t_points)
                .map(|i| {
                    let frac = if a.t_points > 1 { i as f64 / (a.t_points - 1) as f64 } else { 1.0 };
                    a.horizon * 10f64.powf(-a.t_decades * (1.0 - frac))
                })
                .collect();
            let curve = success_probability(&u0, &bp, &params, &cfg, &ts, a.ensemble, seed)?;
            sink.csv("success.csv", &columns_csv(&["T", "P_emp"], &[&curve.t_list, &curve.p_emp]))?;
            let summary = json!({
                "mode": "success-curve",
                "ensemble": a.ensemble,
                "kappa": curve.kappa,
                "monotone": curve.monotone,
                "fit": fit_json(&curve.fit),
                "effective_fit": fit_json(&curve.effective_fit),
                "stop_time": Summary::of(&curve.stops),
            });
            sink.json("success.json", &summary)?;
            Ok(single(seed, summary))
        }
    }
}

/// Every JSON summary in the output directory, keyed by file name.
pub fn report(sink: &mut Sink) -> Result<Value, CliError> {
    let mut names: Vec<String> = std::fs::read_dir(&sink.dir)
        .map_err(|e| CliError::Io(format!("{}: {e}", sink.dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".json") && n != "report.json")
        .collect();
    names.sort();
    let mut all = Map::new();
    for name in names {
        let path = sink.dir.join(&name);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        all.insert(name, value);
    }
    let report = Value::Object(all);
    sink.json("report.json", &report)?;
    Ok(report)
}
