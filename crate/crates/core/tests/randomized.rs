use std::sync::Arc;

use heatlab::randomize::*;

fn gaussian_datum(t: &Arc<Torus>, amp: f64, width: f64) -> LatticeField {
    LatticeField::from_fn(t.clone(), |x| amp * (-x.iter().map(|v| v * v).sum::<f64>() / (2.0 * width * width)).exp())
}

// Independent bump and partition, written out from the definition.
fn phi(x: f64) -> f64 {
    let a = x.abs();
    if a <= 0.5 {
        1.0
    } else if a >= 1.0 {
        0.0
    } else {
        let s = 2.0 * a - 1.0;
        let (g1, g2) = ((-1.0 / (1.0 - s)).exp(), (-1.0 / s).exp());
        g1 / (g1 + g2)
    }
}

fn psi1(k: i64, x: f64) -> f64 {
    let total: f64 = (-40..=40).map(|l| phi(x - l as f64)).sum();
    phi(x - k as f64) / total
}

/// `E|Σ_k h_k ψ_k(ξ)|²` from the covariances: `E h₀² = 1`, `E|h_k|² = 2`,
/// `E h_k conj(h_l) = 0` otherwise (including `l = -k`, since `E h_k² = 0`).
fn multiplier_variance(xi: &[f64], cutoff: i64) -> f64 {
    let d = xi.len();
    let mut s = 0.0;
    let side = (2 * cutoff + 1) as usize;
    for b in 0..side.pow(d as u32) {
        let mut rest = b;
        let mut w = 1.0;
        let mut zero = true;
        for &x in xi {
            let k = (rest % side) as i64 - cutoff;
            rest /= side;
            zero &= k == 0;
            w *= psi1(k, x);
        }
        s += w * w * if zero { 1.0 } else { 2.0 };
    }
    s
}

#[test]
fn l2_energy_matches_covariance_bookkeeping() {
    let t = Torus::new(2, 6.0, 32).unwrap();
    let bp = build_block_partition(t.clone(), 8).unwrap();
    let u0 = gaussian_datum(&t, 1.0, 0.8);
    let oracle: f64 = (0..t.len())
        .map(|i| u0.spectrum[i].norm_sqr() * multiplier_variance(&t.xi(i), 8))
        .sum::<f64>()
        * t.volume();
    assert!((expected_l2_energy(&u0, &bp) - oracle).abs() < 1e-10 * oracle);
    let rep = lq_moment_check(&u0, &bp, 2.0, 4000, 11).unwrap();
    assert!((rep.mean_sq / oracle - 1.0).abs() < 0.05, "{} vs {oracle}", rep.mean_sq);
    assert!((rep.ratio_half / rep.ratio - 1.0).abs() < 0.1);
    assert!(rep.growth_slope <= 0.6);
}

#[test]
fn moments_of_zero_and_preconditions() {
    let t = Torus::new(1, 8.0, 64).unwrap();
    let bp = build_block_partition(t.clone(), 8).unwrap();
    let zero = LatticeField::zeros(t.clone());
    let rep = lq_moment_check(&zero, &bp, 1.5, 1000, 0).unwrap();
    assert_eq!(rep.mean_sq, 0.0);
    assert!(rep.rho_moments.iter().all(|m| m.1 == 0.0));
    assert!(lq_moment_check(&zero, &bp, 1.5, 999, 0).is_err());
    // q < 2 compares against the modulation norm, which must be finite and positive
    let rep = lq_moment_check(&gaussian_datum(&t, 1.0, 1.0), &bp, 1.5, 1000, 2).unwrap();
    assert!(rep.bound_rhs > 0.0 && rep.ratio.is_finite() && rep.ratio > 0.0);
}

#[test]
fn smoothing_norm_mode_sum_oracle() {
    let t = Torus::new(2, 6.0, 32).unwrap();
    let bp = build_block_partition(t.clone(), 8).unwrap();
    let u0 = gaussian_datum(&t, 1.0, 0.8);
    let horizon = 0.5;
    let norm = SmoothingNorm { gamma: 0.0, sigma: 0.0, theta2: 2.0, theta3: 2.0, alpha: 0.0, horizon, quad_nodes: 16 };
    // E ∫₀ᵀ ‖e^{tΔ}u^ω‖² dt = (2L)^d Σ |û|² E|m|² (1 - e^{-2|ξ|²T}) / (2|ξ|²)
    let oracle: f64 = (0..t.len())
        .map(|i| {
            let x = t.xi_sq()[i];
            let time = if x == 0.0 { horizon } else { (1.0 - (-2.0 * x * horizon).exp()) / (2.0 * x) };
            u0.spectrum[i].norm_sqr() * multiplier_variance(&t.xi(i), 8) * time
        })
        .sum::<f64>()
        * t.volume();
    let rep = smoothing_tail_estimate(&u0, &bp, norm, 3000, 4).unwrap();
    let mean_sq = rep.norms.iter().map(|n| n * n).sum::<f64>() / rep.norms.len() as f64;
    assert!((mean_sq / oracle - 1.0).abs() < 0.05, "{mean_sq} vs {oracle}");
    assert!(rep.mean_norm_quarter < rep.mean_norm);
}

#[test]
fn smoothing_tails() {
    let t = Torus::new(3, 8.0, 16).unwrap();
    let bp = build_block_partition(t.clone(), 8).unwrap();
    let norm = SmoothingNorm { gamma: 0.25, sigma: 1.0, theta2: 4.0, theta3: 2.0, alpha: 0.0, horizon: 1.0, quad_nodes: 8 };
    let u0 = gaussian_datum(&t, 1.0, 1.0);
    let one = smoothing_tail_estimate(&u0, &bp, norm, 1000, 21).unwrap();
    let two = smoothing_tail_estimate(&u0.scaled(2.0), &bp, norm, 1000, 21).unwrap();
    let (f1, f2) = (one.fit.unwrap(), two.fit.unwrap());
    assert!(f1.dominated && f2.dominated && f1.b > 0.0);
    assert!((f2.b / f1.b - 0.25).abs() < 0.05);
    let zero = smoothing_tail_estimate(&LatticeField::zeros(t.clone()), &bp, norm, 50, 1).unwrap();
    assert!(zero.norms.iter().all(|&n| n == 0.0) && zero.fit.is_none());
    let bad = SmoothingNorm { gamma: 0.0, sigma: 1.5, ..norm };
    let err = smoothing_tail_estimate(&u0, &bp, bad, 50, 1).unwrap_err().to_string();
    assert!(err.contains("left side 3"), "{err}");
}

#[test]
fn negative_sobolev_weight() {
    let t = Torus::new(2, 6.0, 32).unwrap();
    let bp = build_block_partition(t.clone(), 8).unwrap();
    // alpha > 0 loosens the integrability condition and the report carries the H^{-alpha} norm
    let norm = SmoothingNorm { gamma: 0.0, sigma: 1.5, theta2: 2.0, theta3: 2.0, alpha: 0.2, horizon: 0.5, quad_nodes: 12 };
    assert!(norm.validate().is_err());
    let ok = SmoothingNorm { sigma: 0.7, ..norm };
    let u0 = gaussian_datum(&t, 1.0, 0.8);
    let rep = smoothing_tail_estimate(&u0, &bp, ok, 100, 3).unwrap();
    assert!(rep.h_minus_alpha < u0.l2_norm() && rep.h_minus_alpha > 0.5 * u0.l2_norm());
}

fn solve_pair(q: f64, amp: f64, seed: u64) -> (MildSolution, MildSolution) {
    let t = Torus::new(3, 8.0, 16).unwrap();
    let bp = build_block_partition(t.clone(), 8).unwrap();
    let params = random_data_gate(3, 3.0, q, false).unwrap();
    let cfg = MildConfig::default();
    let dat = randomize(&gaussian_datum(&t, amp, 1.0), &bp, seed).unwrap();
    let a = mild_fixed_point_from(&dat, &params, &cfg, InitialGuess::Zero).unwrap();
    let b = mild_fixed_point_from(&dat, &params, &cfg, InitialGuess::BallBoundary).unwrap();
    (a, b)
}

#[test]
fn mild_fixed_point_certificates_and_uniqueness() {
    for (q, amp, seed) in [(2.0, 4.0, 1), (1.5, 4.0, 2), (2.0, 8.0, 3)] {
        let (a, b) = solve_pair(q, amp, seed);
        for s in [&a, &b] {
            let c = &s.certificate;
            assert!(c.contraction_ok && c.self_map_ok, "{c:?}");
            assert!(c.ratios.iter().all(|&r| r <= 0.6));
            assert!(s.continuity.passes, "{:?}", s.continuity);
        }
        assert_eq!(a.stop.value, b.stop.value);
        let diff = a.v.iter().zip(&b.v).flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs())).fold(0.0, f64::max);
        assert!(diff < 1e-6, "guesses disagree by {diff}");
        assert!(a.v.last().unwrap().iter().any(|x| x.abs() > 1e-6));
    }
}

#[test]
fn mild_solution_converges_under_refinement() {
    let t = Torus::new(3, 8.0, 16).unwrap();
    let bp = build_block_partition(t.clone(), 8).unwrap();
    let params = random_data_gate(3, 3.0, 2.0, false).unwrap();
    let dat = randomize(&gaussian_datum(&t, 6.0, 1.0), &bp, 5).unwrap();
    let end = |steps| {
        let cfg = MildConfig { steps, ..Default::default() };
        mild_fixed_point(&dat, &params, &cfg).unwrap().v.last().unwrap().clone()
    };
    let (v16, v32, v128) = (end(16), end(32), end(128));
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let (e16, e32) = (dist(&v16, &v128), dist(&v32, &v128));
    assert!(e16 / e32 > 3.0, "{e16} {e32}");
}

#[test]
fn zero_datum_and_gate_errors() {
    let t = Torus::new(3, 8.0, 16).unwrap();
    let bp = build_block_partition(t.clone(), 8).unwrap();
    let params = random_data_gate(3, 3.0, 2.0, false).unwrap();
    let cfg = MildConfig::default();
    let ts = [0.01, 0.1, 0.5, 1.0];
    let curve = success_probability(&LatticeField::zeros(t.clone()), &bp, &params, &cfg, &ts, 100, 0).unwrap();
    assert!(curve.p_emp.iter().all(|&p| p == 1.0) && curve.monotone);
    let err = random_data_gate(3, 3.0, 1.2, false).unwrap_err().to_string();
    assert!(err.contains("2 - 8/(4+dp) < q < q_c"), "{err}");
    let err = random_data_gate(3, 1.5, 2.0, false).unwrap_err().to_string();
    assert!(err.contains("p > 1/2 + sqrt(1/4 + 4/d)"), "{err}");
    assert!(random_data_gate(2, 4.0, 2.0, false).is_err());
}

#[test]
fn success_curve_shape_and_scaling() {
    let t = Torus::new(3, 8.0, 16).unwrap();
    let bp = build_block_partition(t.clone(), 8).unwrap();
    let params = random_data_gate(3, 3.0, 2.0, false).unwrap();
    let cfg = MildConfig::default();
    let ts: Vec<f64> = (0..30).map(|i| 10f64.powf(-4.0 + 4.0 * i as f64 / 29.0)).collect();
    let u0 = gaussian_datum(&t, 4.0, 1.0);
    let one = success_probability(&u0, &bp, &params, &cfg, &ts, 1000, 3).unwrap();
    let two = success_probability(&u0.scaled(2.0), &bp, &params, &cfg, &ts, 1000, 3).unwrap();
    assert!(one.monotone && two.monotone);
    let (f1, f2) = (one.fit.unwrap(), two.fit.unwrap());
    assert!(f1.slope < 0.0 && f2.slope < 0.0);
    // the T^{-2/p} exponent is the one under which 2u0 rescales by 4
    let ratio = two.effective_fit.unwrap().scale() / one.effective_fit.unwrap().scale();
    assert!((ratio / 4.0 - 1.0).abs() < 0.5, "scale ratio {ratio}");
}

#[test]
fn calibration_finds_smallest_power() {
    let t = Torus::new(3, 8.0, 16).unwrap();
    let bp = build_block_partition(t.clone(), 8).unwrap();
    let params = random_data_gate(3, 3.0, 2.0, false).unwrap();
    let data: Vec<RandomizedDatum> = (0..3).map(|s| randomize(&gaussian_datum(&t, 4.0, 1.0), &bp, s).unwrap()).collect();
    let cfg = MildConfig { steps: 16, ..Default::default() };
    let c = calibrate_scheme_constant(&data, &params, &cfg, -3, 4).unwrap();
    assert!(c >= 0.125 && c <= 16.0);
    if c > 0.125 {
        let below = MildConfig { scheme_constant: c / 2.0, ..cfg.clone() };
        assert!(data.iter().any(|d| mild_fixed_point(d, &params, &below)
            .map(|s| !(s.certificate.contraction_ok && s.certificate.self_map_ok))
            .unwrap_or(true)));
    }
}
