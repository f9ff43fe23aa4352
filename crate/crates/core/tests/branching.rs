use std::sync::OnceLock;

use heatlab::branch::{assemble_branches, BranchConfig, BranchResult, BranchSetup};

fn setup(silent: bool) -> &'static BranchSetup {
    static NOISY: OnceLock<BranchSetup> = OnceLock::new();
    static SILENT: OnceLock<BranchSetup> = OnceLock::new();
    let cell = if silent { &SILENT } else { &NOISY };
    cell.get_or_init(|| {
        let mut cfg = BranchConfig::new(3, 3.0, 1.0).unwrap();
        cfg.noise.silent = silent;
        BranchSetup::prepare(cfg).unwrap()
    })
}

fn check_run(res: &BranchResult) {
    let rel = (res.fitted_slope / res.expected_slope - 1.0).abs();
    assert!(rel < 0.1, "seed {}: slope {} vs {}", res.seed, res.fitted_slope, res.expected_slope);
    assert!(res.max_duhamel_residual() < 1e-3, "{:?}", res.duhamel);
    for rep in &res.picard {
        assert!(rep.contraction_ok, "{rep:?}");
        assert!(!rep.ratios.is_empty());
        assert!(rep.vanishing_weight);
    }
}

#[test]
fn branches_separate_at_the_predicted_rate() {
    let s = setup(false);
    assert!(s.lambda > 0.0 && s.lambda < 0.05);
    for seed in [1, 2] {
        let res = assemble_branches(s, seed).unwrap();
        check_run(&res);
        // the L^r separation grows as t -> 0 like t^{expected_slope}
        let k = res.separation.len() - 1;
        assert!(res.separation[1] > res.separation[k] && res.separation[k] > 0.0);
        let csv = res.separation_csv();
        assert!(csv.starts_with("t,sep_Lr\n") && csv.lines().count() == res.times.len());
    }
}

#[test]
fn silent_noise_reproduces_the_deterministic_mechanism() {
    let quiet = assemble_branches(setup(true), 3).unwrap();
    check_run(&quiet);
    assert!(quiet.picard.iter().all(|r| r.iterations <= 30));
    assert!(quiet.u1.fields.iter().flat_map(|f| f.values.iter()).all(|v| v.is_finite()));
    let noisy = assemble_branches(setup(false), 3).unwrap();
    assert!((quiet.fitted_slope - noisy.fitted_slope).abs() < 0.1 * quiet.expected_slope.abs());
}

#[test]
fn branch_paths_are_continuous_in_lq() {
    let s = setup(false);
    let res = assemble_branches(s, 4).unwrap();
    for rep in res.continuity(s.cfg.q).unwrap() {
        assert!(rep.passes, "{rep:?}");
    }
}
