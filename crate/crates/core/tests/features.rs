use adaptive_duffing::continuation::{default_window, trace_branch, ResponseBranch, StepControls};
use adaptive_duffing::features::{extract, extract_partial, inject_noise, NoiseConfig, FEATURE_NAMES};
use adaptive_duffing::{Error, SystemParams};

fn params(beta: f64, delta: f64, d: f64, f: f64) -> SystemParams {
    SystemParams {
        beta,
        delta,
        d,
        f,
        ..SystemParams::default()
    }
}

fn branch(p: &SystemParams) -> ResponseBranch {
    let (lo, hi) = default_window(p);
    trace_branch(p, lo, hi, &StepControls::default()).unwrap()
}

#[test]
fn four_fold_branch_gives_hardening_features() {
    let v = extract(&branch(&params(40.0, 1.0, 1.0, 1.1))).unwrap();
    assert!(v.all_valid());
    let g = |n: &str| v.get(n).unwrap();
    for i in 1..=2 {
        assert!(g(&format!("f{i}1")) > g(&format!("f{i}3")));
        assert!(g(&format!("f{i}2")) > g(&format!("f{i}4")));
        assert!(g(&format!("alpha{i}1")) > 0.0);
        assert!(g(&format!("alpha{i}2")) > 0.0);
    }
    for n in FEATURE_NAMES.iter().filter(|n| n.starts_with('p')) {
        assert!(g(n) >= 0.0);
    }
    assert_eq!(g("f11"), g("f21"));
}

#[test]
fn base_case_lacks_the_second_loop() {
    let b = branch(&params(40.0, 1.0, 1.0, 1.0));
    assert!(matches!(extract(&b), Err(Error::MissingFolds(2))));
    let partial = extract_partial(&b);
    assert!(partial.get("f11").is_some() && partial.get("f13").is_some() && partial.get("alpha11").is_some());
    assert!(partial.get("f12").is_none() && partial.get("alpha22").is_none());
}

#[test]
fn linear_branch_has_no_features() {
    assert!(matches!(extract(&branch(&params(0.0, 1.0, 1.0, 1.0))), Err(Error::MissingFolds(0))));
}

#[test]
fn coupling_moves_the_second_jump_only() {
    let weak = extract(&branch(&params(40.0, 1.0, 0.7, 1.1))).unwrap();
    let strong = extract(&branch(&params(40.0, 2.0, 0.7, 1.1))).unwrap();
    let shift = |n: &str| strong.get(n).unwrap() - weak.get(n).unwrap();
    assert!(shift("f12") > 2.0, "{}", shift("f12"));
    assert!(shift("f11").abs() < 0.1 * shift("f12"), "{} vs {}", shift("f11"), shift("f12"));
}

#[test]
fn extraction_is_deterministic() {
    let p = params(40.0, 1.0, 1.0, 1.1);
    assert_eq!(extract(&branch(&p)).unwrap(), extract(&branch(&p)).unwrap());
}

#[test]
fn amplitude_noise_has_the_declared_spread() {
    let v = extract(&branch(&params(40.0, 1.0, 1.0, 1.1))).unwrap();
    let truth = v.get("p11").unwrap();
    let ratios: Vec<f64> = (0..1000)
        .map(|s| inject_noise(&v, &NoiseConfig::default(), s).unwrap().get("p11").unwrap() / truth)
        .collect();
    let mean = ratios.iter().sum::<f64>() / 1000.0;
    let sd = (ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / 999.0).sqrt();
    assert!((0.004..=0.006).contains(&sd), "{sd}");
}
