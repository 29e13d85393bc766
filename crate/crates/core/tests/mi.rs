use adaptive_duffing::features::{FeatureRecord, FeatureVector, FEATURE_COUNT};
use adaptive_duffing::mi::{estimate_mi, rank_features, Binning, MiConfig};
use adaptive_duffing::simulation::Target;
use adaptive_duffing::{Error, SystemParams};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn independent_uniforms_carry_almost_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
    let y: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
    let cfg = MiConfig {
        bins_x: 8,
        classes: 8,
        ..MiConfig::default()
    };
    let mi = estimate_mi(&x, &y, &cfg).unwrap();
    assert!((0.0..0.02).contains(&mi), "{mi}");
}

#[test]
fn permuted_targets_fall_to_the_null() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let y: Vec<f64> = (0..5000).map(|_| rng.random_range(1.0..2.0)).collect();
    let x: Vec<f64> = y.iter().map(|v| (3.0 * v).sin() + 0.05 * rng.random::<f64>()).collect();
    let cfg = MiConfig::default();
    let dependent = estimate_mi(&x, &y, &cfg).unwrap();
    let mut shuffled = y.clone();
    shuffled.shuffle(&mut rng);
    let null = estimate_mi(&x, &shuffled, &cfg).unwrap();
    assert!(dependent > 1.0, "{dependent}");
    assert!(null < 0.05, "{null}");
}

#[test]
fn estimate_is_never_negative() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for binning in [Binning::EqualWidth, Binning::EqualMass] {
        for _ in 0..50 {
            let n = rng.random_range(160..400);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let cfg = MiConfig { binning, ..MiConfig::default() };
            assert!(estimate_mi(&x, &y, &cfg).unwrap() >= 0.0);
        }
    }
}

#[test]
fn mismatched_and_non_finite_inputs_are_rejected() {
    let x = vec![0.0; 200];
    assert!(estimate_mi(&x, &x[..199], &MiConfig::default()).is_err());
    let mut y = vec![0.0; 200];
    y[3] = f64::NAN;
    assert!(matches!(estimate_mi(&x, &y, &MiConfig::default()), Err(Error::NonFinite(_))));
}

fn record(i: usize, delta: f64, rng: &mut impl Rng) -> FeatureRecord {
    let mut features = FeatureVector {
        values: [0.0; FEATURE_COUNT],
        valid: [true; FEATURE_COUNT],
    };
    for v in features.values.iter_mut() {
        *v = rng.random();
    }
    // f12 tracks the target, p11 loosely.
    features.values[1] = 4.0 * delta;
    features.values[4] = delta + 0.5 * rng.random::<f64>();
    FeatureRecord {
        record_id: i,
        params: SystemParams::default().with_delta(delta),
        features,
    }
}

#[test]
fn ranking_orders_by_information() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let records: Vec<FeatureRecord> = (0..400).map(|i| record(i, rng.random_range(1.0..2.0), &mut rng)).collect();
    let r = rank_features(&records, Target::Delta, &MiConfig::default()).unwrap();
    assert_eq!(r.top(2), ["f12", "p11"]);
    assert_eq!(r.entries.len(), FEATURE_COUNT);
    assert!(r.entries.windows(2).all(|w| w[0].mi_nats >= w[1].mi_nats));
    assert_eq!(r.samples, 400);
}

#[test]
fn ranking_needs_fifty_valid_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut records: Vec<FeatureRecord> = (0..60).map(|i| record(i, rng.random_range(1.0..2.0), &mut rng)).collect();
    for r in records.iter_mut().take(11) {
        r.features.valid[7] = false;
    }
    assert!(matches!(
        rank_features(&records, Target::Delta, &MiConfig::default()),
        Err(Error::InsufficientSamples { got: 49, need: 50 })
    ));
}
