use adaptive_duffing::ann::{forward_search, grid_search, split_indices, train, Grids, Hyper, TrainedEstimator};
use adaptive_duffing::features::{FeatureRecord, FeatureVector, FEATURE_COUNT, FEATURE_NAMES};
use adaptive_duffing::mi::{MiConfig, MiRanking, RankEntry};
use adaptive_duffing::simulation::Target;
use adaptive_duffing::SystemParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `f12` is a smooth function of delta; every other feature is noise.
fn records(n: usize, seed: u64) -> Vec<FeatureRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let delta: f64 = rng.random_range(1.0..2.0);
            let mut values = [0.0; FEATURE_COUNT];
            for v in values.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            values[1] = (1.0 + 2.0 * delta).sqrt();
            FeatureRecord {
                record_id: i,
                params: SystemParams::default().with_delta(delta),
                features: FeatureVector {
                    values,
                    valid: [true; FEATURE_COUNT],
                },
            }
        })
        .collect()
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

fn fast() -> Hyper {
    Hyper {
        hidden: 5,
        max_epochs: 4000,
        ..Hyper::default()
    }
}

#[test]
fn learns_a_smooth_map() {
    let data = records(100, 1);
    let m = train(&data, &names(&["f12"]), Target::Delta, &fast(), 3).unwrap();
    assert!(m.metrics.test_rmse < 0.02, "{:?}", m.metrics);
}

fn weight_norm(m: &TrainedEstimator) -> f64 {
    m.w1.iter().chain(&m.w2).flatten().map(|w| w * w).sum::<f64>()
}

fn spread(m: &TrainedEstimator, data: &[FeatureRecord]) -> f64 {
    let preds: Vec<f64> = data.iter().map(|r| m.predict(&r.features).unwrap()).collect();
    let mean = preds.iter().sum::<f64>() / preds.len() as f64;
    (preds.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / preds.len() as f64).sqrt()
}

#[test]
fn penalty_shrinks_weights_toward_the_mean() {
    let data = records(100, 1);
    let cols = names(&["f12", "p11"]);
    let free = train(&data, &cols, Target::Delta, &fast(), 3).unwrap();
    let heavy = train(&data, &cols, Target::Delta, &Hyper { lambda: 10.0, ..fast() }, 3).unwrap();
    assert!(weight_norm(&heavy) < 0.5 * weight_norm(&free));
    assert!(spread(&heavy, &data) < 0.5 * spread(&free, &data));
    let (tr, _, _) = split_indices(data.len(), 3);
    let mean = tr.iter().map(|&i| data[i].params.delta).sum::<f64>() / tr.len() as f64;
    let centre = data.iter().map(|r| heavy.predict(&r.features).unwrap()).sum::<f64>() / data.len() as f64;
    assert!((centre - mean).abs() < 0.05, "{centre} vs {mean}");
}

#[test]
fn json_round_trip_is_bit_identical() {
    let data = records(100, 4);
    let m = train(&data, &names(&["f12", "p11", "p21"]), Target::Delta, &fast(), 8).unwrap();
    let mut buf = Vec::new();
    m.write_json(&mut buf).unwrap();
    let back = TrainedEstimator::read_json(buf.as_slice()).unwrap();
    assert_eq!(back, m);
    for r in &data {
        assert_eq!(back.predict(&r.features).unwrap().to_bits(), m.predict(&r.features).unwrap().to_bits());
    }
    let json: serde_json::Value = serde_json::from_slice(&buf).unwrap();
    for key in ["features", "norm", "hidden", "W1", "b1", "W2", "b2", "activation", "lambda", "seed", "metrics"] {
        assert!(json.get(key).is_some(), "{key}");
    }
}

#[test]
fn training_is_deterministic() {
    let data = records(80, 2);
    let a = train(&data, &names(&["f12", "f11"]), Target::Delta, &fast(), 5).unwrap();
    let b = train(&data, &names(&["f12", "f11"]), Target::Delta, &fast(), 5).unwrap();
    assert_eq!(a, b);
}

#[test]
fn single_cell_grid_matches_plain_training() {
    let data = records(80, 2);
    let h = fast();
    let g = grid_search(&data, &names(&["f12"]), Target::Delta, &Grids::single(&h), &h, 7).unwrap();
    let m = train(&data, &names(&["f12"]), Target::Delta, &h, 7).unwrap();
    assert_eq!(g.best, h);
    assert_eq!(g.model, m);
    assert_eq!(g.cells.len(), 1);
}

#[test]
fn forward_search_stops_at_the_informative_feature() {
    let data = records(100, 6);
    let mut order: Vec<&str> = vec!["f12"];
    order.extend(FEATURE_NAMES.iter().filter(|n| **n != "f12"));
    let ranking = MiRanking {
        entries: order
            .iter()
            .enumerate()
            .map(|(i, n)| RankEntry {
                feature: n.to_string(),
                mi_nats: 1.0 / (1.0 + i as f64),
            })
            .collect(),
        config: MiConfig::default(),
        samples: data.len(),
    };
    let h = fast();
    let report = forward_search(&data, &ranking, Target::Delta, &Grids::single(&h), &h, 1).unwrap();
    assert_eq!(report.rows.len(), FEATURE_COUNT);
    assert_eq!(report.selected_k, 1, "{:?}", report.rows.iter().map(|r| r.val_rmse).collect::<Vec<_>>());
    assert!(report.rows[19].val_rmse > report.rows[0].val_rmse);
}
