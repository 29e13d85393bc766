//! Jump-point features of a frequency response.
//!
//! Index `j` of `f_ij`, `p_ij` runs over the four folds: 1 and 2 are the
//! jump-down points of the first and second resonance, 3 and 4 the matching
//! jump-up points. `i` is the oscillator whose amplitude is read. The slopes
//! `alpha_i1`, `alpha_i2` are secants between the two folds of a resonance.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::continuation::{FoldKind, ResponseBranch, Resonance};
use crate::error::{Error, Result};
use crate::model::SystemParams;

pub const FEATURE_COUNT: usize = 20;

pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "f11", "f12", "f13", "f14", "p11", "p12", "p13", "p14", "alpha11", "alpha12", "f21", "f22", "f23", "f24", "p21",
    "p22", "p23", "p24", "alpha21", "alpha22",
];

/// Fold used for feature index `j` (0-based).
const FOLD_ORDER: [(Resonance, FoldKind); 4] = [
    (Resonance::First, FoldKind::JumpDown),
    (Resonance::Second, FoldKind::JumpDown),
    (Resonance::First, FoldKind::JumpUp),
    (Resonance::Second, FoldKind::JumpUp),
];

fn f_index(osc: usize, j: usize) -> usize {
    10 * osc + j
}

fn p_index(osc: usize, j: usize) -> usize {
    10 * osc + 4 + j
}

fn alpha_index(osc: usize, r: usize) -> usize {
    10 * osc + 8 + r
}

pub fn feature_index(name: &str) -> Option<usize> {
    FEATURE_NAMES.iter().position(|&n| n == name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: [f64; FEATURE_COUNT],
    pub valid: [bool; FEATURE_COUNT],
}

impl Default for FeatureVector {
    fn default() -> Self {
        Self {
            values: [f64::NAN; FEATURE_COUNT],
            valid: [false; FEATURE_COUNT],
        }
    }
}

impl FeatureVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        let i = feature_index(name)?;
        self.valid[i].then_some(self.values[i])
    }

    pub fn all_valid(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }

    /// Recomputes the four secant slopes from the fold entries.
    fn update_slopes(&mut self) {
        for osc in 0..2 {
            for r in 0..2 {
                let (down, up) = (r, r + 2);
                let ends = [f_index(osc, down), f_index(osc, up), p_index(osc, down), p_index(osc, up)];
                let k = alpha_index(osc, r);
                if ends.iter().all(|&e| self.valid[e]) {
                    let v = &self.values;
                    self.values[k] = (v[ends[2]] - v[ends[3]]) / (v[ends[0]] - v[ends[1]]);
                    self.valid[k] = self.values[k].is_finite();
                } else {
                    self.values[k] = f64::NAN;
                    self.valid[k] = false;
                }
            }
        }
    }
}

/// Features of a branch with all four folds.
pub fn extract(branch: &ResponseBranch) -> Result<FeatureVector> {
    if branch.folds.len() != 4 {
        return Err(Error::MissingFolds(branch.folds.len()));
    }
    let v = extract_partial(branch);
    if !v.all_valid() {
        return Err(Error::MissingFolds(branch.folds.len()));
    }
    Ok(v)
}

/// Like [`extract`], but entries whose fold is absent are left invalid.
pub fn extract_partial(branch: &ResponseBranch) -> FeatureVector {
    let mut v = FeatureVector::default();
    for (j, &(r, k)) in FOLD_ORDER.iter().enumerate() {
        if let Some(fold) = branch.fold(r, k) {
            for (osc, u) in [fold.response.u1, fold.response.u2].into_iter().enumerate() {
                v.values[f_index(osc, j)] = fold.sigma1;
                v.values[p_index(osc, j)] = u;
                v.valid[f_index(osc, j)] = true;
                v.valid[p_index(osc, j)] = true;
            }
        }
    }
    v.update_slopes();
    v
}

/// Builds a vector from measured jump points, ordered as the fold indices
/// `j = 1..4`: (detuning, amplitude of x1, amplitude of x2).
pub fn from_jump_points(points: [(f64, f64, f64); 4]) -> FeatureVector {
    let mut v = FeatureVector::default();
    for (j, (sigma1, u1, u2)) in points.into_iter().enumerate() {
        for (osc, u) in [u1, u2].into_iter().enumerate() {
            v.values[f_index(osc, j)] = sigma1;
            v.values[p_index(osc, j)] = u;
            v.valid[f_index(osc, j)] = true;
            v.valid[p_index(osc, j)] = true;
        }
    }
    v.update_slopes();
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Relative standard deviation on amplitude features.
    pub sigma_rel: f64,
    /// Absolute standard deviation on detuning features.
    pub sigma_abs: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma_rel: 0.005,
            sigma_abs: 0.01,
        }
    }
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self {
            sigma_rel: 0.0,
            sigma_abs: 0.0,
        }
    }
}

/// Perturbs the fold entries and recomputes the slopes from them.
pub fn inject_noise(v: &FeatureVector, noise: &NoiseConfig, seed: u64) -> Result<FeatureVector> {
    let amp = Normal::new(0.0, noise.sigma_rel).map_err(|e| Error::InvalidParams(e.to_string()))?;
    let freq = Normal::new(0.0, noise.sigma_abs).map_err(|e| Error::InvalidParams(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = v.clone();
    for osc in 0..2 {
        for j in 0..4 {
            let (fi, pi) = (f_index(osc, j), p_index(osc, j));
            // Draw both numbers even for invalid entries so one bad entry
            // does not shift the noise of the others.
            let (df, dp) = (freq.sample(&mut rng), amp.sample(&mut rng));
            if out.valid[fi] {
                out.values[fi] += df;
            }
            if out.valid[pi] {
                out.values[pi] *= 1.0 + dp;
            }
        }
    }
    out.update_slopes();
    Ok(out)
}

/// One dataset row: the generating parameters and the features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub record_id: usize,
    pub params: SystemParams,
    pub features: FeatureVector,
}

const PARAM_COLUMNS: [&str; 4] = ["d", "beta", "delta", "f"];

fn fmt_opt(v: f64, valid: bool) -> String {
    if valid {
        v.to_string()
    } else {
        String::new()
    }
}

pub fn write_records<W: Write>(records: &[FeatureRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let header: Vec<&str> = ["record_id"]
        .into_iter()
        .chain(PARAM_COLUMNS)
        .chain(FEATURE_NAMES)
        .collect();
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.record_id.to_string(),
            r.params.d.to_string(),
            r.params.beta.to_string(),
            r.params.delta.to_string(),
            r.params.f.to_string(),
        ];
        row.extend((0..FEATURE_COUNT).map(|i| fmt_opt(r.features.values[i], r.features.valid[i])));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a feature CSV. Missing feature columns or empty cells are invalid
/// entries; `omega0` and `epsilon` take their defaults.
pub fn read_records<R: Read>(input: R) -> Result<Vec<FeatureRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let id_col = col("record_id").ok_or_else(|| Error::Data("missing column `record_id`".into()))?;
    let param_cols: Vec<usize> = PARAM_COLUMNS
        .iter()
        .map(|&c| col(c).ok_or_else(|| Error::Data(format!("missing column `{c}`"))))
        .collect::<Result<_>>()?;
    let feature_cols: Vec<Option<usize>> = FEATURE_NAMES.iter().map(|&n| col(n)).collect();
    let parse = |s: &str, what: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::Data(format!("bad number `{s}` in column `{what}`")))
    };
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let record_id = row[id_col]
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("bad record_id `{}`", &row[id_col])))?;
        let params = SystemParams {
            d: parse(&row[param_cols[0]], "d")?,
            beta: parse(&row[param_cols[1]], "beta")?,
            delta: parse(&row[param_cols[2]], "delta")?,
            f: parse(&row[param_cols[3]], "f")?,
            ..SystemParams::default()
        };
        let mut features = FeatureVector::default();
        for (i, c) in feature_cols.iter().enumerate() {
            if let Some(c) = *c {
                let cell = row[c].trim();
                if !cell.is_empty() {
                    let v = parse(cell, FEATURE_NAMES[i])?;
                    features.values[i] = v;
                    features.valid[i] = v.is_finite();
                }
            }
        }
        out.push(FeatureRecord {
            record_id,
            params,
            features,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FeatureVector {
        from_jump_points([(4.5, 0.5, 0.49), (8.3, 0.3, 0.28), (1.9, 0.2, 0.23), (8.2, 0.25, 0.2)])
    }

    #[test]
    fn canonical_layout() {
        assert_eq!(feature_index("f11"), Some(0));
        assert_eq!(feature_index("alpha12"), Some(9));
        assert_eq!(feature_index("f21"), Some(10));
        assert_eq!(feature_index("alpha22"), Some(19));
        for osc in 0..2 {
            for j in 0..4 {
                assert_eq!(FEATURE_NAMES[f_index(osc, j)], format!("f{}{}", osc + 1, j + 1));
                assert_eq!(FEATURE_NAMES[p_index(osc, j)], format!("p{}{}", osc + 1, j + 1));
            }
            for r in 0..2 {
                assert_eq!(FEATURE_NAMES[alpha_index(osc, r)], format!("alpha{}{}", osc + 1, r + 1));
            }
        }
    }

    #[test]
    fn slopes_are_secants() {
        let v = sample();
        assert!(v.all_valid());
        assert_eq!(v.get("alpha11").unwrap(), (0.5 - 0.2) / (4.5 - 1.9));
        assert_eq!(v.get("alpha22").unwrap(), (0.28 - 0.2) / (8.3 - 8.2));
    }

    #[test]
    fn zero_noise_is_identity_and_seeds_repeat() {
        let v = sample();
        assert_eq!(inject_noise(&v, &NoiseConfig::none(), 3).unwrap(), v);
        let a = inject_noise(&v, &NoiseConfig::default(), 3).unwrap();
        let b = inject_noise(&v, &NoiseConfig::default(), 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, inject_noise(&v, &NoiseConfig::default(), 4).unwrap());
    }

    #[test]
    fn noised_slopes_follow_noised_points() {
        let a = inject_noise(&sample(), &NoiseConfig::default(), 11).unwrap();
        let g = |n: &str| a.get(n).unwrap();
        assert_eq!(g("alpha21"), (g("p21") - g("p23")) / (g("f21") - g("f23")));
        assert_ne!(g("f11"), g("f21"));
    }

    #[test]
    fn invalid_entries_stay_invalid() {
        let mut v = sample();
        v.valid[p_index(0, 1)] = false;
        v.update_slopes();
        assert!(v.get("alpha12").is_none());
        assert!(v.get("alpha11").is_some());
        let n = inject_noise(&v, &NoiseConfig::default(), 1).unwrap();
        assert!(n.get("p12").is_none() && n.get("alpha12").is_none());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let mut v = sample();
        v.valid[3] = false;
        let recs = vec![FeatureRecord {
            record_id: 7,
            params: SystemParams::default().with_delta(1.2345678901234),
            features: v,
        }];
        let mut buf = Vec::new();
        write_records(&recs, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("record_id,d,beta,delta,f,f11,f12,"));
        let back = read_records(buf.as_slice()).unwrap();
        assert_eq!(back[0].record_id, 7);
        assert_eq!(back[0].params, recs[0].params);
        assert_eq!(back[0].features.valid, recs[0].features.valid);
        for i in 0..FEATURE_COUNT {
            if recs[0].features.valid[i] {
                assert_eq!(back[0].features.values[i], recs[0].features.values[i]);
            }
        }
    }
}
