//! Plug-in mutual information between one feature and a quantized target.
//!
//! The target is cut into `classes` bins `y_k` and the feature into `bins_x`
//! bins, both over the observed ranges. With the class priors `p(y_k)` and the
//! per-class histograms `p(x | y_k)`,
//! `I = H(X) - sum_k p(y_k) H(X | y_k)` in nats. Empty bins contribute nothing.

use std::io::{BufRead, BufReader, Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureRecord, FEATURE_COUNT, FEATURE_NAMES};
use crate::simulation::Target;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Binning {
    EqualWidth,
    /// Bins by rank, so any strictly increasing transform leaves them alone.
    EqualMass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiConfig {
    pub bins_x: usize,
    pub classes: usize,
    pub binning: Binning,
}

impl Default for MiConfig {
    fn default() -> Self {
        Self {
            bins_x: 16,
            classes: 10,
            binning: Binning::EqualWidth,
        }
    }
}

/// Bin index of every sample.
pub fn quantize(values: &[f64], bins: usize, binning: Binning) -> Vec<usize> {
    match binning {
        Binning::EqualWidth => {
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let width = hi - lo;
            values
                .iter()
                .map(|&v| {
                    if width > 0.0 {
                        (((v - lo) / width * bins as f64) as usize).min(bins - 1)
                    } else {
                        0
                    }
                })
                .collect()
        }
        Binning::EqualMass => {
            let mut order: Vec<usize> = (0..values.len()).collect();
            order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
            let n = values.len();
            let mut out = vec![0; n];
            for (rank, &i) in order.iter().enumerate() {
                out[i] = rank * bins / n;
            }
            out
        }
    }
}

fn entropy(counts: &[usize], total: usize) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// MI of two already-binned variables.
pub fn mi_from_bins(x: &[usize], bins_x: usize, y: &[usize], classes: usize) -> f64 {
    let n = x.len();
    let mut joint = vec![0usize; bins_x * classes];
    let mut class_counts = vec![0usize; classes];
    for (&xi, &yi) in x.iter().zip(y) {
        joint[yi * bins_x + xi] += 1;
        class_counts[yi] += 1;
    }
    let x_counts: Vec<usize> = (0..bins_x)
        .map(|b| (0..classes).map(|k| joint[k * bins_x + b]).sum())
        .collect();
    let h_x_given_y: f64 = (0..classes)
        .filter(|&k| class_counts[k] > 0)
        .map(|k| {
            let row = &joint[k * bins_x..(k + 1) * bins_x];
            class_counts[k] as f64 / n as f64 * entropy(row, class_counts[k])
        })
        .sum();
    let mi = entropy(&x_counts, n) - h_x_given_y;
    if mi < 0.0 {
        0.0
    } else {
        mi
    }
}

pub fn estimate_mi(x: &[f64], y: &[f64], cfg: &MiConfig) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Data(format!("{} feature samples but {} targets", x.len(), y.len())));
    }
    let need = 10 * cfg.bins_x.max(cfg.classes);
    if x.len() < need {
        return Err(Error::InsufficientSamples { got: x.len(), need });
    }
    if cfg.bins_x == 0 || cfg.classes == 0 {
        return Err(Error::InvalidParams("bin counts must be positive".into()));
    }
    if let Some(bad) = x.iter().chain(y).find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("sample {bad} in mutual information input")));
    }
    let xb = quantize(x, cfg.bins_x, cfg.binning);
    let yb = quantize(y, cfg.classes, cfg.binning);
    Ok(mi_from_bins(&xb, cfg.bins_x, &yb, cfg.classes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub feature: String,
    pub mi_nats: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiRanking {
    pub entries: Vec<RankEntry>,
    pub config: MiConfig,
    pub samples: usize,
}

pub const MIN_RANK_ROWS: usize = 50;

impl MiRanking {
    pub fn top(&self, k: usize) -> Vec<String> {
        self.entries.iter().take(k).map(|e| e.feature.clone()).collect()
    }

    pub fn position(&self, feature: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.feature == feature)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let binning = match self.config.binning {
            Binning::EqualWidth => "equal-width",
            Binning::EqualMass => "equal-mass",
        };
        writeln!(
            out,
            "# bins_x={} classes={} samples={} binning={} unit=nats",
            self.config.bins_x, self.config.classes, self.samples, binning
        )?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["feature", "mi_nats", "rank"])?;
        for (i, e) in self.entries.iter().enumerate() {
            w.write_record([e.feature.clone(), e.mi_nats.to_string(), (i + 1).to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut reader = BufReader::new(input);
        let mut first = String::new();
        reader.read_line(&mut first)?;
        let mut config = MiConfig::default();
        let mut samples = 0;
        for kv in first.trim_start_matches('#').split_whitespace() {
            let (k, v) = kv.split_once('=').unwrap_or((kv, ""));
            let num = || v.parse::<usize>().map_err(|_| Error::Data(format!("bad ranking header `{kv}`")));
            match k {
                "bins_x" => config.bins_x = num()?,
                "classes" => config.classes = num()?,
                "samples" => samples = num()?,
                "binning" if v == "equal-mass" => config.binning = Binning::EqualMass,
                _ => {}
            }
        }
        let mut rdr = csv::Reader::from_reader(reader);
        let mut entries = Vec::new();
        for row in rdr.records() {
            let row = row?;
            let mi_nats = row[1]
                .parse()
                .map_err(|_| Error::Data(format!("bad MI value `{}`", &row[1])))?;
            entries.push(RankEntry {
                feature: row[0].to_string(),
                mi_nats,
            });
        }
        Ok(Self {
            entries,
            config,
            samples,
        })
    }
}

/// Ranks all twenty features by MI with the target over the fully valid rows.
pub fn rank_features(records: &[FeatureRecord], target: Target, cfg: &MiConfig) -> Result<MiRanking> {
    let rows: Vec<&FeatureRecord> = records.iter().filter(|r| r.features.all_valid()).collect();
    if rows.len() < MIN_RANK_ROWS {
        return Err(Error::InsufficientSamples {
            got: rows.len(),
            need: MIN_RANK_ROWS,
        });
    }
    let y: Vec<f64> = rows.iter().map(|r| target.get(&r.params)).collect();
    let scores: Vec<f64> = (0..FEATURE_COUNT)
        .into_par_iter()
        .map(|i| {
            let x: Vec<f64> = rows.iter().map(|r| r.features.values[i]).collect();
            estimate_mi(&x, &y, cfg)
        })
        .collect::<Result<_>>()?;
    let mut entries: Vec<RankEntry> = FEATURE_NAMES
        .iter()
        .zip(scores)
        .map(|(n, s)| RankEntry {
            feature: n.to_string(),
            mi_nats: s,
        })
        .collect();
    entries.sort_by(|a, b| b.mi_nats.total_cmp(&a.mi_nats));
    Ok(MiRanking {
        entries,
        config: *cfg,
        samples: rows.len(),
    })
}
