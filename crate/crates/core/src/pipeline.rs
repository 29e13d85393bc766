//! Scenarios, synthetic datasets and the table experiments.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ann::{grid_search, Grids, Hyper, TrainedEstimator};
use crate::continuation::{default_window, trace_branch, StepControls};
use crate::error::{Error, Result};
use crate::features::{extract, from_jump_points, inject_noise, write_records, FeatureRecord, NoiseConfig};
use crate::mi::{rank_features, MiConfig, MiRanking};
use crate::model::SystemParams;
use crate::simulation::{
    fit_frequencies, graybox_fit, hysteresis_loops, observe, omega_grid, sweep, Direction, GrayBoxConfig,
    SweepConfig, Target,
};

/// Redraws allowed per record after the first draw.
pub const MAX_REDRAWS: usize = 10;
/// Largest tolerated share of records that exhaust their redraws.
pub const MAX_REJECTION_RATE: f64 = 0.05;
/// Smallest share of sweeps that must show both hysteresis loops.
pub const MIN_SWEEP_FEATURE_RATE: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Param {
    Omega0,
    D,
    Beta,
    Delta,
    F,
    Epsilon,
}

impl Param {
    pub fn set(&self, p: &mut SystemParams, v: f64) {
        match self {
            Param::Omega0 => p.omega0 = v,
            Param::D => p.d = v,
            Param::Beta => p.beta = v,
            Param::Delta => p.delta = v,
            Param::F => p.f = v,
            Param::Epsilon => p.epsilon = v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sampled {
    pub param: Param,
    pub low: f64,
    pub high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellGrid {
    pub param: Param,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub train: usize,
    pub test: usize,
    pub graybox: usize,
    pub cross_source: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub target: Target,
    /// Values of every parameter not sampled or gridded.
    pub fixed: SystemParams,
    /// Uniform distributions drawn per record, in this order.
    pub sampled: Vec<Sampled>,
    /// One experiment cell per value; absent means a single cell.
    #[serde(default)]
    pub grid: Option<CellGrid>,
    pub counts: Counts,
    pub noise: NoiseConfig,
    /// Feature set used by the experiment's estimator.
    pub features: Vec<String>,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    pub seed: u64,
}

fn default_hidden() -> usize {
    15
}

const TABLE_GRID: [f64; 6] = [1.0, 1.2, 1.4, 1.6, 1.8, 2.0];

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl Scenario {
    /// `table1`, `table2` or `ideal`.
    pub fn builtin(name: &str) -> Result<Self> {
        let base = SystemParams {
            beta: 40.0,
            ..SystemParams::default()
        };
        let f_range = Sampled {
            param: Param::F,
            low: 0.9,
            high: 1.1,
        };
        let counts = Counts {
            train: 100,
            test: 30,
            graybox: 40,
            cross_source: 40,
        };
        match name {
            "table1" => Ok(Self {
                name: name.into(),
                target: Target::Delta,
                fixed: base,
                sampled: vec![
                    Sampled {
                        param: Param::Delta,
                        low: 1.0,
                        high: 2.0,
                    },
                    f_range,
                ],
                grid: Some(CellGrid {
                    param: Param::D,
                    values: TABLE_GRID.to_vec(),
                }),
                counts,
                noise: NoiseConfig::default(),
                features: names(&["f12", "f13", "f22", "f23"]),
                hidden: 15,
                seed: 1,
            }),
            "table2" => Ok(Self {
                name: name.into(),
                target: Target::D,
                fixed: base,
                sampled: vec![
                    Sampled {
                        param: Param::D,
                        low: 1.0,
                        high: 2.0,
                    },
                    f_range,
                ],
                grid: Some(CellGrid {
                    param: Param::Delta,
                    values: TABLE_GRID.to_vec(),
                }),
                counts,
                noise: NoiseConfig::default(),
                features: names(&["p11", "p12", "p13", "p14", "p21", "p22", "p23", "p24", "f11", "f21"]),
                hidden: 15,
                seed: 2,
            }),
            "ideal" => Ok(Self {
                name: name.into(),
                target: Target::Delta,
                fixed: SystemParams { d: 1.0, f: 1.0, ..base },
                sampled: vec![Sampled {
                    param: Param::Delta,
                    low: 1.0,
                    high: 2.0,
                }],
                grid: None,
                counts: Counts {
                    graybox: 0,
                    cross_source: 0,
                    ..counts
                },
                noise: NoiseConfig::none(),
                features: names(&["f12", "f13", "f22", "f23"]),
                hidden: 15,
                seed: 3,
            }),
            other => Err(Error::InvalidParams(format!("unknown scenario `{other}`"))),
        }
    }

    /// A built-in name or a path to a scenario JSON file.
    pub fn load(spec: &str) -> Result<Self> {
        if let Ok(s) = Self::builtin(spec) {
            return Ok(s);
        }
        let s: Self = serde_json::from_reader(File::open(spec)?)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.counts.train == 0 || self.counts.test == 0 {
            return Err(Error::InvalidParams("train and test counts must be positive".into()));
        }
        if self.features.is_empty() || self.hidden == 0 {
            return Err(Error::InvalidParams("scenario needs features and a hidden width".into()));
        }
        for name in &self.features {
            if crate::features::feature_index(name).is_none() {
                return Err(Error::MissingFeature(name.clone()));
            }
        }
        for s in &self.sampled {
            if !(s.low <= s.high) {
                return Err(Error::InvalidParams(format!("empty range for {:?}", s.param)));
            }
        }
        for cell in 0..self.cell_count() {
            for corner in [false, true] {
                let mut p = self.cell_params(cell);
                for s in &self.sampled {
                    s.param.set(&mut p, if corner { s.high } else { s.low });
                }
                p.validate()?;
            }
        }
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        self.grid.as_ref().map_or(1, |g| g.values.len())
    }

    pub fn cell_value(&self, cell: usize) -> Option<f64> {
        self.grid.as_ref().map(|g| g.values[cell])
    }

    /// Fixed parameters with the cell's grid value applied.
    pub fn cell_params(&self, cell: usize) -> SystemParams {
        let mut p = self.fixed;
        if let Some(g) = &self.grid {
            g.param.set(&mut p, g.values[cell]);
        }
        p
    }

    /// Gray-box settings with the initial guess and bounds taken from the
    /// target's sampled range when there is one.
    pub fn graybox_config(&self) -> GrayBoxConfig {
        let mut cfg = GrayBoxConfig::for_target(self.target);
        let param = match self.target {
            Target::Delta => Param::Delta,
            Target::D => Param::D,
        };
        if let Some(s) = self.sampled.iter().find(|s| s.param == param && s.low < s.high) {
            cfg.bounds = (s.low, s.high);
            cfg.init = 0.5 * (s.low + s.high);
        }
        cfg
    }

    fn draw(&self, cell: usize, rng: &mut impl Rng) -> SystemParams {
        let mut p = self.cell_params(cell);
        for s in &self.sampled {
            let v = if s.low == s.high { s.low } else { rng.random_range(s.low..=s.high) };
            s.param.set(&mut p, v);
        }
        p
    }
}

/// Which stream of records a seed belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Train = 1,
    Test = 2,
    CrossSource = 3,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for one attempt of one record, independent of execution order.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub cell: usize,
    pub index: usize,
    pub attempts: usize,
    pub last_error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellData {
    pub records: Vec<FeatureRecord>,
    pub rejections: Vec<Rejection>,
    /// Redraws spent on records that eventually succeeded.
    pub redraws: usize,
}

/// Continuation features of one parameter draw.
pub fn continuation_features(p: &SystemParams, noise: &NoiseConfig, noise_seed: u64) -> Result<crate::features::FeatureVector> {
    let (lo, hi) = default_window(p);
    let branch = trace_branch(p, lo, hi, &StepControls::default())?;
    inject_noise(&extract(&branch)?, noise, noise_seed)
}

/// Generates `count` records of one stream for one cell. Each record keeps
/// redrawing its parameters until the branch has four folds, at most
/// [`MAX_REDRAWS`] times.
pub fn generate_records(s: &Scenario, cell: usize, stream: Stream, count: usize) -> Result<CellData> {
    let outcomes: Vec<std::result::Result<(FeatureRecord, usize), Rejection>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut last_error = String::new();
            for attempt in 0..=MAX_REDRAWS {
                let seed = derive_seed(s.seed, &[cell as u64, stream as u64, i as u64, attempt as u64]);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let p = s.draw(cell, &mut rng);
                match continuation_features(&p, &s.noise, rng.random()) {
                    Ok(features) => {
                        return Ok((
                            FeatureRecord {
                                record_id: i,
                                params: p,
                                features,
                            },
                            attempt,
                        ))
                    }
                    Err(e) => {
                        if !matches!(e, Error::MissingFolds(_)) {
                            log::warn!("record {i} of cell {cell}: {e}");
                        }
                        last_error = e.to_string();
                    }
                }
            }
            Err(Rejection {
                cell,
                index: i,
                attempts: MAX_REDRAWS + 1,
                last_error,
            })
        })
        .collect();
    let mut records = Vec::with_capacity(count);
    let mut rejections = Vec::new();
    let mut redraws = 0;
    for o in outcomes {
        match o {
            Ok((r, a)) => {
                redraws += a;
                records.push(r);
            }
            Err(rej) => rejections.push(rej),
        }
    }
    if rejections.len() as f64 > MAX_REJECTION_RATE * count as f64 {
        return Err(Error::TooManyRejections {
            rejected: rejections.len(),
            total: count,
        });
    }
    Ok(CellData {
        records,
        rejections,
        redraws,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_rejections(path: &Path, rejections: &[Rejection]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["cell", "index", "attempts", "last_error"])?;
    for r in rejections {
        w.write_record([r.cell.to_string(), r.index.to_string(), r.attempts.to_string(), r.last_error.clone()])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `cell<k>_train.csv` and `cell<k>_test.csv` for every cell, plus
/// `rejections.csv` and a copy of the scenario.
pub fn generate_dataset(s: &Scenario, out: &Path) -> Result<()> {
    s.validate()?;
    fs::create_dir_all(out)?;
    serde_json::to_writer_pretty(create(&out.join("scenario.json"))?, s)?;
    let mut all_rejections = Vec::new();
    for cell in 0..s.cell_count() {
        for (stream, count, tag) in [(Stream::Train, s.counts.train, "train"), (Stream::Test, s.counts.test, "test")] {
            let data = generate_records(s, cell, stream, count)?;
            write_records(&data.records, create(&out.join(format!("cell{cell}_{tag}.csv")))?)?;
            all_rejections.extend(data.rejections);
        }
    }
    write_rejections(&out.join("rejections.csv"), &all_rejections)
}

fn rmse(pairs: &[(f64, f64)]) -> f64 {
    (pairs.iter().map(|(t, p)| (t - p).powi(2)).sum::<f64>() / pairs.len() as f64).sqrt()
}

/// Ranking with bin counts capped so that every bin has ten samples on
/// average.
pub fn rank_capped(records: &[FeatureRecord], target: Target, cfg: &MiConfig) -> Result<MiRanking> {
    let n = records.iter().filter(|r| r.features.all_valid()).count();
    let cap = (n / 10).max(2);
    let capped = MiConfig {
        bins_x: cfg.bins_x.min(cap),
        classes: cfg.classes.min(cap),
        ..*cfg
    };
    rank_features(records, target, &capped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParityRow {
    pub cell: usize,
    pub source: String,
    pub record_id: usize,
    pub truth: f64,
    pub predicted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub cell: usize,
    pub value: Option<f64>,
    pub n_train: usize,
    pub n_test: usize,
    pub rmse_adaptive: f64,
    pub n_graybox: usize,
    pub rmse_graybox: f64,
    pub graybox_stalled: usize,
    pub rejected: usize,
    pub hyper: Option<Hyper>,
    pub error: Option<String>,
}

impl CellReport {
    pub fn complete(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellTiming {
    pub cell: usize,
    pub generate_seconds: f64,
    pub train_seconds: f64,
    /// Batch prediction over the records given to the gray box.
    pub predict_seconds: f64,
    pub graybox_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellArtifacts {
    pub model: Option<TrainedEstimator>,
    pub ranking: Option<MiRanking>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub scenario: Scenario,
    pub rows: Vec<CellReport>,
    pub timings: Vec<CellTiming>,
    pub parity: Vec<ParityRow>,
    pub artifacts: Vec<CellArtifacts>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

impl ExperimentReport {
    pub fn complete(&self) -> bool {
        self.rows.iter().all(|r| r.complete())
    }

    pub fn mean_rmse_adaptive(&self) -> f64 {
        mean(self.rows.iter().filter(|r| r.complete()).map(|r| r.rmse_adaptive))
    }

    pub fn mean_rmse_graybox(&self) -> f64 {
        mean(self.rows.iter().filter(|r| r.complete()).map(|r| r.rmse_graybox))
    }

    /// Per-cell results; deterministic for a given scenario.
    pub fn write_report<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "cell",
            "value",
            "n_train",
            "n_test",
            "rmse_adaptive",
            "n_graybox",
            "rmse_graybox",
            "graybox_stalled",
            "rejected",
            "hidden",
            "lambda",
            "learning_rate",
            "complete",
            "error",
        ])?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &self.rows {
            w.write_record([
                r.cell.to_string(),
                opt(r.value),
                r.n_train.to_string(),
                r.n_test.to_string(),
                r.rmse_adaptive.to_string(),
                r.n_graybox.to_string(),
                r.rmse_graybox.to_string(),
                r.graybox_stalled.to_string(),
                r.rejected.to_string(),
                r.hyper.map_or(String::new(), |h| h.hidden.to_string()),
                opt(r.hyper.map(|h| h.lambda)),
                opt(r.hyper.map(|h| h.learning_rate)),
                r.complete().to_string(),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        w.write_record([
            "mean".to_string(),
            String::new(),
            String::new(),
            String::new(),
            self.mean_rmse_adaptive().to_string(),
            String::new(),
            self.mean_rmse_graybox().to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            self.complete().to_string(),
            String::new(),
        ])?;
        w.flush()?;
        Ok(())
    }

    pub fn write_timings<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["cell", "generate_seconds", "train_seconds", "predict_seconds", "graybox_seconds"])?;
        for t in &self.timings {
            w.write_record([
                t.cell.to_string(),
                t.generate_seconds.to_string(),
                t.train_seconds.to_string(),
                t.predict_seconds.to_string(),
                t.graybox_seconds.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_parity<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["cell", "source", "record_id", "truth", "predicted"])?;
        for p in &self.parity {
            w.write_record([
                p.cell.to_string(),
                p.source.clone(),
                p.record_id.to_string(),
                p.truth.to_string(),
                p.predicted.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `report.csv`, `timings.csv`, `parity.csv`, and per cell the ranking and
    /// model used.
    pub fn write_dir(&self, out: &Path) -> Result<()> {
        fs::create_dir_all(out)?;
        self.write_report(create(&out.join("report.csv"))?)?;
        self.write_timings(create(&out.join("timings.csv"))?)?;
        self.write_parity(create(&out.join("parity.csv"))?)?;
        for (cell, a) in self.artifacts.iter().enumerate() {
            if let Some(r) = &a.ranking {
                r.write_csv(create(&out.join(format!("cell{cell}_rank.csv")))?)?;
            }
            if let Some(m) = &a.model {
                m.write_json(create(&out.join(format!("cell{cell}_model.json")))?)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOptions {
    pub grids: Grids,
    pub base: Hyper,
    pub mi: MiConfig,
    pub run_graybox: bool,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self {
            grids: Grids {
                hidden: vec![15],
                ..Grids::default()
            },
            base: Hyper::default(),
            mi: MiConfig::default(),
            run_graybox: true,
        }
    }
}

/// Gray-box estimates for the given records. Fit frequencies come from the
/// parameters with the unknown set to the initial guess.
pub fn graybox_estimates(records: &[FeatureRecord], target: Target, cfg: &GrayBoxConfig) -> Result<Vec<(f64, f64, bool)>> {
    records
        .par_iter()
        .map(|r| {
            let omegas = fit_frequencies(&target.set(&r.params, cfg.init), 10);
            let observed = observe(&r.params, &omegas, cfg)?;
            let est = graybox_fit(&observed, target, cfg)?;
            Ok((target.get(&r.params), est.estimate, est.stalled()))
        })
        .collect()
}

struct CellOutcome {
    row: CellReport,
    timing: CellTiming,
    parity: Vec<ParityRow>,
    artifacts: CellArtifacts,
}

fn run_cell(s: &Scenario, cell: usize, opts: &ExperimentOptions) -> Result<CellOutcome> {
    let t0 = Instant::now();
    let train = generate_records(s, cell, Stream::Train, s.counts.train)?;
    let test = generate_records(s, cell, Stream::Test, s.counts.test.max(s.counts.graybox))?;
    let generate_seconds = t0.elapsed().as_secs_f64();

    let ranking = rank_capped(&train.records, s.target, &opts.mi).ok();
    let t1 = Instant::now();
    let grids = Grids {
        hidden: vec![s.hidden],
        ..opts.grids.clone()
    };
    let g = grid_search(&train.records, &s.features, s.target, &grids, &opts.base, s.seed ^ cell as u64)?;
    let train_seconds = t1.elapsed().as_secs_f64();

    let n_test = s.counts.test.min(test.records.len());
    let test_rows = &test.records[..n_test];
    let mut parity = Vec::new();
    let mut pairs = Vec::with_capacity(n_test);
    for r in test_rows {
        let pred = g.model.predict(&r.features)?;
        let truth = s.target.get(&r.params);
        pairs.push((truth, pred));
        parity.push(ParityRow {
            cell,
            source: "adaptive".into(),
            record_id: r.record_id,
            truth,
            predicted: pred,
        });
    }
    let rmse_adaptive = rmse(&pairs);

    let gb_rows = &test.records[..s.counts.graybox.min(test.records.len())];
    let t2 = Instant::now();
    let refs: Vec<&crate::features::FeatureVector> = gb_rows.iter().map(|r| &r.features).collect();
    g.model.predict_batch(&refs)?;
    let predict_seconds = t2.elapsed().as_secs_f64();

    let (rmse_graybox, n_graybox, stalled, graybox_seconds) = if opts.run_graybox && !gb_rows.is_empty() {
        let t3 = Instant::now();
        let est = graybox_estimates(gb_rows, s.target, &s.graybox_config())?;
        let secs = t3.elapsed().as_secs_f64();
        let gb_pairs: Vec<(f64, f64)> = est.iter().map(|&(t, e, _)| (t, e)).collect();
        for (r, &(truth, e, _)) in gb_rows.iter().zip(&est) {
            parity.push(ParityRow {
                cell,
                source: "graybox".into(),
                record_id: r.record_id,
                truth,
                predicted: e,
            });
        }
        (rmse(&gb_pairs), est.len(), est.iter().filter(|e| e.2).count(), secs)
    } else {
        (f64::NAN, 0, 0, 0.0)
    };

    Ok(CellOutcome {
        row: CellReport {
            cell,
            value: s.cell_value(cell),
            n_train: train.records.len(),
            n_test,
            rmse_adaptive,
            n_graybox,
            rmse_graybox,
            graybox_stalled: stalled,
            rejected: train.rejections.len() + test.rejections.len(),
            hyper: Some(g.best),
            error: None,
        },
        timing: CellTiming {
            cell,
            generate_seconds,
            train_seconds,
            predict_seconds,
            graybox_seconds,
        },
        parity,
        artifacts: CellArtifacts {
            model: Some(g.model),
            ranking,
        },
    })
}

/// Runs every cell of the scenario. A failing cell is reported as
/// incomplete with its error instead of aborting the run.
pub fn run_scenario(s: &Scenario, opts: &ExperimentOptions) -> Result<ExperimentReport> {
    s.validate()?;
    let outcomes: Vec<Result<CellOutcome>> = (0..s.cell_count()).map(|c| run_cell(s, c, opts)).collect();
    let mut report = ExperimentReport {
        scenario: s.clone(),
        rows: Vec::new(),
        timings: Vec::new(),
        parity: Vec::new(),
        artifacts: Vec::new(),
    };
    for (cell, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(o) => {
                report.rows.push(o.row);
                report.timings.push(o.timing);
                report.parity.extend(o.parity);
                report.artifacts.push(o.artifacts);
            }
            Err(e) => {
                log::error!("cell {cell} of {}: {e}", s.name);
                report.rows.push(CellReport {
                    cell,
                    value: s.cell_value(cell),
                    n_train: 0,
                    n_test: 0,
                    rmse_adaptive: f64::NAN,
                    n_graybox: 0,
                    rmse_graybox: f64::NAN,
                    graybox_stalled: 0,
                    rejected: 0,
                    hyper: None,
                    error: Some(e.to_string()),
                });
                report.timings.push(CellTiming {
                    cell,
                    generate_seconds: 0.0,
                    train_seconds: 0.0,
                    predict_seconds: 0.0,
                    graybox_seconds: 0.0,
                });
                report.artifacts.push(CellArtifacts {
                    model: None,
                    ranking: None,
                });
            }
        }
    }
    Ok(report)
}

/// A built-in experiment with its seed replaced.
pub fn run_experiment(name: &str, seed: u64, opts: &ExperimentOptions) -> Result<ExperimentReport> {
    let s = Scenario {
        seed,
        ..Scenario::builtin(name)?
    };
    run_scenario(&s, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub sigma1_low: f64,
    /// Upper end relative to the internal detuning `sigma2`.
    pub above_sigma2: f64,
    pub step: f64,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            sigma1_low: -3.0,
            above_sigma2: 4.0,
            step: 0.05,
        }
    }
}

/// Jump features from an up and a down stepped-sine sweep. Requires exactly
/// two hysteresis loops.
pub fn sweep_features(p: &SystemParams, grid: &SweepGrid, cfg: &SweepConfig) -> Result<crate::features::FeatureVector> {
    let lo = p.omega(grid.sigma1_low);
    let hi = p.omega(p.modal_frequencies().sigma2 + grid.above_sigma2);
    let steps = ((hi - lo) / (p.epsilon * grid.step)).round() as usize + 1;
    let up = sweep(p, &omega_grid(lo, hi, steps, Direction::Up), Direction::Up, cfg)?;
    let down = sweep(p, &omega_grid(lo, hi, steps, Direction::Down), Direction::Down, cfg)?;
    let loops = hysteresis_loops(&up, &down, 0.05)?;
    if loops.len() != 2 {
        return Err(Error::MissingFolds(2 * loops.len()));
    }
    let pt = |s: &crate::simulation::SweepPoint| (p.sigma1(s.omega), s.amp_x, s.amp_y);
    Ok(from_jump_points([
        pt(&loops[0].jump_down),
        pt(&loops[1].jump_down),
        pt(&loops[0].jump_up),
        pt(&loops[1].jump_up),
    ]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossSourceResult {
    pub rmse: f64,
    pub valid: usize,
    pub total: usize,
    pub pairs: Vec<(f64, f64)>,
}

/// Evaluates a model on `n` records whose features come from direct
/// simulation sweeps instead of continuation.
pub fn cross_source_test(model: &TrainedEstimator, s: &Scenario, cell: usize, n: usize) -> Result<CrossSourceResult> {
    if n == 0 {
        return Err(Error::EmptyInput("cross-source test needs at least one record".into()));
    }
    let grid = SweepGrid::default();
    let cfg = SweepConfig::default();
    let outcomes: Vec<Option<(f64, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(s.seed, &[cell as u64, Stream::CrossSource as u64, i as u64, 0]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = s.draw(cell, &mut rng);
            let v = sweep_features(&p, &grid, &cfg).and_then(|v| inject_noise(&v, &s.noise, rng.random()));
            match v.and_then(|v| model.predict(&v)) {
                Ok(pred) => Ok(Some((model.target.get(&p), pred))),
                Err(Error::MissingFolds(_)) | Err(Error::MissingFeature(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let pairs: Vec<(f64, f64)> = outcomes.into_iter().flatten().collect();
    if (pairs.len() as f64) < MIN_SWEEP_FEATURE_RATE * n as f64 {
        return Err(Error::SweepFeatureMismatch {
            valid: pairs.len(),
            total: n,
        });
    }
    Ok(CrossSourceResult {
        rmse: rmse(&pairs),
        valid: pairs.len(),
        total: n,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_validate() {
        for name in ["table1", "table2", "ideal"] {
            let s = Scenario::builtin(name).unwrap();
            s.validate().unwrap();
            let back: Scenario = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
            assert_eq!(back, s);
        }
        assert_eq!(Scenario::builtin("table1").unwrap().cell_count(), 6);
        assert!(Scenario::builtin("table3").is_err());
    }

    #[test]
    fn cell_values_are_applied() {
        let s = Scenario::builtin("table2").unwrap();
        assert_eq!(s.cell_params(3).delta, 1.6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = s.draw(3, &mut rng);
        assert!((1.0..=2.0).contains(&p.d) && (0.9..=1.1).contains(&p.f));
        assert_eq!(p.delta, 1.6);
    }

    #[test]
    fn seeds_differ_per_part() {
        let a = derive_seed(1, &[0, 1, 2, 0]);
        assert_eq!(a, derive_seed(1, &[0, 1, 2, 0]));
        assert_ne!(a, derive_seed(1, &[0, 1, 2, 1]));
        assert_ne!(a, derive_seed(1, &[1, 0, 2, 0]));
        assert_ne!(a, derive_seed(2, &[0, 1, 2, 0]));
    }

    #[test]
    fn bad_scenarios_are_rejected() {
        let mut s = Scenario::builtin("ideal").unwrap();
        s.counts.train = 0;
        assert!(s.validate().is_err());
        let mut s = Scenario::builtin("ideal").unwrap();
        s.sampled[0].low = -1.0;
        assert!(s.validate().is_err());
        let mut s = Scenario::builtin("ideal").unwrap();
        s.features.push("f99".into());
        assert!(s.validate().is_err());
    }

    #[test]
    fn rmse_of_pairs() {
        assert_eq!(rmse(&[(1.0, 2.0), (1.0, 0.0)]), 1.0);
    }
}
