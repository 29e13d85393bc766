//! One-hidden-layer regressor: tanh hidden units, linear output, trained by
//! full-batch gradient descent with momentum on MSE plus an L2 weight penalty.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{feature_index, FeatureRecord, FeatureVector, FEATURE_COUNT};
use crate::mi::MiRanking;
use crate::simulation::Target;

pub const MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub hidden: usize,
    pub lambda: f64,
    pub learning_rate: f64,
    pub patience: usize,
    pub max_epochs: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            hidden: 15,
            lambda: 0.0,
            learning_rate: 1e-2,
            patience: 200,
            max_epochs: 20_000,
        }
    }
}

/// Dense parameters with `w1` stored row-major as `hidden x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub inputs: usize,
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl Network {
    /// Uniform weights in +-sqrt(6 / (fan_in + fan_out)), zero biases.
    pub fn glorot(inputs: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let r1 = (6.0 / (inputs + hidden) as f64).sqrt();
        let r2 = (6.0 / (hidden + 1) as f64).sqrt();
        Self {
            inputs,
            hidden,
            w1: (0..inputs * hidden).map(|_| rng.random_range(-r1..=r1)).collect(),
            b1: vec![0.0; hidden],
            w2: (0..hidden).map(|_| rng.random_range(-r2..=r2)).collect(),
            b2: 0.0,
        }
    }

    fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + 1
    }

    /// Parameters flattened as w1, b1, w2, b2.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        v.extend(&self.w1);
        v.extend(&self.b1);
        v.extend(&self.w2);
        v.push(self.b2);
        v
    }

    pub fn set_flat(&mut self, v: &[f64]) {
        let (n1, h) = (self.w1.len(), self.hidden);
        self.w1.copy_from_slice(&v[..n1]);
        self.b1.copy_from_slice(&v[n1..n1 + h]);
        self.w2.copy_from_slice(&v[n1 + h..n1 + 2 * h]);
        self.b2 = v[n1 + 2 * h];
    }

    pub fn forward(&self, x: &[f64]) -> f64 {
        let mut out = self.b2;
        for j in 0..self.hidden {
            let row = &self.w1[j * self.inputs..(j + 1) * self.inputs];
            let z = self.b1[j] + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
            out += self.w2[j] * z.tanh();
        }
        out
    }

    fn penalty(&self) -> f64 {
        self.w1.iter().chain(&self.w2).map(|w| w * w).sum()
    }

    /// Training loss and its gradient in the flat layout.
    pub fn loss_and_gradient(&self, xs: &[Vec<f64>], ys: &[f64], lambda: f64) -> (f64, Vec<f64>) {
        let (n_in, h) = (self.inputs, self.hidden);
        let n = xs.len() as f64;
        let mut grad = vec![0.0; self.param_count()];
        let mut sse = 0.0;
        let mut act = vec![0.0; h];
        for (x, &y) in xs.iter().zip(ys) {
            let mut out = self.b2;
            for j in 0..h {
                let row = &self.w1[j * n_in..(j + 1) * n_in];
                let z = self.b1[j] + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
                act[j] = z.tanh();
                out += self.w2[j] * act[j];
            }
            let r = out - y;
            sse += r * r;
            let g = 2.0 * r / n;
            let (gw1, rest) = grad.split_at_mut(n_in * h);
            let (gb1, rest) = rest.split_at_mut(h);
            let (gw2, gb2) = rest.split_at_mut(h);
            gb2[0] += g;
            for j in 0..h {
                gw2[j] += g * act[j];
                let dz = g * self.w2[j] * (1.0 - act[j] * act[j]);
                gb1[j] += dz;
                for (k, xi) in x.iter().enumerate() {
                    gw1[j * n_in + k] += dz * xi;
                }
            }
        }
        for (k, w) in self.w1.iter().enumerate() {
            grad[k] += 2.0 * lambda * w;
        }
        let off = n_in * h + h;
        for (j, w) in self.w2.iter().enumerate() {
            grad[off + j] += 2.0 * lambda * w;
        }
        (sse / n + lambda * self.penalty(), grad)
    }
}

fn rmse(net: &Network, xs: &[Vec<f64>], ys: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let sse: f64 = xs.iter().zip(ys).map(|(x, y)| (net.forward(x) - y).powi(2)).sum();
    (sse / xs.len() as f64).sqrt()
}

/// Seeded 60/20/20 partition of `0..n` into train, validation and test.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((0.6 * n as f64).round() as usize).max(n.min(1));
    let n_val = ((0.2 * n as f64).round() as usize).min(n - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    (idx, val, test)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub train_rmse: f64,
    pub val_rmse: f64,
    pub test_rmse: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

/// Persisted model. `W1` is `hidden x inputs`, `W2` is `1 x hidden`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedEstimator {
    pub features: Vec<String>,
    pub target: Target,
    pub norm: Normalization,
    pub hidden: usize,
    #[serde(rename = "W1")]
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    #[serde(rename = "W2")]
    pub w2: Vec<Vec<f64>>,
    pub b2: Vec<f64>,
    pub activation: String,
    pub lambda: f64,
    pub learning_rate: f64,
    pub seed: u64,
    pub split_seed: u64,
    pub metrics: Metrics,
}

impl TrainedEstimator {
    fn from_network(net: &Network, features: Vec<String>, target: Target, norm: Normalization, hyper: &Hyper) -> Self {
        Self {
            features,
            target,
            norm,
            hidden: net.hidden,
            w1: net.w1.chunks(net.inputs).map(|r| r.to_vec()).collect(),
            b1: net.b1.clone(),
            w2: vec![net.w2.clone()],
            b2: vec![net.b2],
            activation: "tanh".into(),
            lambda: hyper.lambda,
            learning_rate: hyper.learning_rate,
            seed: 0,
            split_seed: 0,
            metrics: Metrics {
                train_rmse: f64::NAN,
                val_rmse: f64::NAN,
                test_rmse: f64::NAN,
                epochs: 0,
            },
        }
    }

    pub fn network(&self) -> Result<Network> {
        let inputs = self.features.len();
        let shape_ok = self.w1.len() == self.hidden
            && self.w1.iter().all(|r| r.len() == inputs)
            && self.b1.len() == self.hidden
            && self.w2.len() == 1
            && self.w2[0].len() == self.hidden
            && self.b2.len() == 1
            && self.norm.means.len() == inputs
            && self.norm.stds.len() == inputs;
        if !shape_ok || self.activation != "tanh" {
            return Err(Error::Data("model arrays do not match the declared shape".into()));
        }
        Ok(Network {
            inputs,
            hidden: self.hidden,
            w1: self.w1.concat(),
            b1: self.b1.clone(),
            w2: self.w2[0].clone(),
            b2: self.b2[0],
        })
    }

    fn normalized(&self, v: &FeatureVector) -> Result<Vec<f64>> {
        self.features
            .iter()
            .enumerate()
            .map(|(k, name)| {
                let x = v.get(name).ok_or_else(|| Error::MissingFeature(name.clone()))?;
                Ok((x - self.norm.means[k]) / self.norm.stds[k])
            })
            .collect()
    }

    pub fn predict(&self, v: &FeatureVector) -> Result<f64> {
        Ok(self.network()?.forward(&self.normalized(v)?))
    }

    pub fn predict_batch(&self, vs: &[&FeatureVector]) -> Result<Vec<f64>> {
        let net = self.network()?;
        vs.iter().map(|v| Ok(net.forward(&self.normalized(v)?))).collect()
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    pub fn read_json<R: Read>(input: R) -> Result<Self> {
        let m: Self = serde_json::from_reader(input)?;
        m.network()?;
        Ok(m)
    }
}

fn column_indices(features: &[String]) -> Result<Vec<usize>> {
    if features.is_empty() {
        return Err(Error::EmptyInput("feature subset".into()));
    }
    features
        .iter()
        .map(|f| feature_index(f).ok_or_else(|| Error::MissingFeature(f.clone())))
        .collect()
}

/// Rows whose selected features are all valid, as (raw inputs, target).
fn design(records: &[FeatureRecord], cols: &[usize], target: Target) -> (Vec<Vec<f64>>, Vec<f64>) {
    records
        .iter()
        .filter(|r| cols.iter().all(|&c| r.features.valid[c]))
        .map(|r| (cols.iter().map(|&c| r.features.values[c]).collect(), target.get(&r.params)))
        .unzip()
}

/// Trains on a seeded 60/20/20 split with early stopping on validation RMSE.
pub fn train(records: &[FeatureRecord], features: &[String], target: Target, hyper: &Hyper, seed: u64) -> Result<TrainedEstimator> {
    train_seeded(records, features, target, hyper, seed, seed)
}

/// As [`train`] with separate seeds for the split and the weight init.
pub fn train_seeded(
    records: &[FeatureRecord],
    features: &[String],
    target: Target,
    hyper: &Hyper,
    split_seed: u64,
    init_seed: u64,
) -> Result<TrainedEstimator> {
    let cols = column_indices(features)?;
    let (xs, ys) = design(records, &cols, target);
    if xs.is_empty() {
        return Err(Error::EmptyInput("no rows with all selected features valid".into()));
    }
    if hyper.hidden == 0 {
        return Err(Error::InvalidParams("hidden width must be positive".into()));
    }
    let (tr, va, te) = split_indices(xs.len(), split_seed);

    let m = cols.len();
    let n_tr = tr.len() as f64;
    let means: Vec<f64> = (0..m).map(|k| tr.iter().map(|&i| xs[i][k]).sum::<f64>() / n_tr).collect();
    let mut stds: Vec<f64> = (0..m)
        .map(|k| (tr.iter().map(|&i| (xs[i][k] - means[k]).powi(2)).sum::<f64>() / n_tr).sqrt())
        .collect();
    for (k, s) in stds.iter_mut().enumerate() {
        if *s == 0.0 {
            if tr.len() > 1 {
                return Err(Error::DegenerateFeature(features[k].clone()));
            }
            // A single record has no spread to scale by.
            *s = 1.0;
        }
    }
    let scale = |i: &usize| -> Vec<f64> { (0..m).map(|k| (xs[*i][k] - means[k]) / stds[k]).collect() };
    let pick = |set: &[usize]| -> (Vec<Vec<f64>>, Vec<f64>) { (set.iter().map(scale).collect(), set.iter().map(|&i| ys[i]).collect()) };
    let (x_tr, y_tr) = pick(&tr);
    let (x_va, y_va) = pick(&va);
    let (x_te, y_te) = pick(&te);

    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let mut net = Network::glorot(m, hyper.hidden, &mut rng);
    let mut theta = net.to_flat();
    let mut velocity = vec![0.0; theta.len()];
    // Without a validation split the training error drives the stopping rule.
    let (x_stop, y_stop) = if x_va.is_empty() { (&x_tr, &y_tr) } else { (&x_va, &y_va) };
    let mut best = (f64::INFINITY, theta.clone(), 0);
    let mut epochs = 0;
    for epoch in 0..hyper.max_epochs {
        net.set_flat(&theta);
        let score = rmse(&net, x_stop, y_stop);
        if !score.is_finite() {
            return Err(Error::NonFinite(format!(
                "training diverged at epoch {epoch} (learning rate {}, lambda {})",
                hyper.learning_rate, hyper.lambda
            )));
        }
        if score < best.0 {
            best = (score, theta.clone(), epoch);
        } else if epoch - best.2 >= hyper.patience {
            break;
        }
        let (loss, grad) = net.loss_and_gradient(&x_tr, &y_tr, hyper.lambda);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss became {loss} at epoch {epoch}")));
        }
        for ((t, v), g) in theta.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
            *v = MOMENTUM * *v - hyper.learning_rate * g;
            *t += *v;
        }
        epochs = epoch + 1;
    }
    net.set_flat(&best.1);
    let mut model = TrainedEstimator::from_network(&net, features.to_vec(), target, Normalization { means, stds }, hyper);
    model.seed = init_seed;
    model.split_seed = split_seed;
    model.metrics = Metrics {
        train_rmse: rmse(&net, &x_tr, &y_tr),
        val_rmse: rmse(&net, &x_va, &y_va),
        test_rmse: rmse(&net, &x_te, &y_te),
        epochs,
    };
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grids {
    pub hidden: Vec<usize>,
    pub lambda: Vec<f64>,
    pub learning_rate: Vec<f64>,
}

impl Default for Grids {
    fn default() -> Self {
        Self {
            hidden: vec![5, 10, 15, 20],
            lambda: vec![0.0, 1e-4, 1e-3, 1e-2],
            learning_rate: vec![1e-3, 1e-2],
        }
    }
}

impl Grids {
    pub fn single(h: &Hyper) -> Self {
        Self {
            hidden: vec![h.hidden],
            lambda: vec![h.lambda],
            learning_rate: vec![h.learning_rate],
        }
    }

    /// Cells in tie-break order: hidden width, then lambda, then rate.
    pub fn cells(&self, base: &Hyper) -> Vec<Hyper> {
        let mut hidden = self.hidden.clone();
        hidden.sort_unstable();
        let mut lambda = self.lambda.clone();
        lambda.sort_by(f64::total_cmp);
        let mut cells = Vec::new();
        for &h in &hidden {
            for &l in &lambda {
                for &r in &self.learning_rate {
                    cells.push(Hyper {
                        hidden: h,
                        lambda: l,
                        learning_rate: r,
                        ..*base
                    });
                }
            }
        }
        cells
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub hyper: Hyper,
    /// `None` when training diverged in this cell.
    pub val_rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub best: Hyper,
    pub model: TrainedEstimator,
    pub cells: Vec<GridCell>,
}

/// Exhaustive search by validation RMSE. Cell `i` initialises with
/// `seed + i`; all cells share the split drawn from `seed`. Diverging cells
/// are skipped unless every cell diverges.
pub fn grid_search(
    records: &[FeatureRecord],
    features: &[String],
    target: Target,
    grids: &Grids,
    base: &Hyper,
    seed: u64,
) -> Result<GridResult> {
    let cells = grids.cells(base);
    if cells.is_empty() {
        return Err(Error::EmptyInput("hyperparameter grid".into()));
    }
    let outcomes: Vec<Result<TrainedEstimator>> = cells
        .par_iter()
        .enumerate()
        .map(|(i, h)| train_seeded(records, features, target, h, seed, seed.wrapping_add(i as u64)))
        .collect();
    let mut best: Option<(usize, f64)> = None;
    let mut report = Vec::with_capacity(cells.len());
    let mut first_err = None;
    for (i, (h, out)) in cells.iter().zip(&outcomes).enumerate() {
        let score = match out {
            Ok(m) => Some(if m.metrics.val_rmse.is_nan() { m.metrics.train_rmse } else { m.metrics.val_rmse }),
            Err(Error::NonFinite(_)) => None,
            Err(e) => {
                first_err.get_or_insert_with(|| e.to_string());
                None
            }
        };
        if let Some(s) = score {
            if best.is_none_or(|(_, b)| s < b) {
                best = Some((i, s));
            }
        }
        report.push(GridCell {
            hyper: *h,
            val_rmse: score,
        });
    }
    match best {
        Some((i, _)) => Ok(GridResult {
            best: cells[i],
            model: outcomes.into_iter().nth(i).expect("index in range")?,
            cells: report,
        }),
        None => match outcomes.into_iter().find_map(|o| o.err()) {
            Some(e) => Err(e),
            None => Err(Error::NonFinite("every grid cell diverged".into())),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRow {
    pub k: usize,
    pub features: Vec<String>,
    pub val_rmse: f64,
    pub hyper: Hyper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardSearchReport {
    pub rows: Vec<SearchRow>,
    pub selected_k: usize,
}

impl ForwardSearchReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "val_rmse", "hidden", "lambda", "learning_rate", "selected", "features"])?;
        for r in &self.rows {
            w.write_record([
                r.k.to_string(),
                r.val_rmse.to_string(),
                r.hyper.hidden.to_string(),
                r.hyper.lambda.to_string(),
                r.hyper.learning_rate.to_string(),
                (r.k == self.selected_k).to_string(),
                r.features.join(" "),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trains on every prefix of the ranking and selects the prefix length with
/// the lowest validation RMSE (ties go to the shorter prefix).
pub fn forward_search(
    records: &[FeatureRecord],
    ranking: &MiRanking,
    target: Target,
    grids: &Grids,
    base: &Hyper,
    seed: u64,
) -> Result<ForwardSearchReport> {
    let names: Vec<String> = ranking.entries.iter().map(|e| e.feature.clone()).collect();
    let mut sorted = names.clone();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != FEATURE_COUNT || names.iter().any(|n| feature_index(n).is_none()) {
        return Err(Error::Data("ranking must list all twenty features once".into()));
    }
    let rows: Vec<SearchRow> = (1..=FEATURE_COUNT)
        .into_par_iter()
        .map(|k| {
            let subset = names[..k].to_vec();
            let g = grid_search(records, &subset, target, grids, base, seed)?;
            let m = &g.model.metrics;
            Ok(SearchRow {
                k,
                val_rmse: if m.val_rmse.is_nan() { m.train_rmse } else { m.val_rmse },
                features: subset,
                hyper: g.best,
            })
        })
        .collect::<Result<_>>()?;
    let selected_k = rows
        .iter()
        .fold((0, f64::INFINITY), |(bk, bv), r| if r.val_rmse < bv { (r.k, r.val_rmse) } else { (bk, bv) })
        .0;
    Ok(ForwardSearchReport { rows, selected_k })
}
