//! Direct integration of the full two-oscillator equations
//!
//! x1'' + w0^2 x1 + eps d x1' + eps beta x1^3 + delta (x1 - x2) = eps f cos(W t)
//! x2'' + w0^2 x2 + eps d x2' + eps beta x2^3 + delta (x2 - x1) = 0
//!
//! with a fixed-step classical Runge-Kutta scheme, stepped-sine sweeps that
//! carry the state across frequencies, and the single-parameter gray-box fit.

use std::f64::consts::PI;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SystemParams;

/// Minimum number of steps per forcing period accepted by [`integrate`].
pub const MIN_STEPS_PER_PERIOD: f64 = 40.0;

/// State (x1, x1', x2, x2').
pub type State = [f64; 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub params: SystemParams,
    pub omega: f64,
    pub dt: f64,
    /// Time of the first sample.
    pub t0: f64,
    pub samples: Vec<State>,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    params: &'a SystemParams,
    omega: f64,
    dt: f64,
    t0: f64,
    samples: usize,
}

impl TimeSeries {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn last(&self) -> State {
        *self.samples.last().expect("time series is never empty")
    }

    /// Samples with `t >= t_start`.
    pub fn tail_from(&self, t_start: f64) -> TimeSeries {
        let skip = (((t_start - self.t0) / self.dt).ceil().max(0.0) as usize).min(self.len() - 1);
        TimeSeries {
            params: self.params,
            omega: self.omega,
            dt: self.dt,
            t0: self.time(skip),
            samples: self.samples[skip..].to_vec(),
        }
    }

    /// Half the peak-to-peak excursion of (x1, x2).
    pub fn half_peak_to_peak(&self) -> (f64, f64) {
        let span = |k: usize| {
            let (lo, hi) = self
                .samples
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s[k]), hi.max(s[k])));
            0.5 * (hi - lo)
        };
        (span(0), span(2))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "x1", "v1", "x2", "v2"])?;
        for (i, s) in self.samples.iter().enumerate() {
            w.write_record(
                std::iter::once(self.time(i))
                    .chain(s.iter().copied())
                    .map(|v| v.to_string()),
            )?;
        }
        w.flush()?;
        Ok(())
    }

    /// JSON sidecar holding the parameters and forcing frequency.
    pub fn write_sidecar<W: Write>(&self, out: W) -> Result<()> {
        let sidecar = Sidecar {
            params: &self.params,
            omega: self.omega,
            dt: self.dt,
            t0: self.t0,
            samples: self.samples.len(),
        };
        serde_json::to_writer_pretty(out, &sidecar)?;
        Ok(())
    }
}

fn accel(p: &SystemParams, s: &State, t: f64, omega: f64) -> State {
    let w2 = p.omega0 * p.omega0;
    let (x1, v1, x2, v2) = (s[0], s[1], s[2], s[3]);
    let coupling = p.delta * (x1 - x2);
    [
        v1,
        p.epsilon * p.f * (omega * t).cos()
            - w2 * x1
            - p.epsilon * (p.d * v1 + p.beta * x1 * x1 * x1)
            - coupling,
        v2,
        -w2 * x2 - p.epsilon * (p.d * v2 + p.beta * x2 * x2 * x2) + coupling,
    ]
}

fn rk4_step(p: &SystemParams, s: &State, t: f64, dt: f64, omega: f64) -> State {
    let add = |a: &State, k: &State, h: f64| [a[0] + h * k[0], a[1] + h * k[1], a[2] + h * k[2], a[3] + h * k[3]];
    let k1 = accel(p, s, t, omega);
    let k2 = accel(p, &add(s, &k1, 0.5 * dt), t + 0.5 * dt, omega);
    let k3 = accel(p, &add(s, &k2, 0.5 * dt), t + 0.5 * dt, omega);
    let k4 = accel(p, &add(s, &k3, dt), t + dt, omega);
    let mut out = *s;
    for i in 0..4 {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// Integrates from `t0` for `steps` steps, keeping every sample.
fn run(p: &SystemParams, omega: f64, x0: State, t0: f64, steps: usize, dt: f64) -> Result<TimeSeries> {
    let mut samples = Vec::with_capacity(steps + 1);
    samples.push(x0);
    let mut s = x0;
    for i in 0..steps {
        s = rk4_step(p, &s, t0 + i as f64 * dt, dt, omega);
        samples.push(s);
    }
    if !s.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!("integration diverged at omega = {omega}")));
    }
    Ok(TimeSeries {
        params: *p,
        omega,
        dt,
        t0,
        samples,
    })
}

fn check_step(omega: f64, dt: f64) -> Result<()> {
    let max_dt = 2.0 * PI / omega.abs() / MIN_STEPS_PER_PERIOD;
    if !(dt > 0.0) || dt > max_dt * (1.0 + 1e-12) {
        return Err(Error::StepTooCoarse { dt, max_dt });
    }
    Ok(())
}

/// Fixed-step RK4 from `x0` at `t = 0` to `t_end`.
pub fn integrate(p: &SystemParams, omega: f64, x0: State, t_end: f64, dt: f64) -> Result<TimeSeries> {
    p.validate()?;
    check_step(omega, dt)?;
    let steps = (t_end / dt).round() as usize;
    if steps < 1 {
        return Err(Error::InvalidParams(format!("t_end {t_end} is shorter than one step")));
    }
    run(p, omega, x0, 0.0, steps, dt)
}

/// Conserved energy of the unforced, undamped system.
pub fn energy(p: &SystemParams, s: &State) -> f64 {
    let (x1, v1, x2, v2) = (s[0], s[1], s[2], s[3]);
    0.5 * (v1 * v1 + v2 * v2)
        + 0.5 * p.omega0 * p.omega0 * (x1 * x1 + x2 * x2)
        + 0.25 * p.epsilon * p.beta * (x1.powi(4) + x2.powi(4))
        + 0.5 * p.delta * (x1 - x2).powi(2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
}

impl Direction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "up" => Ok(Direction::Up),
            "down" => Ok(Direction::Down),
            other => Err(Error::InvalidParams(format!("unknown sweep direction `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub settle_periods: usize,
    pub measure_periods: usize,
    pub steps_per_period: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            settle_periods: 100,
            measure_periods: 20,
            steps_per_period: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub omega: f64,
    pub amp_x: f64,
    pub amp_y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweptResponse {
    pub direction: Direction,
    pub points: Vec<SweepPoint>,
}

impl SweptResponse {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["omega", "amp_x", "amp_y", "direction"])?;
        for pt in &self.points {
            w.write_record([
                pt.omega.to_string(),
                pt.amp_x.to_string(),
                pt.amp_y.to_string(),
                self.direction.as_str().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One hysteresis loop seen by a pair of opposite sweeps on the same grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HysteresisLoop {
    /// Last point of the up-sweep before it drops.
    pub jump_down: SweepPoint,
    /// Last point of the down-sweep before it rises.
    pub jump_up: SweepPoint,
}

/// Runs of grid points where the two sweeps disagree by more than `rel_tol`
/// in the (x1, x2) amplitude norm, in increasing frequency.
pub fn hysteresis_loops(up: &SweptResponse, down: &SweptResponse, rel_tol: f64) -> Result<Vec<HysteresisLoop>> {
    if up.direction != Direction::Up || down.direction != Direction::Down {
        return Err(Error::InvalidParams("need one up-sweep and one down-sweep".into()));
    }
    let n = up.points.len();
    let same_grid = down.points.len() == n
        && up.points.iter().zip(down.points.iter().rev()).all(|(a, b)| a.omega == b.omega);
    if !same_grid {
        return Err(Error::InvalidParams("sweeps use different frequency grids".into()));
    }
    let norm = |pt: &SweepPoint| pt.amp_x.hypot(pt.amp_y);
    let differs: Vec<bool> = (0..n)
        .map(|i| {
            let (a, b) = (norm(&up.points[i]), norm(&down.points[n - 1 - i]));
            (a - b).abs() > rel_tol * a.max(b)
        })
        .collect();
    let mut loops = Vec::new();
    let mut i = 0;
    while i < n {
        if !differs[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i + 1 < n && differs[i + 1] {
            i += 1;
        }
        loops.push(HysteresisLoop {
            jump_down: up.points[i],
            jump_up: down.points[n - 1 - start],
        });
        i += 1;
    }
    Ok(loops)
}

/// Evenly spaced grid from `lo` to `hi`, ordered for the sweep direction.
pub fn omega_grid(lo: f64, hi: f64, steps: usize, direction: Direction) -> Vec<f64> {
    let mut grid: Vec<f64> = (0..steps)
        .map(|i| lo + (hi - lo) * i as f64 / (steps.max(2) - 1) as f64)
        .collect();
    if direction == Direction::Down {
        grid.reverse();
    }
    grid
}

/// Stepped-sine sweep starting from rest. The final state at each frequency
/// seeds the next one.
pub fn sweep(p: &SystemParams, grid: &[f64], direction: Direction, cfg: &SweepConfig) -> Result<SweptResponse> {
    p.validate()?;
    if grid.is_empty() {
        return Err(Error::EmptyInput("sweep grid".into()));
    }
    let ordered = grid.windows(2).all(|w| match direction {
        Direction::Up => w[1] > w[0],
        Direction::Down => w[1] < w[0],
    });
    if !ordered {
        return Err(Error::InvalidParams(format!(
            "frequency grid is not strictly monotonic in the {} direction",
            direction.as_str()
        )));
    }
    if cfg.steps_per_period < MIN_STEPS_PER_PERIOD as usize || cfg.measure_periods == 0 {
        return Err(Error::InvalidParams("sweep needs >= 40 steps per period and a measurement window".into()));
    }
    // Every frequency runs a whole number of periods from local time zero,
    // so the forcing phase carries over unchanged.
    let mut state = [0.0; 4];
    let mut points = Vec::with_capacity(grid.len());
    for &omega in grid {
        let dt = 2.0 * PI / omega / cfg.steps_per_period as f64;
        let settle_steps = cfg.settle_periods * cfg.steps_per_period;
        let settle = run(p, omega, state, 0.0, settle_steps, dt)?;
        let t_measure = settle_steps as f64 * dt;
        let measured = run(p, omega, settle.last(), t_measure, cfg.measure_periods * cfg.steps_per_period, dt)?;
        state = measured.last();
        let (amp_x, amp_y) = measured.half_peak_to_peak();
        points.push(SweepPoint { omega, amp_x, amp_y });
    }
    Ok(SweptResponse { direction, points })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Delta,
    D,
}

impl Target {
    pub fn as_str(&self) -> &'static str {
        match self {
            Target::Delta => "delta",
            Target::D => "d",
        }
    }

    pub fn get(&self, p: &SystemParams) -> f64 {
        match self {
            Target::Delta => p.delta,
            Target::D => p.d,
        }
    }

    pub fn set(&self, p: &SystemParams, value: f64) -> SystemParams {
        match self {
            Target::Delta => p.with_delta(value),
            Target::D => p.with_d(value),
        }
    }
}

impl std::str::FromStr for Target {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "delta" => Ok(Target::Delta),
            "d" => Ok(Target::D),
            other => Err(Error::InvalidParams(format!("unknown target `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrayBoxConfig {
    pub init: f64,
    pub bounds: (f64, f64),
    pub regularization: f64,
    /// Length of each simulated series.
    pub t_total: f64,
    /// Leading transient excluded from the objective.
    pub t_discard: f64,
    pub steps_per_period: usize,
    /// Absolute tolerance on the parameter.
    pub xtol: f64,
    pub max_evaluations: usize,
}

impl GrayBoxConfig {
    pub fn for_target(target: Target) -> Self {
        Self {
            init: 1.5,
            bounds: (1.0, 2.0),
            regularization: match target {
                Target::Delta => 0.0,
                Target::D => 0.1,
            },
            t_total: 400.0,
            t_discard: 200.0,
            steps_per_period: 50,
            xtol: 1e-4,
            max_evaluations: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyFit {
    pub omega: f64,
    pub estimate: f64,
    pub objective: f64,
    pub objective_at_init: f64,
    pub evaluations: usize,
    pub stalled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrayBoxEstimate {
    pub target: Target,
    pub initial_guess: f64,
    pub per_frequency: Vec<FrequencyFit>,
    pub estimate: f64,
}

impl GrayBoxEstimate {
    pub fn stalled(&self) -> bool {
        self.per_frequency.iter().any(|f| f.stalled)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["omega", "estimate", "objective", "objective_at_init", "evaluations", "stalled"])?;
        for f in &self.per_frequency {
            w.write_record([
                f.omega.to_string(),
                f.estimate.to_string(),
                f.objective.to_string(),
                f.objective_at_init.to_string(),
                f.evaluations.to_string(),
                f.stalled.to_string(),
            ])?;
        }
        w.write_record(["mean", &self.estimate.to_string(), "", "", "", &self.stalled().to_string()])?;
        w.flush()?;
        Ok(())
    }
}

/// Ten excitation frequencies spanning both resonances,
/// from `w1 - 0.3` to `w2 + 0.3 (w2 - w1)`.
pub fn fit_frequencies(p: &SystemParams, count: usize) -> Vec<f64> {
    let m = p.modal_frequencies();
    let lo = m.omega1 - 0.3;
    let hi = m.omega2 + 0.3 * (m.omega2 - m.omega1);
    omega_grid(lo, hi, count, Direction::Up)
}

fn series_for_fit(p: &SystemParams, omega: f64, cfg: &GrayBoxConfig) -> Result<TimeSeries> {
    let dt = 2.0 * PI / omega / cfg.steps_per_period as f64;
    let full = integrate(p, omega, [0.0; 4], cfg.t_total, dt)?;
    Ok(full.tail_from(cfg.t_discard))
}

/// Steady windows of the true system at each frequency, as a measurement
/// device would record them.
pub fn observe(p: &SystemParams, omegas: &[f64], cfg: &GrayBoxConfig) -> Result<Vec<TimeSeries>> {
    omegas.par_iter().map(|&w| series_for_fit(p, w, cfg)).collect()
}

fn mismatch(a: &TimeSeries, b: &TimeSeries) -> f64 {
    let n = a.len().min(b.len());
    let sum: f64 = a.samples[..n]
        .iter()
        .zip(&b.samples[..n])
        .map(|(x, y)| (x[0] - y[0]).powi(2) + (x[2] - y[2]).powi(2))
        .sum();
    sum / (2 * n) as f64
}

/// Gray-box objective for one observed series.
pub fn graybox_objective(observed: &TimeSeries, target: Target, theta: f64, cfg: &GrayBoxConfig) -> Result<f64> {
    let candidate = series_for_fit(&target.set(&observed.params, theta), observed.omega, cfg)?;
    Ok(mismatch(observed, &candidate) + cfg.regularization * (theta - cfg.init).powi(2))
}

/// Outcome of a bounded scalar minimisation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Minimum {
    pub x: f64,
    pub fx: f64,
    pub evaluations: usize,
    pub converged: bool,
}

/// Brent's bounded minimiser (golden section with parabolic steps), started
/// from `x0` instead of the usual golden point.
pub fn brent_bounded<F>(mut func: F, lo: f64, hi: f64, x0: f64, xtol: f64, max_eval: usize) -> Result<Minimum>
where
    F: FnMut(f64) -> Result<f64>,
{
    const GOLD: f64 = 0.381_966_011_250_105_1;
    let (mut a, mut b) = (lo, hi);
    let mut x = x0.clamp(lo, hi);
    let (mut w, mut v) = (x, x);
    let mut fx = func(x)?;
    let (mut fw, mut fv) = (fx, fx);
    let mut evaluations = 1;
    let (mut d, mut e): (f64, f64) = (0.0, 0.0);
    let sqrt_eps = f64::EPSILON.sqrt();
    while evaluations < max_eval {
        let xm = 0.5 * (a + b);
        let tol1 = sqrt_eps * x.abs() + xtol / 3.0;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            return Ok(Minimum { x, fx, evaluations, converged: true });
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let e_old = e;
            e = d;
            if p.abs() < (0.5 * q * e_old).abs() && p > q * (a - x) && p < q * (b - x) {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = tol1.copysign(xm - x);
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { b - x };
            d = GOLD * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = func(u)?;
        evaluations += 1;
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            (v, fv) = (w, fw);
            (w, fw) = (x, fx);
            (x, fx) = (u, fu);
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                (v, fv) = (w, fw);
                (w, fw) = (u, fu);
            } else if fu <= fv || v == x || v == w {
                (v, fv) = (u, fu);
            }
        }
    }
    Ok(Minimum { x, fx, evaluations, converged: false })
}

fn same_except(a: &SystemParams, b: &SystemParams, target: Target) -> bool {
    let strip = |p: &SystemParams| target.set(p, 0.0);
    strip(a) == strip(b)
}

/// Fits `target` separately at each observed frequency and averages.
pub fn graybox_fit(observed: &[TimeSeries], target: Target, cfg: &GrayBoxConfig) -> Result<GrayBoxEstimate> {
    let first = observed.first().ok_or_else(|| Error::EmptyInput("gray-box observations".into()))?;
    if !observed.iter().all(|o| same_except(&o.params, &first.params, target)) {
        return Err(Error::InvalidParams("observed series disagree on the known parameters".into()));
    }
    let (lo, hi) = cfg.bounds;
    if !(lo < hi) || cfg.init < lo || cfg.init > hi {
        return Err(Error::InvalidParams(format!("init {} outside bounds [{lo}, {hi}]", cfg.init)));
    }
    let per_frequency: Vec<FrequencyFit> = observed
        .par_iter()
        .map(|obs| {
            let objective_at_init = graybox_objective(obs, target, cfg.init, cfg)?;
            let min = brent_bounded(
                |theta| graybox_objective(obs, target, theta, cfg),
                lo,
                hi,
                cfg.init,
                cfg.xtol,
                cfg.max_evaluations,
            )?;
            if !min.converged {
                log::warn!("gray-box fit at omega = {} used its full budget", obs.omega);
            }
            Ok(FrequencyFit {
                omega: obs.omega,
                estimate: min.x,
                objective: min.fx,
                objective_at_init,
                evaluations: min.evaluations,
                stalled: !min.converged,
            })
        })
        .collect::<Result<_>>()?;
    let estimate = per_frequency.iter().map(|f| f.estimate).sum::<f64>() / per_frequency.len() as f64;
    Ok(GrayBoxEstimate {
        target,
        initial_guess: cfg.init,
        per_frequency,
        estimate,
    })
}
