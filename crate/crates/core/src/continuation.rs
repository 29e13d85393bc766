//! Pseudo-arclength continuation of the slow-flow fixed points over the
//! detuning, with stability classification and fold (jump) detection.

use std::f64::consts::PI;
use std::io::Write;

use log::{debug, warn};
use nalgebra::{Matrix4, SMatrix, SVector, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    reconstruct_physical, ModulationState, PhysicalResponse, SlowFlow, SystemParams,
    AMPLITUDE_FLOOR,
};

type Vector5 = SVector<f64, 5>;
type Matrix5 = SMatrix<f64, 5, 5>;

/// Metric weights for (sigma1, a1, gamma1, a2, gamma2) in the arclength norm.
const WEIGHTS: [f64; 5] = [0.1, 1.0, 1.0 / PI, 1.0, 1.0 / PI];

/// Residual tolerance of every Newton corrector.
pub const CORRECTOR_TOL: f64 = 1e-10;
/// Eigenvalues must have real part below minus this to count as stable.
pub const STABILITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepControls {
    pub initial: f64,
    pub min: f64,
    pub max: f64,
    pub max_points: usize,
}

impl Default for StepControls {
    fn default() -> Self {
        Self {
            initial: 0.05,
            min: 1e-6,
            max: 0.1,
            max_points: 200_000,
        }
    }
}

impl StepControls {
    pub fn halved(&self) -> Self {
        Self {
            initial: self.initial / 2.0,
            max: self.max / 2.0,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchPoint {
    pub sigma1: f64,
    pub state: ModulationState,
    pub response: PhysicalResponse,
    pub stable: bool,
    pub arclength: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FoldKind {
    JumpDown,
    JumpUp,
}

impl FoldKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FoldKind::JumpDown => "jump-down",
            FoldKind::JumpUp => "jump-up",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Resonance {
    First,
    Second,
}

impl Resonance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Resonance::First => "first",
            Resonance::Second => "second",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldPoint {
    pub sigma1: f64,
    pub state: ModulationState,
    pub response: PhysicalResponse,
    pub kind: FoldKind,
    pub resonance: Resonance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseBranch {
    pub params: SystemParams,
    pub points: Vec<BranchPoint>,
    pub folds: Vec<FoldPoint>,
}

impl ResponseBranch {
    pub fn fold(&self, resonance: Resonance, kind: FoldKind) -> Option<&FoldPoint> {
        self.folds
            .iter()
            .find(|f| f.resonance == resonance && f.kind == kind)
    }

    pub fn max_u1(&self) -> f64 {
        self.points.iter().map(|p| p.response.u1).fold(0.0, f64::max)
    }

    /// Writes `sigma1, omega, a1, gamma1, a2, gamma2, u1, u2, stable`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "sigma1", "omega", "a1", "gamma1", "a2", "gamma2", "u1", "u2", "stable",
        ])?;
        for p in &self.points {
            let s = &p.state;
            w.write_record(&[
                p.sigma1.to_string(),
                self.params.omega(p.sigma1).to_string(),
                s.a1.to_string(),
                s.gamma1.to_string(),
                s.a2.to_string(),
                s.gamma2.to_string(),
                p.response.u1.to_string(),
                p.response.u2.to_string(),
                u8::from(p.stable).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `sigma1, u1, u2, kind, resonance`.
    pub fn write_folds_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["sigma1", "u1", "u2", "kind", "resonance"])?;
        for f in &self.folds {
            w.write_record(&[
                f.sigma1.to_string(),
                f.response.u1.to_string(),
                f.response.u2.to_string(),
                f.kind.as_str().to_string(),
                f.resonance.as_str().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Default detuning window `[-15, sigma2 + 15]`.
pub fn default_window(p: &SystemParams) -> (f64, f64) {
    (-15.0, p.modal_frequencies().sigma2 + 15.0)
}

/// Damped Newton on the fixed-detuning problem, iterated in Cartesian
/// coordinates and returned in polar form with phases unwrapped next to the
/// guess.
pub fn newton_fixed_sigma(
    flow: &SlowFlow,
    guess: ModulationState,
    sigma1: f64,
    max_iter: usize,
) -> Result<ModulationState> {
    let to_polar = |x: &Vector4<f64>| {
        ModulationState::new(
            x[0].hypot(x[1]),
            unwrap_near(x[1].atan2(x[0]), guess.gamma1),
            x[2].hypot(x[3]),
            unwrap_near(x[3].atan2(x[2]), guess.gamma2),
        )
    };
    let g = guess;
    let mut x = Vector4::new(
        g.a1 * g.gamma1.cos(),
        g.a1 * g.gamma1.sin(),
        g.a2 * g.gamma2.cos(),
        g.a2 * g.gamma2.sin(),
    );
    let (mut fx, mut jx) = flow.cartesian_residual(&x, sigma1);
    for _ in 0..max_iter {
        if fx.norm() < 1e-3 * CORRECTOR_TOL {
            break;
        }
        let dx = jx
            .lu()
            .solve(&(-fx))
            .ok_or_else(|| Error::NoConvergence(format!("singular Jacobian at sigma1 = {sigma1}")))?;
        let mut lambda = 1.0;
        loop {
            let trial = x + dx * lambda;
            let (ft, jt) = flow.cartesian_residual(&trial, sigma1);
            if ft.norm() < (1.0 - 1e-4 * lambda) * fx.norm() {
                x = trial;
                fx = ft;
                jx = jt;
                break;
            }
            lambda *= 0.5;
            if lambda < 1e-10 {
                break;
            }
        }
        if lambda < 1e-10 {
            break;
        }
    }
    let s = to_polar(&x);
    let res = flow.rhs(&s, sigma1)?.norm();
    if res < CORRECTOR_TOL {
        Ok(s)
    } else {
        Err(Error::NoConvergence(format!(
            "residual {res:e} at sigma1 = {sigma1}"
        )))
    }
}

/// Steady state of the linearized slow flow; a cheap Newton seed.
fn linear_guess(flow: &SlowFlow, sigma1: f64) -> ModulationState {
    let p = &flow.params;
    let m = &flow.modes;
    let mode = |omega: f64, detune: f64| {
        let force = p.f / (4.0 * omega);
        let half_d = 0.5 * p.d;
        let a = force / (half_d * half_d + detune * detune).sqrt();
        let gamma = (half_d * a / force).atan2(-detune * a / force);
        (a.max(1e-6), gamma)
    };
    let (a1, g1) = mode(m.omega1, sigma1);
    let (a2, g2) = mode(m.omega2, sigma1 - m.sigma2);
    ModulationState::new(a1, g1, a2, g2)
}

fn rk4_slow_flow(flow: &SlowFlow, s: &Vector4<f64>, sigma1: f64, h: f64) -> Result<Vector4<f64>> {
    let f = |v: &Vector4<f64>| flow.rhs(&ModulationState::from_vector(v), sigma1);
    let k1 = f(s)?;
    let k2 = f(&(s + k1 * (h / 2.0)))?;
    let k3 = f(&(s + k2 * (h / 2.0)))?;
    let k4 = f(&(s + k3 * h))?;
    Ok(s + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

/// A converged steady state at `sigma1_start`, found by relaxing the slow flow
/// from a small-amplitude seed and polishing with Newton.
pub fn initial_point(p: &SystemParams, sigma1_start: f64) -> Result<ModulationState> {
    p.validate()?;
    if p.f == 0.0 {
        return Err(Error::NoConvergence(
            "unforced system: the only fixed point is the trivial one at zero amplitude".into(),
        ));
    }
    let flow = SlowFlow::new(p);
    let mut relaxed = None;
    if p.d > 0.0 {
        let seed = linear_guess(&flow, sigma1_start);
        let mut s = ModulationState::new(0.5 * seed.a1, 0.0, 0.5 * seed.a2, 0.0).to_vector();
        let h = 0.2 / (1.0 + sigma1_start.abs() + flow.modes.sigma2.abs());
        let t_max = 60.0 / p.d;
        let mut t = 0.0;
        while t < t_max {
            match rk4_slow_flow(&flow, &s, sigma1_start, h) {
                Ok(next) => s = next,
                Err(_) => break,
            }
            t += h;
            let st = ModulationState::from_vector(&s);
            match flow.rhs(&st, sigma1_start) {
                Ok(r) if r.norm() < 1e-8 => break,
                Ok(_) => {}
                Err(_) => break,
            }
        }
        let st = ModulationState::from_vector(&s);
        if st.a1 > AMPLITUDE_FLOOR && st.a2 > AMPLITUDE_FLOOR {
            relaxed = Some(st);
        }
    }
    let mut seeds: Vec<ModulationState> = relaxed.into_iter().collect();
    seeds.push(linear_guess(&flow, sigma1_start));
    let mut last_err = None;
    for seed in seeds {
        match newton_fixed_sigma(&flow, seed, sigma1_start, 100) {
            Ok(s) => return Ok(s),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::NoConvergence("no seed available".into())))
}

/// Stable iff every eigenvalue of the slow-flow Jacobian has real part below `-STABILITY_TOL`.
pub fn is_stable(jacobian: &Matrix4<f64>) -> bool {
    let max_re = jacobian
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max);
    if max_re.abs() <= STABILITY_TOL {
        debug!("marginal fixed point, max Re(lambda) = {max_re:e}");
    }
    max_re < -STABILITY_TOL
}

pub fn classify_stability(point: &BranchPoint, p: &SystemParams) -> Result<bool> {
    let j = SlowFlow::new(p).jacobian(&point.state)?;
    let stable = is_stable(&j);
    if !stable {
        let max_re = j
            .complex_eigenvalues()
            .iter()
            .map(|z| z.re)
            .fold(f64::NEG_INFINITY, f64::max);
        if max_re.abs() <= STABILITY_TOL {
            warn!(
                "marginal stability at sigma1 = {}, flagged unstable",
                point.sigma1
            );
        }
    }
    Ok(stable)
}

/// Scaled coordinates `y = W (sigma1, a1, gamma1, a2, gamma2)`.
#[derive(Clone, Copy)]
struct Scaled {
    flow: SlowFlow,
}

impl Scaled {
    fn unpack(y: &Vector5) -> (f64, ModulationState) {
        (
            y[0] / WEIGHTS[0],
            ModulationState::new(
                y[1] / WEIGHTS[1],
                y[2] / WEIGHTS[2],
                y[3] / WEIGHTS[3],
                y[4] / WEIGHTS[4],
            ),
        )
    }

    fn pack(sigma1: f64, s: &ModulationState) -> Vector5 {
        Vector5::from([
            sigma1 * WEIGHTS[0],
            s.a1 * WEIGHTS[1],
            s.gamma1 * WEIGHTS[2],
            s.a2 * WEIGHTS[3],
            s.gamma2 * WEIGHTS[4],
        ])
    }

    fn residual(&self, y: &Vector5) -> Result<Vector4<f64>> {
        let (sigma1, s) = Self::unpack(y);
        self.flow.rhs(&s, sigma1)
    }

    /// 4x5 Jacobian with respect to the scaled coordinates.
    fn jacobian(&self, y: &Vector5) -> Result<SMatrix<f64, 4, 5>> {
        let (_, s) = Self::unpack(y);
        let jx = self.flow.jacobian(&s)?;
        let mut j = SMatrix::<f64, 4, 5>::zeros();
        j.set_column(0, &(SlowFlow::d_sigma1() / WEIGHTS[0]));
        for c in 0..4 {
            j.set_column(c + 1, &(jx.column(c) / WEIGHTS[c + 1]));
        }
        Ok(j)
    }

    fn tangent(&self, y: &Vector5, orient: &Vector5) -> Result<Vector5> {
        let j = self.jacobian(y)?;
        let mut m = Matrix5::zeros();
        m.fixed_view_mut::<4, 5>(0, 0).copy_from(&j);
        m.set_row(4, &orient.transpose());
        let mut rhs = Vector5::zeros();
        rhs[4] = 1.0;
        let t = m
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::NoConvergence("singular bordered system for tangent".into()))?;
        Ok(t.normalize())
    }

    /// Newton on `F(y) = 0, dir . (y - anchor) = h`.
    fn correct(&self, anchor: &Vector5, dir: &Vector5, h: f64, guess: Vector5) -> Option<(Vector5, usize)> {
        let mut y = guess;
        for it in 0..12 {
            let f = self.residual(&y).ok()?;
            let arc = dir.dot(&(y - anchor)) - h;
            if f.norm() < CORRECTOR_TOL && arc.abs() < 1e-12 {
                return Some((y, it));
            }
            let j = self.jacobian(&y).ok()?;
            let mut m = Matrix5::zeros();
            m.fixed_view_mut::<4, 5>(0, 0).copy_from(&j);
            m.set_row(4, &dir.transpose());
            let mut r = Vector5::zeros();
            r.fixed_rows_mut::<4>(0).copy_from(&(-f));
            r[4] = -arc;
            let dy = m.lu().solve(&r)?;
            y += dy;
            if !y.iter().all(|v| v.is_finite()) {
                return None;
            }
            let (_, s) = Self::unpack(&y);
            if s.a1 <= AMPLITUDE_FLOOR || s.a2 <= AMPLITUDE_FLOOR {
                return None;
            }
            if dy.norm() < 1e-13 {
                let f = self.residual(&y).ok()?;
                if f.norm() < CORRECTOR_TOL {
                    return Some((y, it + 1));
                }
            }
        }
        let f = self.residual(&y).ok()?;
        (f.norm() < CORRECTOR_TOL).then_some((y, 12))
    }

    fn state_determinant(&self, y: &Vector5) -> Result<f64> {
        let (_, s) = Self::unpack(y);
        Ok(self.flow.jacobian(&s)?.determinant())
    }
}

fn make_point(flow: &SlowFlow, sigma1: f64, state: ModulationState, arclength: f64) -> Result<BranchPoint> {
    let stable = is_stable(&flow.jacobian(&state)?);
    Ok(BranchPoint {
        sigma1,
        state,
        response: reconstruct_physical(&state),
        stable,
        arclength,
    })
}

/// Traces the steady-state branch over `[sigma1_min, sigma1_max]` and labels its folds.
pub fn trace_branch(
    p: &SystemParams,
    sigma1_min: f64,
    sigma1_max: f64,
    controls: &StepControls,
) -> Result<ResponseBranch> {
    let mut branch = trace_points(p, sigma1_min, sigma1_max, controls)?;
    branch.folds = detect_folds(&branch)?;
    Ok(branch)
}

/// Traces without fold labelling.
pub fn trace_points(
    p: &SystemParams,
    sigma1_min: f64,
    sigma1_max: f64,
    controls: &StepControls,
) -> Result<ResponseBranch> {
    if !(sigma1_min < sigma1_max) {
        return Err(Error::InvalidParams(format!(
            "empty detuning window [{sigma1_min}, {sigma1_max}]"
        )));
    }
    let flow = SlowFlow::new(p);
    let sys = Scaled { flow };
    let start = initial_point(p, sigma1_min)?;
    let mut points = vec![make_point(&flow, sigma1_min, start, 0.0)?];

    let mut y_prev: Option<Vector5> = None;
    let mut y = Scaled::pack(sigma1_min, &start);
    let mut e_sigma = Vector5::zeros();
    e_sigma[0] = 1.0;
    let dir = sys.tangent(&y, &e_sigma)?;
    let mut ds = controls.initial;
    let mut arclength = 0.0;

    loop {
        if points.len() >= controls.max_points {
            return Err(Error::NoConvergence(format!(
                "branch did not leave the window after {} points",
                controls.max_points
            )));
        }
        let secant = y_prev.map(|prev| y - prev).filter(|v| v.norm() > 0.0);
        let tangent = sys.tangent(&y, &secant.map_or(dir, |v| v.normalize()))?;
        let mut attempt = 0;
        let step = loop {
            // Secant predictor first; the local tangent after a rejection.
            let predictor = match secant {
                Some(v) if attempt == 0 => v.normalize(),
                _ => tangent,
            };
            attempt += 1;
            if let Some((y_new, iters)) = sys.correct(&y, &predictor, ds, y + predictor * ds) {
                let chord = y_new - y;
                // Reject jumps to a different sheet and reversals.
                if chord.norm() <= 2.0 * ds && chord.normalize().dot(&tangent) > 0.5 {
                    break Some((y_new, iters));
                }
            }
            if attempt > 1 {
                ds *= 0.5;
            }
            if ds < controls.min {
                break None;
            }
        };
        let Some((y_new, iters)) = step else {
            let (sigma1, _) = Scaled::unpack(&y);
            return Err(Error::StepCollapse {
                sigma1,
                min_step: controls.min,
            });
        };
        let (sigma_new, state_new) = Scaled::unpack(&y_new);
        if sigma_new >= sigma1_max {
            // Land the last point exactly on the window edge.
            let (sigma_old, state_old) = Scaled::unpack(&y);
            let t = (sigma1_max - sigma_old) / (sigma_new - sigma_old);
            let guess = ModulationState::from_vector(
                &(state_old.to_vector() * (1.0 - t) + state_new.to_vector() * t),
            );
            let end = newton_fixed_sigma(&flow, guess, sigma1_max, 50)?;
            arclength += (Scaled::pack(sigma1_max, &end) - y).norm();
            points.push(make_point(&flow, sigma1_max, end, arclength)?);
            break;
        }
        arclength += (y_new - y).norm();
        points.push(make_point(&flow, sigma_new, state_new, arclength)?);
        y_prev = Some(y);
        y = y_new;
        if iters <= 3 {
            ds = (ds * 2.0).min(controls.max);
        }
    }
    debug!("traced {} points for {:?}", points.len(), p);
    Ok(ResponseBranch {
        params: *p,
        points,
        folds: Vec::new(),
    })
}

fn unwrap_near(angle: f64, reference: f64) -> f64 {
    angle - 2.0 * PI * ((angle - reference) / (2.0 * PI)).round()
}

/// Locates folds by sign changes of the detuning increment, refines each by
/// bisection on the bordered system and labels them.
pub fn detect_folds(branch: &ResponseBranch) -> Result<Vec<FoldPoint>> {
    let flow = SlowFlow::new(&branch.params);
    let sys = Scaled { flow };
    let pts = &branch.points;
    let dets = pts
        .iter()
        .map(|p| sys.state_determinant(&Scaled::pack(p.sigma1, &p.state)))
        .collect::<Result<Vec<_>>>()?;
    let mut raw = Vec::new();
    for i in 1..pts.len().saturating_sub(1) {
        let before = pts[i].sigma1 - pts[i - 1].sigma1;
        let after = pts[i + 1].sigma1 - pts[i].sigma1;
        if before * after >= 0.0 {
            continue;
        }
        // The turning point lies in whichever adjacent segment brackets a
        // sign change of det(J); a segment is never claimed twice.
        let seg = if dets[i - 1] * dets[i] <= 0.0 && raw.last().is_none_or(|&(s, _, _)| s != i - 1) {
            i - 1
        } else if dets[i] * dets[i + 1] <= 0.0 {
            i
        } else {
            warn!("no determinant sign change around turning point at sigma1 = {}", pts[i].sigma1);
            continue;
        };
        let (sigma1, state) = refine_fold(&sys, &pts[seg], &pts[seg + 1])?;
        raw.push((seg, sigma1, state));
    }
    label_folds(raw.into_iter().map(|(_, s, st)| (s, st)).collect(), &flow)
}

fn refine_fold(sys: &Scaled, lo: &BranchPoint, hi: &BranchPoint) -> Result<(f64, ModulationState)> {
    let lo = Scaled::pack(lo.sigma1, &lo.state);
    let hi = Scaled::pack(hi.sigma1, &hi.state);
    let length = (hi - lo).norm();
    let dir = (hi - lo) / length;
    let d_lo = sys.state_determinant(&lo)?;
    let (mut h0, mut h1) = (0.0, length);
    let mut best = lo;
    for _ in 0..80 {
        let h = 0.5 * (h0 + h1);
        let Some((y, _)) = sys.correct(&lo, &dir, h, lo + dir * h) else {
            break;
        };
        best = y;
        if sys.state_determinant(&y)? * d_lo > 0.0 {
            h0 = h;
        } else {
            h1 = h;
        }
        if h1 - h0 < 1e-13 {
            break;
        }
    }
    let (sigma1, state) = Scaled::unpack(&best);
    Ok((sigma1, state))
}

/// Mode whose coordinates dominate the (near-)null eigenvector of the Jacobian.
fn jumping_mode(flow: &SlowFlow, s: &ModulationState) -> Resonance {
    let Ok(j) = flow.jacobian(s) else {
        return Resonance::First;
    };
    let svd = j.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let k = svd.singular_values.imin();
    let v = v_t.row(k);
    // Compare amplitude-weighted magnitudes (phases scaled by their amplitude).
    let m1 = v[0].hypot(v[1] * s.a1);
    let m2 = v[2].hypot(v[3] * s.a2);
    if m1 >= m2 {
        Resonance::First
    } else {
        Resonance::Second
    }
}

fn label_folds(mut raw: Vec<(f64, ModulationState)>, flow: &SlowFlow) -> Result<Vec<FoldPoint>> {
    let n = raw.len();
    if n % 2 == 1 || n > 4 {
        return Err(Error::FoldCountUnexpected(n));
    }
    raw.sort_by(|a, b| a.0.total_cmp(&b.0));
    let groups: Vec<(Resonance, Vec<(f64, ModulationState)>)> = match n {
        0 => Vec::new(),
        2 => vec![(jumping_mode(flow, &raw[0].1), raw.clone())],
        _ => {
            let gaps = [raw[1].0 - raw[0].0, raw[2].0 - raw[1].0, raw[3].0 - raw[2].0];
            let split = (0..3).max_by(|&i, &j| gaps[i].total_cmp(&gaps[j])).unwrap() + 1;
            if split == 2 {
                vec![(Resonance::First, raw[..2].to_vec()), (Resonance::Second, raw[2..].to_vec())]
            } else {
                // Overlapping resonances: group by the mode that carries the
                // zero eigenvector at each fold.
                let (first, second): (Vec<_>, Vec<_>) =
                    raw.iter().partition(|(_, s)| jumping_mode(flow, s) == Resonance::First);
                if first.len() != 2 {
                    return Err(Error::FoldCountUnexpected(n));
                }
                vec![(Resonance::First, first), (Resonance::Second, second)]
            }
        }
    };
    let mut folds = Vec::with_capacity(n);
    for (resonance, pair) in groups {
        let amp = |s: &ModulationState| match resonance {
            Resonance::First => s.a1,
            Resonance::Second => s.a2,
        };
        let (hi, lo) = if amp(&pair[0].1) > amp(&pair[1].1) {
            (pair[0], pair[1])
        } else {
            (pair[1], pair[0])
        };
        for ((sigma1, state), kind) in [(hi, FoldKind::JumpDown), (lo, FoldKind::JumpUp)] {
            folds.push(FoldPoint {
                sigma1,
                state,
                response: reconstruct_physical(&state),
                kind,
                resonance,
            });
        }
    }
    folds.sort_by(|a, b| a.sigma1.total_cmp(&b.sigma1));
    Ok(folds)
}
