//! Test-only oracles that do not share code paths with the library solvers.
#![allow(dead_code)]

use adaptive_duffing::SystemParams;

/// Steady states counted through the reduced system in `X = a1^2`, `Y = a2^2`:
///
/// X [ (d/2)^2 + (s1 - k11 X - k12 Y)^2 ] = F1^2
/// Y [ (d/2)^2 + (s1 - s2 - k22 Y - k21 X)^2 ] = F2^2
///
/// obtained by squaring and adding the two fixed-point equations of each mode.
/// For every `Y` on a dense logarithmic grid the first equation is a cubic in
/// `X` solved in closed form; sign changes of the second equation along each
/// cubic root are bracketed and bisected.
pub fn reduced_steady_states(p: &SystemParams, sigma1: f64) -> Vec<(f64, f64)> {
    let w1 = p.omega0;
    let w2 = (p.omega0 * p.omega0 + 2.0 * p.delta).sqrt();
    let s2 = (w2 - w1) / p.epsilon;
    let mu = p.d / 2.0;
    let f1 = p.f / (4.0 * w1);
    let f2 = p.f / (4.0 * w2);
    let k11 = 3.0 * p.beta / (8.0 * w1);
    let k12 = 3.0 * p.beta / (4.0 * w1);
    let k22 = 3.0 * p.beta / (8.0 * w2);
    let k21 = 3.0 * p.beta / (4.0 * w2);

    let x_roots = |y: f64| -> Vec<f64> {
        let c = sigma1 - k12 * y;
        if k11 == 0.0 {
            return vec![f1 * f1 / (mu * mu + c * c)];
        }
        let mut r = real_cubic_roots(k11 * k11, -2.0 * c * k11, mu * mu + c * c, -f1 * f1);
        r.retain(|&x| x > 0.0);
        r
    };
    let g2 = |x: f64, y: f64| {
        let c2 = sigma1 - s2 - k22 * y - k21 * x;
        y * (mu * mu + c2 * c2) - f2 * f2
    };

    let y_max = (f2 / mu).powi(2) * (1.0 + 1e-9);
    let y_min = y_max * 1e-8;
    let n = 20_000;
    let ys: Vec<f64> = (0..=n)
        .map(|i| y_min * (y_max / y_min).powf(i as f64 / n as f64))
        .collect();
    let mut found: Vec<(f64, f64)> = Vec::new();
    let mut prev_y = ys[0];
    let mut prev = x_roots(prev_y);
    for &y in &ys[1..] {
        let cur = x_roots(y);
        if cur.len() == prev.len() {
            for j in 0..cur.len() {
                let (ga, gb) = (g2(prev[j], prev_y), g2(cur[j], y));
                if ga == 0.0 || ga * gb < 0.0 {
                    let (mut lo, mut hi, mut g_lo) = (prev_y, y, ga);
                    for _ in 0..200 {
                        let mid = 0.5 * (lo + hi);
                        let roots = x_roots(mid);
                        if roots.len() != cur.len() {
                            break;
                        }
                        let gm = g2(roots[j], mid);
                        if gm * g_lo > 0.0 {
                            lo = mid;
                            g_lo = gm;
                        } else {
                            hi = mid;
                        }
                        if hi - lo <= 1e-15 * hi {
                            break;
                        }
                    }
                    let y_sol = 0.5 * (lo + hi);
                    let roots = x_roots(y_sol);
                    let x_sol = if roots.len() == cur.len() { roots[j] } else { cur[j] };
                    found.push((x_sol, y_sol));
                }
            }
        }
        prev = cur;
        prev_y = y;
    }
    found.sort_by(|a, b| a.0.total_cmp(&b.0));
    found.dedup_by(|a, b| (a.0 - b.0).abs() <= 1e-9 * a.0.max(b.0) && (a.1 - b.1).abs() <= 1e-9 * a.1.max(b.1));
    found
}

/// Real roots of `a x^3 + b x^2 + c x + d`, ascending.
fn real_cubic_roots(a: f64, b: f64, c: f64, d: f64) -> Vec<f64> {
    let (b, c, d) = (b / a, c / a, d / a);
    let q = (3.0 * c - b * b) / 9.0;
    let r = (9.0 * b * c - 27.0 * d - 2.0 * b * b * b) / 54.0;
    let disc = q * q * q + r * r;
    let shift = -b / 3.0;
    let mut roots = if disc > 0.0 {
        let sq = disc.sqrt();
        vec![shift + (r + sq).cbrt() + (r - sq).cbrt()]
    } else {
        let theta = (r / (-q * q * q).sqrt()).clamp(-1.0, 1.0).acos();
        let m = 2.0 * (-q).sqrt();
        (0..3)
            .map(|k| shift + m * ((theta + 2.0 * std::f64::consts::PI * k as f64) / 3.0).cos())
            .collect()
    };
    // One Newton polish per root.
    for x in roots.iter_mut() {
        let f = ((*x + b) * *x + c) * *x + d;
        let df = (3.0 * *x + 2.0 * b) * *x + c;
        if df != 0.0 {
            *x -= f / df;
        }
    }
    roots.sort_by(f64::total_cmp);
    roots
}

/// Number of distinct steady states at `sigma1`.
pub fn count_steady_states(p: &SystemParams, sigma1: f64) -> usize {
    reduced_steady_states(p, sigma1).len()
}

/// Number of detuning intervals with three coexisting steady states on a
/// dense grid, i.e. half the fold count of a connected branch.
pub fn count_bistable_intervals(p: &SystemParams, lo: f64, hi: f64, samples: usize) -> usize {
    let mut intervals = 0;
    let mut inside = false;
    for i in 0..samples {
        let s = lo + (hi - lo) * i as f64 / (samples - 1) as f64;
        let multi = count_steady_states(p, s) >= 3;
        if multi && !inside {
            intervals += 1;
        }
        inside = multi;
    }
    intervals
}

/// Linear steady-state amplitudes of the full two-degree-of-freedom system
/// (beta = 0) at excitation frequency `omega`, from the complex 2x2 solve.
pub fn linear_forced_amplitudes(p: &SystemParams, omega: f64) -> (f64, f64) {
    // (K - w^2 + i w c) X = F e1 with K = [[w0^2 + delta, -delta], [-delta, w0^2 + delta]]
    let k = p.omega0 * p.omega0 + p.delta;
    let c = p.epsilon * p.d;
    let force = p.epsilon * p.f;
    let (ar, ai) = (k - omega * omega, omega * c);
    let (br, bi) = (-p.delta, 0.0);
    // det = a^2 - b^2 (complex)
    let det_r = ar * ar - ai * ai - (br * br - bi * bi);
    let det_i = 2.0 * ar * ai - 2.0 * br * bi;
    let det_abs = det_r.hypot(det_i);
    let x1 = force * ar.hypot(ai) / det_abs;
    let x2 = force * br.hypot(bi) / det_abs;
    (x1, x2)
}
