//! Coupled Duffing oscillator parameters and the slow-flow (modulation) equations
//! obtained by the method of multiple scales.
//!
//! The full system is
//!
//! ```text
//! x1'' + w0^2 x1 + eps d x1' + eps beta x1^3 + delta (x1 - x2) = eps f cos(W t)
//! x2'' + w0^2 x2 + eps d x2' + eps beta x2^3 + delta (x2 - x1) = 0
//! ```
//!
//! and its first-order modulation equations in the modal amplitudes and phases
//! `(a1, gamma1, a2, gamma2)` are
//!
//! ```text
//! a1'     = -d a1 / 2 + f sin(gamma1) / (4 w1)
//! gamma1' = sigma1 - 3 beta a1^2 / (8 w1) - 3 beta a2^2 / (4 w1) + f cos(gamma1) / (4 w1 a1)
//! a2'     = -d a2 / 2 + f sin(gamma2) / (4 w2)
//! gamma2' = sigma1 - sigma2 - 3 beta a2^2 / (8 w2) - 3 beta a1^2 / (4 w2) + f cos(gamma2) / (4 w2 a2)
//! ```
//!
//! with `W = w1 + eps sigma1` and `w2 = w1 + eps sigma2`.

use std::f64::consts::PI;

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Amplitudes at or below this value make the phase equations singular.
pub const AMPLITUDE_FLOOR: f64 = 1e-12;

/// Physical coefficients of the coupled oscillators.
///
/// `d`, `beta` and `f` are the rescaled (order-one) values; the physical
/// damping, cubic stiffness and forcing are `epsilon` times these.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    pub omega0: f64,
    pub d: f64,
    pub beta: f64,
    pub delta: f64,
    pub f: f64,
    pub epsilon: f64,
}

impl Default for SystemParams {
    fn default() -> Self {
        Self {
            omega0: 1.0,
            d: 1.0,
            beta: 40.0,
            delta: 1.0,
            f: 1.0,
            epsilon: 0.1,
        }
    }
}

impl SystemParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.omega0, self.d, self.beta, self.delta, self.f, self.epsilon];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams(format!("non-finite field in {self:?}")));
        }
        if self.omega0 <= 0.0 {
            return Err(Error::InvalidParams("omega0 must be positive".into()));
        }
        if self.d < 0.0 || self.delta < 0.0 || self.f < 0.0 {
            return Err(Error::InvalidParams(
                "d, delta and f must be non-negative".into(),
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::InvalidParams("epsilon must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn modal_frequencies(&self) -> ModalFrequencies {
        modal_frequencies(self)
    }

    /// Excitation frequency for a detuning `sigma1`.
    pub fn omega(&self, sigma1: f64) -> f64 {
        self.omega0 + self.epsilon * sigma1
    }

    /// Detuning for an excitation frequency `omega`.
    pub fn sigma1(&self, omega: f64) -> f64 {
        (omega - self.omega0) / self.epsilon
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_d(mut self, d: f64) -> Self {
        self.d = d;
        self
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }

    pub fn with_f(mut self, f: f64) -> Self {
        self.f = f;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModalFrequencies {
    pub omega1: f64,
    pub omega2: f64,
    /// Internal detuning `(omega2 - omega1) / epsilon`.
    pub sigma2: f64,
}

pub fn modal_frequencies(p: &SystemParams) -> ModalFrequencies {
    let omega1 = p.omega0;
    let omega2 = (p.omega0 * p.omega0 + 2.0 * p.delta).sqrt();
    ModalFrequencies {
        omega1,
        omega2,
        sigma2: (omega2 - omega1) / p.epsilon,
    }
}

/// Slow-flow state: modal amplitudes and phases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModulationState {
    pub a1: f64,
    pub gamma1: f64,
    pub a2: f64,
    pub gamma2: f64,
}

impl ModulationState {
    pub fn new(a1: f64, gamma1: f64, a2: f64, gamma2: f64) -> Self {
        Self {
            a1,
            gamma1,
            a2,
            gamma2,
        }
    }

    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.a1, self.gamma1, self.a2, self.gamma2)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    /// Flips negative amplitudes to positive ones by shifting the phase by pi.
    /// Phases are left unwrapped.
    pub fn canonical(&self) -> Self {
        let (a1, gamma1) = canonical_pair(self.a1, self.gamma1);
        let (a2, gamma2) = canonical_pair(self.a2, self.gamma2);
        Self::new(a1, gamma1, a2, gamma2)
    }

    /// Equality of amplitudes, and of phases modulo 2 pi.
    pub fn approx_eq(&self, other: &Self, tol: f64) -> bool {
        (self.a1 - other.a1).abs() <= tol
            && (self.a2 - other.a2).abs() <= tol
            && phase_distance(self.gamma1, other.gamma1) <= tol
            && phase_distance(self.gamma2, other.gamma2) <= tol
    }
}

fn canonical_pair(a: f64, gamma: f64) -> (f64, f64) {
    if a < 0.0 {
        (-a, gamma + PI)
    } else {
        (a, gamma)
    }
}

/// Distance between two angles on the circle, in `[0, pi]`.
pub fn phase_distance(x: f64, y: f64) -> f64 {
    let r = (x - y).rem_euclid(2.0 * PI);
    r.min(2.0 * PI - r)
}

/// Coefficients of the modulation equations for one parameter set.
#[derive(Debug, Clone, Copy)]
pub struct SlowFlow {
    pub params: SystemParams,
    pub modes: ModalFrequencies,
    half_d: f64,
    force1: f64,
    force2: f64,
    self1: f64,
    cross1: f64,
    self2: f64,
    cross2: f64,
}

impl SlowFlow {
    pub fn new(params: &SystemParams) -> Self {
        let modes = modal_frequencies(params);
        let (w1, w2, b) = (modes.omega1, modes.omega2, params.beta);
        Self {
            params: *params,
            modes,
            half_d: 0.5 * params.d,
            force1: params.f / (4.0 * w1),
            force2: params.f / (4.0 * w2),
            self1: 3.0 * b / (8.0 * w1),
            cross1: 3.0 * b / (4.0 * w1),
            self2: 3.0 * b / (8.0 * w2),
            cross2: 3.0 * b / (4.0 * w2),
        }
    }

    fn check_amplitudes(s: &ModulationState) -> Result<()> {
        for a in [s.a1, s.a2] {
            if !(a > AMPLITUDE_FLOOR) {
                return Err(Error::SingularAmplitude {
                    value: a,
                    floor: AMPLITUDE_FLOOR,
                });
            }
        }
        Ok(())
    }

    pub fn rhs(&self, s: &ModulationState, sigma1: f64) -> Result<Vector4<f64>> {
        Self::check_amplitudes(s)?;
        let (s1, c1) = s.gamma1.sin_cos();
        let (s2, c2) = s.gamma2.sin_cos();
        let (a1, a2) = (s.a1, s.a2);
        Ok(Vector4::new(
            -self.half_d * a1 + self.force1 * s1,
            sigma1 - self.self1 * a1 * a1 - self.cross1 * a2 * a2 + self.force1 * c1 / a1,
            -self.half_d * a2 + self.force2 * s2,
            sigma1 - self.modes.sigma2 - self.self2 * a2 * a2 - self.cross2 * a1 * a1
                + self.force2 * c2 / a2,
        ))
    }

    /// Analytic Jacobian of [`SlowFlow::rhs`] with respect to the state.
    pub fn jacobian(&self, s: &ModulationState) -> Result<Matrix4<f64>> {
        Self::check_amplitudes(s)?;
        let (s1, c1) = s.gamma1.sin_cos();
        let (s2, c2) = s.gamma2.sin_cos();
        let (a1, a2) = (s.a1, s.a2);
        let mut j = Matrix4::zeros();
        j[(0, 0)] = -self.half_d;
        j[(0, 1)] = self.force1 * c1;
        j[(1, 0)] = -2.0 * self.self1 * a1 - self.force1 * c1 / (a1 * a1);
        j[(1, 1)] = -self.force1 * s1 / a1;
        j[(1, 2)] = -2.0 * self.cross1 * a2;
        j[(2, 2)] = -self.half_d;
        j[(2, 3)] = self.force2 * c2;
        j[(3, 0)] = -2.0 * self.cross2 * a1;
        j[(3, 2)] = -2.0 * self.self2 * a2 - self.force2 * c2 / (a2 * a2);
        j[(3, 3)] = -self.force2 * s2 / a2;
        Ok(j)
    }

    /// Fixed-point residual and Jacobian in Cartesian coordinates
    /// `(p1, q1, p2, q2)` with `p + i q = a exp(i gamma)`. There the slow flow
    /// reads `z' = (-d/2 + i nu) z + i f / (4 w)` and has no amplitude poles.
    pub fn cartesian_residual(&self, x: &Vector4<f64>, sigma1: f64) -> (Vector4<f64>, Matrix4<f64>) {
        let (p1, q1, p2, q2) = (x[0], x[1], x[2], x[3]);
        let e1 = p1 * p1 + q1 * q1;
        let e2 = p2 * p2 + q2 * q2;
        let nu1 = sigma1 - self.self1 * e1 - self.cross1 * e2;
        let nu2 = sigma1 - self.modes.sigma2 - self.self2 * e2 - self.cross2 * e1;
        let mu = self.half_d;
        let r = Vector4::new(
            -mu * p1 - nu1 * q1,
            nu1 * p1 - mu * q1 + self.force1,
            -mu * p2 - nu2 * q2,
            nu2 * p2 - mu * q2 + self.force2,
        );
        let dnu1 = [
            -2.0 * self.self1 * p1,
            -2.0 * self.self1 * q1,
            -2.0 * self.cross1 * p2,
            -2.0 * self.cross1 * q2,
        ];
        let dnu2 = [
            -2.0 * self.cross2 * p1,
            -2.0 * self.cross2 * q1,
            -2.0 * self.self2 * p2,
            -2.0 * self.self2 * q2,
        ];
        let mut j = Matrix4::zeros();
        for c in 0..4 {
            j[(0, c)] = -q1 * dnu1[c];
            j[(1, c)] = p1 * dnu1[c];
            j[(2, c)] = -q2 * dnu2[c];
            j[(3, c)] = p2 * dnu2[c];
        }
        j[(0, 0)] -= mu;
        j[(0, 1)] -= nu1;
        j[(1, 0)] += nu1;
        j[(1, 1)] -= mu;
        j[(2, 2)] -= mu;
        j[(2, 3)] -= nu2;
        j[(3, 2)] += nu2;
        j[(3, 3)] -= mu;
        (r, j)
    }

    /// Derivative of the right-hand side with respect to the detuning.
    pub fn d_sigma1() -> Vector4<f64> {
        Vector4::new(0.0, 1.0, 0.0, 1.0)
    }
}

pub fn modulation_rhs(s: &ModulationState, p: &SystemParams, sigma1: f64) -> Result<Vector4<f64>> {
    SlowFlow::new(p).rhs(s, sigma1)
}

/// Residual of the steady-state problem together with its analytic Jacobian.
pub fn steady_residual_jacobian(
    s: &ModulationState,
    p: &SystemParams,
    sigma1: f64,
) -> Result<(Vector4<f64>, Matrix4<f64>)> {
    let flow = SlowFlow::new(p);
    Ok((flow.rhs(s, sigma1)?, flow.jacobian(s)?))
}

/// Amplitudes and phases of the two oscillators at leading order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalResponse {
    pub u1: f64,
    pub u2: f64,
    pub big_gamma1: f64,
    pub big_gamma2: f64,
}

pub fn reconstruct_physical(s: &ModulationState) -> PhysicalResponse {
    let (s1, c1) = s.gamma1.sin_cos();
    let (s2, c2) = s.gamma2.sin_cos();
    let cc1 = s.a1 * c1 + s.a2 * c2;
    let cc2 = s.a1 * s1 + s.a2 * s2;
    let cc3 = s.a1 * c1 - s.a2 * c2;
    let cc4 = s.a1 * s1 - s.a2 * s2;
    PhysicalResponse {
        u1: cc1.hypot(cc2),
        u2: cc3.hypot(cc4),
        big_gamma1: cc2.atan2(cc1),
        big_gamma2: cc4.atan2(cc3),
    }
}

/// Closed-form steady amplitude of the first mode for a linear (`beta = 0`) system.
pub fn linear_amplitude_oracle(p: &SystemParams, sigma1: f64) -> Result<f64> {
    if p.beta != 0.0 {
        return Err(Error::InvalidParams(format!(
            "linear oracle needs beta = 0, got {}",
            p.beta
        )));
    }
    let omega1 = modal_frequencies(p).omega1;
    Ok(p.f / (2.0 * omega1 * (p.d * p.d + 4.0 * sigma1 * sigma1).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn base() -> SystemParams {
        SystemParams::default()
    }

    #[test]
    fn modal_frequencies_examples() {
        let m = modal_frequencies(&base());
        assert_relative_eq!(m.omega2, 3f64.sqrt(), epsilon = 1e-12);
        assert!((m.sigma2 - 7.32).abs() < 0.01);
        assert_eq!((m.sigma2 * 10.0).round() / 10.0, 7.3);

        let m = modal_frequencies(&base().with_delta(0.0));
        assert_eq!(m.omega2, 1.0);
        assert_eq!(m.sigma2, 0.0);

        let m = modal_frequencies(&base().with_delta(2.0));
        assert_relative_eq!(m.omega2, 5f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(m.sigma2, 12.360679774997896, epsilon = 1e-10);
    }

    #[test]
    fn rhs_matches_hand_evaluation() {
        let s = ModulationState::new(1.0, 0.0, 1.0, 0.0);
        let r = modulation_rhs(&s, &base(), 0.0).unwrap();
        // Hand evaluation with w1 = 1, w2 = sqrt(3), sigma2 = (sqrt(3) - 1) / 0.1:
        // gamma2' = -sigma2 - 15/sqrt(3) - 30/sqrt(3) + 1/(4 sqrt(3))
        let w2 = 3f64.sqrt();
        let g2 = -(w2 - 1.0) / 0.1 - 15.0 / w2 - 30.0 / w2 + 0.25 / w2;
        assert_relative_eq!(r[0], -0.5, epsilon = 1e-14);
        assert_relative_eq!(r[1], -44.75, epsilon = 1e-12);
        assert_relative_eq!(r[2], -0.5, epsilon = 1e-14);
        assert_relative_eq!(r[3], g2, epsilon = 1e-12);
        assert_relative_eq!(r[3], -33.156932, epsilon = 1e-6);
    }

    #[test]
    fn rhs_without_forcing_damping_or_nonlinearity() {
        let p = SystemParams {
            f: 0.0,
            d: 0.0,
            beta: 0.0,
            ..base()
        };
        let sigma2 = modal_frequencies(&p).sigma2;
        let s = ModulationState::new(0.3, 1.2, 0.7, -2.0);
        let r = modulation_rhs(&s, &p, 2.5).unwrap();
        assert_eq!(r, Vector4::new(0.0, 2.5, 0.0, 2.5 - sigma2));
    }

    #[test]
    fn uncoupled_equal_modes_have_equal_rates() {
        let p = base().with_delta(0.0);
        let s = ModulationState::new(0.4, 0.3, 0.4, 0.3);
        let r = modulation_rhs(&s, &p, 1.7).unwrap();
        assert_relative_eq!(r[0], r[2], epsilon = 1e-14);
        assert_relative_eq!(r[1], r[3], epsilon = 1e-14);
    }

    #[test]
    fn singular_amplitude_is_rejected() {
        let s = ModulationState::new(0.0, 0.0, 1.0, 0.0);
        assert!(matches!(
            modulation_rhs(&s, &base(), 0.0),
            Err(Error::SingularAmplitude { .. })
        ));
        let s = ModulationState::new(1.0, 0.0, 1e-13, 0.0);
        assert!(steady_residual_jacobian(&s, &base(), 0.0).is_err());
    }

    #[test]
    fn linear_jacobian_has_no_cross_terms() {
        let p = base().with_beta(0.0);
        let s = ModulationState::new(0.3, 0.4, 0.2, -1.0);
        let j = SlowFlow::new(&p).jacobian(&s).unwrap();
        for r in 0..2 {
            for c in 2..4 {
                assert_eq!(j[(r, c)], 0.0);
                assert_eq!(j[(c, r)], 0.0);
            }
        }
    }

    #[test]
    fn reconstruct_examples() {
        let r = reconstruct_physical(&ModulationState::new(0.7, 0.4, 0.7, 0.4));
        assert_relative_eq!(r.u1, 1.4, epsilon = 1e-14);
        assert!(r.u2 < 1e-15);

        let r = reconstruct_physical(&ModulationState::new(0.7, 0.0, 0.0, 0.0));
        assert_relative_eq!(r.u1, 0.7);
        assert_relative_eq!(r.u2, 0.7);

        let r = reconstruct_physical(&ModulationState::new(1.0, 0.0, 1.0, PI / 2.0));
        assert_relative_eq!(r.u1, 2f64.sqrt(), epsilon = 1e-14);
        assert_relative_eq!(r.u2, 2f64.sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn linear_oracle_examples() {
        let p = SystemParams {
            beta: 0.0,
            ..base()
        };
        assert_eq!(linear_amplitude_oracle(&p, 0.0).unwrap(), 0.5);
        assert_eq!(linear_amplitude_oracle(&p.with_f(0.0), 3.0).unwrap(), 0.0);
        let mut last = f64::INFINITY;
        for k in 0..50 {
            let a = linear_amplitude_oracle(&p, k as f64 * 10.0).unwrap();
            assert!(a < last);
            last = a;
        }
        assert!(last < 1e-3);
        assert!(linear_amplitude_oracle(&base(), 0.0).is_err());
    }

    #[test]
    fn validation() {
        assert!(base().validate().is_ok());
        assert!(base().with_d(-1.0).validate().is_err());
        assert!(SystemParams {
            epsilon: 1.0,
            ..base()
        }
        .validate()
        .is_err());
        assert!(SystemParams {
            omega0: 0.0,
            ..base()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn cartesian_form_shares_fixed_points_and_derivatives() {
        let flow = SlowFlow::new(&base());
        let x = Vector4::new(0.2, -0.1, 0.05, 0.3);
        let (_, j) = flow.cartesian_residual(&x, 1.3);
        let h = 1e-6;
        for c in 0..4 {
            let mut xp = x;
            let mut xm = x;
            xp[c] += h;
            xm[c] -= h;
            let fd = (flow.cartesian_residual(&xp, 1.3).0 - flow.cartesian_residual(&xm, 1.3).0) / (2.0 * h);
            for r in 0..4 {
                assert!((fd[r] - j[(r, c)]).abs() < 1e-6);
            }
        }
        // Polar and Cartesian residuals vanish together: build a polar state
        // with a1' = gamma1' = 0 exactly for the first mode, and compare.
        let s = ModulationState::new(0.3, 0.7, 0.2, -0.4);
        let polar = flow.rhs(&s, 0.5).unwrap();
        let cart = flow
            .cartesian_residual(
                &Vector4::new(0.3 * 0.7f64.cos(), 0.3 * 0.7f64.sin(), 0.2 * (-0.4f64).cos(), 0.2 * (-0.4f64).sin()),
                0.5,
            )
            .0;
        // |G1| = |a1' + i a1 gamma1'|
        assert_relative_eq!(cart[0].hypot(cart[1]), polar[0].hypot(0.3 * polar[1]), epsilon = 1e-12);
        assert_relative_eq!(cart[2].hypot(cart[3]), polar[2].hypot(0.2 * polar[3]), epsilon = 1e-12);
    }

    fn central_difference(flow: &SlowFlow, s: &ModulationState, sigma1: f64) -> Matrix4<f64> {
        let h = 1e-6;
        let mut j = Matrix4::zeros();
        for c in 0..4 {
            let mut plus = s.to_vector();
            let mut minus = s.to_vector();
            plus[c] += h;
            minus[c] -= h;
            let fp = flow.rhs(&ModulationState::from_vector(&plus), sigma1).unwrap();
            let fm = flow.rhs(&ModulationState::from_vector(&minus), sigma1).unwrap();
            j.set_column(c, &((fp - fm) / (2.0 * h)));
        }
        j
    }

    proptest! {
        #[test]
        fn sum_of_squares_identity(
            a1 in 0.0f64..3.0, g1 in -10.0f64..10.0, a2 in 0.0f64..3.0, g2 in -10.0f64..10.0
        ) {
            let r = reconstruct_physical(&ModulationState::new(a1, g1, a2, g2));
            let lhs = r.u1 * r.u1 + r.u2 * r.u2;
            let rhs = 2.0 * (a1 * a1 + a2 * a2);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1.0));
        }

        #[test]
        fn canonicalization_is_idempotent(
            a1 in -3.0f64..3.0, g1 in -10.0f64..10.0, a2 in -3.0f64..3.0, g2 in -10.0f64..10.0
        ) {
            let s = ModulationState::new(a1, g1, a2, g2);
            let once = s.canonical();
            prop_assert_eq!(once, once.canonical());
            prop_assert!(once.a1 >= 0.0 && once.a2 >= 0.0);
            // Same physical response before and after.
            let (r0, r1) = (reconstruct_physical(&s), reconstruct_physical(&once));
            prop_assert!((r0.u1 - r1.u1).abs() < 1e-12 && (r0.u2 - r1.u2).abs() < 1e-12);
        }

        #[test]
        fn jacobian_matches_central_differences(
            a1 in 0.01f64..2.0, g1 in -PI..PI, a2 in 0.01f64..2.0, g2 in -PI..PI,
            sigma1 in -15.0f64..20.0, beta in 0.0f64..70.0, delta in 0.0f64..2.0
        ) {
            let p = base().with_beta(beta).with_delta(delta);
            let flow = SlowFlow::new(&p);
            let s = ModulationState::new(a1, g1, a2, g2);
            let exact = flow.jacobian(&s).unwrap();
            let fd = central_difference(&flow, &s, sigma1);
            for (e, n) in exact.iter().zip(fd.iter()) {
                prop_assert!((e - n).abs() <= 1e-6 * e.abs().max(1.0), "{} vs {}", e, n);
            }
        }
    }
}
