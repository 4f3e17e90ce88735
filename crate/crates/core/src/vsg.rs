//! Virtual synchronous generator control laws.
//!
//! The frequency loop integrates the swing equation
//! `P_in − P_out = J·ω·dω/dt + D·(ω − ω_g)` and the power angle
//! `δ = ∫(ω − ω_g) dt`. The conventional voltage loop is an integrator on the
//! reactive-power error plus a voltage droop, offset by the nominal voltage.

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VsgParams<T> {
    /// Virtual rotor inertia J (kg·m²).
    pub inertia: T,
    /// Frequency droop D (W·s/rad).
    pub damping: T,
    /// Voltage-loop integrator coefficient K_i (var·s/V).
    pub ki: T,
    /// Voltage droop D_v (V/V).
    pub dv: T,
    /// Nominal angular frequency (rad/s).
    pub omega_nominal: T,
    /// Voltage-loop offset E_0 (peak phase volts); also bounds the anti-windup clamp `[0, 2·E_0]`.
    pub nominal_voltage: T,
}

impl<T: Real> VsgParams<T> {
    /// Droop coefficient giving `droop_fraction` speed deviation at rated power.
    pub fn damping_from_droop(rated_power: T, droop_fraction: T, omega_nominal: T) -> T {
        rated_power / (droop_fraction * omega_nominal)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.inertia,
            self.damping,
            self.ki,
            self.dv,
            self.omega_nominal,
            self.nominal_voltage,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Parameter("VSG parameters must be finite".into()));
        }
        if !(self.inertia > T::zero()) {
            return Err(Error::Parameter(format!("inertia must be positive, got {}", self.inertia)));
        }
        if self.damping < T::zero() {
            return Err(Error::Parameter(format!("damping must be non-negative, got {}", self.damping)));
        }
        if !(self.ki > T::zero()) {
            return Err(Error::Parameter(format!("ki must be positive, got {}", self.ki)));
        }
        if !(self.omega_nominal > T::zero()) || !(self.nominal_voltage > T::zero()) {
            return Err(Error::Parameter("nominal speed and voltage must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VsgState<T> {
    /// Virtual rotor speed ω_i (rad/s).
    pub omega: T,
    /// Power angle δ against the grid (rad).
    pub delta: T,
    /// Accumulated `∫ΔQ dt` (var·s).
    pub q_integral: T,
    /// Commanded inverter peak phase voltage E (V).
    pub voltage: T,
}

impl<T: Real> VsgState<T> {
    /// Synchronised with the grid at zero angle and the given voltage.
    pub fn synchronous(omega_grid: T, voltage: T) -> Self {
        Self {
            omega: omega_grid,
            delta: T::zero(),
            q_integral: T::zero(),
            voltage,
        }
    }

    /// Integrator content that reproduces `voltage` from the voltage loop
    /// given the droop error `dv_error`.
    pub fn with_consistent_integral(mut self, params: &VsgParams<T>, dv_error: T) -> Self {
        self.q_integral =
            params.ki * (self.voltage - params.nominal_voltage + params.dv * dv_error);
        self
    }
}

/// Power, voltage and frequency references.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Setpoints<T> {
    /// Three-phase active power reference (W).
    pub p_set: T,
    /// Three-phase reactive power reference (var).
    pub q_set: T,
    /// Voltage reference for the droop term (peak phase volts).
    pub v_ref: T,
    /// Grid frequency reference f_g (Hz).
    pub f_grid: T,
}

impl<T: Real> Setpoints<T> {
    pub fn validate(&self, rated_power: T) -> Result<()> {
        if ![self.p_set, self.q_set, self.v_ref, self.f_grid].iter().all(|v| v.is_finite()) {
            return Err(Error::Parameter("setpoints must be finite".into()));
        }
        if self.p_set.abs() > rated_power {
            return Err(Error::Parameter(format!(
                "|P_set| = {} exceeds the rating {rated_power}",
                self.p_set.abs()
            )));
        }
        Ok(())
    }
}

/// One control cycle of the swing equation.
///
/// The speed is advanced explicitly from the power imbalance at the start of
/// the cycle; the angle is then advanced with the updated speed
/// (semi-implicit Euler).
pub fn step_swing<T: Real>(
    state: &VsgState<T>,
    p_in: T,
    p_out: T,
    params: &VsgParams<T>,
    omega_grid: T,
    dt: T,
) -> Result<VsgState<T>> {
    if !(dt > T::zero()) {
        return Err(Error::Parameter(format!("dt must be positive, got {dt}")));
    }
    if !(state.omega > T::zero()) {
        return Err(Error::IntegrationBlowup {
            omega: state.omega.to_f64_lossy(),
        });
    }
    let slip = state.omega - omega_grid;
    let accel = (p_in - p_out - params.damping * slip) / (params.inertia * state.omega);
    let omega = state.omega + dt * accel;
    if !(omega > T::zero()) || !omega.is_finite() {
        return Err(Error::IntegrationBlowup {
            omega: omega.to_f64_lossy(),
        });
    }
    Ok(VsgState {
        omega,
        delta: state.delta + dt * (omega - omega_grid),
        ..*state
    })
}

/// One control cycle of the integrator + droop voltage loop,
/// `E = E_0 + (1/K_i)·∫ΔQ dt − D_v·ΔV`, clamped to `[0, 2·E_0]`.
///
/// While the error pushes the output past a clamp, the integrator stops at
/// the value that puts the output on the clamp (it never integrates back
/// out if it was already beyond).
pub fn step_voltage_loop<T: Real>(
    state: &VsgState<T>,
    dq: T,
    dv_error: T,
    params: &VsgParams<T>,
    dt: T,
) -> Result<VsgState<T>> {
    if !(dt > T::zero()) {
        return Err(Error::Parameter(format!("dt must be positive, got {dt}")));
    }
    if !dq.is_finite() || !dv_error.is_finite() {
        return Err(Error::Parameter("voltage-loop errors must be finite".into()));
    }
    let e0 = params.nominal_voltage;
    let e_max = e0 + e0;
    let output = |integral: T| e0 + integral / params.ki - params.dv * dv_error;

    let integral_at = |bound: T| params.ki * (bound - e0 + params.dv * dv_error);

    let mut q_integral = state.q_integral + dq * dt;
    let unclamped = output(q_integral);
    if unclamped > e_max && dq > T::zero() {
        q_integral = integral_at(e_max).max(state.q_integral.min(q_integral));
    } else if unclamped < T::zero() && dq < T::zero() {
        q_integral = integral_at(T::zero()).min(state.q_integral.max(q_integral));
    }
    let voltage = output(q_integral).max(T::zero()).min(e_max);
    if !voltage.is_finite() {
        return Err(Error::Parameter("voltage loop produced a non-finite output".into()));
    }
    Ok(VsgState {
        q_integral,
        voltage,
        ..*state
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const OMEGA_G: f64 = 376.991;

    fn params() -> VsgParams<f64> {
        VsgParams {
            inertia: 0.1,
            damping: 0.0,
            ki: 10.0,
            dv: 0.0,
            omega_nominal: OMEGA_G,
            nominal_voltage: 89.8,
        }
    }

    #[test]
    fn equilibrium_is_fixed() {
        let mut p = params();
        p.damping = 331.6;
        let s = VsgState { omega: OMEGA_G, delta: 0.013, q_integral: 5.0, voltage: 90.0 };
        let next = step_swing(&s, 1500.0, 1500.0, &p, OMEGA_G, 1e-3).unwrap();
        assert_eq!(next, s);
    }

    #[test]
    fn euler_speed_step_by_hand() {
        let s = VsgState::synchronous(OMEGA_G, 89.8);
        let next = step_swing(&s, 1000.0, 0.0, &params(), OMEGA_G, 1e-3).unwrap();
        let expected = OMEGA_G + 1e-3 * 1000.0 / (0.1 * OMEGA_G);
        assert_relative_eq!(next.omega, expected, max_relative = 1e-15);
        assert_relative_eq!(next.omega, 377.0175, max_relative = 1e-7);
        assert_relative_eq!(next.delta, 1e-3 * (expected - OMEGA_G), max_relative = 1e-9);
        assert_eq!(next.voltage, s.voltage);
        assert_eq!(next.q_integral, s.q_integral);
    }

    #[test]
    fn constant_imbalance_settles_on_droop_line() {
        let mut p = params();
        p.damping = 331.6;
        let dp = 800.0;
        let mut s = VsgState::synchronous(OMEGA_G, 89.8);
        for _ in 0..20_000 {
            s = step_swing(&s, dp, 0.0, &p, OMEGA_G, 1e-3).unwrap();
        }
        let slip = s.omega - OMEGA_G;
        assert_relative_eq!(p.damping * slip, dp, max_relative = 1e-3);
    }

    #[test]
    fn negative_speed_is_blowup() {
        let s = VsgState::synchronous(1.0, 89.8);
        let err = step_swing(&s, 0.0, 1e6, &params(), 1.0, 1e-3).unwrap_err();
        assert!(matches!(err, Error::IntegrationBlowup { .. }));
        assert!(step_swing(&s, 0.0, 0.0, &params(), 1.0, 0.0).is_err());
    }

    #[test]
    fn voltage_loop_nominal_without_error() {
        let s = VsgState::synchronous(OMEGA_G, 0.0);
        let next = step_voltage_loop(&s, 0.0, 0.0, &params(), 1e-3).unwrap();
        assert_eq!(next.voltage, 89.8);
    }

    #[test]
    fn voltage_loop_integrates_reactive_error() {
        let p = params();
        let mut s = VsgState::synchronous(OMEGA_G, p.nominal_voltage);
        for _ in 0..1000 {
            s = step_voltage_loop(&s, 100.0, 0.0, &p, 1e-3).unwrap();
        }
        assert_relative_eq!(s.voltage, 89.8 + 10.0, max_relative = 1e-12);
    }

    #[test]
    fn voltage_droop_lowers_output() {
        let mut p = params();
        p.dv = 0.1;
        let s = VsgState::synchronous(OMEGA_G, p.nominal_voltage);
        let next = step_voltage_loop(&s, 0.0, 2.0, &p, 1e-3).unwrap();
        assert_relative_eq!(next.voltage, 89.8 - 0.2, max_relative = 1e-15);
    }

    #[test]
    fn anti_windup_clamp_holds() {
        let p = params();
        let mut s = VsgState::synchronous(OMEGA_G, p.nominal_voltage);
        for _ in 0..10_000 {
            s = step_voltage_loop(&s, 1e5, 0.0, &p, 1e-3).unwrap();
            assert!(s.voltage <= 2.0 * p.nominal_voltage && s.voltage >= 0.0);
        }
        // integrator did not wind up: one step of opposite error leaves the clamp
        let back = step_voltage_loop(&s, -1e5, 0.0, &p, 1e-3).unwrap();
        assert!(back.voltage < 2.0 * p.nominal_voltage);
        for _ in 0..10_000 {
            s = step_voltage_loop(&s, -1e5, 0.0, &p, 1e-3).unwrap();
            assert!(s.voltage >= 0.0);
        }
        assert_eq!(s.voltage, 0.0);
    }

    #[test]
    fn consistent_integral_reproduces_voltage() {
        let mut p = params();
        p.dv = 0.1;
        let s = VsgState::synchronous(OMEGA_G, 91.0).with_consistent_integral(&p, -1.2);
        let next = step_voltage_loop(&s, 0.0, -1.2, &p, 1e-3).unwrap();
        assert_relative_eq!(next.voltage, 91.0, max_relative = 1e-14);
    }

    #[test]
    fn droop_from_percentage() {
        let d = VsgParams::damping_from_droop(5000.0, 0.04, 2.0 * std::f64::consts::PI * 60.0);
        assert_relative_eq!(d, 331.57, max_relative = 1e-4);
    }
}
