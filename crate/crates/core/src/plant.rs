//! Averaged phasor model of the inverter, filter, line and grid.
//!
//! All voltages are peak phase values and all powers are per phase, matching
//! the half-factor convention of peak-value phasors: `S = ½·E·conj(I)`.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Filter and line parameters of one phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineParams<T> {
    /// Inverter output filter inductance (H).
    pub filter_inductance: T,
    /// Inverter-to-grid line inductance (H).
    pub line_inductance: T,
    /// Inverter-to-grid line resistance (Ω).
    pub line_resistance: T,
}

impl<T: Real> LineParams<T> {
    /// Mostly inductive line: 1 μH filter, 100 μH line, 10 mΩ.
    pub fn inductive() -> Self {
        Self {
            filter_inductance: T::lit(1e-6),
            line_inductance: T::lit(100e-6),
            line_resistance: T::lit(10e-3),
        }
    }

    /// Mostly resistive line: 1 μH filter, 1 μH line, 500 mΩ.
    pub fn resistive() -> Self {
        Self {
            filter_inductance: T::lit(1e-6),
            line_inductance: T::lit(1e-6),
            line_resistance: T::lit(0.5),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("filter_inductance", self.filter_inductance),
            ("line_inductance", self.line_inductance),
            ("line_resistance", self.line_resistance),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < T::zero() {
                return Err(Error::Parameter(format!(
                    "line.{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if self.filter_inductance + self.line_inductance <= T::zero()
            && self.line_resistance <= T::zero()
        {
            return Err(Error::Parameter(
                "line has neither inductance nor resistance".into(),
            ));
        }
        Ok(())
    }
}

/// Equivalent series impedance per phase, `Z = R + jX`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Impedance<T> {
    pub resistance: T,
    pub reactance: T,
    pub magnitude: T,
}

impl<T: Real> Impedance<T> {
    pub fn new(resistance: T, reactance: T) -> Result<Self> {
        if !resistance.is_finite() || !reactance.is_finite() {
            return Err(Error::Parameter("impedance components must be finite".into()));
        }
        let magnitude = resistance.hypot(reactance);
        if magnitude <= T::zero() {
            return Err(Error::SingularImpedance("|Z| = 0".into()));
        }
        Ok(Self {
            resistance,
            reactance,
            magnitude,
        })
    }
}

/// Active and reactive power of one phase (W, var).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PowerPair<T> {
    pub p: T,
    pub q: T,
}

impl<T: Real> PowerPair<T> {
    /// Scales per-phase powers to a balanced three-phase total.
    pub fn three_phase(self) -> Self {
        let three = T::lit(3.0);
        Self {
            p: self.p * three,
            q: self.q * three,
        }
    }
}

/// Grid voltage and frequency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridParams<T> {
    /// Peak phase voltage (V).
    pub peak_phase_voltage: T,
    /// Frequency (Hz).
    pub frequency: T,
}

impl<T: Real> GridParams<T> {
    /// Builds the grid from a line-to-line RMS rating, `V = V_ll·√2/√3`.
    pub fn from_line_rms(line_rms: T, frequency: T) -> Self {
        Self {
            peak_phase_voltage: line_rms * T::SQRT_2() / T::lit(3.0).sqrt(),
            frequency,
        }
    }

    pub fn angular_frequency(&self) -> T {
        T::TAU() * self.frequency
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_phase_voltage > T::zero()) || !self.peak_phase_voltage.is_finite() {
            return Err(Error::Parameter(format!(
                "grid voltage must be positive, got {}",
                self.peak_phase_voltage
            )));
        }
        if !(self.frequency > T::zero()) || !self.frequency.is_finite() {
            return Err(Error::Parameter(format!(
                "grid frequency must be positive, got {}",
                self.frequency
            )));
        }
        Ok(())
    }
}

/// `R_eq = R_L`, `X_eq = ω·(L_F + L_L)`.
pub fn equivalent_impedance<T: Real>(line: &LineParams<T>, omega: T) -> Result<Impedance<T>> {
    line.validate()?;
    if !(omega > T::zero()) || !omega.is_finite() {
        return Err(Error::Parameter(format!(
            "angular frequency must be positive, got {omega}"
        )));
    }
    Impedance::new(
        line.line_resistance,
        omega * (line.filter_inductance + line.line_inductance),
    )
}

fn check_voltages<T: Real>(e: T, v: T, delta: T) -> Result<()> {
    if !e.is_finite() || !v.is_finite() || !delta.is_finite() {
        return Err(Error::Parameter("voltages and angle must be finite".into()));
    }
    if e < T::zero() || v < T::zero() {
        return Err(Error::Parameter(format!(
            "peak voltages must be non-negative (E = {e}, V = {v})"
        )));
    }
    Ok(())
}

/// Power delivered to the grid through a general `R + jX` impedance.
pub fn power_flow_exact<T: Real>(e: T, v: T, delta: T, z: &Impedance<T>) -> Result<PowerPair<T>> {
    check_voltages(e, v, delta)?;
    if !(z.magnitude > T::zero()) {
        return Err(Error::SingularImpedance("|Z| = 0".into()));
    }
    let half = T::lit(0.5);
    let z2 = z.magnitude * z.magnitude;
    let (sin, cos) = delta.sin_cos();
    let in_phase = (e * e - e * v * cos) / z2;
    let quadrature = e * v * sin / z2;
    Ok(PowerPair {
        p: half * (in_phase * z.resistance + quadrature * z.reactance),
        q: half * (in_phase * z.reactance - quadrature * z.resistance),
    })
}

fn check_reactance<T: Real>(x: T) -> Result<()> {
    if !(x > T::zero()) || !x.is_finite() {
        return Err(Error::SingularImpedance(format!(
            "inductive approximation needs X > 0, got {x}"
        )));
    }
    Ok(())
}

/// Lossless-line estimate: `P ≈ EV·sinδ/2X`, `Q ≈ E(E − V·cosδ)/2X`.
pub fn power_flow_inductive_approx<T: Real>(e: T, v: T, delta: T, x: T) -> Result<PowerPair<T>> {
    check_voltages(e, v, delta)?;
    check_reactance(x)?;
    let two_x = T::lit(2.0) * x;
    let (sin, cos) = delta.sin_cos();
    Ok(PowerPair {
        p: e * v * sin / two_x,
        q: e * (e - v * cos) / two_x,
    })
}

/// Small-angle form of [`power_flow_inductive_approx`]: `P ≈ EVδ/2X`, `Q ≈ E(E − V)/2X`.
pub fn power_flow_linearized<T: Real>(e: T, v: T, delta: T, x: T) -> Result<PowerPair<T>> {
    check_voltages(e, v, delta)?;
    check_reactance(x)?;
    let two_x = T::lit(2.0) * x;
    Ok(PowerPair {
        p: e * v * delta / two_x,
        q: e * (e - v) / two_x,
    })
}

/// Inverter voltage `(E, δ)` that delivers the per-phase `(P, Q)` of `target`
/// through `z` into a grid at `V∠0`. Of the two solutions the low-current one
/// is returned; a target beyond the line's transfer limit is an error.
pub fn operating_point<T: Real>(target: PowerPair<T>, v: T, z: &Impedance<T>) -> Result<(T, T)> {
    if !(v > T::zero()) || !v.is_finite() {
        return Err(Error::Parameter(format!("grid voltage must be positive, got {v}")));
    }
    if !(z.magnitude > T::zero()) {
        return Err(Error::SingularImpedance("|Z| = 0".into()));
    }
    // With c = conj(I): V·c + Z·|c|² = 2S, a quadratic in m = |c|².
    let two = T::lit(2.0);
    let (a, b) = (two * target.p, two * target.q);
    let (r, x) = (z.resistance, z.reactance);
    let sigma2 = a * a + b * b;
    let lin = two * (a * r + b * x) + v * v;
    let disc = lin * lin - T::lit(4.0) * z.magnitude * z.magnitude * sigma2;
    if !(disc >= T::zero()) || !(lin > T::zero()) {
        return Err(Error::Parameter(format!(
            "P = {}, Q = {} is beyond the transfer limit of the line",
            target.p, target.q
        )));
    }
    let m = two * sigma2 / (lin + disc.sqrt());
    let cr = (a - r * m) / v;
    let ci = (b - x * m) / v;
    let re = v + r * cr + x * ci;
    let im = x * cr - r * ci;
    Ok((re.hypot(im), im.atan2(re)))
}
