//! Heuristic dynamic programming voltage controller.
//!
//! A critic network estimates the cost-to-go `J(k) = U(k) + γ·J(k+1)` from
//! `[P, Q, e_p, e_Q, e_f, δ, E]`; an action network maps
//! `[P, Q, e_p, e_Q, e_f, δ]` to the inverter voltage `E`. The critic is
//! trained on the temporal-difference residual, the action network by
//! backpropagating `∂J/∂E` through the critic.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::mlp::Mlp;
use crate::scalar::Real;
use crate::vsg::Setpoints;

pub const CRITIC_INPUTS: usize = 7;
pub const ACTION_INPUTS: usize = 6;
/// Two hidden layers of eight nodes.
pub const HIDDEN: [usize; 2] = [8, 8];

const CHECKPOINT_HEADER: &str = "header.txt";
const CRITIC_FILE: &str = "critic.mlp";
const ACTION_FILE: &str = "action.mlp";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtilityWeights<T> {
    pub kp: T,
    pub kq: T,
    pub kf: T,
}

impl<T: Real> UtilityWeights<T> {
    pub fn validate(&self) -> Result<()> {
        let w = [self.kp, self.kq, self.kf];
        if w.iter().any(|k| !k.is_finite() || *k < T::zero()) {
            return Err(Error::Parameter("utility weights must be finite and non-negative".into()));
        }
        if w.iter().all(|k| k.is_zero()) {
            return Err(Error::Parameter("at least one utility weight must be positive".into()));
        }
        Ok(())
    }
}

impl<T: Real> Default for UtilityWeights<T> {
    /// Active and reactive power errors only.
    fn default() -> Self {
        Self {
            kp: T::one(),
            kq: T::one(),
            kf: T::zero(),
        }
    }
}

/// Tracking errors `e_p = P_set − P`, `e_Q = Q_set − Q`, `e_f = f_g − f`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ErrorTriple<T> {
    pub ep: T,
    pub eq: T,
    pub ef: T,
}

impl<T: Real> ErrorTriple<T> {
    pub fn from_measurement(meas: &Measurement<T>, sp: &Setpoints<T>) -> Self {
        Self {
            ep: sp.p_set - meas.p,
            eq: sp.q_set - meas.q,
            ef: sp.f_grid - meas.frequency,
        }
    }

    pub fn scale(self, by: T) -> Self {
        Self {
            ep: self.ep * by,
            eq: self.eq * by,
            ef: self.ef * by,
        }
    }
}

/// Wraps an angle into `(−π, π]`; power flow is 2π-periodic in δ.
pub fn wrap_angle<T: Real>(delta: T) -> T {
    let tau = T::TAU();
    let wrapped = delta - tau * ((delta + T::PI()) / tau).floor();
    if wrapped <= -T::PI() {
        wrapped + tau
    } else {
        wrapped
    }
}

/// `U = sqrt(K_p·e_p² + K_Q·e_Q² + K_f·e_f²)`.
pub fn utility<T: Real>(e: &ErrorTriple<T>, w: &UtilityWeights<T>) -> T {
    (w.kp * e.ep * e.ep + w.kq * e.eq * e.eq + w.kf * e.ef * e.ef).sqrt()
}

/// Raw signals fed to the network input generator.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Measurement<T> {
    /// Three-phase active power (W).
    pub p: T,
    /// Three-phase reactive power (var).
    pub q: T,
    /// Inverter frequency `ω_i/2π` (Hz).
    pub frequency: T,
    /// Power angle (rad).
    pub delta: T,
}

/// Per-channel normalisation of the network inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputScales<T> {
    /// Divides P, Q, e_p and e_Q (W or var).
    pub power: T,
    /// Divides e_f (Hz).
    pub frequency: T,
    /// Divides δ (rad).
    pub angle: T,
    /// Divides `E − E_0` on the critic's voltage channel, and maps the
    /// action output `a` to `E = E_0 + a·voltage` (V).
    pub voltage: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HdpConfig<T> {
    /// Discount factor γ in (0, 1].
    pub gamma: T,
    pub alpha_critic: T,
    pub alpha_action: T,
    /// Control cycles per training episode.
    pub horizon_steps: usize,
    pub scales: InputScales<T>,
    /// E_0: voltage commanded for a zero action output (V).
    pub nominal_voltage: T,
    /// Standard deviation of the training dither on the action output, in
    /// units of the action output.
    pub exploration: T,
    /// Bound on the temporal-difference residual used in each critic step.
    pub td_clip: T,
}

impl<T: Real> HdpConfig<T> {
    pub fn new(rated_power: T, nominal_frequency: T, nominal_voltage: T) -> Self {
        Self {
            gamma: T::lit(0.95),
            alpha_critic: T::lit(1e-2),
            alpha_action: T::lit(1e-4),
            horizon_steps: 1000,
            scales: InputScales {
                power: rated_power,
                frequency: nominal_frequency,
                angle: T::one(),
                voltage: nominal_voltage * T::lit(0.01),
            },
            nominal_voltage,
            exploration: T::lit(0.1),
            td_clip: T::one(),
        }
    }

    /// Discount and learning rates set to one.
    pub fn unit_rates(rated_power: T, nominal_frequency: T, nominal_voltage: T) -> Self {
        Self {
            gamma: T::one(),
            alpha_critic: T::one(),
            alpha_action: T::one(),
            ..Self::new(rated_power, nominal_frequency, nominal_voltage)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > T::zero() && self.gamma <= T::one()) {
            return Err(Error::Parameter(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if !(self.alpha_critic >= T::zero()) || !(self.alpha_action >= T::zero()) {
            return Err(Error::Parameter("learning rates must be non-negative".into()));
        }
        if self.horizon_steps == 0 {
            return Err(Error::Parameter("horizon_steps must be at least 1".into()));
        }
        let s = self.scales;
        if [s.power, s.frequency, s.angle, s.voltage]
            .iter()
            .any(|v| !(*v > T::zero()) || !v.is_finite())
        {
            return Err(Error::Parameter("normalisation scales must be positive".into()));
        }
        if !(self.nominal_voltage > T::zero()) {
            return Err(Error::Parameter("nominal voltage must be positive".into()));
        }
        if !(self.exploration >= T::zero()) {
            return Err(Error::Parameter("exploration must be non-negative".into()));
        }
        if !(self.td_clip > T::zero()) {
            return Err(Error::Parameter("td_clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HdpController<T> {
    pub critic: Mlp<T>,
    pub action: Mlp<T>,
    pub weights: UtilityWeights<T>,
    pub config: HdpConfig<T>,
}

impl<T: Real> HdpController<T> {
    pub fn new(critic: Mlp<T>, action: Mlp<T>, weights: UtilityWeights<T>, config: HdpConfig<T>) -> Result<Self> {
        let shape = |net: &Mlp<T>, inputs: usize, name: &'static str| {
            if net.input_size() != inputs {
                return Err(Error::Dimension {
                    context: name,
                    expected: inputs,
                    got: net.input_size(),
                });
            }
            if net.output_size() != 1 {
                return Err(Error::Dimension {
                    context: name,
                    expected: 1,
                    got: net.output_size(),
                });
            }
            Ok(())
        };
        shape(&critic, CRITIC_INPUTS, "critic network")?;
        shape(&action, ACTION_INPUTS, "action network")?;
        weights.validate()?;
        config.validate()?;
        Ok(Self {
            critic,
            action,
            weights,
            config,
        })
    }

    /// Fresh controller with `inputs → 8 → 8 → 1` networks drawn from `rng`.
    pub fn init_random<R: Rng>(weights: UtilityWeights<T>, config: HdpConfig<T>, rng: &mut R) -> Result<Self> {
        let critic = Mlp::init_with_rng(&[CRITIC_INPUTS, HIDDEN[0], HIDDEN[1], 1], rng)?;
        let action = Mlp::init_with_rng(&[ACTION_INPUTS, HIDDEN[0], HIDDEN[1], 1], rng)?;
        Self::new(critic, action, weights, config)
    }

    /// Utility of a measurement, computed on normalised errors.
    pub fn utility_of(&self, meas: &Measurement<T>, sp: &Setpoints<T>) -> T {
        let e = ErrorTriple::from_measurement(meas, sp);
        let s = self.config.scales;
        let normalised = ErrorTriple {
            ep: e.ep / s.power,
            eq: e.eq / s.power,
            ef: e.ef / s.frequency,
        };
        utility(&normalised, &self.weights)
    }

    pub fn build_action_input(&self, meas: &Measurement<T>, sp: &Setpoints<T>) -> [T; ACTION_INPUTS] {
        let s = self.config.scales;
        let e = ErrorTriple::from_measurement(meas, sp);
        [
            meas.p / s.power,
            meas.q / s.power,
            e.ep / s.power,
            e.eq / s.power,
            e.ef / s.frequency,
            wrap_angle(meas.delta) / s.angle,
        ]
    }

    pub fn build_critic_input(&self, meas: &Measurement<T>, sp: &Setpoints<T>, voltage: T) -> [T; CRITIC_INPUTS] {
        let a = self.build_action_input(meas, sp);
        let v = self.voltage_channel(voltage);
        [a[0], a[1], a[2], a[3], a[4], a[5], v]
    }

    /// Critic's voltage channel `(E − E_0)/scale`.
    pub fn voltage_channel(&self, voltage: T) -> T {
        (voltage - self.config.nominal_voltage) / self.config.scales.voltage
    }

    /// Critic input for the action network's own output at `x_a`.
    pub fn critic_input_for(&self, x_a: &[T; ACTION_INPUTS], action_output: T) -> [T; CRITIC_INPUTS] {
        [x_a[0], x_a[1], x_a[2], x_a[3], x_a[4], x_a[5], action_output]
    }

    pub fn critic_eval(&self, x: &[T]) -> Result<T> {
        if x.len() != CRITIC_INPUTS {
            return Err(Error::Dimension {
                context: "critic input",
                expected: CRITIC_INPUTS,
                got: x.len(),
            });
        }
        Ok(self.critic.predict(x)?[0])
    }

    /// Raw action network output `a`.
    pub fn action_output(&self, x: &[T]) -> Result<T> {
        if x.len() != ACTION_INPUTS {
            return Err(Error::Dimension {
                context: "action input",
                expected: ACTION_INPUTS,
                got: x.len(),
            });
        }
        Ok(self.action.predict(x)?[0])
    }

    /// Maps an action output to a voltage: `E = E_0 + a·scale`, clamped to `[0, 2·E_0]`.
    pub fn voltage_from_output(&self, a: T) -> T {
        let e0 = self.config.nominal_voltage;
        (e0 + a * self.config.scales.voltage).max(T::zero()).min(e0 + e0)
    }

    pub fn action_eval(&self, x: &[T]) -> Result<T> {
        Ok(self.voltage_from_output(self.action_output(x)?))
    }

    /// One semi-gradient step on `½·(J(x_k) − γ·J(x_k1) − U_k)²` with
    /// `J(x_k1)` held constant. Returns the residual before the update.
    pub fn critic_update(&mut self, x_k: &[T], x_k1: &[T], u_k: T) -> Result<T> {
        let target = self.config.gamma * self.critic_eval(x_k1)? + u_k;
        self.critic_fit(x_k, target)
    }

    fn critic_fit(&mut self, x_k: &[T], target: T) -> Result<T> {
        if x_k.len() != CRITIC_INPUTS {
            return Err(Error::Dimension {
                context: "critic input",
                expected: CRITIC_INPUTS,
                got: x_k.len(),
            });
        }
        let (j, cache) = self.critic.forward(x_k)?;
        let td = j[0] - target;
        if !td.is_finite() {
            return Err(Error::TrainingDivergence(format!("critic residual is {td}")));
        }
        if td.is_zero() || self.config.alpha_critic.is_zero() {
            return Ok(td);
        }
        let grad = self.critic.grad_weights(&cache, &[T::one()])?;
        let clip = self.config.td_clip;
        let step_td = td.max(-clip).min(clip);
        self.critic.update_in_place(&grad, -self.config.alpha_critic * step_td)?;
        if !self.critic.is_finite() {
            return Err(Error::TrainingDivergence("critic weights left the finite range".into()));
        }
        Ok(td)
    }

    /// `∂J/∂a` of the critic at `x_c`, where `a` is the action output that
    /// feeds the voltage channel.
    pub fn critic_slope(&self, x_c: &[T]) -> Result<T> {
        if x_c.len() != CRITIC_INPUTS {
            return Err(Error::Dimension {
                context: "critic input",
                expected: CRITIC_INPUTS,
                got: x_c.len(),
            });
        }
        let (_, cache) = self.critic.forward(x_c)?;
        Ok(self.critic.grad_input(&cache, &[T::one()])?[CRITIC_INPUTS - 1])
    }

    /// One descent step of the action network on the critic's estimate,
    /// `ΔW = −α_a·(∂J/∂E)·(∂E/∂W)`. Returns `∂J/∂a`.
    ///
    /// The voltage clamp is handled as a projection: outside `[0, 2·E_0]`
    /// the step is taken only when it moves the output back toward the range.
    pub fn action_update(&mut self, x_a: &[T], x_c: &[T]) -> Result<T> {
        let slope = self.critic_slope(x_c)?;
        if !slope.is_finite() {
            return Err(Error::TrainingDivergence(format!("critic slope is {slope}")));
        }
        if x_a.len() != ACTION_INPUTS {
            return Err(Error::Dimension {
                context: "action input",
                expected: ACTION_INPUTS,
                got: x_a.len(),
            });
        }
        if slope.is_zero() || self.config.alpha_action.is_zero() {
            return Ok(slope);
        }
        let (a, cache) = self.action.forward(x_a)?;
        // Past a clamp, only steps that pull the output back are taken.
        let e = self.config.nominal_voltage + a[0] * self.config.scales.voltage;
        let e_max = self.config.nominal_voltage + self.config.nominal_voltage;
        if (e <= T::zero() && slope > T::zero()) || (e >= e_max && slope < T::zero()) {
            return Ok(slope);
        }
        let grad = self.action.grad_weights(&cache, &[T::one()])?;
        self.action.update_in_place(&grad, -self.config.alpha_action * slope)?;
        if !self.action.is_finite() {
            return Err(Error::TrainingDivergence("action weights left the finite range".into()));
        }
        Ok(slope)
    }

    /// Writes `header.txt`, `critic.mlp` and `action.mlp` into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CHECKPOINT_HEADER), self.header_text())?;
        self.critic.save(&dir.join(CRITIC_FILE))?;
        self.action.save(&dir.join(ACTION_FILE))
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let header_path = dir.join(CHECKPOINT_HEADER);
        let text = std::fs::read_to_string(&header_path)
            .map_err(|e| Error::Parse(format!("{}: {e}", header_path.display())))?;
        let (weights, config, critic_name, action_name) = parse_header(&text)?;
        let critic = Mlp::load(&dir.join(critic_name))?;
        let action = Mlp::load(&dir.join(action_name))?;
        Self::new(critic, action, weights, config)
    }

    fn header_text(&self) -> String {
        let c = &self.config;
        let w = &self.weights;
        let mut out = String::from("# hdp controller checkpoint\n");
        let entries = [
            ("kp", w.kp),
            ("kq", w.kq),
            ("kf", w.kf),
            ("gamma", c.gamma),
            ("alpha_critic", c.alpha_critic),
            ("alpha_action", c.alpha_action),
            ("scale.power", c.scales.power),
            ("scale.frequency", c.scales.frequency),
            ("scale.angle", c.scales.angle),
            ("scale.voltage", c.scales.voltage),
            ("nominal_voltage", c.nominal_voltage),
            ("exploration", c.exploration),
            ("td_clip", c.td_clip),
        ];
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {}", v.to_f64_lossy());
        }
        let _ = writeln!(out, "horizon_steps = {}", c.horizon_steps);
        let _ = writeln!(out, "critic = {CRITIC_FILE}");
        let _ = writeln!(out, "action = {ACTION_FILE}");
        out
    }
}

type Header<T> = (UtilityWeights<T>, HdpConfig<T>, String, String);

fn parse_header<T: Real>(text: &str) -> Result<Header<T>> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("checkpoint header line {}: expected key = value", n + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    let text_of = |k: &str| {
        map.get(k)
            .cloned()
            .ok_or_else(|| Error::Parse(format!("checkpoint header is missing `{k}`")))
    };
    let num = |k: &str| -> Result<T> {
        let s = text_of(k)?;
        s.parse::<f64>()
            .map(T::lit)
            .map_err(|e| Error::Parse(format!("checkpoint header `{k}`: {e}")))
    };
    let weights = UtilityWeights {
        kp: num("kp")?,
        kq: num("kq")?,
        kf: num("kf")?,
    };
    let config = HdpConfig {
        gamma: num("gamma")?,
        alpha_critic: num("alpha_critic")?,
        alpha_action: num("alpha_action")?,
        horizon_steps: text_of("horizon_steps")?
            .parse()
            .map_err(|e| Error::Parse(format!("checkpoint header `horizon_steps`: {e}")))?,
        scales: InputScales {
            power: num("scale.power")?,
            frequency: num("scale.frequency")?,
            angle: num("scale.angle")?,
            voltage: num("scale.voltage")?,
        },
        nominal_voltage: num("nominal_voltage")?,
        exploration: num("exploration")?,
        td_clip: num("td_clip")?,
    };
    Ok((weights, config, text_of("critic")?, text_of("action")?))
}
