//! Closed-loop engine: plant, VSG and voltage controller stepped at a fixed
//! control cycle, HDP training episodes, and step-response metrics.

use std::io::{Read, Write};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::hdp::{HdpConfig, HdpController, Measurement, UtilityWeights, ACTION_INPUTS};
use crate::plant::{equivalent_impedance, operating_point, power_flow_exact, GridParams, LineParams, PowerPair};
use crate::scalar::Real;
use crate::vsg::{step_swing, step_voltage_loop, Setpoints, VsgParams, VsgState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerKind {
    Conventional,
    Hdp,
}

impl ControllerKind {
    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Conventional => "conventional",
            ControllerKind::Hdp => "hdp",
        }
    }
}

/// Setpoint change at `time`; `None` keeps the previous value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SetpointStep<T> {
    pub time: T,
    pub p_set: Option<T>,
    pub q_set: Option<T>,
}

/// Initial setpoints plus time-ordered steps.
#[derive(Debug, Clone, PartialEq)]
pub struct SetpointSchedule<T> {
    pub initial: Setpoints<T>,
    pub steps: Vec<SetpointStep<T>>,
}

impl<T: Real> SetpointSchedule<T> {
    pub fn constant(initial: Setpoints<T>) -> Self {
        Self {
            initial,
            steps: Vec::new(),
        }
    }

    /// Setpoints in force at `t`; a step applies from its own time onward.
    pub fn at(&self, t: T) -> Setpoints<T> {
        let mut sp = self.initial;
        for step in self.steps.iter().take_while(|s| s.time <= t) {
            if let Some(p) = step.p_set {
                sp.p_set = p;
            }
            if let Some(q) = step.q_set {
                sp.q_set = q;
            }
        }
        sp
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario<T> {
    pub name: String,
    pub line: LineParams<T>,
    pub grid: GridParams<T>,
    pub vsg: VsgParams<T>,
    /// Three-phase rating (W).
    pub rated_power: T,
    pub schedule: SetpointSchedule<T>,
    pub dt: T,
    pub duration: T,
    pub controller: ControllerKind,
    /// Starting VSG state; `None` starts synchronised at `E_0` and `δ = 0`.
    pub initial_state: Option<VsgState<T>>,
}

impl<T: Real> Scenario<T> {
    /// 110 V line-to-line, 60 Hz, J = 0.1, 4 % droop, 5 kW, 1 ms; flat start
    /// with zero power setpoints.
    pub fn table_defaults(name: &str, line: LineParams<T>) -> Self {
        let grid = GridParams::from_line_rms(T::lit(110.0), T::lit(60.0));
        let rated_power = T::lit(5000.0);
        let omega = grid.angular_frequency();
        let vsg = VsgParams {
            inertia: T::lit(0.1),
            damping: VsgParams::damping_from_droop(rated_power, T::lit(0.04), omega),
            ki: T::lit(50.0),
            dv: T::lit(0.1),
            omega_nominal: omega,
            nominal_voltage: grid.peak_phase_voltage,
        };
        Self {
            name: name.to_string(),
            line,
            grid,
            vsg,
            rated_power,
            schedule: SetpointSchedule::constant(Setpoints {
                p_set: T::zero(),
                q_set: T::zero(),
                v_ref: grid.peak_phase_voltage,
                f_grid: grid.frequency,
            }),
            dt: T::lit(1e-3),
            duration: T::lit(5.0),
            controller: ControllerKind::Conventional,
            initial_state: None,
        }
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round().to_usize().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        self.line.validate()?;
        self.grid.validate()?;
        self.vsg.validate()?;
        if !(self.rated_power > T::zero()) {
            return Err(Error::Parameter("rated power must be positive".into()));
        }
        if !(self.dt > T::zero()) || !self.dt.is_finite() {
            return Err(Error::Parameter(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.duration >= T::zero()) || !self.duration.is_finite() {
            return Err(Error::Parameter(format!("duration must be non-negative, got {}", self.duration)));
        }
        if self.duration > T::zero() && self.duration < self.dt {
            return Err(Error::Parameter("duration must be at least one control cycle".into()));
        }
        if self.schedule.steps.windows(2).any(|w| w[1].time < w[0].time) {
            return Err(Error::Parameter("setpoint steps must be time-ordered".into()));
        }
        self.schedule.initial.validate(self.rated_power)?;
        for step in &self.schedule.steps {
            if !step.time.is_finite() {
                return Err(Error::Parameter("setpoint step time must be finite".into()));
            }
            if let Some(p) = step.p_set {
                if !p.is_finite() || p.abs() > self.rated_power {
                    return Err(Error::Parameter(format!("step P_set {p} outside the rating")));
                }
            }
            if let Some(q) = step.q_set {
                if !q.is_finite() {
                    return Err(Error::Parameter("step Q_set must be finite".into()));
                }
            }
        }
        Ok(())
    }

    /// Stable FNV-1a hash over every numeric field and the name.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv1a::default();
        h.bytes(self.name.as_bytes());
        let s = &self.schedule;
        let mut values = vec![
            self.line.filter_inductance,
            self.line.line_inductance,
            self.line.line_resistance,
            self.grid.peak_phase_voltage,
            self.grid.frequency,
            self.vsg.inertia,
            self.vsg.damping,
            self.vsg.ki,
            self.vsg.dv,
            self.vsg.omega_nominal,
            self.vsg.nominal_voltage,
            self.rated_power,
            s.initial.p_set,
            s.initial.q_set,
            s.initial.v_ref,
            s.initial.f_grid,
            self.dt,
            self.duration,
        ];
        for step in &s.steps {
            values.push(step.time);
            values.push(step.p_set.unwrap_or_else(T::nan));
            values.push(step.q_set.unwrap_or_else(T::nan));
        }
        if let Some(st) = &self.initial_state {
            values.extend([st.omega, st.delta, st.q_integral, st.voltage]);
        }
        for v in values {
            h.bytes(&v.to_f64_lossy().to_bits().to_le_bytes());
        }
        h.bytes(self.controller.name().as_bytes());
        h.0
    }
}

/// FNV-1a hash of `data`.
pub fn fnv1a(data: &[u8]) -> u64 {
    let mut h = Fnv1a::default();
    h.bytes(data);
    h.0
}

struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv1a {
    fn bytes(&mut self, data: &[u8]) {
        for b in data {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

/// Voltage controller driving `E` during an episode.
#[derive(Debug, Clone, PartialEq)]
pub enum Controller<T> {
    /// Integrator + droop voltage loop.
    Conventional,
    /// HDP action network; `learn` enables online critic/action updates.
    Hdp { agent: HdpController<T>, learn: bool },
}

impl<T: Real> Controller<T> {
    pub fn kind(&self) -> ControllerKind {
        match self {
            Controller::Conventional => ControllerKind::Conventional,
            Controller::Hdp { .. } => ControllerKind::Hdp,
        }
    }
}

/// One control cycle, recorded after the plant has responded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord<T> {
    pub t: T,
    /// Three-phase active power (W).
    pub p: T,
    /// Three-phase reactive power (var).
    pub q: T,
    pub omega: T,
    pub delta: T,
    pub voltage: T,
    pub utility: T,
    /// Critic estimate for the cycle (NaN for the conventional controller).
    pub cost_to_go: T,
    /// Critic TD residual (NaN for the conventional controller).
    pub td_residual: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceMeta<T> {
    pub scenario: String,
    pub scenario_hash: u64,
    pub seed: u64,
    pub controller: ControllerKind,
    pub schedule: SetpointSchedule<T>,
    pub dt: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace<T> {
    pub records: Vec<TraceRecord<T>>,
    pub meta: TraceMeta<T>,
}

pub const TRACE_HEADER: [&str; 9] = ["t", "P", "Q", "omega", "delta", "E", "U", "J", "td"];

impl<T: Real> EpisodeTrace<T> {
    pub fn mean_utility(&self) -> T {
        if self.records.is_empty() {
            return T::zero();
        }
        let sum: T = self.records.iter().map(|r| r.utility).sum();
        sum / T::from_usize(self.records.len()).expect("length fits")
    }

    /// CSV with header `t,P,Q,omega,delta,E,U,J,td`, nine significant digits.
    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(TRACE_HEADER)?;
        for r in &self.records {
            out.write_record(
                [r.t, r.p, r.q, r.omega, r.delta, r.voltage, r.utility, r.cost_to_go, r.td_residual]
                    .iter()
                    .map(|v| format_sig(v.to_f64_lossy(), 9)),
            )?;
        }
        out.flush()
    }
}

/// Reads records written by [`EpisodeTrace::write_csv`].
pub fn read_trace_csv<R: Read>(r: R) -> Result<Vec<TraceRecord<f64>>> {
    let mut reader = csv::Reader::from_reader(r);
    let header = reader
        .headers()
        .map_err(|e| Error::Parse(format!("trace header: {e}")))?
        .clone();
    if header.iter().ne(TRACE_HEADER.iter().copied()) {
        return Err(Error::Parse(format!("unexpected trace header `{}`", header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Parse(format!("trace row {}: {e}", i + 1)))?;
        let v = row
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| Error::Parse(format!("trace row {}: `{s}`: {e}", i + 1))))
            .collect::<Result<Vec<f64>>>()?;
        if v.len() != TRACE_HEADER.len() {
            return Err(Error::Parse(format!("trace row {} has {} fields", i + 1, v.len())));
        }
        records.push(TraceRecord {
            t: v[0],
            p: v[1],
            q: v[2],
            omega: v[3],
            delta: v[4],
            voltage: v[5],
            utility: v[6],
            cost_to_go: v[7],
            td_residual: v[8],
        });
    }
    Ok(records)
}

/// `%g`-style formatting with `digits` significant digits.
pub fn format_sig(x: f64, digits: usize) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -5 || exp >= digits as i32 {
        format!("{}e{exp}", trim_zeros(mantissa))
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn measure<T: Real>(state: &VsgState<T>, sc: &Scenario<T>, z: &crate::plant::Impedance<T>) -> Result<Measurement<T>> {
    let s = power_flow_exact(state.voltage, sc.grid.peak_phase_voltage, state.delta, z)?.three_phase();
    Ok(Measurement {
        p: s.p,
        q: s.q,
        frequency: state.omega / T::TAU(),
        delta: state.delta,
    })
}

/// Utility used for the conventional controller's trace: same per-unit
/// normalisation and weights as a default HDP controller.
fn reference_utility<T: Real>(sc: &Scenario<T>, meas: &Measurement<T>, sp: &Setpoints<T>) -> T {
    let e = crate::hdp::ErrorTriple::from_measurement(meas, sp);
    let normalised = crate::hdp::ErrorTriple {
        ep: e.ep / sc.rated_power,
        eq: e.eq / sc.rated_power,
        ef: e.ef / sc.grid.frequency,
    };
    crate::hdp::utility(&normalised, &UtilityWeights::default())
}

/// Runs one closed-loop episode. Per cycle: the controller sets `E`, the
/// swing equation advances `ω` and `δ`, the plant returns `(P, Q)`, and an
/// HDP controller with learning enabled then updates its critic and action
/// networks. `seed` drives the HDP exploration dither.
pub fn run_episode<T: Real>(sc: &Scenario<T>, controller: &mut Controller<T>, seed: u64) -> Result<EpisodeTrace<T>> {
    sc.validate()?;
    let n = sc.steps();
    let meta = TraceMeta {
        scenario: sc.name.clone(),
        scenario_hash: sc.fingerprint(),
        seed,
        controller: controller.kind(),
        schedule: sc.schedule.clone(),
        dt: sc.dt,
    };
    let mut records = Vec::with_capacity(n);
    if n == 0 {
        return Ok(EpisodeTrace { records, meta });
    }

    let omega_grid = sc.grid.angular_frequency();
    let z = equivalent_impedance(&sc.line, omega_grid)?;
    let e0 = sc.vsg.nominal_voltage;
    let mut state = match sc.initial_state {
        Some(s) => s,
        None => VsgState::synchronous(omega_grid, e0),
    };
    if let Controller::Conventional = controller {
        let v_ref = sc.schedule.initial.v_ref;
        state = state.with_consistent_integral(&sc.vsg, v_ref - state.voltage);
    }
    let mut meas = measure(&state, sc, &z)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dither = match controller {
        Controller::Hdp { agent, learn: true } if agent.config.exploration > T::zero() => Some(
            Normal::new(0.0, agent.config.exploration.to_f64_lossy())
                .map_err(|e| Error::Parameter(format!("exploration: {e}")))?,
        ),
        _ => None,
    };

    for k in 0..n {
        let t = T::from_usize(k).expect("step index") * sc.dt;
        let sp = sc.schedule.at(t);
        let abort = |cause: Error| Error::EpisodeAborted {
            step: k,
            cause: Box::new(cause),
        };

        // act
        let mut hdp_step = None;
        match controller {
            Controller::Conventional => {
                state = step_voltage_loop(&state, sp.q_set - meas.q, sp.v_ref - state.voltage, &sc.vsg, sc.dt)
                    .map_err(abort)?;
            }
            Controller::Hdp { agent, .. } => {
                let x_a = agent.build_action_input(&meas, &sp);
                let a = agent.action_output(&x_a).map_err(abort)?;
                let noise = dither
                    .as_ref()
                    .map(|d| T::lit(d.sample(&mut rng)))
                    .unwrap_or_else(T::zero);
                state.voltage = agent.voltage_from_output(a + noise);
                hdp_step = Some((x_a, a));
            }
        }

        // plant
        state = step_swing(&state, sp.p_set, meas.p, &sc.vsg, omega_grid, sc.dt).map_err(abort)?;
        let next = measure(&state, sc, &z).map_err(abort)?;

        // learn
        let (utility, cost_to_go, td_residual) = match (&mut *controller, hdp_step) {
            (Controller::Hdp { agent, learn }, Some((x_a, a))) => {
                let u = agent.utility_of(&next, &sp);
                let step = HdpStep { x_a, a, applied_voltage: state.voltage };
                hdp_cycle(agent, *learn, &step, &next, &sp, u).map_err(abort)?
            }
            _ => (reference_utility(sc, &next, &sp), T::nan(), T::nan()),
        };

        records.push(TraceRecord {
            t: t + sc.dt,
            p: next.p,
            q: next.q,
            omega: state.omega,
            delta: state.delta,
            voltage: state.voltage,
            utility,
            cost_to_go,
            td_residual,
        });
        meas = next;
    }
    Ok(EpisodeTrace { records, meta })
}

struct HdpStep<T> {
    x_a: [T; ACTION_INPUTS],
    /// Noise-free action output.
    a: T,
    /// Voltage actually applied, dither included.
    applied_voltage: T,
}

/// Critic and action updates for one transition. Returns `(U, J, td)`.
fn hdp_cycle<T: Real>(
    agent: &mut HdpController<T>,
    learn: bool,
    step: &HdpStep<T>,
    next: &Measurement<T>,
    sp: &Setpoints<T>,
    u: T,
) -> Result<(T, T, T)> {
    let x_a = &step.x_a;
    let x_c = agent.critic_input_for(x_a, agent.voltage_channel(step.applied_voltage));
    let x_a1 = agent.build_action_input(next, sp);
    let a1 = agent.action_output(&x_a1)?;
    let x_c1 = agent.critic_input_for(&x_a1, agent.voltage_channel(agent.voltage_from_output(a1)));
    let j = agent.critic_eval(&x_c)?;
    if !learn {
        let td = j - agent.config.gamma * agent.critic_eval(&x_c1)? - u;
        return Ok((u, j, td));
    }
    let td = agent.critic_update(&x_c, &x_c1, u)?;
    let x_policy = agent.critic_input_for(x_a, agent.voltage_channel(agent.voltage_from_output(step.a)));
    agent.action_update(x_a, &x_policy)?;
    Ok((u, j, td))
}

/// Sampling ranges for training episodes. The initial state is a
/// perturbation of the steady operating point `(E*, δ*)` that delivers the
/// episode's setpoints, with ω around the grid frequency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRanges<T> {
    /// Initial δ drawn from `δ* + [−delta, delta]` (rad).
    pub delta: T,
    /// Initial ω drawn from `ω_g·[1 − f, 1 + f]`.
    pub omega_fraction: T,
    /// Initial E drawn from `E*·[1 − f, 1 + f]`.
    pub voltage_fraction: T,
    /// P_set drawn from `[p_min, p_max]·P_rated`.
    pub p_min: T,
    pub p_max: T,
    /// Q_set drawn from `[q_min, q_max]·P_rated`.
    pub q_min: T,
    pub q_max: T,
}

impl<T: Real> Default for TrainRanges<T> {
    fn default() -> Self {
        Self {
            delta: T::lit(0.001),
            omega_fraction: T::lit(1e-4),
            voltage_fraction: T::lit(0.01),
            p_min: T::zero(),
            p_max: T::one(),
            q_min: T::lit(-0.5),
            q_max: T::lit(0.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig<T> {
    pub episodes: usize,
    pub hdp: HdpConfig<T>,
    pub weights: UtilityWeights<T>,
    pub ranges: TrainRanges<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainFailure {
    pub episode: usize,
    pub error: Error,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome<T> {
    /// Controller after the last completed episode.
    pub controller: HdpController<T>,
    /// Mean per-step utility of each completed episode.
    pub learning_curve: Vec<T>,
    pub failure: Option<TrainFailure>,
}

/// Online HDP training. Networks are initialised once from `seed`; every
/// episode then draws a scenario, a random initial state and random P/Q
/// setpoints and runs `horizon_steps` cycles with learning enabled.
pub fn train_hdp<T: Real>(scenarios: &[Scenario<T>], cfg: &TrainConfig<T>, seed: u64) -> Result<TrainOutcome<T>> {
    if scenarios.is_empty() {
        return Err(Error::Parameter("training needs at least one scenario".into()));
    }
    if cfg.episodes == 0 {
        return Err(Error::Parameter("training needs at least one episode".into()));
    }
    cfg.hdp.validate()?;
    cfg.weights.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let agent = HdpController::init_random(cfg.weights, cfg.hdp, &mut rng)?;
    train_episodes(agent, scenarios, cfg, &mut rng)
}

/// Continues online training of an existing controller; its networks and
/// configuration are kept, `cfg.hdp` and `cfg.weights` are ignored.
pub fn train_hdp_from<T: Real>(
    agent: HdpController<T>,
    scenarios: &[Scenario<T>],
    cfg: &TrainConfig<T>,
    seed: u64,
) -> Result<TrainOutcome<T>> {
    if scenarios.is_empty() {
        return Err(Error::Parameter("training needs at least one scenario".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    train_episodes(agent, scenarios, cfg, &mut rng)
}

fn train_episodes<T: Real>(
    agent: HdpController<T>,
    scenarios: &[Scenario<T>],
    cfg: &TrainConfig<T>,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutcome<T>> {
    let horizon = agent.config.horizon_steps;
    let mut controller = Controller::Hdp { agent, learn: true };
    let mut learning_curve = Vec::with_capacity(cfg.episodes);
    let mut failure = None;
    let r = cfg.ranges;
    let uniform = |rng: &mut ChaCha8Rng, lo: T, hi: T| -> T {
        let (lo, hi) = (lo.to_f64_lossy(), hi.to_f64_lossy());
        if hi > lo {
            T::lit(rng.random_range(lo..hi))
        } else {
            T::lit(lo)
        }
    };

    for episode in 0..cfg.episodes {
        let base = &scenarios[rng.random_range(0..scenarios.len())];
        let omega_grid = base.grid.angular_frequency();
        let mut sp = base.schedule.initial;
        sp.p_set = base.rated_power * uniform(rng, r.p_min, r.p_max);
        sp.q_set = base.rated_power * uniform(rng, r.q_min, r.q_max);
        let z = equivalent_impedance(&base.line, omega_grid)?;
        let three = T::lit(3.0);
        let target = PowerPair { p: sp.p_set / three, q: sp.q_set / three };
        let (e_star, delta_star) = operating_point(target, base.grid.peak_phase_voltage, &z)?;
        let initial = VsgState {
            omega: omega_grid * (T::one() + uniform(rng, -r.omega_fraction, r.omega_fraction)),
            delta: delta_star + uniform(rng, -r.delta, r.delta),
            q_integral: T::zero(),
            voltage: e_star * (T::one() + uniform(rng, -r.voltage_fraction, r.voltage_fraction)),
        };
        let episode_seed = rng.next_u64();

        let mut sc = base.clone();
        sc.schedule = SetpointSchedule::constant(sp);
        sc.duration = base.dt * T::from_usize(horizon).expect("horizon fits");
        sc.initial_state = Some(initial);
        sc.controller = ControllerKind::Hdp;

        match run_episode(&sc, &mut controller, episode_seed) {
            Ok(trace) => learning_curve.push(trace.mean_utility()),
            Err(error) => {
                failure = Some(TrainFailure { episode, error });
                break;
            }
        }
    }
    let Controller::Hdp { agent, .. } = controller else {
        unreachable!("training controller is always HDP")
    };
    Ok(TrainOutcome {
        controller: agent,
        learning_curve,
        failure,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    P,
    Q,
}

impl Channel {
    pub fn name(self) -> &'static str {
        match self {
            Channel::P => "P",
            Channel::Q => "Q",
        }
    }

    fn value<T: Real>(self, r: &TraceRecord<T>) -> T {
        match self {
            Channel::P => r.p,
            Channel::Q => r.q,
        }
    }

    fn setpoint<T: Real>(self, sp: &Setpoints<T>) -> T {
        match self {
            Channel::P => sp.p_set,
            Channel::Q => sp.q_set,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics<T> {
    /// Peak excursion beyond the final value, as a fraction of the step size.
    pub overshoot: T,
    /// Time from the step until the channel stays within ±2 % of the step
    /// size around its final value. Equals the remaining trace length when
    /// `settled` is false.
    pub settling_time: T,
    pub settled: bool,
    /// `|setpoint − mean of the last 10 % of the trace|`.
    pub steady_state_error: T,
    pub final_value: T,
    pub step_size: T,
}

pub const SETTLING_BAND: f64 = 0.02;

/// Step-response metrics of `channel` for the setpoint step at `step_time`.
pub fn step_metrics<T: Real>(trace: &EpisodeTrace<T>, channel: Channel, step_time: T) -> Result<StepMetrics<T>> {
    let records = &trace.records;
    let last = records
        .last()
        .ok_or_else(|| Error::Parameter("empty trace".into()))?;
    let schedule = &trace.meta.schedule;
    let before = channel.setpoint(&schedule.at(step_time - trace.meta.dt));
    let after = channel.setpoint(&schedule.at(last.t));
    let step_size = after - before;
    if step_size.is_zero() {
        return Err(Error::Parameter(format!(
            "trace has no {} step at t = {step_time}",
            channel.name()
        )));
    }
    let start = records
        .iter()
        .position(|r| r.t > step_time)
        .ok_or_else(|| Error::Parameter(format!("step time {step_time} is beyond the trace")))?;
    let response = &records[start..];

    let tail_len = (records.len() / 10).max(1);
    let tail_start = records.len() - tail_len;
    let tail_sum: T = records[tail_start..].iter().map(|r| channel.value(r)).sum();
    let final_value = tail_sum / T::from_usize(tail_len).expect("length fits");

    let direction = step_size.signum();
    let peak_excursion = response
        .iter()
        .map(|r| (channel.value(r) - final_value) * direction)
        .fold(T::neg_infinity(), T::max);
    let overshoot = (peak_excursion / step_size.abs()).max(T::zero());

    let band = T::lit(SETTLING_BAND) * step_size.abs();
    let last_violation = response
        .iter()
        .rposition(|r| (channel.value(r) - final_value).abs() > band);
    let (settling_time, settled) = match last_violation {
        None => (T::zero(), true),
        Some(i) if start + i + 1 < tail_start => (response[i + 1].t - step_time, true),
        Some(_) => (last.t - step_time, false),
    };

    Ok(StepMetrics {
        overshoot,
        settling_time,
        settled,
        steady_state_error: (after - final_value).abs(),
        final_value,
        step_size,
    })
}
