//! Command-line front end: a flat `key = value` configuration, the `run`,
//! `train`, `compare` and `sweep` subcommands, and their artifact writers.
//!
//! Configuration is layered: built-in defaults, then the `--scenario` file,
//! then `--set` overrides and `--seed`. Scenario lists use indexed keys
//! (`scenario.<i>.<field>`, `scenario.<i>.step.<j>.<field>`); a file that
//! names any `scenario.*` key replaces the default scenario list.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::hdp::{HdpConfig, HdpController, UtilityWeights};
use crate::plant::{GridParams, LineParams};
use crate::sim::{
    fnv1a, format_sig, run_episode, step_metrics, train_hdp, Channel, Controller, ControllerKind, EpisodeTrace,
    Scenario, SetpointStep, StepMetrics, TrainConfig, TrainRanges,
};
use crate::vsg::VsgParams;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_FAILURE: i32 = 3;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CliError {
    /// Bad configuration, missing inputs or unwritable outputs.
    #[error("configuration error: {0}")]
    Config(String),
    /// Simulation or training failure.
    #[error("simulation failure: {0}")]
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Failure(_) => EXIT_FAILURE,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "vsg-hdp", version, about = "VSG inverter simulator: integrator+droop vs online HDP voltage control")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the scenario selected by `run.scenario`.
    Run(CommonArgs),
    /// Train an HDP controller and write a checkpoint.
    Train(CommonArgs),
    /// Evaluate the conventional and HDP controllers on every scenario.
    Compare(CompareArgs),
    /// Simulate every scenario in parallel.
    Sweep(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Configuration file (`key = value` lines).
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// HDP checkpoint directory (read by run/compare/sweep, written by train).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Configuration override, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint used as the baseline instead of the conventional controller.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
}

/// Parses `args`, runs the subcommand and returns the process exit code.
pub fn main_from<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("vsg-hdp: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: &Command) -> CliResult<()> {
    match command {
        Command::Run(a) => cmd_run(a),
        Command::Train(a) => cmd_train(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

// ---------------------------------------------------------------------------
// Configuration

/// Built-in configuration. Every accepted key except scenario fields appears
/// here; scenario fields are listed in [`SCENARIO_FIELDS`] and [`STEP_FIELDS`].
pub const DEFAULT_CONFIG: &str = "\
# global
seed = 0
dt = 0.001
duration = 5
rated_power = 5000
# grid: line-to-line RMS voltage (V), frequency (Hz)
grid.line_voltage = 110
grid.frequency = 60
# VSG: inertia (kg m^2), P-f droop as a fraction, voltage loop gains
vsg.inertia = 0.1
vsg.droop = 0.04
vsg.ki = 50
vsg.dv = 0.1
# E_0 as a fraction of the grid peak phase voltage
vsg.nominal_voltage_fraction = 1
# HDP controller
hdp.gamma = 0.95
hdp.alpha_critic = 0.01
hdp.alpha_action = 0.0001
hdp.horizon_steps = 1000
hdp.exploration = 0.1
hdp.td_clip = 1
# true sets gamma and both learning rates to 1
hdp.table1 = false
# input scales relative to rated power, grid frequency and E_0; angle in rad
hdp.scale.power_fraction = 1
hdp.scale.frequency_fraction = 1
hdp.scale.angle = 1
hdp.scale.voltage_fraction = 0.01
utility.kp = 1
utility.kq = 1
utility.kf = 0
# training
train.episodes = 500
train.lines = inductive
train.delta = 0.001
train.omega_fraction = 0.0001
train.voltage_fraction = 0.01
train.p_min = 0
train.p_max = 1
train.q_min = -0.5
train.q_max = 0.5
# run: scenario index and online learning for HDP scenarios
run.scenario = 0
run.learn = false
compare.learn = false
# evaluation scenarios
scenario.0.name = inductive_p_step
scenario.0.line = inductive
scenario.0.step.0.time = 0.5
scenario.0.step.0.p_set = 2000
scenario.1.name = inductive_q_step
scenario.1.line = inductive
scenario.1.step.0.time = 0.5
scenario.1.step.0.q_set = 1000
scenario.2.name = resistive_p_step
scenario.2.line = resistive
scenario.2.step.0.time = 0.5
scenario.2.step.0.p_set = 2000
scenario.3.name = resistive_q_step
scenario.3.line = resistive
scenario.3.step.0.time = 0.5
scenario.3.step.0.q_set = 1000
";

/// `scenario.<i>.<field>`: name, line preset (`inductive`/`resistive`), line
/// values overriding the preset, initial setpoints (W, var), controller.
pub const SCENARIO_FIELDS: [&str; 8] = [
    "name",
    "line",
    "filter_inductance",
    "line_inductance",
    "line_resistance",
    "p_set",
    "q_set",
    "controller",
];

/// `scenario.<i>.step.<j>.<field>`: step time (s) and new setpoints.
pub const STEP_FIELDS: [&str; 3] = ["time", "p_set", "q_set"];

#[derive(Debug, Clone, PartialEq, Eq)]
enum Origin {
    Default,
    File { path: String, line: usize },
    Override,
}

impl std::fmt::Display for Origin {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Origin::Default => write!(f, "built-in default"),
            Origin::File { path, line } => write!(f, "{path}:{line}"),
            Origin::Override => write!(f, "--set"),
        }
    }
}

#[derive(Debug, Clone)]
struct RawConfig {
    entries: BTreeMap<String, (String, Origin)>,
}

fn parse_lines(text: &str, path: &str) -> CliResult<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (n, line) in text.lines().enumerate() {
        let n = n + 1;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("{path}:{n}: expected `key = value`")))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(CliError::Config(format!("{path}:{n}: empty key")));
        }
        if !seen.insert(k.to_string()) {
            return Err(CliError::Config(format!("{path}:{n}: duplicate key `{k}`")));
        }
        out.push((k.to_string(), v.to_string(), n));
    }
    Ok(out)
}

fn default_keys() -> BTreeSet<String> {
    parse_lines(DEFAULT_CONFIG, "defaults")
        .expect("built-in configuration parses")
        .into_iter()
        .map(|(k, _, _)| k)
        .filter(|k| !k.starts_with("scenario."))
        .collect()
}

fn is_known_key(key: &str, globals: &BTreeSet<String>) -> bool {
    if globals.contains(key) {
        return true;
    }
    let parts: Vec<&str> = key.split('.').collect();
    match parts.as_slice() {
        ["scenario", i, field] => i.parse::<usize>().is_ok() && SCENARIO_FIELDS.contains(field),
        ["scenario", i, "step", j, field] => {
            i.parse::<usize>().is_ok() && j.parse::<usize>().is_ok() && STEP_FIELDS.contains(field)
        }
        _ => false,
    }
}

impl RawConfig {
    /// `file` is the configuration text with the name used in diagnostics.
    fn build(file: Option<(&str, &str)>, overrides: &[String], seed: Option<u64>) -> CliResult<Self> {
        let globals = default_keys();
        let mut entries = BTreeMap::new();
        for (k, v, _) in parse_lines(DEFAULT_CONFIG, "defaults")? {
            entries.insert(k, (v, Origin::Default));
        }
        if let Some((text, shown)) = file {
            let shown = shown.to_string();
            let lines = parse_lines(text, &shown)?;
            for (k, _, n) in &lines {
                if !is_known_key(k, &globals) {
                    return Err(CliError::Config(format!("{shown}:{n}: unknown key `{k}`")));
                }
            }
            if lines.iter().any(|(k, _, _)| k.starts_with("scenario.")) {
                entries.retain(|k, _| !k.starts_with("scenario."));
            }
            for (k, v, n) in lines {
                entries.insert(k, (v, Origin::File { path: shown.clone(), line: n }));
            }
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set `{o}`: expected key=value")))?;
            let k = k.trim();
            if !is_known_key(k, &globals) {
                return Err(CliError::Config(format!("--set: unknown key `{k}`")));
            }
            entries.insert(k.to_string(), (v.trim().to_string(), Origin::Override));
        }
        if let Some(seed) = seed {
            entries.insert("seed".into(), (seed.to_string(), Origin::Override));
        }
        Ok(Self { entries })
    }

    fn raw(&self, key: &str) -> Option<&(String, Origin)> {
        self.entries.get(key)
    }

    fn get<F: std::str::FromStr>(&self, key: &str) -> CliResult<F>
    where
        F::Err: std::fmt::Display,
    {
        let (v, origin) = self
            .raw(key)
            .ok_or_else(|| CliError::Config(format!("missing key `{key}`")))?;
        v.parse()
            .map_err(|e| CliError::Config(format!("{origin}: key `{key}` = `{v}`: {e}")))
    }

    fn get_opt<F: std::str::FromStr>(&self, key: &str) -> CliResult<Option<F>>
    where
        F::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(_) => self.get(key).map(Some),
        }
    }

    fn get_f64(&self, key: &str) -> CliResult<f64> {
        let v: f64 = self.get(key)?;
        if !v.is_finite() {
            let origin = &self.raw(key).expect("key was read").1;
            return Err(CliError::Config(format!("{origin}: key `{key}` must be finite")));
        }
        Ok(v)
    }

    fn get_f64_opt(&self, key: &str) -> CliResult<Option<f64>> {
        match self.raw(key) {
            None => Ok(None),
            Some(_) => self.get_f64(key).map(Some),
        }
    }

    fn fail(&self, key: &str, msg: impl std::fmt::Display) -> CliError {
        match self.raw(key) {
            Some((_, origin)) => CliError::Config(format!("{origin}: key `{key}`: {msg}")),
            None => CliError::Config(format!("key `{key}`: {msg}")),
        }
    }

    /// Sorted indices appearing as `<prefix><i>.…`.
    fn indices(&self, prefix: &str) -> Vec<usize> {
        let set: BTreeSet<usize> = self
            .entries
            .keys()
            .filter_map(|k| k.strip_prefix(prefix))
            .filter_map(|rest| rest.split('.').next()?.parse().ok())
            .collect();
        set.into_iter().collect()
    }
}

fn line_preset(name: &str) -> Option<LineParams<f64>> {
    match name {
        "inductive" => Some(LineParams::inductive()),
        "resistive" => Some(LineParams::resistive()),
        _ => None,
    }
}

fn parse_controller(s: &str) -> Option<ControllerKind> {
    match s {
        "conventional" => Some(ControllerKind::Conventional),
        "hdp" => Some(ControllerKind::Hdp),
        _ => None,
    }
}

/// Parameters shared by every scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalParams {
    pub dt: f64,
    pub duration: f64,
    pub rated_power: f64,
    pub line_voltage: f64,
    pub frequency: f64,
    pub inertia: f64,
    pub droop: f64,
    pub ki: f64,
    pub dv: f64,
    pub nominal_voltage_fraction: f64,
}

impl GlobalParams {
    /// Scenario with these parameters on `line`, flat start, zero setpoints.
    pub fn scenario(&self, name: &str, line: LineParams<f64>) -> Scenario<f64> {
        let mut sc = Scenario::table_defaults(name, line);
        sc.grid = GridParams::from_line_rms(self.line_voltage, self.frequency);
        let omega = sc.grid.angular_frequency();
        sc.rated_power = self.rated_power;
        sc.vsg = VsgParams {
            inertia: self.inertia,
            damping: VsgParams::damping_from_droop(self.rated_power, self.droop, omega),
            ki: self.ki,
            dv: self.dv,
            omega_nominal: omega,
            nominal_voltage: self.nominal_voltage_fraction * sc.grid.peak_phase_voltage,
        };
        sc.schedule.initial.v_ref = sc.grid.peak_phase_voltage;
        sc.schedule.initial.f_grid = sc.grid.frequency;
        sc.dt = self.dt;
        sc.duration = self.duration;
        sc
    }
}

/// One configured scenario with its line preset name.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioEntry {
    pub preset: String,
    pub scenario: Scenario<f64>,
}

/// Typed effective configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub global: GlobalParams,
    pub hdp: HdpConfig<f64>,
    pub table1: bool,
    pub hdp_fractions: [f64; 3],
    pub weights: UtilityWeights<f64>,
    pub episodes: usize,
    pub train_lines: Vec<String>,
    pub ranges: TrainRanges<f64>,
    pub run_scenario: usize,
    pub run_learn: bool,
    pub compare_learn: bool,
    pub scenarios: Vec<ScenarioEntry>,
}

impl Config {
    /// Layers defaults, the optional file, `overrides` and `seed`.
    pub fn load(scenario: Option<&Path>, overrides: &[String], seed: Option<u64>) -> CliResult<Self> {
        let raw = match scenario {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("cannot read scenario file {}: {e}", path.display())))?;
                RawConfig::build(Some((&text, &path.display().to_string())), overrides, seed)?
            }
            None => RawConfig::build(None, overrides, seed)?,
        };
        Self::from_raw(&raw)
    }

    /// Parses configuration text on top of the defaults.
    pub fn from_text(text: &str, overrides: &[String]) -> CliResult<Self> {
        Self::from_raw(&RawConfig::build(Some((text, "<text>")), overrides, None)?)
    }

    fn from_raw(raw: &RawConfig) -> CliResult<Self> {
        let global = GlobalParams {
            dt: raw.get_f64("dt")?,
            duration: raw.get_f64("duration")?,
            rated_power: raw.get_f64("rated_power")?,
            line_voltage: raw.get_f64("grid.line_voltage")?,
            frequency: raw.get_f64("grid.frequency")?,
            inertia: raw.get_f64("vsg.inertia")?,
            droop: raw.get_f64("vsg.droop")?,
            ki: raw.get_f64("vsg.ki")?,
            dv: raw.get_f64("vsg.dv")?,
            nominal_voltage_fraction: raw.get_f64("vsg.nominal_voltage_fraction")?,
        };
        if !(global.droop > 0.0) {
            return Err(raw.fail("vsg.droop", "must be positive"));
        }
        let probe = global.scenario("probe", LineParams::inductive());
        probe.validate().map_err(|e| CliError::Config(e.to_string()))?;

        let table1: bool = raw.get("hdp.table1")?;
        let e0 = probe.vsg.nominal_voltage;
        let mut hdp = HdpConfig::new(global.rated_power, global.frequency, e0);
        if table1 {
            hdp.gamma = 1.0;
            hdp.alpha_critic = 1.0;
            hdp.alpha_action = 1.0;
        } else {
            hdp.gamma = raw.get_f64("hdp.gamma")?;
            hdp.alpha_critic = raw.get_f64("hdp.alpha_critic")?;
            hdp.alpha_action = raw.get_f64("hdp.alpha_action")?;
        }
        hdp.horizon_steps = raw.get("hdp.horizon_steps")?;
        hdp.exploration = raw.get_f64("hdp.exploration")?;
        hdp.td_clip = raw.get_f64("hdp.td_clip")?;
        let hdp_fractions = [
            raw.get_f64("hdp.scale.power_fraction")?,
            raw.get_f64("hdp.scale.frequency_fraction")?,
            raw.get_f64("hdp.scale.voltage_fraction")?,
        ];
        hdp.scales.power = hdp_fractions[0] * global.rated_power;
        hdp.scales.frequency = hdp_fractions[1] * global.frequency;
        hdp.scales.angle = raw.get_f64("hdp.scale.angle")?;
        hdp.scales.voltage = hdp_fractions[2] * e0;
        hdp.validate().map_err(|e| CliError::Config(e.to_string()))?;

        let weights = UtilityWeights {
            kp: raw.get_f64("utility.kp")?,
            kq: raw.get_f64("utility.kq")?,
            kf: raw.get_f64("utility.kf")?,
        };
        weights.validate().map_err(|e| CliError::Config(e.to_string()))?;

        let episodes: usize = raw.get("train.episodes")?;
        if episodes == 0 {
            return Err(raw.fail("train.episodes", "must be at least 1"));
        }
        let lines_text: String = raw.get("train.lines")?;
        let train_lines: Vec<String> = lines_text.split(',').map(|s| s.trim().to_string()).collect();
        for l in &train_lines {
            if line_preset(l).is_none() {
                return Err(raw.fail("train.lines", format!("unknown line preset `{l}`")));
            }
        }
        let ranges = TrainRanges {
            delta: raw.get_f64("train.delta")?,
            omega_fraction: raw.get_f64("train.omega_fraction")?,
            voltage_fraction: raw.get_f64("train.voltage_fraction")?,
            p_min: raw.get_f64("train.p_min")?,
            p_max: raw.get_f64("train.p_max")?,
            q_min: raw.get_f64("train.q_min")?,
            q_max: raw.get_f64("train.q_max")?,
        };
        if [ranges.delta, ranges.omega_fraction, ranges.voltage_fraction].iter().any(|v| *v < 0.0)
            || ranges.p_min > ranges.p_max
            || ranges.q_min > ranges.q_max
        {
            return Err(CliError::Config("train ranges must be non-negative and ordered".into()));
        }

        let mut scenarios = Vec::new();
        for i in raw.indices("scenario.") {
            scenarios.push(Self::scenario_from_raw(raw, &global, i)?);
        }
        if scenarios.is_empty() {
            return Err(CliError::Config("no scenarios configured".into()));
        }
        let run_scenario: usize = raw.get("run.scenario")?;
        if run_scenario >= scenarios.len() {
            return Err(raw.fail("run.scenario", format!("only {} scenarios configured", scenarios.len())));
        }

        Ok(Self {
            seed: raw.get("seed")?,
            global,
            hdp,
            table1,
            hdp_fractions,
            weights,
            episodes,
            train_lines,
            ranges,
            run_scenario,
            run_learn: raw.get("run.learn")?,
            compare_learn: raw.get("compare.learn")?,
            scenarios,
        })
    }

    fn scenario_from_raw(raw: &RawConfig, global: &GlobalParams, i: usize) -> CliResult<ScenarioEntry> {
        let key = |f: &str| format!("scenario.{i}.{f}");
        let preset: String = raw
            .get_opt(&key("line"))?
            .ok_or_else(|| CliError::Config(format!("scenario.{i} has no `line`")))?;
        let mut line = line_preset(&preset).ok_or_else(|| {
            raw.fail(&key("line"), format!("unknown preset `{preset}` (inductive or resistive)"))
        })?;
        if let Some(v) = raw.get_f64_opt(&key("filter_inductance"))? {
            line.filter_inductance = v;
        }
        if let Some(v) = raw.get_f64_opt(&key("line_inductance"))? {
            line.line_inductance = v;
        }
        if let Some(v) = raw.get_f64_opt(&key("line_resistance"))? {
            line.line_resistance = v;
        }
        let name: String = raw.get_opt(&key("name"))?.unwrap_or_else(|| format!("scenario{i}"));
        if name.is_empty() || name.contains(|c: char| matches!(c, ',' | '/' | '#' | '=') || c.is_whitespace()) {
            return Err(raw.fail(&key("name"), "must be non-empty without spaces or any of , / # ="));
        }
        let mut sc = global.scenario(&name, line);
        sc.schedule.initial.p_set = raw.get_f64_opt(&key("p_set"))?.unwrap_or(0.0);
        sc.schedule.initial.q_set = raw.get_f64_opt(&key("q_set"))?.unwrap_or(0.0);
        if let Some(c) = raw.get_opt::<String>(&key("controller"))? {
            sc.controller = parse_controller(&c)
                .ok_or_else(|| raw.fail(&key("controller"), "expected conventional or hdp"))?;
        }
        for j in raw.indices(&format!("scenario.{i}.step.")) {
            let sk = |f: &str| format!("scenario.{i}.step.{j}.{f}");
            let time = raw
                .get_f64_opt(&sk("time"))?
                .ok_or_else(|| CliError::Config(format!("scenario.{i}.step.{j} has no `time`")))?;
            let step = SetpointStep {
                time,
                p_set: raw.get_f64_opt(&sk("p_set"))?,
                q_set: raw.get_f64_opt(&sk("q_set"))?,
            };
            if step.p_set.is_none() && step.q_set.is_none() {
                return Err(CliError::Config(format!("scenario.{i}.step.{j} changes no setpoint")));
            }
            sc.schedule.steps.push(step);
        }
        sc.validate()
            .map_err(|e| CliError::Config(format!("scenario.{i} ({name}): {e}")))?;
        Ok(ScenarioEntry { preset, scenario: sc })
    }

    /// Effective configuration as `key = value` lines; parses back to `self`.
    pub fn dump(&self) -> String {
        let g = &self.global;
        let h = &self.hdp;
        let r = &self.ranges;
        let w = &self.weights;
        let f = |v: f64| format!("{v}");
        let mut kv: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("dt".into(), f(g.dt)),
            ("duration".into(), f(g.duration)),
            ("rated_power".into(), f(g.rated_power)),
            ("grid.line_voltage".into(), f(g.line_voltage)),
            ("grid.frequency".into(), f(g.frequency)),
            ("vsg.inertia".into(), f(g.inertia)),
            ("vsg.droop".into(), f(g.droop)),
            ("vsg.ki".into(), f(g.ki)),
            ("vsg.dv".into(), f(g.dv)),
            ("vsg.nominal_voltage_fraction".into(), f(g.nominal_voltage_fraction)),
            ("hdp.gamma".into(), f(h.gamma)),
            ("hdp.alpha_critic".into(), f(h.alpha_critic)),
            ("hdp.alpha_action".into(), f(h.alpha_action)),
            ("hdp.horizon_steps".into(), h.horizon_steps.to_string()),
            ("hdp.exploration".into(), f(h.exploration)),
            ("hdp.td_clip".into(), f(h.td_clip)),
            ("hdp.table1".into(), self.table1.to_string()),
            ("hdp.scale.power_fraction".into(), f(self.hdp_fractions[0])),
            ("hdp.scale.frequency_fraction".into(), f(self.hdp_fractions[1])),
            ("hdp.scale.angle".into(), f(h.scales.angle)),
            ("hdp.scale.voltage_fraction".into(), f(self.hdp_fractions[2])),
            ("utility.kp".into(), f(w.kp)),
            ("utility.kq".into(), f(w.kq)),
            ("utility.kf".into(), f(w.kf)),
            ("train.episodes".into(), self.episodes.to_string()),
            ("train.lines".into(), self.train_lines.join(",")),
            ("train.delta".into(), f(r.delta)),
            ("train.omega_fraction".into(), f(r.omega_fraction)),
            ("train.voltage_fraction".into(), f(r.voltage_fraction)),
            ("train.p_min".into(), f(r.p_min)),
            ("train.p_max".into(), f(r.p_max)),
            ("train.q_min".into(), f(r.q_min)),
            ("train.q_max".into(), f(r.q_max)),
            ("run.scenario".into(), self.run_scenario.to_string()),
            ("run.learn".into(), self.run_learn.to_string()),
            ("compare.learn".into(), self.compare_learn.to_string()),
        ];
        for (i, e) in self.scenarios.iter().enumerate() {
            let sc = &e.scenario;
            let k = |s: &str| format!("scenario.{i}.{s}");
            kv.push((k("name"), sc.name.clone()));
            kv.push((k("line"), e.preset.clone()));
            kv.push((k("filter_inductance"), f(sc.line.filter_inductance)));
            kv.push((k("line_inductance"), f(sc.line.line_inductance)));
            kv.push((k("line_resistance"), f(sc.line.line_resistance)));
            kv.push((k("p_set"), f(sc.schedule.initial.p_set)));
            kv.push((k("q_set"), f(sc.schedule.initial.q_set)));
            kv.push((k("controller"), sc.controller.name().to_string()));
            for (j, st) in sc.schedule.steps.iter().enumerate() {
                kv.push((k(&format!("step.{j}.time")), f(st.time)));
                if let Some(p) = st.p_set {
                    kv.push((k(&format!("step.{j}.p_set")), f(p)));
                }
                if let Some(q) = st.q_set {
                    kv.push((k(&format!("step.{j}.q_set")), f(q)));
                }
            }
        }
        let mut out = String::new();
        for (k, v) in kv {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// FNV-1a hash of [`Config::dump`].
    pub fn hash(&self) -> u64 {
        fnv1a(self.dump().as_bytes())
    }

    /// One flat-start scenario per `train.lines` preset.
    pub fn training_scenarios(&self) -> Vec<Scenario<f64>> {
        self.train_lines
            .iter()
            .map(|l| self.global.scenario(l, line_preset(l).expect("validated preset")))
            .collect()
    }

    pub fn train_config(&self) -> TrainConfig<f64> {
        TrainConfig {
            episodes: self.episodes,
            hdp: self.hdp,
            weights: self.weights,
            ranges: self.ranges,
        }
    }
}

// ---------------------------------------------------------------------------
// Artifacts

fn prepare_out(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_trace(path: &Path, trace: &EpisodeTrace<f64>) -> CliResult<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    trace.write_csv(BufWriter::new(file)).map_err(|e| io_err(path, e))
}

/// Run manifest: version, command, seed and config hash as comments, then
/// the effective configuration.
pub fn manifest_text(command: &str, cfg: &Config, checkpoint: Option<&Path>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# vsg-hdp {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(out, "# command = {command}");
    let _ = writeln!(out, "# seed = {}", cfg.seed);
    let _ = writeln!(out, "# config_hash = {:016x}", cfg.hash());
    if let Some(c) = checkpoint {
        let _ = writeln!(out, "# checkpoint = {}", c.display());
    }
    out.push_str(&cfg.dump());
    out
}

fn load_agent(path: Option<&Path>) -> CliResult<HdpController<f64>> {
    let path = path.ok_or_else(|| {
        CliError::Config("an HDP controller needs --checkpoint <dir> from a previous `train`".into())
    })?;
    HdpController::load_checkpoint(path)
        .map_err(|e| CliError::Config(format!("cannot load checkpoint {}: {e}", path.display())))
}

fn controller_for(kind: ControllerKind, agent: Option<&HdpController<f64>>, learn: bool) -> CliResult<Controller<f64>> {
    match kind {
        ControllerKind::Conventional => Ok(Controller::Conventional),
        ControllerKind::Hdp => {
            let agent = agent.ok_or_else(|| {
                CliError::Config("an HDP scenario needs --checkpoint <dir> from a previous `train`".into())
            })?;
            Ok(Controller::Hdp { agent: agent.clone(), learn })
        }
    }
}

fn simulate(sc: &Scenario<f64>, controller: &mut Controller<f64>, seed: u64) -> CliResult<EpisodeTrace<f64>> {
    run_episode(sc, controller, seed)
        .map_err(|e| CliError::Failure(format!("scenario `{}` ({}): {e}", sc.name, controller.kind().name())))
}

/// Channels stepped by the first setpoint step, with its time.
pub fn stepped_channels(sc: &Scenario<f64>) -> Option<(f64, Vec<Channel>)> {
    let step = sc.schedule.steps.first()?;
    let mut chans = Vec::new();
    if step.p_set.is_some_and(|p| p != sc.schedule.initial.p_set) {
        chans.push(Channel::P);
    }
    if step.q_set.is_some_and(|q| q != sc.schedule.initial.q_set) {
        chans.push(Channel::Q);
    }
    Some((step.time, chans))
}

fn trace_metrics(sc: &Scenario<f64>, trace: &EpisodeTrace<f64>) -> CliResult<Vec<(Channel, StepMetrics<f64>)>> {
    let Some((time, chans)) = stepped_channels(sc) else {
        return Ok(Vec::new());
    };
    chans
        .into_iter()
        .map(|c| {
            step_metrics(trace, c, time)
                .map(|m| (c, m))
                .map_err(|e| CliError::Failure(format!("scenario `{}`: {e}", sc.name)))
        })
        .collect()
}

fn metrics_text(sc: &Scenario<f64>, trace: &EpisodeTrace<f64>, metrics: &[(Channel, StepMetrics<f64>)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "scenario = {}", sc.name);
    let _ = writeln!(out, "controller = {}", trace.meta.controller.name());
    let _ = writeln!(out, "rows = {}", trace.records.len());
    let _ = writeln!(out, "mean_utility = {}", format_sig(trace.mean_utility(), 9));
    if let Some(last) = trace.records.last() {
        let _ = writeln!(out, "final_p = {}", format_sig(last.p, 9));
        let _ = writeln!(out, "final_q = {}", format_sig(last.q, 9));
    }
    for (c, m) in metrics {
        let n = c.name();
        let _ = writeln!(out, "{n}.overshoot = {}", format_sig(m.overshoot, 9));
        let _ = writeln!(out, "{n}.settling_time = {}", format_sig(m.settling_time, 9));
        let _ = writeln!(out, "{n}.settled = {}", m.settled);
        let _ = writeln!(out, "{n}.steady_state_error = {}", format_sig(m.steady_state_error, 9));
    }
    out
}

// ---------------------------------------------------------------------------
// Subcommands

pub fn cmd_run(args: &CommonArgs) -> CliResult<()> {
    let cfg = Config::load(args.scenario.as_deref(), &args.overrides, args.seed)?;
    let sc = &cfg.scenarios[cfg.run_scenario].scenario;
    let agent = match sc.controller {
        ControllerKind::Hdp => Some(load_agent(args.checkpoint.as_deref())?),
        ControllerKind::Conventional => None,
    };
    prepare_out(&args.out)?;
    write_text(&args.out.join("manifest.txt"), &manifest_text("run", &cfg, args.checkpoint.as_deref()))?;
    let mut controller = controller_for(sc.controller, agent.as_ref(), cfg.run_learn)?;
    let trace = simulate(sc, &mut controller, cfg.seed)?;
    write_trace(&args.out.join("trace.csv"), &trace)?;
    let metrics = trace_metrics(sc, &trace)?;
    write_text(&args.out.join("metrics.txt"), &metrics_text(sc, &trace, &metrics))?;
    println!("run: {} ({}) {} rows -> {}", sc.name, sc.controller.name(), trace.records.len(), args.out.display());
    Ok(())
}

pub fn cmd_train(args: &CommonArgs) -> CliResult<()> {
    let cfg = Config::load(args.scenario.as_deref(), &args.overrides, args.seed)?;
    prepare_out(&args.out)?;
    let checkpoint = args.checkpoint.clone().unwrap_or_else(|| args.out.join("checkpoint"));
    write_text(&args.out.join("manifest.txt"), &manifest_text("train", &cfg, Some(&checkpoint)))?;
    let outcome = train_hdp(&cfg.training_scenarios(), &cfg.train_config(), cfg.seed)
        .map_err(|e| CliError::Failure(format!("training could not start: {e}")))?;

    let mut curve = String::from("episode,mean_utility\n");
    for (i, u) in outcome.learning_curve.iter().enumerate() {
        let _ = writeln!(curve, "{i},{}", format_sig(*u, 9));
    }
    write_text(&args.out.join("learning_curve.csv"), &curve)?;
    outcome
        .controller
        .save_checkpoint(&checkpoint)
        .map_err(|e| io_err(&checkpoint, e))?;
    if let Some(f) = outcome.failure {
        return Err(CliError::Failure(format!(
            "training diverged in episode {}: {}; partial checkpoint written to {}",
            f.episode,
            f.error,
            checkpoint.display()
        )));
    }
    println!(
        "train: {} episodes -> {}",
        outcome.learning_curve.len(),
        checkpoint.display()
    );
    Ok(())
}

/// One metric of one channel evaluated for both controllers.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub scenario: String,
    pub channel: Channel,
    pub metric: &'static str,
    pub baseline: f64,
    pub candidate: f64,
    pub winner: &'static str,
}

impl CompareRow {
    pub fn delta(&self) -> f64 {
        self.candidate - self.baseline
    }
}

/// Side-by-side step metrics of two controllers on identical scenarios.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub baseline: String,
    pub candidate: String,
    pub rows: Vec<CompareRow>,
}

fn compare_rows(scenario: &str, channel: Channel, b: &StepMetrics<f64>, c: &StepMetrics<f64>) -> Vec<CompareRow> {
    let lower = |x: f64, y: f64| {
        if x == y {
            "tie"
        } else if x < y {
            "baseline"
        } else {
            "candidate"
        }
    };
    let settle = |m: &StepMetrics<f64>| if m.settled { m.settling_time } else { f64::INFINITY };
    let flag = |m: &StepMetrics<f64>| if m.settled { 1.0 } else { 0.0 };
    let row = |metric, baseline, candidate, winner| CompareRow {
        scenario: scenario.to_string(),
        channel,
        metric,
        baseline,
        candidate,
        winner,
    };
    vec![
        row("overshoot", b.overshoot, c.overshoot, lower(b.overshoot, c.overshoot)),
        row("settling_time", b.settling_time, c.settling_time, lower(settle(b), settle(c))),
        row("settled", flag(b), flag(c), lower(-flag(b), -flag(c))),
        row(
            "steady_state_error",
            b.steady_state_error,
            c.steady_state_error,
            lower(b.steady_state_error, c.steady_state_error),
        ),
    ]
}

impl CompareReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario,channel,metric,baseline,candidate,delta,winner\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.scenario,
                r.channel.name(),
                r.metric,
                format_sig(r.baseline, 9),
                format_sig(r.candidate, 9),
                format_sig(r.delta(), 9),
                r.winner
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "baseline:  {}", self.baseline);
        let _ = writeln!(out, "candidate: {}", self.candidate);
        let _ = writeln!(
            out,
            "{:<20} {:<3} {:<19} {:>14} {:>14} {:>14}  winner",
            "scenario", "ch", "metric", "baseline", "candidate", "delta"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<20} {:<3} {:<19} {:>14} {:>14} {:>14}  {}",
                r.scenario,
                r.channel.name(),
                r.metric,
                format_sig(r.baseline, 6),
                format_sig(r.candidate, 6),
                format_sig(r.delta(), 6),
                r.winner
            );
        }
        out
    }

    /// Reads a report written by [`CompareReport::to_csv`].
    pub fn rows_from_csv(text: &str) -> CliResult<Vec<CompareRow>> {
        let bad = |n: usize, what: &str| CliError::Config(format!("compare csv line {}: {what}", n + 1));
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad(n, "expected 7 fields"));
            }
            let channel = match f[1] {
                "P" => Channel::P,
                "Q" => Channel::Q,
                _ => return Err(bad(n, "unknown channel")),
            };
            let metric = ["overshoot", "settling_time", "settled", "steady_state_error"]
                .into_iter()
                .find(|m| *m == f[2])
                .ok_or_else(|| bad(n, "unknown metric"))?;
            let winner = ["baseline", "candidate", "tie"]
                .into_iter()
                .find(|w| *w == f[6])
                .ok_or_else(|| bad(n, "unknown winner"))?;
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(n, "bad number"));
            rows.push(CompareRow {
                scenario: f[0].to_string(),
                channel,
                metric,
                baseline: num(f[3])?,
                candidate: num(f[4])?,
                winner,
            });
        }
        Ok(rows)
    }
}

/// Evaluates `baseline` and `candidate` on every scenario with a setpoint
/// step and writes both traces under `trace_dir` when given.
pub fn compare_controllers(
    cfg: &Config,
    baseline: (&str, &Controller<f64>),
    candidate: (&str, &Controller<f64>),
    trace_dir: Option<&Path>,
) -> CliResult<CompareReport> {
    let mut rows = Vec::new();
    for e in &cfg.scenarios {
        let sc = &e.scenario;
        if stepped_channels(sc).is_none_or(|(_, c)| c.is_empty()) {
            continue;
        }
        let mut results = Vec::new();
        for (label, ctl) in [baseline, candidate] {
            let mut ctl = ctl.clone();
            let trace = simulate(sc, &mut ctl, cfg.seed)?;
            if let Some(dir) = trace_dir {
                write_trace(&dir.join(format!("{}.{label}.csv", sc.name)), &trace)?;
            }
            results.push(trace_metrics(sc, &trace)?);
        }
        for ((channel, b), (_, c)) in results[0].iter().zip(&results[1]) {
            rows.extend(compare_rows(&sc.name, *channel, b, c));
        }
    }
    if rows.is_empty() {
        return Err(CliError::Config("no scenario contains a setpoint step to compare".into()));
    }
    Ok(CompareReport {
        baseline: baseline.0.to_string(),
        candidate: candidate.0.to_string(),
        rows,
    })
}

pub fn cmd_compare(args: &CompareArgs) -> CliResult<()> {
    let common = &args.common;
    let cfg = Config::load(common.scenario.as_deref(), &common.overrides, common.seed)?;
    let agent = load_agent(common.checkpoint.as_deref())?;
    let candidate = Controller::Hdp { agent, learn: cfg.compare_learn };
    let baseline = match &args.baseline {
        Some(p) => Controller::Hdp { agent: load_agent(Some(p))?, learn: cfg.compare_learn },
        None => Controller::Conventional,
    };
    let base_label = if args.baseline.is_some() { "baseline_hdp" } else { "conventional" };
    prepare_out(&common.out)?;
    write_text(&common.out.join("manifest.txt"), &manifest_text("compare", &cfg, common.checkpoint.as_deref()))?;
    let trace_dir = common.out.join("traces");
    prepare_out(&trace_dir)?;
    let report = compare_controllers(&cfg, (base_label, &baseline), ("hdp", &candidate), Some(&trace_dir))?;
    write_text(&common.out.join("compare.csv"), &report.to_csv())?;
    let text = report.to_text();
    write_text(&common.out.join("compare.txt"), &text)?;
    print!("{text}");
    Ok(())
}

pub fn cmd_sweep(args: &CommonArgs) -> CliResult<()> {
    let cfg = Config::load(args.scenario.as_deref(), &args.overrides, args.seed)?;
    let needs_agent = cfg.scenarios.iter().any(|e| e.scenario.controller == ControllerKind::Hdp);
    let agent = if needs_agent { Some(load_agent(args.checkpoint.as_deref())?) } else { None };
    prepare_out(&args.out)?;
    write_text(&args.out.join("manifest.txt"), &manifest_text("sweep", &cfg, args.checkpoint.as_deref()))?;
    let trace_dir = args.out.join("traces");
    prepare_out(&trace_dir)?;

    let results: Vec<CliResult<String>> = cfg
        .scenarios
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let sc = &e.scenario;
            let mut ctl = controller_for(sc.controller, agent.as_ref(), cfg.run_learn)?;
            let trace = simulate(sc, &mut ctl, cfg.seed)?;
            write_trace(&trace_dir.join(format!("{i}_{}.csv", sc.name)), &trace)?;
            let mut row = String::new();
            let metrics = trace_metrics(sc, &trace)?;
            let base = format!(
                "{i},{},{},{}",
                sc.name,
                sc.controller.name(),
                format_sig(trace.mean_utility(), 9)
            );
            if metrics.is_empty() {
                let _ = writeln!(row, "{base},,,,,");
            }
            for (c, m) in metrics {
                let _ = writeln!(
                    row,
                    "{base},{},{},{},{},{}",
                    c.name(),
                    format_sig(m.overshoot, 9),
                    format_sig(m.settling_time, 9),
                    m.settled,
                    format_sig(m.steady_state_error, 9)
                );
            }
            Ok(row)
        })
        .collect();

    let mut csv = String::from("index,scenario,controller,mean_utility,channel,overshoot,settling_time,settled,steady_state_error\n");
    for r in results {
        csv.push_str(&r?);
    }
    write_text(&args.out.join("sweep.csv"), &csv)?;
    println!("sweep: {} scenarios -> {}", cfg.scenarios.len(), args.out.display());
    Ok(())
}
