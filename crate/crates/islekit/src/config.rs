//! Scenario files: the TOML schema, the bundled scenario library, and
//! `key=value` overrides.
//!
//! A scenario file is self-contained: it names the network (built-in nine-bus
//! feeder by default, or an external network file), the event script, the
//! waveform templates, and every detection parameter. Tooling defaults
//! therefore live in the bundled files, not in code; the structs here only
//! carry fallbacks so partial files stay usable.
//!
//! Durations of windows tied to the fundamental are written in cycles and
//! converted against the network's base frequency when the scenario is built.

use crate::detector::{DetectorTiming, Thresholds};
use crate::ekf::EstimatorConfig;
use crate::grid::{network_from_tables, GridError, NetworkModel};
use crate::scenario::{Event, EventKind, EventScript, ScenarioError, Templates};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("could not read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("scenario file: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("override `{key}`: {message}")]
    Override { key: String, message: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("unknown bundled scenario `{0}`")]
    UnknownScenario(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

/// Parsed scenario file. Field names match the TOML keys.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub id: String,
    pub description: String,
    pub record: RecordConfig,
    pub network: NetworkConfig,
    pub events: Vec<EventConfig>,
    pub templates: Templates,
    pub estimator: EstimatorKnobs,
    pub thresholds: Thresholds,
    pub detector: DetectorKnobs,
    pub pipeline: PipelineKnobs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecordConfig {
    pub duration_s: f64,
    pub sample_rate_hz: f64,
    pub monitor_bus: usize,
    /// Noise stream identity; equal seeds reproduce records bit for bit.
    pub seed: u64,
}

impl Default for RecordConfig {
    fn default() -> Self {
        Self {
            duration_s: 0.3,
            sample_rate_hz: 7680.0,
            monitor_bus: 8,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Network file path, resolved against the scenario file's directory.
    /// Omitted: the built-in nine-bus feeder.
    pub path: Option<String>,
    /// Per-bus load replacements applied before the initial solve; these set
    /// the case's operating point without duplicating the network tables.
    pub load_overrides: Vec<LoadOverride>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadOverride {
    pub bus: usize,
    pub p_mw: f64,
    pub q_mvar: f64,
}

/// One scripted event. Fault durations are written in cycles.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EventConfig {
    Islanding {
        t: f64,
        injection: f64,
    },
    ThreePhaseFault {
        t: f64,
        bus: usize,
        dip_depth: f64,
        duration_cycles: f64,
    },
    SinglePhaseFault {
        t: f64,
        bus: usize,
        dip_depth: f64,
        duration_cycles: f64,
    },
    LoadDecrease {
        t: f64,
        bus: usize,
        retained: f64,
    },
    DgPowerShift {
        t: f64,
        dg_bus: usize,
        retained: f64,
    },
}

impl EventConfig {
    fn to_event(&self, cycle: f64) -> Event {
        match *self {
            EventConfig::Islanding { t, injection } => Event {
                t,
                kind: EventKind::Islanding { injection },
            },
            EventConfig::ThreePhaseFault {
                t,
                bus,
                dip_depth,
                duration_cycles,
            } => Event {
                t,
                kind: EventKind::ThreePhaseFault {
                    bus,
                    dip_depth,
                    duration: duration_cycles * cycle,
                },
            },
            EventConfig::SinglePhaseFault {
                t,
                bus,
                dip_depth,
                duration_cycles,
            } => Event {
                t,
                kind: EventKind::SinglePhaseFault {
                    bus,
                    dip_depth,
                    duration: duration_cycles * cycle,
                },
            },
            EventConfig::LoadDecrease { t, bus, retained } => Event {
                t,
                kind: EventKind::LoadDecrease { bus, retained },
            },
            EventConfig::DgPowerShift {
                t,
                dg_bus,
                retained,
            } => Event {
                t,
                kind: EventKind::DgPowerShift { dg_bus, retained },
            },
        }
    }
}

/// Estimator tuning exposed to scenario files. Group variances are expanded
/// to the full Q diagonal when the scenario is built.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorKnobs {
    pub measurement_noise_r: f64,
    pub process_noise_envelope: f64,
    pub process_noise_rotation: f64,
    pub process_noise_interharmonic: f64,
    pub process_noise_dc: f64,
    pub initial_covariance_p0: f64,
    pub initial_rotation_covariance: f64,
    pub dc_decay_alpha: f64,
}

impl Default for EstimatorKnobs {
    fn default() -> Self {
        let base = EstimatorConfig::default();
        Self {
            measurement_noise_r: base.measurement_noise_r,
            // Detection profile, not the metering profile the estimator
            // defaults to: the fundamental envelope needs enough bandwidth
            // to swing with a fault dip inside the two-cycle screen window.
            process_noise_envelope: 1e-4,
            process_noise_rotation: 1e-8,
            // The 75 Hz pair is only separable from a wobbling fundamental
            // over the 60/75 Hz common period (1/15 s), so any step in the
            // fundamental leaks into it for a beat or two regardless of this
            // value. Keeping the pair fast instead makes the leak release
            // within a few beats; the stage-1 debounce rides out the spike
            // and the confirmation window opens after the release.
            process_noise_interharmonic: 1e-5,
            process_noise_dc: 1e-6,
            initial_covariance_p0: base.initial_covariance_p0,
            initial_rotation_covariance: base.initial_rotation_covariance,
            dc_decay_alpha: base.dc_decay_alpha,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorKnobs {
    pub arming_time_s: f64,
    pub debounce_cycles: f64,
    pub arcv1_window_cycles: f64,
    pub settle_delay_cycles: f64,
    pub arcv2_window_cycles: f64,
    pub ack_timeout_cycles: f64,
    pub verdict_deadline_s: f64,
    pub shift_dg: usize,
    pub shift_fraction: f64,
}

impl Default for DetectorKnobs {
    fn default() -> Self {
        Self {
            arming_time_s: 0.05,
            // Half a cycle: cross-frequency leakage from amplitude steps
            // produces short 75 Hz spikes; genuine inter-harmonic content
            // holds the level well past this.
            debounce_cycles: 0.5,
            arcv1_window_cycles: 2.0,
            // Four cycles: a grid-connected shift both settles the voltage
            // and lets the estimator purge the shift's own 75 Hz leak
            // before the confirmation window opens. An islanded bus is
            // still drifting at that point, so the margin survives.
            settle_delay_cycles: 4.0,
            arcv2_window_cycles: 2.0,
            ack_timeout_cycles: 2.0,
            verdict_deadline_s: 2.0,
            shift_dg: 8,
            shift_fraction: 0.12,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineKnobs {
    /// Reporting scale applied to the estimated 75 Hz amplitude before the
    /// detector sees it; `a75_min` is compared on this scale.
    pub a75_scale: f64,
    /// Spacing of the detector's amplitude-track samples.
    pub rms_stride_cycles: f64,
    /// Window of the waveform-RMS artifact (CSV output only; the detector
    /// tracks the estimated fundamental amplitude instead, which carries no
    /// 60/75 Hz beat).
    pub rms_window_cycles: f64,
}

impl Default for PipelineKnobs {
    fn default() -> Self {
        Self {
            a75_scale: 100.0,
            rms_stride_cycles: 0.25,
            rms_window_cycles: 1.0,
        }
    }
}

/// Everything a pipeline run needs, resolved and validated.
#[derive(Debug, Clone)]
pub struct BuiltScenario {
    pub id: String,
    pub description: String,
    pub network: NetworkModel,
    pub script: EventScript,
    pub templates: Templates,
    pub seed: u64,
    pub ts: f64,
    pub duration: f64,
    pub monitor_bus: usize,
    pub estimator: EstimatorConfig,
    pub thresholds: Thresholds,
    pub timing: DetectorTiming,
    pub a75_scale: f64,
    pub rms_window: f64,
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    /// Parse and apply `--set key=value` style overrides on the raw TOML
    /// tree, so overrides and file keys go through identical deserialization.
    pub fn parse_with_overrides(
        text: &str,
        overrides: &[(String, String)],
    ) -> Result<Self, ConfigError> {
        if overrides.is_empty() {
            return Self::from_toml_str(text);
        }
        let mut root: toml::Value = toml::from_str(text)?;
        for (key, raw) in overrides {
            apply_override(&mut root, key, raw)?;
        }
        Ok(root.try_into()?)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_with_overrides(&text, overrides)
    }

    /// Resolve the network, convert cycle-denominated settings, and validate
    /// every component configuration. `base_dir` anchors a relative network
    /// path (normally the scenario file's directory).
    pub fn build(&self, base_dir: Option<&Path>) -> Result<BuiltScenario, ConfigError> {
        if self.id.is_empty() {
            return Err(ConfigError::Invalid("scenario id must be set".into()));
        }
        if !(self.record.sample_rate_hz > 0.0) {
            return Err(ConfigError::Invalid(format!(
                "sample_rate_hz must be positive, got {}",
                self.record.sample_rate_hz
            )));
        }
        if !(self.record.duration_s > 0.0) {
            return Err(ConfigError::Invalid(format!(
                "duration_s must be positive, got {}",
                self.record.duration_s
            )));
        }
        if !(self.pipeline.a75_scale > 0.0) {
            return Err(ConfigError::Invalid(format!(
                "a75_scale must be positive, got {}",
                self.pipeline.a75_scale
            )));
        }
        if !(self.pipeline.rms_stride_cycles > 0.0) || !(self.pipeline.rms_window_cycles > 0.0) {
            return Err(ConfigError::Invalid(
                "rms stride and window must be positive".into(),
            ));
        }

        let mut network = match &self.network.path {
            None => network_from_tables(),
            Some(p) => {
                let path = match base_dir {
                    Some(dir) if Path::new(p).is_relative() => dir.join(p),
                    _ => Path::new(p).to_path_buf(),
                };
                NetworkModel::load(&path)?
            }
        };
        for o in &self.network.load_overrides {
            network
                .set_load(o.bus, o.p_mw, o.q_mvar)
                .map_err(ConfigError::Grid)?;
        }
        network.validate()?;

        let cycle = 1.0 / network.base.f_base;
        let ts = 1.0 / self.record.sample_rate_hz;
        let script = EventScript::new(self.events.iter().map(|e| e.to_event(cycle)).collect());
        script.validate(self.record.duration_s)?;
        self.templates.validate()?;

        let k = &self.estimator;
        let estimator = EstimatorConfig {
            ts,
            nominal_f1: network.base.f_base,
            process_noise_q: EstimatorConfig::q_diagonal(
                k.process_noise_envelope,
                k.process_noise_rotation,
                k.process_noise_interharmonic,
                k.process_noise_dc,
            ),
            measurement_noise_r: k.measurement_noise_r,
            initial_covariance_p0: k.initial_covariance_p0,
            initial_rotation_covariance: k.initial_rotation_covariance,
            dc_decay_alpha: k.dc_decay_alpha,
            ..EstimatorConfig::default()
        };
        estimator
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;

        let d = &self.detector;
        let timing = DetectorTiming {
            arming_time: d.arming_time_s,
            estimate_interval: ts,
            rms_stride: self.pipeline.rms_stride_cycles * cycle,
            debounce: d.debounce_cycles * cycle,
            arcv1_window: d.arcv1_window_cycles * cycle,
            settle_delay: d.settle_delay_cycles * cycle,
            arcv2_window: d.arcv2_window_cycles * cycle,
            ack_timeout: d.ack_timeout_cycles * cycle,
            verdict_deadline: d.verdict_deadline_s,
            shift_dg_id: d.shift_dg,
            shift_fraction: d.shift_fraction,
        };
        timing
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.thresholds
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;

        Ok(BuiltScenario {
            id: self.id.clone(),
            description: self.description.clone(),
            network,
            script,
            templates: self.templates.clone(),
            seed: self.record.seed,
            ts,
            duration: self.record.duration_s,
            monitor_bus: self.record.monitor_bus,
            estimator,
            thresholds: self.thresholds,
            timing,
            a75_scale: self.pipeline.a75_scale,
            rms_window: self.pipeline.rms_window_cycles * cycle,
        })
    }
}

/// Parse an override value with TOML scalar typing; anything that does not
/// parse as a TOML scalar is kept as a string.
fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Apply one dotted-path override to a TOML tree. Numeric segments index
/// arrays (`events.0.injection`); table segments are created on demand so an
/// override can introduce a key the file omitted.
fn apply_override(root: &mut toml::Value, key: &str, raw: &str) -> Result<(), ConfigError> {
    let err = |message: String| ConfigError::Override {
        key: key.to_string(),
        message,
    };
    let segments: Vec<&str> = key.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(err("empty path segment".into()));
    }
    let mut cur = root;
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        if let Ok(idx) = seg.parse::<usize>() {
            let arr = cur
                .as_array_mut()
                .ok_or_else(|| err(format!("`{seg}` indexes a non-array")))?;
            if idx >= arr.len() {
                return Err(err(format!(
                    "index {idx} out of range (array has {} entries)",
                    arr.len()
                )));
            }
            if last {
                arr[idx] = parse_scalar(raw);
                return Ok(());
            }
            cur = &mut arr[idx];
        } else {
            let table = cur
                .as_table_mut()
                .ok_or_else(|| err(format!("`{seg}` indexes a non-table")))?;
            if last {
                table.insert(seg.to_string(), parse_scalar(raw));
                return Ok(());
            }
            cur = table
                .entry(seg.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
    }
    unreachable!("loop returns on the last segment");
}

/// The bundled scenario library: four system conditions crossed with four
/// event types, in reporting order.
pub const BUNDLED_SCENARIOS: [(&str, &str); 16] = [
    (
        "case1_islanding",
        include_str!("../scenarios/case1_islanding.toml"),
    ),
    (
        "case1_three_phase_fault",
        include_str!("../scenarios/case1_three_phase_fault.toml"),
    ),
    (
        "case1_single_phase_fault",
        include_str!("../scenarios/case1_single_phase_fault.toml"),
    ),
    (
        "case1_load_decrease",
        include_str!("../scenarios/case1_load_decrease.toml"),
    ),
    (
        "case2_islanding",
        include_str!("../scenarios/case2_islanding.toml"),
    ),
    (
        "case2_three_phase_fault",
        include_str!("../scenarios/case2_three_phase_fault.toml"),
    ),
    (
        "case2_single_phase_fault",
        include_str!("../scenarios/case2_single_phase_fault.toml"),
    ),
    (
        "case2_load_decrease",
        include_str!("../scenarios/case2_load_decrease.toml"),
    ),
    (
        "case3_islanding",
        include_str!("../scenarios/case3_islanding.toml"),
    ),
    (
        "case3_three_phase_fault",
        include_str!("../scenarios/case3_three_phase_fault.toml"),
    ),
    (
        "case3_single_phase_fault",
        include_str!("../scenarios/case3_single_phase_fault.toml"),
    ),
    (
        "case3_load_decrease",
        include_str!("../scenarios/case3_load_decrease.toml"),
    ),
    (
        "case4_islanding",
        include_str!("../scenarios/case4_islanding.toml"),
    ),
    (
        "case4_three_phase_fault",
        include_str!("../scenarios/case4_three_phase_fault.toml"),
    ),
    (
        "case4_single_phase_fault",
        include_str!("../scenarios/case4_single_phase_fault.toml"),
    ),
    (
        "case4_load_decrease",
        include_str!("../scenarios/case4_load_decrease.toml"),
    ),
];

pub fn bundled_scenario(name: &str) -> Result<&'static str, ConfigError> {
    BUNDLED_SCENARIOS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| *text)
        .ok_or_else(|| ConfigError::UnknownScenario(name.to_string()))
}

pub fn bundled_names() -> Vec<&'static str> {
    BUNDLED_SCENARIOS.iter().map(|(n, _)| *n).collect()
}
