//! Scripted event scenarios over the feeder model.
//!
//! The engine evolves a quasi-static phasor picture: every scripted event
//! mutates the network and triggers a fresh power-flow solve, and the
//! monitored bus voltage relaxes exponentially toward each new operating
//! point. On top of that phasor trajectory sit spectral event templates:
//! islands inject a persistent 75 Hz component and a voltage drift
//! proportional to the island's active-power deficiency; faults impose a
//! fast dip with a decaying 75 Hz ring; load steps are plain re-solves.
//! Templates are calibrated to reproduce decision-relevant behavior, not
//! electromagnetic transients.
//!
//! One waveform sample is produced per call to [`ScenarioEngine::step`], so
//! a closed-loop caller can interleave estimation, detection, and power
//! shift actuation at sample resolution.

use crate::grid::{solve_power_flow, GridError, NetworkModel};
use crate::signal::{NoiseSource, SampledSignal};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::f64::consts::TAU;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid script: {0}")]
    InvalidScript(String),
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EventKind {
    /// Open the breaker. The feeder keeps running on its DGs; the scripted
    /// injection is the steady 75 Hz amplitude that appears at the monitored
    /// bus once the grid no longer sinks it.
    Islanding { injection: f64 },
    /// Bolted three-phase fault near `bus`: deep dip on the monitored
    /// channel plus a decaying 75 Hz ring, cleared after `duration`.
    ThreePhaseFault {
        bus: usize,
        dip_depth: f64,
        duration: f64,
    },
    /// Single-phase fault: shallower dip on the monitored channel and only
    /// a trace of 75 Hz content.
    SinglePhaseFault {
        bus: usize,
        dip_depth: f64,
        duration: f64,
    },
    /// Scale the load at `bus` to `retained` of its current value.
    LoadDecrease { bus: usize, retained: f64 },
    /// Scale the DG at `dg_bus` to `retained` of its current active power.
    DgPowerShift { dg_bus: usize, retained: f64 },
}

impl EventKind {
    pub fn label(&self) -> &'static str {
        match self {
            EventKind::Islanding { .. } => "islanding",
            EventKind::ThreePhaseFault { .. } => "three_phase_fault",
            EventKind::SinglePhaseFault { .. } => "single_phase_fault",
            EventKind::LoadDecrease { .. } => "load_decrease",
            EventKind::DgPowerShift { .. } => "dg_power_shift",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub t: f64,
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EventScript {
    pub events: Vec<Event>,
}

impl EventScript {
    pub fn new(mut events: Vec<Event>) -> Self {
        events.sort_by(|a, b| a.t.total_cmp(&b.t));
        Self { events }
    }

    pub fn validate(&self, duration: f64) -> Result<(), ScenarioError> {
        let err = |msg: String| Err(ScenarioError::InvalidScript(msg));
        let mut islands = 0;
        let mut prev = f64::NEG_INFINITY;
        for e in &self.events {
            if !(e.t >= 0.0 && e.t < duration) {
                return err(format!(
                    "event at t = {} outside the record [0, {duration})",
                    e.t
                ));
            }
            if e.t < prev {
                return err("events must be time-ordered".into());
            }
            prev = e.t;
            match e.kind {
                EventKind::Islanding { injection } => {
                    islands += 1;
                    if injection < 0.0 {
                        return err(format!("negative island injection {injection}"));
                    }
                }
                EventKind::ThreePhaseFault {
                    dip_depth,
                    duration: d,
                    ..
                }
                | EventKind::SinglePhaseFault {
                    dip_depth,
                    duration: d,
                    ..
                } => {
                    if !(dip_depth > 0.0 && dip_depth <= 1.0) {
                        return err(format!("fault dip depth {dip_depth} outside (0, 1]"));
                    }
                    if !(d > 0.0) {
                        return err(format!("fault duration {d} must be positive"));
                    }
                }
                EventKind::LoadDecrease { retained, .. } => {
                    if !(0.0..1.0).contains(&retained) {
                        return err(format!("load retained fraction {retained} outside [0, 1)"));
                    }
                }
                EventKind::DgPowerShift { retained, .. } => {
                    if !(retained > 0.0 && retained <= 1.0) {
                        return err(format!("shift retained fraction {retained} outside (0, 1]"));
                    }
                }
            }
        }
        if islands > 1 {
            return err("at most one island-forming event per scenario".into());
        }
        Ok(())
    }
}

/// Calibrated dynamic parameters of the event templates. Times in seconds,
/// amplitudes in per-unit of the nominal waveform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Templates {
    /// Relaxation of the monitored phasor toward each new solved operating
    /// point.
    pub relax_tau_s: f64,
    /// Island voltage sag per pu of active-power deficiency.
    pub island_drift_gain: f64,
    /// Time constant of the island drift.
    pub island_drift_tau_s: f64,
    /// Ramp-in of the island 75 Hz injection.
    pub island_injection_tau_s: f64,
    /// 75 Hz ring amplitude at three-phase fault inception.
    pub fault_ring_amplitude: f64,
    /// Decay of the fault ring.
    pub fault_ring_tau_s: f64,
    /// Fraction of the ring used by single-phase faults.
    pub single_phase_ring_scale: f64,
    /// Dip onset time constant.
    pub fault_dip_tau_s: f64,
    /// Post-clear recovery time constant.
    pub fault_recovery_tau_s: f64,
    /// Standing 75 Hz floor while grid-connected.
    pub background_interharmonic: f64,
    /// Additive Gaussian noise sigma on the waveform.
    pub noise_sigma: f64,
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            relax_tau_s: 0.05,
            island_drift_gain: 0.45,
            island_drift_tau_s: 0.08,
            island_injection_tau_s: 0.005,
            fault_ring_amplitude: 0.05,
            fault_ring_tau_s: 0.02,
            single_phase_ring_scale: 0.01,
            fault_dip_tau_s: 0.002,
            fault_recovery_tau_s: 0.008,
            background_interharmonic: 0.0005,
            noise_sigma: 0.003,
        }
    }
}

impl Templates {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let taus = [
            ("relax_tau_s", self.relax_tau_s),
            ("island_drift_tau_s", self.island_drift_tau_s),
            ("island_injection_tau_s", self.island_injection_tau_s),
            ("fault_ring_tau_s", self.fault_ring_tau_s),
            ("fault_dip_tau_s", self.fault_dip_tau_s),
            ("fault_recovery_tau_s", self.fault_recovery_tau_s),
        ];
        for (name, v) in taus {
            if !(v > 0.0) {
                return Err(ScenarioError::InvalidTemplate(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        let nonneg = [
            ("island_drift_gain", self.island_drift_gain),
            ("fault_ring_amplitude", self.fault_ring_amplitude),
            ("single_phase_ring_scale", self.single_phase_ring_scale),
            ("background_interharmonic", self.background_interharmonic),
            ("noise_sigma", self.noise_sigma),
        ];
        for (name, v) in nonneg {
            if v < 0.0 {
                return Err(ScenarioError::InvalidTemplate(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftAck {
    pub dg_bus: usize,
    pub fraction: f64,
    pub commanded_t: f64,
    pub effective_t: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventLogEntry {
    pub t: f64,
    pub message: String,
}

/// Per-bus phasor snapshot taken at each re-solve.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub t: f64,
    pub label: String,
    pub bus_ids: Vec<usize>,
    pub v: Vec<C64>,
}

#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub waveform: SampledSignal,
    pub snapshots: Vec<Snapshot>,
    pub log: Vec<EventLogEntry>,
    pub collapsed: bool,
    pub islanded: bool,
}

pub struct ScenarioEngine {
    net: NetworkModel,
    events: Vec<Event>,
    next_event: usize,
    templates: Templates,
    monitor_bus: usize,
    ts: f64,
    n_samples: usize,
    k: usize,
    // phasor dynamics
    v_solved: C64,
    v_now: C64,
    sag_now: f64,
    sag_target: f64,
    dip_now: f64,
    dip_target: f64,
    dip_tau: f64,
    inj_now: f64,
    inj_target: f64,
    ring_amp: f64,
    ring_t0: f64,
    fault_clear_t: Option<f64>,
    islanded: bool,
    collapsed: bool,
    shifted_dgs: BTreeSet<usize>,
    noise: NoiseSource,
    log: Vec<EventLogEntry>,
    snapshots: Vec<Snapshot>,
}

impl ScenarioEngine {
    pub fn new(
        net: NetworkModel,
        script: EventScript,
        monitor_bus: usize,
        ts: f64,
        duration: f64,
        templates: Templates,
        seed: u64,
    ) -> Result<Self, ScenarioError> {
        if !(ts > 0.0) {
            return Err(ScenarioError::InvalidScript(format!(
                "sampling interval must be positive, got {ts}"
            )));
        }
        if !(duration >= ts) {
            return Err(ScenarioError::InvalidScript(format!(
                "duration {duration} shorter than one sample"
            )));
        }
        script.validate(duration)?;
        templates.validate()?;
        net.validate()?;
        if net.bus(monitor_bus).is_none() {
            return Err(ScenarioError::Grid(GridError::UnknownBus(monitor_bus)));
        }
        if monitor_bus == net.grid_bus {
            return Err(ScenarioError::InvalidScript(
                "monitored bus must be on the feeder side of the breaker".into(),
            ));
        }
        let sol = solve_power_flow(&net)?;
        let v0 = sol
            .voltage(monitor_bus)
            .ok_or(GridError::UnknownBus(monitor_bus))?;
        let noise = NoiseSource::new(seed, templates.noise_sigma);
        let mut engine = Self {
            net,
            events: script.events,
            next_event: 0,
            templates,
            monitor_bus,
            ts,
            n_samples: (duration / ts).round() as usize,
            k: 0,
            v_solved: v0,
            v_now: v0,
            sag_now: 1.0,
            sag_target: 1.0,
            dip_now: 1.0,
            dip_target: 1.0,
            dip_tau: 0.002,
            inj_now: 0.0,
            inj_target: 0.0,
            ring_amp: 0.0,
            ring_t0: 0.0,
            fault_clear_t: None,
            islanded: false,
            collapsed: false,
            shifted_dgs: BTreeSet::new(),
            noise,
            log: Vec::new(),
            snapshots: Vec::new(),
        };
        engine.dip_tau = engine.templates.fault_dip_tau_s;
        engine.snapshot(0.0, "initial", &sol);
        Ok(engine)
    }

    pub fn time(&self) -> f64 {
        self.k as f64 * self.ts
    }

    pub fn sample_interval(&self) -> f64 {
        self.ts
    }

    pub fn is_islanded(&self) -> bool {
        self.islanded
    }

    pub fn collapsed(&self) -> bool {
        self.collapsed
    }

    pub fn network(&self) -> &NetworkModel {
        &self.net
    }

    /// Instantaneous fundamental amplitude at the monitored bus (phasor
    /// magnitude times the fault dip factor), in pu.
    pub fn monitored_amplitude(&self) -> f64 {
        self.v_now.norm() * self.dip_now
    }

    pub fn log(&self) -> &[EventLogEntry] {
        &self.log
    }

    /// Consume the engine, keeping the solved-state history.
    pub fn into_history(self) -> (Vec<Snapshot>, Vec<EventLogEntry>) {
        (self.snapshots, self.log)
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    /// Produce the next waveform sample, applying any scripted events that
    /// are due. Returns `None` once the record is complete.
    pub fn step(&mut self) -> Option<Result<(f64, f64), ScenarioError>> {
        if self.k >= self.n_samples {
            return None;
        }
        let t = self.time();
        while self.next_event < self.events.len() && self.events[self.next_event].t <= t {
            let ev = self.events[self.next_event];
            self.next_event += 1;
            if let Err(e) = self.apply_event(ev) {
                return Some(Err(e));
            }
        }
        if let Some(tc) = self.fault_clear_t {
            if t >= tc {
                self.dip_target = 1.0;
                self.dip_tau = self.templates.fault_recovery_tau_s;
                self.fault_clear_t = None;
                self.push_log(t, "fault cleared".into());
            }
        }

        // relax the continuous states over one sample
        let alpha = |tau: f64| 1.0 - (-self.ts / tau).exp();
        self.sag_now += (self.sag_target - self.sag_now) * alpha(self.templates.island_drift_tau_s);
        self.dip_now += (self.dip_target - self.dip_now) * alpha(self.dip_tau);
        self.inj_now +=
            (self.inj_target - self.inj_now) * alpha(self.templates.island_injection_tau_s);
        let target = self.v_solved * C64::new(self.sag_now, 0.0);
        let a_relax = alpha(self.templates.relax_tau_s);
        self.v_now += (target - self.v_now) * C64::new(a_relax, 0.0);

        let ring = if self.ring_amp > 0.0 {
            self.ring_amp * (-(t - self.ring_t0) / self.templates.fault_ring_tau_s).exp()
        } else {
            0.0
        };
        let a75 = self.templates.background_interharmonic + self.inj_now + ring;

        let w1 = TAU * self.net.base.f_base;
        let amp = self.v_now.norm() * self.dip_now;
        let value = amp * (w1 * t + self.v_now.arg()).sin()
            + a75 * (1.25 * w1 * t).sin()
            + self.noise.next_value();

        self.k += 1;
        Some(Ok((t, value)))
    }

    /// Actuate a DG power shift immediately (the detector's confirmation
    /// path). Scripted shifts for the same DG are superseded afterwards.
    pub fn apply_power_shift(
        &mut self,
        dg_bus: usize,
        fraction: f64,
        t: f64,
    ) -> Result<ShiftAck, ScenarioError> {
        self.do_shift(dg_bus, fraction, t, "commanded")
    }

    fn do_shift(
        &mut self,
        dg_bus: usize,
        fraction: f64,
        t: f64,
        source: &str,
    ) -> Result<ShiftAck, ScenarioError> {
        self.net.scale_dg(dg_bus, fraction)?;
        self.shifted_dgs.insert(dg_bus);
        self.push_log(
            t,
            format!("{source} power shift: DG at bus {dg_bus} scaled to {fraction}"),
        );
        self.resolve(t, &format!("{source}_shift"))?;
        Ok(ShiftAck {
            dg_bus,
            fraction,
            commanded_t: t,
            effective_t: t,
        })
    }

    fn apply_event(&mut self, ev: Event) -> Result<(), ScenarioError> {
        let t = ev.t;
        match ev.kind {
            EventKind::Islanding { injection } => {
                self.net.set_breaker(false);
                self.islanded = true;
                self.inj_target = injection;
                let island_gen: f64 = self
                    .net
                    .buses
                    .iter()
                    .filter(|b| b.id != self.net.grid_bus)
                    .map(|b| b.gen_p_mw)
                    .sum();
                if island_gen <= 0.0 {
                    self.collapsed = true;
                    self.sag_target = 0.0;
                    self.push_log(t, "islanding with no DG output: collapsing".into());
                } else {
                    self.push_log(t, format!("breaker opened; 75 Hz injection {injection}"));
                    self.resolve(t, "islanding")?;
                }
            }
            EventKind::ThreePhaseFault {
                bus,
                dip_depth,
                duration,
            } => {
                self.dip_target = 1.0 - dip_depth;
                self.dip_tau = self.templates.fault_dip_tau_s;
                self.fault_clear_t = Some(t + duration);
                self.ring_amp = self.templates.fault_ring_amplitude;
                self.ring_t0 = t;
                self.push_log(
                    t,
                    format!("three-phase fault at bus {bus}, dip {dip_depth}, {duration} s"),
                );
            }
            EventKind::SinglePhaseFault {
                bus,
                dip_depth,
                duration,
            } => {
                self.dip_target = 1.0 - dip_depth;
                self.dip_tau = self.templates.fault_dip_tau_s;
                self.fault_clear_t = Some(t + duration);
                self.ring_amp =
                    self.templates.fault_ring_amplitude * self.templates.single_phase_ring_scale;
                self.ring_t0 = t;
                self.push_log(
                    t,
                    format!("single-phase fault at bus {bus}, dip {dip_depth}, {duration} s"),
                );
            }
            EventKind::LoadDecrease { bus, retained } => {
                self.net.scale_load(bus, retained)?;
                self.push_log(t, format!("load at bus {bus} scaled to {retained}"));
                self.resolve(t, "load_decrease")?;
            }
            EventKind::DgPowerShift { dg_bus, retained } => {
                if self.shifted_dgs.contains(&dg_bus) {
                    self.push_log(
                        t,
                        format!("scripted shift for bus {dg_bus} superseded; skipped"),
                    );
                } else {
                    self.do_shift(dg_bus, retained, t, "scripted")?;
                }
            }
        }
        Ok(())
    }

    /// Re-solve the current network and retarget the phasor dynamics.
    fn resolve(&mut self, t: f64, label: &str) -> Result<(), ScenarioError> {
        if self.collapsed {
            return Ok(());
        }
        let sol = solve_power_flow(&self.net)?;
        self.v_solved = sol
            .voltage(self.monitor_bus)
            .ok_or(GridError::UnknownBus(self.monitor_bus))?;
        if self.islanded {
            let deficiency = self.net.island_deficiency_pu().re;
            self.sag_target = (1.0 - self.templates.island_drift_gain * deficiency).max(0.0);
        } else {
            self.sag_target = 1.0;
        }
        self.snapshot(t, label, &sol);
        Ok(())
    }

    fn snapshot(&mut self, t: f64, label: &str, sol: &crate::grid::PowerFlowSolution) {
        self.snapshots.push(Snapshot {
            t,
            label: label.to_string(),
            bus_ids: sol.bus_ids.clone(),
            v: sol.v.clone(),
        });
    }

    fn push_log(&mut self, t: f64, message: String) {
        self.log.push(EventLogEntry { t, message });
    }
}

/// Drive a scenario open loop (scripted events only) and collect the
/// monitored waveform.
pub fn run_scenario(
    net: NetworkModel,
    script: EventScript,
    monitor_bus: usize,
    ts: f64,
    duration: f64,
    templates: Templates,
    seed: u64,
) -> Result<ScenarioResult, ScenarioError> {
    let mut engine = ScenarioEngine::new(net, script, monitor_bus, ts, duration, templates, seed)?;
    let mut samples = Vec::with_capacity(engine.n_samples);
    while let Some(step) = engine.step() {
        let (_, v) = step?;
        samples.push(v);
    }
    Ok(ScenarioResult {
        waveform: SampledSignal {
            ts,
            t0: 0.0,
            samples,
        },
        snapshots: engine.snapshots,
        log: engine.log,
        collapsed: engine.collapsed,
        islanded: engine.islanded,
    })
}
