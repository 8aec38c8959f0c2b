//! Three-stage islanding decision pipeline.
//!
//! Stage 1 gates on the tracked inter-harmonic amplitude: a sustained rise
//! above `a75_min` flags a suspicious event and starts an ARCV measurement.
//! Stage 2 filters severe faults: an ARCV above `arcv_max` over the first
//! two-cycle window ends the case as a fault. Stage 3 confirms: a power-shift
//! command is issued to one DG, and after a settle delay the ARCV of the
//! response window decides between `Islanding` and `NonIslanding`.
//!
//! The detector is an incremental state machine fed by two time-aligned
//! streams (per-sample amplitude estimates and strided RMS points). The
//! power shift uses a polling handshake so the caller stays in control of
//! actuation: the detector exposes a pending [`ShiftRequest`] through
//! [`Detector::take_shift_request`], and the caller reports the outcome via
//! [`Detector::acknowledge_shift`] or [`Detector::report_shift_failure`].

use crate::measures::{arcv_between, MeasureError, RmsSeries};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("{stream} stream gap at t = {t:.6}: expected step near {expected:.6}, got {got:.6}")]
    StreamGap {
        stream: &'static str,
        t: f64,
        expected: f64,
        got: f64,
    },
    #[error("non-monotonic {stream} stream: t = {t:.6} after {prev:.6}")]
    OutOfOrder {
        stream: &'static str,
        t: f64,
        prev: f64,
    },
    #[error("arcv window could not be measured: {0}")]
    WindowMeasurement(#[from] MeasureError),
}

/// Decision thresholds. `a75_min` is in the estimator's reported amplitude
/// scale; the ARCV limits are in pu/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub a75_min: f64,
    pub arcv_max: f64,
    pub arcv_min: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            a75_min: 1.0,
            arcv_max: 14.0,
            arcv_min: 1.0,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<(), DetectorError> {
        if !(self.a75_min > 0.0 && self.arcv_max > 0.0 && self.arcv_min > 0.0) {
            return Err(DetectorError::InvalidConfig(format!(
                "thresholds must be positive: {self:?}"
            )));
        }
        if !(self.arcv_min < self.arcv_max) {
            return Err(DetectorError::InvalidConfig(format!(
                "arcv_min must be below arcv_max: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Timing and actuation parameters of the pipeline, all in seconds unless
/// noted.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorTiming {
    /// Ignore estimates before this time; covers estimator cold start.
    pub arming_time: f64,
    /// Expected spacing of the estimate stream.
    pub estimate_interval: f64,
    /// Expected spacing of the RMS stream.
    pub rms_stride: f64,
    /// Stage-1 firing rule: the amplitude must stay above threshold for this
    /// long without interruption.
    pub debounce: f64,
    /// Stage-2 ARCV window, starting at the stage-1 flag.
    pub arcv1_window: f64,
    /// Wait between shift acknowledgment and the confirmation window.
    pub settle_delay: f64,
    /// Stage-3 ARCV window.
    pub arcv2_window: f64,
    /// How long a pending shift may stay unacknowledged.
    pub ack_timeout: f64,
    /// Hard ceiling from flag to final verdict.
    pub verdict_deadline: f64,
    /// DG addressed by the shift command.
    pub shift_dg_id: usize,
    /// Target output as a fraction of the pre-shift output.
    pub shift_fraction: f64,
}

impl Default for DetectorTiming {
    fn default() -> Self {
        let cycle = 1.0 / 60.0;
        Self {
            arming_time: 0.05,
            estimate_interval: 1.0 / 7680.0,
            rms_stride: cycle / 4.0,
            debounce: cycle / 4.0,
            arcv1_window: 2.0 * cycle,
            settle_delay: cycle,
            arcv2_window: 2.0 * cycle,
            ack_timeout: 2.0 * cycle,
            verdict_deadline: 2.0,
            shift_dg_id: 8,
            shift_fraction: 0.12,
        }
    }
}

impl DetectorTiming {
    pub fn validate(&self) -> Result<(), DetectorError> {
        let positive = [
            ("estimate_interval", self.estimate_interval),
            ("rms_stride", self.rms_stride),
            ("debounce", self.debounce),
            ("arcv1_window", self.arcv1_window),
            ("arcv2_window", self.arcv2_window),
            ("ack_timeout", self.ack_timeout),
            ("verdict_deadline", self.verdict_deadline),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(DetectorError::InvalidConfig(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if self.arming_time < 0.0 || self.settle_delay < 0.0 {
            return Err(DetectorError::InvalidConfig(
                "arming_time and settle_delay must be non-negative".into(),
            ));
        }
        if !(self.shift_fraction > 0.0 && self.shift_fraction <= 1.0) {
            return Err(DetectorError::InvalidConfig(format!(
                "shift_fraction must be in (0, 1], got {}",
                self.shift_fraction
            )));
        }
        let budget = self.arcv1_window + self.settle_delay + self.arcv2_window + self.ack_timeout;
        if self.verdict_deadline <= budget {
            return Err(DetectorError::InvalidConfig(format!(
                "verdict_deadline {} cannot cover the measurement windows ({budget})",
                self.verdict_deadline
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Monitoring,
    ArcvMeasurement,
    AwaitingPowerShift,
    Confirming,
    Final,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    /// Nothing flagged; normal operation.
    None,
    /// Stage 1 rejected the event: no inter-harmonic amplification.
    HarmonicRejected,
    /// Stage 2 filtered a severe fault.
    FaultFiltered,
    /// Stage 3 saw a stiff grid response; not an island.
    NonIslanding,
    Islanding,
    /// The pipeline could not finish (actuation failure, stream end, or
    /// deadline); see the timeline annotation.
    Undetermined,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Verdict::None => "None",
            Verdict::HarmonicRejected => "HarmonicRejected",
            Verdict::FaultFiltered => "FaultFiltered",
            Verdict::NonIslanding => "NonIslanding",
            Verdict::Islanding => "Islanding",
            Verdict::Undetermined => "Undetermined",
        };
        f.write_str(s)
    }
}

impl Verdict {
    pub fn is_islanding(&self) -> bool {
        matches!(self, Verdict::Islanding)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageId {
    HarmonicGate,
    FaultFilter,
    PowerShift,
    Confirmation,
}

impl std::fmt::Display for StageId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            StageId::HarmonicGate => "harmonic_gate",
            StageId::FaultFilter => "fault_filter",
            StageId::PowerShift => "power_shift",
            StageId::Confirmation => "confirmation",
        };
        f.write_str(s)
    }
}

/// One decision event for the structured report.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub stage: StageId,
    pub t: f64,
    pub value: f64,
    pub decision: String,
}

/// Pending power-shift command for the caller to actuate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftRequest {
    pub dg_id: usize,
    /// Target output as a fraction of the pre-shift output.
    pub fraction: f64,
    /// Time the request was raised.
    pub t: f64,
}

/// Actuation interface used by [`run`]. Implementations apply the shift and
/// return an error message on failure.
pub trait PowerShiftActuator {
    fn command_shift(&mut self, request: &ShiftRequest) -> Result<(), String>;
}

/// Full record of one detection run.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionTimeline {
    pub phase: Phase,
    pub verdict: Verdict,
    /// First estimate of the uninterrupted exceed run that fired stage 1.
    pub t_first_exceed: Option<f64>,
    /// Stage-1 pass (debounce complete).
    pub t_event_flagged: Option<f64>,
    /// Stage-2 decision.
    pub t_stage2: Option<f64>,
    pub t_shift_command: Option<f64>,
    pub t_shift_ack: Option<f64>,
    pub t_verdict: Option<f64>,
    /// Largest amplitude seen between first exceed and the stage-2 decision.
    pub a75: Option<f64>,
    pub arcv1: Option<f64>,
    pub arcv2: Option<f64>,
    pub annotation: Option<String>,
    pub records: Vec<StageRecord>,
}

impl DetectionTimeline {
    fn new() -> Self {
        Self {
            phase: Phase::Monitoring,
            verdict: Verdict::None,
            t_first_exceed: None,
            t_event_flagged: None,
            t_stage2: None,
            t_shift_command: None,
            t_shift_ack: None,
            t_verdict: None,
            a75: None,
            arcv1: None,
            arcv2: None,
            annotation: None,
            records: Vec::new(),
        }
    }

    /// The (a75, arcv1, arcv2) summary once all three are measured.
    pub fn triple(&self) -> Option<(f64, f64, f64)> {
        Some((self.a75?, self.arcv1?, self.arcv2?))
    }

    /// Elapsed time from the first threshold exceedance to the stage-2
    /// decision.
    pub fn stage12_latency(&self) -> Option<f64> {
        Some(self.t_stage2? - self.t_first_exceed?)
    }

    /// Elapsed time from the first threshold exceedance to the verdict.
    pub fn verdict_latency(&self) -> Option<f64> {
        Some(self.t_verdict? - self.t_first_exceed?)
    }
}

/// Classify a measured (a75, arcv1, arcv2) triple through the three stage
/// rules, outside of any timing concerns.
pub fn classify_triple(a75: f64, arcv1: f64, arcv2: f64, thr: &Thresholds) -> Verdict {
    if a75 < thr.a75_min {
        Verdict::HarmonicRejected
    } else if arcv1 > thr.arcv_max {
        Verdict::FaultFiltered
    } else if arcv2 >= thr.arcv_min {
        Verdict::Islanding
    } else {
        Verdict::NonIslanding
    }
}

#[derive(Debug, Clone)]
pub struct Detector {
    thr: Thresholds,
    timing: DetectorTiming,
    timeline: DetectionTimeline,
    // stage-1 debounce
    exceed_start: Option<f64>,
    last_est_t: Option<f64>,
    // rms buffer as a contiguous strided series
    rms_t0: Option<f64>,
    rms_values: Vec<f64>,
    // pending windows, absolute end times
    arcv1_span: Option<(f64, f64)>,
    arcv2_span: Option<(f64, f64)>,
    pending_request: Option<ShiftRequest>,
    request_raised_at: Option<f64>,
}

impl Detector {
    pub fn new(thr: Thresholds, timing: DetectorTiming) -> Result<Self, DetectorError> {
        thr.validate()?;
        timing.validate()?;
        Ok(Self {
            thr,
            timing,
            timeline: DetectionTimeline::new(),
            exceed_start: None,
            last_est_t: None,
            rms_t0: None,
            rms_values: Vec::new(),
            arcv1_span: None,
            arcv2_span: None,
            pending_request: None,
            request_raised_at: None,
        })
    }

    pub fn thresholds(&self) -> &Thresholds {
        &self.thr
    }

    pub fn timing(&self) -> &DetectorTiming {
        &self.timing
    }

    pub fn phase(&self) -> Phase {
        self.timeline.phase
    }

    pub fn is_final(&self) -> bool {
        self.timeline.phase == Phase::Final
    }

    pub fn timeline(&self) -> &DetectionTimeline {
        &self.timeline
    }

    /// Consume the pending shift request, if any. The caller must actuate it
    /// and then call [`acknowledge_shift`](Self::acknowledge_shift) or
    /// [`report_shift_failure`](Self::report_shift_failure).
    pub fn take_shift_request(&mut self) -> Option<ShiftRequest> {
        let req = self.pending_request.take()?;
        self.timeline.t_shift_command = Some(req.t);
        Some(req)
    }

    pub fn acknowledge_shift(&mut self, t: f64) {
        if self.timeline.phase != Phase::AwaitingPowerShift {
            return;
        }
        self.timeline.t_shift_ack = Some(t);
        self.record(StageId::PowerShift, t, self.timing.shift_fraction, "acknowledged");
        let start = t + self.timing.settle_delay;
        self.arcv2_span = Some((start, start + self.timing.arcv2_window));
        self.timeline.phase = Phase::Confirming;
    }

    pub fn report_shift_failure(&mut self, t: f64, reason: &str) {
        if self.is_final() {
            return;
        }
        self.record(StageId::PowerShift, t, 0.0, format!("failed: {reason}"));
        self.finalize(
            t,
            Verdict::Undetermined,
            Some(format!("power shift failed: {reason}")),
        );
    }

    /// Feed one amplitude estimate (in the same scale as `a75_min`).
    pub fn on_estimate(&mut self, t: f64, a75: f64) -> Result<(), DetectorError> {
        if self.is_final() {
            return Ok(());
        }
        if let Some(prev) = self.last_est_t {
            if t <= prev {
                return Err(DetectorError::OutOfOrder {
                    stream: "estimate",
                    t,
                    prev,
                });
            }
            // a hole in the estimate stream breaks debounce continuity
            if t - prev > 1.5 * self.timing.estimate_interval
                && self.timeline.phase == Phase::Monitoring
            {
                self.exceed_start = None;
            }
        }
        self.last_est_t = Some(t);
        self.check_deadlines(t);
        if self.is_final() || t < self.timing.arming_time {
            return Ok(());
        }
        // track the headline amplitude until the stage-2 decision
        if self.timeline.t_stage2.is_none() && self.exceed_start.is_some() {
            let best = self.timeline.a75.unwrap_or(0.0);
            if a75 > best {
                self.timeline.a75 = Some(a75);
            }
        }
        if self.timeline.phase != Phase::Monitoring {
            return Ok(());
        }
        if a75 >= self.thr.a75_min {
            let start = *self.exceed_start.get_or_insert(t);
            if self.timeline.a75.unwrap_or(0.0) < a75 {
                self.timeline.a75 = Some(a75);
            }
            if t - start >= self.timing.debounce {
                self.timeline.t_first_exceed = Some(start);
                self.timeline.t_event_flagged = Some(t);
                self.record(StageId::HarmonicGate, t, a75, "pass");
                self.arcv1_span = Some((t, t + self.timing.arcv1_window));
                self.timeline.phase = Phase::ArcvMeasurement;
            }
        } else {
            self.exceed_start = None;
            if self.timeline.t_event_flagged.is_none() {
                self.timeline.a75 = None;
            }
        }
        Ok(())
    }

    /// Feed one RMS point in pu.
    pub fn on_rms(&mut self, t: f64, value: f64) -> Result<(), DetectorError> {
        if self.is_final() {
            return Ok(());
        }
        match self.rms_t0 {
            None => {
                self.rms_t0 = Some(t);
                self.rms_values.push(value);
            }
            Some(t0) => {
                let prev = t0 + (self.rms_values.len() - 1) as f64 * self.timing.rms_stride;
                if t <= prev {
                    return Err(DetectorError::OutOfOrder {
                        stream: "rms",
                        t,
                        prev,
                    });
                }
                let dt = t - prev;
                if dt > 1.5 * self.timing.rms_stride || dt < 0.5 * self.timing.rms_stride {
                    return Err(DetectorError::StreamGap {
                        stream: "rms",
                        t,
                        expected: self.timing.rms_stride,
                        got: dt,
                    });
                }
                self.rms_values.push(value);
            }
        }
        self.check_deadlines(t);
        if self.is_final() {
            return Ok(());
        }
        let trigger = 0.25 * self.timing.rms_stride;
        match self.timeline.phase {
            Phase::ArcvMeasurement => {
                let (start, end) = self.arcv1_span.expect("span set on entry");
                if t >= end - trigger {
                    let a = arcv_between(&self.series(), start, end)?;
                    self.timeline.arcv1 = Some(a.value);
                    self.timeline.t_stage2 = Some(t);
                    if a.value > self.thr.arcv_max {
                        self.record(StageId::FaultFilter, t, a.value, "filtered");
                        self.finalize(t, Verdict::FaultFiltered, None);
                    } else {
                        self.record(StageId::FaultFilter, t, a.value, "pass");
                        let req = ShiftRequest {
                            dg_id: self.timing.shift_dg_id,
                            fraction: self.timing.shift_fraction,
                            t,
                        };
                        self.pending_request = Some(req);
                        self.request_raised_at = Some(t);
                        self.timeline.phase = Phase::AwaitingPowerShift;
                    }
                }
            }
            Phase::Confirming => {
                let (start, end) = self.arcv2_span.expect("span set on entry");
                if t >= end - trigger {
                    let a = arcv_between(&self.series(), start, end)?;
                    self.timeline.arcv2 = Some(a.value);
                    let verdict = if a.value >= self.thr.arcv_min {
                        Verdict::Islanding
                    } else {
                        Verdict::NonIslanding
                    };
                    let decision = if verdict == Verdict::Islanding {
                        "islanding"
                    } else {
                        "non-islanding"
                    };
                    self.record(StageId::Confirmation, t, a.value, decision);
                    self.finalize(t, verdict, None);
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Close out the run at the end of the input streams.
    pub fn finish(mut self, t_end: f64) -> DetectionTimeline {
        if !self.is_final() {
            match self.timeline.phase {
                Phase::Monitoring => {
                    self.finalize(t_end, Verdict::None, None);
                }
                phase => {
                    let note = format!("streams ended during {phase:?}");
                    self.finalize(t_end, Verdict::Undetermined, Some(note));
                }
            }
        }
        self.timeline
    }

    fn series(&self) -> RmsSeries {
        RmsSeries {
            stride: self.timing.rms_stride,
            t0: self.rms_t0.unwrap_or(0.0),
            values: self.rms_values.clone(),
        }
    }

    fn check_deadlines(&mut self, t: f64) {
        if self.is_final() {
            return;
        }
        if let Some(raised) = self.request_raised_at {
            let acked = self.timeline.t_shift_ack.is_some();
            if !acked && t > raised + self.timing.ack_timeout {
                self.finalize(
                    t,
                    Verdict::Undetermined,
                    Some("power-shift acknowledgment timed out".into()),
                );
                return;
            }
        }
        if let Some(flag) = self.timeline.t_event_flagged {
            if t > flag + self.timing.verdict_deadline {
                self.finalize(
                    t,
                    Verdict::Undetermined,
                    Some("verdict deadline exceeded".into()),
                );
            }
        }
    }

    fn finalize(&mut self, t: f64, verdict: Verdict, annotation: Option<String>) {
        self.timeline.phase = Phase::Final;
        self.timeline.verdict = verdict;
        self.timeline.t_verdict = Some(t);
        if annotation.is_some() {
            self.timeline.annotation = annotation;
        }
        self.pending_request = None;
    }

    fn record(&mut self, stage: StageId, t: f64, value: f64, decision: impl Into<String>) {
        self.timeline.records.push(StageRecord {
            stage,
            t,
            value,
            decision: decision.into(),
        });
    }
}

/// Drive a detector over pre-recorded streams, actuating shifts through
/// `actuator`. Streams are merged by timestamp (estimates first on ties).
pub fn run<A: PowerShiftActuator>(
    estimates: impl IntoIterator<Item = (f64, f64)>,
    rms: impl IntoIterator<Item = (f64, f64)>,
    thr: Thresholds,
    timing: DetectorTiming,
    actuator: &mut A,
) -> Result<DetectionTimeline, DetectorError> {
    let mut det = Detector::new(thr, timing)?;
    let mut est = estimates.into_iter().peekable();
    let mut rms = rms.into_iter().peekable();
    let mut t_last: f64 = 0.0;
    loop {
        let take_est = match (est.peek(), rms.peek()) {
            (Some(&(te, _)), Some(&(tr, _))) => te <= tr,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (None, None) => break,
        };
        if take_est {
            let (t, a) = est.next().expect("peeked");
            det.on_estimate(t, a)?;
            t_last = t;
        } else {
            let (t, v) = rms.next().expect("peeked");
            det.on_rms(t, v)?;
            t_last = t;
        }
        if let Some(req) = det.take_shift_request() {
            match actuator.command_shift(&req) {
                Ok(()) => det.acknowledge_shift(t_last),
                Err(msg) => det.report_shift_failure(t_last, &msg),
            }
        }
        if det.is_final() {
            break;
        }
    }
    Ok(det.finish(t_last))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TS: f64 = 1.0 / 7680.0;
    const STRIDE: f64 = 1.0 / 240.0;
    const CYCLE: f64 = 1.0 / 60.0;

    #[derive(Default)]
    struct SpyActuator {
        commands: Vec<ShiftRequest>,
        fail_with: Option<String>,
    }

    impl PowerShiftActuator for SpyActuator {
        fn command_shift(&mut self, request: &ShiftRequest) -> Result<(), String> {
            self.commands.push(*request);
            match &self.fail_with {
                Some(msg) => Err(msg.clone()),
                None => Ok(()),
            }
        }
    }

    /// Estimate stream: a75 = 0 before `t_event`, `level` afterwards.
    fn est_stream(duration: f64, t_event: f64, level: f64) -> Vec<(f64, f64)> {
        let n = (duration / TS).round() as usize;
        (1..=n)
            .map(|k| {
                let t = k as f64 * TS;
                (t, if t >= t_event { level } else { 0.0 })
            })
            .collect()
    }

    /// RMS stream built from piecewise-linear (t, value) breakpoints.
    fn rms_stream(duration: f64, breakpoints: &[(f64, f64)]) -> Vec<(f64, f64)> {
        let n = (duration / STRIDE).round() as usize;
        (1..=n)
            .map(|k| {
                let t = k as f64 * STRIDE;
                let mut v = breakpoints[0].1;
                for w in breakpoints.windows(2) {
                    let (t0, v0) = w[0];
                    let (t1, v1) = w[1];
                    if t >= t1 {
                        v = v1;
                    } else if t > t0 {
                        v = v0 + (v1 - v0) * (t - t0) / (t1 - t0);
                        break;
                    }
                }
                (t, v)
            })
            .collect()
    }

    #[test]
    fn test_stage1_gate_examples() {
        let thr = Thresholds::default();
        assert_eq!(
            classify_triple(172.64, 3.2215, 2.9716, &thr),
            Verdict::Islanding
        );
        assert_eq!(
            classify_triple(0.03, 1.1457, 0.0976, &thr),
            Verdict::HarmonicRejected
        );
        // 4.96 passes stage 1 and must reach the later stages
        assert_ne!(
            classify_triple(4.96, 13.6943, 0.0983, &thr),
            Verdict::HarmonicRejected
        );
    }

    #[test]
    fn test_stage2_filter_examples() {
        let thr = Thresholds::default();
        assert_eq!(
            classify_triple(4.92, 14.5979, 0.0870, &thr),
            Verdict::FaultFiltered
        );
        assert_eq!(
            classify_triple(4.96, 13.6943, 0.0983, &thr),
            Verdict::NonIslanding
        );
        assert_ne!(classify_triple(5.0, 0.0, 2.0, &thr), Verdict::FaultFiltered);
    }

    #[test]
    fn test_stage3_confirm_examples() {
        let thr = Thresholds::default();
        assert_eq!(
            classify_triple(172.64, 3.2215, 2.9716, &thr),
            Verdict::Islanding
        );
        assert_eq!(
            classify_triple(4.96, 13.6943, 0.0983, &thr),
            Verdict::NonIslanding
        );
        assert_eq!(
            classify_triple(23.6, 0.5561, 1.0569, &thr),
            Verdict::Islanding
        );
    }

    #[test]
    fn test_boundary_bias_toward_scrutiny() {
        let thr = Thresholds::default();
        // exact boundaries lean toward further investigation
        assert_ne!(
            classify_triple(1.0, 5.0, 0.0, &thr),
            Verdict::HarmonicRejected
        );
        assert_eq!(
            classify_triple(5.0, 14.0, 1.0, &thr),
            Verdict::Islanding
        );
    }

    #[test]
    fn test_streaming_islanding() {
        // amplitude fires at 0.1 s; rms sags mildly, then drifts again after
        // the shift lands
        let est = est_stream(0.3, 0.1, 20.0);
        let rms = rms_stream(
            0.3,
            &[(0.0, 1.0), (0.10, 1.0), (0.11, 0.92), (0.15, 0.90), (0.16, 0.88), (0.3, 0.40)],
        );
        let mut act = SpyActuator::default();
        let tl = run(est, rms, Thresholds::default(), DetectorTiming::default(), &mut act).unwrap();
        assert_eq!(tl.verdict, Verdict::Islanding, "timeline: {tl:#?}");
        assert_eq!(act.commands.len(), 1);
        assert_eq!(act.commands[0].dg_id, 8);
        assert!((act.commands[0].fraction - 0.12).abs() < 1e-12);
        assert!(tl.t_event_flagged.unwrap() > 0.1);
        assert!(tl.t_verdict.unwrap() > tl.t_event_flagged.unwrap());
        assert!(tl.stage12_latency().unwrap() <= 4.0 * CYCLE);
        assert!(tl.verdict_latency().unwrap() <= 2.0);
        assert!(tl.a75.unwrap() >= 20.0);
    }

    #[test]
    fn test_streaming_fault_filtered_without_actuation() {
        // a severe sag inside the first window: 0.75 pu drop spread over one
        // cycle, as a 1-cycle RMS tracker would render a step
        let est = est_stream(0.3, 0.1, 6.0);
        let rms = rms_stream(
            0.3,
            &[(0.0, 1.0), (0.10, 1.0), (0.1167, 0.25), (0.145, 0.25), (0.16, 0.95), (0.3, 0.95)],
        );
        let mut act = SpyActuator::default();
        let tl = run(est, rms, Thresholds::default(), DetectorTiming::default(), &mut act).unwrap();
        assert_eq!(tl.verdict, Verdict::FaultFiltered, "timeline: {tl:#?}");
        assert!(act.commands.is_empty(), "no actuation without cause");
        assert!(tl.arcv1.unwrap() > 14.0);
        assert!(tl.arcv2.is_none());
    }

    #[test]
    fn test_streaming_non_islanding() {
        // mild sag passes stage 2, but the post-shift window is quiet
        let est = est_stream(0.3, 0.1, 6.0);
        let rms = rms_stream(
            0.3,
            &[(0.0, 1.0), (0.10, 1.0), (0.11, 0.93), (0.3, 0.93)],
        );
        let mut act = SpyActuator::default();
        let tl = run(est, rms, Thresholds::default(), DetectorTiming::default(), &mut act).unwrap();
        assert_eq!(tl.verdict, Verdict::NonIslanding, "timeline: {tl:#?}");
        assert_eq!(act.commands.len(), 1);
        assert!(tl.arcv2.unwrap() < 1.0);
    }

    #[test]
    fn test_quiescent_stream_stays_monitoring() {
        let est = est_stream(0.3, 10.0, 0.0);
        let rms = rms_stream(0.3, &[(0.0, 1.0), (0.3, 1.0)]);
        let mut act = SpyActuator::default();
        let tl = run(est, rms, Thresholds::default(), DetectorTiming::default(), &mut act).unwrap();
        assert_eq!(tl.verdict, Verdict::None);
        assert!(act.commands.is_empty());
        assert!(tl.t_event_flagged.is_none());
        assert!(tl.records.is_empty());
    }

    #[test]
    fn test_actuator_failure_gives_undetermined() {
        let est = est_stream(0.3, 0.1, 6.0);
        let rms = rms_stream(0.3, &[(0.0, 1.0), (0.11, 0.93), (0.3, 0.93)]);
        let mut act = SpyActuator {
            fail_with: Some("breaker interlock".into()),
            ..Default::default()
        };
        let tl = run(est, rms, Thresholds::default(), DetectorTiming::default(), &mut act).unwrap();
        assert_eq!(tl.verdict, Verdict::Undetermined);
        assert!(tl.annotation.as_ref().unwrap().contains("breaker interlock"));
    }

    #[test]
    fn test_unacknowledged_shift_times_out() {
        let est = est_stream(0.3, 0.1, 6.0);
        let rms = rms_stream(0.3, &[(0.0, 1.0), (0.11, 0.93), (0.3, 0.93)]);
        let mut det = Detector::new(Thresholds::default(), DetectorTiming::default()).unwrap();
        let mut est_it = est.into_iter().peekable();
        for (t, v) in rms {
            while let Some(&(te, a)) = est_it.peek() {
                if te > t {
                    break;
                }
                det.on_estimate(te, a).unwrap();
                est_it.next();
            }
            det.on_rms(t, v).unwrap();
            // deliberately never take or acknowledge the request
            if det.is_final() {
                break;
            }
        }
        let tl = det.finish(0.3);
        assert_eq!(tl.verdict, Verdict::Undetermined);
        assert!(tl.annotation.as_ref().unwrap().contains("timed out"));
    }

    #[test]
    fn test_stream_ending_mid_pipeline_is_undetermined() {
        // streams stop right after the flag
        let est = est_stream(0.12, 0.1, 6.0);
        let rms = rms_stream(0.12, &[(0.0, 1.0), (0.11, 0.95), (0.12, 0.95)]);
        let mut act = SpyActuator::default();
        let tl = run(est, rms, Thresholds::default(), DetectorTiming::default(), &mut act).unwrap();
        assert_eq!(tl.verdict, Verdict::Undetermined);
        assert!(tl.annotation.as_ref().unwrap().contains("ended"));
    }

    #[test]
    fn test_rms_gap_is_error() {
        let mut det = Detector::new(Thresholds::default(), DetectorTiming::default()).unwrap();
        det.on_rms(STRIDE, 1.0).unwrap();
        det.on_rms(2.0 * STRIDE, 1.0).unwrap();
        let err = det.on_rms(4.0 * STRIDE, 1.0).unwrap_err();
        assert!(matches!(err, DetectorError::StreamGap { .. }));
    }

    #[test]
    fn test_out_of_order_estimate_is_error() {
        let mut det = Detector::new(Thresholds::default(), DetectorTiming::default()).unwrap();
        det.on_estimate(10.0 * TS, 0.0).unwrap();
        let err = det.on_estimate(9.0 * TS, 0.0).unwrap_err();
        assert!(matches!(err, DetectorError::OutOfOrder { .. }));
    }

    #[test]
    fn test_debounce_rejects_single_spike() {
        let mut det = Detector::new(Thresholds::default(), DetectorTiming::default()).unwrap();
        // one estimate above threshold, then back below: no flag
        det.on_estimate(0.06, 50.0).unwrap();
        det.on_estimate(0.06 + TS, 0.0).unwrap();
        for k in 2..100 {
            det.on_estimate(0.06 + k as f64 * TS, 0.0).unwrap();
        }
        assert_eq!(det.phase(), Phase::Monitoring);
        assert!(det.timeline().t_event_flagged.is_none());
    }

    #[test]
    fn test_replay_determinism() {
        let est = est_stream(0.3, 0.1, 20.0);
        let rms = rms_stream(
            0.3,
            &[(0.0, 1.0), (0.10, 1.0), (0.11, 0.92), (0.16, 0.88), (0.3, 0.40)],
        );
        let mut a1 = SpyActuator::default();
        let mut a2 = SpyActuator::default();
        let tl1 = run(
            est.clone(),
            rms.clone(),
            Thresholds::default(),
            DetectorTiming::default(),
            &mut a1,
        )
        .unwrap();
        let tl2 = run(est, rms, Thresholds::default(), DetectorTiming::default(), &mut a2).unwrap();
        assert_eq!(tl1, tl2);
    }

    #[test]
    fn test_invalid_configs_rejected() {
        let bad_thr = Thresholds {
            a75_min: 1.0,
            arcv_max: 1.0,
            arcv_min: 14.0,
        };
        assert!(Detector::new(bad_thr, DetectorTiming::default()).is_err());
        let bad_timing = DetectorTiming {
            shift_fraction: 0.0,
            ..DetectorTiming::default()
        };
        assert!(Detector::new(Thresholds::default(), bad_timing).is_err());
        let bad_timing = DetectorTiming {
            verdict_deadline: 0.01,
            ..DetectorTiming::default()
        };
        assert!(Detector::new(Thresholds::default(), bad_timing).is_err());
    }

    proptest! {
        #[test]
        fn prop_stage_monotonicity(
            a75 in 0.0f64..200.0,
            arcv1 in 0.0f64..20.0,
            arcv2 in 0.0f64..5.0,
            bump in 0.0f64..50.0,
        ) {
            let thr = Thresholds::default();
            let base = classify_triple(a75, arcv1, arcv2, &thr);
            // more inter-harmonic never turns a non-rejection into a rejection
            let more_a75 = classify_triple(a75 + bump, arcv1, arcv2, &thr);
            if base != Verdict::HarmonicRejected {
                prop_assert_ne!(more_a75, Verdict::HarmonicRejected);
            }
            // a calmer first window never turns pass into filtered
            let calmer = classify_triple(a75, (arcv1 - bump).max(0.0), arcv2, &thr);
            if base != Verdict::FaultFiltered {
                prop_assert_ne!(calmer, Verdict::FaultFiltered);
            }
            // a livelier confirmation never turns islanding into non-islanding
            let livelier = classify_triple(a75, arcv1, arcv2 + bump, &thr);
            if base == Verdict::Islanding {
                prop_assert_eq!(livelier, Verdict::Islanding);
            }
        }
    }
}
