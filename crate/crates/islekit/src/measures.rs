//! RMS voltage tracking and the average rate of change of voltage (ARCV).
//!
//! ARCV over a window is the total variation of the RMS trajectory divided
//! by the window length, in pu/s: a flat trajectory scores 0, a monotone
//! ramp scores its slope, and a step of height h inside a window W scores
//! h / W regardless of where the step lands.

use crate::signal::SampledSignal;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MeasureError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("window covers no samples: {0}")]
    EmptySeries(String),
    #[error("series too short: {0}")]
    InsufficientSeries(String),
}

/// RMS trajectory sampled every `stride` seconds; `values[i]` summarizes the
/// window ending at `t0 + i * stride`.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsSeries {
    pub stride: f64,
    pub t0: f64,
    pub values: Vec<f64>,
}

impl RmsSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn time_at(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.stride
    }

    pub fn t_end(&self) -> f64 {
        self.time_at(self.values.len().saturating_sub(1))
    }
}

/// Total-variation rate of an RMS trajectory over `window` seconds,
/// ending at `t_end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArcvValue {
    /// pu/s.
    pub value: f64,
    pub window: f64,
    pub t_end: f64,
}

/// Sliding-window RMS over a sample stream. Emits one point per `stride`
/// samples once the first full window has been seen.
#[derive(Debug, Clone)]
pub struct RmsTracker {
    window_n: usize,
    stride_n: usize,
    ts: f64,
    buf: Vec<f64>,
    head: usize,
    filled: usize,
    sum_sq: f64,
    since_emit: usize,
    count: usize,
}

impl RmsTracker {
    /// `window` and `stride` in seconds; both are rounded to whole samples.
    pub fn new(ts: f64, window: f64, stride: f64) -> Result<Self, MeasureError> {
        if !(ts > 0.0) {
            return Err(MeasureError::InvalidArgument(format!(
                "sampling interval must be positive, got {ts}"
            )));
        }
        let window_n = (window / ts).round() as usize;
        let stride_n = (stride / ts).round() as usize;
        if window_n == 0 || stride_n == 0 {
            return Err(MeasureError::InvalidArgument(format!(
                "window ({window} s) and stride ({stride} s) must each cover at least one sample"
            )));
        }
        if stride_n > window_n {
            return Err(MeasureError::InvalidArgument(format!(
                "stride {stride} s exceeds window {window} s"
            )));
        }
        Ok(Self {
            window_n,
            stride_n,
            ts,
            buf: vec![0.0; window_n],
            head: 0,
            filled: 0,
            sum_sq: 0.0,
            since_emit: 0,
            count: 0,
        })
    }

    /// Push one sample; returns `(t, rms)` when a new point is due.
    /// `t` is the time of the newest sample in the emitted window.
    pub fn push(&mut self, t: f64, v: f64) -> Option<(f64, f64)> {
        let old = self.buf[self.head];
        self.buf[self.head] = v;
        self.head = (self.head + 1) % self.window_n;
        self.count += 1;
        if self.filled < self.window_n {
            self.filled += 1;
            self.sum_sq += v * v;
        } else {
            self.sum_sq += v * v - old * old;
        }
        // resync the running sum once per wrap to stop fp drift
        if self.head == 0 && self.filled == self.window_n {
            self.sum_sq = self.buf.iter().map(|x| x * x).sum();
        }
        if self.filled < self.window_n {
            return None;
        }
        if self.since_emit == 0 {
            self.since_emit = self.stride_n;
            let rms = (self.sum_sq.max(0.0) / self.window_n as f64).sqrt();
            self.since_emit -= 1;
            return Some((t, rms));
        }
        self.since_emit -= 1;
        None
    }

    pub fn window_seconds(&self) -> f64 {
        self.window_n as f64 * self.ts
    }

    pub fn stride_seconds(&self) -> f64 {
        self.stride_n as f64 * self.ts
    }
}

/// Windowed RMS trajectory of a sampled signal.
///
/// The value at time t is the RMS of the samples in `[t - window, t]`,
/// emitted every `stride` seconds. Errors if the signal is shorter than one
/// window.
pub fn rms_track(
    signal: &SampledSignal,
    window: f64,
    stride: f64,
) -> Result<RmsSeries, MeasureError> {
    let mut tracker = RmsTracker::new(signal.ts, window, stride)?;
    let mut values = Vec::new();
    let mut t0 = None;
    for (k, &v) in signal.samples.iter().enumerate() {
        if let Some((t, rms)) = tracker.push(signal.time_at(k), v) {
            if t0.is_none() {
                t0 = Some(t);
            }
            values.push(rms);
        }
    }
    match t0 {
        Some(t0) => Ok(RmsSeries {
            stride: tracker.stride_seconds(),
            t0,
            values,
        }),
        None => Err(MeasureError::EmptySeries(format!(
            "window {window} s longer than the {:.6} s signal",
            signal.duration()
        ))),
    }
}

/// ARCV over the trailing `window` seconds of `series`.
pub fn arcv(series: &RmsSeries, window: f64) -> Result<ArcvValue, MeasureError> {
    let t_end = series.t_end();
    arcv_between(series, t_end - window, t_end)
}

/// ARCV of `series` restricted to points with t in `[t_start, t_end]`.
///
/// The window length used for normalization is `t_end - t_start`.
pub fn arcv_between(
    series: &RmsSeries,
    t_start: f64,
    t_end: f64,
) -> Result<ArcvValue, MeasureError> {
    let window = t_end - t_start;
    if !(window > 0.0) {
        return Err(MeasureError::InvalidArgument(format!(
            "window must be positive, got {window}"
        )));
    }
    if series.len() < 2 {
        return Err(MeasureError::InsufficientSeries(
            "need at least two RMS points".into(),
        ));
    }
    // tolerate fp jitter of half a stride at the window edges
    let eps = series.stride * 0.5;
    if series.t0 > t_start + eps || series.t_end() < t_end - eps {
        return Err(MeasureError::InsufficientSeries(format!(
            "series [{:.6}, {:.6}] does not cover window [{:.6}, {:.6}]",
            series.t0,
            series.t_end(),
            t_start,
            t_end
        )));
    }
    let mut tv = 0.0;
    let mut pairs = 0usize;
    for i in 1..series.len() {
        let t_prev = series.time_at(i - 1);
        let t_cur = series.time_at(i);
        if t_prev >= t_start - eps && t_cur <= t_end + eps {
            tv += (series.values[i] - series.values[i - 1]).abs();
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(MeasureError::InsufficientSeries(
            "no consecutive RMS points inside the window".into(),
        ));
    }
    Ok(ArcvValue {
        value: tv / window,
        window,
        t_end,
    })
}
