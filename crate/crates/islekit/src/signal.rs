//! Voltage waveform synthesis.
//!
//! Builds uniformly sampled single-channel voltage records from a harmonic
//! description: a sum of sinusoids at (possibly fractional) multiples of the
//! fundamental, a decaying DC offset, and additive Gaussian noise. Piecewise
//! records for pre-event/post-event regimes are assembled with [`splice`].
//!
//! Noise is reproducible by contract: the generator is ChaCha8
//! (`rand_chacha::ChaCha8Rng`) seeded with `WaveformSpec::seed`, drawing
//! one standard-normal variate per sample via `rand_distr::Normal`. The
//! generator identity is part of the file-format contract so other
//! implementations can match records bit-for-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::TAU;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SignalError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// One sinusoidal component at `order` times the fundamental.
///
/// `order` may be fractional (the 75 Hz inter-harmonic is order 5/4 of a
/// 60 Hz fundamental).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarmonicComponent {
    pub order: f64,
    pub amplitude: f64,
    pub phase: f64,
}

impl HarmonicComponent {
    pub fn new(order: f64, amplitude: f64, phase: f64) -> Result<Self, SignalError> {
        if !(order > 0.0) {
            return Err(SignalError::InvalidArgument(format!(
                "harmonic order must be positive, got {order}"
            )));
        }
        if !(amplitude >= 0.0) {
            return Err(SignalError::InvalidArgument(format!(
                "harmonic amplitude must be non-negative, got {amplitude}"
            )));
        }
        Ok(Self {
            order,
            amplitude,
            phase: wrap_phase(phase),
        })
    }
}

/// Normalize an angle to `[0, 2π)`.
pub fn wrap_phase(phase: f64) -> f64 {
    let mut p = phase % TAU;
    if p < 0.0 {
        p += TAU;
    }
    p
}

/// Full description of a stationary waveform regime.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveformSpec {
    pub fundamental_hz: f64,
    pub components: Vec<HarmonicComponent>,
    /// Initial amplitude of the decaying DC offset, pu.
    pub dc_amplitude: f64,
    /// DC decay rate sigma, 1/s.
    pub dc_decay: f64,
    /// Standard deviation of the additive Gaussian noise, pu.
    pub noise_std: f64,
    pub seed: u64,
}

impl WaveformSpec {
    pub fn new(fundamental_hz: f64) -> Self {
        Self {
            fundamental_hz,
            components: Vec::new(),
            dc_amplitude: 0.0,
            dc_decay: 0.0,
            noise_std: 0.0,
            seed: 0,
        }
    }

    pub fn with_component(mut self, order: f64, amplitude: f64, phase: f64) -> Self {
        self.components.push(HarmonicComponent {
            order,
            amplitude,
            phase: wrap_phase(phase),
        });
        self
    }

    fn validate(&self) -> Result<(), SignalError> {
        if !(self.fundamental_hz > 0.0) {
            return Err(SignalError::InvalidArgument(format!(
                "fundamental frequency must be positive, got {}",
                self.fundamental_hz
            )));
        }
        if self.dc_decay < 0.0 || self.noise_std < 0.0 {
            return Err(SignalError::InvalidArgument(
                "dc_decay and noise_std must be non-negative".into(),
            ));
        }
        for c in &self.components {
            if !(c.order > 0.0) || c.amplitude < 0.0 {
                return Err(SignalError::InvalidArgument(format!(
                    "bad component (order {}, amplitude {})",
                    c.order, c.amplitude
                )));
            }
        }
        Ok(())
    }

    /// Noiseless sample value at absolute time `t` seconds.
    pub fn value_at(&self, t: f64) -> f64 {
        let omega = TAU * self.fundamental_hz;
        let mut v = 0.0;
        for c in &self.components {
            v += c.amplitude * (c.order * omega * t + c.phase).sin();
        }
        v + self.dc_amplitude * (-self.dc_decay * t).exp()
    }
}

/// Uniformly sampled waveform. `samples[k]` was taken at `t0 + k * ts`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSignal {
    /// Sampling interval, seconds.
    pub ts: f64,
    /// Time of the first sample, seconds.
    pub t0: f64,
    pub samples: Vec<f64>,
}

impl SampledSignal {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Time of sample `k`.
    pub fn time_at(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.ts
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 * self.ts
    }
}

fn sample_count(duration: f64, ts: f64) -> usize {
    (duration / ts).round() as usize
}

/// Synthesize `duration` seconds of the waveform described by `spec`,
/// sampled every `ts` seconds starting at t = 0.
///
/// Equal inputs (seed included) always produce bitwise-equal output.
pub fn synthesize(
    spec: &WaveformSpec,
    duration: f64,
    ts: f64,
) -> Result<SampledSignal, SignalError> {
    if !(ts > 0.0) {
        return Err(SignalError::InvalidArgument(format!(
            "sampling interval must be positive, got {ts}"
        )));
    }
    if !(duration >= ts) {
        return Err(SignalError::InvalidArgument(format!(
            "duration {duration} shorter than one sampling interval {ts}"
        )));
    }
    spec.validate()?;

    let n = sample_count(duration, ts);
    let mut out = Vec::with_capacity(n);
    let mut noise = NoiseSource::new(spec.seed, spec.noise_std);
    for k in 0..n {
        let t = k as f64 * ts;
        out.push(spec.value_at(t) + noise.next_value());
    }
    Ok(SampledSignal {
        ts,
        t0: 0.0,
        samples: out,
    })
}

/// Concatenate stationary regimes into one record with a continuous time
/// axis: segment `i` starts exactly where segment `i-1` ended, and every
/// sinusoid argument uses the global record time, so a segment list with
/// identical specs is indistinguishable from a single long segment.
///
/// Each segment draws noise from its own spec seed.
pub fn splice(
    segments: &[(WaveformSpec, f64)],
    ts: f64,
) -> Result<SampledSignal, SignalError> {
    if segments.is_empty() {
        return Err(SignalError::InvalidArgument(
            "splice needs at least one segment".into(),
        ));
    }
    if !(ts > 0.0) {
        return Err(SignalError::InvalidArgument(format!(
            "sampling interval must be positive, got {ts}"
        )));
    }
    let total: f64 = segments.iter().map(|(_, d)| d).sum();
    if !(total > 0.0) {
        return Err(SignalError::InvalidArgument(
            "total splice duration must be positive".into(),
        ));
    }

    let mut out = Vec::with_capacity(sample_count(total, ts));
    let mut k0 = 0usize;
    for (spec, duration) in segments {
        spec.validate()?;
        if *duration < 0.0 {
            return Err(SignalError::InvalidArgument(format!(
                "negative segment duration {duration}"
            )));
        }
        let n = sample_count(*duration, ts);
        let mut noise = NoiseSource::new(spec.seed, spec.noise_std);
        for k in k0..k0 + n {
            let t = k as f64 * ts;
            out.push(spec.value_at(t) + noise.next_value());
        }
        k0 += n;
    }
    if out.is_empty() {
        return Err(SignalError::InvalidArgument(
            "splice produced an empty record".into(),
        ));
    }
    Ok(SampledSignal {
        ts,
        t0: 0.0,
        samples: out,
    })
}

/// Seeded Gaussian noise stream: ChaCha8 + ziggurat standard normal.
pub struct NoiseSource {
    rng: ChaCha8Rng,
    dist: Normal<f64>,
    enabled: bool,
}

impl NoiseSource {
    pub fn new(seed: u64, std: f64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            // std 0 is handled by `enabled`; Normal rejects 0 on some builds
            dist: Normal::new(0.0, std.max(f64::MIN_POSITIVE)).expect("finite noise std"),
            enabled: std > 0.0,
        }
    }

    pub fn next_value(&mut self) -> f64 {
        if self.enabled {
            self.dist.sample(&mut self.rng)
        } else {
            0.0
        }
    }
}
