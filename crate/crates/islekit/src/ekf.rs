//! Complex-state extended Kalman filter tracking harmonics 1 to 9, the 5/4
//! inter-harmonic, a decaying DC offset, and the fundamental frequency.
//!
//! State layout (22 complex entries, zero-based):
//! - `x[0]`: per-sample rotation `e^{j*w1*ts}`; its argument carries the
//!   fundamental frequency estimate.
//! - `x[2n-1], x[2n]` for n = 1..=9: conjugate envelope pair of harmonic n,
//!   holding `a*e^{+j(k*n*w1*ts + phi)}` and its conjugate.
//! - `x[19], x[20]`: envelope pair of the 5/4 inter-harmonic (75 Hz on a
//!   60 Hz fundamental).
//! - `x[21]`: decaying DC offset, multiplied by a constant alpha per sample.
//!
//! The transition rotates each envelope by the matching power of `x[0]`;
//! the measurement sums the pair reconstructions plus DC and is real once
//! the pairs are exact conjugates. Covariance is propagated in complex
//! Hermitian form (`F P F^H + Q`), and pairs are re-symmetrized after every
//! update so the reconstruction stays real. The rotation argument stays far
//! from the negative real axis during healthy tracking, so principal-branch
//! fractional powers of `x[0]` are continuous.

use nalgebra::{Complex, DMatrix, DVector, RowDVector};
use thiserror::Error;

pub type C64 = Complex<f64>;

/// Number of complex states.
pub const STATE_DIM: usize = 22;
/// Number of integer harmonic orders tracked.
pub const HARMONIC_COUNT: usize = 9;
/// Order of the injected inter-harmonic relative to the fundamental.
pub const INTERHARMONIC_ORDER: f64 = 1.25;

const ROT: usize = 0;
const DC: usize = 21;

/// Envelope pairs as (even index, odd index, order). Orders 1..=9 then 5/4.
fn pairs() -> impl Iterator<Item = (usize, usize, f64)> {
    (0..HARMONIC_COUNT)
        .map(|k| (1 + 2 * k, 2 + 2 * k, (k + 1) as f64))
        .chain(std::iter::once((
            1 + 2 * HARMONIC_COUNT,
            2 + 2 * HARMONIC_COUNT,
            INTERHARMONIC_ORDER,
        )))
}

fn cpow(z: C64, m: f64) -> C64 {
    if m == m.trunc() && m.abs() <= 64.0 {
        z.powi(m as i32)
    } else {
        z.powf(m)
    }
}

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("estimator diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String },
}

#[derive(Debug, Clone)]
pub struct EstimatorConfig {
    /// Sampling interval in seconds.
    pub ts: f64,
    /// Nominal fundamental frequency in Hz; seeds the rotation state.
    pub nominal_f1: f64,
    /// Process-noise variance per state (diagonal of Q), length 22.
    pub process_noise_q: Vec<f64>,
    /// Measurement-noise variance R.
    pub measurement_noise_r: f64,
    /// Initial variance of every envelope and DC state.
    pub initial_covariance_p0: f64,
    /// Initial variance of the rotation state. The rotation is a unit
    /// phasor known to within the plausible frequency error, so its prior
    /// must be far tighter than the envelope prior; a wide prior lets the
    /// first large envelope corrections bleed into the rotation and the
    /// +-9th powers in the transition then amplify the excursion.
    pub initial_rotation_covariance: f64,
    /// Per-sample DC decay multiplier, e^(-sigma*ts).
    pub dc_decay_alpha: f64,
    /// Re-symmetrize envelope pairs after each update.
    pub conjugate_enforcement: bool,
    /// Initial magnitude for envelope and DC states.
    pub envelope_init: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        let mut q = vec![1e-6; STATE_DIM];
        q[ROT] = 1e-8;
        Self {
            ts: 1.0 / 7680.0,
            nominal_f1: 60.0,
            process_noise_q: q,
            measurement_noise_r: 1e-4,
            initial_covariance_p0: 10.0,
            initial_rotation_covariance: 1e-6,
            dc_decay_alpha: 0.999,
            conjugate_enforcement: true,
            envelope_init: 1e-3,
        }
    }
}

impl EstimatorConfig {
    /// Diagonal Q from per-group variances: `envelope` covers the nine
    /// harmonic pairs, `interharmonic` the 5/4 pair, plus the rotation and
    /// DC states individually.
    pub fn q_diagonal(envelope: f64, rotation: f64, interharmonic: f64, dc: f64) -> Vec<f64> {
        let mut q = vec![envelope; STATE_DIM];
        q[ROT] = rotation;
        q[DC - 2] = interharmonic;
        q[DC - 1] = interharmonic;
        q[DC] = dc;
        q
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        if !(self.ts > 0.0) {
            return Err(EstimatorError::InvalidConfig(format!(
                "ts must be positive, got {}",
                self.ts
            )));
        }
        if !(self.nominal_f1 > 0.0) {
            return Err(EstimatorError::InvalidConfig(format!(
                "nominal_f1 must be positive, got {}",
                self.nominal_f1
            )));
        }
        if self.process_noise_q.len() != STATE_DIM {
            return Err(EstimatorError::InvalidConfig(format!(
                "process_noise_q must have {STATE_DIM} entries, got {}",
                self.process_noise_q.len()
            )));
        }
        if self.process_noise_q.iter().any(|&q| !(q >= 0.0)) {
            return Err(EstimatorError::InvalidConfig(
                "process_noise_q entries must be non-negative".into(),
            ));
        }
        if !(self.measurement_noise_r > 0.0) {
            return Err(EstimatorError::InvalidConfig(format!(
                "measurement_noise_r must be positive, got {}",
                self.measurement_noise_r
            )));
        }
        if !(self.initial_covariance_p0 > 0.0) {
            return Err(EstimatorError::InvalidConfig(format!(
                "initial_covariance_p0 must be positive, got {}",
                self.initial_covariance_p0
            )));
        }
        if !(self.initial_rotation_covariance > 0.0) {
            return Err(EstimatorError::InvalidConfig(format!(
                "initial_rotation_covariance must be positive, got {}",
                self.initial_rotation_covariance
            )));
        }
        if !(self.dc_decay_alpha > 0.0 && self.dc_decay_alpha <= 1.0) {
            return Err(EstimatorError::InvalidConfig(format!(
                "dc_decay_alpha must be in (0, 1], got {}",
                self.dc_decay_alpha
            )));
        }
        Ok(())
    }

    /// Per-sample rotation argument, w1*ts.
    pub fn rotation_arg(&self) -> f64 {
        std::f64::consts::TAU * self.nominal_f1 * self.ts
    }
}

/// Snapshot of the quantities recovered from the state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicEstimates {
    /// Time of the last processed sample, k*ts.
    pub t: f64,
    /// Amplitudes of harmonics 1..=9 in input units; index 0 is the fundamental.
    pub amplitudes: [f64; HARMONIC_COUNT],
    /// Initial phases of harmonics 1..=9, wrapped to [0, 2*pi).
    pub phases: [f64; HARMONIC_COUNT],
    /// Amplitude of the 5/4 inter-harmonic.
    pub interharmonic_amplitude: f64,
    /// Initial phase of the 5/4 inter-harmonic, wrapped to [0, 2*pi).
    pub interharmonic_phase: f64,
    /// Fundamental frequency estimate in Hz.
    pub f1_est_hz: f64,
    /// DC offset estimate (real part of the DC state).
    pub dc_est: f64,
}

#[derive(Debug, Clone)]
pub struct HarmonicEstimator {
    cfg: EstimatorConfig,
    x: DVector<C64>,
    p: DMatrix<C64>,
    h_row: RowDVector<C64>,
    h_col: DVector<C64>,
    k: u64,
    last_innovation: C64,
}

impl HarmonicEstimator {
    pub fn new(cfg: EstimatorConfig) -> Result<Self, EstimatorError> {
        cfg.validate()?;
        let mut x = DVector::from_element(STATE_DIM, C64::new(cfg.envelope_init, 0.0));
        x[ROT] = C64::from_polar(1.0, cfg.rotation_arg());
        let mut p = DMatrix::from_diagonal_element(
            STATE_DIM,
            STATE_DIM,
            C64::new(cfg.initial_covariance_p0, 0.0),
        );
        p[(ROT, ROT)] = C64::new(cfg.initial_rotation_covariance, 0.0);
        let mut h_row = RowDVector::zeros(STATE_DIM);
        for (e, o, _) in pairs() {
            h_row[e] = C64::new(0.0, -0.5);
            h_row[o] = C64::new(0.0, 0.5);
        }
        h_row[DC] = C64::new(1.0, 0.0);
        let h_col = h_row.adjoint();
        Ok(Self {
            cfg,
            x,
            p,
            h_row,
            h_col,
            k: 0,
            last_innovation: C64::new(0.0, 0.0),
        })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.cfg
    }

    /// Samples processed so far.
    pub fn sample_count(&self) -> u64 {
        self.k
    }

    /// Time of the last processed sample.
    pub fn time(&self) -> f64 {
        self.k as f64 * self.cfg.ts
    }

    pub fn state(&self) -> &DVector<C64> {
        &self.x
    }

    pub fn covariance(&self) -> &DMatrix<C64> {
        &self.p
    }

    /// Innovation z - h(x_pred) of the most recent update.
    pub fn last_innovation(&self) -> C64 {
        self.last_innovation
    }

    /// Predicted measurement for the current state.
    pub fn predicted_measurement(&self) -> C64 {
        (&self.h_row * &self.x)[(0, 0)]
    }

    /// State transition applied to an arbitrary vector.
    fn transition(cfg: &EstimatorConfig, x: &DVector<C64>) -> DVector<C64> {
        let x1 = x[ROT];
        let mut out = x.clone();
        for (e, o, m) in pairs() {
            out[e] = cpow(x1, m) * x[e];
            out[o] = cpow(x1, -m) * x[o];
        }
        out[DC] = cfg.dc_decay_alpha * x[DC];
        out
    }

    /// Analytic Jacobian of the transition at `x`. Nonzero entries sit on the
    /// diagonal and in the rotation column.
    fn jacobian(cfg: &EstimatorConfig, x: &DVector<C64>) -> DMatrix<C64> {
        let x1 = x[ROT];
        let mut f = DMatrix::zeros(STATE_DIM, STATE_DIM);
        f[(ROT, ROT)] = C64::new(1.0, 0.0);
        for (e, o, m) in pairs() {
            f[(e, e)] = cpow(x1, m);
            f[(o, o)] = cpow(x1, -m);
            f[(e, ROT)] = m * cpow(x1, m - 1.0) * x[e];
            f[(o, ROT)] = -m * cpow(x1, -m - 1.0) * x[o];
        }
        f[(DC, DC)] = C64::new(cfg.dc_decay_alpha, 0.0);
        f
    }

    /// One application of the state-transition map to an arbitrary state.
    /// Exposed so external checks can difference it against the Jacobian.
    pub fn transition_at(&self, x: &DVector<C64>) -> DVector<C64> {
        Self::transition(&self.cfg, x)
    }

    /// Analytic transition Jacobian at an arbitrary state.
    pub fn jacobian_at(&self, x: &DVector<C64>) -> DMatrix<C64> {
        Self::jacobian(&self.cfg, x)
    }

    pub fn predict(&mut self) -> Result<(), EstimatorError> {
        if self.x[ROT].norm() < 1e-6 {
            return Err(EstimatorError::Diverged {
                step: self.k,
                reason: format!("rotation state collapsed, |x1| = {}", self.x[ROT].norm()),
            });
        }
        let f = Self::jacobian(&self.cfg, &self.x);
        self.x = Self::transition(&self.cfg, &self.x);
        self.p = &f * &self.p * f.adjoint();
        for (i, &q) in self.cfg.process_noise_q.iter().enumerate() {
            self.p[(i, i)] += C64::new(q, 0.0);
        }
        hermitize(&mut self.p);
        Ok(())
    }

    pub fn update(&mut self, z: f64) -> Result<(), EstimatorError> {
        let s = (&self.h_row * &self.p * &self.h_col)[(0, 0)].re + self.cfg.measurement_noise_r;
        if !(s.abs() > 1e-300) {
            return Err(EstimatorError::Diverged {
                step: self.k,
                reason: format!("innovation covariance not invertible, s = {s}"),
            });
        }
        let y = C64::new(z, 0.0) - (&self.h_row * &self.x)[(0, 0)];
        let gain = (&self.p * &self.h_col) / C64::new(s, 0.0);
        self.x += &gain * y;
        let hp = &self.h_row * &self.p;
        self.p -= &gain * &hp;
        hermitize(&mut self.p);
        if self.cfg.conjugate_enforcement {
            for (e, o, _) in pairs() {
                let avg = 0.5 * (self.x[e] + self.x[o].conj());
                self.x[e] = avg;
                self.x[o] = avg.conj();
            }
            // the DC state is self-conjugate (a real offset); letting its
            // imaginary part float gives the complex innovation an unstable
            // feedback path
            self.x[DC] = C64::new(self.x[DC].re, 0.0);
            // the rotation state models a pure phasor e^{j*w1*ts}; unit
            // modulus is an invariant of the signal model, and leaving the
            // magnitude free lets the +-9th powers in the transition amplify
            // any excursion explosively
            let mag = self.x[ROT].norm();
            if mag > 1e-6 {
                self.x[ROT] /= C64::new(mag, 0.0);
            }
        }
        self.last_innovation = y;
        if self.x.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(EstimatorError::Diverged {
                step: self.k,
                reason: "non-finite state".into(),
            });
        }
        Ok(())
    }

    /// Advance one sample: predict, update, extract. The i-th call (1-based)
    /// consumes the sample at t = i*ts, so a record whose first sample sits
    /// at t = 0 streams from its second sample onward.
    pub fn step(&mut self, z: f64) -> Result<HarmonicEstimates, EstimatorError> {
        self.predict()?;
        self.update(z)?;
        self.k += 1;
        Ok(self.estimates())
    }

    /// Recover amplitudes, initial phases, frequency, and DC from the state.
    pub fn estimates(&self) -> HarmonicEstimates {
        let rot_arg = self.x[ROT].arg();
        let k = self.k as f64;
        let mut amplitudes = [0.0; HARMONIC_COUNT];
        let mut phases = [0.0; HARMONIC_COUNT];
        let mut inter_amp = 0.0;
        let mut inter_phase = 0.0;
        for (e, _, m) in pairs() {
            let amp = self.x[e].norm();
            let phase = crate::signal::wrap_phase(self.x[e].arg() - k * m * rot_arg);
            if m == INTERHARMONIC_ORDER {
                inter_amp = amp;
                inter_phase = phase;
            } else {
                amplitudes[m as usize - 1] = amp;
                phases[m as usize - 1] = phase;
            }
        }
        HarmonicEstimates {
            t: self.time(),
            amplitudes,
            phases,
            interharmonic_amplitude: inter_amp,
            interharmonic_phase: inter_phase,
            f1_est_hz: rot_arg / (std::f64::consts::TAU * self.cfg.ts),
            dc_est: self.x[DC].re,
        }
    }
}

fn hermitize(p: &mut DMatrix<C64>) {
    let pa = p.adjoint();
    *p += pa;
    *p *= C64::new(0.5, 0.0);
}
