//! Synthetic surrogate recordings with injected change-point anomalies.
//!
//! Every recording is a sum of sinusoids with a random phase per component
//! plus white Gaussian noise. Anomalous recordings receive exactly one
//! anomaly starting at a seeded change point in the middle half of the
//! recording:
//!
//! * `step_shift`: a constant offset of `magnitude * sigma` from the change
//!   point to the end.
//! * `amplitude_burst`: extra Gaussian noise with standard deviation
//!   `magnitude * sigma` for [`BURST_LEN`] samples.
//! * `frequency_shift`: a new spectral line of amplitude `magnitude * sigma`
//!   at [`SHIFT_FACTOR`] times the dominant component frequency, from the
//!   change point to the end.

use serde::{Deserialize, Serialize};

use crate::engine::RngStream;
use crate::error::{Error, Result};
use crate::ingest::{Dataset, Label, RawSequence};

pub const SAMPLE_RATE_HZ: f64 = 1000.0;
pub const BURST_LEN: usize = 512;
pub const SHIFT_FACTOR: f64 = 3.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    StepShift,
    AmplitudeBurst,
    FrequencyShift,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sinusoid {
    pub amplitude: f64,
    pub frequency_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_normal: usize,
    pub n_anomalous: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub components: Vec<Sinusoid>,
    pub noise_sigma: f64,
    pub kinds: Vec<AnomalyKind>,
    /// Anomaly magnitude range in units of `noise_sigma`.
    pub magnitude_range: (f64, f64),
    /// Smallest window the data is meant for; `min_len` must cover it.
    pub window_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_normal: 200,
            n_anomalous: 60,
            min_len: 4096,
            max_len: 16384,
            components: vec![
                Sinusoid {
                    amplitude: 2.0,
                    frequency_hz: 5.0,
                },
                Sinusoid {
                    amplitude: 1.0,
                    frequency_hz: 13.0,
                },
            ],
            noise_sigma: 1.0,
            kinds: vec![AnomalyKind::StepShift, AnomalyKind::AmplitudeBurst, AnomalyKind::FrequencyShift],
            magnitude_range: (3.0, 8.0),
            window_size: 2048,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_len < self.window_size || self.min_len < 4 {
            return Err(Error::config(format!(
                "min length {} is shorter than the window size {}",
                self.min_len, self.window_size
            )));
        }
        if self.max_len < self.min_len {
            return Err(Error::config("max length below min length"));
        }
        let (lo, hi) = self.magnitude_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::config("anomaly magnitudes must be positive"));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise sigma must be positive"));
        }
        if self.n_anomalous > 0 && self.kinds.is_empty() {
            return Err(Error::config("anomalous sequences requested but no anomaly kinds"));
        }
        if self.n_normal + self.n_anomalous == 0 {
            return Err(Error::config("dataset would be empty"));
        }
        Ok(())
    }
}

/// A description of what was injected, for tests and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Injection {
    pub kind: AnomalyKind,
    pub at: usize,
    pub magnitude: f64,
}

fn base_signal(cfg: &SynthConfig, len: usize, rng: &mut RngStream) -> Vec<f64> {
    let phases: Vec<f64> = cfg
        .components
        .iter()
        .map(|_| rng.uniform_range(0.0, std::f64::consts::TAU))
        .collect();
    (0..len)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE_HZ;
            let clean: f64 = cfg
                .components
                .iter()
                .zip(&phases)
                .map(|(c, ph)| c.amplitude * (std::f64::consts::TAU * c.frequency_hz * t + ph).sin())
                .sum();
            clean + cfg.noise_sigma * rng.normal()
        })
        .collect()
}

fn inject(cfg: &SynthConfig, samples: &mut [f64], rng: &mut RngStream) -> Injection {
    let len = samples.len();
    let kind = cfg.kinds[rng.int_inclusive(0, cfg.kinds.len() - 1)];
    let magnitude = rng.uniform_range(cfg.magnitude_range.0, cfg.magnitude_range.1);
    let at = rng.int_inclusive(len / 4, (3 * len / 4).max(len / 4));
    let size = magnitude * cfg.noise_sigma;
    match kind {
        AnomalyKind::StepShift => samples[at..].iter_mut().for_each(|x| *x += size),
        AnomalyKind::AmplitudeBurst => {
            let end = (at + BURST_LEN).min(len);
            samples[at..end].iter_mut().for_each(|x| *x += size * rng.normal());
        }
        AnomalyKind::FrequencyShift => {
            let f0 = cfg
                .components
                .iter()
                .max_by(|a, b| a.amplitude.total_cmp(&b.amplitude))
                .map_or(5.0, |c| c.frequency_hz);
            let f = SHIFT_FACTOR * f0;
            let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
            for (i, x) in samples.iter_mut().enumerate().skip(at) {
                let t = (i - at) as f64 / SAMPLE_RATE_HZ;
                *x += size * (std::f64::consts::TAU * f * t + phase).sin();
            }
        }
    }
    Injection { kind, at, magnitude }
}

/// Generates the surrogate dataset and what was injected into each anomalous
/// sequence (in order).
pub fn generate_with_log(cfg: &SynthConfig) -> Result<(Dataset, Vec<Injection>)> {
    cfg.validate()?;
    let mut rng = RngStream::new(cfg.seed);
    let mut sequences = Vec::with_capacity(cfg.n_normal + cfg.n_anomalous);
    let mut log = Vec::with_capacity(cfg.n_anomalous);
    for i in 0..cfg.n_normal + cfg.n_anomalous {
        let len = rng.int_inclusive(cfg.min_len, cfg.max_len);
        let mut samples = base_signal(cfg, len, &mut rng);
        let seq = if i < cfg.n_normal {
            RawSequence::new(format!("n{i:04}"), samples, Label::Normal, None)?
        } else {
            let inj = inject(cfg, &mut samples, &mut rng);
            log.push(inj);
            RawSequence::new(format!("a{:04}", i - cfg.n_normal), samples, Label::Anomalous, Some(inj.at))?
        };
        sequences.push(seq);
    }
    Ok((Dataset::new(format!("synth-{}", cfg.seed), sequences)?, log))
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    generate_with_log(cfg).map(|(d, _)| d)
}
