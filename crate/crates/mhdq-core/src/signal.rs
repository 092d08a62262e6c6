//! Analog test-signal generation and parameterized FlashADC models.
//!
//! The quantizer is mid-tread with offset-binary codes (0 ... 2^bits-1),
//! saturating at the rails. Input-referred Gaussian noise is added in volts
//! before quantization, so a noise calibration carries over between devices
//! with different sampling rates. All timing is in integer picoseconds so the
//! 8 ns (125 MHz) and 1 ns (1 GHz) sample periods are exact.

use std::f64::consts::TAU;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SignalError {
    #[error("invalid ADC spec: {0}")]
    InvalidSpec(String),
    #[error("invalid sine spec: {0}")]
    InvalidSine(String),
    #[error("a record needs at least one sample")]
    EmptyRecord,
}

/// Quantizer model parameters for one ADC device.
#[derive(Debug, Clone, PartialEq)]
pub struct AdcSpec {
    /// Resolution in bits, 1..=24.
    pub bits: u32,
    pub sampling_rate_hz: f64,
    /// Peak input voltage; the input range is +/- this value.
    pub full_scale_v: f64,
    /// Input-referred Gaussian noise sigma in volts.
    pub noise_rms_v: f64,
    pub n_channels: u32,
}

impl AdcSpec {
    pub fn new(
        bits: u32,
        sampling_rate_hz: f64,
        full_scale_v: f64,
        noise_rms_v: f64,
        n_channels: u32,
    ) -> Result<Self, SignalError> {
        let spec = Self {
            bits,
            sampling_rate_hz,
            full_scale_v,
            noise_rms_v,
            n_channels,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        if !(1..=24).contains(&self.bits) {
            return Err(SignalError::InvalidSpec(format!(
                "bits must be 1..=24, got {}",
                self.bits
            )));
        }
        if !(self.sampling_rate_hz > 0.0) || !self.sampling_rate_hz.is_finite() {
            return Err(SignalError::InvalidSpec(format!(
                "sampling_rate_hz must be positive, got {}",
                self.sampling_rate_hz
            )));
        }
        if !(self.full_scale_v > 0.0) || !self.full_scale_v.is_finite() {
            return Err(SignalError::InvalidSpec(format!(
                "full_scale_v must be positive, got {}",
                self.full_scale_v
            )));
        }
        if !(self.noise_rms_v >= 0.0) || !self.noise_rms_v.is_finite() {
            return Err(SignalError::InvalidSpec(format!(
                "noise_rms_v must be >= 0, got {}",
                self.noise_rms_v
            )));
        }
        if self.n_channels < 1 {
            return Err(SignalError::InvalidSpec(
                "n_channels must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn levels(&self) -> u64 {
        1u64 << self.bits
    }

    pub fn max_code(&self) -> u32 {
        (self.levels() - 1) as u32
    }

    /// Code emitted for a 0 V input (mid-scale of the mid-tread quantizer).
    pub fn mid_code(&self) -> u32 {
        1u32 << (self.bits - 1)
    }

    /// Quantization step in volts.
    pub fn lsb_v(&self) -> f64 {
        2.0 * self.full_scale_v / self.levels() as f64
    }

    /// Sample period rounded to integer picoseconds.
    pub fn sample_period_ps(&self) -> u64 {
        (1e12 / self.sampling_rate_hz).round() as u64
    }

    /// Sampling rate implied by the integer picosecond grid.
    pub fn grid_rate_hz(&self) -> f64 {
        1e12 / self.sample_period_ps() as f64
    }

    /// Quantize one voltage: round to the nearest code, saturate at the rails.
    pub fn quantize(&self, v: f64) -> u32 {
        let code = (v / self.lsb_v()).round() as i64 + i64::from(self.mid_code());
        code.clamp(0, i64::from(self.max_code())) as u32
    }

    /// Reconstruction voltage of a code (inverse of `quantize` up to the step).
    pub fn code_to_volts(&self, code: u32) -> f64 {
        (i64::from(code) - i64::from(self.mid_code())) as f64 * self.lsb_v()
    }
}

/// A pure test tone: `amplitude·sin(2π f t + phase) + offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SineSpec {
    pub amplitude_v: f64,
    pub frequency_hz: f64,
    pub phase_rad: f64,
    pub offset_v: f64,
}

impl SineSpec {
    pub fn new(
        amplitude_v: f64,
        frequency_hz: f64,
        phase_rad: f64,
        offset_v: f64,
    ) -> Result<Self, SignalError> {
        if !(amplitude_v >= 0.0) || !amplitude_v.is_finite() {
            return Err(SignalError::InvalidSine(format!(
                "amplitude_v must be >= 0, got {amplitude_v}"
            )));
        }
        if !(frequency_hz > 0.0) || !frequency_hz.is_finite() {
            return Err(SignalError::InvalidSine(format!(
                "frequency_hz must be positive, got {frequency_hz}"
            )));
        }
        Ok(Self {
            amplitude_v,
            frequency_hz,
            phase_rad,
            offset_v,
        })
    }

    pub fn value_at(&self, t_s: f64) -> f64 {
        self.amplitude_v * (TAU * self.frequency_hz * t_s + self.phase_rad).sin() + self.offset_v
    }

    /// A tone with exactly `cycles` periods over `n_samples` of the ADC's
    /// picosecond sample grid, so records of that length have no spectral
    /// leakage.
    pub fn coherent(
        adc: &AdcSpec,
        n_samples: usize,
        cycles: u64,
        amplitude_v: f64,
    ) -> Result<Self, SignalError> {
        if n_samples == 0 {
            return Err(SignalError::EmptyRecord);
        }
        let record_s = n_samples as f64 * adc.sample_period_ps() as f64 * 1e-12;
        Self::new(amplitude_v, cycles as f64 / record_s, 0.0, 0.0)
    }
}

/// Default ENOB test tone: -0.45 dBFS amplitude at a coherent frequency
/// `J/N·fs` with J odd and coprime to the record length N.
pub fn default_test_tone(adc: &AdcSpec, n_samples: usize) -> Result<SineSpec, SignalError> {
    let cycles = coherent_cycles(n_samples);
    SineSpec::coherent(adc, n_samples, cycles, 0.95 * adc.full_scale_v)
}

/// Largest odd J <= N/5 (at least 1) with gcd(J, N) = 1.
pub fn coherent_cycles(n_samples: usize) -> u64 {
    let n = n_samples as u64;
    let mut j = (n / 5).max(1) | 1;
    while j > 1 && gcd(j, n) != 1 {
        j -= 2;
    }
    j
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// A block of digitized sample codes with its timing and producing model.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub codes: Vec<u32>,
    /// Time of the first sample, picoseconds since run start.
    pub t0_ps: u64,
    pub sample_period_ps: u64,
    pub spec: AdcSpec,
}

impl Waveform {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Reconstruction voltages of all codes.
    pub fn volts(&self) -> Vec<f64> {
        self.codes
            .iter()
            .map(|&c| self.spec.code_to_volts(c))
            .collect()
    }
}

/// Digitize `n_samples` of a sine through the ADC model. Deterministic for a
/// fixed seed; the unit-noise stream depends only on the seed, so sweeping
/// `noise_rms_v` rescales one fixed realization.
pub fn digitize(
    spec: &AdcSpec,
    sine: &SineSpec,
    n_samples: usize,
    seed: u64,
) -> Result<Waveform, SignalError> {
    spec.validate()?;
    if n_samples == 0 {
        return Err(SignalError::EmptyRecord);
    }
    let period_ps = spec.sample_period_ps();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codes = (0..n_samples)
        .map(|i| {
            let t_s = (i as u64 * period_ps) as f64 * 1e-12;
            let z: f64 = StandardNormal.sample(&mut rng);
            spec.quantize(sine.value_at(t_s) + spec.noise_rms_v * z)
        })
        .collect();
    Ok(Waveform {
        codes,
        t0_ps: 0,
        sample_period_ps: period_ps,
        spec: spec.clone(),
    })
}

/// Digitize a constant input level (a zero-amplitude tone).
pub fn digitize_dc(
    spec: &AdcSpec,
    level_v: f64,
    n_samples: usize,
    seed: u64,
) -> Result<Waveform, SignalError> {
    let dc = SineSpec {
        amplitude_v: 0.0,
        frequency_hz: 1.0,
        phase_rad: 0.0,
        offset_v: level_v,
    };
    digitize(spec, &dc, n_samples, seed)
}
