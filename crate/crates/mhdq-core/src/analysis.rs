//! SINAD/ENOB measurement from digitized sine records, and noise-model
//! calibration against a target ENOB.
//!
//! SINAD comes from time-domain residuals of a four-parameter least-squares
//! sine fit (three-parameter linear fit at a frequency guess, then Newton
//! refinement of the frequency). No windowing or FFT is involved, so coherent
//! records give exact answers. ENOB uses the full-scale convention
//! `(SINAD - 1.76) / 6.02` with no level correction; the default test tone is
//! near full scale by construction.

use std::f64::consts::TAU;
use std::fmt::Write as _;

use thiserror::Error;

use crate::signal::{self, AdcSpec, SineSpec, Waveform};

/// Iteration cap for the frequency refinement.
pub const FIT_MAX_ITERATIONS: u32 = 50;
/// Convergence threshold on the relative frequency update.
pub const FIT_REL_FREQ_TOL: f64 = 1e-9;
/// Minimum record length accepted by the fit.
pub const MIN_FIT_SAMPLES: usize = 16;
/// Default calibration tolerance in bits.
pub const DEFAULT_CALIBRATION_TOLERANCE_BITS: f64 = 0.05;

const CALIBRATION_RECORDS: u32 = 8;
const CALIBRATION_SAMPLES: u32 = 8192;
const CALIBRATION_SEED: u64 = 0x5eed;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("record too short for a sine fit ({0} samples, need >= {MIN_FIT_SAMPLES})")]
    TooFewSamples(usize),
    #[error("degenerate fit: {0}")]
    DegenerateFit(&'static str),
    #[error("no record of the batch produced a converged fit")]
    NoConvergedRecords,
    #[error("calibration target unreachable: {0}")]
    Unreachable(String),
    #[error(transparent)]
    Signal(#[from] signal::SignalError),
}

/// Result of a four-parameter sine fit. `converged` is false when the
/// iteration cap was hit; the caller decides whether to accept the values.
#[derive(Debug, Clone, PartialEq)]
pub struct SineFit {
    pub amplitude_v: f64,
    pub frequency_hz: f64,
    /// Phase at the first sample of the record.
    pub phase_rad: f64,
    pub offset_v: f64,
    pub residual_rms_v: f64,
    pub converged: bool,
    pub iterations: u32,
}

impl SineFit {
    /// Evaluate the fitted model at a time relative to the record start.
    pub fn value_at(&self, t_s: f64) -> f64 {
        self.amplitude_v * (TAU * self.frequency_hz * t_s + self.phase_rad).sin() + self.offset_v
    }
}

/// Solve a small dense linear system in place by Gaussian elimination with
/// partial pivoting. Returns None when a pivot collapses (singular system).
fn solve_dense(a: &mut [[f64; 4]; 4], b: &mut [f64; 4], n: usize) -> Option<[f64; 4]> {
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if a[row][col].abs() > a[pivot][col].abs() {
                pivot = row;
            }
        }
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for col in (0..n).rev() {
        let mut s = b[col];
        for k in col + 1..n {
            s -= a[col][k] * x[k];
        }
        x[col] = s / a[col][col];
    }
    Some(x)
}

/// Three-parameter linear fit `y = A cos(w t) + B sin(w t) + C` at fixed w.
fn three_param_fit(y: &[f64], dt_s: f64, omega: f64) -> Option<(f64, f64, f64)> {
    let n = y.len() as f64;
    let (mut scc, mut scs, mut sc, mut sss, mut ss) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut scy, mut ssy, mut sy) = (0.0, 0.0, 0.0);
    for (i, &yi) in y.iter().enumerate() {
        let (s, c) = (omega * i as f64 * dt_s).sin_cos();
        scc += c * c;
        scs += c * s;
        sc += c;
        sss += s * s;
        ss += s;
        scy += c * yi;
        ssy += s * yi;
        sy += yi;
    }
    let mut m = [
        [scc, scs, sc, 0.0],
        [scs, sss, ss, 0.0],
        [sc, ss, n, 0.0],
        [0.0; 4],
    ];
    let mut rhs = [scy, ssy, sy, 0.0];
    solve_dense(&mut m, &mut rhs, 3).map(|x| (x[0], x[1], x[2]))
}

fn residual_rms(y: &[f64], dt_s: f64, a: f64, b: f64, c: f64, omega: f64) -> f64 {
    let ss: f64 = y
        .iter()
        .enumerate()
        .map(|(i, &yi)| {
            let (s, co) = (omega * i as f64 * dt_s).sin_cos();
            let r = yi - (a * co + b * s + c);
            r * r
        })
        .sum();
    (ss / y.len() as f64).sqrt()
}

/// One Newton pass from a frequency guess. Returns the refined parameters and
/// whether the frequency update converged.
fn four_param_refine(y: &[f64], dt_s: f64, omega0: f64) -> Option<(f64, f64, f64, f64, bool, u32)> {
    let (mut a, mut b, mut c) = three_param_fit(y, dt_s, omega0)?;
    let mut omega = omega0;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < FIT_MAX_ITERATIONS {
        iterations += 1;
        // Linearized model: columns cos, sin, 1, and d/dw of the sine model.
        let mut m = [[0.0f64; 4]; 4];
        let mut rhs = [0.0f64; 4];
        for (i, &yi) in y.iter().enumerate() {
            let t = i as f64 * dt_s;
            let (s, co) = (omega * t).sin_cos();
            let d = t * (-a * s + b * co);
            let row = [co, s, 1.0, d];
            for (j, rj) in row.iter().enumerate() {
                for (k, rk) in row.iter().enumerate() {
                    m[j][k] += rj * rk;
                }
                rhs[j] += rj * yi;
            }
        }
        // A singular system (e.g. a DC record, where the frequency column
        // vanishes) leaves the three-parameter result flagged unconverged.
        let Some(x) = solve_dense(&mut m, &mut rhs, 4) else {
            return Some((a, b, c, omega, false, iterations));
        };
        a = x[0];
        b = x[1];
        c = x[2];
        let domega = x[3];
        let next = omega + domega;
        if !(next > 0.0) || !next.is_finite() {
            return Some((a, b, c, omega, false, iterations));
        }
        omega = next;
        if (domega / omega).abs() < FIT_REL_FREQ_TOL {
            converged = true;
            break;
        }
    }
    // Final exact linear fit at the refined frequency.
    if let Some((fa, fb, fc)) = three_param_fit(y, dt_s, omega) {
        a = fa;
        b = fb;
        c = fc;
    }
    Some((a, b, c, omega, converged, iterations))
}

/// Fit a sine to a digitized record. `f_guess_hz` must be within about 5% of
/// the true tone frequency; a coarse scan over that band recovers the basin
/// when the direct Newton pass fails to converge.
pub fn sine_fit(waveform: &Waveform, f_guess_hz: f64) -> Result<SineFit, AnalysisError> {
    if waveform.len() < MIN_FIT_SAMPLES {
        return Err(AnalysisError::TooFewSamples(waveform.len()));
    }
    let y = waveform.volts();
    let dt_s = waveform.sample_period_ps as f64 * 1e-12;
    let omega_guess = TAU * f_guess_hz;

    let mut best = four_param_refine(&y, dt_s, omega_guess);
    let needs_scan = match &best {
        Some((.., converged, _)) => !converged,
        None => true,
    };
    if needs_scan {
        // Scan around the guess with a grid fine enough to land inside the
        // Newton basin. A guess 5% below the true frequency puts the truth
        // 5.3% above the guess, so the scan spans slightly more than 5%.
        let span = 0.06 * omega_guess;
        let steps = 160usize;
        let mut scan_best: Option<(f64, f64)> = None; // (rms, omega)
        for k in 0..=steps {
            let w = omega_guess - span + 2.0 * span * k as f64 / steps as f64;
            if let Some((a, b, c)) = three_param_fit(&y, dt_s, w) {
                let rms = residual_rms(&y, dt_s, a, b, c, w);
                if scan_best.map_or(true, |(r, _)| rms < r) {
                    scan_best = Some((rms, w));
                }
            }
        }
        if let Some((_, w)) = scan_best {
            if let Some(refined) = four_param_refine(&y, dt_s, w) {
                let take = match &best {
                    Some((.., c0, _)) => refined.4 || !c0,
                    None => true,
                };
                if take {
                    best = Some(refined);
                }
            }
        }
    }

    let (a, b, c, omega, converged, iterations) =
        best.ok_or(AnalysisError::DegenerateFit("singular fit system"))?;
    let rms = residual_rms(&y, dt_s, a, b, c, omega);
    Ok(SineFit {
        amplitude_v: a.hypot(b),
        frequency_hz: omega / TAU,
        phase_rad: a.atan2(b),
        offset_v: c,
        residual_rms_v: rms,
        converged,
        iterations,
    })
}

/// SINAD in dB from fit residuals: `20·log10((amplitude/√2)/residual_rms)`.
pub fn sinad_db(fit: &SineFit) -> Result<f64, AnalysisError> {
    if !(fit.amplitude_v > 0.0) {
        return Err(AnalysisError::DegenerateFit("fitted amplitude is zero"));
    }
    if !(fit.residual_rms_v > 0.0) {
        // A zero residual means infinite SINAD; reported distinctly rather
        // than as a huge number.
        return Err(AnalysisError::DegenerateFit(
            "zero residual (SINAD is +infinity)",
        ));
    }
    Ok(20.0 * ((fit.amplitude_v / std::f64::consts::SQRT_2) / fit.residual_rms_v).log10())
}

/// ENOB in bits from SINAD in dB.
pub fn enob(sinad_db: f64) -> f64 {
    (sinad_db - 1.76) / 6.02
}

/// Per-record outcome inside an [`EnobReport`].
#[derive(Debug, Clone, PartialEq)]
pub struct RecordResult {
    pub index: u32,
    pub sinad_db: f64,
    pub enob_bits: f64,
}

/// Aggregated ENOB measurement over a batch of records.
///
/// The aggregate SINAD pools signal power and residual power across records
/// (a ratio of sums), which keeps the aggregate between the per-record
/// extremes.
#[derive(Debug, Clone, PartialEq)]
pub struct EnobReport {
    pub sinad_db: f64,
    pub enob_bits: f64,
    pub spec: AdcSpec,
    pub tone: SineSpec,
    pub n_records: u32,
    pub samples_per_record: u32,
    pub per_record: Vec<RecordResult>,
    /// Indices of records whose fit did not converge (excluded from the
    /// aggregate).
    pub excluded_records: Vec<u32>,
}

impl EnobReport {
    /// Line-oriented text table for console output.
    pub fn text_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "ADC model: {}-bit {:.6} MHz, full scale +/-{} V, noise {:.3e} V rms, {} ch",
            self.spec.bits,
            self.spec.sampling_rate_hz / 1e6,
            self.spec.full_scale_v,
            self.spec.noise_rms_v,
            self.spec.n_channels,
        );
        let _ = writeln!(
            out,
            "tone: {:.6} V at {:.6} MHz; {} records x {} samples",
            self.tone.amplitude_v,
            self.tone.frequency_hz / 1e6,
            self.n_records,
            self.samples_per_record,
        );
        let _ = writeln!(out, "{:>12}  {:>10}  {:>10}", "record_index", "sinad_db", "enob_bits");
        for r in &self.per_record {
            let _ = writeln!(
                out,
                "{:>12}  {:>10.3}  {:>10.3}",
                r.index, r.sinad_db, r.enob_bits
            );
        }
        for x in &self.excluded_records {
            let _ = writeln!(out, "{x:>12}  {:>10}  {:>10}", "excluded", "excluded");
        }
        let _ = writeln!(
            out,
            "aggregate: SINAD {:.3} dB, ENOB {:.3} bits",
            self.sinad_db, self.enob_bits
        );
        out
    }

    /// Comma-separated per-record values for plotting.
    pub fn csv(&self) -> String {
        let mut out = String::from("record_index,sinad_db,enob_bits\n");
        for r in &self.per_record {
            let _ = writeln!(out, "{},{:.6},{:.6}", r.index, r.sinad_db, r.enob_bits);
        }
        out
    }
}

/// Digitize and fit `n_records` independent records (per-record seed is
/// `seed + index`), pooling SINAD over all converged records.
pub fn characterize(
    spec: &AdcSpec,
    tone: &SineSpec,
    n_records: u32,
    samples_per_record: u32,
    seed: u64,
) -> Result<EnobReport, AnalysisError> {
    assert!(n_records >= 1, "n_records must be >= 1");
    let mut per_record = Vec::new();
    let mut excluded = Vec::new();
    let mut signal_power_sum = 0.0;
    let mut noise_power_sum = 0.0;
    for r in 0..n_records {
        let w = signal::digitize(
            spec,
            tone,
            samples_per_record as usize,
            seed.wrapping_add(u64::from(r)),
        )?;
        let fit = sine_fit(&w, tone.frequency_hz)?;
        if !fit.converged {
            excluded.push(r);
            continue;
        }
        let s = sinad_db(&fit)?;
        per_record.push(RecordResult {
            index: r,
            sinad_db: s,
            enob_bits: enob(s),
        });
        signal_power_sum += fit.amplitude_v * fit.amplitude_v / 2.0;
        noise_power_sum += fit.residual_rms_v * fit.residual_rms_v;
    }
    if per_record.is_empty() {
        return Err(AnalysisError::NoConvergedRecords);
    }
    let aggregate_sinad = 10.0 * (signal_power_sum / noise_power_sum).log10();
    Ok(EnobReport {
        sinad_db: aggregate_sinad,
        enob_bits: enob(aggregate_sinad),
        spec: spec.clone(),
        tone: *tone,
        n_records,
        samples_per_record,
        per_record,
        excluded_records: excluded,
    })
}

/// Find the input-referred noise sigma that makes `characterize` hit
/// `target_enob` within `tolerance`, by bisection on the (monotone) ENOB
/// versus sigma curve. The bracket is [lsb/100, full_scale_v].
pub fn calibrate_noise(
    spec_without_noise: &AdcSpec,
    tone: &SineSpec,
    target_enob: f64,
    tolerance: f64,
) -> Result<f64, AnalysisError> {
    assert!(tolerance > 0.0, "tolerance must be positive");
    if target_enob >= f64::from(spec_without_noise.bits) {
        return Err(AnalysisError::Unreachable(format!(
            "target {target_enob} bits is not below the {}-bit resolution",
            spec_without_noise.bits
        )));
    }
    let eval = |sigma: f64| -> Result<f64, AnalysisError> {
        let mut spec = spec_without_noise.clone();
        spec.noise_rms_v = sigma;
        Ok(characterize(
            &spec,
            tone,
            CALIBRATION_RECORDS,
            CALIBRATION_SAMPLES,
            CALIBRATION_SEED,
        )?
        .enob_bits)
    };
    let mut lo = spec_without_noise.lsb_v() / 100.0;
    let mut hi = spec_without_noise.full_scale_v;
    let enob_lo = eval(lo)?;
    if (enob_lo - target_enob).abs() <= tolerance {
        return Ok(lo);
    }
    if enob_lo < target_enob {
        return Err(AnalysisError::Unreachable(format!(
            "target {target_enob} bits exceeds the noise-free ENOB {enob_lo:.3}"
        )));
    }
    let enob_hi = eval(hi)?;
    if enob_hi > target_enob + tolerance {
        return Err(AnalysisError::Unreachable(format!(
            "target {target_enob} bits is below the ENOB {enob_hi:.3} at maximum noise"
        )));
    }
    for _ in 0..60 {
        let mid = (lo * hi).sqrt();
        let e = eval(mid)?;
        if (e - target_enob).abs() <= tolerance * 0.5 {
            return Ok(mid);
        }
        if e > target_enob {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(AnalysisError::Unreachable(
        "bisection did not settle within the tolerance".into(),
    ))
}

/// A named ADC model with its measured-ENOB calibration target and the
/// datasheet reference value it is contrasted against.
#[derive(Debug, Clone)]
pub struct AdcPreset {
    pub name: &'static str,
    pub label: &'static str,
    pub spec_noise_free: AdcSpec,
    pub target_enob_bits: f64,
    pub datasheet_enob_bits: f64,
}

/// The two board models: the 8-channel 12-bit 125 MHz main ADC and the
/// 2-channel 16-bit 1 GHz sub-board ADC.
pub fn presets() -> Vec<AdcPreset> {
    vec![
        AdcPreset {
            name: "cosmoz-125m",
            label: "12-bit 125 MHz FlashADC",
            spec_noise_free: AdcSpec::new(12, 125e6, 1.0, 0.0, 8).unwrap(),
            target_enob_bits: 11.8,
            datasheet_enob_bits: 12.0,
        },
        AdcPreset {
            name: "sub-1g",
            label: "16-bit 1 GHz FlashADC",
            spec_noise_free: AdcSpec::new(16, 1e9, 1.0, 0.0, 2).unwrap(),
            target_enob_bits: 11.3,
            datasheet_enob_bits: 11.8,
        },
    ]
}

pub fn preset(name: &str) -> Option<AdcPreset> {
    presets().into_iter().find(|p| p.name == name)
}

/// Calibrate a preset's noise model and characterize it. Returns the
/// calibrated sigma together with the report.
pub fn characterize_preset(
    preset: &AdcPreset,
    n_records: u32,
    samples_per_record: u32,
    seed: u64,
) -> Result<(f64, EnobReport), AnalysisError> {
    let tone = signal::default_test_tone(&preset.spec_noise_free, samples_per_record as usize)?;
    let sigma = calibrate_noise(
        &preset.spec_noise_free,
        &tone,
        preset.target_enob_bits,
        DEFAULT_CALIBRATION_TOLERANCE_BITS,
    )?;
    let mut spec = preset.spec_noise_free.clone();
    spec.noise_rms_v = sigma;
    let report = characterize(&spec, &tone, n_records, samples_per_record, seed)?;
    Ok((sigma, report))
}
