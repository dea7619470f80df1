//! Synthetic bearing vibration signals with known ground truth.
//!
//! Desk-scale experiments need labeled data whose classes are provably
//! separable; real run-to-failure records are too large to ship. The
//! generator plants periodic impulse responses at the characteristic fault
//! frequency implied by the bearing geometry, so the envelope spectrum of a
//! generated signal peaks where the kinematics say it must — that is the
//! oracle the acceptance tests check against.

use super::{BearingGeometry, Channel, RawRecord};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

/// Fault location, which fixes the impulse repetition frequency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultClass {
    Healthy,
    OuterRace,
    InnerRace,
    Cage,
}

impl FaultClass {
    pub const ALL: [FaultClass; 4] = [
        FaultClass::Healthy,
        FaultClass::OuterRace,
        FaultClass::InnerRace,
        FaultClass::Cage,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FaultClass::Healthy => "healthy",
            FaultClass::OuterRace => "outer_race",
            FaultClass::InnerRace => "inner_race",
            FaultClass::Cage => "cage",
        }
    }
}

impl std::str::FromStr for FaultClass {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "healthy" => Ok(FaultClass::Healthy),
            "outer_race" => Ok(FaultClass::OuterRace),
            "inner_race" => Ok(FaultClass::InnerRace),
            "cage" => Ok(FaultClass::Cage),
            other => Err(format!("unknown fault class {other:?}")),
        }
    }
}

/// Characteristic fault frequencies in Hz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultFrequencies {
    /// Ball-pass frequency, outer race.
    pub bpfo: f64,
    /// Ball-pass frequency, inner race.
    pub bpfi: f64,
    /// Fundamental train (cage) frequency.
    pub ftf: f64,
}

/// Standard bearing kinematics:
///
/// ```text
/// BPFO = (n/2) f_r (1 - (d/D) cos θ)
/// BPFI = (n/2) f_r (1 + (d/D) cos θ)
/// FTF  = (f_r/2) (1 - (d/D) cos θ)
/// ```
///
/// so `BPFO + BPFI = n f_r` for any geometry.
pub fn compute_fault_frequencies(geometry: &BearingGeometry, shaft_hz: f64) -> FaultFrequencies {
    geometry.validate();
    assert!(shaft_hz > 0.0, "shaft frequency must be positive");
    let n = geometry.ball_count as f64;
    let ratio = geometry.ball_diameter_mm / geometry.pitch_diameter_mm;
    let cos_theta = geometry.contact_angle_deg.to_radians().cos();
    let factor = ratio * cos_theta;
    FaultFrequencies {
        bpfo: n / 2.0 * shaft_hz * (1.0 - factor),
        bpfi: n / 2.0 * shaft_hz * (1.0 + factor),
        ftf: shaft_hz / 2.0 * (1.0 - factor),
    }
}

/// Full description of one synthetic record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub geometry: BearingGeometry,
    pub shaft_hz: f64,
    pub fault_class: FaultClass,
    /// Signal-to-noise ratio; `f64::INFINITY` disables noise.
    pub snr_db: f64,
    /// Structural resonance excited by each impact.
    pub resonance_hz: f64,
    /// Exponential decay rate of each impulse response (1/s).
    pub decay: f64,
    pub seed: u64,
    pub duration_s: f64,
    pub sample_rate: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) {
        self.geometry.validate();
        assert!(self.duration_s > 0.0, "duration must be positive");
        assert!(
            self.sample_rate > 2.0 * self.resonance_hz,
            "sample rate {} cannot represent resonance {}",
            self.sample_rate,
            self.resonance_hz
        );
        assert!(self.decay > 0.0, "decay must be positive");
        assert!(self.shaft_hz > 0.0, "shaft frequency must be positive");
    }
}

/// Generate one record.
///
/// Faulted classes are an impulse train at the class's characteristic
/// frequency — each impulse an exponentially decaying sinusoid at
/// `resonance_hz` — plus white Gaussian noise at `snr_db` relative to the
/// train. Healthy is band-limited noise only. Deterministic under
/// `spec.seed`.
pub fn synth_bearing_signal(spec: &SyntheticSpec) -> RawRecord {
    spec.validate();
    let n = (spec.duration_s * spec.sample_rate).round() as usize;
    let fs = spec.sample_rate;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit_normal = Normal::new(0.0, 1.0).expect("valid normal");

    let mut samples = vec![0.0f64; n];

    let fault_hz = match spec.fault_class {
        FaultClass::Healthy => None,
        FaultClass::OuterRace => {
            Some(compute_fault_frequencies(&spec.geometry, spec.shaft_hz).bpfo)
        }
        FaultClass::InnerRace => {
            Some(compute_fault_frequencies(&spec.geometry, spec.shaft_hz).bpfi)
        }
        FaultClass::Cage => Some(compute_fault_frequencies(&spec.geometry, spec.shaft_hz).ftf),
    };

    match fault_hz {
        Some(f) => {
            // Each impact rings until the envelope falls below 1e-12.
            let ring_samples = ((27.7 / spec.decay) * fs).ceil() as usize;
            let period_s = 1.0 / f;
            let impulse_count = (spec.duration_s / period_s).floor() as usize + 1;
            for k in 0..impulse_count {
                let t0 = k as f64 * period_s;
                let start = (t0 * fs).ceil() as usize;
                for i in start..(start + ring_samples).min(n) {
                    let dt = i as f64 / fs - t0;
                    samples[i] +=
                        (-spec.decay * dt).exp() * (2.0 * std::f64::consts::PI
                            * spec.resonance_hz
                            * dt)
                            .sin();
                }
            }
            if spec.snr_db.is_finite() {
                let signal_power =
                    samples.iter().map(|v| v * v).sum::<f64>() / samples.len() as f64;
                let noise_sigma = (signal_power / 10f64.powf(spec.snr_db / 10.0)).sqrt();
                for s in samples.iter_mut() {
                    *s += noise_sigma * unit_normal.sample(&mut rng);
                }
            }
        }
        None => {
            // Healthy: band-limited noise (moving-average-filtered white
            // Gaussian, unit RMS). Infinite SNR means no excitation at all.
            if spec.snr_db.is_finite() {
                let white: Vec<f64> = (0..n).map(|_| unit_normal.sample(&mut rng)).collect();
                let width = 8usize;
                for (i, s) in samples.iter_mut().enumerate() {
                    let lo = i.saturating_sub(width - 1);
                    let window = &white[lo..=i];
                    *s = window.iter().sum::<f64>() / width as f64;
                }
                let rms =
                    (samples.iter().map(|v| v * v).sum::<f64>() / samples.len() as f64).sqrt();
                if rms > 0.0 {
                    for s in samples.iter_mut() {
                        *s /= rms;
                    }
                }
            }
        }
    }

    RawRecord {
        samples,
        channel: Channel::Horizontal,
        sample_rate: fs,
        source_path: format!(
            "synthetic://{}/shaft{}hz/seed{}",
            spec.fault_class.name(),
            spec.shaft_hz,
            spec.seed
        ),
        minute_index: 0,
    }
}

/// Envelope spectrum via the analytic signal.
///
/// Returns `(frequencies, magnitudes)` for bins `0..n/2`; the envelope mean
/// is removed before the transform so the DC bin does not mask the fault
/// line. Bin width is `sample_rate / n`.
pub fn envelope_spectrum(samples: &[f64], sample_rate: f64) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len();
    assert!(n >= 4, "envelope spectrum needs at least 4 samples");
    let mut planner = FftPlanner::new();

    // Analytic signal: zero the negative half of the spectrum, double the
    // positive half, keep DC (and Nyquist for even n).
    let fft = planner.plan_fft_forward(n);
    let mut buf: Vec<Complex<f64>> = samples.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft.process(&mut buf);
    for (k, v) in buf.iter_mut().enumerate() {
        if k == 0 || (n % 2 == 0 && k == n / 2) {
            // unchanged
        } else if k < n.div_ceil(2) {
            *v *= 2.0;
        } else {
            *v = Complex::new(0.0, 0.0);
        }
    }
    let ifft = planner.plan_fft_inverse(n);
    ifft.process(&mut buf);
    let mut envelope: Vec<f64> = buf.iter().map(|c| c.norm() / n as f64).collect();

    let mean = envelope.iter().sum::<f64>() / n as f64;
    for e in envelope.iter_mut() {
        *e -= mean;
    }

    let fft2 = planner.plan_fft_forward(n);
    let mut spec: Vec<Complex<f64>> = envelope.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft2.process(&mut spec);

    let half = n / 2;
    let freqs: Vec<f64> = (0..half).map(|k| k as f64 * sample_rate / n as f64).collect();
    let mags: Vec<f64> = spec[..half].iter().map(|c| c.norm()).collect();
    (freqs, mags)
}

/// Index of the dominant envelope-spectrum line, ignoring bins below
/// `min_hz` (DC leakage region).
pub fn dominant_envelope_peak(freqs: &[f64], mags: &[f64], min_hz: f64) -> usize {
    let mut best = 0;
    let mut best_mag = f64::NEG_INFINITY;
    for (k, (&f, &m)) in freqs.iter().zip(mags).enumerate() {
        if f >= min_hz && m > best_mag {
            best = k;
            best_mag = m;
        }
    }
    best
}
