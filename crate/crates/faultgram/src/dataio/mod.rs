//! Vibration-record ingestion, windowing, splits, and the synthetic signal
//! generator used as the desk-scale ground-truth oracle.

mod synth;
mod xjtu;

pub use synth::{
    compute_fault_frequencies, dominant_envelope_peak, envelope_spectrum, synth_bearing_signal,
    FaultClass, FaultFrequencies, SyntheticSpec,
};
pub use xjtu::{load_xjtu_csv, LoadedRecord};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: header has no {channel} column")]
    MissingColumn { path: String, channel: String },
    #[error("{path}: row {row}: {detail}")]
    ParseError {
        path: String,
        row: usize,
        detail: String,
    },
    #[error("window length {window_len} exceeds record length {record_len}")]
    WindowTooLong {
        window_len: usize,
        record_len: usize,
    },
    #[error("class {label} has {count} windows; stratified split needs at least 3")]
    InsufficientClassSamples { label: usize, count: usize },
    #[error("split fractions sum to {sum}, expected 1")]
    BadSplitFractions { sum: f64 },
    #[error("data i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Which of the two accelerometer channels in an XJTU-SY file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Horizontal,
    Vertical,
}

impl std::fmt::Display for Channel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Channel::Horizontal => write!(f, "horizontal"),
            Channel::Vertical => write!(f, "vertical"),
        }
    }
}

/// One channel of one sampling file, as loaded from disk or synthesized.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawRecord {
    /// Acceleration values (g).
    pub samples: Vec<f64>,
    pub channel: Channel,
    /// Hz; always taken from configuration, never inferred from files.
    pub sample_rate: f64,
    pub source_path: String,
    /// File ordinal within a run (XJTU-SY files are one per minute).
    pub minute_index: u32,
}

/// Where a window came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordRef {
    pub source_path: String,
    pub channel: Channel,
    /// Sample offset of the window start within the source record.
    pub offset: usize,
}

/// A fixed-length labeled slice of one vibration channel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignalWindow {
    pub values: Vec<f64>,
    pub label: usize,
    pub label_name: String,
    pub record_ref: RecordRef,
}

/// Train/val/test proportions and the seed that fixes the assignment.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
    pub stratified: bool,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let sum = self.train_fraction + self.val_fraction + self.test_fraction;
        let positive =
            self.train_fraction > 0.0 && self.val_fraction > 0.0 && self.test_fraction > 0.0;
        if !positive || (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::BadSplitFractions { sum });
        }
        Ok(())
    }
}

/// Rolling-element bearing geometry (Table 2 of the paper for XJTU-SY).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BearingGeometry {
    pub ball_count: u32,
    pub ball_diameter_mm: f64,
    pub pitch_diameter_mm: f64,
    pub contact_angle_deg: f64,
}

impl BearingGeometry {
    /// LDK UER204 test bearing (XJTU-SY).
    pub fn xjtu_ldk_uer204() -> Self {
        BearingGeometry {
            ball_count: 8,
            ball_diameter_mm: 7.92,
            pitch_diameter_mm: 34.55,
            contact_angle_deg: 0.0,
        }
    }

    pub fn validate(&self) {
        assert!(self.ball_count >= 1, "bearing needs at least one ball");
        assert!(
            self.ball_diameter_mm < self.pitch_diameter_mm,
            "ball diameter must be smaller than pitch diameter"
        );
    }
}

/// Cut a record into windows of `window_len` every `stride` samples.
///
/// Returns `floor((N - window_len)/stride) + 1` windows; each records its
/// starting offset so the source region can be reconstructed.
pub fn segment_windows(
    record: &RawRecord,
    window_len: usize,
    stride: usize,
    label: usize,
    label_name: &str,
) -> Result<Vec<SignalWindow>, DataError> {
    assert!(window_len >= 2, "window_len must be at least 2");
    assert!(stride >= 1, "stride must be at least 1");
    let n = record.samples.len();
    if window_len > n {
        return Err(DataError::WindowTooLong {
            window_len,
            record_len: n,
        });
    }
    let count = (n - window_len) / stride + 1;
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let offset = k * stride;
        out.push(SignalWindow {
            values: record.samples[offset..offset + window_len].to_vec(),
            label,
            label_name: label_name.to_string(),
            record_ref: RecordRef {
                source_path: record.source_path.clone(),
                channel: record.channel,
                offset,
            },
        });
    }
    Ok(out)
}

/// Split windows into train/val/test.
///
/// Stratified mode shuffles within each class and apportions counts by
/// largest remainder, so per-class proportions match the spec within one
/// window. The result is a partition: disjoint and exhaustive. Deterministic
/// under `spec.seed`.
pub fn stratified_split(
    windows: &[SignalWindow],
    spec: &SplitSpec,
) -> Result<(Vec<SignalWindow>, Vec<SignalWindow>, Vec<SignalWindow>), DataError> {
    spec.validate()?;

    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, w) in windows.iter().enumerate() {
        by_class.entry(w.label).or_default().push(i);
    }
    if spec.stratified {
        for (&label, idxs) in &by_class {
            if idxs.len() < 3 {
                return Err(DataError::InsufficientClassSamples {
                    label,
                    count: idxs.len(),
                });
            }
        }
    }

    let groups: Vec<Vec<usize>> = if spec.stratified {
        by_class.into_values().collect()
    } else {
        vec![(0..windows.len()).collect()]
    };

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for mut idxs in groups {
        idxs.shuffle(&mut rng);
        let (n_train, n_val, n_test) = apportion(
            idxs.len(),
            &[spec.train_fraction, spec.val_fraction, spec.test_fraction],
        );
        for (k, &i) in idxs.iter().enumerate() {
            let w = windows[i].clone();
            if k < n_train {
                train.push(w);
            } else if k < n_train + n_val {
                val.push(w);
            } else {
                debug_assert!(k < n_train + n_val + n_test);
                test.push(w);
            }
        }
    }
    Ok((train, val, test))
}

/// Largest-remainder apportionment of `n` items into three parts.
fn apportion(n: usize, fractions: &[f64; 3]) -> (usize, usize, usize) {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    // Hand out the leftover seats by descending fractional remainder;
    // ties break toward the earlier part (train, then val, then test).
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for k in 0..(n - assigned) {
        counts[order[k % 3]] += 1;
    }
    (counts[0], counts[1], counts[2])
}

#[cfg(test)]
mod tests;
