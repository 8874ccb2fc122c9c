//! Deterministic ECG preprocessing.
//!
//! The chain is: trim the electrode-settling edges, bandpass filter,
//! detect R-peaks, cut fixed-width windows around each peak, and
//! standardize per time index with statistics fitted on training data only.
//! Every step is a pure function of its inputs, so per-recording
//! preprocessing parallelizes trivially and reruns are bit-identical.

mod filter;
mod io;
mod pipeline;
mod rpeaks;

pub use filter::{design_bandpass, filter_forward, filter_zero_phase, Biquad, BiquadCascade};
pub use io::{read_recording, read_segment_cache, subject_key, write_recording, write_segment_cache};
pub use pipeline::{preprocess_recording, PreprocessOutcome, PreprocessSpec, QualityGate, RejectReason};
pub use rpeaks::detect_r_peaks;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor applied to per-index standard deviations so that constant indices
/// standardize to zero instead of dividing by zero.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("recording too short: {0}")]
    RecordingTooShort(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("no R-peaks found ({0})")]
    NoPeaksFound(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("empty input")]
    EmptyInput,
    #[error("bad file format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One raw single-lead ECG recording with its identity and glucose reading.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EcgRecording {
    pub subject_id: String,
    pub session_id: u32,
    /// Sampling rate in Hz.
    pub fs: f64,
    pub samples: Vec<f64>,
    /// Blood glucose in mg/dL, when a reading accompanies the recording.
    pub glucose_mgdl: Option<f64>,
}

impl EcgRecording {
    pub fn validate(&self) -> Result<(), SignalError> {
        if self.fs <= 0.0 {
            return Err(SignalError::InvalidSpec(format!(
                "sampling rate must be positive, got {}",
                self.fs
            )));
        }
        if self.samples.is_empty() {
            return Err(SignalError::EmptyInput);
        }
        if let Some(g) = self.glucose_mgdl {
            if g <= 0.0 {
                return Err(SignalError::InvalidSpec(format!(
                    "glucose must be positive, got {g}"
                )));
            }
        }
        Ok(())
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }
}

/// Bandpass design parameters.
///
/// `order` is the order of the digital bandpass (its pole count), so it must
/// be even; the underlying lowpass prototype has `order / 2` poles.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FilterSpec {
    pub order: usize,
    pub low_hz: f64,
    pub high_hz: f64,
    pub fs: f64,
}

impl FilterSpec {
    pub fn new(order: usize, low_hz: f64, high_hz: f64, fs: f64) -> Self {
        FilterSpec {
            order,
            low_hz,
            high_hz,
            fs,
        }
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        if self.order == 0 || self.order % 2 != 0 {
            return Err(SignalError::InvalidSpec(format!(
                "filter order must be a positive even integer, got {}",
                self.order
            )));
        }
        if !(self.low_hz > 0.0 && self.low_hz < self.high_hz && self.high_hz < self.fs / 2.0) {
            return Err(SignalError::InvalidSpec(format!(
                "passband must satisfy 0 < low < high < fs/2, got {} .. {} at fs {}",
                self.low_hz, self.high_hz, self.fs
            )));
        }
        Ok(())
    }
}

/// Heartbeat window geometry: `t1_ms` before the R-peak, `t0_ms` after.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub t1_ms: f64,
    pub t0_ms: f64,
}

impl SegmentSpec {
    pub fn new(t1_ms: f64, t0_ms: f64) -> Self {
        SegmentSpec { t1_ms, t0_ms }
    }

    /// Samples before the R-peak at the given rate.
    pub fn before_samples(&self, fs: f64) -> usize {
        (self.t1_ms * fs / 1000.0).round() as usize
    }

    /// Samples after the R-peak (exclusive end of the window).
    pub fn after_samples(&self, fs: f64) -> usize {
        (self.t0_ms * fs / 1000.0).round() as usize
    }

    /// Total window width in samples.
    pub fn width(&self, fs: f64) -> usize {
        self.before_samples(fs) + self.after_samples(fs)
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        if self.t1_ms <= 0.0 || self.t0_ms <= 0.0 {
            return Err(SignalError::InvalidSpec(format!(
                "window times must be positive, got t1={} t0={}",
                self.t1_ms, self.t0_ms
            )));
        }
        Ok(())
    }
}

impl Default for SegmentSpec {
    /// 200 ms before / 400 ms after: 600 samples at 1000 Hz, covering the
    /// P wave before R and the T wave after it.
    fn default() -> Self {
        SegmentSpec::new(200.0, 400.0)
    }
}

/// One fixed-width heartbeat window with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub subject_id: String,
    pub values: Vec<f64>,
    /// 1 = hyperglycemia.
    pub label: u8,
}

/// Removes `seconds` from each end of the recording.
pub fn trim_edges(rec: &EcgRecording, seconds: f64) -> Result<EcgRecording, SignalError> {
    if seconds < 0.0 {
        return Err(SignalError::InvalidSpec(format!(
            "trim duration must be non-negative, got {seconds}"
        )));
    }
    let cut = (seconds * rec.fs).round() as usize;
    if rec.samples.len() <= 2 * cut {
        return Err(SignalError::RecordingTooShort(format!(
            "{} samples cannot lose 2 x {cut}",
            rec.samples.len()
        )));
    }
    Ok(EcgRecording {
        subject_id: rec.subject_id.clone(),
        session_id: rec.session_id,
        fs: rec.fs,
        samples: rec.samples[cut..rec.samples.len() - cut].to_vec(),
        glucose_mgdl: rec.glucose_mgdl,
    })
}

/// Cuts one window per peak whose full extent `[r - t1, r + t0)` lies inside
/// the recording; windows that would cross a boundary are dropped, never
/// padded. Every emitted segment carries the given label.
pub fn segment(
    rec: &EcgRecording,
    peaks: &[usize],
    spec: &SegmentSpec,
    label: u8,
) -> Vec<Segment> {
    let before = spec.before_samples(rec.fs);
    let after = spec.after_samples(rec.fs);
    let n = rec.samples.len();
    peaks
        .iter()
        .filter(|&&r| r >= before && r + after <= n)
        .map(|&r| Segment {
            subject_id: rec.subject_id.clone(),
            values: rec.samples[r - before..r + after].to_vec(),
            label,
        })
        .collect()
}

/// Concatenates runs of `group` consecutive segments into wider windows
/// (the "five consecutive subsequences" input mode). Leftover segments that
/// do not fill a group are dropped.
pub fn concat_consecutive(segments: &[Segment], group: usize) -> Vec<Segment> {
    assert!(group >= 1);
    if group == 1 {
        return segments.to_vec();
    }
    segments
        .chunks_exact(group)
        .map(|chunk| Segment {
            subject_id: chunk[0].subject_id.clone(),
            values: chunk.iter().flat_map(|s| s.values.iter().copied()).collect(),
            label: chunk[0].label,
        })
        .collect()
}

/// Per-time-index standardization statistics, fitted on training segments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Population standard deviation per index, floored at [`STD_FLOOR`].
    pub std: Vec<f64>,
}

/// Fits per-index mean and (population) standard deviation over the training
/// segments. Needs at least two segments of equal width.
pub fn fit_standardizer(train: &[Segment]) -> Result<Standardizer, SignalError> {
    if train.len() < 2 {
        return Err(SignalError::InsufficientData(format!(
            "standardizer needs >= 2 training segments, got {}",
            train.len()
        )));
    }
    let w = train[0].values.len();
    if train.iter().any(|s| s.values.len() != w) {
        return Err(SignalError::InvalidSpec(
            "training segments have inconsistent widths".into(),
        ));
    }
    let n = train.len() as f64;
    let mut mean = vec![0.0; w];
    for s in train {
        for (m, v) in mean.iter_mut().zip(&s.values) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = vec![0.0; w];
    for s in train {
        for ((vv, v), m) in var.iter_mut().zip(&s.values).zip(&mean) {
            let d = v - m;
            *vv += d * d;
        }
    }
    let std = var.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
    Ok(Standardizer { mean, std })
}

/// Standardizes a segment in place with frozen training statistics.
pub fn apply_standardizer(scaler: &Standardizer, seg: &Segment) -> Segment {
    assert_eq!(
        scaler.mean.len(),
        seg.values.len(),
        "standardizer width {} does not match segment width {}",
        scaler.mean.len(),
        seg.values.len()
    );
    let values = seg
        .values
        .iter()
        .zip(scaler.mean.iter().zip(&scaler.std))
        .map(|(v, (m, s))| (v - m) / s)
        .collect();
    Segment {
        subject_id: seg.subject_id.clone(),
        values,
        label: seg.label,
    }
}
