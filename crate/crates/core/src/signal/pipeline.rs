//! Per-recording preprocessing: trim, filter, detect, gate, segment.

use serde::{Deserialize, Serialize};

use super::{
    design_bandpass, detect_r_peaks, filter_forward, filter_zero_phase, segment, trim_edges,
    EcgRecording, FilterSpec, Segment, SegmentSpec, SignalError,
};

/// Deterministic screen for unusable recordings.
///
/// A recording is rejected when fewer than `min_peaks` R-peaks are found or
/// when per-beat peak-to-peak amplitude varies by more than
/// `max_amplitude_ratio` across beats (amplitude measured on the filtered
/// signal inside each beat's segmentation window).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct QualityGate {
    pub min_peaks: usize,
    pub max_amplitude_ratio: f64,
}

impl Default for QualityGate {
    fn default() -> Self {
        QualityGate {
            min_peaks: 20,
            max_amplitude_ratio: 10.0,
        }
    }
}

/// Why the quality gate rejected a recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RejectReason {
    NoPeaks,
    TooFewPeaks { found: usize, required: usize },
    AmplitudeVariation { ratio: f64, limit: f64 },
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RejectReason::NoPeaks => write!(f, "no R-peaks detected"),
            RejectReason::TooFewPeaks { found, required } => {
                write!(f, "only {found} R-peaks, need {required}")
            }
            RejectReason::AmplitudeVariation { ratio, limit } => {
                write!(f, "beat amplitude varies {ratio:.1}x, limit {limit:.1}x")
            }
        }
    }
}

/// Full preprocessing configuration shared by the CLI and the evaluation
/// harness.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessSpec {
    /// Seconds discarded from each end of the raw recording.
    pub trim_seconds: f64,
    pub filter_order: usize,
    pub low_hz: f64,
    pub high_hz: f64,
    /// Forward-backward filtering instead of the causal single pass.
    pub zero_phase: bool,
    pub segment: SegmentSpec,
    /// Number of consecutive heartbeat windows concatenated into one input
    /// (1 = single-beat windows, 5 = the wide five-beat mode).
    pub concat_group: usize,
    pub quality: Option<QualityGate>,
    /// Optional cap on segments kept per recording (taken from the front).
    pub max_segments_per_recording: Option<usize>,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        PreprocessSpec {
            trim_seconds: 2.0,
            filter_order: 4,
            low_hz: 1.0,
            high_hz: 40.0,
            zero_phase: false,
            segment: SegmentSpec::default(),
            concat_group: 1,
            quality: Some(QualityGate::default()),
            max_segments_per_recording: None,
        }
    }
}

/// Result of preprocessing one recording.
#[derive(Debug, Clone)]
pub enum PreprocessOutcome {
    Accepted { segments: Vec<Segment>, peaks: Vec<usize> },
    Rejected(RejectReason),
}

/// Runs the preprocessing chain on one recording and applies the quality
/// gate. Standardization is not part of this step: it needs statistics of
/// the training split, which the caller fits afterwards.
pub fn preprocess_recording(
    rec: &EcgRecording,
    spec: &PreprocessSpec,
    label: u8,
) -> Result<PreprocessOutcome, SignalError> {
    rec.validate()?;
    spec.segment.validate()?;
    let trimmed = trim_edges(rec, spec.trim_seconds)?;
    let cascade = design_bandpass(&FilterSpec::new(
        spec.filter_order,
        spec.low_hz,
        spec.high_hz,
        rec.fs,
    ))?;
    let filtered = if spec.zero_phase {
        filter_zero_phase(&cascade, &trimmed.samples)?
    } else {
        filter_forward(&cascade, &trimmed.samples)?
    };

    let peaks = match detect_r_peaks(&filtered, rec.fs) {
        Ok(p) => p,
        Err(SignalError::NoPeaksFound(_)) => {
            return Ok(PreprocessOutcome::Rejected(RejectReason::NoPeaks))
        }
        Err(e) => return Err(e),
    };

    if let Some(gate) = &spec.quality {
        if peaks.len() < gate.min_peaks {
            return Ok(PreprocessOutcome::Rejected(RejectReason::TooFewPeaks {
                found: peaks.len(),
                required: gate.min_peaks,
            }));
        }
        let before = spec.segment.before_samples(rec.fs);
        let after = spec.segment.after_samples(rec.fs);
        let mut min_amp = f64::INFINITY;
        let mut max_amp = f64::NEG_INFINITY;
        for &r in &peaks {
            let lo = r.saturating_sub(before);
            let hi = (r + after).min(filtered.len());
            let window = &filtered[lo..hi];
            let p2p = window.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - window.iter().cloned().fold(f64::INFINITY, f64::min);
            min_amp = min_amp.min(p2p);
            max_amp = max_amp.max(p2p);
        }
        let ratio = if min_amp > 0.0 { max_amp / min_amp } else { f64::INFINITY };
        if ratio > gate.max_amplitude_ratio {
            return Ok(PreprocessOutcome::Rejected(RejectReason::AmplitudeVariation {
                ratio,
                limit: gate.max_amplitude_ratio,
            }));
        }
    }

    let filtered_rec = EcgRecording {
        samples: filtered,
        ..trimmed
    };
    let mut segments = segment(&filtered_rec, &peaks, &spec.segment, label);
    if spec.concat_group > 1 {
        segments = super::concat_consecutive(&segments, spec.concat_group);
    }
    if let Some(cap) = spec.max_segments_per_recording {
        segments.truncate(cap);
    }
    Ok(PreprocessOutcome::Accepted { segments, peaks })
}
