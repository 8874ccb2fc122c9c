//! Synthetic ECG cohort generator.
//!
//! Stands in for the private clinical database at desk scale. Each subject
//! gets a class (hyperglycemic or not), a glucose value consistent with it,
//! a base heart rate, and a personal waveform morphology; each recording is
//! a train of five Gaussian bumps (P, Q, R, S, T) per beat plus white noise,
//! sinusoidal baseline wander, and sparse electrode-motion bursts.
//! Hyperglycemic subjects get the configured heart-rate and T-wave-offset
//! shifts, the physiology the classifier is supposed to pick up.
//!
//! Generation is parallel per subject with seeds derived as
//! `seed XOR subject_index`, so parallel and serial runs agree bit for bit.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::{label, CohortError};
use crate::signal::EcgRecording;

/// Generator parameters. Amplitudes are in the same arbitrary unit as the
/// R wave, whose nominal height is 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_subjects: usize,
    /// Fraction of subjects labeled hyperglycemic (exact up to rounding).
    pub hyper_fraction: f64,
    pub fs: f64,
    pub duration_s: f64,
    pub sessions_per_subject: u32,
    /// Per-subject base heart rate is uniform in this range (bpm).
    pub bpm_range: (f64, f64),
    /// White measurement noise, standard deviation per sample.
    pub white_noise: f64,
    /// Peak amplitude of the sinusoidal baseline wander.
    pub baseline_wander: f64,
    /// Expected electrode-motion bursts per second.
    pub em_burst_rate: f64,
    /// Heart-rate increase for hyperglycemic subjects (bpm).
    pub delta_bpm: f64,
    /// R-to-T-peak delay increase for hyperglycemic subjects (ms).
    pub delta_qt_ms: f64,
    /// Scale of per-subject morphology idiosyncrasy: wave amplitudes,
    /// widths, offsets, and the personal T-delay spread (0 = subjects are
    /// morphologically indistinguishable; larger values make them
    /// identifiable).
    pub subject_jitter: f64,
    /// Beat-to-beat RR interval jitter, relative.
    pub hrv_rel: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_subjects: 40,
            hyper_fraction: 0.5,
            fs: 1000.0,
            duration_s: 60.0,
            sessions_per_subject: 1,
            bpm_range: (55.0, 90.0),
            white_noise: 0.03,
            baseline_wander: 0.10,
            em_burst_rate: 0.10,
            delta_bpm: 8.0,
            delta_qt_ms: 25.0,
            subject_jitter: 0.15,
            hrv_rel: 0.02,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), CohortError> {
        if self.n_subjects == 0 {
            return Err(CohortError::InvalidSpec("n_subjects must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.hyper_fraction) {
            return Err(CohortError::InvalidSpec(format!(
                "hyper_fraction must lie in [0,1], got {}",
                self.hyper_fraction
            )));
        }
        if self.fs <= 0.0 || self.duration_s <= 0.0 {
            return Err(CohortError::InvalidSpec(
                "fs and duration must be positive".into(),
            ));
        }
        if self.sessions_per_subject == 0 {
            return Err(CohortError::InvalidSpec("sessions_per_subject must be >= 1".into()));
        }
        if self.bpm_range.0 <= 0.0 || self.bpm_range.0 > self.bpm_range.1 {
            return Err(CohortError::InvalidSpec(format!(
                "bad bpm range {:?}",
                self.bpm_range
            )));
        }
        for (name, v) in [
            ("white_noise", self.white_noise),
            ("baseline_wander", self.baseline_wander),
            ("em_burst_rate", self.em_burst_rate),
            ("subject_jitter", self.subject_jitter),
            ("hrv_rel", self.hrv_rel),
        ] {
            if v < 0.0 {
                return Err(CohortError::InvalidSpec(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-recording ground truth emitted alongside the waveform.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    /// True R-peak positions, in samples from the start of the recording.
    pub r_peaks: Vec<usize>,
    pub label: u8,
    /// The subject's effective heart rate for this recording (bpm).
    pub bpm: f64,
    /// R-to-T-peak delay used for this subject (ms).
    pub rt_ms: f64,
}

#[derive(Debug, Clone)]
pub struct SynthRecording {
    pub rec: EcgRecording,
    pub truth: GroundTruth,
}

#[derive(Debug, Clone)]
pub struct SynthCohort {
    pub recordings: Vec<SynthRecording>,
}

/// One wave bump: amplitude, center offset from R (ms), and width (ms).
#[derive(Clone, Copy)]
struct Wave {
    amp: f64,
    offset_ms: f64,
    sigma_ms: f64,
}

const BASE_WAVES: [Wave; 4] = [
    Wave { amp: 0.15, offset_ms: -160.0, sigma_ms: 20.0 }, // P
    Wave { amp: -0.12, offset_ms: -22.0, sigma_ms: 8.0 },  // Q
    Wave { amp: 1.0, offset_ms: 0.0, sigma_ms: 11.0 },     // R
    Wave { amp: -0.25, offset_ms: 22.0, sigma_ms: 9.0 },   // S
];
const BASE_T: Wave = Wave { amp: 0.35, offset_ms: 260.0, sigma_ms: 45.0 };

fn randn(rng: &mut ChaCha12Rng) -> f64 {
    // Box-Muller; the log argument is kept strictly positive.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generates the whole cohort. Recordings come back ordered by subject then
/// session.
pub fn synth_cohort(spec: &SynthSpec) -> Result<SynthCohort, CohortError> {
    spec.validate()?;

    // Class assignment: exact count, deterministic shuffle.
    let n = spec.n_subjects;
    let n_hyper = (spec.hyper_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut master = ChaCha12Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut master);
    let mut is_hyper = vec![false; n];
    for &i in order.iter().take(n_hyper) {
        is_hyper[i] = true;
    }

    let indices: Vec<usize> = (0..n).collect();
    let per_subject = crate::par::map(&indices, |&i| synth_subject(spec, i, is_hyper[i]));
    let recordings = per_subject.into_iter().flatten().collect();
    Ok(SynthCohort { recordings })
}

fn synth_subject(spec: &SynthSpec, index: usize, hyper: bool) -> Vec<SynthRecording> {
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed ^ index as u64);
    let subject_id = format!("subj-{index:04}");

    let (lo, hi) = spec.bpm_range;
    let base_bpm = rng.gen_range(lo..=hi) + if hyper { spec.delta_bpm } else { 0.0 };
    // The personal T-delay spread is a morphology trait like the wave
    // shapes, so it scales with the same idiosyncrasy knob (8 ms at the
    // default jitter of 0.15, zero when subjects are made indistinguishable).
    let rt_sigma = 8.0 * (spec.subject_jitter / 0.15);
    let rt_ms = 260.0 + rt_sigma * randn(&mut rng) + if hyper { spec.delta_qt_ms } else { 0.0 };

    // Personal waveform morphology.
    let j = spec.subject_jitter;
    let mut waves: Vec<Wave> = BASE_WAVES.to_vec();
    let mut t_wave = Wave { offset_ms: rt_ms, ..BASE_T };
    for w in waves.iter_mut().chain(std::iter::once(&mut t_wave)) {
        w.amp *= 1.0 + j * randn(&mut rng);
        w.sigma_ms *= (1.0 + 0.5 * j * randn(&mut rng)).max(0.4);
        if w.offset_ms != 0.0 && (w.offset_ms - rt_ms).abs() > 1e-12 {
            w.offset_ms += 12.0 * j * randn(&mut rng);
        }
    }

    (0..spec.sessions_per_subject)
        .map(|session| {
            let glucose = if hyper {
                100.0 + (28.0 + 12.0 * randn(&mut rng)).clamp(1.0, 150.0)
            } else {
                100.0 - (18.0 + 8.0 * randn(&mut rng)).clamp(0.5, 55.0)
            };
            let (samples, r_peaks) =
                synth_waveform(spec, &waves, &t_wave, base_bpm, &mut rng);
            SynthRecording {
                rec: EcgRecording {
                    subject_id: subject_id.clone(),
                    session_id: session,
                    fs: spec.fs,
                    samples,
                    glucose_mgdl: Some(glucose),
                },
                truth: GroundTruth {
                    r_peaks,
                    label: label(glucose),
                    bpm: base_bpm,
                    rt_ms,
                },
            }
        })
        .collect()
}

fn synth_waveform(
    spec: &SynthSpec,
    waves: &[Wave],
    t_wave: &Wave,
    bpm: f64,
    rng: &mut ChaCha12Rng,
) -> (Vec<f64>, Vec<usize>) {
    let fs = spec.fs;
    let n = (spec.duration_s * fs).round() as usize;
    let mut samples = vec![0.0; n];

    // Beat train with relative RR jitter.
    let rr = 60.0 / bpm;
    let mut beat_times = Vec::new();
    let mut t = 0.35;
    while t < spec.duration_s - 0.25 {
        beat_times.push(t);
        t += rr * (1.0 + spec.hrv_rel * randn(rng));
    }
    let r_peaks: Vec<usize> = beat_times
        .iter()
        .map(|&bt| (bt * fs).round() as usize)
        .filter(|&i| i < n)
        .collect();

    for &bt in &beat_times {
        // Small per-beat amplitude wobble on top of the subject morphology.
        let beat_gain = 1.0 + 0.03 * randn(rng);
        for w in waves.iter().chain(std::iter::once(t_wave)) {
            let center = bt + w.offset_ms / 1000.0;
            let sigma = w.sigma_ms / 1000.0;
            let lo = (((center - 4.0 * sigma) * fs).floor().max(0.0)) as usize;
            let hi = ((((center + 4.0 * sigma) * fs).ceil()) as usize).min(n);
            for i in lo..hi {
                let d = (i as f64 / fs - center) / sigma;
                samples[i] += beat_gain * w.amp * (-0.5 * d * d).exp();
            }
        }
    }

    // Baseline wander: one slow sinusoid per recording.
    if spec.baseline_wander > 0.0 {
        let f_bw = rng.gen_range(0.15..0.35);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        for (i, s) in samples.iter_mut().enumerate() {
            *s += spec.baseline_wander
                * (std::f64::consts::TAU * f_bw * i as f64 / fs + phase).sin();
        }
    }

    // Sparse electrode-motion bursts.
    if spec.em_burst_rate > 0.0 {
        let expected = spec.em_burst_rate * spec.duration_s;
        let mut bursts = expected.floor() as usize;
        if rng.gen::<f64>() < expected.fract() {
            bursts += 1;
        }
        for _ in 0..bursts {
            let start = rng.gen_range(0.0..spec.duration_s);
            let len_s = rng.gen_range(0.05..0.15);
            let lo = (start * fs) as usize;
            let hi = (((start + len_s) * fs) as usize).min(n);
            for s in samples.iter_mut().take(hi).skip(lo) {
                *s += 0.4 * randn(rng);
            }
        }
    }

    // White measurement noise.
    if spec.white_noise > 0.0 {
        for s in samples.iter_mut() {
            *s += spec.white_noise * randn(rng);
        }
    }

    (samples, r_peaks)
}
