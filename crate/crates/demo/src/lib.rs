//! Browser demo bindings.
//!
//! Three interactive operations over the core pipeline:
//! - [`generate_trace`]: synthesize one ECG recording, filter it, detect
//!   R-peaks, and hand the traces to the page for plotting;
//! - [`filter_response`]: magnitude response of the bandpass design across
//!   a frequency grid;
//! - [`train_demo`]: train a small model on a small synthetic cohort with a
//!   subject-disjoint split and return the test ROC curve.
//!
//! Build with `wasm-pack build crates/demo --target web` (or wasm-bindgen
//! directly); `www/index.html` is the page.

use wasm_bindgen::prelude::*;

use ecgcbam::cohort::{label_recording, split_subjects, synth_cohort, CohortManifest, ManifestEntry, Role, SynthSpec};
use ecgcbam::eval::{build_report, choose_threshold, EvalLevel, ThresholdPolicy};
use ecgcbam::model::{predict_batched, ModelConfig};
use ecgcbam::signal::{
    apply_standardizer, design_bandpass, detect_r_peaks, filter_zero_phase, fit_standardizer,
    preprocess_recording, trim_edges, FilterSpec, PreprocessOutcome, PreprocessSpec, Segment,
};
use ecgcbam::train::{train, TrainConfig};

/// One synthesized and preprocessed recording, ready for plotting.
#[wasm_bindgen]
pub struct TraceResult {
    fs: f64,
    raw: Vec<f64>,
    filtered: Vec<f64>,
    detected: Vec<u32>,
    truth: Vec<u32>,
}

#[wasm_bindgen]
impl TraceResult {
    #[wasm_bindgen(getter)]
    pub fn fs(&self) -> f64 {
        self.fs
    }
    /// Raw trace after edge trimming.
    #[wasm_bindgen(getter)]
    pub fn raw(&self) -> Vec<f64> {
        self.raw.clone()
    }
    /// Bandpassed trace (zero-phase, so peaks stay aligned with raw).
    #[wasm_bindgen(getter)]
    pub fn filtered(&self) -> Vec<f64> {
        self.filtered.clone()
    }
    /// Detected R-peak sample indices.
    #[wasm_bindgen(getter)]
    pub fn detected(&self) -> Vec<u32> {
        self.detected.clone()
    }
    /// Ground-truth R-peak sample indices from the generator.
    #[wasm_bindgen(getter)]
    pub fn truth(&self) -> Vec<u32> {
        self.truth.clone()
    }
}

/// Synthesizes one subject's recording and runs trim → filter → detect.
///
/// `hyper` applies the configured label effects (heart-rate and T-wave
/// shifts) to this subject.
#[wasm_bindgen]
pub fn generate_trace(
    bpm: f64,
    hyper: bool,
    delta_bpm: f64,
    delta_qt_ms: f64,
    white_noise: f64,
    baseline_wander: f64,
    em_rate: f64,
    seconds: f64,
    seed: u32,
) -> Result<TraceResult, JsValue> {
    generate_trace_impl(
        bpm, hyper, delta_bpm, delta_qt_ms, white_noise, baseline_wander, em_rate, seconds, seed,
    )
    .map_err(|e| JsValue::from_str(&e))
}

#[allow(clippy::too_many_arguments)]
fn generate_trace_impl(
    bpm: f64,
    hyper: bool,
    delta_bpm: f64,
    delta_qt_ms: f64,
    white_noise: f64,
    baseline_wander: f64,
    em_rate: f64,
    seconds: f64,
    seed: u32,
) -> Result<TraceResult, String> {
    let spec = SynthSpec {
        n_subjects: 1,
        hyper_fraction: if hyper { 1.0 } else { 0.0 },
        duration_s: seconds.clamp(6.0, 60.0),
        bpm_range: (bpm, bpm),
        white_noise: white_noise.max(0.0),
        baseline_wander: baseline_wander.max(0.0),
        em_burst_rate: em_rate.max(0.0),
        delta_bpm,
        delta_qt_ms,
        seed: seed as u64,
        ..Default::default()
    };
    let cohort = synth_cohort(&spec).map_err(err)?;
    let rec = &cohort.recordings[0].rec;

    let trim_s = 1.0;
    let trimmed = trim_edges(rec, trim_s).map_err(err)?;
    let cascade = design_bandpass(&FilterSpec::new(4, 1.0, 40.0, rec.fs)).map_err(err)?;
    let filtered = filter_zero_phase(&cascade, &trimmed.samples).map_err(err)?;
    let detected: Vec<u32> = detect_r_peaks(&filtered, rec.fs)
        .map(|p| p.into_iter().map(|i| i as u32).collect())
        .unwrap_or_default();
    let offset = (trim_s * rec.fs).round() as i64;
    let truth: Vec<u32> = cohort.recordings[0]
        .truth
        .r_peaks
        .iter()
        .map(|&i| i as i64 - offset)
        .filter(|&i| i >= 0 && (i as usize) < trimmed.samples.len())
        .map(|i| i as u32)
        .collect();

    Ok(TraceResult {
        fs: rec.fs,
        raw: trimmed.samples,
        filtered,
        detected,
        truth,
    })
}

/// |H(f)| of the Butterworth bandpass over `n` log-spaced frequencies from
/// `f_min` to Nyquist. Returns interleaved (frequency, magnitude) pairs.
#[wasm_bindgen]
pub fn filter_response(
    order: u32,
    low_hz: f64,
    high_hz: f64,
    fs: f64,
    n: u32,
) -> Result<Vec<f64>, JsValue> {
    filter_response_impl(order, low_hz, high_hz, fs, n).map_err(|e| JsValue::from_str(&e))
}

fn filter_response_impl(
    order: u32,
    low_hz: f64,
    high_hz: f64,
    fs: f64,
    n: u32,
) -> Result<Vec<f64>, String> {
    let cascade = design_bandpass(&FilterSpec::new(order as usize, low_hz, high_hz, fs)).map_err(err)?;
    let f_min: f64 = 0.05;
    let f_max = fs / 2.0;
    let n = n.max(2) as usize;
    let mut out = Vec::with_capacity(2 * n);
    for i in 0..n {
        let t = i as f64 / (n - 1) as f64;
        let f = f_min * (f_max / f_min).powf(t);
        let omega = 2.0 * std::f64::consts::PI * f / fs;
        // H(e^{jw}) over the cascade, hand-rolled complex arithmetic.
        let (mut re, mut im) = (1.0f64, 0.0f64);
        for s in &cascade.sections {
            let (c1, s1) = (omega.cos(), -omega.sin());
            let (c2, s2) = ((2.0 * omega).cos(), -(2.0 * omega).sin());
            let nre = s.b[0] + s.b[1] * c1 + s.b[2] * c2;
            let nim = s.b[1] * s1 + s.b[2] * s2;
            let dre = 1.0 + s.a[0] * c1 + s.a[1] * c2;
            let dim = s.a[0] * s1 + s.a[1] * s2;
            let dmag = dre * dre + dim * dim;
            let hre = (nre * dre + nim * dim) / dmag;
            let him = (nim * dre - nre * dim) / dmag;
            let (pre, pim) = (re, im);
            re = pre * hre - pim * him;
            im = pre * him + pim * hre;
        }
        out.push(f);
        out.push((re * re + im * im).sqrt());
    }
    Ok(out)
}

/// Result of the in-browser training run.
#[wasm_bindgen]
pub struct TrainDemoResult {
    auc: f64,
    sensitivity: f64,
    specificity: f64,
    /// Interleaved (fpr, tpr) pairs of the test ROC.
    roc: Vec<f64>,
    /// Per-epoch training loss.
    losses: Vec<f64>,
    n_train: u32,
    n_test: u32,
}

#[wasm_bindgen]
impl TrainDemoResult {
    #[wasm_bindgen(getter)]
    pub fn auc(&self) -> f64 {
        self.auc
    }
    #[wasm_bindgen(getter)]
    pub fn sensitivity(&self) -> f64 {
        self.sensitivity
    }
    #[wasm_bindgen(getter)]
    pub fn specificity(&self) -> f64 {
        self.specificity
    }
    #[wasm_bindgen(getter)]
    pub fn roc(&self) -> Vec<f64> {
        self.roc.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn losses(&self) -> Vec<f64> {
        self.losses.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn n_train(&self) -> u32 {
        self.n_train
    }
    #[wasm_bindgen(getter)]
    pub fn n_test(&self) -> u32 {
        self.n_test
    }
}

/// Small two-block model on the full 600-sample window.
fn demo_model() -> ModelConfig {
    ModelConfig {
        input_width: 600,
        channels: vec![6, 12],
        kernel: 7,
        pool_window: 2,
        pool_stride: 2,
        reductions: vec![3, 4],
        ..ModelConfig::default()
    }
}

/// Trains on a small synthetic cohort with a subject-disjoint split and
/// scores the held-out subjects. Runs in a few seconds at the default size.
#[wasm_bindgen]
pub fn train_demo(
    n_subjects: u32,
    epochs: u32,
    delta_bpm: f64,
    delta_qt_ms: f64,
    seed: u32,
) -> Result<TrainDemoResult, JsValue> {
    train_demo_impl(n_subjects, epochs, delta_bpm, delta_qt_ms, seed)
        .map_err(|e| JsValue::from_str(&e))
}

fn train_demo_impl(
    n_subjects: u32,
    epochs: u32,
    delta_bpm: f64,
    delta_qt_ms: f64,
    seed: u32,
) -> Result<TrainDemoResult, String> {
    let n_subjects = (n_subjects as usize).clamp(8, 64);
    let spec = SynthSpec {
        n_subjects,
        duration_s: 24.0,
        delta_bpm,
        delta_qt_ms,
        seed: seed as u64,
        ..Default::default()
    };
    let cohort = synth_cohort(&spec).map_err(err)?;

    let pre = PreprocessSpec {
        quality: None,
        max_segments_per_recording: Some(8),
        ..Default::default()
    };
    let mut segments: Vec<Segment> = Vec::new();
    let mut entries = Vec::new();
    for r in &cohort.recordings {
        let label = label_recording(&r.rec).unwrap_or(0);
        if let PreprocessOutcome::Accepted { segments: s, .. } =
            preprocess_recording(&r.rec, &pre, label).map_err(err)?
        {
            segments.extend(s);
        }
        entries.push(ManifestEntry {
            subject_id: r.rec.subject_id.clone(),
            session_id: r.rec.session_id,
            path: String::new(),
            glucose_mgdl: r.rec.glucose_mgdl.unwrap_or(90.0),
        });
    }

    let manifest = CohortManifest { records: entries };
    let split = split_subjects(&manifest, (0.6, 0.2, 0.2), seed as u64 ^ 0x5eed).map_err(err)?;
    let pick = |role: Role| -> Vec<Segment> {
        segments
            .iter()
            .filter(|s| split.role_of(&s.subject_id) == Some(role))
            .cloned()
            .collect()
    };
    let (train_raw, val_raw, test_raw) = (pick(Role::Train), pick(Role::Val), pick(Role::Test));
    let scaler = fit_standardizer(&train_raw).map_err(err)?;
    let std_set =
        |set: &[Segment]| -> Vec<Segment> { set.iter().map(|s| apply_standardizer(&scaler, s)).collect() };
    let (train_set, val_set, test_set) = (std_set(&train_raw), std_set(&val_raw), std_set(&test_raw));

    let cfg = TrainConfig {
        max_epochs: (epochs as usize).clamp(1, 40),
        patience: 40,
        seed: seed as u64,
        ..Default::default()
    };
    let model = demo_model();
    let (params, report) = train(&model, &train_set, &val_set, &cfg).map_err(err)?;

    let val_rows: Vec<&[f64]> = val_set.iter().map(|s| s.values.as_slice()).collect();
    let val_scores = predict_batched(&params, &model, &val_rows).map_err(err)?;
    let val_labels: Vec<u8> = val_set.iter().map(|s| s.label).collect();
    // Tiny cohorts can leave the validation side single-class; fall back to
    // the fixed midpoint instead of failing the whole run.
    let thr = choose_threshold(&val_scores, &val_labels, ThresholdPolicy::Youden).unwrap_or(0.5);

    let rows: Vec<&[f64]> = test_set.iter().map(|s| s.values.as_slice()).collect();
    let scores = predict_batched(&params, &model, &rows).map_err(err)?;
    let labels: Vec<u8> = test_set.iter().map(|s| s.label).collect();
    let rep = build_report(&scores, &labels, thr, EvalLevel::Segment).map_err(err)?;

    Ok(TrainDemoResult {
        auc: rep.auc,
        sensitivity: rep.sensitivity,
        specificity: rep.specificity,
        roc: rep.roc.iter().flat_map(|p| [p.fpr, p.tpr]).collect(),
        losses: report.epochs.iter().map(|e| e.train_loss).collect(),
        n_train: train_set.len() as u32,
        n_test: test_set.len() as u32,
    })
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}
