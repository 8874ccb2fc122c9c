//! Detector accuracy against the generator's ground-truth R times.

mod common;

use common::detector_metrics;
use ecgcbam::cohort::{synth_cohort, SynthSpec};
use ecgcbam::signal::{design_bandpass, detect_r_peaks, filter_forward, trim_edges, FilterSpec};

fn clean_spec() -> SynthSpec {
    SynthSpec {
        n_subjects: 20,
        duration_s: 30.0,
        white_noise: 0.0,
        baseline_wander: 0.0,
        em_burst_rate: 0.0,
        seed: 77,
        ..Default::default()
    }
}

#[test]
fn clean_cohort_recall_and_precision() {
    let (recall, precision) = detector_metrics(&clean_spec());
    println!("clean cohort: recall {recall:.4}, precision {precision:.4}");
    assert!(recall >= 0.99, "clean recall {recall}");
    assert!(precision >= 0.99, "clean precision {precision}");
}

#[test]
fn default_noise_recall_and_precision() {
    let spec = SynthSpec {
        n_subjects: 20,
        duration_s: 30.0,
        seed: 78,
        ..Default::default()
    };
    let (recall, precision) = detector_metrics(&spec);
    println!("default noise: recall {recall:.4}, precision {precision:.4}");
    assert!(recall >= 0.95, "noisy recall {recall}");
    assert!(precision >= 0.95, "noisy precision {precision}");
}

/// The causal path shifts peaks by the group delay but must still find one
/// detection per beat.
#[test]
fn causal_filtering_finds_every_beat() {
    let cohort = synth_cohort(&clean_spec()).unwrap();
    for r in cohort.recordings.iter().take(8) {
        let fs = r.rec.fs;
        let trimmed = trim_edges(&r.rec, 2.0).unwrap();
        let cascade = design_bandpass(&FilterSpec::new(4, 1.0, 40.0, fs)).unwrap();
        let filtered = filter_forward(&cascade, &trimmed.samples).unwrap();
        let margin = (0.3 * fs) as usize;
        let detected = detect_r_peaks(&filtered, fs)
            .unwrap()
            .into_iter()
            .filter(|&p| p >= margin && p < trimmed.samples.len() - margin)
            .count();
        let offset = (2.0 * fs).round() as usize;
        let truth = r
            .truth
            .r_peaks
            .iter()
            .filter(|&&t| t >= offset + margin && t + margin < offset + trimmed.samples.len())
            .count();
        let diff = (detected as i64 - truth as i64).abs();
        assert!(
            diff <= 1 + truth as i64 / 50,
            "causal: {detected} detected vs {truth} true beats"
        );
    }
}
