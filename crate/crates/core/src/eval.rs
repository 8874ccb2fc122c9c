//! Evaluation: ROC curves, AUC, operating-point metrics, subject-level
//! aggregation, and the subject-disjoint vs. mixed-split comparison.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{label_recording, split_segments_mixed, split_subjects, CohortError, CohortManifest, ManifestEntry, Role};
use crate::model::{predict_batched, ModelConfig, ModelError};
use crate::signal::{
    apply_standardizer, fit_standardizer, preprocess_recording, EcgRecording, PreprocessOutcome,
    PreprocessSpec, Segment, SignalError,
};
use crate::train::{train, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("scores contain a single class only")]
    SingleClass,
    #[error("no scores to evaluate")]
    Empty,
    #[error("score/label lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// One point of the ROC curve; `threshold` is the lowest score still
/// predicted positive at this point.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fneg: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalLevel {
    Segment,
    Subject,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub level: EvalLevel,
    pub auc: f64,
    pub operating_threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub confusion: Confusion,
    pub roc: Vec<RocPoint>,
}

/// ROC curve with a threshold step at every distinct score (ties grouped),
/// plus trapezoidal AUC.
///
/// Points are ordered by descending threshold, starting at (0, 0) with an
/// infinite threshold and ending at (1, 1).
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<(Vec<RocPoint>, f64), EvalError> {
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));

    let mut roc = Vec::with_capacity(scores.len() + 1);
    roc.push(RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    });
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        // Consume the whole tie group before emitting a point.
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        roc.push(RocPoint {
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
            threshold: s,
        });
    }

    let mut auc = 0.0;
    for w in roc.windows(2) {
        auc += (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0;
    }
    Ok((roc, auc))
}

/// Sensitivity, specificity, and the confusion counts at a threshold
/// (predict positive iff `score >= threshold`).
pub fn sens_spec(scores: &[f64], labels: &[u8], threshold: f64) -> (f64, f64, Confusion) {
    let mut c = Confusion::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fneg += 1,
            (false, false) => c.tn += 1,
        }
    }
    let sens = if c.tp + c.fneg > 0 {
        c.tp as f64 / (c.tp + c.fneg) as f64
    } else {
        0.0
    };
    let spec = if c.tn + c.fp > 0 {
        c.tn as f64 / (c.tn + c.fp) as f64
    } else {
        0.0
    };
    (sens, spec, c)
}

/// How the operating threshold is picked.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "policy", content = "value")]
pub enum ThresholdPolicy {
    /// Maximize Youden's J (TPR − FPR) on the validation scores.
    Youden,
    Fixed(f64),
}

/// Picks the operating threshold from validation scores according to the
/// policy. Youden ties resolve to the largest threshold.
pub fn choose_threshold(
    val_scores: &[f64],
    val_labels: &[u8],
    policy: ThresholdPolicy,
) -> Result<f64, EvalError> {
    match policy {
        ThresholdPolicy::Fixed(t) => Ok(t),
        ThresholdPolicy::Youden => {
            let (roc, _) = roc_auc(val_scores, val_labels)?;
            let mut best = &roc[0];
            for p in &roc {
                if p.tpr - p.fpr > best.tpr - best.fpr {
                    best = p;
                }
            }
            Ok(best.threshold)
        }
    }
}

/// How per-segment scores combine into one score per subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Mean of the segment probabilities.
    Mean,
    /// Fraction of segments predicted positive at 0.5.
    Majority,
}

/// Groups segment scores by subject. Subject truth is the majority of its
/// segment labels (ties count as positive). Returns subjects in sorted
/// order with their aggregate score and label.
pub fn subject_aggregate(
    subjects: &[&str],
    scores: &[f64],
    labels: &[u8],
    agg: Aggregation,
) -> Vec<(String, f64, u8)> {
    assert_eq!(subjects.len(), scores.len());
    assert_eq!(subjects.len(), labels.len());
    let mut groups: BTreeMap<&str, (Vec<f64>, usize, usize)> = BTreeMap::new();
    for ((&subj, &s), &y) in subjects.iter().zip(scores).zip(labels) {
        let e = groups.entry(subj).or_default();
        e.0.push(s);
        if y == 1 {
            e.1 += 1;
        } else {
            e.2 += 1;
        }
    }
    groups
        .into_iter()
        .map(|(subj, (ss, pos, neg))| {
            let score = match agg {
                Aggregation::Mean => ss.iter().sum::<f64>() / ss.len() as f64,
                Aggregation::Majority => {
                    ss.iter().filter(|&&v| v >= 0.5).count() as f64 / ss.len() as f64
                }
            };
            (subj.to_string(), score, (pos >= neg) as u8)
        })
        .collect()
}

/// Builds a full report at the given (already chosen) operating threshold.
pub fn build_report(
    scores: &[f64],
    labels: &[u8],
    threshold: f64,
    level: EvalLevel,
) -> Result<EvalReport, EvalError> {
    let (roc, auc) = roc_auc(scores, labels)?;
    let (sensitivity, specificity, confusion) = sens_spec(scores, labels, threshold);
    Ok(EvalReport {
        level,
        auc,
        operating_threshold: threshold,
        sensitivity,
        specificity,
        confusion,
        roc,
    })
}

/// Writes ROC points as `fpr,tpr,threshold` CSV.
pub fn write_roc_csv(path: &Path, roc: &[RocPoint]) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "fpr,tpr,threshold")?;
    for p in roc {
        writeln!(f, "{},{},{}", p.fpr, p.tpr, p.threshold)?;
    }
    f.flush()
}

// ---------------------------------------------------------------------------
// Split-protocol comparison
// ---------------------------------------------------------------------------

/// Configuration for one full train+eval pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapConfig {
    pub preprocess: PreprocessSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub threshold: ThresholdPolicy,
    /// Train-side share of each subject's segments in the mixed protocol.
    pub mixed_train_fraction: f64,
    pub disjoint_fractions: (f64, f64, f64),
    pub seed: u64,
}

impl GapConfig {
    pub fn new(preprocess: PreprocessSpec, model: ModelConfig, train: TrainConfig, seed: u64) -> Self {
        GapConfig {
            preprocess,
            model,
            train,
            threshold: ThresholdPolicy::Youden,
            mixed_train_fraction: 0.85,
            disjoint_fractions: (0.65, 0.15, 0.20),
            seed,
        }
    }
}

/// Both protocols run on the same cohort.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapReport {
    pub disjoint: EvalReport,
    pub mixed: EvalReport,
}

/// Preprocesses every recording (quality gate applied) and pools the
/// accepted segments.
pub fn segments_of_cohort(
    recordings: &[EcgRecording],
    spec: &PreprocessSpec,
) -> Result<Vec<Segment>, EvalError> {
    let per_rec: Vec<Result<Vec<Segment>, SignalError>> =
        crate::par::map(recordings, |rec| {
            let label = label_recording(rec).ok_or_else(|| {
                SignalError::InvalidSpec(format!("recording {} has no glucose", rec.subject_id))
            })?;
            Ok(match preprocess_recording(rec, spec, label)? {
                PreprocessOutcome::Accepted { segments, .. } => segments,
                PreprocessOutcome::Rejected(_) => Vec::new(),
            })
        });
    let mut out = Vec::new();
    for r in per_rec {
        out.extend(r?);
    }
    Ok(out)
}

fn standardize_sets(
    train: &[Segment],
    others: &[&[Segment]],
) -> Result<(Vec<Segment>, Vec<Vec<Segment>>), EvalError> {
    let scaler = fit_standardizer(train)?;
    let train_std = train.iter().map(|s| apply_standardizer(&scaler, s)).collect();
    let others_std = others
        .iter()
        .map(|set| set.iter().map(|s| apply_standardizer(&scaler, s)).collect())
        .collect();
    Ok((train_std, others_std))
}

fn train_and_score(
    cfg: &GapConfig,
    train_set: &[Segment],
    val_set: &[Segment],
    test_set: &[Segment],
) -> Result<EvalReport, EvalError> {
    let (train_std, mut rest) = standardize_sets(train_set, &[val_set, test_set])?;
    let test_std = rest.pop().unwrap();
    let val_std = rest.pop().unwrap();

    let (params, _report) = train(&cfg.model, &train_std, &val_std, &cfg.train)?;

    let val_rows: Vec<&[f64]> = val_std.iter().map(|s| s.values.as_slice()).collect();
    let val_scores = predict_batched(&params, &cfg.model, &val_rows)?;
    let val_labels: Vec<u8> = val_std.iter().map(|s| s.label).collect();
    let threshold = choose_threshold(&val_scores, &val_labels, cfg.threshold)?;

    let test_rows: Vec<&[f64]> = test_std.iter().map(|s| s.values.as_slice()).collect();
    let test_scores = predict_batched(&params, &cfg.model, &test_rows)?;
    let test_labels: Vec<u8> = test_std.iter().map(|s| s.label).collect();
    build_report(&test_scores, &test_labels, threshold, EvalLevel::Segment)
}

/// Runs the complete pipeline twice on one cohort: once with the
/// subject-disjoint protocol, once with the per-subject mixed protocol, and
/// reports both segment-level results.
pub fn generalization_gap(
    recordings: &[EcgRecording],
    cfg: &GapConfig,
) -> Result<GapReport, EvalError> {
    let segments = segments_of_cohort(recordings, &cfg.preprocess)?;

    // Subject-disjoint protocol.
    let manifest = CohortManifest {
        records: recordings
            .iter()
            .map(|r| ManifestEntry {
                subject_id: r.subject_id.clone(),
                session_id: r.session_id,
                path: String::new(),
                glucose_mgdl: r.glucose_mgdl.unwrap_or(1.0),
            })
            .collect(),
    };
    let split = split_subjects(&manifest, cfg.disjoint_fractions, cfg.seed)?;
    let mut sets: BTreeMap<Role, Vec<Segment>> = BTreeMap::new();
    for s in &segments {
        if let Some(role) = split.role_of(&s.subject_id) {
            sets.entry(role).or_default().push(s.clone());
        }
    }
    let empty = Vec::new();
    let disjoint = train_and_score(
        cfg,
        sets.get(&Role::Train).unwrap_or(&empty),
        sets.get(&Role::Val).unwrap_or(&empty),
        sets.get(&Role::Test).unwrap_or(&empty),
    )?;

    // Mixed protocol: per-subject segment split, validation carved out of
    // the training side so the held-out side stays untouched until scoring.
    let (train_idx, test_idx) = split_segments_mixed(&segments, cfg.mixed_train_fraction, cfg.seed);
    let mut shuffled = train_idx.clone();
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x6d69786564); // "mixed"
    shuffled.shuffle(&mut rng);
    let n_val = (shuffled.len() as f64 * 0.15).round().max(1.0) as usize;
    let (val_part, train_part) = shuffled.split_at(n_val.min(shuffled.len().saturating_sub(1)));
    let mixed_train: Vec<Segment> = train_part.iter().map(|&i| segments[i].clone()).collect();
    let mixed_val: Vec<Segment> = val_part.iter().map(|&i| segments[i].clone()).collect();
    let mixed_test: Vec<Segment> = test_idx.iter().map(|&i| segments[i].clone()).collect();
    let mixed = train_and_score(cfg, &mixed_train, &mixed_val, &mixed_test)?;

    Ok(GapReport { disjoint, mixed })
}
