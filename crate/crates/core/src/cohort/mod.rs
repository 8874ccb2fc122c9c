//! Cohort modeling: manifests, labeling, and train/val/test splits.
//!
//! The labeling rule is a strict glucose threshold. Splits come in two
//! protocols: the subject-disjoint one used for the headline evaluation, and
//! the deliberately leaky per-subject mixed split kept around for the
//! generalization-gap experiment.

mod synth;

pub use synth::{synth_cohort, GroundTruth, SynthCohort, SynthRecording, SynthSpec};

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::{subject_key, EcgRecording, Segment};

/// Glucose concentrations strictly above this mark are labeled hyperglycemic.
pub const HYPER_THRESHOLD_MGDL: f64 = 100.0;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("manifest has no records")]
    EmptyManifest,
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("duplicate record: {0}")]
    DuplicateRecord(String),
    #[error("bad manifest line {line}: {err}")]
    Format { line: usize, err: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Binary hyperglycemia label for a glucose reading: 1 iff strictly above
/// 100 mg/dL.
pub fn label(glucose_mgdl: f64) -> u8 {
    (glucose_mgdl > HYPER_THRESHOLD_MGDL) as u8
}

/// Label for a recording, when it carries a glucose reading.
pub fn label_recording(rec: &EcgRecording) -> Option<u8> {
    rec.glucose_mgdl.map(label)
}

/// One manifest line: where a recording lives and what was measured.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub session_id: u32,
    pub path: String,
    pub glucose_mgdl: f64,
}

/// A cohort: one entry per recording, (subject, session) unique.
#[derive(Debug, Clone, Default)]
pub struct CohortManifest {
    pub records: Vec<ManifestEntry>,
}

impl CohortManifest {
    pub fn validate(&self) -> Result<(), CohortError> {
        if self.records.is_empty() {
            return Err(CohortError::EmptyManifest);
        }
        let mut seen = std::collections::BTreeSet::new();
        for r in &self.records {
            if r.glucose_mgdl <= 0.0 {
                return Err(CohortError::InvalidSpec(format!(
                    "glucose must be positive, got {} for {}",
                    r.glucose_mgdl, r.subject_id
                )));
            }
            if !seen.insert((r.subject_id.clone(), r.session_id)) {
                return Err(CohortError::DuplicateRecord(format!(
                    "{} session {}",
                    r.subject_id, r.session_id
                )));
            }
        }
        Ok(())
    }

    /// Sorted unique subject ids.
    pub fn subjects(&self) -> Vec<String> {
        let mut s: Vec<String> = self
            .records
            .iter()
            .map(|r| r.subject_id.clone())
            .collect();
        s.sort();
        s.dedup();
        s
    }

    /// Writes JSON-lines: one object per recording.
    pub fn write_jsonl(&self, path: &Path) -> Result<(), CohortError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut f, r)
                .map_err(|e| CohortError::Format { line: 0, err: e.to_string() })?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self, CohortError> {
        let f = BufReader::new(std::fs::File::open(path)?);
        let mut records = Vec::new();
        for (i, line) in f.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| CohortError::Format { line: i + 1, err: e.to_string() })?;
            records.push(entry);
        }
        let manifest = CohortManifest { records };
        manifest.validate()?;
        Ok(manifest)
    }
}

/// Which partition a subject belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Val,
    Test,
}

/// Subject-level split: every subject (and so both of its sessions) maps to
/// exactly one role.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub roles: BTreeMap<String, Role>,
    pub seed: u64,
    pub fractions: (f64, f64, f64),
}

impl SplitAssignment {
    pub fn role_of(&self, subject_id: &str) -> Option<Role> {
        self.roles.get(subject_id).copied()
    }

    pub fn count(&self, role: Role) -> usize {
        self.roles.values().filter(|&&r| r == role).count()
    }
}

/// Deterministic subject-disjoint split.
///
/// Subjects are shuffled by the seeded generator and assigned so that
/// train/val counts are the rounded fractions of the subject count and test
/// takes the remainder (each realized fraction is within one subject of the
/// request).
pub fn split_subjects(
    manifest: &CohortManifest,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<SplitAssignment, CohortError> {
    manifest.validate()?;
    let (ft, fv, fe) = fractions;
    if ft < 0.0 || fv < 0.0 || fe < 0.0 || (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(CohortError::InvalidSpec(format!(
            "fractions must be non-negative and sum to 1, got {fractions:?}"
        )));
    }
    let mut subjects = manifest.subjects();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);

    let n = subjects.len();
    let n_train = ((ft * n as f64).round() as usize).min(n);
    let n_val = ((fv * n as f64).round() as usize).min(n - n_train);

    let mut roles = BTreeMap::new();
    for (i, s) in subjects.into_iter().enumerate() {
        let role = if i < n_train {
            Role::Train
        } else if i < n_train + n_val {
            Role::Val
        } else {
            Role::Test
        };
        roles.insert(s, role);
    }
    Ok(SplitAssignment {
        roles,
        seed,
        fractions,
    })
}

/// The leaky protocol: each subject's segments are split and then pooled, so
/// every subject appears on both sides. Returns (train, test) indices into
/// `segments`.
///
/// Subjects with a single segment cannot straddle the split and go to the
/// training side.
pub fn split_segments_mixed(
    segments: &[Segment],
    train_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    assert!(
        (0.0..=1.0).contains(&train_fraction),
        "train_fraction must be in [0, 1]"
    );
    let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in segments.iter().enumerate() {
        by_subject.entry(&s.subject_id).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (subject, mut idx) in by_subject {
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ subject_key(subject));
        idx.shuffle(&mut rng);
        let n = idx.len();
        let k = if n < 2 {
            n
        } else {
            ((train_fraction * n as f64).round() as usize).clamp(1, n - 1)
        };
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest_of(n: usize) -> CohortManifest {
        CohortManifest {
            records: (0..n)
                .map(|i| ManifestEntry {
                    subject_id: format!("subj-{i:04}"),
                    session_id: 0,
                    path: format!("rec{i}.bin"),
                    glucose_mgdl: 90.0,
                })
                .collect(),
        }
    }

    #[test]
    fn label_threshold_is_strict() {
        assert_eq!(label(100.0), 0);
        assert_eq!(label(101.0), 1);
        assert_eq!(label(100.0 + 1e-9), 1);
        assert_eq!(label(55.0), 0);
    }

    #[test]
    fn split_1119_subjects_matches_study_counts() {
        let m = manifest_of(1119);
        let split = split_subjects(&m, (0.65, 0.15, 0.20), 7).unwrap();
        assert_eq!(split.count(Role::Train), 727);
        assert_eq!(split.count(Role::Val), 168);
        assert_eq!(split.count(Role::Test), 224);
    }

    #[test]
    fn split_roles_are_disjoint_and_total() {
        let m = manifest_of(10);
        let split = split_subjects(&m, (0.65, 0.15, 0.20), 3).unwrap();
        assert_eq!(split.roles.len(), 10); // every subject exactly once
        let total = split.count(Role::Train) + split.count(Role::Val) + split.count(Role::Test);
        assert_eq!(total, 10);
    }

    #[test]
    fn split_is_deterministic() {
        let m = manifest_of(137);
        let a = split_subjects(&m, (0.65, 0.15, 0.20), 42).unwrap();
        let b = split_subjects(&m, (0.65, 0.15, 0.20), 42).unwrap();
        assert_eq!(a.roles, b.roles);
        let c = split_subjects(&m, (0.65, 0.15, 0.20), 43).unwrap();
        assert_ne!(a.roles, c.roles);
    }

    #[test]
    fn split_rejects_empty_manifest() {
        let m = CohortManifest { records: vec![] };
        assert!(matches!(
            split_subjects(&m, (0.65, 0.15, 0.20), 0),
            Err(CohortError::EmptyManifest)
        ));
    }

    #[test]
    fn manifest_rejects_duplicates() {
        let mut m = manifest_of(3);
        m.records.push(m.records[0].clone());
        assert!(matches!(m.validate(), Err(CohortError::DuplicateRecord(_))));
    }

    #[test]
    fn mixed_split_40_segments_is_34_6() {
        let segments: Vec<Segment> = (0..40)
            .map(|i| Segment {
                subject_id: "a".into(),
                values: vec![i as f64],
                label: 0,
            })
            .collect();
        let (train, test) = split_segments_mixed(&segments, 0.85, 11);
        assert_eq!(train.len(), 34);
        assert_eq!(test.len(), 6);
    }

    #[test]
    fn mixed_split_puts_every_subject_on_both_sides() {
        let mut segments = Vec::new();
        for s in 0..6 {
            for i in 0..10 {
                segments.push(Segment {
                    subject_id: format!("subj-{s}"),
                    values: vec![i as f64],
                    label: 0,
                });
            }
        }
        let (train, test) = split_segments_mixed(&segments, 0.85, 5);
        assert_eq!(train.len() + test.len(), segments.len());
        for side in [&train, &test] {
            let subjects: std::collections::BTreeSet<&str> =
                side.iter().map(|&i| segments[i].subject_id.as_str()).collect();
            assert_eq!(subjects.len(), 6, "every subject on each side");
        }
        // Determinism.
        let (train2, test2) = split_segments_mixed(&segments, 0.85, 5);
        assert_eq!(train, train2);
        assert_eq!(test, test2);
    }
}
