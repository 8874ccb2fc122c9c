//! The binary end to end: command chain, reruns byte-identical, clean
//! failures on bad input.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ecgcbam"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn ecgcbam");
    assert!(
        out.status.success(),
        "ecgcbam {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Recursively collects (relative path, bytes) under a directory.
fn dir_contents(root: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out
}

fn assert_dirs_identical(a: &Path, b: &Path) {
    let ca = dir_contents(a);
    let cb = dir_contents(b);
    let names_a: Vec<&String> = ca.iter().map(|(n, _)| n).collect();
    let names_b: Vec<&String> = cb.iter().map(|(n, _)| n).collect();
    assert_eq!(names_a, names_b, "file sets differ");
    for ((name, bytes_a), (_, bytes_b)) in ca.iter().zip(&cb) {
        assert_eq!(bytes_a, bytes_b, "{name} differs between reruns");
    }
}

struct Dirs {
    root: tempfile::TempDir,
}

impl Dirs {
    fn new() -> Self {
        Dirs {
            root: tempfile::tempdir().unwrap(),
        }
    }
    fn path(&self, name: &str) -> PathBuf {
        self.root.path().join(name)
    }
    fn arg(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }
}

#[test]
fn full_chain_and_rerun_determinism() {
    let dirs = Dirs::new();

    // Two identical synth runs.
    for tag in ["c1", "c2"] {
        run_ok(&[
            "synth",
            "--seed",
            "7",
            "--subjects",
            "12",
            "--duration",
            "30",
            "--out",
            &dirs.arg(tag),
        ]);
    }
    assert_dirs_identical(&dirs.path("c1"), &dirs.path("c2"));

    // Preprocess the same cohort twice.
    let manifest = dirs.path("c1").join("manifest.jsonl");
    for tag in ["p1", "p2"] {
        run_ok(&[
            "preprocess",
            "--seed",
            "7",
            "--manifest",
            manifest.to_str().unwrap(),
            "--max-segments",
            "6",
            "--out",
            &dirs.arg(tag),
        ]);
    }
    assert_dirs_identical(&dirs.path("p1"), &dirs.path("p2"));

    // Train twice.
    for tag in ["t1", "t2"] {
        run_ok(&[
            "train",
            "--seed",
            "7",
            "--cache",
            &dirs.arg("p1"),
            "--epochs",
            "2",
            "--out",
            &dirs.arg(tag),
        ]);
    }
    assert_dirs_identical(&dirs.path("t1"), &dirs.path("t2"));

    // Evaluate twice.
    let ckpt = dirs.path("t1").join("model.ckpt");
    for tag in ["e1", "e2"] {
        run_ok(&[
            "eval",
            "--seed",
            "7",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--cache",
            &dirs.arg("p1"),
            "--out",
            &dirs.arg(tag),
        ]);
    }
    assert_dirs_identical(&dirs.path("e1"), &dirs.path("e2"));
    for name in ["eval_segment.json", "eval_subject.json", "roc.csv", "config.json"] {
        assert!(dirs.path("e1").join(name).exists(), "missing {name}");
    }
    let csv = std::fs::read_to_string(dirs.path("e1").join("roc.csv")).unwrap();
    assert!(csv.starts_with("fpr,tpr,threshold\n"));

    // Infer twice on one recording; stdout is the artifact.
    let rec = dirs.path("c1").join("recordings/rec_subj-0000_s00.bin");
    let out1 = run_ok(&[
        "infer",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--recording",
        rec.to_str().unwrap(),
        "--no-quality-gate",
    ]);
    let out2 = run_ok(&[
        "infer",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--recording",
        rec.to_str().unwrap(),
        "--no-quality-gate",
    ]);
    assert_eq!(out1.stdout, out2.stdout);
    let text = String::from_utf8_lossy(&out1.stdout);
    assert!(text.lines().next().unwrap().starts_with("segment 0 "));
    assert!(text.lines().last().unwrap().starts_with("subject "));
}

#[test]
fn gap_command_runs_and_is_deterministic() {
    let dirs = Dirs::new();
    for tag in ["g1", "g2"] {
        run_ok(&[
            "gap",
            "--seed",
            "7",
            "--subjects",
            "16",
            "--epochs",
            "2",
            "--max-segments",
            "6",
            "--out",
            &dirs.arg(tag),
        ]);
    }
    assert_dirs_identical(&dirs.path("g1"), &dirs.path("g2"));
    for name in ["gap_disjoint.json", "gap_mixed.json", "gap_summary.json"] {
        assert!(dirs.path("g1").join(name).exists(), "missing {name}");
    }
}

#[test]
fn five_beat_mode_widens_cached_segments() {
    let dirs = Dirs::new();
    run_ok(&[
        "synth",
        "--seed",
        "9",
        "--subjects",
        "4",
        "--duration",
        "40",
        "--out",
        &dirs.arg("c"),
    ]);
    run_ok(&[
        "preprocess",
        "--seed",
        "9",
        "--manifest",
        dirs.path("c").join("manifest.jsonl").to_str().unwrap(),
        "--concat",
        "5",
        "--out",
        &dirs.arg("p"),
    ]);
    let segs = ecgcbam::signal::read_segment_cache(&dirs.path("p").join("train.seg")).unwrap();
    assert!(!segs.is_empty());
    assert!(segs.iter().all(|s| s.values.len() == 3000));
}

#[test]
fn errors_exit_nonzero_with_one_line_diagnostic() {
    let dirs = Dirs::new();
    let out = bin()
        .args(["preprocess", "--manifest", "/nonexistent/manifest.jsonl", "--out", &dirs.arg("x")])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:"), "stderr: {err}");

    let out = bin()
        .args(["eval", "--checkpoint", "/nonexistent.ckpt", "--cache", &dirs.arg("x"), "--out", &dirs.arg("y")])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn synth_cohort_uses_duration_and_subject_flags() {
    let dirs = Dirs::new();
    run_ok(&[
        "synth",
        "--seed",
        "3",
        "--subjects",
        "5",
        "--duration",
        "12",
        "--sessions",
        "2",
        "--out",
        &dirs.arg("s"),
    ]);
    let manifest = std::fs::read_to_string(dirs.path("s").join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 10); // 5 subjects x 2 sessions
    // Ground-truth sidecars exist per recording.
    let truth_files = std::fs::read_dir(dirs.path("s").join("truth")).unwrap().count();
    assert_eq!(truth_files, 10);
}
