//! End-to-end checks of the `svkit` binary via std::process.

use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use svkit::corpus_io::{
    write_scores, write_trials, ScoreEntry, ScoreSet, Trial, TrialLabel, TrialList,
};
use svkit::metrics::{eer, min_dcf, DcfParams, LabeledScores};

const BIN: &str = env!("CARGO_BIN_EXE_svkit");

#[test]
fn help_exits_zero() {
    let out = Command::new(BIN).arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("eval"));
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let out = Command::new(BIN).arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_file_is_domain_error() {
    let out = Command::new(BIN)
        .args(["eval", "--scores", "/nonexistent", "--trials", "/nonexistent"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn eval_matches_library() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut trials = Vec::new();
    let mut entries = Vec::new();
    for i in 0..400 {
        let target = i % 2 == 0;
        let score = if target {
            rng.gen_range(0.0..2.0)
        } else {
            rng.gen_range(-2.0..0.5)
        };
        trials.push(Trial {
            enroll: format!("e{i}"),
            test: format!("t{i}"),
            label: Some(if target {
                TrialLabel::Target
            } else {
                TrialLabel::Nontarget
            }),
        });
        entries.push(ScoreEntry {
            enroll: format!("e{i}"),
            test: format!("t{i}"),
            score,
        });
    }
    let trial_list = TrialList { trials };
    let score_set = ScoreSet { entries };

    let dir = tempfile::tempdir().unwrap();
    let trials_path = dir.path().join("trials.txt");
    let scores_path = dir.path().join("scores.txt");
    write_trials(&trial_list, &trials_path).unwrap();
    write_scores(&score_set, &scores_path).unwrap();

    let out = Command::new(BIN)
        .args([
            "eval",
            "--scores",
            scores_path.to_str().unwrap(),
            "--trials",
            trials_path.to_str().unwrap(),
            "--machine",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let field = |key: &str| -> f64 {
        stdout
            .lines()
            .find_map(|l| l.strip_prefix(&format!("{key}=")))
            .unwrap_or_else(|| panic!("missing {key} in {stdout}"))
            .parse()
            .unwrap()
    };

    let ls = LabeledScores::from_trials(&score_set, &trial_list).unwrap();
    let (want_eer, _) = eer(&ls);
    let (want_mdcf, _) = min_dcf(&ls, &DcfParams::default());
    assert!((field("eer") - want_eer).abs() < 1e-6);
    assert!((field("min_dcf") - want_mdcf).abs() < 1e-6);
}
