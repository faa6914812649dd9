//! Prior-weighted logistic-regression score calibration and linear
//! multi-system fusion.
//!
//! The fit minimizes the prior-weighted logistic objective
//! `C(w,b) = pi * mean_tar ln(1 + e^-(f + logit pi))
//!         + (1-pi) * mean_non ln(1 + e^(f + logit pi))`
//! with `f = w's + b`, by damped Newton iterations from (0, 0), with a
//! small L2 ridge on `w` to guard separable development sets. The fitted
//! output `w's + b` is a calibrated natural-log LLR.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::corpus_io::{ScoreEntry, ScoreSet, TrialLabel, TrialList};

const RIDGE: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-9;
const MAX_ITERS: usize = 200;

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("need at least one target and one nontarget trial")]
    SingleClassLabels,
    #[error("scores must be finite")]
    NonFiniteScores,
    #[error("system count mismatch: model has {model} weights, scores have {scores} systems")]
    DimensionMismatch { model: usize, scores: usize },
    #[error("score sets are not aligned to one trial list")]
    MisalignedScores,
    #[error("prior must be in (0, 1)")]
    InvalidPrior,
    #[error("trial list is unlabeled")]
    UnlabeledTrials,
    #[error("malformed calibration model file: {0}")]
    MalformedModelFile(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Raw scores of one or more systems aligned to a single trial list.
#[derive(Debug, Clone)]
pub struct SystemScores {
    trials: usize,
    systems: usize,
    /// row-major: trials x systems
    scores: Vec<f64>,
    labels: Option<Vec<bool>>,
    pairs: Vec<(String, String)>,
}

impl SystemScores {
    /// Builds from per-system score sets; all must be aligned (same order
    /// and pairs). Labels come from the trial list when present.
    pub fn from_score_sets(sets: &[ScoreSet], trials: &TrialList) -> Result<Self, CalibError> {
        if sets.is_empty() {
            return Err(CalibError::DimensionMismatch {
                model: 0,
                scores: 0,
            });
        }
        let n = trials.len();
        for set in sets {
            if set.len() != n {
                return Err(CalibError::MisalignedScores);
            }
            for (entry, trial) in set.entries.iter().zip(&trials.trials) {
                if entry.enroll != trial.enroll || entry.test != trial.test {
                    return Err(CalibError::MisalignedScores);
                }
                if !entry.score.is_finite() {
                    return Err(CalibError::NonFiniteScores);
                }
            }
        }
        let systems = sets.len();
        let mut scores = vec![0.0; n * systems];
        for (j, set) in sets.iter().enumerate() {
            for (i, entry) in set.entries.iter().enumerate() {
                scores[i * systems + j] = entry.score;
            }
        }
        let labels = if trials.is_labeled() {
            Some(
                trials
                    .trials
                    .iter()
                    .map(|t| t.label == Some(TrialLabel::Target))
                    .collect(),
            )
        } else {
            None
        };
        let pairs = trials
            .trials
            .iter()
            .map(|t| (t.enroll.clone(), t.test.clone()))
            .collect();
        Ok(Self {
            trials: n,
            systems,
            scores,
            labels,
            pairs,
        })
    }

    pub fn systems(&self) -> usize {
        self.systems
    }

    pub fn trials(&self) -> usize {
        self.trials
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.systems..(i + 1) * self.systems]
    }
}

/// Per-system weights, offset and the effective prior used for fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationModel {
    pub weights: Vec<f64>,
    pub offset: f64,
    pub prior: f64,
}

/// Fit outcome; `converged` is false when the iteration cap was hit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: CalibrationModel,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Prior-weighted logistic objective at (w, b), without the ridge term.
pub fn calibration_objective(
    ss: &SystemScores,
    weights: &[f64],
    offset: f64,
    prior: f64,
) -> Result<f64, CalibError> {
    let labels = ss.labels.as_ref().ok_or(CalibError::UnlabeledTrials)?;
    if weights.len() != ss.systems {
        return Err(CalibError::DimensionMismatch {
            model: weights.len(),
            scores: ss.systems,
        });
    }
    let n_tar = labels.iter().filter(|&&l| l).count();
    let n_non = labels.len() - n_tar;
    if n_tar == 0 || n_non == 0 {
        return Err(CalibError::SingleClassLabels);
    }
    let c = logit(prior);
    let mut tar = 0.0;
    let mut non = 0.0;
    for i in 0..ss.trials {
        let f: f64 = ss.row(i).iter().zip(weights).map(|(s, w)| s * w).sum::<f64>() + offset;
        if labels[i] {
            tar += softplus(-(f + c));
        } else {
            non += softplus(f + c);
        }
    }
    Ok(prior * tar / n_tar as f64 + (1.0 - prior) * non / n_non as f64)
}

fn objective_with_ridge(ss: &SystemScores, theta: &DVector<f64>, prior: f64) -> f64 {
    let k = ss.systems;
    let w: Vec<f64> = theta.iter().take(k).cloned().collect();
    let data = calibration_objective(ss, &w, theta[k], prior).expect("validated inputs");
    data + 0.5 * RIDGE * w.iter().map(|x| x * x).sum::<f64>()
}

/// Fits calibration weights and offset by damped Newton from (0, 0).
pub fn fit_calibration(ss: &SystemScores, prior: f64) -> Result<FitResult, CalibError> {
    if !(prior > 0.0 && prior < 1.0) {
        return Err(CalibError::InvalidPrior);
    }
    let labels = ss.labels.as_ref().ok_or(CalibError::UnlabeledTrials)?;
    let n_tar = labels.iter().filter(|&&l| l).count();
    let n_non = labels.len() - n_tar;
    if n_tar == 0 || n_non == 0 {
        return Err(CalibError::SingleClassLabels);
    }
    fit_from(ss, prior, DVector::zeros(ss.systems + 1))
}

fn fit_from(
    ss: &SystemScores,
    prior: f64,
    mut theta: DVector<f64>,
) -> Result<FitResult, CalibError> {
    let k = ss.systems;
    let labels = ss.labels.as_ref().unwrap();
    let n_tar = labels.iter().filter(|&&l| l).count() as f64;
    let n_non = labels.len() as f64 - n_tar;
    let c = logit(prior);

    let mut obj = objective_with_ridge(ss, &theta, prior);
    let mut converged = false;
    let mut iterations = 0;
    for iter in 0..MAX_ITERS {
        iterations = iter + 1;
        let mut grad = DVector::zeros(k + 1);
        let mut hess = DMatrix::zeros(k + 1, k + 1);
        for i in 0..ss.trials {
            let row = ss.row(i);
            let f: f64 =
                row.iter().zip(theta.iter()).map(|(s, w)| s * w).sum::<f64>() + theta[k];
            let u = if labels[i] {
                prior / n_tar
            } else {
                (1.0 - prior) / n_non
            };
            let y = if labels[i] { 1.0 } else { 0.0 };
            let p = sigmoid(f + c);
            let g = u * (p - y);
            let h = u * p * (1.0 - p);
            for a in 0..=k {
                let xa = if a < k { row[a] } else { 1.0 };
                grad[a] += g * xa;
                for b in a..=k {
                    let xb = if b < k { row[b] } else { 1.0 };
                    hess[(a, b)] += h * xa * xb;
                }
            }
        }
        for a in 0..k {
            grad[a] += RIDGE * theta[a];
            hess[(a, a)] += RIDGE;
        }
        // tiny floor on the offset curvature keeps the solve well posed
        hess[(k, k)] += 1e-12;
        for a in 0..=k {
            for b in 0..a {
                hess[(a, b)] = hess[(b, a)];
            }
        }
        if grad.amax() < GRAD_TOL {
            converged = true;
            break;
        }
        let step = hess
            .clone()
            .lu()
            .solve(&(-&grad))
            .unwrap_or_else(|| -&grad);
        // backtracking halving
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let candidate = &theta + scale * &step;
            let cand_obj = objective_with_ridge(ss, &candidate, prior);
            if cand_obj <= obj {
                theta = candidate;
                obj = cand_obj;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            converged = grad.amax() < 1e-6;
            break;
        }
    }

    let weights: Vec<f64> = theta.iter().take(k).cloned().collect();
    let offset = theta[k];
    let objective = calibration_objective(ss, &weights, offset, prior)?;
    Ok(FitResult {
        model: CalibrationModel {
            weights,
            offset,
            prior,
        },
        iterations,
        converged,
    objective,
    })
}

/// Applies `w's + b` per trial, producing calibrated LLR scores.
pub fn apply_calibration(model: &CalibrationModel, ss: &SystemScores) -> Result<ScoreSet, CalibError> {
    if model.weights.len() != ss.systems {
        return Err(CalibError::DimensionMismatch {
            model: model.weights.len(),
            scores: ss.systems,
        });
    }
    let entries = (0..ss.trials)
        .map(|i| {
            let f: f64 = ss
                .row(i)
                .iter()
                .zip(&model.weights)
                .map(|(s, w)| s * w)
                .sum::<f64>()
                + model.offset;
            ScoreEntry {
                enroll: ss.pairs[i].0.clone(),
                test: ss.pairs[i].1.clone(),
                score: f,
            }
        })
        .collect();
    Ok(ScoreSet { entries })
}

/// Weighted sum per trial with no offset (hand-assigned fusion).
pub fn manual_fusion(weights: &[f64], ss: &SystemScores) -> Result<ScoreSet, CalibError> {
    let model = CalibrationModel {
        weights: weights.to_vec(),
        offset: 0.0,
        prior: 0.5,
    };
    apply_calibration(&model, ss)
}

/// Model file: `prior=`, `offset=`, `weights=` (comma-separated) lines.
pub fn write_calibration_model(model: &CalibrationModel, path: &Path) -> Result<(), CalibError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "prior={:.16e}", model.prior)?;
    writeln!(w, "offset={:.16e}", model.offset)?;
    let weights: Vec<String> = model.weights.iter().map(|v| format!("{:.16e}", v)).collect();
    writeln!(w, "weights={}", weights.join(","))?;
    w.flush()?;
    Ok(())
}

pub fn load_calibration_model(path: &Path) -> Result<CalibrationModel, CalibError> {
    let r = BufReader::new(File::open(path)?);
    let mut prior = None;
    let mut offset = None;
    let mut weights = None;
    for line in r.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CalibError::MalformedModelFile(format!("bad line {line:?}")))?;
        match key {
            "prior" => {
                prior = Some(value.parse::<f64>().map_err(|_| {
                    CalibError::MalformedModelFile("bad prior".into())
                })?)
            }
            "offset" => {
                offset = Some(value.parse::<f64>().map_err(|_| {
                    CalibError::MalformedModelFile("bad offset".into())
                })?)
            }
            "weights" => {
                let parsed: Result<Vec<f64>, _> =
                    value.split(',').map(|t| t.trim().parse::<f64>()).collect();
                weights = Some(parsed.map_err(|_| {
                    CalibError::MalformedModelFile("bad weights".into())
                })?);
            }
            other => {
                return Err(CalibError::MalformedModelFile(format!(
                    "unknown key {other:?}"
                )))
            }
        }
    }
    match (prior, offset, weights) {
        (Some(prior), Some(offset), Some(weights)) => Ok(CalibrationModel {
            weights,
            offset,
            prior,
        }),
        _ => Err(CalibError::MalformedModelFile(
            "missing prior, offset or weights".into(),
        )),
    }
}

/// Restarts the Newton fit from an arbitrary initial point; used to check
/// convexity-driven convergence to a single optimum.
pub fn fit_calibration_from(
    ss: &SystemScores,
    prior: f64,
    init_weights: &[f64],
    init_offset: f64,
) -> Result<FitResult, CalibError> {
    if !(prior > 0.0 && prior < 1.0) {
        return Err(CalibError::InvalidPrior);
    }
    let labels = ss.labels.as_ref().ok_or(CalibError::UnlabeledTrials)?;
    let n_tar = labels.iter().filter(|&&l| l).count();
    if n_tar == 0 || n_tar == labels.len() {
        return Err(CalibError::SingleClassLabels);
    }
    if init_weights.len() != ss.systems {
        return Err(CalibError::DimensionMismatch {
            model: init_weights.len(),
            scores: ss.systems,
        });
    }
    let mut theta = DVector::zeros(ss.systems + 1);
    for (i, &w) in init_weights.iter().enumerate() {
        theta[i] = w;
    }
    theta[ss.systems] = init_offset;
    fit_from(ss, prior, theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus_io::Trial;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn make_trials(labels: &[bool]) -> TrialList {
        TrialList {
            trials: labels
                .iter()
                .enumerate()
                .map(|(i, &l)| Trial {
                    enroll: format!("e{i}"),
                    test: format!("t{i}"),
                    label: Some(if l { TrialLabel::Target } else { TrialLabel::Nontarget }),
                })
                .collect(),
        }
    }

    fn make_scores(trials: &TrialList, scores: &[f64]) -> ScoreSet {
        ScoreSet {
            entries: trials
                .trials
                .iter()
                .zip(scores)
                .map(|(t, &s)| ScoreEntry {
                    enroll: t.enroll.clone(),
                    test: t.test.clone(),
                    score: s,
                })
                .collect(),
        }
    }

    /// Scores that are exact LLRs of N(m,1) vs N(-m,1) class conditionals.
    fn synthetic_llr_system(
        rng: &mut ChaCha8Rng,
        n: usize,
        m: f64,
    ) -> (Vec<bool>, Vec<f64>) {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut labels = Vec::with_capacity(n);
        let mut scores = Vec::with_capacity(n);
        for i in 0..n {
            let target = i % 2 == 0;
            let mean = if target { m } else { -m };
            let x: f64 = mean + normal.sample(rng);
            labels.push(target);
            scores.push(2.0 * m * x);
        }
        (labels, scores)
    }

    #[test]
    fn fit_recovers_identity_on_true_llrs() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (labels, scores) = synthetic_llr_system(&mut rng, 10_000, 1.0);
        let trials = make_trials(&labels);
        let ss = SystemScores::from_score_sets(&[make_scores(&trials, &scores)], &trials).unwrap();
        let fit = fit_calibration(&ss, 0.05).unwrap();
        assert!(fit.converged);
        assert!((fit.model.weights[0] - 1.0).abs() < 0.05, "w = {}", fit.model.weights[0]);
        assert!(fit.model.offset.abs() < 0.05, "b = {}", fit.model.offset);
    }

    #[test]
    fn fitted_objective_beats_identity_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let (labels, scores) = synthetic_llr_system(&mut rng, 2_000, 0.8);
        let trials = make_trials(&labels);
        let ss = SystemScores::from_score_sets(&[make_scores(&trials, &scores)], &trials).unwrap();
        let fit = fit_calibration(&ss, 0.05).unwrap();
        let at_identity = calibration_objective(&ss, &[1.0], 0.0, 0.05).unwrap();
        assert!(fit.objective <= at_identity + 1e-9);
    }

    #[test]
    fn single_class_rejected() {
        let trials = make_trials(&[true, true, true]);
        let ss = SystemScores::from_score_sets(
            &[make_scores(&trials, &[0.1, 0.2, 0.3])],
            &trials,
        )
        .unwrap();
        assert!(matches!(
            fit_calibration(&ss, 0.05),
            Err(CalibError::SingleClassLabels)
        ));
    }

    #[test]
    fn apply_identity_and_selector() {
        let trials = make_trials(&[true, false]);
        let s1 = make_scores(&trials, &[1.0, 3.0]);
        let s2 = make_scores(&trials, &[5.0, 7.0]);
        let ss = SystemScores::from_score_sets(&[s1, s2], &trials).unwrap();
        let mean = apply_calibration(
            &CalibrationModel {
                weights: vec![0.5, 0.5],
                offset: 0.0,
                prior: 0.05,
            },
            &ss,
        )
        .unwrap();
        assert_eq!(mean.entries[0].score, 3.0);
        let first = apply_calibration(
            &CalibrationModel {
                weights: vec![1.0, 0.0],
                offset: 0.0,
                prior: 0.05,
            },
            &ss,
        )
        .unwrap();
        assert_eq!(first.entries[0].score, 1.0);
        assert_eq!(first.entries[1].score, 3.0);
    }

    #[test]
    fn manual_fusion_weighted_sum() {
        let trials = make_trials(&[true]);
        let s1 = make_scores(&trials, &[1.0]);
        let s2 = make_scores(&trials, &[3.0]);
        let ss = SystemScores::from_score_sets(&[s1, s2], &trials).unwrap();
        let out = manual_fusion(&[0.5, 0.5], &ss).unwrap();
        assert_eq!(out.entries[0].score, 2.0);
    }

    #[test]
    fn restart_converges_to_same_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let (labels, scores) = synthetic_llr_system(&mut rng, 1_000, 0.7);
        let trials = make_trials(&labels);
        let ss = SystemScores::from_score_sets(&[make_scores(&trials, &scores)], &trials).unwrap();
        let base = fit_calibration(&ss, 0.05).unwrap();
        for seed in 0..5 {
            let mut r2 = ChaCha8Rng::seed_from_u64(seed);
            let w0 = r2.gen_range(-3.0..3.0);
            let b0 = r2.gen_range(-3.0..3.0);
            let fit = fit_calibration_from(&ss, 0.05, &[w0], b0).unwrap();
            assert!((fit.model.weights[0] - base.model.weights[0]).abs() < 1e-6);
            assert!((fit.model.offset - base.model.offset).abs() < 1e-6);
        }
    }

    #[test]
    fn column_scaling_rescales_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let (labels, scores) = synthetic_llr_system(&mut rng, 4_000, 0.9);
        let trials = make_trials(&labels);
        let ss = SystemScores::from_score_sets(&[make_scores(&trials, &scores)], &trials).unwrap();
        let fit1 = fit_calibration(&ss, 0.05).unwrap();
        let a = 3.0;
        let scaled: Vec<f64> = scores.iter().map(|s| a * s).collect();
        let ss2 =
            SystemScores::from_score_sets(&[make_scores(&trials, &scaled)], &trials).unwrap();
        let fit2 = fit_calibration(&ss2, 0.05).unwrap();
        assert!((fit2.model.weights[0] - fit1.model.weights[0] / a).abs() < 1e-4);
    }

    #[test]
    fn model_file_round_trip() {
        let model = CalibrationModel {
            weights: vec![0.25, -1.5, 3.0],
            offset: 0.125,
            prior: 0.05,
        };
        let f = tempfile::NamedTempFile::new().unwrap();
        write_calibration_model(&model, f.path()).unwrap();
        let back = load_calibration_model(f.path()).unwrap();
        assert_eq!(back, model);
    }
}
