//! Detection metrics over labeled score sets: EER, minDCF, actual DCF,
//! Cllr and DET curve points.
//!
//! Decision rule: `score >= threshold` accepts (ties accept). Thresholds
//! are swept at midpoints between consecutive distinct pooled scores plus
//! -inf and +inf, which covers every achievable operating point. EER is
//! linearly interpolated at the miss / false-alarm crossing.

use thiserror::Error;

use crate::corpus_io::{ScoreSet, TrialLabel, TrialList};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("both target and nontarget scores are required")]
    EmptyClass,
    #[error("scores must be finite")]
    NonFiniteScore,
    #[error("score set and trial list lengths differ: {scores} vs {trials}")]
    LengthMismatch { scores: usize, trials: usize },
    #[error("trial list is unlabeled")]
    UnlabeledTrials,
    #[error("invalid dcf params: p_target in (0,1), costs > 0 required")]
    InvalidDcfParams,
}

/// Target and nontarget score pools, both non-empty and finite.
#[derive(Debug, Clone)]
pub struct LabeledScores {
    targets: Vec<f64>,
    nontargets: Vec<f64>,
}

impl LabeledScores {
    pub fn new(targets: Vec<f64>, nontargets: Vec<f64>) -> Result<Self, MetricsError> {
        if targets.is_empty() || nontargets.is_empty() {
            return Err(MetricsError::EmptyClass);
        }
        if targets
            .iter()
            .chain(nontargets.iter())
            .any(|s| !s.is_finite())
        {
            return Err(MetricsError::NonFiniteScore);
        }
        Ok(Self {
            targets,
            nontargets,
        })
    }

    /// Pairs a score set with its labeled trial list, positionally.
    pub fn from_trials(scores: &ScoreSet, trials: &TrialList) -> Result<Self, MetricsError> {
        if scores.len() != trials.len() {
            return Err(MetricsError::LengthMismatch {
                scores: scores.len(),
                trials: trials.len(),
            });
        }
        let mut targets = Vec::new();
        let mut nontargets = Vec::new();
        for (entry, trial) in scores.entries.iter().zip(&trials.trials) {
            match trial.label {
                Some(TrialLabel::Target) => targets.push(entry.score),
                Some(TrialLabel::Nontarget) => nontargets.push(entry.score),
                None => return Err(MetricsError::UnlabeledTrials),
            }
        }
        Self::new(targets, nontargets)
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn nontargets(&self) -> &[f64] {
        &self.nontargets
    }
}

/// Operating prior and costs of the detection cost function.
#[derive(Debug, Clone, Copy)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl DcfParams {
    pub fn new(p_target: f64, c_miss: f64, c_fa: f64) -> Result<Self, MetricsError> {
        if !(p_target > 0.0 && p_target < 1.0 && c_miss > 0.0 && c_fa > 0.0) {
            return Err(MetricsError::InvalidDcfParams);
        }
        Ok(Self {
            p_target,
            c_miss,
            c_fa,
        })
    }
}

impl Default for DcfParams {
    /// Challenge operating point: p_target = 0.05, unit costs.
    fn default() -> Self {
        Self {
            p_target: 0.05,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

/// Sweep thresholds: -inf, midpoints of consecutive distinct pooled scores, +inf.
fn sweep_thresholds(ls: &LabeledScores) -> Vec<f64> {
    let mut pooled: Vec<f64> = ls
        .targets
        .iter()
        .chain(ls.nontargets.iter())
        .cloned()
        .collect();
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pooled.dedup();
    let mut thresholds = Vec::with_capacity(pooled.len() + 1);
    thresholds.push(f64::NEG_INFINITY);
    for w in pooled.windows(2) {
        thresholds.push(w[0] + (w[1] - w[0]) / 2.0);
    }
    thresholds.push(f64::INFINITY);
    thresholds
}

/// P_miss = frac(target < theta), P_fa = frac(nontarget >= theta).
fn miss_fa_at(ls: &LabeledScores, theta: f64) -> (f64, f64) {
    let miss = ls.targets.iter().filter(|&&s| s < theta).count() as f64
        / ls.targets.len() as f64;
    let fa = ls.nontargets.iter().filter(|&&s| s >= theta).count() as f64
        / ls.nontargets.len() as f64;
    (miss, fa)
}

/// Equal error rate with the crossing threshold, linearly interpolated
/// between the bracketing sweep points.
pub fn eer(ls: &LabeledScores) -> (f64, f64) {
    let thresholds = sweep_thresholds(ls);
    let points: Vec<(f64, f64)> = thresholds.iter().map(|&t| miss_fa_at(ls, t)).collect();
    // diff = pm - pf goes from -1 at -inf to +1 at +inf
    let mut idx = points.len() - 1;
    for (i, &(pm, pf)) in points.iter().enumerate() {
        if pm - pf >= 0.0 {
            idx = i;
            break;
        }
    }
    if idx == 0 {
        return (points[0].0, thresholds[0]);
    }
    let (pm0, pf0) = points[idx - 1];
    let (pm1, pf1) = points[idx];
    let a = pf0 - pm0; // >= 0
    let b = pm1 - pf1; // >= 0
    let t = if a + b > 0.0 { a / (a + b) } else { 0.0 };
    let eer = pm0 + t * (pm1 - pm0);
    let th0 = thresholds[idx - 1];
    let th1 = thresholds[idx];
    let threshold = if th0.is_finite() && th1.is_finite() {
        th0 + t * (th1 - th0)
    } else if th0.is_finite() {
        th0
    } else {
        th1
    };
    (eer, threshold)
}

fn dcf_norm(p: &DcfParams) -> f64 {
    (p.c_miss * p.p_target).min(p.c_fa * (1.0 - p.p_target))
}

/// Minimum normalized detection cost over the sweep, with its threshold.
pub fn min_dcf(ls: &LabeledScores, p: &DcfParams) -> (f64, f64) {
    let norm = dcf_norm(p);
    let mut best = f64::INFINITY;
    let mut best_theta = f64::NEG_INFINITY;
    for theta in sweep_thresholds(ls) {
        let (pm, pf) = miss_fa_at(ls, theta);
        let dcf = (p.c_miss * p.p_target * pm + p.c_fa * (1.0 - p.p_target) * pf) / norm;
        if dcf < best {
            best = dcf;
            best_theta = theta;
        }
    }
    (best, best_theta)
}

/// Normalized detection cost at one operating threshold.
pub fn act_dcf(ls: &LabeledScores, p: &DcfParams, threshold: f64) -> f64 {
    let (pm, pf) = miss_fa_at(ls, threshold);
    (p.c_miss * p.p_target * pm + p.c_fa * (1.0 - p.p_target) * pf) / dcf_norm(p)
}

/// Bayes decision threshold for calibrated natural-log LLR scores.
pub fn bayes_threshold(p: &DcfParams) -> f64 {
    ((p.c_fa * (1.0 - p.p_target)) / (p.c_miss * p.p_target)).ln()
}

/// Cost of log-likelihood-ratio; scores are natural-log LLRs.
pub fn cllr(ls: &LabeledScores) -> f64 {
    let log2 = std::f64::consts::LN_2;
    // log2(1 + e^x) stabilized
    let softplus2 = |x: f64| {
        if x > 0.0 {
            (x + (-x).exp().ln_1p()) / log2
        } else {
            x.exp().ln_1p() / log2
        }
    };
    let t: f64 = ls.targets.iter().map(|&s| softplus2(-s)).sum::<f64>() / ls.targets.len() as f64;
    let n: f64 = ls.nontargets.iter().map(|&s| softplus2(s)).sum::<f64>()
        / ls.nontargets.len() as f64;
    0.5 * (t + n)
}

/// One (P_miss, P_fa) point per sweep threshold; P_fa non-increasing.
pub fn det_points(ls: &LabeledScores) -> Vec<(f64, f64)> {
    sweep_thresholds(ls)
        .into_iter()
        .map(|t| miss_fa_at(ls, t))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ls(t: &[f64], n: &[f64]) -> LabeledScores {
        LabeledScores::new(t.to_vec(), n.to_vec()).unwrap()
    }

    #[test]
    fn eer_perfect_separation() {
        let (e, _) = eer(&ls(&[0.9, 0.8], &[0.1, 0.2]));
        assert_eq!(e, 0.0);
    }

    #[test]
    fn eer_fully_interleaved() {
        let (e, _) = eer(&ls(&[0.8, 0.2], &[0.9, 0.1]));
        assert!((e - 0.5).abs() < 1e-12);
    }

    #[test]
    fn eer_monotone_invariance() {
        let a = ls(&[0.3, 1.2, -0.5, 0.8], &[-1.0, 0.1, 0.4, -0.2]);
        let b = LabeledScores::new(
            a.targets().iter().map(|s| s.exp()).collect(),
            a.nontargets().iter().map(|s| s.exp()).collect(),
        )
        .unwrap();
        assert!((eer(&a).0 - eer(&b).0).abs() < 1e-12);
    }

    #[test]
    fn min_dcf_perfect_separation() {
        let p = DcfParams::default();
        let (d, _) = min_dcf(&ls(&[2.0, 3.0], &[0.0, 1.0]), &p);
        assert_eq!(d, 0.0);
    }

    #[test]
    fn min_dcf_inverted_scores_caps_at_one() {
        let p = DcfParams::default();
        let (d, _) = min_dcf(&ls(&[-2.0, -3.0], &[0.0, 1.0]), &p);
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn min_dcf_bounded() {
        let p = DcfParams::default();
        let (d, _) = min_dcf(&ls(&[0.1, 0.5, -0.3], &[0.0, 0.4, 0.6]), &p);
        assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn act_dcf_extremes() {
        let p = DcfParams::default();
        let set = ls(&[0.5, 1.0], &[-0.5, 0.0]);
        let norm = (p.c_miss * p.p_target).min(p.c_fa * (1.0 - p.p_target));
        let lo = act_dcf(&set, &p, f64::NEG_INFINITY);
        assert!((lo - p.c_fa * (1.0 - p.p_target) / norm).abs() < 1e-12);
        let hi = act_dcf(&set, &p, f64::INFINITY);
        assert!((hi - p.c_miss * p.p_target / norm).abs() < 1e-12);
    }

    #[test]
    fn act_dcf_at_min_threshold_matches_min() {
        let p = DcfParams::default();
        let set = ls(&[0.3, 0.8, 0.1], &[0.2, -0.1, 0.5]);
        let (min, theta) = min_dcf(&set, &p);
        assert!((act_dcf(&set, &p, theta) - min).abs() < 1e-12);
    }

    #[test]
    fn min_dcf_lower_bounds_act_dcf() {
        let p = DcfParams::default();
        let set = ls(&[0.3, 0.8, 0.1, 0.9], &[0.2, -0.1, 0.5, 0.0]);
        let (min, _) = min_dcf(&set, &p);
        for theta in [-1.0, 0.0, 0.15, 0.3, 0.85, 2.0] {
            assert!(min <= act_dcf(&set, &p, theta) + 1e-15);
        }
    }

    #[test]
    fn cllr_all_zero_scores_is_one() {
        let c = cllr(&ls(&[0.0, 0.0], &[0.0, 0.0, 0.0]));
        assert!((c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cllr_perfect_limit() {
        let c = cllr(&ls(&[1e6], &[-1e6]));
        assert!(c.abs() < 1e-12);
    }

    #[test]
    fn det_points_contain_extremes_and_monotone_fa() {
        let set = ls(&[0.9], &[0.1]);
        let pts = det_points(&set);
        assert_eq!(pts.first(), Some(&(0.0, 1.0)));
        assert_eq!(pts.last(), Some(&(1.0, 0.0)));
        assert!(pts.contains(&(0.0, 0.0)));
        for w in pts.windows(2) {
            assert!(w[1].1 <= w[0].1);
        }
    }

    #[test]
    fn eer_lies_on_det_polyline() {
        let set = ls(&[0.3, 0.8, 0.1, 0.9, 0.55], &[0.2, -0.1, 0.5, 0.0, 0.6]);
        let (e, _) = eer(&set);
        let pts = det_points(&set);
        // find the segment where pm - pf changes sign and interpolate
        let mut found = false;
        for w in pts.windows(2) {
            let d0 = w[0].0 - w[0].1;
            let d1 = w[1].0 - w[1].1;
            if d0 <= 0.0 && d1 >= 0.0 {
                let t = if d1 - d0 > 0.0 { -d0 / (d1 - d0) } else { 0.0 };
                let pm = w[0].0 + t * (w[1].0 - w[0].0);
                assert!((pm - e).abs() < 1e-12);
                found = true;
                break;
            }
        }
        assert!(found);
    }

    #[test]
    fn empty_class_rejected() {
        assert!(matches!(
            LabeledScores::new(vec![], vec![0.0]),
            Err(MetricsError::EmptyClass)
        ));
    }
}
