//! Trial scoring backends and score normalization.
//!
//! Cosine and two-covariance PLDA log-likelihood-ratio backends, the
//! embedding-average (EA) and matrix-score-average (MSA) multi-segment
//! strategies, and adaptive symmetric score normalization (AS-norm)
//! against top-K cohort statistics.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::corpus_io::{Embedding, EmbeddingSet, ScoreEntry, ScoreSet, TrialList};

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("embedding has zero norm")]
    ZeroNormEmbedding,
    #[error("dimension mismatch: {a} vs {b}")]
    DimensionMismatch { a: usize, b: usize },
    #[error("empty segment list")]
    EmptySegmentList,
    #[error("utterance {0:?} missing from embedding set")]
    MissingUtterance(String),
    #[error("strategy `single` requires exactly one segment per utterance (id {0:?})")]
    MultiSegmentWithSingleStrategy(String),
    #[error("covariance matrix {0} is not positive definite")]
    NonPositiveDefinite(&'static str),
    #[error("cohort vector missing for utterance {0:?}")]
    MissingCohort(String),
    #[error("cohort for {id:?} is degenerate (std < 1e-12)")]
    DegenerateCohort { id: String },
    #[error("cohort vector for {0:?} has fewer than 2 entries")]
    CohortTooSmall(String),
    #[error("top-K must be >= 2, got {0}")]
    InvalidTopK(usize),
    #[error("empty cohort set")]
    EmptyCohort,
    #[error("malformed plda model file: {0}")]
    MalformedPldaFile(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Cosine similarity, computed in f64.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64, ScoringError> {
    if a.dim() != b.dim() {
        return Err(ScoringError::DimensionMismatch {
            a: a.dim(),
            b: b.dim(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.values().iter().zip(b.values()) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(ScoringError::ZeroNormEmbedding);
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Arithmetic mean over segments; no length normalization.
pub fn embedding_average(segments: &[Embedding]) -> Result<Embedding, ScoringError> {
    let first = segments.first().ok_or(ScoringError::EmptySegmentList)?;
    let d = first.dim();
    let mut acc = vec![0.0f64; d];
    for seg in segments {
        if seg.dim() != d {
            return Err(ScoringError::DimensionMismatch {
                a: d,
                b: seg.dim(),
            });
        }
        for (a, &v) in acc.iter_mut().zip(seg.values()) {
            *a += v as f64;
        }
    }
    let n = segments.len() as f64;
    let values: Vec<f32> = acc.into_iter().map(|v| (v / n) as f32).collect();
    Embedding::new(values).map_err(|_| ScoringError::EmptySegmentList)
}

/// Two-covariance PLDA model with precomputed quadratic forms, so each
/// trial LLR costs O(d^2).
#[derive(Debug, Clone)]
pub struct PldaModel {
    mu: DVector<f64>,
    sigma_b: DMatrix<f64>,
    sigma_w: DMatrix<f64>,
    // llr(a, b) = 1/2 x'Gx + 1/2 y'Gy + x'Qy + k with x = a - mu, y = b - mu
    g: DMatrix<f64>,
    q: DMatrix<f64>,
    k: f64,
}

impl PldaModel {
    pub fn new(
        mu: DVector<f64>,
        sigma_b: DMatrix<f64>,
        sigma_w: DMatrix<f64>,
    ) -> Result<Self, ScoringError> {
        let d = mu.len();
        if sigma_b.nrows() != d || sigma_b.ncols() != d || sigma_w.nrows() != d
            || sigma_w.ncols() != d
        {
            return Err(ScoringError::DimensionMismatch {
                a: d,
                b: sigma_b.nrows(),
            });
        }
        let sigma_t = &sigma_b + &sigma_w;
        let chol_t = Cholesky::new(sigma_t.clone())
            .ok_or(ScoringError::NonPositiveDefinite("sigma_b + sigma_w"))?;
        let t_inv = chol_t.inverse();
        // joint covariance [[St, Sb], [Sb, St]]; Schur complement
        let m = &sigma_t - &sigma_b * &t_inv * &sigma_b;
        let chol_m = Cholesky::new(m)
            .ok_or(ScoringError::NonPositiveDefinite("schur complement"))?;
        let p = chol_m.inverse();
        let q = &t_inv * &sigma_b * &p;
        let g = &t_inv - &p;
        let logdet_t = 2.0 * chol_t.l().diagonal().map(f64::ln).sum();
        let logdet_m = 2.0 * chol_m.l().diagonal().map(f64::ln).sum();
        let k = 0.5 * (logdet_t - logdet_m);
        Ok(Self {
            mu,
            sigma_b,
            sigma_w,
            g,
            q,
            k,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn sigma_b(&self) -> &DMatrix<f64> {
        &self.sigma_b
    }

    pub fn sigma_w(&self) -> &DMatrix<f64> {
        &self.sigma_w
    }
}

/// Same/different-speaker log likelihood ratio under the two-covariance model.
pub fn plda_llr(a: &Embedding, b: &Embedding, model: &PldaModel) -> Result<f64, ScoringError> {
    if a.dim() != model.dim() || b.dim() != model.dim() {
        return Err(ScoringError::DimensionMismatch {
            a: a.dim(),
            b: model.dim(),
        });
    }
    let x = DVector::from_vec(a.to_f64()) - &model.mu;
    let y = DVector::from_vec(b.to_f64()) - &model.mu;
    let llr = 0.5 * (x.dot(&(&model.g * &x)) + y.dot(&(&model.g * &y)))
        + x.dot(&(&model.q * &y))
        + model.k;
    Ok(llr)
}

/// Scoring backend for a single embedding pair.
#[derive(Debug, Clone, Copy)]
pub enum Backend<'a> {
    Cosine,
    Plda(&'a PldaModel),
}

impl Backend<'_> {
    pub fn score(&self, a: &Embedding, b: &Embedding) -> Result<f64, ScoringError> {
        match self {
            Backend::Cosine => cosine(a, b),
            Backend::Plda(model) => plda_llr(a, b, model),
        }
    }
}

/// Mean over all pairwise backend scores of the two segment lists.
pub fn matrix_score_average(
    segs_a: &[Embedding],
    segs_b: &[Embedding],
    backend: Backend,
) -> Result<f64, ScoringError> {
    if segs_a.is_empty() || segs_b.is_empty() {
        return Err(ScoringError::EmptySegmentList);
    }
    let mut sum = 0.0;
    for a in segs_a {
        for b in segs_b {
            sum += backend.score(a, b)?;
        }
    }
    Ok(sum / (segs_a.len() * segs_b.len()) as f64)
}

/// Multi-segment trial scoring strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Exactly one segment per utterance.
    Single,
    /// Embedding average before scoring.
    Ea,
    /// Matrix score average over segment pairs.
    Msa,
    /// Arithmetic mean of the EA and MSA scores.
    EaMsa,
}

fn score_pair(
    segs_a: &[Embedding],
    segs_b: &[Embedding],
    backend: Backend,
    strategy: Strategy,
) -> Result<f64, ScoringError> {
    match strategy {
        Strategy::Single | Strategy::Ea => {
            let a = embedding_average(segs_a)?;
            let b = embedding_average(segs_b)?;
            backend.score(&a, &b)
        }
        Strategy::Msa => matrix_score_average(segs_a, segs_b, backend),
        Strategy::EaMsa => {
            let ea = {
                let a = embedding_average(segs_a)?;
                let b = embedding_average(segs_b)?;
                backend.score(&a, &b)?
            };
            let msa = matrix_score_average(segs_a, segs_b, backend)?;
            Ok(0.5 * (ea + msa))
        }
    }
}

/// Scores every trial, preserving order; trials are scored in parallel.
pub fn score_trials(
    embs: &EmbeddingSet,
    trials: &TrialList,
    backend: Backend,
    strategy: Strategy,
) -> Result<ScoreSet, ScoringError> {
    // validate ids up front so errors carry the first offending trial
    for t in &trials.trials {
        for id in [&t.enroll, &t.test] {
            let segs = embs
                .get(id)
                .ok_or_else(|| ScoringError::MissingUtterance(id.clone()))?;
            if strategy == Strategy::Single && segs.len() != 1 {
                return Err(ScoringError::MultiSegmentWithSingleStrategy(id.clone()));
            }
        }
    }
    let entries: Result<Vec<ScoreEntry>, ScoringError> = trials
        .trials
        .par_iter()
        .map(|t| {
            let a = embs.get(&t.enroll).unwrap();
            let b = embs.get(&t.test).unwrap();
            score_pair(a, b, backend, strategy).map(|score| ScoreEntry {
                enroll: t.enroll.clone(),
                test: t.test.clone(),
                score,
            })
        })
        .collect();
    Ok(ScoreSet { entries: entries? })
}

/// For each utterance, its scores against every cohort utterance in
/// cohort order. No self-exclusion.
pub fn build_cohort_scores(
    embs: &EmbeddingSet,
    cohort: &EmbeddingSet,
    backend: Backend,
    strategy: Strategy,
) -> Result<HashMap<String, Vec<f64>>, ScoringError> {
    if cohort.is_empty() {
        return Err(ScoringError::EmptyCohort);
    }
    let cohort_records: Vec<(&str, &[Embedding])> = cohort.iter().collect();
    let results: Result<Vec<(String, Vec<f64>)>, ScoringError> = embs
        .iter()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|(id, segs)| {
            let mut scores = Vec::with_capacity(cohort_records.len());
            for (_, csegs) in &cohort_records {
                scores.push(score_pair(segs, csegs, backend, strategy)?);
            }
            Ok((id.to_string(), scores))
        })
        .collect();
    Ok(results?.into_iter().collect())
}

fn top_k_stats(scores: &[f64], k: usize) -> (f64, f64) {
    let k = k.min(scores.len());
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let top = &sorted[..k];
    let mean = top.iter().sum::<f64>() / k as f64;
    let var = top.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / k as f64;
    (mean, var.sqrt())
}

/// Adaptive symmetric score normalization against top-K cohort statistics.
///
/// Per trial: `s' = 0.5 * ((s - mu_e) / sigma_e + (s - mu_t) / sigma_t)`
/// with mu/sigma the mean and population std of the K largest cohort
/// scores of each side. K clamps to the cohort vector length.
pub fn asnorm(
    raw: &ScoreSet,
    enroll_cohort: &HashMap<String, Vec<f64>>,
    test_cohort: &HashMap<String, Vec<f64>>,
    k: usize,
) -> Result<ScoreSet, ScoringError> {
    if k < 2 {
        return Err(ScoringError::InvalidTopK(k));
    }
    let mut entries = Vec::with_capacity(raw.len());
    for e in &raw.entries {
        let ce = enroll_cohort
            .get(&e.enroll)
            .ok_or_else(|| ScoringError::MissingCohort(e.enroll.clone()))?;
        let ct = test_cohort
            .get(&e.test)
            .ok_or_else(|| ScoringError::MissingCohort(e.test.clone()))?;
        for (id, c) in [(&e.enroll, ce), (&e.test, ct)] {
            if c.len() < 2 {
                return Err(ScoringError::CohortTooSmall(id.clone()));
            }
        }
        let (mu_e, sig_e) = top_k_stats(ce, k);
        let (mu_t, sig_t) = top_k_stats(ct, k);
        if sig_e < 1e-12 {
            return Err(ScoringError::DegenerateCohort {
                id: e.enroll.clone(),
            });
        }
        if sig_t < 1e-12 {
            return Err(ScoringError::DegenerateCohort { id: e.test.clone() });
        }
        let score = 0.5 * ((e.score - mu_e) / sig_e + (e.score - mu_t) / sig_t);
        entries.push(ScoreEntry {
            enroll: e.enroll.clone(),
            test: e.test.clone(),
            score,
        });
    }
    Ok(ScoreSet { entries })
}

/// Loads a PLDA model from the text format: header `PLDA d`, line
/// `mu` + d values, `sigma_b` + d rows of d values, `sigma_w` likewise.
pub fn load_plda(path: &Path) -> Result<PldaModel, ScoringError> {
    let r = BufReader::new(File::open(path)?);
    let mut tokens: Vec<String> = Vec::new();
    for line in r.lines() {
        tokens.extend(line?.split_whitespace().map(str::to_string));
    }
    let mut it = tokens.into_iter();
    let magic = it
        .next()
        .ok_or_else(|| ScoringError::MalformedPldaFile("empty file".into()))?;
    if magic != "PLDA" {
        return Err(ScoringError::MalformedPldaFile(format!(
            "expected PLDA header, got {magic:?}"
        )));
    }
    let d: usize = it
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| ScoringError::MalformedPldaFile("bad dimension".into()))?;
    let take_section = |name: &str, n: usize, it: &mut dyn Iterator<Item = String>| {
        let tag = it
            .next()
            .ok_or_else(|| ScoringError::MalformedPldaFile(format!("missing {name}")))?;
        if tag != name {
            return Err(ScoringError::MalformedPldaFile(format!(
                "expected {name}, got {tag:?}"
            )));
        }
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            let v: f64 = it
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| ScoringError::MalformedPldaFile(format!("bad value in {name}")))?;
            vals.push(v);
        }
        Ok(vals)
    };
    let mu = DVector::from_vec(take_section("mu", d, &mut it)?);
    let sb = DMatrix::from_row_slice(d, d, &take_section("sigma_b", d * d, &mut it)?);
    let sw = DMatrix::from_row_slice(d, d, &take_section("sigma_w", d * d, &mut it)?);
    PldaModel::new(mu, sb, sw)
}

pub fn write_plda(model: &PldaModel, path: &Path) -> Result<(), ScoringError> {
    let mut w = BufWriter::new(File::create(path)?);
    let d = model.dim();
    writeln!(w, "PLDA {d}")?;
    write!(w, "mu")?;
    for v in model.mu.iter() {
        write!(w, " {:.16e}", v)?;
    }
    writeln!(w)?;
    writeln!(w, "sigma_b")?;
    for r in 0..d {
        let row: Vec<String> = (0..d).map(|c| format!("{:.16e}", model.sigma_b[(r, c)])).collect();
        writeln!(w, "{}", row.join(" "))?;
    }
    writeln!(w, "sigma_w")?;
    for r in 0..d {
        let row: Vec<String> = (0..d).map(|c| format!("{:.16e}", model.sigma_w[(r, c)])).collect();
        writeln!(w, "{}", row.join(" "))?;
    }
    w.flush()?;
    Ok(())
}
