//! Embedding, trial-list and score-set file formats.
//!
//! Binary embedding format `EMB1`: magic bytes `EMB1`, u32-LE dimension,
//! u64-LE record count, then per record a u16-LE id byte length, the UTF-8
//! id bytes, a u32-LE segment count and `n * dim` f32-LE values. Trial and
//! score files are UTF-8 text, single-space separated, `\n` line endings,
//! no header.
//!
//! Values are stored as 32-bit floats and widened to 64-bit for all
//! computation. Text embedding files may repeat an utterance id on several
//! lines to denote successive segments.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use thiserror::Error;

const EMB1_MAGIC: &[u8; 4] = b"EMB1";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("invalid dimension: dim must be >= 1")]
    InvalidDimension,
    #[error("dimension mismatch at record {index}: expected {expected}, got {got}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("duplicate utterance id {id:?} at record {index}")]
    DuplicateId { index: usize, id: String },
    #[error("non-finite value at record {index}")]
    NonFiniteValue { index: usize },
    #[error("invalid utterance id at record {index}: must be non-empty without whitespace")]
    InvalidId { index: usize },
    #[error("wrong field count on line {line}: expected {expected}, got {got}")]
    WrongFieldCount {
        line: usize,
        expected: &'static str,
        got: usize,
    },
    #[error("unknown label token {token:?} on line {line}")]
    UnknownLabel { line: usize, token: String },
    #[error("mixed labeled/unlabeled trials on line {line}")]
    MixedLabeling { line: usize },
    #[error("non-numeric score on line {line}")]
    NonNumericScore { line: usize },
    #[error("non-numeric value on line {line}")]
    NonNumericValue { line: usize },
    #[error("empty embedding set segment list for id {id:?}")]
    EmptySegments { id: String },
}

/// One fixed-dimension segment embedding. Stored as f32, computed on as f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f32>,
}

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self, CorpusError> {
        if values.is_empty() {
            return Err(CorpusError::InvalidDimension);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CorpusError::NonFiniteValue { index: 0 });
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Widened copy for numeric work.
    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

/// Ordered map utterance-id -> segment embeddings, all of one dimension.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    records: IndexMap<String, Vec<Embedding>>,
}

impl EmbeddingSet {
    pub fn new(dim: usize) -> Result<Self, CorpusError> {
        if dim == 0 {
            return Err(CorpusError::InvalidDimension);
        }
        Ok(Self {
            dim,
            records: IndexMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.keys().map(|s| s.as_str())
    }

    pub fn get(&self, id: &str) -> Option<&[Embedding]> {
        self.records.get(id).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[Embedding])> {
        self.records.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Appends a segment to `id`, creating the record if new.
    pub fn push_segment(&mut self, id: &str, emb: Embedding) -> Result<(), CorpusError> {
        validate_id(id, self.records.len())?;
        if emb.dim() != self.dim {
            return Err(CorpusError::DimensionMismatch {
                index: self.records.len(),
                expected: self.dim,
                got: emb.dim(),
            });
        }
        self.records.entry(id.to_string()).or_default().push(emb);
        Ok(())
    }

    /// Inserts a whole record; the id must not already exist.
    pub fn insert_record(&mut self, id: &str, segments: Vec<Embedding>) -> Result<(), CorpusError> {
        let index = self.records.len();
        validate_id(id, index)?;
        if segments.is_empty() {
            return Err(CorpusError::EmptySegments { id: id.to_string() });
        }
        if self.records.contains_key(id) {
            return Err(CorpusError::DuplicateId {
                index,
                id: id.to_string(),
            });
        }
        for seg in &segments {
            if seg.dim() != self.dim {
                return Err(CorpusError::DimensionMismatch {
                    index,
                    expected: self.dim,
                    got: seg.dim(),
                });
            }
        }
        self.records.insert(id.to_string(), segments);
        Ok(())
    }
}

fn validate_id(id: &str, index: usize) -> Result<(), CorpusError> {
    if id.is_empty() || id.chars().any(char::is_whitespace) {
        return Err(CorpusError::InvalidId { index });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingFormat {
    Binary,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialLabel {
    Target,
    Nontarget,
}

impl fmt::Display for TrialLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrialLabel::Target => write!(f, "target"),
            TrialLabel::Nontarget => write!(f, "nontarget"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub label: Option<TrialLabel>,
}

/// Ordered trial records; label presence is uniform across the list.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn is_labeled(&self) -> bool {
        self.trials.first().map_or(false, |t| t.label.is_some())
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEntry {
    pub enroll: String,
    pub test: String,
    pub score: f64,
}

/// Scores aligned one-to-one with the trial list they were produced from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    pub entries: Vec<ScoreEntry>,
}

impl ScoreSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.score).collect()
    }
}

pub fn load_embeddings(path: &Path, format: EmbeddingFormat) -> Result<EmbeddingSet, CorpusError> {
    match format {
        EmbeddingFormat::Binary => load_embeddings_binary(path),
        EmbeddingFormat::Text => load_embeddings_text(path),
    }
}

pub fn write_embeddings(
    set: &EmbeddingSet,
    path: &Path,
    format: EmbeddingFormat,
) -> Result<(), CorpusError> {
    if set.dim == 0 {
        return Err(CorpusError::InvalidDimension);
    }
    match format {
        EmbeddingFormat::Binary => write_embeddings_binary(set, path),
        EmbeddingFormat::Text => write_embeddings_text(set, path),
    }
}

fn load_embeddings_binary(path: &Path) -> Result<EmbeddingSet, CorpusError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| CorpusError::MalformedHeader("file too short for magic".into()))?;
    if &magic != EMB1_MAGIC {
        return Err(CorpusError::MalformedHeader(format!(
            "bad magic {:?}",
            magic
        )));
    }
    let dim = read_u32(&mut r)? as usize;
    if dim == 0 {
        return Err(CorpusError::InvalidDimension);
    }
    let count = read_u64(&mut r)? as usize;
    let mut set = EmbeddingSet::new(dim)?;
    for index in 0..count {
        let id_len = read_u16(&mut r)? as usize;
        let mut id_bytes = vec![0u8; id_len];
        r.read_exact(&mut id_bytes)?;
        let id = String::from_utf8(id_bytes)
            .map_err(|_| CorpusError::InvalidId { index })?;
        let n_segs = read_u32(&mut r)? as usize;
        if n_segs == 0 {
            return Err(CorpusError::EmptySegments { id });
        }
        let mut segments = Vec::with_capacity(n_segs);
        for _ in 0..n_segs {
            let mut buf = vec![0u8; dim * 4];
            r.read_exact(&mut buf)?;
            let values: Vec<f32> = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(CorpusError::NonFiniteValue { index });
            }
            segments.push(Embedding { values });
        }
        set.insert_record(&id, segments)
            .map_err(|e| relocate(e, index))?;
    }
    Ok(set)
}

// insert_record reports its own index of the partially built set; rewrite it
// to the on-disk record index.
fn relocate(e: CorpusError, index: usize) -> CorpusError {
    match e {
        CorpusError::DuplicateId { id, .. } => CorpusError::DuplicateId { index, id },
        CorpusError::DimensionMismatch { expected, got, .. } => {
            CorpusError::DimensionMismatch {
                index,
                expected,
                got,
            }
        }
        CorpusError::InvalidId { .. } => CorpusError::InvalidId { index },
        other => other,
    }
}

fn write_embeddings_binary(set: &EmbeddingSet, path: &Path) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(EMB1_MAGIC)?;
    w.write_all(&(set.dim as u32).to_le_bytes())?;
    w.write_all(&(set.records.len() as u64).to_le_bytes())?;
    for (id, segments) in &set.records {
        w.write_all(&(id.len() as u16).to_le_bytes())?;
        w.write_all(id.as_bytes())?;
        w.write_all(&(segments.len() as u32).to_le_bytes())?;
        for seg in segments {
            for v in &seg.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn load_embeddings_text(path: &Path) -> Result<EmbeddingSet, CorpusError> {
    let r = BufReader::new(File::open(path)?);
    let mut set: Option<EmbeddingSet> = None;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let id = fields.next().unwrap();
        let mut values = Vec::new();
        for tok in fields {
            let v: f32 = tok
                .parse()
                .map_err(|_| CorpusError::NonNumericValue { line: lineno })?;
            if !v.is_finite() {
                return Err(CorpusError::NonFiniteValue { index: lineno });
            }
            values.push(v);
        }
        if values.is_empty() {
            return Err(CorpusError::WrongFieldCount {
                line: lineno,
                expected: "id followed by >=1 values",
                got: 1,
            });
        }
        let set = match &mut set {
            Some(s) => s,
            None => set.insert(EmbeddingSet::new(values.len())?),
        };
        if values.len() != set.dim {
            return Err(CorpusError::DimensionMismatch {
                index: lineno,
                expected: set.dim,
                got: values.len(),
            });
        }
        validate_id(id, lineno)?;
        set.push_segment(id, Embedding { values })?;
    }
    set.ok_or_else(|| CorpusError::MalformedHeader("empty embedding text file".into()))
}

fn write_embeddings_text(set: &EmbeddingSet, path: &Path) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    for (id, segments) in &set.records {
        for seg in segments {
            write!(w, "{}", id)?;
            for v in &seg.values {
                // 17 significant digits round-trips any f32 exactly
                write!(w, " {:.16e}", v)?;
            }
            writeln!(w)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_trials(path: &Path) -> Result<TrialList, CorpusError> {
    let r = BufReader::new(File::open(path)?);
    let mut trials = Vec::new();
    let mut labeled: Option<bool> = None;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let (enroll, test, label) = match fields.len() {
            2 => (fields[0], fields[1], None),
            3 => {
                let label = match fields[2] {
                    "target" | "1" => TrialLabel::Target,
                    "nontarget" | "0" => TrialLabel::Nontarget,
                    other => {
                        return Err(CorpusError::UnknownLabel {
                            line: lineno,
                            token: other.to_string(),
                        })
                    }
                };
                (fields[0], fields[1], Some(label))
            }
            n => {
                return Err(CorpusError::WrongFieldCount {
                    line: lineno,
                    expected: "2 or 3 fields",
                    got: n,
                })
            }
        };
        match labeled {
            None => labeled = Some(label.is_some()),
            Some(l) if l != label.is_some() => {
                return Err(CorpusError::MixedLabeling { line: lineno })
            }
            _ => {}
        }
        trials.push(Trial {
            enroll: enroll.to_string(),
            test: test.to_string(),
            label,
        });
    }
    Ok(TrialList { trials })
}

pub fn write_trials(trials: &TrialList, path: &Path) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in &trials.trials {
        match t.label {
            Some(l) => writeln!(w, "{} {} {}", t.enroll, t.test, l)?,
            None => writeln!(w, "{} {}", t.enroll, t.test)?,
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_scores(path: &Path) -> Result<ScoreSet, CorpusError> {
    let r = BufReader::new(File::open(path)?);
    let mut entries = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(CorpusError::WrongFieldCount {
                line: lineno,
                expected: "3 fields",
                got: fields.len(),
            });
        }
        let score: f64 = fields[2]
            .parse()
            .map_err(|_| CorpusError::NonNumericScore { line: lineno })?;
        if !score.is_finite() {
            return Err(CorpusError::NonNumericScore { line: lineno });
        }
        entries.push(ScoreEntry {
            enroll: fields[0].to_string(),
            test: fields[1].to_string(),
            score,
        });
    }
    Ok(ScoreSet { entries })
}

pub fn write_scores(set: &ScoreSet, path: &Path) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in &set.entries {
        writeln!(w, "{} {} {:.16e}", e.enroll, e.test, e.score)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16, CorpusError> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CorpusError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, CorpusError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
