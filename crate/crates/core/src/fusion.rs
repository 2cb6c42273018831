//! Multi-field fusion: feature concatenation for the both-field head and the
//! min-rule score cascade, plus the score-file contract they share.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Label;
use crate::padmetrics::ScoreSet;
use crate::EMBEDDING_DIM;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("{field} embedding has length {len}, expected {expected}")]
    LengthMismatch {
        field: &'static str,
        len: usize,
        expected: usize,
    },
    #[error("{field} embedding component {index} is not finite")]
    NonFinite { field: &'static str, index: usize },
    #[error("document {0} is missing from the {1} scores")]
    UnmatchedDocument(String, &'static str),
    #[error("document {0} appears more than once in the {1} scores")]
    DuplicateDocument(String, &'static str),
    #[error("document {0}: face and text labels disagree")]
    LabelDisagreement(String),
    #[error("score file {path}: {message}")]
    ScoreFile { path: String, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Concatenates a face and a text embedding into `[face || text]`. No
/// normalization is applied.
pub fn concat_fuse(face: &[f32], text: &[f32]) -> Result<Vec<f64>, FusionError> {
    for (field, v) in [("face", face), ("text", text)] {
        if v.len() != EMBEDDING_DIM {
            return Err(FusionError::LengthMismatch {
                field,
                len: v.len(),
                expected: EMBEDDING_DIM,
            });
        }
        if let Some(index) = v.iter().position(|x| !x.is_finite()) {
            return Err(FusionError::NonFinite { field, index });
        }
    }
    Ok(face.iter().chain(text).map(|&x| f64::from(x)).collect())
}

/// One row of a score file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub document_id: String,
    /// Bona-fide likelihood in `[0, 1]`.
    pub score: f64,
    pub label: Label,
}

pub fn to_score_set(records: &[ScoreRecord]) -> ScoreSet {
    ScoreSet::from_pairs(records.iter().map(|r| (r.score, r.label)))
}

/// Min-rule cascade: a document's bona-fide score is the smaller of its face
/// and text scores, so it is rejected at threshold `tau` whenever either
/// field is. Output follows the face input order.
pub fn cascade_min(face: &[ScoreRecord], text: &[ScoreRecord]) -> Result<Vec<ScoreRecord>, FusionError> {
    let mut by_doc: HashMap<&str, &ScoreRecord> = HashMap::with_capacity(text.len());
    for r in text {
        if by_doc.insert(r.document_id.as_str(), r).is_some() {
            return Err(FusionError::DuplicateDocument(r.document_id.clone(), "text"));
        }
    }
    let mut seen = std::collections::HashSet::with_capacity(face.len());
    let mut fused = Vec::with_capacity(face.len());
    for f in face {
        if !seen.insert(f.document_id.as_str()) {
            return Err(FusionError::DuplicateDocument(f.document_id.clone(), "face"));
        }
        let t = by_doc
            .remove(f.document_id.as_str())
            .ok_or_else(|| FusionError::UnmatchedDocument(f.document_id.clone(), "text"))?;
        if t.label != f.label {
            return Err(FusionError::LabelDisagreement(f.document_id.clone()));
        }
        fused.push(ScoreRecord {
            document_id: f.document_id.clone(),
            score: f.score.min(t.score),
            label: f.label,
        });
    }
    if let Some(t) = text.iter().find(|t| by_doc.contains_key(t.document_id.as_str())) {
        return Err(FusionError::UnmatchedDocument(t.document_id.clone(), "face"));
    }
    Ok(fused)
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreRecord>, FusionError> {
    let path = path.as_ref();
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|source| FusionError::Io {
            path: path.display().to_string(),
            source,
        })?;
    parse_scores(&text, &path.display().to_string())
}

/// Parses `document_id,score,label` CSV text.
pub fn parse_scores(text: &str, origin: &str) -> Result<Vec<ScoreRecord>, FusionError> {
    let bad = |message: String| FusionError::ScoreFile {
        path: origin.to_string(),
        message,
    };
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["document_id", "score", "label"] {
        return Err(bad(format!(
            "expected header document_id,score,label, found {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut records = Vec::new();
    for (i, row) in reader.deserialize::<ScoreRecord>().enumerate() {
        let r = row.map_err(|e| bad(format!("row {}: {e}", i + 2)))?;
        if !(0.0..=1.0).contains(&r.score) {
            return Err(bad(format!("row {}: score {} outside [0, 1]", i + 2, r.score)));
        }
        records.push(r);
    }
    Ok(records)
}

pub fn format_scores(records: &[ScoreRecord]) -> String {
    let mut out = String::from("document_id,score,label\n");
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in records {
        writer
            .write_record([r.document_id.as_str(), &r.score.to_string(), r.label.as_str()])
            .expect("in-memory csv write");
    }
    out.push_str(std::str::from_utf8(&writer.into_inner().expect("flush")).expect("utf8"));
    out
}

pub fn write_scores(records: &[ScoreRecord], path: impl AsRef<Path>) -> Result<(), FusionError> {
    let path = path.as_ref();
    File::create(path)
        .and_then(|mut f| f.write_all(format_scores(records).as_bytes()))
        .map_err(|source| FusionError::Io {
            path: path.display().to_string(),
            source,
        })
}
