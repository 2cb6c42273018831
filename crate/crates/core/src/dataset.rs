//! Embedding manifests, scenario selection, stratified folds and the
//! document-level leakage audit.
//!
//! A manifest is a UTF-8 JSON Lines file with one [`EmbeddingRecord`] per
//! line. An optional first line of the form `{"source_meta": {...}}` carries
//! free-form provenance (backbone name, extractor version).

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{self, FusionError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("sample {sample_id}: dim is {dim} but vector has {len} components")]
    DimensionMismatch { sample_id: String, dim: usize, len: usize },
    #[error("sample {sample_id}: dim must be positive")]
    ZeroDim { sample_id: String },
    #[error("sample {sample_id}: component {index} is not finite")]
    NonFinite { sample_id: String, index: usize },
    #[error("duplicate sample_id {0}")]
    DuplicateSample(String),
    #[error("document {document_id} (aug {aug}) has no matching {missing} record")]
    UnpairedDocument {
        document_id: String,
        aug: String,
        missing: Field,
    },
    #[error("document {document_id} (aug {aug}) has more than one {field} record")]
    AmbiguousPair {
        document_id: String,
        aug: String,
        field: Field,
    },
    #[error("document {document_id} (aug {aug}): face and text labels disagree")]
    PairLabelMismatch { document_id: String, aug: String },
    #[error("k must be at least 2, got {0}")]
    InvalidK(usize),
    #[error("class {label} has {count} original samples, fewer than k = {k}")]
    ClassTooSmall { label: Label, count: usize, k: usize },
    #[error("augmented sample {0} has no original sample in its group")]
    OrphanAugmentation(String),
    #[error(transparent)]
    Fusion(#[from] FusionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    Face,
    Text,
    /// Whole-document embedding, used only by the whole-image ablation.
    Whole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Face,
    Text,
    Both,
}

/// Ground truth. The harness treats bona fide as the positive class, so a
/// head's sigmoid output is a bona-fide likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Bonafide,
    Attack,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Bonafide, Label::Attack];

    /// Training target: 1 for bona fide, 0 for attack.
    pub fn target(self) -> f64 {
        match self {
            Label::Bonafide => 1.0,
            Label::Attack => 0.0,
        }
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Bonafide => Label::Attack,
            Label::Attack => Label::Bonafide,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Bonafide => "bonafide",
            Label::Attack => "attack",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Field::Face => "face",
            Field::Text => "text",
            Field::Whole => "whole",
        })
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Face => "face",
            Scenario::Text => "text",
            Scenario::Both => "both",
        })
    }
}

impl std::str::FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "face" => Ok(Scenario::Face),
            "text" => Ok(Scenario::Text),
            "both" => Ok(Scenario::Both),
            other => Err(format!("unknown scenario {other:?}")),
        }
    }
}

/// One field-level embedding as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub sample_id: String,
    pub document_id: String,
    pub field: Field,
    pub scenario: Scenario,
    pub label: Label,
    /// Augmentation tag; `None` marks the original crop.
    pub aug: Option<String>,
    pub dim: usize,
    #[serde(deserialize_with = "f32_components")]
    pub vector: Vec<f32>,
}

/// Reads components at 64-bit and narrows them, so out-of-range values show
/// up as infinities for [`EmbeddingRecord::validate`] instead of parse errors.
fn f32_components<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Vec<f32>, D::Error> {
    let wide = Vec::<f64>::deserialize(d)?;
    Ok(wide.into_iter().map(|x| x as f32).collect())
}

impl EmbeddingRecord {
    pub fn is_original(&self) -> bool {
        self.aug.is_none()
    }

    fn validate(&self) -> Result<(), DatasetError> {
        if self.dim == 0 {
            return Err(DatasetError::ZeroDim {
                sample_id: self.sample_id.clone(),
            });
        }
        if self.dim != self.vector.len() {
            return Err(DatasetError::DimensionMismatch {
                sample_id: self.sample_id.clone(),
                dim: self.dim,
                len: self.vector.len(),
            });
        }
        if let Some(index) = self.vector.iter().position(|v| !v.is_finite()) {
            return Err(DatasetError::NonFinite {
                sample_id: self.sample_id.clone(),
                index,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<EmbeddingRecord>,
    pub source_meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    source_meta: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(records: Vec<EmbeddingRecord>) -> Self {
        Self {
            records,
            source_meta: BTreeMap::new(),
        }
    }

    /// Checks every record invariant plus the face/text pairing of
    /// `scenario = both` records.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut seen = HashSet::with_capacity(self.records.len());
        for record in &self.records {
            record.validate()?;
            if !seen.insert(record.sample_id.as_str()) {
                return Err(DatasetError::DuplicateSample(record.sample_id.clone()));
            }
        }
        pair_both_records(&self.records, true).map(|_| ())
    }

    pub fn class_counts(&self) -> BTreeMap<Label, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.label).or_insert(0) += 1;
        }
        counts
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest, DatasetError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_manifest(BufReader::new(file), &path.display().to_string())
}

/// Parses and validates a manifest from any reader. `origin` only labels
/// I/O errors.
pub fn parse_manifest(reader: impl BufRead, origin: &str) -> Result<Manifest, DatasetError> {
    let mut manifest = Manifest::default();
    for (index, line) in reader.lines().enumerate() {
        let line_no = index + 1;
        let line = line.map_err(|source| DatasetError::Io {
            path: origin.to_string(),
            source,
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if manifest.records.is_empty() && manifest.source_meta.is_empty() && trimmed.contains("\"source_meta\"") {
            if let Ok(meta) = serde_json::from_str::<MetaLine>(trimmed) {
                manifest.source_meta = meta.source_meta;
                continue;
            }
        }
        let record: EmbeddingRecord = serde_json::from_str(trimmed).map_err(|e| DatasetError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        manifest.records.push(record);
    }
    manifest.validate()?;
    Ok(manifest)
}

/// Writes the JSON Lines contract. Vectors are already 32-bit, so each
/// component is emitted as the shortest decimal that round-trips to the same
/// `f32`.
pub fn write_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let io_err = |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    if !manifest.source_meta.is_empty() {
        let meta = MetaLine {
            source_meta: manifest.source_meta.clone(),
        };
        let line = serde_json::to_string(&meta).expect("string map serializes");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    for record in &manifest.records {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Joins `scenario = both` face and text records on `(document_id, aug)`.
/// Returns `(face, text)` pairs in face-record order.
fn pair_both_records(
    records: &[EmbeddingRecord],
    include_aug: bool,
) -> Result<Vec<(&EmbeddingRecord, &EmbeddingRecord)>, DatasetError> {
    type Key<'a> = (&'a str, Option<&'a str>);
    let aug_name = |aug: Option<&str>| aug.unwrap_or("none").to_string();

    let mut text_by_key: HashMap<Key, &EmbeddingRecord> = HashMap::new();
    let mut face_keys: HashSet<Key> = HashSet::new();
    let mut faces = Vec::new();
    for r in records.iter().filter(|r| r.scenario == Scenario::Both) {
        if !include_aug && !r.is_original() {
            continue;
        }
        let key = (r.document_id.as_str(), r.aug.as_deref());
        let (set_ok, field) = match r.field {
            Field::Face => {
                faces.push(r);
                (face_keys.insert(key), Field::Face)
            }
            Field::Text => (text_by_key.insert(key, r).is_none(), Field::Text),
            Field::Whole => continue,
        };
        if !set_ok {
            return Err(DatasetError::AmbiguousPair {
                document_id: key.0.to_string(),
                aug: aug_name(key.1),
                field,
            });
        }
    }

    let mut pairs = Vec::with_capacity(faces.len());
    for face in faces {
        let key = (face.document_id.as_str(), face.aug.as_deref());
        let text = text_by_key.remove(&key).ok_or_else(|| DatasetError::UnpairedDocument {
            document_id: key.0.to_string(),
            aug: aug_name(key.1),
            missing: Field::Text,
        })?;
        if text.label != face.label {
            return Err(DatasetError::PairLabelMismatch {
                document_id: key.0.to_string(),
                aug: aug_name(key.1),
            });
        }
        pairs.push((face, text));
    }
    // Leftover text records have no face partner. Report the first in file order.
    if let Some(text) = records
        .iter()
        .filter(|r| r.scenario == Scenario::Both && r.field == Field::Text)
        .find(|r| text_by_key.contains_key(&(r.document_id.as_str(), r.aug.as_deref())))
    {
        return Err(DatasetError::UnpairedDocument {
            document_id: text.document_id.clone(),
            aug: aug_name(text.aug.as_deref()),
            missing: Field::Face,
        });
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq)]
pub enum SampleEmbedding {
    Single(Vec<f32>),
    Paired { face: Vec<f32>, text: Vec<f32> },
}

/// A classifier input: one field embedding, or a face/text pair of the same
/// document.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub document_id: String,
    pub label: Label,
    pub aug: Option<String>,
    pub embedding: SampleEmbedding,
}

impl Sample {
    pub fn is_original(&self) -> bool {
        self.aug.is_none()
    }

    pub fn input_dim(&self) -> usize {
        match &self.embedding {
            SampleEmbedding::Single(v) => v.len(),
            SampleEmbedding::Paired { face, text } => face.len() + text.len(),
        }
    }

    /// Classifier input in 64-bit precision. Pairs go through
    /// [`fusion::concat_fuse`].
    pub fn features(&self) -> Result<Vec<f64>, FusionError> {
        match &self.embedding {
            SampleEmbedding::Single(v) => Ok(v.iter().map(|&x| f64::from(x)).collect()),
            SampleEmbedding::Paired { face, text } => fusion::concat_fuse(face, text),
        }
    }
}

fn single_sample(r: &EmbeddingRecord) -> Sample {
    Sample {
        id: r.sample_id.clone(),
        document_id: r.document_id.clone(),
        label: r.label,
        aug: r.aug.clone(),
        embedding: SampleEmbedding::Single(r.vector.clone()),
    }
}

/// Picks the classifier inputs for one attack scenario, in manifest order.
///
/// `face` and `text` return that field's records of the scenario; `both`
/// returns face/text pairs joined on `(document_id, aug)`.
pub fn select_scenario(
    manifest: &Manifest,
    scenario: Scenario,
    include_aug: bool,
) -> Result<Vec<Sample>, DatasetError> {
    let keep = |r: &&EmbeddingRecord| include_aug || r.is_original();
    match scenario {
        Scenario::Face | Scenario::Text => {
            let field = if scenario == Scenario::Face {
                Field::Face
            } else {
                Field::Text
            };
            Ok(manifest
                .records
                .iter()
                .filter(|r| r.scenario == scenario && r.field == field)
                .filter(keep)
                .map(single_sample)
                .collect())
        }
        Scenario::Both => Ok(pair_both_records(&manifest.records, include_aug)?
            .into_iter()
            .map(|(face, text)| Sample {
                id: format!("{}+{}", face.sample_id, text.sample_id),
                document_id: face.document_id.clone(),
                label: face.label,
                aug: face.aug.clone(),
                embedding: SampleEmbedding::Paired {
                    face: face.vector.clone(),
                    text: text.vector.clone(),
                },
            })
            .collect()),
    }
}

/// Single-field samples of one field within a scenario, e.g. the face crops
/// of both-field documents or the whole-document embeddings of the
/// whole-image ablation.
pub fn select_field(manifest: &Manifest, scenario: Scenario, field: Field, include_aug: bool) -> Vec<Sample> {
    manifest
        .records
        .iter()
        .filter(|r| r.scenario == scenario && r.field == field)
        .filter(|r| include_aug || r.is_original())
        .map(single_sample)
        .collect()
}

/// Unit of fold assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grouping {
    /// Every sample of a document lands on the same side of every split.
    #[default]
    Document,
    /// Each original sample is its own unit. Its augmented variants still
    /// follow it.
    Sample,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

/// Cross-validation plan. Test sets hold original samples only; augmented
/// variants are added to the training side of their original's fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub grouping: Grouping,
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    /// Test-fold index of every original sample.
    pub fn test_fold_of(&self) -> HashMap<&str, usize> {
        let mut map = HashMap::new();
        for (i, fold) in self.folds.iter().enumerate() {
            for id in &fold.test_ids {
                map.insert(id.as_str(), i);
            }
        }
        map
    }
}

struct Unit {
    members: Vec<usize>,
    originals: [usize; 2],
}

fn class_index(label: Label) -> usize {
    match label {
        Label::Bonafide => 0,
        Label::Attack => 1,
    }
}

fn original_class_counts(samples: &[Sample]) -> [usize; 2] {
    let mut totals = [0usize; 2];
    for s in samples.iter().filter(|s| s.is_original()) {
        totals[class_index(s.label)] += 1;
    }
    totals
}

/// Fails unless every class has at least `k` original samples, the minimum
/// for every test fold to contain both classes.
pub fn require_min_class_size(samples: &[Sample], k: usize) -> Result<(), DatasetError> {
    let totals = original_class_counts(samples);
    for label in Label::ALL {
        let count = totals[class_index(label)];
        if count < k {
            return Err(DatasetError::ClassTooSmall { label, count, k });
        }
    }
    Ok(())
}

/// Builds a stratified k-fold plan.
///
/// Samples are bundled into units (documents, or single originals with
/// their augmentations). Units holding one class are shuffled per class with
/// a seeded generator and dealt one at a time to the fold with the fewest
/// samples of that class, ties going to the smallest fold and then the lowest
/// index. With single-sample units this is round-robin dealing, which keeps
/// every class within one sample of `n_c / k` in every fold. Mixed-class
/// units (a document with both bona fide and attack samples) are placed
/// first, largest first, on the same rule weighted by class share.
///
/// A class smaller than `k` is allowed here (some test folds then lack it);
/// experiments call [`require_min_class_size`] first.
pub fn stratified_kfold(samples: &[Sample], k: usize, seed: u64, grouping: Grouping) -> Result<FoldPlan, DatasetError> {
    if k < 2 {
        return Err(DatasetError::InvalidK(k));
    }
    let totals = original_class_counts(samples);
    for label in Label::ALL {
        let count = totals[class_index(label)];
        if count == 0 {
            return Err(DatasetError::ClassTooSmall { label, count, k });
        }
    }

    let mut unit_of_key: HashMap<(&str, Option<Label>), usize> = HashMap::new();
    let mut units: Vec<Unit> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let key = match grouping {
            Grouping::Document => (s.document_id.as_str(), None),
            Grouping::Sample => (s.document_id.as_str(), Some(s.label)),
        };
        let u = *unit_of_key.entry(key).or_insert_with(|| {
            units.push(Unit {
                members: Vec::new(),
                originals: [0; 2],
            });
            units.len() - 1
        });
        units[u].members.push(i);
        if s.is_original() {
            units[u].originals[class_index(s.label)] += 1;
        }
    }
    if let Some(orphan) = units.iter().find(|u| u.originals == [0, 0]) {
        return Err(DatasetError::OrphanAugmentation(samples[orphan.members[0]].id.clone()));
    }

    let mut rng = crate::seed::rng(seed);
    let mut mixed: Vec<usize> = Vec::new();
    let mut pure: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (u, unit) in units.iter().enumerate() {
        match unit.originals {
            [_, 0] => pure[0].push(u),
            [0, _] => pure[1].push(u),
            _ => mixed.push(u),
        }
    }
    mixed.shuffle(&mut rng);
    mixed.sort_by_key(|&u| std::cmp::Reverse(units[u].originals[0] + units[u].originals[1]));
    for class in &mut pure {
        class.shuffle(&mut rng);
        class.sort_by_key(|&u| std::cmp::Reverse(units[u].originals[0] + units[u].originals[1]));
    }

    let mut counts = vec![[0usize; 2]; k];
    let mut assignment = vec![usize::MAX; units.len()];
    let order = mixed.iter().chain(pure[0].iter()).chain(pure[1].iter());
    for &u in order {
        let share = units[u].originals;
        let fold = (0..k)
            .min_by(|&a, &b| {
                let fill = |f: usize| -> f64 {
                    (0..2)
                        .filter(|&c| share[c] > 0)
                        .map(|c| share[c] as f64 * counts[f][c] as f64 / totals[c] as f64)
                        .sum()
                };
                fill(a)
                    .total_cmp(&fill(b))
                    .then((counts[a][0] + counts[a][1]).cmp(&(counts[b][0] + counts[b][1])))
                    .then(a.cmp(&b))
            })
            .expect("k >= 2");
        counts[fold][0] += share[0];
        counts[fold][1] += share[1];
        assignment[u] = fold;
    }

    let mut folds: Vec<Fold> = (0..k)
        .map(|_| Fold {
            train_ids: Vec::new(),
            test_ids: Vec::new(),
        })
        .collect();
    let mut fold_of_sample = vec![0usize; samples.len()];
    for (u, unit) in units.iter().enumerate() {
        for &i in &unit.members {
            fold_of_sample[i] = assignment[u];
        }
    }
    for (i, s) in samples.iter().enumerate() {
        for (f, fold) in folds.iter_mut().enumerate() {
            if f == fold_of_sample[i] {
                if s.is_original() {
                    fold.test_ids.push(s.id.clone());
                }
            } else {
                fold.train_ids.push(s.id.clone());
            }
        }
    }
    Ok(FoldPlan {
        k,
        seed,
        grouping,
        folds,
    })
}

/// Per-class test counts of each fold, indexed `[fold][bonafide, attack]`.
pub fn test_class_counts(plan: &FoldPlan, samples: &[Sample]) -> Vec<[usize; 2]> {
    let label_of: HashMap<&str, Label> = samples.iter().map(|s| (s.id.as_str(), s.label)).collect();
    plan.folds
        .iter()
        .map(|fold| {
            let mut c = [0usize; 2];
            for id in &fold.test_ids {
                if let Some(&l) = label_of.get(id.as_str()) {
                    c[class_index(l)] += 1;
                }
            }
            c
        })
        .collect()
}

/// Largest `|count_c(fold) - n_c / k|` over classes and folds.
pub fn max_stratification_deviation(plan: &FoldPlan, samples: &[Sample]) -> f64 {
    let counts = test_class_counts(plan, samples);
    let mut totals = [0usize; 2];
    for c in &counts {
        totals[0] += c[0];
        totals[1] += c[1];
    }
    let k = plan.k as f64;
    counts
        .iter()
        .flat_map(|c| (0..2).map(move |j| (c[j] as f64 - totals[j] as f64 / k).abs()))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldLeakage {
    pub fold: usize,
    pub overlap: usize,
    pub documents: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub folds: Vec<FoldLeakage>,
}

impl LeakageReport {
    pub fn total_overlap(&self) -> usize {
        self.folds.iter().map(|f| f.overlap).sum()
    }
}

/// Counts documents with samples on both sides of each split.
pub fn leakage_report(plan: &FoldPlan, samples: &[Sample]) -> LeakageReport {
    let doc_of: HashMap<&str, &str> = samples
        .iter()
        .map(|s| (s.id.as_str(), s.document_id.as_str()))
        .collect();
    let docs = |ids: &[String]| -> BTreeSet<String> {
        ids.iter()
            .filter_map(|id| doc_of.get(id.as_str()))
            .map(|d| d.to_string())
            .collect()
    };
    let folds = plan
        .folds
        .iter()
        .enumerate()
        .map(|(fold, f)| {
            let train = docs(&f.train_ids);
            let test = docs(&f.test_ids);
            let documents: Vec<String> = train.intersection(&test).cloned().collect();
            FoldLeakage {
                fold,
                overlap: documents.len(),
                documents,
            }
        })
        .collect();
    LeakageReport { folds }
}
