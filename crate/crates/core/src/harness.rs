//! Experiment orchestration: cross-validated runs, single training runs,
//! scoring, stored-score re-evaluation, the min-rule cascade and the
//! parameter audit.
//!
//! Every output is a pure function of the [`ExperimentConfig`]; folds can run
//! on a thread pool without changing a single byte of the artifacts.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    self, load_manifest, select_field, select_scenario, DatasetError, Field, FoldPlan, Grouping, Label, LeakageReport,
    Sample, Scenario,
};
use crate::fusion::{self, FusionError, ScoreRecord};
use crate::nn::{self, Matrix, MlpHead, NnError};
use crate::optim::{self, OptimError, TrainConfig, TrainHistory, TrainingSet};
use crate::padmetrics::{
    self, aggregate_folds, canonical_json, AggregateReport, BpcerAtApcer, EerPoint, ErrorCurve, MetricsError, PadReport,
};
use crate::plot::{self, PlotError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Plot(#[from] PlotError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("fold {fold}: {split} split has no {label} samples")]
    ClassStarvation {
        fold: usize,
        split: &'static str,
        label: Label,
    },
}

impl HarnessError {
    /// CLI exit status: 2 for I/O failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Io { .. }
            | HarnessError::Dataset(DatasetError::Io { .. })
            | HarnessError::Fusion(FusionError::Io { .. })
            | HarnessError::Nn(NnError::Io { .. })
            | HarnessError::Plot(PlotError::Io(..)) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_file(path: &Path, body: &str) -> Result<(), HarnessError> {
    std::fs::write(path, body).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

/// One cross-validated experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub manifest: PathBuf,
    pub scenario: Scenario,
    pub train: TrainConfig,
    pub k: usize,
    pub seed: u64,
    pub group_by_document: bool,
    pub include_aug: bool,
    /// Use `field = whole` records instead of field crops.
    pub whole_image: bool,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::new(),
            scenario: Scenario::Face,
            train: TrainConfig::default(),
            k: 5,
            seed: 42,
            group_by_document: true,
            include_aug: true,
            whole_image: false,
            out: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.k < 2 {
            return Err(HarnessError::Config(format!("k must be at least 2, got {}", self.k)));
        }
        if self.manifest.as_os_str().is_empty() {
            return Err(HarnessError::Config("no manifest given".into()));
        }
        if self.whole_image && self.scenario == Scenario::Both {
            return Err(HarnessError::Config(
                "whole-image runs take scenario face or text".into(),
            ));
        }
        self.train.validate()?;
        Ok(())
    }

    pub fn grouping(&self) -> Grouping {
        if self.group_by_document {
            Grouping::Document
        } else {
            Grouping::Sample
        }
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }
}

/// Hidden widths for a scenario's head.
pub fn hidden_dims_for(scenario: Scenario) -> &'static [usize] {
    match scenario {
        Scenario::Both => &nn::BOTH_FIELD_HIDDEN,
        Scenario::Face | Scenario::Text => &nn::SINGLE_FIELD_HIDDEN,
    }
}

fn input_dim_for(scenario: Scenario) -> usize {
    match scenario {
        Scenario::Both => 2 * crate::EMBEDDING_DIM,
        Scenario::Face | Scenario::Text => crate::EMBEDDING_DIM,
    }
}

/// Seed of fold `fold`'s head initialization and training shuffle.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    crate::seed::derive(seed, fold as u64)
}

/// Selects the samples an experiment runs on.
pub fn load_samples(cfg: &ExperimentConfig) -> Result<Vec<Sample>, HarnessError> {
    let manifest = load_manifest(&cfg.manifest)?;
    let samples = if cfg.whole_image {
        select_field(&manifest, cfg.scenario, Field::Whole, cfg.include_aug)
    } else {
        select_scenario(&manifest, cfg.scenario, cfg.include_aug)?
    };
    if samples.is_empty() {
        return Err(HarnessError::Config(format!(
            "manifest {} has no samples for scenario {}",
            cfg.manifest.display(),
            cfg.scenario
        )));
    }
    let dim = samples[0].input_dim();
    if let Some(s) = samples.iter().find(|s| s.input_dim() != dim) {
        return Err(HarnessError::Config(format!(
            "sample {} has input width {}, expected {dim}",
            s.id,
            s.input_dim()
        )));
    }
    Ok(samples)
}

fn feature_matrix(samples: &[&Sample]) -> Result<Matrix, HarnessError> {
    let rows = samples.iter().map(|s| s.features()).collect::<Result<Vec<_>, _>>()?;
    Ok(Matrix::from_rows(&rows)?)
}

fn training_set(samples: &[&Sample]) -> Result<TrainingSet, HarnessError> {
    Ok(TrainingSet {
        features: feature_matrix(samples)?,
        targets: samples.iter().map(|s| s.label.target()).collect(),
    })
}

fn fresh_head(scenario: Scenario, input_dim: usize, seed: u64) -> Result<MlpHead, HarnessError> {
    Ok(nn::init_head(
        input_dim,
        hidden_dims_for(scenario),
        &nn::DEFAULT_DROPOUT,
        seed,
    )?)
}

/// Eval-mode bona-fide scores of `samples`.
pub fn score_samples(head: &MlpHead, samples: &[&Sample]) -> Result<Vec<ScoreRecord>, HarnessError> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let probs = head.predict_proba(&feature_matrix(samples)?)?;
    Ok(samples
        .iter()
        .zip(probs)
        .map(|(s, score)| ScoreRecord {
            document_id: s.document_id.clone(),
            score,
            label: s.label,
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct FoldArtifacts {
    pub fold: usize,
    pub seed: u64,
    pub n_train: usize,
    pub head: MlpHead,
    pub history: TrainHistory,
    pub scores: Vec<ScoreRecord>,
    pub report: PadReport,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub config: ExperimentConfig,
    pub plan: FoldPlan,
    pub leakage: LeakageReport,
    pub folds: Vec<FoldArtifacts>,
    pub aggregate: AggregateReport,
    /// Report over the pooled out-of-fold scores.
    pub pooled: PadReport,
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Serialize)]
struct FoldSummary {
    fold: usize,
    seed: u64,
    n_train: usize,
    n_test_bonafide: usize,
    n_test_attack: usize,
    stop_epoch: usize,
    stop_reason: optim::StopReason,
    final_loss: f64,
    metrics: BTreeMap<&'static str, f64>,
}

#[derive(Debug, Serialize)]
struct AggregateDocument<'a> {
    config: &'a ExperimentConfig,
    input_dim: usize,
    hidden_dims: &'a [usize],
    trainable_parameters: usize,
    n_samples: usize,
    n_test_samples: usize,
    max_stratification_deviation: f64,
    leakage_total: usize,
    aggregate: &'a AggregateReport,
    pooled: BTreeMap<&'static str, f64>,
    folds: Vec<FoldSummary>,
}

fn run_fold(
    cfg: &ExperimentConfig,
    fold: usize,
    plan: &FoldPlan,
    by_id: &HashMap<&str, &Sample>,
) -> Result<FoldArtifacts, HarnessError> {
    let pick = |ids: &[String]| -> Vec<&Sample> { ids.iter().map(|id| by_id[id.as_str()]).collect() };
    let train = pick(&plan.folds[fold].train_ids);
    let test = pick(&plan.folds[fold].test_ids);
    for (split, set) in [("train", &train), ("test", &test)] {
        for label in Label::ALL {
            if !set.iter().any(|s| s.label == label) {
                return Err(HarnessError::ClassStarvation { fold, split, label });
            }
        }
    }
    let seed = fold_seed(cfg.seed, fold);
    let data = training_set(&train)?;
    let mut head = fresh_head(cfg.scenario, data.features.cols, seed)?;
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let history = optim::train(&mut head, &data, &train_cfg)?;
    let scores = score_samples(&head, &test)?;
    let report = PadReport::compute(&fusion::to_score_set(&scores))?;
    Ok(FoldArtifacts {
        fold,
        seed,
        n_train: train.len(),
        head,
        history,
        scores,
        report,
    })
}

/// Runs k-fold cross-validation and writes every artifact under `cfg.out`.
pub fn run_cv(cfg: &ExperimentConfig, parallel: bool) -> Result<RunArtifacts, HarnessError> {
    cfg.validate()?;
    let samples = load_samples(cfg)?;
    dataset::require_min_class_size(&samples, cfg.k)?;
    let plan = dataset::stratified_kfold(&samples, cfg.k, cfg.seed, cfg.grouping())?;
    let leakage = dataset::leakage_report(&plan, &samples);
    let by_id: HashMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();

    let folds: Vec<FoldArtifacts> = if parallel {
        (0..cfg.k)
            .into_par_iter()
            .map(|f| run_fold(cfg, f, &plan, &by_id))
            .collect::<Result<_, _>>()?
    } else {
        (0..cfg.k)
            .map(|f| run_fold(cfg, f, &plan, &by_id))
            .collect::<Result<_, _>>()?
    };

    let reports: Vec<PadReport> = folds.iter().map(|f| f.report.clone()).collect();
    let aggregate = aggregate_folds(&reports)?;
    let pooled_scores: Vec<ScoreRecord> = folds.iter().flat_map(|f| f.scores.iter().cloned()).collect();
    let pooled_set = fusion::to_score_set(&pooled_scores);
    let pooled = PadReport::compute(&pooled_set)?;

    let out = &cfg.out;
    create_dir(out)?;
    let mut files = Vec::new();
    let mut emit = |path: PathBuf, body: String| -> Result<(), HarnessError> {
        write_file(&path, &body)?;
        files.push(path);
        Ok(())
    };
    emit(out.join("config.json"), canonical_json(cfg))?;
    emit(out.join("folds.json"), canonical_json(&plan))?;
    emit(out.join("leakage.json"), canonical_json(&leakage))?;
    for f in &folds {
        let dir = out.join(format!("fold_{}", f.fold + 1));
        create_dir(&dir)?;
        emit(dir.join("scores.csv"), fusion::format_scores(&f.scores))?;
        emit(dir.join("report.json"), canonical_json(&f.report))?;
        emit(dir.join("curve.csv"), f.report.curve.to_csv())?;
        emit(dir.join("history.json"), canonical_json(&f.history))?;
        let ckpt = dir.join("checkpoint.json");
        emit(ckpt, serde_json::to_string(&f.head).expect("head serializes"))?;
    }
    emit(out.join("pooled_scores.csv"), fusion::format_scores(&pooled_scores))?;
    emit(out.join("pooled_report.json"), canonical_json(&pooled))?;

    let input_dim = samples[0].input_dim();
    let hidden = hidden_dims_for(cfg.scenario);
    let label_of = |f: &FoldArtifacts, l: Label| f.scores.iter().filter(|s| s.label == l).count();
    let doc = AggregateDocument {
        config: cfg,
        input_dim,
        hidden_dims: hidden,
        trainable_parameters: nn::count_trainable_for(input_dim, hidden),
        n_samples: samples.len(),
        n_test_samples: pooled_scores.len(),
        max_stratification_deviation: dataset::max_stratification_deviation(&plan, &samples),
        leakage_total: leakage.total_overlap(),
        aggregate: &aggregate,
        pooled: pooled.scalars(),
        folds: folds
            .iter()
            .map(|f| FoldSummary {
                fold: f.fold + 1,
                seed: f.seed,
                n_train: f.n_train,
                n_test_bonafide: label_of(f, Label::Bonafide),
                n_test_attack: label_of(f, Label::Attack),
                stop_epoch: f.history.stop_epoch,
                stop_reason: f.history.stop_reason,
                final_loss: f.history.epochs.last().map_or(f64::NAN, |e| e.loss),
                metrics: f.report.scalars(),
            })
            .collect(),
    };
    emit(out.join("aggregate.json"), canonical_json(&doc))?;
    emit(out.join("summary.txt"), summary_table(cfg, &aggregate, &leakage))?;

    let title = format!("{} scenario", cfg.scenario);
    files.extend(plot::emit_plots(&pooled_set, &pooled, &out.join("plots"), &title)?);

    Ok(RunArtifacts {
        config: cfg.clone(),
        plan,
        leakage,
        folds,
        aggregate,
        pooled,
        files,
    })
}

/// Plain-text "mean ± std" table of an aggregate report.
pub fn summary_table(cfg: &ExperimentConfig, agg: &AggregateReport, leakage: &LeakageReport) -> String {
    let mut out = format!(
        "scenario {}  folds {}  seed {}  grouping {:?}  leakage {}\n",
        cfg.scenario,
        agg.n_folds,
        cfg.seed,
        cfg.grouping(),
        leakage.total_overlap()
    );
    for (name, percent) in [
        ("EER (%)", "eer"),
        ("BPCER10 (%)", "bpcer10"),
        ("BPCER20 (%)", "bpcer20"),
        ("BPCER50 (%)", "bpcer50"),
        ("Accuracy (%)", "accuracy"),
        ("F1 (%)", "f1"),
    ] {
        out.push_str(&format!("{name:<14}{}\n", agg.metrics[percent].percent()));
    }
    out.push_str(&format!("{:<14}{}\n", "AUC", agg.metrics["auc"].plain()));
    for (level, n) in &agg.saturated_folds {
        if *n > 0 {
            out.push_str(&format!("note: {level} saturated (BPCER = 100%) in {n} fold(s)\n"));
        }
    }
    out
}

/// Trains one head on every selected sample (no held-out split) and writes
/// `checkpoint.json` and `history.json` to `cfg.out`.
pub fn run_train(cfg: &ExperimentConfig) -> Result<(MlpHead, TrainHistory), HarnessError> {
    cfg.validate()?;
    let samples = load_samples(cfg)?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let data = training_set(&refs)?;
    let mut head = fresh_head(cfg.scenario, data.features.cols, cfg.seed)?;
    let train_cfg = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let history = optim::train(&mut head, &data, &train_cfg)?;
    create_dir(&cfg.out)?;
    head.save(cfg.out.join("checkpoint.json"))?;
    write_file(&cfg.out.join("history.json"), &canonical_json(&history))?;
    Ok((head, history))
}

/// Scores the original samples of a manifest with a trained head. With
/// `field`, scores only that field's records of the scenario (for example the
/// face crops of both-field documents, as the cascade baseline needs).
pub fn run_score(
    checkpoint: &Path,
    manifest: &Path,
    scenario: Scenario,
    field: Option<Field>,
) -> Result<Vec<ScoreRecord>, HarnessError> {
    let head = MlpHead::load(checkpoint)?;
    let manifest = load_manifest(manifest)?;
    let samples = match field {
        None => select_scenario(&manifest, scenario, false)?,
        Some(field) => select_field(&manifest, scenario, field, false),
    };
    let refs: Vec<&Sample> = samples.iter().collect();
    score_samples(&head, &refs)
}

/// Result of re-evaluating a stored file.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum MetricsOutcome {
    /// Full suite from a `document_id,score,label` file.
    Scores {
        report: Box<PadReport>,
        extra_bpcer: Vec<BpcerAtApcer>,
    },
    /// EER and BPCER_AP from a `tau,apcer,bpcer` curve file.
    Curve { eer: EerPoint, bpcer: Vec<BpcerAtApcer> },
}

/// Re-evaluates a score CSV, or an error-curve CSV, from disk.
/// `apcer_targets` adds BPCER values at extra APCER caps.
pub fn run_metrics(path: &Path, apcer_targets: &[f64]) -> Result<MetricsOutcome, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let header = text.lines().next().unwrap_or_default().trim();
    if header == "tau,apcer,bpcer" {
        let curve = ErrorCurve::from_csv(&text).map_err(|m| FusionError::ScoreFile {
            path: path.display().to_string(),
            message: m,
        })?;
        let eer = padmetrics::eer_from_curve(&curve)?;
        let caps: Vec<f64> = padmetrics::AP_LEVELS
            .iter()
            .map(|&(_, c)| c)
            .chain(apcer_targets.iter().copied())
            .collect();
        let bpcer = caps
            .iter()
            .map(|&c| padmetrics::bpcer_at_apcer_on_curve(&curve, c))
            .collect::<Result<_, _>>()?;
        return Ok(MetricsOutcome::Curve { eer, bpcer });
    }
    let records = fusion::parse_scores(&text, &path.display().to_string())?;
    let set = fusion::to_score_set(&records);
    let report = PadReport::compute(&set)?;
    let extra_bpcer = apcer_targets
        .iter()
        .map(|&c| padmetrics::bpcer_at_apcer_on_curve(&report.curve, c))
        .collect::<Result<_, _>>()?;
    Ok(MetricsOutcome::Scores {
        report: Box::new(report),
        extra_bpcer,
    })
}

/// Min-rule cascade of a face and a text score file, then the full suite.
pub fn run_cascade(face_csv: &Path, text_csv: &Path) -> Result<(Vec<ScoreRecord>, PadReport), HarnessError> {
    let face = fusion::read_scores(face_csv)?;
    let text = fusion::read_scores(text_csv)?;
    let fused = fusion::cascade_min(&face, &text)?;
    let report = PadReport::compute(&fusion::to_score_set(&fused))?;
    Ok((fused, report))
}

/// Trainable parameters and compute of one pipeline. Head figures are exact;
/// backbone figures are the published values for the frozen MobileNetV3-Small
/// encoder and are labelled as such.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamAudit {
    pub scenario: Scenario,
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub trainable_parameters: usize,
    pub head_macs: usize,
    pub backbone_passes: usize,
    pub backbone_flops_per_pass: u64,
    pub pipeline_flops_reported: u64,
    pub backbone_provenance: &'static str,
}

/// Reported cost of one frozen-backbone pass, head included.
pub const BACKBONE_FLOPS_PER_PASS: u64 = 119_000_000;

pub fn audit_params(scenario: Scenario) -> ParamAudit {
    let input_dim = input_dim_for(scenario);
    let hidden = hidden_dims_for(scenario);
    let passes = if scenario == Scenario::Both { 2 } else { 1 };
    ParamAudit {
        scenario,
        input_dim,
        hidden_dims: hidden.to_vec(),
        trainable_parameters: nn::count_trainable_for(input_dim, hidden),
        head_macs: nn::macs_for(input_dim, hidden),
        backbone_passes: passes,
        backbone_flops_per_pass: BACKBONE_FLOPS_PER_PASS,
        pipeline_flops_reported: BACKBONE_FLOPS_PER_PASS * passes as u64,
        backbone_provenance: "reported constant (MobileNetV3-Small, 224x224), not measured",
    }
}

/// Writes the plot set for a stored score file.
pub fn run_plots(scores_csv: &Path, out: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let records = fusion::read_scores(scores_csv)?;
    let set = fusion::to_score_set(&records);
    let report = PadReport::compute(&set)?;
    let title = scores_csv
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scores".into());
    Ok(plot::emit_plots(&set, &report, out, &title)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn audit_matches_closed_form() {
        let face = audit_params(Scenario::Face);
        assert_eq!(face.trainable_parameters, 190_977);
        assert_eq!(face.backbone_passes, 1);
        assert_eq!(face.head_macs, 190_496);
        let both = audit_params(Scenario::Both);
        assert_eq!(both.trainable_parameters, 762_881);
        assert_eq!(both.backbone_passes, 2);
        assert_eq!(both.pipeline_flops_reported, 238_000_000);
        assert_eq!(audit_params(Scenario::Text).trainable_parameters, 190_977);
    }

    #[test]
    fn fold_seeds_are_prefix_stable() {
        let five: Vec<u64> = (0..5).map(|f| fold_seed(42, f)).collect();
        let ten: Vec<u64> = (0..10).map(|f| fold_seed(42, f)).collect();
        assert_eq!(&ten[..5], &five[..]);
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"manifest": "m.jsonl", "scenario": "both"}"#).unwrap();
        assert_eq!(cfg.k, 5);
        assert_eq!(cfg.seed, 42);
        assert!(cfg.group_by_document);
        cfg.validate().unwrap();
        assert!(ExperimentConfig { k: 1, ..cfg.clone() }.validate().is_err());
        assert!(ExperimentConfig::default().validate().is_err());
    }

    #[test]
    fn io_errors_map_to_exit_code_two() {
        let missing = ExperimentConfig {
            manifest: "/nonexistent/manifest.jsonl".into(),
            ..ExperimentConfig::default()
        };
        let err = load_samples(&missing).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert_eq!(HarnessError::Config("x".into()).exit_code(), 1);
    }
}
