use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fieldpad::dataset::{self, Field, Scenario};
use fieldpad::fusion;
use fieldpad::harness::{self, ExperimentConfig, HarnessError};
use fieldpad::padmetrics::canonical_json;
use fieldpad::synthetic::{self, GaussianSpec};

#[derive(Parser)]
#[command(
    name = "fieldpad",
    version,
    about = "Field-level forgery detection: training and ISO/IEC 30107-3 evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stratified k-fold cross-validation with full PAD reporting.
    Cv(ExperimentArgs),
    /// Train one head on every selected sample and write its checkpoint.
    Train(ExperimentArgs),
    /// Score a manifest with a trained checkpoint.
    Score(ScoreArgs),
    /// Recompute PAD metrics from a score CSV or a tau,apcer,bpcer curve CSV.
    Metrics(MetricsArgs),
    /// Min-rule cascade of face and text score files.
    Cascade(CascadeArgs),
    /// Trainable parameters and compute of a scenario's pipeline.
    Params(ParamsArgs),
    /// ROC, APCER/BPCER and histogram plots for a score CSV.
    Plots(PlotsArgs),
    /// Write a two-Gaussian synthetic manifest.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

impl From<OnOff> for bool {
    fn from(v: OnOff) -> bool {
        matches!(v, OnOff::On)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Face,
    Text,
    Both,
}

impl From<ScenarioArg> for Scenario {
    fn from(v: ScenarioArg) -> Scenario {
        match v {
            ScenarioArg::Face => Scenario::Face,
            ScenarioArg::Text => Scenario::Text,
            ScenarioArg::Both => Scenario::Both,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FieldArg {
    Face,
    Text,
    Whole,
}

impl From<FieldArg> for Field {
    fn from(v: FieldArg) -> Field {
        match v {
            FieldArg::Face => Field::Face,
            FieldArg::Text => Field::Text,
            FieldArg::Whole => Field::Whole,
        }
    }
}

#[derive(Args)]
struct ExperimentArgs {
    /// JSON ExperimentConfig; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum)]
    scenario: Option<ScenarioArg>,
    /// Number of folds (default 5).
    #[arg(long)]
    folds: Option<usize>,
    /// Base seed (default 42).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    group_by_document: Option<OnOff>,
    #[arg(long, value_enum)]
    include_aug: Option<OnOff>,
    /// Use whole-document embeddings instead of field crops.
    #[arg(long, value_enum)]
    whole_image: Option<OnOff>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run folds on a thread pool. Output is identical either way.
    #[arg(long, value_enum, default_value = "on")]
    parallel: OnOff,
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(m) = &self.manifest {
            cfg.manifest = m.clone();
        }
        if let Some(s) = self.scenario {
            cfg.scenario = s.into();
        }
        if let Some(k) = self.folds {
            cfg.k = k;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(v) = self.group_by_document {
            cfg.group_by_document = v.into();
        }
        if let Some(v) = self.include_aug {
            cfg.include_aug = v.into();
        }
        if let Some(v) = self.whole_image {
            cfg.whole_image = v.into();
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum)]
    scenario: ScenarioArg,
    /// Score only this field's records of the scenario.
    #[arg(long, value_enum)]
    field: Option<FieldArg>,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    /// Score CSV (document_id,score,label) or curve CSV (tau,apcer,bpcer).
    #[arg(long)]
    scores: PathBuf,
    /// Extra APCER caps for BPCER reporting, e.g. 0.01,0.2.
    #[arg(long, value_delimiter = ',')]
    apcer: Vec<f64>,
    /// Directory for report.json; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CascadeArgs {
    #[arg(long)]
    face: PathBuf,
    #[arg(long)]
    text: PathBuf,
    /// Directory for the fused scores and report; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(value_enum)]
    scenario: Option<ScenarioArg>,
    #[arg(long = "scenario", value_enum, conflicts_with = "scenario")]
    scenario_flag: Option<ScenarioArg>,
}

#[derive(Args)]
struct PlotsArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "face")]
    scenario: ScenarioArg,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    #[arg(long, default_value_t = fieldpad::EMBEDDING_DIM)]
    dim: usize,
    #[arg(long, default_value_t = 0.5)]
    shift: f64,
    /// Shuffle labels (a no-signal control).
    #[arg(long)]
    random_labels: bool,
    /// Augmented copies per original.
    #[arg(long, default_value_t = 0)]
    augmentations: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn write_out(dir: &Path, name: &str, body: &str) -> Result<(), HarnessError> {
    let io = |source| HarnessError::Io {
        path: dir.display().to_string(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(io)?;
    std::fs::write(dir.join(name), body).map_err(io)
}

macro_rules! say {
    ($out:expr, $($arg:tt)*) => {{
        $out.push_str(&format!($($arg)*));
        $out.push('\n');
    }};
}

macro_rules! put {
    ($out:expr, $($arg:tt)*) => {
        $out.push_str(&format!($($arg)*))
    };
}

fn run(cli: Cli) -> Result<String, HarnessError> {
    let mut out = String::new();
    match cli.command {
        Command::Cv(args) => {
            let cfg = args.resolve()?;
            let artifacts = harness::run_cv(&cfg, args.parallel.into())?;
            put!(
                out,
                "{}",
                harness::summary_table(&cfg, &artifacts.aggregate, &artifacts.leakage)
            );
            say!(out, "artifacts written to {}", cfg.out.display());
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let (head, history) = harness::run_train(&cfg)?;
            say!(
                out,
                "trained {} parameters for {} epochs ({:?}); final loss {:.6}",
                head.count_trainable(),
                history.stop_epoch,
                history.stop_reason,
                history.epochs.last().map_or(f64::NAN, |e| e.loss)
            );
            say!(
                out,
                "checkpoint written to {}",
                cfg.out.join("checkpoint.json").display()
            );
        }
        Command::Score(args) => {
            let records = harness::run_score(
                &args.checkpoint,
                &args.manifest,
                args.scenario.into(),
                args.field.map(Field::from),
            )?;
            match &args.out {
                Some(path) => fusion::write_scores(&records, path)?,
                None => put!(out, "{}", fusion::format_scores(&records)),
            }
        }
        Command::Metrics(args) => {
            let outcome = harness::run_metrics(&args.scores, &args.apcer)?;
            let json = canonical_json(&outcome);
            match &args.out {
                Some(dir) => write_out(dir, "report.json", &json)?,
                None => put!(out, "{json}"),
            }
        }
        Command::Cascade(args) => {
            let (fused, report) = harness::run_cascade(&args.face, &args.text)?;
            let json = canonical_json(&report);
            match &args.out {
                Some(dir) => {
                    write_out(dir, "scores.csv", &fusion::format_scores(&fused))?;
                    write_out(dir, "report.json", &json)?;
                }
                None => put!(out, "{json}"),
            }
        }
        Command::Params(args) => {
            let scenario = args
                .scenario
                .or(args.scenario_flag)
                .ok_or_else(|| HarnessError::Config("params needs a scenario (face, text or both)".into()))?;
            put!(out, "{}", canonical_json(&harness::audit_params(scenario.into())));
        }
        Command::Plots(args) => {
            for path in harness::run_plots(&args.scores, &args.out)? {
                say!(out, "{}", path.display());
            }
        }
        Command::Synth(args) => {
            let spec = GaussianSpec {
                dim: args.dim,
                shift: args.shift,
                random_labels: args.random_labels,
                augmentations: args.augmentations,
                ..GaussianSpec::new(args.scenario.into(), args.per_class, args.seed)
            };
            let manifest = synthetic::gaussian_manifest(&spec);
            dataset::write_manifest(&manifest, &args.out)?;
            say!(
                out,
                "{} records written to {}",
                manifest.records.len(),
                args.out.display()
            );
        }
    }
    Ok(out)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(text) => match std::io::stdout().lock().write_all(text.as_bytes()) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: writing output: {e}");
                ExitCode::from(2)
            }
        },
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
