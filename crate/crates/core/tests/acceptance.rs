//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;

use fieldpad::dataset::{self, Grouping, Label, Sample, Scenario};
use fieldpad::fusion::{self, ScoreRecord};
use fieldpad::harness::{self, ExperimentConfig};
use fieldpad::nn::{init_head, Matrix};
use fieldpad::optim::{adam_step, bce_with_logits, pos_weight_for, AdamState, TrainConfig};
use fieldpad::padmetrics::{bpcer_at_apcer, eer, roc_auc, ScoreSet};
use fieldpad::{gradcheck, seed};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s, || {
        format!("took {:.2} s, limit {limit_s} s", elapsed.as_secs_f64())
    })
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fieldpad"))
}

fn parameter_budgets() -> Outcome {
    let start = Instant::now();
    let mut counts = Vec::new();
    for (scenario, expected) in [("face", 190_977u64), ("both", 762_881)] {
        let out = bin().args(["params", scenario]).output().map_err(|e| e.to_string())?;
        ensure(out.status.success(), || {
            format!("params {scenario} exited {}", out.status)
        })?;
        let json: serde_json::Value = serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;
        let got = json["trainable_parameters"].as_u64();
        ensure(got == Some(expected), || {
            format!("params {scenario}: {got:?}, expected {expected}")
        })?;
        counts.push(format!("{scenario}={expected}"));
    }
    within(start.elapsed(), 1.0)?;
    Ok(counts.join(", "))
}

/// Random score set on a 1/1000 lattice in [0, 0.999], so ties are common
/// and every score gap contains sweep points.
fn lattice_scores(rng: &mut impl Rng) -> ScoreSet {
    let n = rng.gen_range(5..=200);
    let levels = if rng.gen_bool(0.5) { 20 } else { 1000 };
    let n_bona = rng.gen_range(1..n);
    ScoreSet::from_pairs((0..n).map(|i| {
        let label = if i < n_bona { Label::Bonafide } else { Label::Attack };
        let step = 1000 / levels;
        let k = rng.gen_range(0..levels) * step;
        (k as f64 / 1000.0, label)
    }))
}

fn pairwise_auc(s: &ScoreSet) -> f64 {
    let bona: Vec<f64> = s.scores_of(Label::Bonafide).collect();
    let attack: Vec<f64> = s.scores_of(Label::Attack).collect();
    let mut wins = 0.0;
    for &b in &bona {
        for &a in &attack {
            wins += if b > a {
                1.0
            } else if b == a {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (bona.len() * attack.len()) as f64
}

const SWEEP_POINTS: usize = 1_000_000;

/// EER from APCER/BPCER evaluated on `SWEEP_POINTS + 1` equally spaced
/// thresholds in [0, 1]: the first point where APCER - BPCER reaches zero,
/// interpolating linearly from the previous point.
fn swept_eer(s: &ScoreSet) -> f64 {
    let mut bona: Vec<f64> = s.scores_of(Label::Bonafide).collect();
    let mut attack: Vec<f64> = s.scores_of(Label::Attack).collect();
    bona.sort_by(f64::total_cmp);
    attack.sort_by(f64::total_cmp);
    let (nb, na) = (bona.len() as f64, attack.len() as f64);
    let (mut ib, mut ia) = (0, 0);
    let mut prev: Option<(f64, f64)> = None;
    for j in 0..=SWEEP_POINTS {
        let tau = j as f64 / SWEEP_POINTS as f64;
        while ib < bona.len() && bona[ib] < tau {
            ib += 1;
        }
        while ia < attack.len() && attack[ia] < tau {
            ia += 1;
        }
        let apcer = (attack.len() - ia) as f64 / na;
        let bpcer = ib as f64 / nb;
        let d = apcer - bpcer;
        if d == 0.0 {
            return apcer;
        }
        if d < 0.0 {
            let (pa, pb) = prev.expect("sweep starts with every attack accepted");
            let pd = pa - pb;
            let frac = pd / (pd - d);
            return pa + frac * (apcer - pa);
        }
        prev = Some((apcer, bpcer));
    }
    unreachable!("the last sweep point rejects everything")
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = seed::rng(2024);
    let (mut worst_auc, mut worst_eer) = (0.0f64, 0.0f64);
    for trial in 0..1000 {
        let s = lattice_scores(&mut rng);
        let auc = roc_auc(&s).map_err(|e| e.to_string())?;
        worst_auc = worst_auc.max((auc - pairwise_auc(&s)).abs());
        let e = eer(&s).map_err(|e| e.to_string())?.eer;
        worst_eer = worst_eer.max((e - swept_eer(&s)).abs());
        let caps = [0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 0.9];
        let bpcers: Vec<f64> = caps
            .iter()
            .map(|&c| bpcer_at_apcer(&s, c).map(|b| b.bpcer))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        ensure(bpcers.windows(2).all(|w| w[1] <= w[0]), || {
            format!("set {trial}: BPCER not monotone in APCER cap: {bpcers:?}")
        })?;
    }
    let granularity = 1.0 / SWEEP_POINTS as f64;
    ensure(worst_auc <= 1e-9, || {
        format!("AUC trapezoid vs pairwise differs by {worst_auc:e}")
    })?;
    ensure(worst_eer <= 1e-6 + granularity, || {
        format!("EER vs sweep differs by {worst_eer:e}")
    })?;
    within(start.elapsed(), 60.0)?;
    Ok(format!(
        "1000 sets; max |dAUC| {worst_auc:.1e}, max |dEER| {worst_eer:.1e}; {:.1} s",
        start.elapsed().as_secs_f64()
    ))
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut rng = seed::rng(77);
    let (mut worst, mut compared, mut skipped) = (0.0f64, 0, 0);
    for draw in 0..100 {
        let input = rng.gen_range(2..=12);
        let hidden: Vec<usize> = (0..4).map(|_| rng.gen_range(2..=10)).collect();
        let mut head = init_head(input, &hidden, &[0.0; 4], draw).map_err(|e| e.to_string())?;
        for b in head.layers.iter_mut().flat_map(|l| &mut l.bias) {
            *b = rng.gen_range(-0.2..0.2);
        }
        let rows = rng.gen_range(1..=4);
        let x: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..input).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let y: Vec<f64> = (0..rows).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let w = rng.gen_range(0.2..5.0);
        let r = gradcheck::check(&head, &Matrix::from_rows(&x).map_err(|e| e.to_string())?, &y, w);
        worst = worst.max(r.max_rel_error);
        compared += r.compared;
        skipped += r.skipped;
    }
    ensure(worst < 1e-4, || format!("max relative error {worst:e}"))?;
    within(start.elapsed(), 60.0)?;
    Ok(format!(
        "100 draws, {compared} components, {skipped} at ReLU kinks skipped; max rel err {worst:.1e}"
    ))
}

fn closed_forms() -> Outcome {
    let (loss, _) = bce_with_logits(&[0.0], &[1.0], 1.0).map_err(|e| e.to_string())?;
    ensure((loss - std::f64::consts::LN_2).abs() <= 1e-12, || {
        format!("bce(0, 1, 1) = {loss}")
    })?;

    let cfg = TrainConfig::default();
    let mut theta = [0.0];
    let mut state = AdamState::new(1);
    adam_step(&mut theta, &[1.0], &mut state, &cfg, 1e-3);
    let expected = -1e-3 / (1.0 + 1e-8);
    ensure((theta[0] - expected).abs() <= 1e-12, || {
        format!("first Adam step {}", theta[0])
    })?;

    let labels: Vec<f64> = std::iter::repeat_n(0.0, 100)
        .chain(std::iter::repeat_n(1.0, 53))
        .collect();
    let w = pos_weight_for(&labels).map_err(|e| e.to_string())?;
    ensure((w - 100.0 / 53.0).abs() <= 1e-12, || format!("pos_weight {w}"))?;
    Ok(format!("ln 2, Adam step {:.12}, w+ {w:.12}", theta[0]))
}

fn cv_config(manifest: &str, scenario: Scenario, out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        manifest: data(manifest),
        scenario,
        out: out.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

fn synthetic_end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let run = harness::run_cv(&cv_config("gaussian_face.jsonl", Scenario::Face, dir.path()), false)
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let auc = run.aggregate.metrics["auc"].mean;
    let eer = run.aggregate.metrics["eer"].mean;
    ensure(auc >= 0.99, || format!("aggregate AUC {auc}"))?;
    ensure(eer <= 0.02, || format!("aggregate EER {eer}"))?;
    within(elapsed, 60.0)?;

    let control = harness::run_cv(
        &cv_config("random_labels_face.jsonl", Scenario::Face, &dir.path().join("control")),
        false,
    )
    .map_err(|e| e.to_string())?;
    let control_auc = control.aggregate.metrics["auc"].mean;
    ensure((0.4..=0.6).contains(&control_auc), || {
        format!("random-label AUC {control_auc}")
    })?;
    Ok(format!(
        "AUC {auc:.4}, EER {:.2}% in {:.1} s; random-label AUC {control_auc:.3}",
        100.0 * eer,
        elapsed.as_secs_f64()
    ))
}

fn cascade_equivalence() -> Outcome {
    // every (face, text) pair on a grid that straddles each threshold, so all
    // four accept/reject quadrants occur at every tau
    let grid: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    let mut face = Vec::new();
    let mut text = Vec::new();
    for (i, &f) in grid.iter().enumerate() {
        for (j, &t) in grid.iter().enumerate() {
            let doc = format!("d{i:02}{j:02}");
            let label = if (i + j) % 2 == 0 {
                Label::Bonafide
            } else {
                Label::Attack
            };
            face.push(ScoreRecord {
                document_id: doc.clone(),
                score: f,
                label,
            });
            text.push(ScoreRecord {
                document_id: doc,
                score: t,
                label,
            });
        }
    }
    let fused = fusion::cascade_min(&face, &text).map_err(|e| e.to_string())?;
    let face_of: HashMap<&str, f64> = face.iter().map(|r| (r.document_id.as_str(), r.score)).collect();
    let text_of: HashMap<&str, f64> = text.iter().map(|r| (r.document_id.as_str(), r.score)).collect();
    let taus: Vec<f64> = grid.iter().flat_map(|&g| [g, g + 0.025]).collect();
    let mut checks = 0;
    for &tau in &taus {
        let mut quadrants = HashSet::new();
        for r in &fused {
            let (f, t) = (face_of[r.document_id.as_str()], text_of[r.document_id.as_str()]);
            let flagged_either = f < tau || t < tau;
            quadrants.insert((f >= tau, t >= tau));
            ensure((r.score < tau) == flagged_either, || {
                format!("tau {tau}: doc {} face {f} text {t} fused {}", r.document_id, r.score)
            })?;
            ensure(r.score <= f && r.score <= t, || {
                format!("fused score exceeds a component for {}", r.document_id)
            })?;
            checks += 1;
        }
        if tau > 0.0 && tau <= 1.0 {
            ensure(quadrants.len() == 4, || {
                format!("tau {tau}: only {} quadrants covered", quadrants.len())
            })?;
        }
    }
    let example = fusion::cascade_min(
        &[ScoreRecord {
            document_id: "x".into(),
            score: 0.9,
            label: Label::Attack,
        }],
        &[ScoreRecord {
            document_id: "x".into(),
            score: 0.2,
            label: Label::Attack,
        }],
    )
    .map_err(|e| e.to_string())?;
    ensure(example[0].score < 0.5, || "(0.9, 0.2) accepted at tau 0.5".into())?;
    Ok(format!(
        "{} documents x {} thresholds, {checks} decisions",
        fused.len(),
        taus.len()
    ))
}

/// Runs `cv` and returns aggregate.json followed by every fold's scores.
fn run_cli_cv(manifest: &Path, out: &Path, parallel: &str, threads: &str) -> Result<Vec<Vec<u8>>, String> {
    let status = bin()
        .args(["cv", "--scenario", "both", "--parallel", parallel, "--manifest"])
        .arg(manifest)
        .arg("--out")
        .arg(out)
        .env("RAYON_NUM_THREADS", threads)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(status.status.success(), || {
        format!("cv failed: {}", String::from_utf8_lossy(&status.stderr))
    })?;
    std::iter::once("aggregate.json".to_string())
        .chain((1..=5).map(|f| format!("fold_{f}/scores.csv")))
        .map(|p| std::fs::read(out.join(p)).map_err(|e| e.to_string()))
        .collect()
}

fn determinism() -> Outcome {
    // identical config, output directory included; only the execution mode varies
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest = data("small_both.jsonl");
    let out = dir.path().join("run");
    let a = run_cli_cv(&manifest, &out, "on", "4")?;
    let b = run_cli_cv(&manifest, &out, "on", "4")?;
    let c = run_cli_cv(&manifest, &out, "off", "1")?;
    ensure(a[0] == b[0], || {
        "aggregate.json differs between two parallel runs".into()
    })?;
    ensure(a[0] == c[0], || {
        "aggregate.json differs between parallel and sequential runs".into()
    })?;
    ensure(a == b && a == c, || "fold score files differ between runs".into())?;
    Ok(format!(
        "aggregate.json byte-identical across 3 runs ({} bytes)",
        a[0].len()
    ))
}

/// `bound_strata` is off for documents that mix classes, where whole-unit
/// dealing cannot always hold the per-class bound.
fn check_plan(samples: &[Sample], k: usize, grouping: Grouping, bound_strata: bool) -> Result<String, String> {
    let plan = dataset::stratified_kfold(samples, k, 42, grouping).map_err(|e| e.to_string())?;
    let originals: Vec<&Sample> = samples.iter().filter(|s| s.is_original()).collect();
    let n = originals.len() as f64;
    let by_id: HashMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut seen = HashSet::new();
    for (f, fold) in plan.folds.iter().enumerate() {
        let test = fold.test_ids.len() as f64;
        ensure(!bound_strata || (test - n / k as f64).abs() <= 1.0, || {
            format!("fold {f}: {test} test of {n}")
        })?;
        let train_originals = fold
            .train_ids
            .iter()
            .filter(|id| by_id[id.as_str()].is_original())
            .count() as f64;
        ensure(train_originals + test == n, || {
            format!("fold {f}: originals not partitioned")
        })?;
        ensure(fold.test_ids.iter().all(|id| by_id[id.as_str()].is_original()), || {
            format!("fold {f}: augmented sample in test")
        })?;
        seen.extend(fold.test_ids.iter().cloned());
    }
    ensure(seen.len() == originals.len(), || {
        "test sets do not cover every original once".into()
    })?;
    let dev = dataset::max_stratification_deviation(&plan, samples);
    ensure(!bound_strata || dev <= 1.0, || {
        format!("stratification deviation {dev}")
    })?;
    let overlap = dataset::leakage_report(&plan, samples).total_overlap();
    if grouping == Grouping::Document {
        ensure(overlap == 0, || format!("document overlap {overlap}"))?;
    }
    Ok(format!("n={n} max class deviation {dev:.2}, overlap {overlap}"))
}

fn protocol_fidelity() -> Outcome {
    let mut notes = Vec::new();
    for (manifest, scenario) in [
        ("gaussian_face.jsonl", Scenario::Face),
        ("small_both.jsonl", Scenario::Both),
    ] {
        let cfg = cv_config(manifest, scenario, Path::new("unused"));
        let samples = harness::load_samples(&cfg).map_err(|e| e.to_string())?;
        notes.push(check_plan(&samples, 5, Grouping::Document, true)?);
    }
    // documents holding both classes must still never straddle train and test
    let mut rng = seed::rng(9);
    let mixed: Vec<Sample> =
        harness::load_samples(&cv_config("gaussian_face.jsonl", Scenario::Face, Path::new("unused")))
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|mut s| {
                s.document_id = format!("shared{:03}", rng.gen_range(0..120));
                s
            })
            .collect();
    notes.push(check_plan(&mixed, 5, Grouping::Document, false)?);
    Ok(notes.join("; "))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("parameter budgets", parameter_budgets),
        ("metric oracle suite", metric_oracles),
        ("gradient check", gradient_check),
        ("loss/optimizer closed forms", closed_forms),
        ("synthetic end-to-end", synthetic_end_to_end),
        ("cascade equivalence", cascade_equivalence),
        ("determinism", determinism),
        ("protocol fidelity", protocol_fidelity),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
