//! Static SVG and CSV renderings of a score set: ROC curve, APCER/BPCER
//! against the threshold with the EER point marked, and the score histogram
//! per class.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::dataset::Label;
use crate::padmetrics::{roc_curve, ErrorCurve, MetricsError, PadReport, RocPoint, ScoreSet};

pub const HISTOGRAM_BINS: usize = 40;

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `bins + 1` edges spanning `[0, 1]`.
    pub edges: Vec<f64>,
    pub bonafide: Vec<usize>,
    pub attack: Vec<usize>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.bonafide.iter().chain(&self.attack).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,bonafide,attack\n");
        for i in 0..self.bonafide.len() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                self.edges[i],
                self.edges[i + 1],
                self.bonafide[i],
                self.attack[i]
            );
        }
        out
    }
}

/// Uniform bins on `[0, 1]`; a score of exactly 1 lands in the last bin and
/// out-of-range scores are clamped to the end bins.
pub fn score_histogram(s: &ScoreSet, bins: usize) -> Histogram {
    let edges = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    let mut bonafide = vec![0; bins];
    let mut attack = vec![0; bins];
    for e in &s.entries {
        let bin = ((e.score * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        match e.label {
            Label::Bonafide => bonafide[bin] += 1,
            Label::Attack => attack[bin] += 1,
        }
    }
    Histogram {
        edges,
        bonafide,
        attack,
    }
}

const W: f64 = 480.0;
const H: f64 = 360.0;
const MARGIN: f64 = 50.0;
const BONA_COLOR: &str = "#1f77b4";
const ATTACK_COLOR: &str = "#d62728";

struct Frame {
    x_range: (f64, f64),
    y_range: (f64, f64),
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        let (lo, hi) = self.x_range;
        MARGIN + (v - lo) / (hi - lo) * (W - 2.0 * MARGIN)
    }

    fn y(&self, v: f64) -> f64 {
        let (lo, hi) = self.y_range;
        H - MARGIN - (v - lo) / (hi - lo) * (H - 2.0 * MARGIN)
    }

    fn polyline(&self, xs: &[f64], ys: &[f64], color: &str) -> String {
        let pts: Vec<String> = xs
            .iter()
            .zip(ys)
            .map(|(&x, &y)| format!("{:.2},{:.2}", self.x(x), self.y(y)))
            .collect();
        format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        )
    }
}

fn svg_open(title: &str, x_label: &str, y_label: &str, frame: &Frame) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let _ = writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">{}</text>",
        W / 2.0,
        escape(title)
    );
    let (x0, x1) = (frame.x(frame.x_range.0), frame.x(frame.x_range.1));
    let (y0, y1) = (frame.y(frame.y_range.0), frame.y(frame.y_range.1));
    let _ = writeln!(
        s,
        "<rect x=\"{x0:.2}\" y=\"{y1:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\" stroke=\"black\"/>",
        x1 - x0,
        y0 - y1
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = frame.x_range.0 + f * (frame.x_range.1 - frame.x_range.0);
        let yv = frame.y_range.0 + f * (frame.y_range.1 - frame.y_range.0);
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
            frame.x(xv),
            y0 + 14.0,
            tick(xv)
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>",
            x0 - 4.0,
            frame.y(yv) + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        W / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>",
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    s
}

fn tick(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() >= 1.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn legend(s: &mut String, entries: &[(&str, &str)]) {
    for (i, (label, color)) in entries.iter().enumerate() {
        let y = MARGIN + 12.0 + 14.0 * i as f64;
        let x = W - MARGIN - 110.0;
        let _ = writeln!(
            s,
            "<line x1=\"{x}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{color}\" stroke-width=\"2\"/>",
            y - 4.0,
            x + 16.0,
            y - 4.0
        );
        let _ = writeln!(s, "<text x=\"{}\" y=\"{y}\">{}</text>", x + 20.0, escape(label));
    }
}

pub fn roc_svg(points: &[RocPoint], auc: f64, title: &str) -> String {
    let frame = Frame {
        x_range: (0.0, 1.0),
        y_range: (0.0, 1.0),
    };
    let mut s = svg_open(
        title,
        "APCER (false bona fide rate)",
        "1 - BPCER (bona fide acceptance)",
        &frame,
    );
    s.push_str(&frame.polyline(&[0.0, 1.0], &[0.0, 1.0], "#bbbbbb"));
    let xs: Vec<f64> = points.iter().map(|p| p.fpr).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.tpr).collect();
    s.push_str(&frame.polyline(&xs, &ys, BONA_COLOR));
    legend(&mut s, &[(&format!("AUC = {auc:.3}"), BONA_COLOR)]);
    s.push_str("</svg>\n");
    s
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr);
    }
    out
}

/// APCER and BPCER against tau, with the EER crossing circled.
pub fn error_curve_svg(curve: &ErrorCurve, eer: f64, eer_threshold: f64, title: &str) -> String {
    let lo = curve.thresholds.first().copied().unwrap_or(0.0).min(0.0);
    let hi = curve.thresholds.last().copied().unwrap_or(1.0).max(1.0);
    let frame = Frame {
        x_range: (lo, hi),
        y_range: (0.0, 1.0),
    };
    let mut s = svg_open(title, "decision threshold tau", "error rate", &frame);
    // Both rates are step functions of tau: constant on (t[i-1], t[i]].
    let step = |rates: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let mut xs = vec![lo];
        let mut ys = vec![rates[0]];
        for (t, &r) in curve.thresholds.windows(2).zip(&rates[1..]) {
            xs.extend([t[0], t[1]]);
            ys.extend([r, r]);
        }
        xs.push(hi);
        ys.push(*rates.last().expect("non-empty"));
        (xs, ys)
    };
    let (ax, ay) = step(&curve.apcer);
    let (bx, by) = step(&curve.bpcer);
    s.push_str(&frame.polyline(&ax, &ay, ATTACK_COLOR));
    s.push_str(&frame.polyline(&bx, &by, BONA_COLOR));
    let _ = writeln!(
        s,
        "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"none\" stroke=\"black\" stroke-width=\"1.5\"/>",
        frame.x(eer_threshold),
        frame.y(eer)
    );
    legend(
        &mut s,
        &[
            ("APCER", ATTACK_COLOR),
            ("BPCER", BONA_COLOR),
            (&format!("EER {:.2}% @ {:.3}", 100.0 * eer, eer_threshold), "black"),
        ],
    );
    s.push_str("</svg>\n");
    s
}

pub fn histogram_svg(hist: &Histogram, eer_threshold: f64, title: &str) -> String {
    let peak = hist
        .bonafide
        .iter()
        .chain(&hist.attack)
        .copied()
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    let frame = Frame {
        x_range: (0.0, 1.0),
        y_range: (0.0, peak),
    };
    let mut s = svg_open(title, "bona fide score", "count", &frame);
    for (counts, color) in [(&hist.bonafide, BONA_COLOR), (&hist.attack, ATTACK_COLOR)] {
        for (i, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let x0 = frame.x(hist.edges[i]);
            let x1 = frame.x(hist.edges[i + 1]);
            let y = frame.y(c as f64);
            let _ = writeln!(
                s,
                "<rect x=\"{x0:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{color}\" fill-opacity=\"0.5\"/>",
                x1 - x0,
                frame.y(0.0) - y
            );
        }
    }
    let tx = frame.x(eer_threshold.clamp(0.0, 1.0));
    let _ = writeln!(
        s,
        "<line x1=\"{tx:.2}\" y1=\"{:.2}\" x2=\"{tx:.2}\" y2=\"{:.2}\" stroke=\"black\" stroke-dasharray=\"4 3\"/>",
        frame.y(0.0),
        frame.y(peak)
    );
    legend(
        &mut s,
        &[
            ("bona fide", BONA_COLOR),
            ("attack", ATTACK_COLOR),
            ("EER threshold", "black"),
        ],
    );
    s.push_str("</svg>\n");
    s
}

/// Writes the three plots and their CSV data into `dir`.
pub fn emit_plots(scores: &ScoreSet, report: &PadReport, dir: &Path, title: &str) -> Result<Vec<PathBuf>, PlotError> {
    std::fs::create_dir_all(dir).map_err(|e| PlotError::Io(dir.display().to_string(), e))?;
    let roc = roc_curve(scores)?;
    let hist = score_histogram(scores, HISTOGRAM_BINS);
    let files = [
        ("roc.svg", roc_svg(&roc, report.auc, &format!("{title}: ROC"))),
        ("roc.csv", roc_csv(&roc)),
        (
            "error_curve.svg",
            error_curve_svg(
                &report.curve,
                report.eer,
                report.eer_threshold,
                &format!("{title}: APCER / BPCER"),
            ),
        ),
        ("curve.csv", report.curve.to_csv()),
        (
            "histogram.svg",
            histogram_svg(&hist, report.eer_threshold, &format!("{title}: score distribution")),
        ),
        ("histogram.csv", hist.to_csv()),
    ];
    let mut written = Vec::with_capacity(files.len());
    for (name, body) in files {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| PlotError::Io(path.display().to_string(), e))?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Debug, thiserror::Error)]
pub enum PlotError {
    #[error("io error on {0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}
