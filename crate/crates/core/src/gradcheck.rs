//! Central finite-difference checks for [`MlpHead::backward`].
//!
//! The reference forward pass here is plain nested loops in eval mode, kept
//! separate from the GEMM path it is checked against.

use crate::nn::{Gradients, Matrix, MlpHead};
use crate::optim::bce_with_logits;

pub const STEP: f64 = 1e-5;
/// Components where both gradients are below this are compared absolutely.
/// A step-1e-5 central difference of an O(1) loss only resolves gradients to
/// about 1e-11, so relative error on smaller components measures the oracle.
pub const FLOOR: f64 = 1e-6;

/// Eval-mode logits by direct summation. Also returns every pre-activation
/// so callers can detect ReLU kinks.
pub fn naive_forward(head: &MlpHead, x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let mut logits = Vec::with_capacity(x.rows);
    let mut pre_all = Vec::new();
    for r in 0..x.rows {
        let mut h = x.row(r).to_vec();
        for (l, layer) in head.layers.iter().enumerate() {
            let mut z = layer.bias.clone();
            for (o, zo) in z.iter_mut().enumerate() {
                let w = &layer.weights[o * layer.fan_in..(o + 1) * layer.fan_in];
                *zo += w.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>();
            }
            pre_all.extend_from_slice(&z);
            h = if l + 1 < head.layers.len() {
                z.iter().map(|&v| v.max(0.0)).collect()
            } else {
                z
            };
        }
        logits.push(h[0]);
    }
    (logits, pre_all)
}

fn loss_at(head: &MlpHead, x: &Matrix, y: &[f64], pos_weight: f64) -> (f64, Vec<f64>) {
    let (logits, pre) = naive_forward(head, x);
    let (loss, _) = bce_with_logits(&logits, y, pos_weight).expect("finite logits");
    (loss, pre)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckResult {
    pub max_rel_error: f64,
    pub compared: usize,
    /// Components skipped because a perturbation flipped a ReLU.
    pub skipped: usize,
}

/// Weights of layer `l` first, then its biases.
fn param_mut(head: &mut MlpHead, l: usize, idx: usize) -> &mut f64 {
    let layer = &mut head.layers[l];
    let n_w = layer.weights.len();
    if idx < n_w {
        &mut layer.weights[idx]
    } else {
        &mut layer.bias[idx - n_w]
    }
}

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

/// Compares the analytic BCE gradient of `head` on `(x, y)` with central
/// differences of the naive forward pass, over every weight and bias.
pub fn check(head: &MlpHead, x: &Matrix, y: &[f64], pos_weight: f64) -> CheckResult {
    let mut rng = crate::seed::rng(0);
    let (logits, trace) = head.forward(x, false, &mut rng).expect("shapes agree");
    let (_, dlogits) = bce_with_logits(&logits, y, pos_weight).expect("finite logits");
    let analytic: Gradients = head.backward(&trace, &dlogits).expect("fresh trace");

    let (_, base_pre) = loss_at(head, x, y, pos_weight);
    let same_side = |pre: &[f64]| pre.iter().zip(&base_pre).all(|(a, b)| (*a > 0.0) == (*b > 0.0));

    let mut probe = head.clone();
    let mut result = CheckResult {
        max_rel_error: 0.0,
        compared: 0,
        skipped: 0,
    };
    for l in 0..head.layers.len() {
        let n_w = head.layers[l].weights.len();
        for idx in 0..n_w + head.layers[l].bias.len() {
            let original = *param_mut(&mut probe, l, idx);
            *param_mut(&mut probe, l, idx) = original + STEP;
            let (plus, pre_plus) = loss_at(&probe, x, y, pos_weight);
            *param_mut(&mut probe, l, idx) = original - STEP;
            let (minus, pre_minus) = loss_at(&probe, x, y, pos_weight);
            *param_mut(&mut probe, l, idx) = original;
            if !same_side(&pre_plus) || !same_side(&pre_minus) {
                result.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * STEP);
            let exact = if idx < n_w {
                analytic.weights[l][idx]
            } else {
                analytic.biases[l][idx - n_w]
            };
            result.max_rel_error = result.max_rel_error.max(rel_error(exact, numeric));
            result.compared += 1;
        }
    }
    result
}
