//! Fully connected classification head with hand-written backpropagation.
//!
//! Each hidden layer computes `h = Dropout(ReLU(W h_prev + b))`; the output
//! layer is affine and yields one raw logit per row. Dropout is inverted:
//! kept units are scaled by `1 / (1 - p)` at train time so evaluation needs
//! no rescaling.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("layer dimensions must be positive, got {0:?}")]
    NonPositiveDim(Vec<usize>),
    #[error("expected {expected} dropout rates, got {got}")]
    DropoutCount { expected: usize, got: usize },
    #[error("dropout rate {0} outside [0, 1)")]
    DropoutRange(f64),
    #[error("batch has width {got}, head expects {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("trace does not match this head or gradient: {0}")]
    StaleTrace(String),
    #[error("checkpoint is inconsistent: {0}")]
    BadCheckpoint(String),
    #[error("checkpoint io error on {path}: {message}")]
    Io { path: String, message: String },
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NnError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(NnError::ShapeMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Copies the given rows, in order, into a new matrix.
    pub fn gather(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }
}

/// `c = a * b^T` for row-major `a: m x k`, `b: n x k`, `c: m x n`.
fn matmul_bt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: the slices cover the stated extents and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = a^T * b` for row-major `a: k x m`, `b: k x n`, `c: m x n`.
fn matmul_at(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: the slices cover the stated extents and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = a * b` for row-major `a: m x k`, `b: k x n`, `c: m x n`.
fn matmul(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: the slices cover the stated extents and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// One affine layer. `weights` is `fan_out x fan_in`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn param_count(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}

/// Classification head. Also the checkpoint format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpHead {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    /// One rate per hidden layer, applied after its ReLU.
    pub dropout_rates: Vec<f64>,
    pub seed: u64,
    pub layers: Vec<Layer>,
}

/// Hidden widths and dropout rates of the single-field head (576 inputs).
pub const SINGLE_FIELD_HIDDEN: [usize; 4] = [256, 128, 64, 32];
/// Hidden widths of the both-field head (1152 inputs).
pub const BOTH_FIELD_HIDDEN: [usize; 4] = [512, 256, 128, 64];
pub const DEFAULT_DROPOUT: [f64; 4] = [0.3, 0.3, 0.2, 0.2];

/// Builds a head with He-normal weights (`std = sqrt(2 / fan_in)`) and zero
/// biases, drawn in layer order from a generator seeded with `seed`.
pub fn init_head(
    input_dim: usize,
    hidden_dims: &[usize],
    dropout_rates: &[f64],
    seed: u64,
) -> Result<MlpHead, NnError> {
    let dims: Vec<usize> = std::iter::once(input_dim)
        .chain(hidden_dims.iter().copied())
        .chain(std::iter::once(1))
        .collect();
    if dims.contains(&0) {
        return Err(NnError::NonPositiveDim(dims));
    }
    if dropout_rates.len() != hidden_dims.len() {
        return Err(NnError::DropoutCount {
            expected: hidden_dims.len(),
            got: dropout_rates.len(),
        });
    }
    if let Some(&p) = dropout_rates.iter().find(|p| !(0.0..1.0).contains(*p)) {
        return Err(NnError::DropoutRange(p));
    }
    let mut rng = crate::seed::rng(seed);
    let layers = dims
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            Layer {
                fan_in,
                fan_out,
                weights: (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect(),
                bias: vec![0.0; fan_out],
            }
        })
        .collect();
    Ok(MlpHead {
        input_dim,
        hidden_dims: hidden_dims.to_vec(),
        dropout_rates: dropout_rates.to_vec(),
        seed,
        layers,
    })
}

/// Activations recorded by [`MlpHead::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Matrix,
    /// Pre-activation `W h + b` of every layer, output layer included.
    pub pre: Vec<Matrix>,
    /// Post-dropout output of every hidden layer.
    pub post: Vec<Matrix>,
    /// Dropout multipliers per hidden layer: 0 or `1 / (1 - p)`; all ones in
    /// eval mode.
    pub masks: Vec<Vec<f64>>,
}

/// Gradients with the same layout as [`MlpHead::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn max_abs(&self) -> f64 {
        self.weights
            .iter()
            .chain(&self.biases)
            .flatten()
            .fold(0.0f64, |m, g| m.max(g.abs()))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl MlpHead {
    /// Layer widths from input to the single output.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim)
            .chain(self.layers.iter().map(|l| l.fan_out))
            .collect()
    }

    /// Runs a batch through the head. In train mode each hidden unit is
    /// dropped with its layer's rate using `rng`; in eval mode `rng` is not
    /// touched and the result is a pure function of weights and input.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        batch: &Matrix,
        train_mode: bool,
        rng: &mut R,
    ) -> Result<(Vec<f64>, ForwardTrace), NnError> {
        if batch.cols != self.input_dim {
            return Err(NnError::ShapeMismatch {
                expected: self.input_dim,
                got: batch.cols,
            });
        }
        let n = batch.rows;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Matrix> = Vec::with_capacity(self.layers.len() - 1);
        let mut masks = Vec::with_capacity(self.layers.len() - 1);
        for (l, layer) in self.layers.iter().enumerate() {
            let input = if l == 0 { batch } else { &post[l - 1] };
            let mut z = Matrix::zeros(n, layer.fan_out);
            matmul_bt(&input.data, &layer.weights, &mut z.data, n, layer.fan_in, layer.fan_out);
            for row in z.data.chunks_exact_mut(layer.fan_out) {
                for (v, b) in row.iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            if l + 1 < self.layers.len() {
                let p = self.dropout_rates[l];
                let mask: Vec<f64> = if train_mode && p > 0.0 {
                    let keep = 1.0 / (1.0 - p);
                    (0..z.data.len())
                        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                        .collect()
                } else {
                    vec![1.0; z.data.len()]
                };
                let h = Matrix {
                    rows: n,
                    cols: layer.fan_out,
                    data: z
                        .data
                        .iter()
                        .zip(&mask)
                        .map(|(&v, &m)| if v > 0.0 { v * m } else { 0.0 })
                        .collect(),
                };
                post.push(h);
                masks.push(mask);
            }
            pre.push(z);
        }
        let logits = pre.last().expect("at least one layer").data.clone();
        Ok((
            logits,
            ForwardTrace {
                input: batch.clone(),
                pre,
                post,
                masks,
            },
        ))
    }

    /// Eval-mode logits.
    pub fn logits(&self, batch: &Matrix) -> Result<Vec<f64>, NnError> {
        let mut unused = crate::seed::rng(0);
        self.forward(batch, false, &mut unused).map(|(l, _)| l)
    }

    /// Eval-mode bona-fide likelihoods.
    pub fn predict_proba(&self, batch: &Matrix) -> Result<Vec<f64>, NnError> {
        Ok(self.logits(batch)?.into_iter().map(sigmoid).collect())
    }

    /// Backpropagates `dloss_dlogits` through the activations in `trace`,
    /// reusing its dropout masks.
    pub fn backward(&self, trace: &ForwardTrace, dloss_dlogits: &[f64]) -> Result<Gradients, NnError> {
        let n = trace.input.rows;
        let dims = self.dims();
        let trace_dims: Vec<usize> = std::iter::once(trace.input.cols)
            .chain(trace.pre.iter().map(|m| m.cols))
            .collect();
        if trace_dims != dims || trace.post.len() + 1 != self.layers.len() {
            return Err(NnError::StaleTrace(format!(
                "trace widths {trace_dims:?}, head widths {dims:?}"
            )));
        }
        if dloss_dlogits.len() != n || trace.pre.iter().any(|m| m.rows != n) {
            return Err(NnError::StaleTrace(format!(
                "trace batch {n}, upstream gradient {}",
                dloss_dlogits.len()
            )));
        }

        let mut weights = vec![Vec::new(); self.layers.len()];
        let mut biases = vec![Vec::new(); self.layers.len()];
        let mut delta = dloss_dlogits.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = if l == 0 { &trace.input } else { &trace.post[l - 1] };

            let mut dw = vec![0.0; layer.fan_out * layer.fan_in];
            matmul_at(&delta, &input.data, &mut dw, layer.fan_out, n, layer.fan_in);
            let mut db = vec![0.0; layer.fan_out];
            for row in delta.chunks_exact(layer.fan_out) {
                for (g, d) in db.iter_mut().zip(row) {
                    *g += d;
                }
            }
            weights[l] = dw;
            biases[l] = db;

            if l > 0 {
                let mut dh = vec![0.0; n * layer.fan_in];
                matmul(&delta, &layer.weights, &mut dh, n, layer.fan_out, layer.fan_in);
                let z = &trace.pre[l - 1].data;
                let mask = &trace.masks[l - 1];
                for ((d, &zv), &m) in dh.iter_mut().zip(z).zip(mask) {
                    *d = if zv > 0.0 { *d * m } else { 0.0 };
                }
                delta = dh;
            }
        }
        Ok(Gradients { weights, biases })
    }

    pub fn count_trainable(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Multiply-accumulates of one eval forward pass, weights only.
    pub fn macs(&self) -> usize {
        self.layers.iter().map(|l| l.fan_in * l.fan_out).sum()
    }

    fn check_consistency(&self) -> Result<(), NnError> {
        let bad = |m: String| Err(NnError::BadCheckpoint(m));
        if self.layers.len() != self.hidden_dims.len() + 1 {
            return bad(format!(
                "{} layers for {} hidden widths",
                self.layers.len(),
                self.hidden_dims.len()
            ));
        }
        if self.dropout_rates.len() != self.hidden_dims.len() {
            return bad("dropout rate count differs from hidden layer count".into());
        }
        let expected = count_trainable_for(self.input_dim, &self.hidden_dims);
        let mut fan_in = self.input_dim;
        for (l, layer) in self.layers.iter().enumerate() {
            let fan_out = self.hidden_dims.get(l).copied().unwrap_or(1);
            if layer.fan_in != fan_in
                || layer.fan_out != fan_out
                || layer.weights.len() != fan_in * fan_out
                || layer.bias.len() != fan_out
            {
                return bad(format!("layer {l} has inconsistent shape"));
            }
            if layer.weights.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
                return bad(format!("layer {l} has non-finite parameters"));
            }
            fan_in = fan_out;
        }
        debug_assert_eq!(expected, self.count_trainable());
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NnError> {
        let path = path.as_ref();
        let io = |e: std::io::Error| NnError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let mut out = BufWriter::new(File::create(path).map_err(io)?);
        serde_json::to_writer(&mut out, self).map_err(|e| NnError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        out.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NnError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| NnError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let head: MlpHead =
            serde_json::from_reader(BufReader::new(file)).map_err(|e| NnError::BadCheckpoint(e.to_string()))?;
        head.check_consistency()?;
        Ok(head)
    }
}

/// Closed-form trainable parameter count, `sum(fan_in * fan_out + fan_out)`.
pub fn count_trainable_for(input_dim: usize, hidden_dims: &[usize]) -> usize {
    let dims: Vec<usize> = std::iter::once(input_dim)
        .chain(hidden_dims.iter().copied())
        .chain(std::iter::once(1))
        .collect();
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Weight multiply-accumulates per forward pass, `sum(fan_in * fan_out)`.
pub fn macs_for(input_dim: usize, hidden_dims: &[usize]) -> usize {
    let dims: Vec<usize> = std::iter::once(input_dim)
        .chain(hidden_dims.iter().copied())
        .chain(std::iter::once(1))
        .collect();
    dims.windows(2).map(|w| w[0] * w[1]).sum()
}
