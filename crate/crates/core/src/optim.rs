//! Class-weighted BCE, Adam, plateau scheduling, early stopping and the
//! training loop.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Gradients, Matrix, MlpHead, NnError};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("logit {index} is not finite")]
    NonFiniteLogit { index: usize },
    #[error("logits and labels differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("pos_weight must be positive and finite, got {0}")]
    InvalidPosWeight(f64),
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean class-weighted binary cross-entropy on raw logits:
///
/// `L = -mean[ w+ * y * ln s(x) + (1 - y) * ln(1 - s(x)) ]`
///
/// evaluated as `w+ * y * softplus(-x) + (1 - y) * softplus(x)`, which stays
/// finite for any finite logit. Returns the loss and `dL/dlogit`.
pub fn bce_with_logits(logits: &[f64], labels: &[f64], pos_weight: f64) -> Result<(f64, Vec<f64>), OptimError> {
    if logits.len() != labels.len() {
        return Err(OptimError::LengthMismatch(logits.len(), labels.len()));
    }
    if !(pos_weight > 0.0 && pos_weight.is_finite()) {
        return Err(OptimError::InvalidPosWeight(pos_weight));
    }
    if let Some(index) = logits.iter().position(|x| !x.is_finite()) {
        return Err(OptimError::NonFiniteLogit { index });
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(labels)
        .map(|(&x, &y)| {
            loss += pos_weight * y * softplus(-x) + (1.0 - y) * softplus(x);
            let s = crate::nn::sigmoid(x);
            (pos_weight * y * (s - 1.0) + (1.0 - y) * s) / n
        })
        .collect();
    Ok((loss / n, grad))
}

/// `w+ = n_attack / n_bonafide` for targets where 1 marks bona fide.
pub fn pos_weight_for(labels: &[f64]) -> Result<f64, OptimError> {
    let pos = labels.iter().filter(|&&y| y == 1.0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(OptimError::SingleClass);
    }
    Ok(neg as f64 / pos as f64)
}

/// Hyperparameters of one training run. Defaults are the canonical values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    /// Apply weight decay directly to the weights (AdamW) instead of adding
    /// it to the gradient.
    pub decoupled_weight_decay: bool,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    /// Relative improvement a monitored loss must make to count as better.
    pub improvement_threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 1e-4,
            decoupled_weight_decay: false,
            batch_size: 32,
            max_epochs: 100,
            plateau_factor: 0.5,
            plateau_patience: 5,
            early_stop_patience: 15,
            improvement_threshold: 1e-4,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: &str| Err(OptimError::InvalidConfig(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must lie in (0, 1)");
        }
        if self.plateau_patience < 1 || self.early_stop_patience < 1 {
            return bad("patiences must be at least 1");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive");
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("betas must lie in [0, 1)");
        }
        let non_negative = |x: f64| x.is_finite() && x >= 0.0;
        if !(self.eps.is_finite() && self.eps > 0.0)
            || !non_negative(self.weight_decay)
            || !non_negative(self.improvement_threshold)
        {
            return bad("eps must be positive; weight_decay and improvement_threshold non-negative");
        }
        Ok(())
    }
}

/// Adam moments for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One Adam update at learning rate `lr`.
///
/// Coupled mode adds `weight_decay * theta` to the gradient before the
/// moment updates; decoupled mode shrinks `theta` by `lr * weight_decay`
/// first and feeds Adam the raw gradient.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &TrainConfig, lr: f64) {
    assert_eq!(params.len(), grads.len(), "parameter and gradient lengths differ");
    if state.m.len() != params.len() {
        *state = AdamState::new(params.len());
    }
    state.t += 1;
    let (b1, b2) = cfg.betas;
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    let wd = cfg.weight_decay;
    for i in 0..params.len() {
        let mut g = grads[i];
        if wd != 0.0 {
            if cfg.decoupled_weight_decay {
                params[i] -= lr * wd * params[i];
            } else {
                g += wd * params[i];
            }
        }
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Adam over every tensor of a head.
#[derive(Debug, Clone)]
pub struct HeadOptimizer {
    weights: Vec<AdamState>,
    biases: Vec<AdamState>,
}

impl HeadOptimizer {
    pub fn new(head: &MlpHead) -> Self {
        Self {
            weights: head.layers.iter().map(|l| AdamState::new(l.weights.len())).collect(),
            biases: head.layers.iter().map(|l| AdamState::new(l.bias.len())).collect(),
        }
    }

    pub fn step(&mut self, head: &mut MlpHead, grads: &Gradients, cfg: &TrainConfig, lr: f64) {
        for (l, layer) in head.layers.iter_mut().enumerate() {
            adam_step(&mut layer.weights, &grads.weights[l], &mut self.weights[l], cfg, lr);
            adam_step(&mut layer.bias, &grads.biases[l], &mut self.biases[l], cfg, lr);
        }
    }
}

fn improves(value: f64, best: Option<f64>, threshold: f64) -> bool {
    match best {
        None => true,
        Some(best) => value < best * (1.0 - threshold),
    }
}

/// Reduce-on-plateau in "min" mode with a relative threshold and no
/// cooldown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            factor: cfg.plateau_factor,
            patience: cfg.plateau_patience,
            threshold: cfg.improvement_threshold,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Feeds one epoch's monitored value. Once more than `patience`
    /// consecutive values fail to improve on the best, the learning rate is
    /// multiplied by `factor` and the counter restarts.
    pub fn step(&mut self, monitored: f64) -> f64 {
        if improves(monitored, self.best, self.threshold) {
            self.best = Some(monitored);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        if self.bad_epochs > self.patience {
            self.lr *= self.factor;
            self.bad_epochs = 0;
        }
        self.lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop(StopReason),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopper {
    pub patience: usize,
    pub max_epochs: usize,
    pub threshold: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
    pub epoch: usize,
}

impl EarlyStopper {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            patience: cfg.early_stop_patience,
            max_epochs: cfg.max_epochs,
            threshold: cfg.improvement_threshold,
            best: None,
            bad_epochs: 0,
            epoch: 0,
        }
    }

    /// Called once per finished epoch. Stops after `patience` consecutive
    /// epochs without improvement, or when the epoch budget is spent.
    pub fn check(&mut self, monitored: f64) -> StopDecision {
        self.epoch += 1;
        if improves(monitored, self.best, self.threshold) {
            self.best = Some(monitored);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        if self.bad_epochs >= self.patience {
            StopDecision::Stop(StopReason::Patience)
        } else if self.epoch >= self.max_epochs {
            StopDecision::Stop(StopReason::MaxEpochs)
        } else {
            StopDecision::Continue
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub pos_weight: f64,
    pub stop_epoch: usize,
    pub stop_reason: StopReason,
}

/// Features and 0/1 targets (1 = bona fide).
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub features: Matrix,
    pub targets: Vec<f64>,
}

/// Trains `head` in place.
///
/// Each epoch shuffles the rows with a generator seeded from
/// `(cfg.seed, epoch)`, which also draws that epoch's dropout masks. The
/// positive-class weight is computed once from the targets. The plateau
/// scheduler and the early stopper both watch the mean training loss of the
/// epoch.
pub fn train(head: &mut MlpHead, data: &TrainingSet, cfg: &TrainConfig) -> Result<TrainHistory, OptimError> {
    cfg.validate()?;
    let n = data.targets.len();
    if n == 0 {
        return Err(OptimError::EmptyTrainingSet);
    }
    if data.features.rows != n {
        return Err(OptimError::LengthMismatch(data.features.rows, n));
    }
    let pos_weight = pos_weight_for(&data.targets)?;

    let mut optimizer = HeadOptimizer::new(head);
    let mut scheduler = PlateauScheduler::new(cfg);
    let mut stopper = EarlyStopper::new(cfg);
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.max_epochs {
        let lr = scheduler.lr;
        let mut rng = crate::seed::rng(crate::seed::derive(cfg.seed, epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut total = 0.0;
        for batch_rows in order.chunks(cfg.batch_size) {
            let x = data.features.gather(batch_rows);
            let y: Vec<f64> = batch_rows.iter().map(|&i| data.targets[i]).collect();
            let (logits, trace) = head.forward(&x, true, &mut rng)?;
            let (loss, dlogits) = bce_with_logits(&logits, &y, pos_weight)?;
            total += loss * batch_rows.len() as f64;
            let grads = head.backward(&trace, &dlogits)?;
            optimizer.step(head, &grads, cfg, lr);
        }
        let mean_loss = total / n as f64;
        epochs.push(EpochRecord {
            epoch: epoch + 1,
            loss: mean_loss,
            lr,
        });
        scheduler.step(mean_loss);
        if let StopDecision::Stop(reason) = stopper.check(mean_loss) {
            return Ok(TrainHistory {
                stop_epoch: epoch + 1,
                stop_reason: reason,
                epochs,
                pos_weight,
            });
        }
    }
    unreachable!("the stopper fires at max_epochs")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn bce_closed_forms() {
        let (loss, grad) = bce_with_logits(&[0.0], &[1.0], 1.0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((grad[0] + 0.5).abs() < 1e-15);

        let (loss, _) = bce_with_logits(&[50.0, -50.0], &[1.0, 0.0], 1.0).unwrap();
        assert!(loss < 1e-9);

        let (loss, grad) = bce_with_logits(&[1.0], &[1.0], 2.0).unwrap();
        let expected_loss = 2.0 * (1.0 + (-1.0f64).exp()).ln();
        let expected_grad = 2.0 * (1.0 / (1.0 + (-1.0f64).exp()) - 1.0);
        assert!((loss - expected_loss).abs() < 1e-15);
        assert!((loss - 0.626_523).abs() < 1e-6);
        assert!((grad[0] - expected_grad).abs() < 1e-15);
        assert!((grad[0] + 0.537_883).abs() < 1e-6);
    }

    #[test]
    fn bce_is_finite_for_huge_logits() {
        let (loss, grad) = bce_with_logits(&[1e4, -1e4], &[0.0, 1.0], 3.0).unwrap();
        assert!(loss.is_finite() && grad.iter().all(|g| g.is_finite()));
        assert!((loss - (1e4 + 3.0 * 1e4) / 2.0).abs() < 1e-6);
    }

    #[test]
    fn bce_rejects_bad_input() {
        assert!(matches!(
            bce_with_logits(&[f64::NAN], &[1.0], 1.0),
            Err(OptimError::NonFiniteLogit { index: 0 })
        ));
        assert!(matches!(
            bce_with_logits(&[0.0], &[1.0], 0.0),
            Err(OptimError::InvalidPosWeight(_))
        ));
        assert!(matches!(
            bce_with_logits(&[0.0], &[], 1.0),
            Err(OptimError::LengthMismatch(1, 0))
        ));
    }

    #[test]
    fn pos_weight_examples() {
        let half: Vec<f64> = (0..10).map(|i| (i % 2) as f64).collect();
        assert_eq!(pos_weight_for(&half).unwrap(), 1.0);
        let face: Vec<f64> = std::iter::repeat_n(0.0, 100)
            .chain(std::iter::repeat_n(1.0, 53))
            .collect();
        assert!((pos_weight_for(&face).unwrap() - 100.0 / 53.0).abs() < 1e-12);
        let skew: Vec<f64> = std::iter::repeat_n(0.0, 10)
            .chain(std::iter::repeat_n(1.0, 40))
            .collect();
        assert_eq!(pos_weight_for(&skew).unwrap(), 0.25);
        assert!(matches!(pos_weight_for(&[1.0, 1.0]), Err(OptimError::SingleClass)));
    }

    #[test]
    fn adam_first_step_closed_form() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut theta = [0.0];
        let mut state = AdamState::new(1);
        adam_step(&mut theta, &[1.0], &mut state, &cfg, 1e-3);
        assert!((theta[0] - (-1e-3 / (1.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(state.t, 1);

        let cfg = TrainConfig {
            weight_decay: 0.1,
            ..TrainConfig::default()
        };
        let mut theta = [1.0];
        let mut state = AdamState::new(1);
        adam_step(&mut theta, &[0.0], &mut state, &cfg, 1e-3);
        // g' = 0.1, m_hat / sqrt(v_hat) = 1
        assert!((theta[0] - (1.0 - 1e-3 * 0.1 / (0.1 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut theta = [0.5, -2.0, 3.25];
        let before = theta;
        let mut state = AdamState::new(3);
        for _ in 0..10 {
            adam_step(&mut theta, &[0.0; 3], &mut state, &cfg, 1e-3);
        }
        assert_eq!(theta, before);
    }

    #[test]
    fn decoupled_decay_shrinks_weights_without_gradient() {
        let cfg = TrainConfig {
            weight_decay: 0.1,
            decoupled_weight_decay: true,
            ..TrainConfig::default()
        };
        let mut theta = [2.0];
        let mut state = AdamState::new(1);
        adam_step(&mut theta, &[0.0], &mut state, &cfg, 1e-2);
        assert!((theta[0] - 2.0 * (1.0 - 1e-3)).abs() < 1e-15);
    }

    #[test]
    fn plateau_halves_after_patience_exceeded() {
        let mut s = PlateauScheduler::new(&TrainConfig::default());
        assert_eq!(s.step(1.0), 1e-3);
        for _ in 0..5 {
            assert_eq!(s.step(1.0), 1e-3);
        }
        assert_eq!(s.step(1.0), 5e-4);
        for _ in 0..5 {
            assert_eq!(s.step(1.0), 5e-4);
        }
        assert_eq!(s.step(1.0), 2.5e-4);
    }

    #[test]
    fn plateau_never_fires_on_decreasing_loss() {
        let mut s = PlateauScheduler::new(&TrainConfig::default());
        for e in 1..=100 {
            assert_eq!(s.step(1.0 / e as f64), 1e-3);
        }
    }

    #[test]
    fn plateau_ignores_sub_threshold_improvements() {
        let mut s = PlateauScheduler::new(&TrainConfig::default());
        s.step(1.0);
        for i in 1..=6 {
            s.step(1.0 - 1e-6 * i as f64);
        }
        assert_eq!(s.lr, 5e-4);
    }

    #[test]
    fn early_stop_examples() {
        let cfg = TrainConfig::default();
        let mut stopper = EarlyStopper::new(&cfg);
        let mut stopped = None;
        for e in 1..=200 {
            if let StopDecision::Stop(r) = stopper.check(1.0 / e as f64) {
                stopped = Some((e, r));
                break;
            }
        }
        assert_eq!(stopped, Some((100, StopReason::MaxEpochs)));

        let mut stopper = EarlyStopper::new(&cfg);
        let first_stop = (1..=100).find(|_| stopper.check(0.7) != StopDecision::Continue);
        assert_eq!(first_stop, Some(16));

        let mut stopper = EarlyStopper::new(&cfg);
        let losses = |e: usize| if e == 14 { 0.5 } else { 0.7 };
        for e in 1..=16 {
            assert_eq!(stopper.check(losses(e)), StopDecision::Continue, "epoch {e}");
        }
    }

    #[test]
    fn config_json_uses_defaults_for_missing_keys() {
        let cfg: TrainConfig = serde_json::from_str(r#"{"lr": 0.01}"#).unwrap();
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.plateau_patience, 5);
        let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(TrainConfig {
            plateau_factor: 1.0,
            ..cfg.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            early_stop_patience: 0,
            ..cfg
        }
        .validate()
        .is_err());
    }

    fn toy_problem() -> TrainingSet {
        let mut rng = crate::seed::rng(5);
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for i in 0..200 {
            let y = (i % 2) as f64;
            let c = if y == 1.0 { 1.0 } else { -1.0 };
            rows.push(vec![c + rng.gen_range(-0.4..0.4), c + rng.gen_range(-0.4..0.4)]);
            targets.push(y);
        }
        TrainingSet {
            features: Matrix::from_rows(&rows).unwrap(),
            targets,
        }
    }

    fn toy_head() -> MlpHead {
        crate::nn::init_head(2, &[16, 8, 8, 4], &[0.0; 4], 3).unwrap()
    }

    #[test]
    fn separable_toy_problem_is_learned() {
        let data = toy_problem();
        let cfg = TrainConfig {
            lr: 1e-2,
            ..TrainConfig::default()
        };
        let mut head = toy_head();
        let history = train(&mut head, &data, &cfg).unwrap();
        assert!(
            history.epochs.last().unwrap().loss < 0.05,
            "{:?}",
            history.epochs.last()
        );
        let p = head.predict_proba(&data.features).unwrap();
        let correct = p
            .iter()
            .zip(&data.targets)
            .filter(|(p, y)| (**p >= 0.5) == (**y == 1.0))
            .count();
        assert_eq!(correct, data.targets.len());
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy_problem();
        let cfg = TrainConfig {
            max_epochs: 5,
            ..TrainConfig::default()
        };
        let mut a = crate::nn::init_head(2, &[16, 8, 8, 4], &[0.3, 0.3, 0.2, 0.2], 3).unwrap();
        let mut b = a.clone();
        let ha = train(&mut a, &data, &cfg).unwrap();
        let hb = train(&mut b, &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        let mut c = crate::nn::init_head(2, &[16, 8, 8, 4], &[0.3, 0.3, 0.2, 0.2], 3).unwrap();
        train(&mut c, &data, &TrainConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn training_history_records_lr_schedule() {
        let data = toy_problem();
        let mut head = toy_head();
        let history = train(&mut head, &data, &TrainConfig::default()).unwrap();
        assert_eq!(history.epochs.len(), history.stop_epoch);
        assert!((history.pos_weight - 1.0).abs() < 1e-12);
        for e in &history.epochs {
            let halvings = (1e-3 / e.lr).log2();
            assert!((halvings - halvings.round()).abs() < 1e-12, "lr {}", e.lr);
        }
    }
}
