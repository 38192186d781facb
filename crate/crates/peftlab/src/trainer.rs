//! Training loop over a frozen base: forward with per-site adapter
//! substitution, task loss, updates to adapter parameters only, full
//! metric history. Deterministic under a fixed seed.

use std::fmt;

use rand::rngs::StdRng;
use rand::{RngExt, SeedableRng};

use crate::graph::{Graph, Precision, Var};
use crate::metrics::{classification_report, regression_report, MetricReport};
use crate::model::{Batch, ForwardMode, FrozenModel, ModelError};
use crate::optim::{Optimizer, OptimizerKind};
use crate::peft::{AdapterSet, AdapterSpec};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

/// Hyperparameters for one run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    /// What to attach and where; the runner builds the adapter set from
    /// this description.
    #[serde(default = "AdapterSpec::none")]
    pub adapter: AdapterSpec,
    /// Optionally clamp propulsion vectors into `1 ± clamp_radius` after
    /// each step. Off by default; trained values stay unconstrained.
    #[serde(default)]
    pub clamp: bool,
    #[serde(default = "default_clamp_radius")]
    pub clamp_radius: f64,
    /// Decay propulsion vectors toward 1 instead of 0.
    #[serde(default = "default_true")]
    pub decay_toward_one: bool,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    /// Primary-metric threshold for the steps-to-threshold statistic.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_lr() -> f64 {
    1e-4
}
fn default_weight_decay() -> f64 {
    0.02
}
fn default_dropout() -> f64 {
    0.1
}
fn default_batch_size() -> usize {
    32
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::AdamW
}
fn default_loss() -> LossKind {
    LossKind::CrossEntropy
}
fn default_clamp_radius() -> f64 {
    0.02
}
fn default_true() -> bool {
    true
}
fn default_precision() -> Precision {
    Precision::F64
}
fn default_threshold() -> f64 {
    0.9
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(TrainError::Config("learning_rate must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TrainError::Config("dropout must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub enum TrainError {
    Config(String),
    Data(String),
    Diverged { step: u64 },
    Model(ModelError),
    Tensor(TensorError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Config(msg) => write!(f, "train config error: {msg}"),
            TrainError::Data(msg) => write!(f, "data error: {msg}"),
            TrainError::Diverged { step } => write!(f, "loss diverged to NaN at step {step}"),
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}

/// Sample features: dense rows or token sequences.
#[derive(Debug, Clone)]
pub enum Features {
    Dense { dim: usize, rows: Vec<Vec<f64>> },
    Tokens { vocab: usize, seqs: Vec<Vec<usize>> },
}

impl Features {
    pub fn len(&self) -> usize {
        match self {
            Features::Dense { rows, .. } => rows.len(),
            Features::Tokens { seqs, .. } => seqs.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub enum Labels {
    Class(Vec<usize>),
    Real(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Class(v) => v.len(),
            Labels::Real(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A labelled dataset with train/validation index splits.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Features,
    pub labels: Labels,
    pub n_classes: usize,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.is_empty() {
            return Err(TrainError::Data("empty dataset".into()));
        }
        if self.labels.len() != self.len() {
            return Err(TrainError::Data(format!(
                "{} samples but {} labels",
                self.len(),
                self.labels.len()
            )));
        }
        if let Labels::Class(ys) = &self.labels {
            if let Some(&bad) = ys.iter().find(|&&y| y >= self.n_classes) {
                return Err(TrainError::Data(format!(
                    "label {bad} out of range for {} classes",
                    self.n_classes
                )));
            }
        }
        for idx in self.train_idx.iter().chain(&self.val_idx) {
            if *idx >= self.len() {
                return Err(TrainError::Data(format!("split index {idx} out of range")));
            }
        }
        Ok(())
    }

    pub fn batch(&self, idxs: &[usize]) -> Result<(Batch, Labels), TrainError> {
        let batch = match &self.features {
            Features::Dense { dim, rows } => {
                let mut data = Vec::with_capacity(idxs.len() * dim);
                for &i in idxs {
                    data.extend_from_slice(&rows[i]);
                }
                Batch::Dense(
                    Tensor::new(vec![idxs.len(), *dim], data)
                        .map_err(|e| TrainError::Data(e.to_string()))?,
                )
            }
            Features::Tokens { seqs, .. } => {
                Batch::Tokens(idxs.iter().map(|&i| seqs[i].clone()).collect())
            }
        };
        let labels = match &self.labels {
            Labels::Class(ys) => Labels::Class(idxs.iter().map(|&i| ys[i]).collect()),
            Labels::Real(ys) => Labels::Real(idxs.iter().map(|&i| ys[i]).collect()),
        };
        Ok((batch, labels))
    }
}

/// Mean squared error `(1/T) Σ (pred - target)²` composed from primitives.
pub fn mse(g: &mut Graph, pred: Var, target: Var) -> Result<Var, TensorError> {
    let diff = g.sub(pred, target)?;
    let sq = g.ew_mul(diff, diff)?;
    g.mean(sq)
}

/// Stable softmax cross-entropy, mean over the batch.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
    g.cross_entropy(logits, labels)
}

fn batch_loss(
    g: &mut Graph,
    logits: Var,
    labels: &Labels,
    kind: LossKind,
) -> Result<Var, TrainError> {
    match (kind, labels) {
        (LossKind::CrossEntropy, Labels::Class(ys)) => Ok(cross_entropy(g, logits, ys)?),
        (LossKind::Mse, Labels::Real(ys)) => {
            let shape = g.value(logits).shape().to_vec();
            if shape.len() != 2 || shape[1] != 1 {
                return Err(TrainError::Config(format!(
                    "mse expects a single-output head, got logits {shape:?}"
                )));
            }
            let target = g.leaf(
                Tensor::new(vec![ys.len(), 1], ys.clone())
                    .map_err(|e| TrainError::Data(e.to_string()))?,
            );
            Ok(mse(g, logits, target)?)
        }
        (LossKind::CrossEntropy, Labels::Real(_)) => {
            Err(TrainError::Config("cross_entropy requires class labels".into()))
        }
        (LossKind::Mse, Labels::Class(_)) => {
            Err(TrainError::Config("mse requires real-valued targets".into()))
        }
    }
}

/// One row of the per-epoch history.
#[derive(Debug, Clone)]
pub struct EpochRow {
    pub epoch: usize,
    /// Cumulative optimizer steps at the end of this epoch.
    pub step: u64,
    /// Mean training loss over the epoch's steps (train mode).
    pub train_loss: f64,
    /// Eval-mode metrics on the train split.
    pub train: MetricReport,
    pub val: Option<MetricReport>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRow>,
    pub steps_to_threshold: Option<u64>,
    pub final_train: MetricReport,
    pub final_val: Option<MetricReport>,
}

/// Run the training loop: freeze-respecting updates, seeded shuffling,
/// per-epoch evaluation. Returns the full history.
pub fn train(
    model: &mut FrozenModel,
    adapters: &mut AdapterSet,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    data.validate()?;
    if data.train_idx.is_empty() {
        return Err(TrainError::Data("empty train split".into()));
    }

    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut optimizer = Optimizer::new(
        cfg.optimizer,
        cfg.learning_rate,
        cfg.weight_decay,
        cfg.decay_toward_one,
    );
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut steps_to_threshold = None;
    let mut order = data.train_idx.clone();

    for epoch in 0..cfg.epochs {
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (batch, labels) = data.batch(chunk)?;
            let mut g = Graph::with_precision(cfg.precision);
            let mut mode = ForwardMode::train(cfg.dropout, &mut rng);
            let logits = model.forward(&mut g, &batch, adapters, &mut mode)?;
            let loss = batch_loss(&mut g, logits, &labels, cfg.loss)?;
            let loss_value = g.value(loss).item();
            optimizer.begin_step();
            if !loss_value.is_finite() {
                return Err(TrainError::Diverged { step: optimizer.steps_taken() });
            }
            epoch_loss += loss_value;
            batches += 1;
            g.backward(loss)?;
            for (name, grad) in g.trainable_grads() {
                if let Some(p) = adapters.param_mut(&name) {
                    optimizer.update(p, grad.data());
                } else if let Some(p) = model.param_mut(&name) {
                    optimizer.update(p, grad.data());
                }
            }
            if cfg.clamp {
                for p in adapters.params_mut() {
                    if p.decay_target == 1.0 {
                        let lo = 1.0 - cfg.clamp_radius;
                        let hi = 1.0 + cfg.clamp_radius;
                        for v in p.tensor.data_mut() {
                            *v = v.clamp(lo, hi);
                        }
                    }
                }
            }
        }

        let train_report = evaluate(model, adapters, data, &data.train_idx, cfg)?;
        let val_report = if data.val_idx.is_empty() {
            None
        } else {
            Some(evaluate(model, adapters, data, &data.val_idx, cfg)?)
        };
        let step = optimizer.steps_taken();
        if steps_to_threshold.is_none() {
            if let Some(primary) = train_report.primary() {
                if primary >= cfg.threshold {
                    steps_to_threshold = Some(step);
                }
            }
        }
        history.push(EpochRow {
            epoch,
            step,
            train_loss: epoch_loss / batches.max(1) as f64,
            train: train_report,
            val: val_report,
        });
    }

    let final_train = match history.last() {
        Some(row) => row.train.clone(),
        None => evaluate(model, adapters, data, &data.train_idx, cfg)?,
    };
    let final_val = match history.last() {
        Some(row) => row.val.clone(),
        None if !data.val_idx.is_empty() => {
            Some(evaluate(model, adapters, data, &data.val_idx, cfg)?)
        }
        None => None,
    };
    Ok(TrainOutcome { history, steps_to_threshold, final_train, final_val })
}

/// Eval-mode metrics over a split, batched to bound graph size.
pub fn evaluate(
    model: &FrozenModel,
    adapters: &AdapterSet,
    data: &Dataset,
    idxs: &[usize],
    cfg: &TrainConfig,
) -> Result<MetricReport, TrainError> {
    if idxs.is_empty() {
        return Err(TrainError::Data("empty evaluation split".into()));
    }
    let mut loss_sum = 0.0;
    let mut count = 0usize;
    let mut class_preds = Vec::new();
    let mut class_targets = Vec::new();
    let mut real_preds = Vec::new();
    let mut real_targets = Vec::new();

    for chunk in idxs.chunks(cfg.batch_size) {
        let (batch, labels) = data.batch(chunk)?;
        let mut g = Graph::with_precision(cfg.precision);
        let logits = model.forward(&mut g, &batch, adapters, &mut ForwardMode::eval())?;
        let loss = batch_loss(&mut g, logits, &labels, cfg.loss)?;
        loss_sum += g.value(loss).item() * chunk.len() as f64;
        count += chunk.len();

        let out = g.value(logits);
        match &labels {
            Labels::Class(ys) => {
                let c = out.cols();
                for (r, &y) in ys.iter().enumerate() {
                    let row = &out.data()[r * c..(r + 1) * c];
                    let pred = row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                        .map(|(i, _)| i)
                        .unwrap_or(0);
                    class_preds.push(pred);
                    class_targets.push(y);
                }
            }
            Labels::Real(ys) => {
                for (r, &y) in ys.iter().enumerate() {
                    real_preds.push(out.data()[r * out.cols()]);
                    real_targets.push(y);
                }
            }
        }
    }

    let mean_loss = loss_sum / count as f64;
    let report = match &data.labels {
        Labels::Class(_) => {
            classification_report(mean_loss, &class_preds, &class_targets, data.n_classes)
        }
        Labels::Real(_) => regression_report(mean_loss, &real_preds, &real_targets),
    };
    Ok(report)
}

fn shuffle(idx: &mut [usize], rng: &mut StdRng) {
    for i in (1..idx.len()).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelKind, ModelSpec, SiteGroup};
    use crate::peft::{build_adapters, AdapterKind, AdapterSpec};

    fn mlp_spec(seed: u64) -> ModelSpec {
        ModelSpec {
            kind: ModelKind::Mlp,
            depth: 2,
            d_in: 2,
            d_model: 8,
            d_ff: 0,
            n_heads: 0,
            vocab_size: 0,
            max_seq: 0,
            n_classes: 2,
            seed,
        }
    }

    fn xor_like_dataset() -> Dataset {
        // Two linearly separable clusters.
        let mut rows = Vec::new();
        let mut ys = Vec::new();
        for i in 0..16 {
            let t = i as f64 * 0.37;
            rows.push(vec![2.0 + t.sin() * 0.2, 2.0 + t.cos() * 0.2]);
            ys.push(1usize);
            rows.push(vec![-2.0 + t.cos() * 0.2, -2.0 + t.sin() * 0.2]);
            ys.push(0usize);
        }
        let n = rows.len();
        Dataset {
            features: Features::Dense { dim: 2, rows },
            labels: Labels::Class(ys),
            n_classes: 2,
            train_idx: (0..n).collect(),
            val_idx: Vec::new(),
        }
    }

    fn quick_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 0.05,
            weight_decay: 0.0,
            dropout: 0.0,
            epochs,
            batch_size: 8,
            seed: 3,
            optimizer: OptimizerKind::AdamW,
            loss: LossKind::CrossEntropy,
            adapter: AdapterSpec::propulsion(SiteGroup::All, 1),
            clamp: false,
            clamp_radius: 0.02,
            decay_toward_one: true,
            precision: Precision::F64,
            threshold: 0.9,
        }
    }

    #[test]
    fn zero_epochs_changes_nothing() {
        let mut model = FrozenModel::build(&mlp_spec(1)).unwrap();
        let mut adapters =
            build_adapters(&mut model, &AdapterSpec::propulsion(SiteGroup::All, 1), 3).unwrap();
        let data = xor_like_dataset();
        let out = train(&mut model, &mut adapters, &data, &quick_cfg(0)).unwrap();
        assert!(out.history.is_empty());
        assert!(out.steps_to_threshold.is_none());
        for p in adapters.params() {
            assert!(p.tensor.data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn frozen_base_is_untouched_by_propulsion_training() {
        let mut model = FrozenModel::build(&mlp_spec(2)).unwrap();
        let mut adapters =
            build_adapters(&mut model, &AdapterSpec::propulsion(SiteGroup::All, 1), 3).unwrap();
        let checksum = model.frozen_checksum();
        let data = xor_like_dataset();
        train(&mut model, &mut adapters, &data, &quick_cfg(5)).unwrap();
        assert_eq!(model.frozen_checksum(), checksum);
        // And z actually moved.
        assert!(adapters.params().iter().any(|p| p.tensor.data().iter().any(|&v| v != 1.0)));
    }

    #[test]
    fn bitfit_moves_only_biases() {
        let mut model = FrozenModel::build(&mlp_spec(2)).unwrap();
        let weights_before: Vec<Vec<f64>> = model
            .params()
            .iter()
            .filter(|p| !p.name.ends_with(".bias"))
            .map(|p| p.tensor.data().to_vec())
            .collect();
        let mut adapters = build_adapters(
            &mut model,
            &AdapterSpec { kind: AdapterKind::Bitfit, ..AdapterSpec::none() },
            3,
        )
        .unwrap();
        let data = xor_like_dataset();
        train(&mut model, &mut adapters, &data, &quick_cfg(5)).unwrap();
        let weights_after: Vec<Vec<f64>> = model
            .params()
            .iter()
            .filter(|p| !p.name.ends_with(".bias"))
            .map(|p| p.tensor.data().to_vec())
            .collect();
        assert_eq!(weights_before, weights_after);
        let any_bias_moved = model
            .params()
            .iter()
            .filter(|p| p.name.ends_with(".bias"))
            .any(|p| p.tensor.data().iter().any(|&v| v != 0.0));
        assert!(any_bias_moved);
    }

    #[test]
    fn frozen_checksum_constant_for_lora_and_multi_propulsion() {
        let data = xor_like_dataset();
        for spec in [
            AdapterSpec { kind: AdapterKind::Lora, sites: SiteGroup::Mlp, rank: 2, ..AdapterSpec::none() },
            AdapterSpec {
                kind: AdapterKind::MultiPropulsion,
                sites: SiteGroup::All,
                vectors: 3,
                ..AdapterSpec::none()
            },
        ] {
            let mut model = FrozenModel::build(&mlp_spec(9)).unwrap();
            let mut adapters = build_adapters(&mut model, &spec, 3).unwrap();
            let checksum = model.frozen_checksum();
            train(&mut model, &mut adapters, &data, &quick_cfg(4)).unwrap();
            assert_eq!(model.frozen_checksum(), checksum, "{:?}", spec.kind);
        }
    }

    #[test]
    fn lr_zero_keeps_metrics_constant() {
        let mut model = FrozenModel::build(&mlp_spec(4)).unwrap();
        let mut adapters =
            build_adapters(&mut model, &AdapterSpec::propulsion(SiteGroup::All, 1), 3).unwrap();
        let data = xor_like_dataset();
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 3, ..quick_cfg(3) };
        let out = train(&mut model, &mut adapters, &data, &cfg).unwrap();
        let first = &out.history[0].train;
        for row in &out.history {
            assert_eq!(row.train.loss.to_bits(), first.loss.to_bits());
            assert_eq!(row.train.accuracy, first.accuracy);
        }
        for p in adapters.params() {
            assert!(p.tensor.data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn propulsion_init_loss_equals_frozen_loss() {
        let mut model = FrozenModel::build(&mlp_spec(6)).unwrap();
        let data = xor_like_dataset();
        let cfg = quick_cfg(1);
        let frozen =
            evaluate(&model, &AdapterSet::none(), &data, &data.train_idx, &cfg).unwrap();
        let adapters =
            build_adapters(&mut model, &AdapterSpec::propulsion(SiteGroup::All, 15), 3).unwrap();
        let adapted = evaluate(&model, &adapters, &data, &data.train_idx, &cfg).unwrap();
        assert_eq!(frozen.loss.to_bits(), adapted.loss.to_bits());
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let run = || {
            let mut model = FrozenModel::build(&mlp_spec(8)).unwrap();
            let mut adapters =
                build_adapters(&mut model, &AdapterSpec::propulsion(SiteGroup::All, 2), 3)
                    .unwrap();
            let data = xor_like_dataset();
            let cfg = TrainConfig { dropout: 0.1, ..quick_cfg(4) };
            let out = train(&mut model, &mut adapters, &data, &cfg).unwrap();
            let zs: Vec<Vec<f64>> =
                adapters.params().iter().map(|p| p.tensor.data().to_vec()).collect();
            (out.history.iter().map(|r| r.train_loss.to_bits()).collect::<Vec<_>>(), zs)
        };
        let (l1, z1) = run();
        let (l2, z2) = run();
        assert_eq!(l1, l2);
        for (a, b) in z1.iter().zip(&z2) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn degree_scales_loss_gradient_at_init() {
        let data = xor_like_dataset();
        let grad_for = |k: i64| {
            let mut model = FrozenModel::build(&mlp_spec(5)).unwrap();
            let adapters =
                build_adapters(&mut model, &AdapterSpec::propulsion(SiteGroup::All, k), 3)
                    .unwrap();
            let (batch, labels) = data.batch(&data.train_idx).unwrap();
            let mut g = Graph::new();
            let logits = model
                .forward(&mut g, &batch, &adapters, &mut ForwardMode::eval())
                .unwrap();
            let loss = batch_loss(&mut g, logits, &labels, LossKind::CrossEntropy).unwrap();
            g.backward(loss).unwrap();
            g.trainable_grads()
                .into_iter()
                .flat_map(|(_, t)| t.into_data())
                .collect::<Vec<f64>>()
        };
        let g1 = grad_for(1);
        for k in [2i64, 15, 55] {
            let gk = grad_for(k);
            for (a, b) in gk.iter().zip(&g1) {
                let expect = k as f64 * b;
                let rel = (a - expect).abs() / expect.abs().max(1e-12);
                assert!(rel <= 1e-8, "degree {k}: {a} vs {expect}");
            }
        }
    }

    #[test]
    fn loss_fixtures() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let loss = cross_entropy(&mut g, logits, &[0]).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((g.value(loss).item() - expected).abs() < 1e-12);
        assert!((expected - 0.313_261_687_5).abs() < 1e-9);

        // Huge-margin correct logits push the loss to zero without
        // overflowing the stabilized log-sum-exp.
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::matrix(2, 2, vec![1e4, 0.0, 0.0, 1e4]).unwrap());
        let loss = cross_entropy(&mut g, logits, &[0, 1]).unwrap();
        assert!(g.value(loss).item().abs() < 1e-12);

        let mut g = Graph::new();
        let pred = g.leaf(Tensor::matrix(2, 1, vec![0.0, 2.0]).unwrap());
        let target = g.leaf(Tensor::matrix(2, 1, vec![0.0, 0.0]).unwrap());
        let loss = mse(&mut g, pred, target).unwrap();
        assert_eq!(g.value(loss).item(), 2.0);

        let mut g = Graph::new();
        let pred = g.leaf(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        let same = g.leaf(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        let loss = mse(&mut g, pred, same).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
    }

    #[test]
    fn mse_gradient_matches_closed_form() {
        let mut g = Graph::new();
        let pred = g.leaf_grad(Tensor::matrix(2, 1, vec![1.0, -0.5]).unwrap());
        let target = g.leaf(Tensor::matrix(2, 1, vec![0.5, 0.5]).unwrap());
        let loss = mse(&mut g, pred, target).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(pred).unwrap();
        // d/dpred (1/T) Σ (pred-target)^2 = (2/T)(pred-target).
        assert!((grad.data()[0] - 0.5).abs() < 1e-15);
        assert!((grad.data()[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn label_out_of_range_is_a_data_error() {
        let mut data = xor_like_dataset();
        if let Labels::Class(ys) = &mut data.labels {
            ys[0] = 7;
        }
        let mut model = FrozenModel::build(&mlp_spec(1)).unwrap();
        let mut adapters = AdapterSet::none();
        assert!(matches!(
            train(&mut model, &mut adapters, &data, &quick_cfg(1)),
            Err(TrainError::Data(_))
        ));
    }
}
