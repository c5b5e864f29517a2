//! Training loop: SGD with momentum and weight decay, a step learning-rate
//! schedule, per-epoch split planning, and loss accumulation.
//!
//! Per batch the optimizer sees `mean(CE terms) + sym_batch`, where the
//! symmetry term already carries the epoch-level `1 / (2 * n_split)`
//! denominator; summing the batch symmetry terms over an epoch therefore
//! reproduces the epoch-level symmetry loss exactly, and the epoch
//! classification loss is re-reported as `sum(CE terms) / N'`.
//!
//! All randomness is drawn from named per-epoch streams derived from the
//! run seed, so a run resumed from a checkpoint continues bit-identically
//! and a fixed seed yields a byte-identical metrics log.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::data::{self, BatchItem, ImageProvider, Manifest};
use crate::error::{Error, Result};
use crate::loss::{self, MarginConfig, MarginFamily, SymBatchView, SymPairRows};
use crate::model::{Checkpoint, ClassifierHead, Embedder, EmbedderConfig, HeadConfig, HeadNorm};
use crate::seeds;

/// One step-schedule entry: from `epoch` on, use `lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrStep {
    pub epoch: usize,
    pub lr: f64,
}

/// Full training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Slots per batch; a split sample occupies one slot with two images.
    pub batch_size_slots: usize,
    pub lr_initial: f64,
    pub lr_steps: Vec<LrStep>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Frontness threshold the manifest flags were computed under.
    pub tau: f64,
    /// Fraction `p` of symmetric images split each epoch.
    pub split_fraction: f64,
    /// Horizontal flip probability during augmentation.
    pub flip_prob: f64,
    pub margin: MarginConfig,
    /// When false, split samples still flow through the classifier but the
    /// symmetry loss is not applied (split-augmentation-only ablation).
    pub sym_loss: bool,
    /// Measure the pair distance on unit-normalized embeddings instead of
    /// the raw ones (ablation variant).
    pub sym_normalized: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size_slots: 32,
            lr_initial: 0.01,
            lr_steps: vec![LrStep {
                epoch: 20,
                lr: 0.001,
            }],
            momentum: 0.9,
            weight_decay: 5e-4,
            tau: 0.2,
            split_fraction: 0.3,
            flip_prob: 0.5,
            margin: MarginConfig::default(),
            sym_loss: true,
            sym_normalized: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size_slots == 0 {
            return Err(Error::Config("batch_size_slots must be at least 1".into()));
        }
        if !(self.lr_initial.is_finite() && self.lr_initial > 0.0) {
            return Err(Error::Config(format!(
                "initial learning rate must be positive, got {}",
                self.lr_initial
            )));
        }
        let mut prev_epoch = None;
        for step in &self.lr_steps {
            if let Some(prev) = prev_epoch {
                if step.epoch <= prev {
                    return Err(Error::Config(
                        "lr_steps must be strictly increasing in epoch".into(),
                    ));
                }
            }
            prev_epoch = Some(step.epoch);
            if !(step.lr.is_finite() && step.lr > 0.0) {
                return Err(Error::Config(format!(
                    "learning rate at epoch {} must be positive, got {}",
                    step.epoch, step.lr
                )));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::Config(format!(
                "tau must be in [0, 1), got {}",
                self.tau
            )));
        }
        if !(0.0..=1.0).contains(&self.split_fraction) {
            return Err(Error::Config(format!(
                "split fraction must be in [0, 1], got {}",
                self.split_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!(
                "flip probability must be in [0, 1], got {}",
                self.flip_prob
            )));
        }
        self.margin.validate()
    }

    /// Learning rate in effect at `epoch`: the last step at or before it,
    /// or the initial rate.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr_steps
            .iter()
            .take_while(|s| s.epoch <= epoch)
            .last()
            .map(|s| s.lr)
            .unwrap_or(self.lr_initial)
    }
}

/// One SGD-with-momentum update:
/// `v <- momentum * v + grad + weight_decay * param; param <- param - lr * v`.
pub fn sgd_step(
    param: &mut Tensor,
    grad: &[f64],
    velocity: &mut Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grad.len() != param.len() || velocity.len() != param.len() {
        return Err(Error::Shape {
            op: "sgd_step",
            detail: format!(
                "param {} / grad {} / velocity {}",
                param.len(),
                grad.len(),
                velocity.len()
            ),
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NumericGuard(
            "non-finite gradient in sgd_step".into(),
        ));
    }
    let p = param.data_mut();
    let v = velocity.data_mut();
    for i in 0..p.len() {
        v[i] = momentum * v[i] + grad[i] + weight_decay * p[i];
        p[i] -= lr * v[i];
    }
    Ok(())
}

/// Per-epoch metrics, one JSONL line each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Classification loss over the epoch: sum of CE terms / N'.
    pub lf: f64,
    /// Symmetry loss over the epoch.
    pub lrho: f64,
    pub ltotal: f64,
    /// Mean L2 distance between hemi-pair embeddings this epoch (0 when
    /// nothing was split).
    pub pair_dist_mean: f64,
    pub lr: f64,
}

/// Mutable run state: completed epochs, weights, optimizer velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub epochs_done: usize,
    pub embedder: Embedder,
    pub head: ClassifierHead,
    pub velocities: Vec<Tensor>,
}

impl RunState {
    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        let mut ckpt = Checkpoint::from_model(&self.embedder, &self.head, self.epochs_done, seed);
        for (i, v) in self.velocities.iter().enumerate() {
            ckpt.tensors.push((format!("velocity.{i}"), v.clone()));
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<RunState> {
        let (embedder, head) = ckpt.restore_model()?;
        let mut velocities = Vec::new();
        for i in 0.. {
            match ckpt.tensor(&format!("velocity.{i}")) {
                Some(t) => velocities.push(t.clone()),
                None => break,
            }
        }
        if velocities.is_empty() {
            // Model-only checkpoint: fresh optimizer state.
            velocities = param_shapes(&embedder, &head)
                .into_iter()
                .map(|shape| Tensor::zeros(&shape))
                .collect();
        }
        Ok(RunState {
            epochs_done: ckpt.epoch,
            embedder,
            head,
            velocities,
        })
    }
}

fn param_shapes(embedder: &Embedder, head: &ClassifierHead) -> Vec<Vec<usize>> {
    let mut shapes = Vec::new();
    for layer in embedder.layers() {
        shapes.push(layer.weight.shape().to_vec());
        if let Some(bias) = &layer.bias {
            shapes.push(bias.shape().to_vec());
        }
    }
    shapes.push(head.weight.shape().to_vec());
    shapes
}

/// Everything a finished (or resumed) run returns.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: RunState,
    pub metrics: Vec<EpochMetrics>,
    /// Additive-angle margin clamp events observed across the run.
    pub margin_clamp_events: usize,
}

/// Training driver. File outputs are optional; in-memory runs pass `None`.
pub struct Trainer<'a, P: ImageProvider> {
    pub manifest: &'a Manifest,
    pub provider: &'a P,
    pub embedder_config: EmbedderConfig,
    pub config: TrainConfig,
    pub metrics_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
}

impl<'a, P: ImageProvider> Trainer<'a, P> {
    pub fn new(
        manifest: &'a Manifest,
        provider: &'a P,
        embedder_config: EmbedderConfig,
        config: TrainConfig,
    ) -> Self {
        Self {
            manifest,
            provider,
            embedder_config,
            config,
            metrics_path: None,
            checkpoint_path: None,
        }
    }

    pub fn metrics_path(mut self, path: impl Into<PathBuf>) -> Self {
        self.metrics_path = Some(path.into());
        self
    }

    pub fn checkpoint_path(mut self, path: impl Into<PathBuf>) -> Self {
        self.checkpoint_path = Some(path.into());
        self
    }

    /// Train from scratch.
    pub fn run(&self) -> Result<TrainOutcome> {
        self.run_from(None)
    }

    /// Train, optionally continuing from a saved state. Continuation is
    /// bit-identical to an uninterrupted run because every epoch derives
    /// its own random streams from `(seed, epoch)`.
    pub fn run_from(&self, resume: Option<RunState>) -> Result<TrainOutcome> {
        self.config.validate()?;
        self.embedder_config.validate()?;
        if self.manifest.is_empty() {
            return Err(Error::Data("cannot train on an empty manifest".into()));
        }
        let classes = self.manifest.num_classes();
        if classes < 2 {
            return Err(Error::Config(
                "cross entropy over a single class is degenerate; need at least 2 classes".into(),
            ));
        }

        let seed = self.config.seed;
        let resuming = resume.is_some();
        let mut state = match resume {
            Some(state) => state,
            None => {
                let mut ecfg = self.embedder_config.clone();
                ecfg.init_seed = seeds::derive(seed, "embedder-init", 0);
                let embedder = Embedder::new(ecfg)?;
                let norm = if self.config.margin.family.is_angular() {
                    HeadNorm::UnitRows
                } else {
                    HeadNorm::None
                };
                let head = ClassifierHead::new(
                    HeadConfig {
                        classes,
                        embedding_dim: self.embedder_config.embedding_dim,
                        norm,
                    },
                    seeds::derive(seed, "head-init", 0),
                )?;
                let velocities = param_shapes(&embedder, &head)
                    .into_iter()
                    .map(|shape| Tensor::zeros(&shape))
                    .collect();
                RunState {
                    epochs_done: 0,
                    embedder,
                    head,
                    velocities,
                }
            }
        };

        let mut metrics_file = match &self.metrics_path {
            Some(path) => {
                let file = if resuming {
                    fs::OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(path)?
                } else {
                    fs::File::create(path)?
                };
                Some(file)
            }
            None => None,
        };

        let mut metrics = Vec::new();
        let mut clamp_events = 0usize;
        for epoch in state.epochs_done..self.config.epochs {
            let last_good = state.clone();
            match self.run_epoch(&mut state, epoch) {
                Ok((m, clamps)) => {
                    clamp_events += clamps;
                    if let Some(file) = metrics_file.as_mut() {
                        let mut line = serde_json::to_vec(&m)?;
                        line.push(b'\n');
                        file.write_all(&line)?;
                    }
                    metrics.push(m);
                    state.epochs_done = epoch + 1;
                }
                Err(e) => {
                    // Numeric trouble: keep the last completed epoch.
                    if let Some(path) = &self.checkpoint_path {
                        last_good.to_checkpoint(seed).save(path)?;
                    }
                    return Err(match e {
                        Error::NumericGuard(d) | Error::Domain { detail: d, .. } => {
                            Error::Diverged { epoch, detail: d }
                        }
                        Error::Diverged { .. } => e,
                        other => other,
                    });
                }
            }
        }

        if let Some(path) = &self.checkpoint_path {
            state.to_checkpoint(seed).save(path)?;
        }
        Ok(TrainOutcome {
            state,
            metrics,
            margin_clamp_events: clamp_events,
        })
    }

    fn run_epoch(&self, state: &mut RunState, epoch: usize) -> Result<(EpochMetrics, usize)> {
        let cfg = &self.config;
        let lr = cfg.learning_rate(epoch);
        let plan = data::plan_epoch(
            self.manifest,
            cfg.split_fraction,
            seeds::derive(cfg.seed, "plan", epoch as u64),
        )?;
        let batches = data::assemble_batches(
            &plan,
            self.manifest,
            cfg.batch_size_slots,
            seeds::derive(cfg.seed, "shuffle", epoch as u64),
        )?;
        let mut augment_rng = seeds::rng(cfg.seed, "augment", epoch as u64);

        let input_len = self.embedder_config.input_len();
        let mut ce_sum = 0.0;
        let mut sym_sum = 0.0;
        let mut pair_dist_sum = 0.0;
        let mut pair_count = 0usize;
        let mut images_processed = 0usize;
        let mut clamp_events = 0usize;

        for batch in &batches {
            let mut items = Vec::with_capacity(batch.len());
            for &planned in batch {
                let raw = data::load_item(self.manifest, self.provider, planned)?;
                items.push(data::augment(&raw, cfg.flip_prob, &mut augment_rng));
            }

            // Flatten items into rows; a pair's halves occupy adjacent rows.
            let mut rows: Vec<f64> = Vec::new();
            let mut labels: Vec<usize> = Vec::new();
            let mut pairs: Vec<SymPairRows> = Vec::new();
            for item in &items {
                match item {
                    BatchItem::Full { tensor, label, .. } => {
                        check_input_len(tensor.len(), input_len)?;
                        rows.extend_from_slice(tensor);
                        labels.push(*label);
                    }
                    BatchItem::HalfPair {
                        left,
                        right,
                        label,
                        rho,
                    } => {
                        check_input_len(left.len(), input_len)?;
                        check_input_len(right.len(), input_len)?;
                        let left_row = labels.len();
                        rows.extend_from_slice(left);
                        labels.push(*label);
                        rows.extend_from_slice(right);
                        labels.push(*label);
                        pairs.push(SymPairRows {
                            left_row,
                            right_row: left_row + 1,
                            rho: *rho,
                        });
                    }
                }
            }
            let n_rows = labels.len();
            images_processed += n_rows;

            let mut g = Graph::new();
            let x = g.constant(Tensor::matrix(n_rows, input_len, rows)?);
            let evars = state.embedder.insert(&mut g);
            let head_w = state.head.insert(&mut g);
            let out = state.embedder.forward(&mut g, &evars, x)?;
            let emb = out.embeddings;

            let ce_vec = if cfg.margin.family == MarginFamily::Softmax {
                let raw = crate::model::logits(&mut g, emb, &state.head, head_w, false)?;
                loss::per_sample_ce(&mut g, raw, &labels)?
            } else {
                let cosines = crate::model::logits(&mut g, emb, &state.head, head_w, true)?;
                let margined = loss::margin_logits(&mut g, cosines, &labels, &cfg.margin)?;
                loss::per_sample_ce(&mut g, margined, &labels)?
            };
            let ce_total = g.sum(ce_vec);
            let face_batch = g.mul_scalar(ce_total, 1.0 / n_rows as f64);

            let view = if cfg.sym_loss {
                SymBatchView {
                    pairs: pairs.clone(),
                    epoch_split_count: plan.n_split,
                }
            } else {
                SymBatchView::empty()
            };
            let total = if view.pairs.is_empty() {
                face_batch
            } else {
                let sym = loss::symface_loss_with(&mut g, emb, &view, cfg.sym_normalized)?;
                sym_sum += g.value(sym).item();
                loss::total_loss_node(&mut g, face_batch, sym)?
            };

            let total_value = g.value(total).item();
            if !total_value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("batch loss is {total_value}"),
                });
            }

            // Epoch aggregates from forward values.
            for v in g.value(ce_vec).data() {
                ce_sum += v;
            }
            let emb_values = g.value(emb).data().to_vec();
            let d = state.embedder.embedding_dim();
            for p in &pairs {
                let mut dist_sq = 0.0;
                for j in 0..d {
                    let diff = emb_values[p.left_row * d + j] - emb_values[p.right_row * d + j];
                    dist_sq += diff * diff;
                }
                pair_dist_sum += dist_sq.sqrt();
            }
            pair_count += pairs.len();
            clamp_events += g.diagnostics().margin_clamp_events;

            g.backward(total)?;

            if let Some(pre) = out.pre_norm {
                let pre_values = g.value(pre).clone();
                state.embedder.update_running_stats(&pre_values);
            }

            // Apply updates in the fixed parameter order.
            let mut vel_iter = state.velocities.iter_mut();
            for (layer, &(w_id, b_id)) in state
                .embedder
                .layers_mut()
                .iter_mut()
                .zip(evars.layer_ids())
            {
                let vw = vel_iter.next().expect("velocity per tensor");
                if let Some(grad) = g.grad(w_id) {
                    sgd_step(
                        &mut layer.weight,
                        grad,
                        vw,
                        lr,
                        cfg.momentum,
                        cfg.weight_decay,
                    )?;
                }
                if let (Some(bias), Some(b_id)) = (&mut layer.bias, b_id) {
                    let vb = vel_iter.next().expect("velocity per tensor");
                    if let Some(grad) = g.grad(b_id) {
                        sgd_step(bias, grad, vb, lr, cfg.momentum, cfg.weight_decay)?;
                    }
                }
            }
            let vh = vel_iter.next().expect("velocity for head");
            if let Some(grad) = g.grad(head_w) {
                sgd_step(
                    &mut state.head.weight,
                    grad,
                    vh,
                    lr,
                    cfg.momentum,
                    cfg.weight_decay,
                )?;
            }
        }

        if images_processed != plan.n_effective {
            return Err(Error::Contract(format!(
                "epoch {epoch} processed {images_processed} images, plan says {}",
                plan.n_effective
            )));
        }

        let lf = ce_sum / plan.n_effective as f64;
        let lrho = sym_sum;
        Ok((
            EpochMetrics {
                epoch,
                lf,
                lrho,
                ltotal: lf + lrho,
                pair_dist_mean: if pair_count > 0 {
                    pair_dist_sum / pair_count as f64
                } else {
                    0.0
                },
                lr,
            },
            clamp_events,
        ))
    }
}

fn check_input_len(got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::Shape {
            op: "train",
            detail: format!("item tensor has {got} values, expected {expected}"),
        });
    }
    Ok(())
}
