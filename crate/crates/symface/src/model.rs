//! The embedding network, classifier head, and checkpoint format.
//!
//! The embedder is deliberately small: flatten, a stack of affine+relu
//! hidden layers, and a final affine projection to the embedding space.
//! The interesting behavior under test lives in the losses, not the
//! backbone, so the backbone only has to be trainable and deterministic.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, TensorId};
use crate::error::{Error, Result};
use crate::seeds;

/// Shape and initialization of the embedding network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    /// Hidden affine+relu layer widths.
    pub hidden: Vec<usize>,
    /// Output embedding dimension `d`.
    pub embedding_dim: usize,
    /// Batch-standardize the embedding layer (batch statistics during
    /// training, running statistics at inference). Gives every embedding
    /// dimension a fixed variance budget, as the reference embedding
    /// heads do.
    pub embed_norm: bool,
    /// Seed for weight initialization.
    pub init_seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            input_height: 32,
            input_width: 32,
            input_channels: 1,
            hidden: vec![48, 24],
            embedding_dim: 16,
            embed_norm: true,
            init_seed: 0,
        }
    }
}

/// Epsilon inside the standardization square root.
pub const EMBED_NORM_EPS: f64 = 1e-5;
/// Decay of the running statistics: `running = m * running + (1-m) * batch`.
pub const RUNNING_STATS_MOMENTUM: f64 = 0.9;

/// Inference-time statistics of the embedding layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningStats {
    fn fresh(dim: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[dim]),
            var: Tensor::from_vec(&[dim], vec![1.0; dim]).expect("shape matches"),
        }
    }
}

impl EmbedderConfig {
    pub fn input_len(&self) -> usize {
        self.input_height * self.input_width * self.input_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim < 2 {
            return Err(Error::Config(format!(
                "embedding_dim must be at least 2, got {}",
                self.embedding_dim
            )));
        }
        if self.input_len() == 0 {
            return Err(Error::Config("input dimensions must be non-zero".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be non-zero".into()));
        }
        Ok(())
    }
}

/// One affine layer: `y = x W + b` with `W` stored input-major.
///
/// The embedder's output projection carries no bias: a learnable constant
/// offset lets the network satisfy pair-distance objectives by collapsing
/// every embedding onto the offset, and embedding heads do not need one.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

/// The face embedding network `E(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedder {
    config: EmbedderConfig,
    layers: Vec<DenseLayer>,
    norm_stats: Option<RunningStats>,
}

/// Graph handles produced by one embedder forward pass.
pub struct EmbedOutput {
    /// The embeddings downstream losses consume.
    pub embeddings: TensorId,
    /// Pre-standardization activations; feed these to
    /// [`Embedder::update_running_stats`] after each training batch.
    pub pre_norm: Option<TensorId>,
}

/// Ids of one embedder's parameters inside a graph.
pub struct EmbedderVars {
    layer_ids: Vec<(TensorId, Option<TensorId>)>,
}

impl EmbedderVars {
    /// `(weight, bias)` ids per layer, in forward order.
    pub fn layer_ids(&self) -> &[(TensorId, Option<TensorId>)] {
        &self.layer_ids
    }
}

fn glorot_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::matrix(rows, cols, data).expect("size computed from shape")
}

impl Embedder {
    /// Seeded random initialization.
    pub fn new(config: EmbedderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeds::rng(config.init_seed, "embedder-init", 0);
        let mut layers = Vec::new();
        let mut fan_in = config.input_len();
        let widths: Vec<usize> = config
            .hidden
            .iter()
            .chain([config.embedding_dim].iter())
            .copied()
            .collect();
        for (i, &width) in widths.iter().enumerate() {
            let is_output = i + 1 == widths.len();
            layers.push(DenseLayer {
                weight: glorot_uniform(&mut rng, fan_in, width),
                bias: (!is_output).then(|| Tensor::zeros(&[width])),
            });
            fan_in = width;
        }
        let norm_stats = config
            .embed_norm
            .then(|| RunningStats::fresh(config.embedding_dim));
        Ok(Self {
            config,
            layers,
            norm_stats,
        })
    }

    /// All-zero weights; embeds everything to the zero vector.
    pub fn zeroed(config: EmbedderConfig) -> Result<Self> {
        let mut model = Self::new(config)?;
        for layer in &mut model.layers {
            layer.weight.data_mut().fill(0.0);
            if let Some(bias) = &mut layer.bias {
                bias.data_mut().fill(0.0);
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    /// Register the weights as differentiable leaves on `g`.
    pub fn insert(&self, g: &mut Graph) -> EmbedderVars {
        let layer_ids = self
            .layers
            .iter()
            .map(|l| {
                (
                    g.param(l.weight.clone()),
                    l.bias.as_ref().map(|b| g.param(b.clone())),
                )
            })
            .collect();
        EmbedderVars { layer_ids }
    }

    /// Forward pass over a batch matrix (`n x input_len`). Hidden layers
    /// use relu; the output layer is a bias-free projection followed by
    /// batch standardization when enabled.
    pub fn forward(&self, g: &mut Graph, vars: &EmbedderVars, x: TensorId) -> Result<EmbedOutput> {
        let rows = g.value(x).shape().first().copied().unwrap_or(0);
        if g.value(x).shape() != [rows, self.config.input_len()] {
            return Err(Error::Shape {
                op: "embed",
                detail: format!(
                    "batch shape {:?} does not match input length {}",
                    g.value(x).shape(),
                    self.config.input_len()
                ),
            });
        }
        let h = self.forward_raw(g, vars, x)?;
        let Some(stats) = &self.norm_stats else {
            return Ok(EmbedOutput {
                embeddings: h,
                pre_norm: None,
            });
        };
        // A single row has no batch statistics; fall back to the running
        // ones (matching inference).
        let embeddings = if rows >= 2 {
            g.standardize(h, EMBED_NORM_EPS)?
        } else {
            self.apply_running_stats(g, h, stats, rows)?
        };
        Ok(EmbedOutput {
            embeddings,
            pre_norm: Some(h),
        })
    }

    /// Layers only, no standardization.
    fn forward_raw(&self, g: &mut Graph, vars: &EmbedderVars, x: TensorId) -> Result<TensorId> {
        let mut h = x;
        let last = vars.layer_ids.len() - 1;
        for (i, &(w, b)) in vars.layer_ids.iter().enumerate() {
            let mut pre = g.matmul(h, w)?;
            if let Some(b) = b {
                pre = g.add_row(pre, b)?;
            }
            h = if i < last { g.relu(pre) } else { pre };
        }
        Ok(h)
    }

    fn apply_running_stats(
        &self,
        g: &mut Graph,
        h: TensorId,
        stats: &RunningStats,
        rows: usize,
    ) -> Result<TensorId> {
        let d = self.config.embedding_dim;
        let neg_mean: Vec<f64> = stats.mean.data().iter().map(|m| -m).collect();
        let inv_std: Vec<f64> = stats
            .var
            .data()
            .iter()
            .map(|v| 1.0 / (v + EMBED_NORM_EPS).sqrt())
            .collect();
        let neg_mean = g.constant(Tensor::vector(neg_mean));
        let shifted = g.add_row(h, neg_mean)?;
        let inv = g.constant(Tensor::matrix(
            rows,
            d,
            inv_std.iter().cycle().take(rows * d).copied().collect(),
        )?);
        g.mul(shifted, inv)
    }

    /// Fold one training batch's pre-standardization activations into the
    /// running statistics. Batches with fewer than 2 rows are skipped.
    pub fn update_running_stats(&mut self, pre_norm: &Tensor) {
        let Some(stats) = &mut self.norm_stats else {
            return;
        };
        let shape = pre_norm.shape();
        let (n, d) = (shape[0], shape[1]);
        if n < 2 {
            return;
        }
        let v = pre_norm.data();
        for j in 0..d {
            let mut mean = 0.0;
            for i in 0..n {
                mean += v[i * d + j];
            }
            mean /= n as f64;
            let mut var = 0.0;
            for i in 0..n {
                let diff = v[i * d + j] - mean;
                var += diff * diff;
            }
            var /= n as f64;
            let m = RUNNING_STATS_MOMENTUM;
            stats.mean.data_mut()[j] = m * stats.mean.data()[j] + (1.0 - m) * mean;
            stats.var.data_mut()[j] = m * stats.var.data()[j] + (1.0 - m) * var;
        }
    }

    pub fn running_stats(&self) -> Option<&RunningStats> {
        self.norm_stats.as_ref()
    }

    /// Inference path: embed flattened, normalized images without touching
    /// gradients. Standardization (when enabled) uses the running
    /// statistics regardless of how many images are passed.
    pub fn embed_images(&self, images: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let n = images.len();
        let input_len = self.config.input_len();
        let mut data = Vec::with_capacity(n * input_len);
        for img in images {
            if img.len() != input_len {
                return Err(Error::Shape {
                    op: "embed",
                    detail: format!("image has {} values, expected {input_len}", img.len()),
                });
            }
            data.extend_from_slice(img);
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(n, input_len, data)?);
        let vars = EmbedderVars {
            layer_ids: self
                .layers
                .iter()
                .map(|l| {
                    (
                        g.constant(l.weight.clone()),
                        l.bias.as_ref().map(|b| g.constant(b.clone())),
                    )
                })
                .collect(),
        };
        let emb = self.forward_raw(&mut g, &vars, x)?;
        let d = self.config.embedding_dim;
        let out = g.value(emb).data();
        let mut rows: Vec<Vec<f64>> = (0..n).map(|i| out[i * d..(i + 1) * d].to_vec()).collect();
        if let Some(stats) = &self.norm_stats {
            for row in &mut rows {
                for (j, value) in row.iter_mut().enumerate() {
                    *value = (*value - stats.mean.data()[j])
                        / (stats.var.data()[j] + EMBED_NORM_EPS).sqrt();
                }
            }
        }
        Ok(rows)
    }
}

/// Whether class weights are renormalized to unit L2 norm in the forward
/// pass (required for angular logits).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadNorm {
    None,
    UnitRows,
}

/// Classifier head configuration: one weight row per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub classes: usize,
    pub embedding_dim: usize,
    pub norm: HeadNorm,
}

/// Classifier head: `classes x d` weight matrix, no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    config: HeadConfig,
    pub weight: Tensor,
}

impl ClassifierHead {
    pub fn new(config: HeadConfig, init_seed: u64) -> Result<Self> {
        if config.classes < 2 {
            return Err(Error::Config(format!(
                "a classifier needs at least 2 classes, got {}",
                config.classes
            )));
        }
        let mut rng = seeds::rng(init_seed, "head-init", 0);
        let weight = glorot_uniform(&mut rng, config.classes, config.embedding_dim);
        Ok(Self { config, weight })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn insert(&self, g: &mut Graph) -> TensorId {
        g.param(self.weight.clone())
    }

    pub fn insert_frozen(&self, g: &mut Graph) -> TensorId {
        g.constant(self.weight.clone())
    }
}

/// Class scores for a batch of embeddings.
///
/// Angular mode returns `cos(theta_j) = <z_hat, w_hat_j>` in `[-1, 1]`;
/// plain mode returns raw `w_j . z`. Angular mode requires the head to be
/// configured with unit-row normalization.
pub fn logits(
    g: &mut Graph,
    embeddings: TensorId,
    head: &ClassifierHead,
    head_weight: TensorId,
    angular: bool,
) -> Result<TensorId> {
    if g.value(embeddings).shape().get(1) != Some(&head.config.embedding_dim) {
        return Err(Error::Shape {
            op: "logits",
            detail: format!(
                "embeddings {:?} do not match head dim {}",
                g.value(embeddings).shape(),
                head.config.embedding_dim
            ),
        });
    }
    if angular {
        if head.config.norm != HeadNorm::UnitRows {
            return Err(Error::Config(
                "angular logits require a unit-row-normalized head".into(),
            ));
        }
        let z = g.normalize_rows(embeddings)?;
        let w = g.normalize_rows(head_weight)?;
        g.matmul_nt(z, w)
    } else {
        g.matmul_nt(embeddings, head_weight)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SYMFACE\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    embedder: EmbedderConfig,
    head: HeadConfig,
    epoch: usize,
    seed: u64,
    tensors: Vec<TensorMeta>,
}

/// A versioned binary snapshot: magic bytes, a JSON header describing the
/// configs and tensor layout, then raw little-endian doubles.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub embedder_config: EmbedderConfig,
    pub head_config: HeadConfig,
    /// Completed epochs at save time.
    pub epoch: usize,
    /// Root seed of the run, for stream re-derivation on resume.
    pub seed: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Snapshot model weights only (no optimizer state).
    pub fn from_model(embedder: &Embedder, head: &ClassifierHead, epoch: usize, seed: u64) -> Self {
        let mut tensors = Vec::new();
        for (i, layer) in embedder.layers.iter().enumerate() {
            tensors.push((format!("embedder.{i}.weight"), layer.weight.clone()));
            if let Some(bias) = &layer.bias {
                tensors.push((format!("embedder.{i}.bias"), bias.clone()));
            }
        }
        if let Some(stats) = &embedder.norm_stats {
            tensors.push(("embed_norm.mean".to_string(), stats.mean.clone()));
            tensors.push(("embed_norm.var".to_string(), stats.var.clone()));
        }
        tensors.push(("head.weight".to_string(), head.weight.clone()));
        Self {
            embedder_config: embedder.config.clone(),
            head_config: head.config.clone(),
            epoch,
            seed,
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Rebuild the embedder and head from the stored tensors.
    pub fn restore_model(&self) -> Result<(Embedder, ClassifierHead)> {
        let mut embedder = Embedder::zeroed(self.embedder_config.clone())?;
        for (i, layer) in embedder.layers.iter_mut().enumerate() {
            let w = self
                .tensor(&format!("embedder.{i}.weight"))
                .ok_or_else(|| Error::Data(format!("checkpoint missing embedder.{i}.weight")))?;
            if w.shape() != layer.weight.shape() {
                return Err(Error::Data(format!("checkpoint layer {i} has wrong shape")));
            }
            layer.weight = w.clone();
            if let Some(bias) = &mut layer.bias {
                let b = self
                    .tensor(&format!("embedder.{i}.bias"))
                    .ok_or_else(|| Error::Data(format!("checkpoint missing embedder.{i}.bias")))?;
                if b.shape() != bias.shape() {
                    return Err(Error::Data(format!("checkpoint layer {i} has wrong shape")));
                }
                *bias = b.clone();
            }
        }
        if embedder.norm_stats.is_some() {
            let mean = self
                .tensor("embed_norm.mean")
                .ok_or_else(|| Error::Data("checkpoint missing embed_norm.mean".into()))?;
            let var = self
                .tensor("embed_norm.var")
                .ok_or_else(|| Error::Data("checkpoint missing embed_norm.var".into()))?;
            embedder.norm_stats = Some(RunningStats {
                mean: mean.clone(),
                var: var.clone(),
            });
        }
        let w = self
            .tensor("head.weight")
            .ok_or_else(|| Error::Data("checkpoint missing head.weight".into()))?;
        let head = ClassifierHead {
            config: self.head_config.clone(),
            weight: w.clone(),
        };
        Ok((embedder, head))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            embedder: self.embedder_config.clone(),
            head: self.head_config.clone(),
            epoch: self.epoch,
            seed: self.seed,
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorMeta {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header_json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        for (_, tensor) in &self.tensors {
            for v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Data(format!("malformed checkpoint: {msg}"));
        let mut cur = bytes;
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut version = [0u8; 4];
        cur.read_exact(&mut version).map_err(|_| bad("truncated"))?;
        if u32::from_le_bytes(version) != CHECKPOINT_VERSION {
            return Err(bad("unsupported version"));
        }
        let mut len = [0u8; 8];
        cur.read_exact(&mut len).map_err(|_| bad("truncated"))?;
        let header_len = u64::from_le_bytes(len) as usize;
        if cur.len() < header_len {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&cur[..header_len])?;
        cur = &cur[header_len..];

        let mut tensors = Vec::with_capacity(header.tensors.len());
        for meta in &header.tensors {
            let count: usize = meta.shape.iter().product();
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                let mut buf = [0u8; 8];
                cur.read_exact(&mut buf)
                    .map_err(|_| bad("truncated tensor data"))?;
                data.push(f64::from_le_bytes(buf));
            }
            tensors.push((meta.name.clone(), Tensor::from_vec(&meta.shape, data)?));
        }
        if !cur.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            embedder_config: header.embedder,
            head_config: header.head,
            epoch: header.epoch,
            seed: header.seed,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
