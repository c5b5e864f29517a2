//! Classification and symmetry losses.
//!
//! The classification side is the margin-softmax family: plain softmax
//! cross-entropy over raw logits, normalized angular softmax `s*cos(theta)`,
//! and the three margin variants (cosine offset, multiplicative angle,
//! additive angle). The symmetry side penalizes the squared L2 distance
//! between the embeddings of the two hemi faces of each split sample,
//! weighted by the sample's frontness score rho.
//!
//! All functions are stateless and build onto a caller-supplied
//! [`Graph`], so gradients flow through everything they touch.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, MarginKind, Tensor, TensorId};
use crate::error::{Error, Result};

/// Which classification loss shapes the logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MarginFamily {
    /// Plain softmax cross-entropy on raw `W . z` logits.
    #[serde(rename = "softmax")]
    Softmax,
    /// Normalized angular softmax: `s * cos(theta)`, no margin.
    #[serde(rename = "norm_softmax")]
    NormSoftmax,
    /// Cosine-space margin on the target class: `s * (cos(theta) - m)`.
    #[serde(rename = "cosface")]
    CosFace,
    /// Multiplicative angular margin: `s * cos(m * theta)`.
    #[serde(rename = "sphereface")]
    SphereFace,
    /// Additive angular margin: `s * cos(theta + m)`.
    #[serde(rename = "arcface")]
    ArcFace,
    /// Recognized for config compatibility but not implemented.
    #[serde(rename = "adaface")]
    AdaFace,
}

impl MarginFamily {
    pub fn is_angular(self) -> bool {
        !matches!(self, MarginFamily::Softmax)
    }
}

/// Margin-softmax configuration: family, scale `s`, margin `m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarginConfig {
    pub family: MarginFamily,
    pub scale: f64,
    pub margin: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self {
            family: MarginFamily::ArcFace,
            scale: 8.0,
            margin: 0.2,
        }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        if self.family == MarginFamily::AdaFace {
            return Err(Error::Config(
                "margin family 'adaface' is recognized but not implemented; \
                 choose one of softmax | norm_softmax | cosface | sphereface | arcface"
                    .into(),
            ));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::Config(format!(
                "margin scale must be positive and finite, got {}",
                self.scale
            )));
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(Error::Config(format!(
                "margin must be non-negative and finite, got {}",
                self.margin
            )));
        }
        if self.family == MarginFamily::ArcFace && self.margin > std::f64::consts::PI {
            return Err(Error::Config(format!(
                "additive angular margin {} exceeds pi",
                self.margin
            )));
        }
        Ok(())
    }

    /// The target-class transform this config selects. A margin of zero
    /// disables the transform for every family, so all margin variants
    /// collapse to the normalized softmax logits.
    fn kind(&self) -> Result<MarginKind> {
        match self.family {
            MarginFamily::Softmax => Err(Error::Config(
                "plain softmax does not operate on cosines; use raw logits".into(),
            )),
            MarginFamily::AdaFace => Err(Error::Config(
                "margin family 'adaface' is not implemented".into(),
            )),
            MarginFamily::NormSoftmax => Ok(MarginKind::None),
            MarginFamily::CosFace => Ok(MarginKind::CosineOffset(self.margin)),
            MarginFamily::SphereFace => Ok(MarginKind::AngleScale(self.margin)),
            MarginFamily::ArcFace => Ok(MarginKind::AngleOffset(self.margin)),
        }
    }
}

/// Mean softmax cross-entropy: `mean_i(-log softmax(logits_i)[y_i])`.
pub fn ce_softmax(g: &mut Graph, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
    let per_sample = g.softmax_cross_entropy(logits, labels)?;
    g.mean(per_sample)
}

/// Per-sample softmax cross-entropy terms, one per row.
pub fn per_sample_ce(g: &mut Graph, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
    g.softmax_cross_entropy(logits, labels)
}

/// Transform a cosine matrix into margin logits for the configured family.
pub fn margin_logits(
    g: &mut Graph,
    cosines: TensorId,
    labels: &[usize],
    cfg: &MarginConfig,
) -> Result<TensorId> {
    let kind = cfg.kind()?;
    g.target_margin(cosines, labels, cfg.scale, kind)
}

/// One split sample inside a batch: row indices of its two hemi-face
/// embeddings and the sample's frontness score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymPairRows {
    pub left_row: usize,
    pub right_row: usize,
    pub rho: f64,
}

/// The split samples visible to one loss evaluation, plus the epoch-level
/// split count that fixes the denominator.
#[derive(Debug, Clone, PartialEq)]
pub struct SymBatchView {
    pub pairs: Vec<SymPairRows>,
    /// Number of samples split this epoch (`round(p * N_sym)`). The
    /// denominator is `2 *` this count even when the current batch holds
    /// only some of the pairs, so batch contributions sum to the exact
    /// epoch-level loss.
    pub epoch_split_count: usize,
}

impl SymBatchView {
    pub fn empty() -> Self {
        Self {
            pairs: Vec::new(),
            epoch_split_count: 0,
        }
    }
}

/// Rho-weighted mean squared distance between hemi-face embedding pairs:
///
/// `L_rho = (1 / (2 * split_count)) * sum_i rho_i * ||E_left_i - E_right_i||^2`
///
/// Embeddings enter the distance exactly as the network emits them.
/// Returns a zero scalar when the view holds no pairs.
pub fn symface_loss(g: &mut Graph, embeddings: TensorId, view: &SymBatchView) -> Result<TensorId> {
    symface_loss_with(g, embeddings, view, false)
}

/// [`symface_loss`] with an optional unit-normalization of the embeddings
/// before the distance, for ablations where the raw-distance form is too
/// eager to shrink embedding norms.
pub fn symface_loss_with(
    g: &mut Graph,
    embeddings: TensorId,
    view: &SymBatchView,
    normalized: bool,
) -> Result<TensorId> {
    if view.pairs.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    if view.epoch_split_count == 0 {
        return Err(Error::Contract(
            "symmetry pairs present but the epoch split count is zero".into(),
        ));
    }
    if let Some(bad) = view.pairs.iter().find(|p| p.rho.is_nan() || p.rho <= 0.0) {
        return Err(Error::Contract(format!(
            "split sample has non-positive rho {}; only qualified images may be split",
            bad.rho
        )));
    }

    let left_rows: Vec<usize> = view.pairs.iter().map(|p| p.left_row).collect();
    let right_rows: Vec<usize> = view.pairs.iter().map(|p| p.right_row).collect();
    let rhos: Vec<f64> = view.pairs.iter().map(|p| p.rho).collect();

    let source = if normalized {
        g.normalize_rows(embeddings)?
    } else {
        embeddings
    };
    let left = g.gather_rows(source, &left_rows)?;
    let right = g.gather_rows(source, &right_rows)?;
    let diff = g.sub(left, right)?;
    let sq = g.mul(diff, diff)?;
    let per_pair = g.row_sum(sq)?;
    let weights = g.constant(Tensor::vector(rhos));
    let weighted = g.mul(per_pair, weights)?;
    let total = g.sum(weighted);
    Ok(g.mul_scalar(total, 1.0 / (2.0 * view.epoch_split_count as f64)))
}

/// Classification loss over everything processed in an epoch, full and half
/// images alike: the summed per-term cross entropy divided by the effective
/// sample count `N' = N + round(p * N_sym)`.
///
/// `logits` must hold one row per processed image (a split sample
/// contributes two rows with the same label).
pub fn generic_face_loss(
    g: &mut Graph,
    logits: TensorId,
    labels: &[usize],
    n_effective: usize,
) -> Result<TensorId> {
    if n_effective == 0 {
        return Err(Error::Contract("effective sample count is zero".into()));
    }
    let terms = g.softmax_cross_entropy(logits, labels)?;
    let total = g.sum(terms);
    Ok(g.mul_scalar(total, 1.0 / n_effective as f64))
}

/// Combine the classification and symmetry losses with unit weights.
pub fn total_loss(face: f64, sym: f64) -> Result<f64> {
    if !face.is_finite() {
        return Err(Error::Contract(format!(
            "classification loss is not finite: {face}"
        )));
    }
    if !sym.is_finite() {
        return Err(Error::Contract(format!(
            "symmetry loss is not finite: {sym}"
        )));
    }
    Ok(face + sym)
}

/// Graph-side [`total_loss`]: adds the two scalar nodes after checking both
/// forward values are finite.
pub fn total_loss_node(g: &mut Graph, face: TensorId, sym: TensorId) -> Result<TensorId> {
    total_loss(g.value(face).item(), g.value(sym).item())?;
    g.add(face, sym)
}
