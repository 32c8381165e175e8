//! Linear softmax classifier trained on a distilled subset with cross
//! entropy plus a per-class boundary contrastive loss.
//!
//! For each class `c` present in a batch, the positives' probabilities for
//! `c` are sorted in descending order and the one at rank `⌈B·ρ⌉` becomes the
//! positive boundary `b_p`; the negative boundary is `b_n = b_p − τ`. The
//! class loss is
//!
//! ```text
//! L_c = Σ_pos |min(p_i − b_p, 0)| + Σ_neg |max(p_j − b_n + τ, 0)|
//! ```
//!
//! and the batch loss is `mean CE + Σ_c L_c`. Boundaries are treated as
//! constants when differentiating.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::centrality_selector::DistilledSelection;
use crate::embedding_io::EmbeddingSet;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"IDSTMODL";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Which offset the negative hinge uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeHinge {
    /// `max(p_j − b_n + τ, 0)`.
    #[default]
    AsPrinted,
    /// `max(p_j − b_n, 0)`.
    AgainstBn,
}

impl FromStr for NegativeHinge {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as-printed" | "as_printed" => Ok(NegativeHinge::AsPrinted),
            "against-bn" | "against_bn" => Ok(NegativeHinge::AgainstBn),
            other => Err(Error::InvalidArgument(format!(
                "unknown negative hinge `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub rho: f64,
    pub tau: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub negative_hinge: NegativeHinge,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            rho: 0.75,
            tau: 0.1,
            learning_rate: 0.05,
            epochs: 100,
            batch_size: 64,
            seed: 0,
            negative_hinge: NegativeHinge::AsPrinted,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "rho must be in (0, 1], got {}",
                self.rho
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning_rate must be ≥ 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "epochs and batch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// `C × d` weights (row-major) plus a bias per class.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub num_classes: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Classifier {
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        Classifier {
            num_classes,
            dim,
            weights: vec![0.0; num_classes * dim],
            bias: vec![0.0; num_classes],
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.num_classes)
            .map(|c| {
                let row = &self.weights[c * self.dim..(c + 1) * self.dim];
                self.bias[c] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    /// Class probabilities for every item of `set`.
    pub fn predict_proba(&self, set: &EmbeddingSet) -> Vec<Vec<f64>> {
        let logits: Vec<Vec<f64>> = set.items.iter().map(|it| self.logits(&it.vector)).collect();
        softmax_probabilities(&logits)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(18 + 8 * (self.weights.len() + self.bias.len()));
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in self.weights.iter().chain(&self.bias) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 18 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("missing IDSTMODL header".into()));
        }
        let version = u16::from_le_bytes([bytes[8], bytes[9]]);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let c = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(bytes[14..18].try_into().unwrap()) as usize;
        let count = c * d + c;
        if bytes.len() != 18 + 8 * count {
            return Err(Error::Checkpoint(format!(
                "expected {} bytes of parameters, found {}",
                8 * count,
                bytes.len() - 18
            )));
        }
        let values: Vec<f64> = bytes[18..]
            .chunks_exact(8)
            .map(|ch| f64::from_le_bytes(ch.try_into().unwrap()))
            .collect();
        Ok(Classifier {
            num_classes: c,
            dim: d,
            weights: values[..c * d].to_vec(),
            bias: values[c * d..].to_vec(),
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_probabilities(logits: &[Vec<f64>]) -> Vec<Vec<f64>> {
    logits
        .iter()
        .map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / total).collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Boundaries {
    pub positive: f64,
    pub negative: f64,
}

/// 1-indexed rank `⌈B·ρ⌉`, clamped to `[1, B]`.
pub fn boundary_rank(positives: usize, rho: f64) -> usize {
    // The small slack keeps products such as 10 × 0.3 from rounding up.
    let rank = (positives as f64 * rho - 1e-9).ceil() as usize;
    rank.clamp(1, positives)
}

/// Boundaries for class `class` from its probability column, or `None` when
/// the batch holds no positive of that class.
pub fn class_boundaries(
    column: &[f64],
    labels: &[usize],
    class: usize,
    rho: f64,
    tau: f64,
) -> Option<Boundaries> {
    let mut positives: Vec<f64> = column
        .iter()
        .zip(labels)
        .filter(|&(_, &l)| l == class)
        .map(|(&p, _)| p)
        .collect();
    if positives.is_empty() {
        return None;
    }
    positives.sort_by(|a, b| b.total_cmp(a));
    let b_p = positives[boundary_rank(positives.len(), rho) - 1];
    Some(Boundaries {
        positive: b_p,
        negative: b_p - tau,
    })
}

fn negative_hinge_arg(p: f64, b: Boundaries, tau: f64, hinge: NegativeHinge) -> f64 {
    match hinge {
        NegativeHinge::AsPrinted => p - b.negative + tau,
        NegativeHinge::AgainstBn => p - b.negative,
    }
}

pub fn contrastive_class_loss(
    column: &[f64],
    labels: &[usize],
    class: usize,
    boundaries: Boundaries,
    tau: f64,
    hinge: NegativeHinge,
) -> f64 {
    column
        .iter()
        .zip(labels)
        .map(|(&p, &l)| {
            if l == class {
                (p - boundaries.positive).min(0.0).abs()
            } else {
                negative_hinge_arg(p, boundaries, tau, hinge).max(0.0).abs()
            }
        })
        .sum()
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: f64,
    pub cross_entropy: f64,
    pub contrastive: f64,
    /// Per-class boundaries used for the batch.
    pub boundaries: Vec<Option<Boundaries>>,
    /// `∂L/∂logits`, batch × C.
    pub grad: Vec<Vec<f64>>,
}

/// Loss and logit gradient for one batch, boundaries computed from the batch.
pub fn total_loss(
    logits: &[Vec<f64>],
    labels: &[usize],
    config: &LossConfig,
) -> Result<LossOutput> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} logit rows for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let probs = softmax_probabilities(logits);
    let classes = logits[0].len();
    let boundaries = (0..classes)
        .map(|c| {
            let column: Vec<f64> = probs.iter().map(|r| r[c]).collect();
            class_boundaries(&column, labels, c, config.rho, config.tau)
        })
        .collect::<Vec<_>>();
    loss_with_boundaries(&probs, labels, &boundaries, config)
}

/// Same as [`total_loss`] with the boundaries supplied by the caller.
pub fn loss_with_boundaries(
    probs: &[Vec<f64>],
    labels: &[usize],
    boundaries: &[Option<Boundaries>],
    config: &LossConfig,
) -> Result<LossOutput> {
    let batch = probs.len();
    let classes = boundaries.len();
    for &l in labels {
        if l >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {l} ≥ {classes} classes"
            )));
        }
    }
    let scale = 1.0 / batch as f64;
    let mut cross_entropy = 0.0;
    let mut contrastive = 0.0;
    let mut grad = vec![vec![0.0; classes]; batch];

    for (r, (row, &label)) in probs.iter().zip(labels).enumerate() {
        cross_entropy -= row[label].ln() * scale;

        // ∂L_b/∂p for this row.
        let mut dp = vec![0.0; classes];
        for (c, b) in boundaries.iter().enumerate() {
            let Some(b) = *b else { continue };
            if label == c {
                let gap = row[c] - b.positive;
                if gap < 0.0 {
                    contrastive -= gap;
                    dp[c] -= 1.0;
                }
            } else {
                let arg = negative_hinge_arg(row[c], b, config.tau, config.negative_hinge);
                if arg > 0.0 {
                    contrastive += arg;
                    dp[c] += 1.0;
                }
            }
        }
        let dot: f64 = dp.iter().zip(row).map(|(g, p)| g * p).sum();
        for k in 0..classes {
            let onehot = if k == label { 1.0 } else { 0.0 };
            grad[r][k] = (row[k] - onehot) * scale + row[k] * (dp[k] - dot);
        }
    }

    Ok(LossOutput {
        total: cross_entropy + contrastive,
        cross_entropy,
        contrastive,
        boundaries: boundaries.to_vec(),
        grad,
    })
}

/// Mini-batch SGD over the selected items.
pub fn train(
    set: &EmbeddingSet,
    selection: &DistilledSelection,
    config: &LossConfig,
) -> Result<Classifier> {
    train_on_ids(set, &selection.ids(), config)
}

pub fn train_on_ids(set: &EmbeddingSet, ids: &[usize], config: &LossConfig) -> Result<Classifier> {
    config.validate()?;
    if ids.is_empty() {
        return Err(Error::InvalidArgument("empty selection".into()));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id >= set.len()) {
        return Err(Error::InvalidArgument(format!(
            "selected id {bad} outside a set of {} items",
            set.len()
        )));
    }
    let (c, d) = (set.num_classes, set.dim);
    let mut model = Classifier::zeros(c, d);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order = ids.to_vec();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for (batch_index, batch) in order.chunks(config.batch_size).enumerate() {
            let logits: Vec<Vec<f64>> = batch
                .iter()
                .map(|&id| model.logits(set.vector(id)))
                .collect();
            let labels: Vec<usize> = batch.iter().map(|&id| set.label(id)).collect();
            let out = total_loss(&logits, &labels, config)?;
            if !out.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_index,
                });
            }
            for (&id, g) in batch.iter().zip(&out.grad) {
                let x = set.vector(id);
                for k in 0..c {
                    let step = config.learning_rate * g[k];
                    if step == 0.0 {
                        continue;
                    }
                    model.bias[k] -= step;
                    for (w, v) in model.weights[k * d..(k + 1) * d].iter_mut().zip(x) {
                        *w -= step * v;
                    }
                }
            }
            if model
                .weights
                .iter()
                .chain(&model.bias)
                .any(|v| !v.is_finite())
            {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_index,
                });
            }
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_closed_forms() {
        let p = softmax_probabilities(&[vec![0.0; 4]]);
        assert!(p[0].iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let p = softmax_probabilities(&[vec![2f64.ln(), 0.0]]);
        assert!((p[0][0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p[0][1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn boundary_rank_rule() {
        let column = [0.9, 0.7, 0.5, 0.3];
        let labels = [0, 0, 0, 0];
        let b = class_boundaries(&column, &labels, 0, 0.5, 0.1).unwrap();
        assert_eq!(b.positive, 0.7);
        assert_eq!(b.negative, 0.7 - 0.1);
        let b = class_boundaries(&column, &labels, 0, 1.0, 0.1).unwrap();
        assert_eq!(b.positive, 0.3);
        assert!(class_boundaries(&column, &labels, 1, 0.5, 0.1).is_none());
        assert_eq!(boundary_rank(10, 0.3), 3);
        assert_eq!(boundary_rank(3, 0.01), 1);
    }

    #[test]
    fn class_loss_examples() {
        let b = Boundaries {
            positive: 0.7,
            negative: 0.6,
        };
        assert_eq!(
            contrastive_class_loss(
                &[0.8, 0.2],
                &[0, 1],
                0,
                Boundaries {
                    positive: 0.7,
                    negative: 0.5
                },
                0.1,
                NegativeHinge::AsPrinted
            ),
            0.0
        );
        let single = contrastive_class_loss(&[0.4], &[0], 0, b, 0.1, NegativeHinge::AsPrinted);
        assert!((single - 0.3).abs() < 1e-15);

        let column = [0.9, 0.5, 0.6, 0.1];
        let labels = [0, 0, 1, 1];
        let b = class_boundaries(&column, &labels, 0, 1.0, 0.1).unwrap();
        let loss = contrastive_class_loss(&column, &labels, 0, b, 0.1, NegativeHinge::AsPrinted);
        assert!((loss - 0.3).abs() < 1e-12);
        let loss = contrastive_class_loss(&column, &labels, 0, b, 0.1, NegativeHinge::AgainstBn);
        assert!((loss - 0.2).abs() < 1e-12);
    }

    #[test]
    fn rho_one_zeroes_positive_term() {
        let logits = vec![
            vec![1.0, 0.2],
            vec![-0.3, 0.9],
            vec![0.4, 0.4],
            vec![2.0, -1.0],
        ];
        let labels = [0, 1, 0, 0];
        let cfg = LossConfig {
            rho: 1.0,
            ..Default::default()
        };
        let out = total_loss(&logits, &labels, &cfg).unwrap();
        let probs = softmax_probabilities(&logits);
        for (r, &l) in labels.iter().enumerate() {
            let b = out.boundaries[l].unwrap();
            assert!(probs[r][l] >= b.positive);
        }
    }

    #[test]
    fn perfect_separation_costs_almost_nothing() {
        let logits = vec![
            vec![60.0, 0.0, 0.0],
            vec![0.0, 60.0, 0.0],
            vec![0.0, 0.0, 60.0],
        ];
        let cfg = LossConfig {
            tau: 0.01,
            negative_hinge: NegativeHinge::AgainstBn,
            ..Default::default()
        };
        let out = total_loss(&logits, &[0, 1, 2], &cfg).unwrap();
        assert!(out.total < 1e-20, "{}", out.total);
    }

    #[test]
    fn zero_learning_rate_keeps_zero_model() {
        let set = EmbeddingSet::from_records(2, 2, vec![(0, vec![1.0, 0.0]), (1, vec![0.0, 1.0])])
            .unwrap();
        let cfg = LossConfig {
            learning_rate: 0.0,
            epochs: 3,
            ..Default::default()
        };
        let model = train_on_ids(&set, &[0, 1], &cfg).unwrap();
        assert_eq!(model, Classifier::zeros(2, 2));
    }

    #[test]
    fn empty_selection_and_divergence() {
        let set =
            EmbeddingSet::from_records(1, 2, vec![(0, vec![1e300]), (1, vec![-1e300])]).unwrap();
        assert!(train_on_ids(&set, &[], &LossConfig::default()).is_err());
        let cfg = LossConfig {
            learning_rate: 1e10,
            epochs: 5,
            ..Default::default()
        };
        assert!(matches!(
            train_on_ids(&set, &[0, 1], &cfg),
            Err(Error::Diverged { epoch: 0, .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = Classifier {
            num_classes: 2,
            dim: 3,
            weights: vec![0.5, -1.0, 2.0, 0.0, 1e-300, -7.25],
            bias: vec![0.125, -0.5],
        };
        let bytes = model.encode();
        assert_eq!(&bytes[..8], b"IDSTMODL");
        assert_eq!(bytes.len(), 18 + 8 * 8);
        assert_eq!(Classifier::decode(&bytes).unwrap(), model);
        assert!(Classifier::decode(&bytes[..20]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig {
            rho: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            tau: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            batch_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert_eq!(
            "against-bn".parse::<NegativeHinge>().unwrap(),
            NegativeHinge::AgainstBn
        );
    }
}
