//! Training objectives: label-smoothed NLL over masked positions, symmetric
//! KL consistency penalties, the length loss, and their weighted total.

use crate::data::TokenId;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are floored here before taking logarithms.
pub const PROBABILITY_FLOOR: f64 = 1e-9;
const NORMALIZATION_TOLERANCE: f64 = 1e-6;

/// Sign applied to the consistency terms in the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsistencySign {
    /// Penalize divergence between views.
    Positive,
    /// Reward divergence; kept only for comparison runs.
    Negative,
}

impl ConsistencySign {
    pub fn factor(self) -> f64 {
        match self {
            ConsistencySign::Positive => 1.0,
            ConsistencySign::Negative => -1.0,
        }
    }
}

/// The per-update loss terms and their combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub nll1: f32,
    pub nll2: f32,
    pub nll3: f32,
    pub kld1: f32,
    pub kld2: f32,
    pub len_loss: f32,
    pub total: f32,
    pub gamma: f32,
    pub beta: f32,
    pub k_used: usize,
}

impl LossBreakdown {
    /// `(nll1 + nll2 + nll3)/3 + sign·γ·(kld1 + kld2)/3 + len_loss`, in `f64`.
    pub fn recompose(&self, sign: ConsistencySign) -> f64 {
        total_from_parts(
            [self.nll1, self.nll2, self.nll3].map(f64::from),
            [self.kld1, self.kld2].map(f64::from),
            self.len_loss as f64,
            self.gamma as f64,
            sign,
        )
    }
}

pub fn total_from_parts(
    nll: [f64; 3],
    kld: [f64; 2],
    len_loss: f64,
    gamma: f64,
    sign: ConsistencySign,
) -> f64 {
    (nll[0] + nll[1] + nll[2]) / 3.0 + sign.factor() * gamma * (kld[0] + kld[1]) / 3.0 + len_loss
}

/// Builds a [`LossBreakdown`] from already computed scalar terms.
pub fn total_loss(
    nll: [f32; 3],
    kld: [f32; 2],
    len_loss: f32,
    gamma: f32,
    beta: f32,
    k_used: usize,
    sign: ConsistencySign,
) -> LossBreakdown {
    let total = total_from_parts(
        nll.map(f64::from),
        kld.map(f64::from),
        len_loss as f64,
        gamma as f64,
        sign,
    ) as f32;
    LossBreakdown {
        nll1: nll[0],
        nll2: nll[1],
        nll3: nll[2],
        kld1: kld[0],
        kld2: kld[1],
        len_loss,
        total,
        gamma,
        beta,
        k_used,
    }
}

/// Differentiable version of the total; `terms` is
/// `[nll1, nll2, nll3, kld1, kld2, len_loss]`.
pub fn total_loss_tensor(terms: &[Tensor; 6], gamma: f64, sign: ConsistencySign) -> Result<Tensor> {
    let c = sign.factor() * gamma / 3.0;
    Tensor::linear_combination(terms, &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, c, c, 1.0])
}

/// `Σᵢ wᵢ·[(1−ε)·(−log pᵢ[yᵢ]) + ε·mean_v(−log pᵢ[v])]` over rows of
/// `log_probs`.
pub fn weighted_nll(
    log_probs: &Tensor,
    targets: &[TokenId],
    row_weights: &[f32],
    label_smoothing: f32,
) -> Result<Tensor> {
    let (rows, vocab) = match log_probs.shape() {
        &[r, v] => (r, v),
        other => {
            return Err(Error::ShapeMismatch {
                op: "nll",
                lhs: other.to_vec(),
                rhs: vec![targets.len()],
            })
        }
    };
    if targets.len() != rows || row_weights.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "nll",
            lhs: log_probs.shape().to_vec(),
            rhs: vec![targets.len(), row_weights.len()],
        });
    }
    if !(0.0..=1.0).contains(&label_smoothing) {
        return Err(Error::InvalidArgument(format!(
            "label smoothing {label_smoothing} outside [0, 1]"
        )));
    }
    let spread = label_smoothing / vocab as f32;
    let mut weights = vec![0.0f32; rows * vocab];
    for (r, (&t, &w)) in targets.iter().zip(row_weights).enumerate() {
        if t as usize >= vocab {
            return Err(Error::IndexOutOfRange {
                op: "nll",
                index: t as usize,
                bound: vocab,
            });
        }
        let row = &mut weights[r * vocab..(r + 1) * vocab];
        row.fill(w * spread);
        row[t as usize] += w * (1.0 - label_smoothing);
    }
    let weights = Tensor::from_vec(vec![rows, vocab], weights)?;
    Ok(log_probs.mul(&weights)?.sum().scale(-1.0))
}

/// Label-smoothed NLL of one sentence, averaged over its masked positions.
/// `log_probs` holds one row per target position.
pub fn nll_masked(
    log_probs: &Tensor,
    ground_truth: &[TokenId],
    masked: &[usize],
    label_smoothing: f32,
) -> Result<Tensor> {
    if masked.is_empty() {
        return Err(Error::Empty("masked positions"));
    }
    let rows = log_probs.gather_rows(masked)?;
    let targets: Vec<TokenId> = masked
        .iter()
        .map(|&p| {
            ground_truth.get(p).copied().ok_or(Error::IndexOutOfRange {
                op: "nll_masked",
                index: p,
                bound: ground_truth.len(),
            })
        })
        .collect::<Result<_>>()?;
    let w = vec![1.0 / masked.len() as f32; masked.len()];
    weighted_nll(&rows, &targets, &w, label_smoothing)
}

fn check_distribution(p: &[f64]) -> Result<()> {
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > NORMALIZATION_TOLERANCE || p.iter().any(|&v| v < 0.0 || !v.is_finite())
    {
        return Err(Error::InvalidArgument(format!(
            "not a probability distribution (sums to {total})"
        )));
    }
    Ok(())
}

/// `½[KL(p‖q) + KL(q‖p)]` with probabilities floored at 1e-9 inside logs.
pub fn symmetric_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch {
            op: "symmetric_kl",
            lhs: vec![p.len()],
            rhs: vec![q.len()],
        });
    }
    check_distribution(p)?;
    check_distribution(q)?;
    let log = |v: f64| v.max(PROBABILITY_FLOOR).ln();
    Ok(0.5
        * p.iter()
            .zip(q)
            .map(|(&a, &b)| (a - b) * (log(a) - log(b)))
            .sum::<f64>())
}

/// Consistency penalties for one sentence, given per-masked-position
/// distributions under the two mixed inputs and the ground-truth input.
/// Returns `(kld1, kld2)` with both sums divided by the number of positions.
pub fn consistency_losses(
    mixed1: &[Vec<f64>],
    mixed2: &[Vec<f64>],
    ground_truth: &[Vec<f64>],
) -> Result<(f64, f64)> {
    let n = mixed1.len();
    if mixed2.len() != n || ground_truth.len() != n {
        return Err(Error::ShapeMismatch {
            op: "consistency_losses",
            lhs: vec![n],
            rhs: vec![mixed2.len(), ground_truth.len()],
        });
    }
    if n == 0 {
        return Err(Error::Empty("masked positions"));
    }
    let mut kld1 = 0.0;
    let mut kld2 = 0.0;
    for t in 0..n {
        kld1 += symmetric_kl(&mixed1[t], &mixed2[t])?;
        kld2 += symmetric_kl(&mixed1[t], &ground_truth[t])?;
        kld2 += symmetric_kl(&mixed2[t], &ground_truth[t])?;
    }
    Ok((kld1 / n as f64, kld2 / n as f64))
}

/// Softmax probabilities and floored log-probabilities of a logit matrix.
pub struct Distribution {
    pub probs: Tensor,
    pub floored_log_probs: Tensor,
}

impl Distribution {
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let axis = logits.rank().checked_sub(1).ok_or(Error::InvalidAxis {
            op: "distribution",
            axis: 0,
            rank: 0,
        })?;
        Ok(Distribution {
            probs: logits.softmax(axis)?,
            floored_log_probs: logits
                .log_softmax(axis)?
                .clamp_min(PROBABILITY_FLOOR.ln() as f32),
        })
    }
}

/// `Σᵢ wᵢ·½Σ_v (pᵢᵥ − qᵢᵥ)(log pᵢᵥ − log qᵢᵥ)`, differentiable in both.
pub fn weighted_symmetric_kl(
    a: &Distribution,
    b: &Distribution,
    row_weights: &[f32],
) -> Result<Tensor> {
    let shape = a.probs.shape().to_vec();
    if shape.len() != 2 || b.probs.shape() != shape.as_slice() || row_weights.len() != shape[0] {
        return Err(Error::ShapeMismatch {
            op: "symmetric_kl",
            lhs: shape,
            rhs: b.probs.shape().to_vec(),
        });
    }
    let vocab = shape[1];
    let weights: Vec<f32> = row_weights
        .iter()
        .flat_map(|&w| std::iter::repeat_n(0.5 * w, vocab))
        .collect();
    let weights = Tensor::from_vec(shape, weights)?;
    a.probs
        .sub(&b.probs)?
        .mul(&a.floored_log_probs.sub(&b.floored_log_probs)?)?
        .mul(&weights)
        .map(|t| t.sum())
}

/// Mean over the batch of `−log P(true length)`.
pub fn length_loss(length_logits: &Tensor, true_lengths: &[usize]) -> Result<Tensor> {
    let (batch, bins) = match length_logits.shape() {
        &[b, n] => (b, n),
        &[n] => (1, n),
        other => {
            return Err(Error::ShapeMismatch {
                op: "length_loss",
                lhs: other.to_vec(),
                rhs: vec![true_lengths.len()],
            })
        }
    };
    if true_lengths.len() != batch {
        return Err(Error::ShapeMismatch {
            op: "length_loss",
            lhs: length_logits.shape().to_vec(),
            rhs: vec![true_lengths.len()],
        });
    }
    let logits = length_logits.reshape(&[batch, bins])?;
    let targets: Vec<TokenId> = true_lengths
        .iter()
        .map(|&l| {
            if l >= bins {
                Err(Error::IndexOutOfRange {
                    op: "length_loss",
                    index: l,
                    bound: bins,
                })
            } else {
                Ok(l as TokenId)
            }
        })
        .collect::<Result<_>>()?;
    let w = vec![1.0 / batch as f32; batch];
    weighted_nll(&logits.log_softmax(1)?, &targets, &w, 0.0)
}
