//! Masked targets, model predictions from multi-step refinement, and the
//! mixed decoder inputs built from them.

use rand::seq::index;
use rand::Rng;

use crate::data::{TokenId, MASK};
use crate::decoding::refine;
use crate::error::{Error, Result};
use crate::model::{Mode, NatModel};
use crate::tensor::no_grad;

/// A target split into masked and observed positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedTarget {
    /// Ground truth with `[MASK]` at every masked position.
    pub tokens: Vec<TokenId>,
    /// Masked positions, ascending.
    pub masked: Vec<usize>,
    /// Observed positions, ascending.
    pub observed: Vec<usize>,
    pub ground_truth: Vec<TokenId>,
}

impl MaskedTarget {
    /// Masks exactly `positions` of `target`.
    pub fn from_positions(target: &[TokenId], positions: &[usize]) -> Result<Self> {
        let n = target.len();
        let mut is_masked = vec![false; n];
        for &p in positions {
            if p >= n {
                return Err(Error::IndexOutOfRange {
                    op: "mask",
                    index: p,
                    bound: n,
                });
            }
            is_masked[p] = true;
        }
        if !is_masked.iter().any(|&m| m) {
            return Err(Error::Empty("masked positions"));
        }
        let masked = (0..n).filter(|&i| is_masked[i]).collect();
        let observed = (0..n).filter(|&i| !is_masked[i]).collect();
        let tokens = target
            .iter()
            .zip(&is_masked)
            .map(|(&t, &m)| if m { MASK } else { t })
            .collect();
        Ok(MaskedTarget {
            tokens,
            masked,
            observed,
            ground_truth: target.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.ground_truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ground_truth.is_empty()
    }
}

/// Draws the number of masked positions uniformly from `1..=n`, then that
/// many distinct positions uniformly.
pub fn sample_mask<R: Rng + ?Sized>(target: &[TokenId], rng: &mut R) -> Result<MaskedTarget> {
    let n = target.len();
    if n == 0 {
        return Err(Error::Empty("target"));
    }
    let count = rng.gen_range(1..=n);
    let positions = index::sample(rng, n, count).into_vec();
    MaskedTarget::from_positions(target, &positions)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Masked,
    GroundTruth,
    Predicted,
}

/// Decoder input whose observed positions hold either the ground truth or
/// the model's own prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixedSequence {
    pub tokens: Vec<TokenId>,
    pub provenance: Vec<Provenance>,
    pub masked: Vec<usize>,
}

impl MixedSequence {
    pub fn predicted_count(&self) -> usize {
        self.provenance
            .iter()
            .filter(|&&p| p == Provenance::Predicted)
            .count()
    }
}

/// For each observed position draws `s ~ U(0, 1]` and takes the predicted
/// token when `s ≤ beta`. Masked positions stay masked.
pub fn substitute<R: Rng + ?Sized>(
    masked: &MaskedTarget,
    predicted: &[TokenId],
    beta: f64,
    rng: &mut R,
) -> Result<MixedSequence> {
    if predicted.len() != masked.len() {
        return Err(Error::ShapeMismatch {
            op: "substitute",
            lhs: vec![masked.len()],
            rhs: vec![predicted.len()],
        });
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!(
            "beta {beta} outside [0, 1]"
        )));
    }
    let mut tokens = masked.tokens.clone();
    let mut provenance = vec![Provenance::Masked; masked.len()];
    for &p in &masked.observed {
        let s = 1.0 - rng.gen::<f64>();
        if s <= beta {
            tokens[p] = predicted[p];
            provenance[p] = Provenance::Predicted;
        } else {
            provenance[p] = Provenance::GroundTruth;
        }
    }
    Ok(MixedSequence {
        tokens,
        provenance,
        masked: masked.masked.clone(),
    })
}

/// Mask-predict output for a batch of sources at known target lengths,
/// starting from fully masked sequences and running `iterations` rounds
/// without recording gradients.
pub fn refine_predict_batch(
    model: &NatModel,
    sources: &[&[TokenId]],
    target_lengths: &[usize],
    iterations: usize,
) -> Result<Vec<Vec<TokenId>>> {
    if let Some(&n) = target_lengths
        .iter()
        .find(|&&n| n > model.config.max_positions)
    {
        return Err(Error::InvalidArgument(format!(
            "target length {n} exceeds max_positions {}",
            model.config.max_positions
        )));
    }
    no_grad(|| {
        let encoder = model.encode(sources, &mut Mode::Eval)?;
        let rows: Vec<usize> = (0..sources.len()).collect();
        Ok(
            refine(model, &encoder, &rows, target_lengths, iterations, false)?
                .into_iter()
                .map(|r| r.state.tokens)
                .collect(),
        )
    })
}

/// Draws `k` uniformly from `1..=max_iterations` and predicts the target
/// with `k` refinement rounds. Returns the prediction and `k`.
pub fn refine_predict<R: Rng + ?Sized>(
    model: &NatModel,
    source: &[TokenId],
    target_length: usize,
    max_iterations: usize,
    rng: &mut R,
) -> Result<(Vec<TokenId>, usize)> {
    if max_iterations == 0 {
        return Err(Error::InvalidArgument(
            "max_iterations must be at least 1".into(),
        ));
    }
    let k = rng.gen_range(1..=max_iterations);
    let mut out = refine_predict_batch(model, &[source], &[target_length], k)?;
    Ok((out.pop().expect("one prediction"), k))
}
