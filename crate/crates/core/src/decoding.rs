//! Mask-predict inference: one parallel pass over an all-`[MASK]` target,
//! then repeated re-masking of the least confident positions, with
//! noisy-parallel selection over several predicted lengths.

use crate::data::{TokenId, LENGTH, MASK, PAD};
use crate::error::{Error, Result};
use crate::model::{length_candidates, EncoderOutput, Mode, NatModel};
use crate::tensor::no_grad;

/// Number of positions to re-mask after iteration `t` of `total`:
/// `⌊n·(total − t)/total⌋`, defined for `1 ≤ t < total`.
pub fn masking_schedule(n: usize, t: usize, total: usize) -> Result<usize> {
    if t == 0 || t >= total {
        return Err(Error::InvalidArgument(format!(
            "masking schedule needs 1 <= t < T, got t={t}, T={total}"
        )));
    }
    Ok(n * (total - t) / total)
}

/// The `k` least confident positions in ascending position order. Equal
/// confidences favour the lower position.
pub fn select_lowest_confidence(confidences: &[f32], k: usize) -> Result<Vec<usize>> {
    if k > confidences.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot select {k} of {} positions",
            confidences.len()
        )));
    }
    let mut order: Vec<usize> = (0..confidences.len()).collect();
    order.sort_by(|&a, &b| confidences[a].total_cmp(&confidences[b]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

/// Tokens the decoder may emit.
fn emittable(id: usize) -> bool {
    !matches!(id as TokenId, PAD | MASK | LENGTH)
}

/// Most probable emittable token of a logit row and its probability under
/// the full softmax.
pub(crate) fn best_token(logits: &[f32]) -> (TokenId, f32) {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let total: f64 = logits.iter().map(|&l| ((l - max) as f64).exp()).sum();
    let mut best = (0usize, f32::NEG_INFINITY);
    for (i, &l) in logits.iter().enumerate() {
        if emittable(i) && l > best.1 {
            best = (i, l);
        }
    }
    let p = ((best.1 - max) as f64).exp() / total;
    (best.0 as TokenId, p as f32)
}

pub(crate) fn probability(logits: &[f32], token: TokenId) -> f32 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let total: f64 = logits.iter().map(|&l| ((l - max) as f64).exp()).sum();
    (((logits[token as usize] - max) as f64).exp() / total) as f32
}

/// Snapshot of one sequence during refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub tokens: Vec<TokenId>,
    /// Probability of each current token under the latest decode.
    pub confidences: Vec<f32>,
    /// Iterations completed so far.
    pub iteration: usize,
    pub total: usize,
}

/// What one re-masking iteration did to a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    pub iteration: usize,
    pub remasked: Vec<usize>,
    pub before: Vec<TokenId>,
    pub after: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub state: DecoderState,
    /// True when refinement ended because an iteration changed nothing.
    pub converged: bool,
    pub trace: Vec<IterationTrace>,
}

impl Refinement {
    pub fn tokens(&self) -> &[TokenId] {
        &self.state.tokens
    }

    /// Mean log-probability of the final tokens.
    pub fn score(&self) -> f64 {
        let c = &self.state.confidences;
        c.iter()
            .map(|&p| (p.max(f32::MIN_POSITIVE) as f64).ln())
            .sum::<f64>()
            / c.len() as f64
    }
}

/// Runs `iterations` rounds of mask-predict for each requested length.
/// `encoder_rows[i]` selects the encoded source for `lengths[i]`.
pub fn refine(
    model: &NatModel,
    encoder: &EncoderOutput,
    encoder_rows: &[usize],
    lengths: &[usize],
    iterations: usize,
    keep_trace: bool,
) -> Result<Vec<Refinement>> {
    if iterations == 0 {
        return Err(Error::InvalidArgument(
            "at least one iteration is required".into(),
        ));
    }
    if encoder_rows.len() != lengths.len() {
        return Err(Error::ShapeMismatch {
            op: "refine",
            lhs: vec![encoder_rows.len()],
            rhs: vec![lengths.len()],
        });
    }
    if let Some(&n) = lengths
        .iter()
        .find(|&&n| n == 0 || n > model.config.max_positions)
    {
        return Err(Error::InvalidArgument(format!(
            "target length {n} outside 1..={}",
            model.config.max_positions
        )));
    }
    no_grad(|| {
        let masked: Vec<Vec<TokenId>> = lengths.iter().map(|&n| vec![MASK; n]).collect();
        let views: Vec<&[TokenId]> = masked.iter().map(Vec::as_slice).collect();
        let out = model.decode(&views, encoder, Some(encoder_rows), &mut Mode::Eval)?;
        let vocab = model.config.vocab_size;
        let logits = out.logits.data();
        let mut results: Vec<Refinement> = lengths
            .iter()
            .enumerate()
            .map(|(r, &n)| {
                let (tokens, confidences) = (0..n)
                    .map(|t| best_token(&logits[out.index(r, t) * vocab..][..vocab]))
                    .unzip();
                Refinement {
                    state: DecoderState {
                        tokens,
                        confidences,
                        iteration: 1,
                        total: iterations,
                    },
                    converged: false,
                    trace: Vec::new(),
                }
            })
            .collect();

        let mut active: Vec<usize> = (0..lengths.len()).collect();
        for t in 2..=iterations {
            let mut inputs = Vec::new();
            let mut rows = Vec::new();
            let mut remasked = Vec::new();
            let mut stepping = Vec::new();
            for &i in &active {
                let state = &results[i].state;
                let k = masking_schedule(state.tokens.len(), t - 1, iterations)?;
                if k == 0 {
                    continue;
                }
                let positions = select_lowest_confidence(&state.confidences, k)?;
                let mut input = state.tokens.clone();
                for &p in &positions {
                    input[p] = MASK;
                }
                inputs.push(input);
                rows.push(encoder_rows[i]);
                remasked.push(positions);
                stepping.push(i);
            }
            if stepping.is_empty() {
                break;
            }
            let views: Vec<&[TokenId]> = inputs.iter().map(Vec::as_slice).collect();
            let out = model.decode(&views, encoder, Some(&rows), &mut Mode::Eval)?;
            let logits = out.logits.data();
            let mut still_active = Vec::new();
            for (r, (&i, positions)) in stepping.iter().zip(&remasked).enumerate() {
                let result = &mut results[i];
                let before = result.state.tokens.clone();
                let mut pos_iter = positions.iter().peekable();
                for p in 0..before.len() {
                    let row = &logits[out.index(r, p) * vocab..][..vocab];
                    if pos_iter.peek() == Some(&&p) {
                        pos_iter.next();
                        let (tok, conf) = best_token(row);
                        result.state.tokens[p] = tok;
                        result.state.confidences[p] = conf;
                    } else {
                        result.state.confidences[p] = probability(row, result.state.tokens[p]);
                    }
                }
                result.state.iteration = t;
                if keep_trace {
                    result.trace.push(IterationTrace {
                        iteration: t,
                        remasked: positions.clone(),
                        before: before.clone(),
                        after: result.state.tokens.clone(),
                    });
                }
                if result.state.tokens == before {
                    result.converged = true;
                } else {
                    still_active.push(i);
                }
            }
            active = still_active;
        }
        Ok(results)
    })
}

/// Best hypothesis for one source after noisy parallel decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Translation {
    pub tokens: Vec<TokenId>,
    pub score: f64,
    /// Every candidate as (length, score, iterations run), in candidate order.
    pub candidates: Vec<(usize, f64, usize)>,
}

/// Translates a batch of sources with `iterations` refinement rounds over
/// the `candidates` most likely lengths of each.
pub fn mask_predict(
    model: &NatModel,
    sources: &[&[TokenId]],
    iterations: usize,
    candidates: usize,
) -> Result<Vec<Translation>> {
    no_grad(|| {
        let encoder = model.encode(sources, &mut Mode::Eval)?;
        let mut rows = Vec::new();
        let mut lengths = Vec::new();
        for b in 0..sources.len() {
            for len in length_candidates(encoder.length_logits_row(b), candidates)? {
                if len > model.config.max_positions {
                    return Err(Error::InvalidArgument(format!(
                        "candidate length {len} exceeds max_positions {}",
                        model.config.max_positions
                    )));
                }
                rows.push(b);
                lengths.push(len);
            }
        }
        let refined = refine(model, &encoder, &rows, &lengths, iterations, false)?;
        Ok(refined
            .chunks(candidates)
            .map(|group| {
                let best = group
                    .iter()
                    .enumerate()
                    .min_by(|(ia, a), (ib, b)| {
                        b.score()
                            .total_cmp(&a.score())
                            .then(a.tokens().len().cmp(&b.tokens().len()))
                            .then(ia.cmp(ib))
                    })
                    .map(|(_, r)| r)
                    .expect("at least one candidate");
                Translation {
                    tokens: best.tokens().to_vec(),
                    score: best.score(),
                    candidates: group
                        .iter()
                        .map(|r| (r.tokens().len(), r.score(), r.state.iteration))
                        .collect(),
                }
            })
            .collect())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(masking_schedule(10, 1, 10).unwrap(), 9);
        assert_eq!(masking_schedule(10, 9, 10).unwrap(), 1);
        assert_eq!(masking_schedule(7, 2, 4).unwrap(), 3);
        assert!(masking_schedule(7, 4, 4).is_err());
        assert!(masking_schedule(7, 0, 4).is_err());
    }

    #[test]
    fn lowest_confidence_with_ties() {
        assert_eq!(
            select_lowest_confidence(&[0.9, 0.1, 0.5], 1).unwrap(),
            vec![1]
        );
        assert_eq!(
            select_lowest_confidence(&[0.5, 0.5, 0.9], 1).unwrap(),
            vec![0]
        );
        assert_eq!(
            select_lowest_confidence(&[0.3, 0.2, 0.1], 3).unwrap(),
            vec![0, 1, 2]
        );
        assert!(select_lowest_confidence(&[0.3], 2).is_err());
    }

    #[test]
    fn best_token_skips_special_ids() {
        let logits = [0.0, 9.0, 8.0, 1.0, 2.0];
        let (tok, p) = best_token(&logits);
        assert_eq!(tok, 4);
        assert!(p > 0.0 && p < 0.01);
        assert!((probability(&logits, 1) - 0.7306).abs() < 1e-3);
    }
}
