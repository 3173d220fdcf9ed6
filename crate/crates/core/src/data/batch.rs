use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::corpus::SentencePair;
use super::vocab::{TokenId, PAD};
use crate::error::{Error, Result};

/// Sentence pairs padded into two row-major id matrices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub source_width: usize,
    pub target_width: usize,
    pub source_lengths: Vec<usize>,
    pub target_lengths: Vec<usize>,
}

impl Batch {
    pub fn from_pairs(pairs: &[&SentencePair]) -> Self {
        let source_width = pairs.iter().map(|p| p.source.len()).max().unwrap_or(0);
        let target_width = pairs.iter().map(|p| p.target.len()).max().unwrap_or(0);
        let mut source = vec![PAD; pairs.len() * source_width];
        let mut target = vec![PAD; pairs.len() * target_width];
        for (i, p) in pairs.iter().enumerate() {
            source[i * source_width..i * source_width + p.source.len()].copy_from_slice(&p.source);
            target[i * target_width..i * target_width + p.target.len()].copy_from_slice(&p.target);
        }
        Batch {
            source,
            target,
            source_width,
            target_width,
            source_lengths: pairs.iter().map(|p| p.source.len()).collect(),
            target_lengths: pairs.iter().map(|p| p.target.len()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.source_lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_lengths.is_empty()
    }

    /// Unpadded source of row `i`.
    pub fn source_row(&self, i: usize) -> &[TokenId] {
        let start = i * self.source_width;
        &self.source[start..start + self.source_lengths[i]]
    }

    pub fn target_row(&self, i: usize) -> &[TokenId] {
        let start = i * self.target_width;
        &self.target[start..start + self.target_lengths[i]]
    }

    pub fn target_tokens(&self) -> usize {
        self.target_lengths.iter().sum()
    }

    pub fn to_pairs(&self) -> Vec<SentencePair> {
        (0..self.len())
            .map(|i| SentencePair {
                source: self.source_row(i).to_vec(),
                target: self.target_row(i).to_vec(),
            })
            .collect()
    }
}

/// Sorts pairs by target length and packs them greedily so that no batch
/// holds more than `token_budget` target tokens, then shuffles batch order.
pub fn batch_by_tokens(
    pairs: &[SentencePair],
    token_budget: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if let Some(p) = pairs.iter().find(|p| p.target.len() > token_budget) {
        return Err(Error::InvalidArgument(format!(
            "target of {} tokens exceeds the batch budget of {token_budget}",
            p.target.len()
        )));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by_key(|&i| (pairs[i].target.len(), i));

    let mut batches = Vec::new();
    let mut current: Vec<&SentencePair> = Vec::new();
    let mut tokens = 0;
    for i in order {
        let len = pairs[i].target.len();
        if tokens + len > token_budget && !current.is_empty() {
            batches.push(Batch::from_pairs(&current));
            current.clear();
            tokens = 0;
        }
        current.push(&pairs[i]);
        tokens += len;
    }
    if !current.is_empty() {
        batches.push(Batch::from_pairs(&current));
    }
    batches.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(batches)
}
