//! Small generated translation tasks with known structure.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::corpus::SentencePair;
use super::vocab::{TokenId, NUM_RESERVED};
use crate::error::{Error, Result};

/// Seed of the token mappings used by the lexicon tasks. Kept apart from the
/// sampling seed so that train and validation sets generated with different
/// seeds share one mapping.
pub const DEFAULT_LEXICON_SEED: u64 = 0x1e71c0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    Lexicon,
    MultimodalLexicon,
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "lexicon" => Ok(TaskKind::Lexicon),
            "multimodal_lexicon" => Ok(TaskKind::MultimodalLexicon),
            other => Err(Error::InvalidArgument(format!(
                "unknown synthetic task {other:?}"
            ))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Lexicon => "lexicon",
            TaskKind::MultimodalLexicon => "multimodal_lexicon",
        })
    }
}

/// Two token mappings over the content ids `4..vocab_size`. The second
/// differs from the first at every token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    primary: Vec<TokenId>,
    alternate: Vec<TokenId>,
}

impl Lexicon {
    pub fn new(vocab_size: usize, seed: u64) -> Result<Self> {
        if vocab_size < NUM_RESERVED + 2 {
            return Err(Error::InvalidArgument(format!(
                "lexicon tasks need at least two content tokens (vocab_size {vocab_size})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let content: Vec<TokenId> = (NUM_RESERVED as TokenId..vocab_size as TokenId).collect();
        let mut primary = content.clone();
        primary.shuffle(&mut rng);
        // alternate(x) = primary(successor(x)) on a random cycle through all tokens.
        let mut cycle = content.clone();
        cycle.shuffle(&mut rng);
        let mut alternate = vec![0; content.len()];
        for (i, &x) in cycle.iter().enumerate() {
            let next = cycle[(i + 1) % cycle.len()];
            alternate[x as usize - NUM_RESERVED] = primary[next as usize - NUM_RESERVED];
        }
        Ok(Lexicon { primary, alternate })
    }

    pub fn primary(&self, token: TokenId) -> TokenId {
        self.primary[token as usize - NUM_RESERVED]
    }

    pub fn alternate(&self, token: TokenId) -> TokenId {
        self.alternate[token as usize - NUM_RESERVED]
    }
}

/// Generates `count` pairs with source lengths uniform in `1..=max_len` over
/// a vocabulary of `vocab_size` ids (reserved ids included).
pub fn generate_synthetic_task(
    kind: TaskKind,
    vocab_size: usize,
    count: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<SentencePair>> {
    generate_with_lexicon(kind, vocab_size, count, max_len, seed, DEFAULT_LEXICON_SEED)
}

pub fn generate_with_lexicon(
    kind: TaskKind,
    vocab_size: usize,
    count: usize,
    max_len: usize,
    seed: u64,
    lexicon_seed: u64,
) -> Result<Vec<SentencePair>> {
    if vocab_size <= NUM_RESERVED {
        return Err(Error::InvalidArgument(format!(
            "vocab_size {vocab_size} leaves no content tokens"
        )));
    }
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be at least 1".into()));
    }
    let lexicon = match kind {
        TaskKind::Lexicon | TaskKind::MultimodalLexicon => {
            Some(Lexicon::new(vocab_size, lexicon_seed)?)
        }
        _ => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let len = rng.gen_range(1..=max_len);
        let source: Vec<TokenId> = (0..len)
            .map(|_| rng.gen_range(NUM_RESERVED as TokenId..vocab_size as TokenId))
            .collect();
        let target = match (kind, &lexicon) {
            (TaskKind::Copy, _) => source.clone(),
            (TaskKind::Reverse, _) => source.iter().rev().copied().collect(),
            (TaskKind::Lexicon, Some(lex)) => source.iter().map(|&t| lex.primary(t)).collect(),
            (TaskKind::MultimodalLexicon, Some(lex)) => {
                if rng.gen_bool(0.5) {
                    source.iter().map(|&t| lex.primary(t)).collect()
                } else {
                    source.iter().map(|&t| lex.alternate(t)).collect()
                }
            }
            _ => unreachable!("lexicon built for lexicon tasks"),
        };
        pairs.push(SentencePair { source, target });
    }
    Ok(pairs)
}
