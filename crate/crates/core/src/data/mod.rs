//! Vocabulary, corpus files, synthetic tasks and token-budget batching.

mod batch;
mod corpus;
mod synthetic;
mod vocab;

pub use batch::{batch_by_tokens, Batch};
pub use corpus::{
    load_parallel_corpus, load_sentences, read_lines, save_parallel_corpus, tokenize_lines, Corpus,
    SentencePair,
};
pub use synthetic::{
    generate_synthetic_task, generate_with_lexicon, Lexicon, TaskKind, DEFAULT_LEXICON_SEED,
};
pub use vocab::{is_reserved, TokenId, Vocabulary, LENGTH, MASK, NUM_RESERVED, PAD, RESERVED, UNK};
