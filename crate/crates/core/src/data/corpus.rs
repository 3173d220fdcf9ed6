use std::fs;
use std::path::Path;

use super::vocab::{is_reserved, TokenId, Vocabulary, UNK};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SentencePair {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl SentencePair {
    /// Both sides non-empty and free of reserved ids other than UNK.
    pub fn new(source: Vec<TokenId>, target: Vec<TokenId>) -> Result<Self> {
        for side in [&source, &target] {
            if side.is_empty() {
                return Err(Error::Empty("sentence pair"));
            }
            if let Some(&bad) = side.iter().find(|&&id| is_reserved(id) && id != UNK) {
                return Err(Error::InvalidArgument(format!(
                    "reserved id {bad} inside a sentence pair"
                )));
            }
        }
        Ok(SentencePair { source, target })
    }
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub pairs: Vec<SentencePair>,
    /// Lines dropped because a side exceeded the positional limit.
    pub skipped: usize,
}

/// Reads `source<TAB>target` lines. Sentences longer than `max_positions`
/// are skipped and counted.
pub fn load_parallel_corpus(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    max_positions: usize,
) -> Result<Corpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut corpus = Corpus::default();
    for (i, line) in text.lines().enumerate() {
        let parse_err = |message: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: message.to_string(),
        };
        let (src, tgt) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("missing TAB separator"))?;
        let (source, target) = (vocab.encode(src), vocab.encode(tgt));
        if source.is_empty() || target.is_empty() {
            return Err(parse_err("empty source or target"));
        }
        if source.len() > max_positions || target.len() > max_positions {
            log::warn!(
                "{}:{}: skipping pair longer than {max_positions} tokens",
                path.display(),
                i + 1
            );
            corpus.skipped += 1;
            continue;
        }
        corpus.pairs.push(SentencePair { source, target });
    }
    Ok(corpus)
}

pub fn save_parallel_corpus(
    path: impl AsRef<Path>,
    pairs: &[SentencePair],
    vocab: &Vocabulary,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for p in pairs {
        out.push_str(&vocab.decode(&p.source));
        out.push('\t');
        out.push_str(&vocab.decode(&p.target));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a one-sentence-per-line file as token id sequences.
pub fn load_sentences(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Vec<Vec<TokenId>>> {
    Ok(read_lines(path)?.iter().map(|l| vocab.encode(l)).collect())
}

pub fn read_lines(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Whitespace tokenization of every line.
pub fn tokenize_lines(lines: &[String]) -> Vec<Vec<String>> {
    lines
        .iter()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect()
}
