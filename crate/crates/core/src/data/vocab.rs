use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const MASK: TokenId = 1;
pub const LENGTH: TokenId = 2;
pub const UNK: TokenId = 3;

/// Surface forms of the reserved ids, in id order.
pub const RESERVED: [&str; 4] = ["<pad>", "<mask>", "<length>", "<unk>"];
pub const NUM_RESERVED: usize = RESERVED.len();

pub fn is_reserved(id: TokenId) -> bool {
    (id as usize) < NUM_RESERVED
}

/// Shared source/target token table. Ids `0..4` are reserved; every other
/// id maps to exactly one token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary from non-reserved tokens in id order. Duplicates
    /// and reserved surface forms are rejected.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index = HashMap::new();
        for tok in tokens {
            let tok = tok.into();
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!(
                    "invalid vocabulary token {tok:?}"
                )));
            }
            if RESERVED.contains(&tok.as_str()) || index.contains_key(&tok) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate vocabulary token {tok:?}"
                )));
            }
            index.insert(tok.clone(), all.len() as TokenId);
            all.push(tok);
        }
        Ok(Vocabulary { tokens: all, index })
    }

    /// Counts whitespace-separated tokens over every line of every file and
    /// orders them by descending frequency, then lexicographically.
    pub fn build<P: AsRef<Path>>(paths: &[P]) -> Result<Self> {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for path in paths {
            let path = path.as_ref();
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for tok in text.split_whitespace() {
                if !RESERVED.contains(&tok) {
                    *counts.entry(tok.to_string()).or_default() += 1;
                }
            }
        }
        if counts.is_empty() {
            return Err(Error::Empty("build_vocab"));
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t))
    }

    /// Vocabulary for synthetic tasks: `vocab_size` ids in total, content
    /// tokens named `t4`, `t5`, ...
    pub fn synthetic(vocab_size: usize) -> Result<Self> {
        if vocab_size <= NUM_RESERVED {
            return Err(Error::InvalidArgument(format!(
                "synthetic vocabulary needs more than {NUM_RESERVED} ids, got {vocab_size}"
            )));
        }
        Self::from_tokens((NUM_RESERVED..vocab_size).map(|i| format!("t{i}")))
    }

    /// Total id count, reserved ids included.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == NUM_RESERVED
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Space-joined surface form; reserved ids are dropped.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            if is_reserved(id) {
                continue;
            }
            if let Some(tok) = self.token(id) {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
        out
    }

    /// One non-reserved token per line; line `i` (from 0) holds id `i + 4`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        for tok in &self.tokens[NUM_RESERVED..] {
            writeln!(buf, "{tok}").expect("in-memory write");
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines()).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })
    }
}
