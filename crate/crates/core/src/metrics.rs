//! Corpus BLEU-4, repetition rate, and a probe comparing the model's
//! masked-token distributions under mixed and ground-truth inputs.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;

use rand::seq::index;
use rand::Rng;

use crate::data::{SentencePair, TokenId};
use crate::error::{Error, Result};
use crate::model::{Mode, NatModel};
use crate::tensor::no_grad;
use crate::training::{refine_predict, sample_mask, substitute};

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct BleuReport {
    /// 0 to 100.
    pub bleu: f64,
    /// Clipped n-gram precisions for n = 1..=4.
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hypothesis_length: usize,
    pub reference_length: usize,
}

impl BleuReport {
    pub fn to_tsv(&self) -> String {
        let p = self.precisions.map(|p| format!("{:.4}", 100.0 * p));
        format!(
            "BLEU\t{:.2}\tp1\t{}\tp2\t{}\tp3\t{}\tp4\t{}\tBP\t{:.4}\thyp_len\t{}\tref_len\t{}",
            self.bleu,
            p[0],
            p[1],
            p[2],
            p[3],
            self.brevity_penalty,
            self.hypothesis_length,
            self.reference_length
        )
    }

    pub fn to_key_values(&self) -> String {
        let mut s = format!("bleu={}\n", self.bleu);
        for (n, p) in self.precisions.iter().enumerate() {
            let _ = writeln!(s, "p{}={p}", n + 1);
        }
        let _ = writeln!(s, "brevity_penalty={}", self.brevity_penalty);
        let _ = writeln!(s, "hypothesis_length={}", self.hypothesis_length);
        let _ = writeln!(s, "reference_length={}", self.reference_length);
        s
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4 with clipped counts and no smoothing: any zero
/// precision gives 0.
pub fn bleu<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<BleuReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::ShapeMismatch {
            op: "bleu",
            lhs: vec![hypotheses.len()],
            rhs: vec![references.len()],
        });
    }
    if hypotheses.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut c, mut r) = (0usize, 0usize);
    for (hyp, reference) in hypotheses.iter().zip(references) {
        c += hyp.len();
        r += reference.len();
        for n in 1..=MAX_ORDER {
            let h = ngram_counts(hyp, n);
            let rc = ngram_counts(reference, n);
            totals[n - 1] += h.values().sum::<usize>();
            matches[n - 1] += h
                .iter()
                .map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    let precisions: [f64; MAX_ORDER] = std::array::from_fn(|i| {
        if totals[i] == 0 {
            0.0
        } else {
            matches[i] as f64 / totals[i] as f64
        }
    });
    let brevity_penalty = if c == 0 {
        0.0
    } else if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    let bleu = if precisions.contains(&0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        hypothesis_length: c,
        reference_length: r,
    })
}

/// Percentage of tokens equal to their immediate predecessor.
pub fn repetition_rate<T: PartialEq>(hypotheses: &[Vec<T>]) -> Result<f64> {
    let total: usize = hypotheses.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::Empty("corpus"));
    }
    let repeats: usize = hypotheses
        .iter()
        .map(|h| h.windows(2).filter(|w| w[0] == w[1]).count())
        .sum();
    Ok(100.0 * repeats as f64 / total as f64)
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub const PROBE_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityReport {
    /// `PROBE_BINS + 1` uniform edges over [0, 1].
    pub edges: Vec<f64>,
    /// Values below 0 land in the first bin and 1 in the last.
    pub counts: Vec<usize>,
    pub mean: f64,
    pub similarities: Vec<f64>,
}

impl SimilarityReport {
    pub fn from_similarities(similarities: Vec<f64>) -> Result<Self> {
        if similarities.is_empty() {
            return Err(Error::Empty("similarities"));
        }
        let edges = (0..=PROBE_BINS)
            .map(|i| i as f64 / PROBE_BINS as f64)
            .collect();
        let mut counts = vec![0; PROBE_BINS];
        for &s in &similarities {
            let bin = ((s * PROBE_BINS as f64).floor().max(0.0) as usize).min(PROBE_BINS - 1);
            counts[bin] += 1;
        }
        let mean = similarities.iter().sum::<f64>() / similarities.len() as f64;
        Ok(SimilarityReport {
            edges,
            counts,
            mean,
            similarities,
        })
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("bin_low\tbin_high\tcount\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "{:.1}\t{:.1}\t{c}", self.edges[i], self.edges[i + 1]);
        }
        let _ = writeln!(s, "mean\t{:.6}", self.mean);
        s
    }

    pub fn to_key_values(&self) -> String {
        let mut s = format!(
            "mean_similarity={}\nprobed_tokens={}\n",
            self.mean,
            self.similarities.len()
        );
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "bin{i}={c}");
        }
        s
    }
}

fn softmax_f64(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&l| (l as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// For `sample_size` pairs drawn by `rng`: masks the target once, builds one
/// mixed input from a `1..=max_iterations`-step prediction, decodes it and
/// the masked ground truth in eval mode, and compares the two output
/// distributions at every masked position.
pub fn similarity_probe<R: Rng + ?Sized>(
    model: &NatModel,
    pairs: &[SentencePair],
    beta: f64,
    max_iterations: usize,
    rng: &mut R,
    sample_size: usize,
) -> Result<SimilarityReport> {
    if pairs.is_empty() || sample_size == 0 {
        return Err(Error::Empty("probe sample"));
    }
    let chosen = index::sample(rng, pairs.len(), sample_size.min(pairs.len())).into_vec();
    let vocab = model.config.vocab_size;
    let mut similarities = Vec::new();
    no_grad(|| -> Result<()> {
        for &i in &chosen {
            let pair = &pairs[i];
            let masked = sample_mask(&pair.target, rng)?;
            let (predicted, _) =
                refine_predict(model, &pair.source, pair.target.len(), max_iterations, rng)?;
            let mixed = substitute(&masked, &predicted, beta, rng)?;
            let encoder = model.encode(&[&pair.source], &mut Mode::Eval)?;
            let inputs: [&[TokenId]; 2] = [&mixed.tokens, &masked.tokens];
            let out = model.decode(&inputs, &encoder, Some(&[0, 0]), &mut Mode::Eval)?;
            let logits = out.logits.data();
            for &p in &masked.masked {
                let a = softmax_f64(&logits[out.index(0, p) * vocab..][..vocab]);
                let b = softmax_f64(&logits[out.index(1, p) * vocab..][..vocab]);
                similarities.push(cosine(&a, &b));
            }
        }
        Ok(())
    })?;
    SimilarityReport::from_similarities(similarities)
}
