//! Pre-norm transformer encoder–decoder with a length classifier on the
//! encoder's `[LENGTH]` slot and a non-causal decoder.

use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::params::ParameterSet;
use crate::data::{TokenId, LENGTH, PAD};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const NORM_EPS: f32 = 1e-5;
const MASKED_SCORE: f32 = -1e9;

/// Train mode enables dropout, drawing masks from the given stream.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    fn dropout(&mut self, x: &Tensor, rate: f32) -> Result<Tensor> {
        match self {
            Mode::Eval => Ok(x.clone()),
            Mode::Train(rng) => x.dropout(rate, true, &mut **rng),
        }
    }
}

/// Encoder states for a batch of sources, each prefixed with `[LENGTH]`.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `[batch · width, model_dim]`; row `b · width` is sentence `b`'s `[LENGTH]` slot.
    pub states: Tensor,
    /// `[batch, max_length_bins]`.
    pub length_logits: Tensor,
    /// `[batch · width]`, true at padding.
    pub padding: Vec<bool>,
    pub batch: usize,
    /// Source width including the `[LENGTH]` slot.
    pub width: usize,
}

impl EncoderOutput {
    pub fn length_logits_row(&self, b: usize) -> &[f32] {
        let bins = self.length_logits.shape()[1];
        &self.length_logits.data()[b * bins..(b + 1) * bins]
    }
}

/// Per-position vocabulary logits for a padded batch of decoder inputs.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// `[rows · width, vocab_size]`.
    pub logits: Tensor,
    pub rows: usize,
    pub width: usize,
}

impl DecoderOutput {
    /// Flat row index of position `t` in sequence `r`.
    pub fn index(&self, r: usize, t: usize) -> usize {
        r * self.width + t
    }
}

#[derive(Debug, Clone)]
pub struct NatModel {
    pub config: ModelConfig,
    pub params: ParameterSet,
}

struct AttnShape {
    batch: usize,
    queries: usize,
    keys: usize,
}

impl NatModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        Ok(NatModel {
            params: ParameterSet::init(&config)?,
            config,
        })
    }

    pub fn from_params(config: ModelConfig, params: ParameterSet) -> Result<Self> {
        config.validate()?;
        let named = params
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        let params = ParameterSet::from_named(&config, named)?;
        Ok(NatModel { config, params })
    }

    fn p(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name)
    }

    fn check_ids(&self, ids: &[TokenId], limit: usize, what: &str) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Empty(if what == "source" {
                "source"
            } else {
                "decoder input"
            }));
        }
        if ids.len() > limit {
            return Err(Error::InvalidArgument(format!(
                "{what} length {} exceeds max_positions {limit}",
                ids.len()
            )));
        }
        if let Some(&bad) = ids
            .iter()
            .find(|&&id| id as usize >= self.config.vocab_size)
        {
            return Err(Error::IndexOutOfRange {
                op: "embedding",
                index: bad as usize,
                bound: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn linear(&self, x: &Tensor, prefix: &str) -> Result<Tensor> {
        x.matmul(self.p(&format!("{prefix}.weight"))?)?
            .add(self.p(&format!("{prefix}.bias"))?)
    }

    fn norm(&self, x: &Tensor, prefix: &str) -> Result<Tensor> {
        x.layer_norm(
            self.p(&format!("{prefix}.gain"))?,
            self.p(&format!("{prefix}.bias"))?,
            NORM_EPS,
        )
    }

    fn feed_forward(&self, x: &Tensor, prefix: &str, mode: &mut Mode) -> Result<Tensor> {
        let h = self.linear(x, &format!("{prefix}.in"))?.relu();
        let h = mode.dropout(&h, self.config.dropout_rate)?;
        self.linear(&h, &format!("{prefix}.out"))
    }

    /// Splits `[batch · len, d]` into `[batch · heads, len, head_dim]`.
    fn split_heads(&self, x: &Tensor, batch: usize, len: usize) -> Result<Tensor> {
        let (h, dh) = (self.config.heads, self.config.head_dim());
        x.reshape(&[batch, len, h, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[batch * h, len, dh])
    }

    /// Multi-head attention; keys flagged in `key_padding` get zero weight.
    /// Returns the projected output and the `[batch · heads, queries, keys]`
    /// attention weights.
    fn attention(
        &self,
        queries: &Tensor,
        memory: &Tensor,
        key_padding: &[bool],
        shape: AttnShape,
        prefix: &str,
        mode: &mut Mode,
    ) -> Result<(Tensor, Tensor)> {
        let AttnShape {
            batch,
            queries: lq,
            keys: lk,
        } = shape;
        let heads = self.config.heads;
        let q = self.split_heads(&self.linear(queries, &format!("{prefix}.q"))?, batch, lq)?;
        let k = self.split_heads(&self.linear(memory, &format!("{prefix}.k"))?, batch, lk)?;
        let v = self.split_heads(&self.linear(memory, &format!("{prefix}.v"))?, batch, lk)?;
        let scale = 1.0 / (self.config.head_dim() as f32).sqrt();
        let scores = q.matmul(&k.transpose()?)?.scale(scale);

        let mut mask = Vec::with_capacity(batch * heads * lq * lk);
        for b in 0..batch {
            let keys = &key_padding[b * lk..(b + 1) * lk];
            for _ in 0..heads * lq {
                mask.extend_from_slice(keys);
            }
        }
        let weights = scores.mask_fill(&mask, MASKED_SCORE)?.softmax(2)?;
        let dropped = mode.dropout(&weights, self.config.dropout_rate)?;
        let context = dropped
            .matmul(&v)?
            .reshape(&[batch, heads, lq, self.config.head_dim()])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[batch * lq, self.config.model_dim])?;
        Ok((self.linear(&context, &format!("{prefix}.o"))?, weights))
    }

    fn embed(&self, ids: &[TokenId], width: usize, table: &str) -> Result<Tensor> {
        let tokens: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..ids.len()).map(|i| i % width).collect();
        self.p("embed.tokens")?
            .gather_rows(&tokens)?
            .add(&self.p(table)?.gather_rows(&positions)?)
    }

    /// Encodes a batch of sources.
    pub fn encode(&self, sources: &[&[TokenId]], mode: &mut Mode) -> Result<EncoderOutput> {
        self.encode_traced(sources, mode, None)
    }

    /// Like [`encode`](Self::encode), additionally collecting every layer's
    /// self-attention weights.
    pub fn encode_traced(
        &self,
        sources: &[&[TokenId]],
        mode: &mut Mode,
        mut trace: Option<&mut Vec<Tensor>>,
    ) -> Result<EncoderOutput> {
        if sources.is_empty() {
            return Err(Error::Empty("source batch"));
        }
        for s in sources {
            self.check_ids(s, self.config.max_positions, "source")?;
        }
        let batch = sources.len();
        let width = 1 + sources.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = vec![PAD; batch * width];
        for (b, s) in sources.iter().enumerate() {
            ids[b * width] = LENGTH;
            ids[b * width + 1..b * width + 1 + s.len()].copy_from_slice(s);
        }
        let padding: Vec<bool> = ids.iter().map(|&i| i == PAD).collect();

        let rate = self.config.dropout_rate;
        let mut x = mode.dropout(&self.embed(&ids, width, "embed.enc_positions")?, rate)?;
        for l in 0..self.config.layers_enc {
            let h = self.norm(&x, &format!("encoder.{l}.norm1"))?;
            let shape = AttnShape {
                batch,
                queries: width,
                keys: width,
            };
            let (a, weights) = self.attention(
                &h,
                &h,
                &padding,
                shape,
                &format!("encoder.{l}.self_attn"),
                mode,
            )?;
            if let Some(t) = trace.as_deref_mut() {
                t.push(weights);
            }
            x = x.add(&mode.dropout(&a, rate)?)?;
            let h = self.norm(&x, &format!("encoder.{l}.norm2"))?;
            let f = self.feed_forward(&h, &format!("encoder.{l}.ffn"), mode)?;
            x = x.add(&mode.dropout(&f, rate)?)?;
        }
        let states = self.norm(&x, "encoder.final_norm")?;
        let slots: Vec<usize> = (0..batch).map(|b| b * width).collect();
        let length_logits = self.linear(&states.gather_rows(&slots)?, "length_head")?;
        Ok(EncoderOutput {
            states,
            length_logits,
            padding,
            batch,
            width,
        })
    }

    /// Decodes padded decoder inputs against `encoder`. `encoder_rows[r]`
    /// names the encoder sentence that decoder row `r` attends to; `None`
    /// pairs rows one-to-one.
    pub fn decode(
        &self,
        inputs: &[&[TokenId]],
        encoder: &EncoderOutput,
        encoder_rows: Option<&[usize]>,
        mode: &mut Mode,
    ) -> Result<DecoderOutput> {
        let rows = inputs.len();
        if rows == 0 {
            return Err(Error::Empty("decoder batch"));
        }
        for s in inputs {
            self.check_ids(s, self.config.max_positions, "decoder input")?;
        }
        let identity: Vec<usize>;
        let map = match encoder_rows {
            Some(m) => m,
            None => {
                identity = (0..rows).collect();
                &identity
            }
        };
        if map.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "decode",
                lhs: vec![rows],
                rhs: vec![map.len()],
            });
        }
        if let Some(&bad) = map.iter().find(|&&m| m >= encoder.batch) {
            return Err(Error::IndexOutOfRange {
                op: "decode",
                index: bad,
                bound: encoder.batch,
            });
        }

        let d = self.config.model_dim;
        let src_width = encoder.width;
        let memory = if encoder_rows.is_none() && rows == encoder.batch {
            encoder.states.clone()
        } else {
            encoder
                .states
                .reshape(&[encoder.batch, src_width * d])?
                .gather_rows(map)?
                .reshape(&[rows * src_width, d])?
        };
        let mut memory_padding = Vec::with_capacity(rows * src_width);
        for &m in map {
            memory_padding.extend_from_slice(&encoder.padding[m * src_width..(m + 1) * src_width]);
        }

        let width = inputs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = vec![PAD; rows * width];
        let mut padding = vec![true; rows * width];
        for (r, s) in inputs.iter().enumerate() {
            ids[r * width..r * width + s.len()].copy_from_slice(s);
            padding[r * width..r * width + s.len()].fill(false);
        }

        let rate = self.config.dropout_rate;
        let mut x = mode.dropout(&self.embed(&ids, width, "embed.dec_positions")?, rate)?;
        for l in 0..self.config.layers_dec {
            let h = self.norm(&x, &format!("decoder.{l}.norm1"))?;
            let shape = AttnShape {
                batch: rows,
                queries: width,
                keys: width,
            };
            let (a, _) = self.attention(
                &h,
                &h,
                &padding,
                shape,
                &format!("decoder.{l}.self_attn"),
                mode,
            )?;
            x = x.add(&mode.dropout(&a, rate)?)?;
            let h = self.norm(&x, &format!("decoder.{l}.norm2"))?;
            let shape = AttnShape {
                batch: rows,
                queries: width,
                keys: src_width,
            };
            let (c, _) = self.attention(
                &h,
                &memory,
                &memory_padding,
                shape,
                &format!("decoder.{l}.cross_attn"),
                mode,
            )?;
            x = x.add(&mode.dropout(&c, rate)?)?;
            let h = self.norm(&x, &format!("decoder.{l}.norm3"))?;
            let f = self.feed_forward(&h, &format!("decoder.{l}.ffn"), mode)?;
            x = x.add(&mode.dropout(&f, rate)?)?;
        }
        let x = self.norm(&x, "decoder.final_norm")?;
        let logits = x
            .matmul(&self.p("embed.tokens")?.transpose()?)?
            .add(self.p("output.bias")?)?;
        Ok(DecoderOutput {
            logits,
            rows,
            width,
        })
    }
}

/// The `count` most likely lengths, best first, never proposing length 0.
/// Ties go to the shorter length.
pub fn length_candidates(length_logits: &[f32], count: usize) -> Result<Vec<usize>> {
    let usable = length_logits.len().saturating_sub(1);
    if count == 0 || count > usable {
        return Err(Error::InvalidArgument(format!(
            "cannot propose {count} lengths from {usable} non-empty bins"
        )));
    }
    let mut bins: Vec<usize> = (1..length_logits.len()).collect();
    bins.sort_by(|&a, &b| {
        length_logits[b]
            .total_cmp(&length_logits[a])
            .then(a.cmp(&b))
    });
    bins.truncate(count);
    Ok(bins)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn candidates_by_descending_logit() {
        let mut one_hot = vec![0.0; 10];
        one_hot[7] = 5.0;
        assert_eq!(length_candidates(&one_hot, 1).unwrap(), vec![7]);
        // bins 1..4 carry [0, 3, 2, 1]; bin 0 is never proposed.
        assert_eq!(
            length_candidates(&[9.0, 0.0, 3.0, 2.0, 1.0], 2).unwrap(),
            vec![2, 3]
        );
        assert_eq!(
            length_candidates(&[100.0, 0.0, 0.0], 2).unwrap(),
            vec![1, 2]
        );
        assert!(length_candidates(&[0.0; 4], 4).is_err());
        assert!(length_candidates(&[0.0; 4], 0).is_err());
    }
}
