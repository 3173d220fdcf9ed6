use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named trainable tensors, iterated in name order.
#[derive(Debug, Clone)]
pub struct ParameterSet {
    map: BTreeMap<String, Tensor>,
}

/// Every parameter name with its shape, in the order they are created.
pub fn parameter_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, h) = (cfg.model_dim, cfg.hidden_dim);
    let mut out = vec![
        ("embed.tokens".to_string(), vec![cfg.vocab_size, d]),
        (
            "embed.enc_positions".to_string(),
            vec![cfg.max_positions + 1, d],
        ),
        (
            "embed.dec_positions".to_string(),
            vec![cfg.max_positions, d],
        ),
    ];
    let attention = |prefix: &str, out: &mut Vec<(String, Vec<usize>)>| {
        for proj in ["q", "k", "v", "o"] {
            out.push((format!("{prefix}.{proj}.weight"), vec![d, d]));
            out.push((format!("{prefix}.{proj}.bias"), vec![d]));
        }
    };
    let norm = |prefix: &str, out: &mut Vec<(String, Vec<usize>)>| {
        out.push((format!("{prefix}.gain"), vec![d]));
        out.push((format!("{prefix}.bias"), vec![d]));
    };
    let ffn = |prefix: &str, out: &mut Vec<(String, Vec<usize>)>| {
        out.push((format!("{prefix}.in.weight"), vec![d, h]));
        out.push((format!("{prefix}.in.bias"), vec![h]));
        out.push((format!("{prefix}.out.weight"), vec![h, d]));
        out.push((format!("{prefix}.out.bias"), vec![d]));
    };
    for l in 0..cfg.layers_enc {
        attention(&format!("encoder.{l}.self_attn"), &mut out);
        norm(&format!("encoder.{l}.norm1"), &mut out);
        ffn(&format!("encoder.{l}.ffn"), &mut out);
        norm(&format!("encoder.{l}.norm2"), &mut out);
    }
    norm("encoder.final_norm", &mut out);
    for l in 0..cfg.layers_dec {
        attention(&format!("decoder.{l}.self_attn"), &mut out);
        norm(&format!("decoder.{l}.norm1"), &mut out);
        attention(&format!("decoder.{l}.cross_attn"), &mut out);
        norm(&format!("decoder.{l}.norm2"), &mut out);
        ffn(&format!("decoder.{l}.ffn"), &mut out);
        norm(&format!("decoder.{l}.norm3"), &mut out);
    }
    norm("decoder.final_norm", &mut out);
    out.push((
        "length_head.weight".to_string(),
        vec![d, cfg.max_length_bins],
    ));
    out.push(("length_head.bias".to_string(), vec![cfg.max_length_bins]));
    out.push(("output.bias".to_string(), vec![cfg.vocab_size]));
    out
}

/// Xavier-uniform bound for a `fan_in × fan_out` matrix.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f32 {
    (6.0 / (fan_in + fan_out) as f64).sqrt() as f32
}

impl ParameterSet {
    /// Xavier-uniform matrices, zero biases, unit norm gains; a pure function
    /// of the config (including its seed).
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut shapes = parameter_shapes(cfg);
        shapes.sort_by(|a, b| a.0.cmp(&b.0));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut map = BTreeMap::new();
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            let data = if shape.len() == 2 {
                let bound = xavier_bound(shape[0], shape[1]);
                (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
            } else if name.ends_with(".gain") {
                vec![1.0; n]
            } else {
                vec![0.0; n]
            };
            map.insert(name, Tensor::param(shape, data)?);
        }
        Ok(ParameterSet { map })
    }

    /// Wraps named tensors, checking them against the config's layout.
    pub fn from_named(cfg: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (name, t) in named {
            let t = if t.requires_grad() {
                t
            } else {
                Tensor::param(t.shape().to_vec(), t.to_vec())?
            };
            if map.insert(name.clone(), t).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate parameter {name}"
                )));
            }
        }
        let expected = parameter_shapes(cfg);
        if expected.len() != map.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, got {}",
                expected.len(),
                map.len()
            )));
        }
        for (name, shape) in expected {
            match map.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::ShapeMismatch {
                        op: "parameter",
                        lhs: shape,
                        rhs: t.shape().to_vec(),
                    })
                }
                None => return Err(Error::InvalidArgument(format!("missing parameter {name}"))),
            }
        }
        Ok(ParameterSet { map })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    /// Tensors in name order.
    pub fn tensors(&self) -> Vec<Tensor> {
        self.map.values().cloned().collect()
    }

    /// Replaces every tensor, in name order.
    pub fn set_tensors(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.map.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} tensors, got {}",
                self.map.len(),
                tensors.len()
            )));
        }
        for (slot, t) in self.map.values_mut().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "set_tensors",
                    lhs: slot.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            *slot = t;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Bitwise equality of names, shapes and values.
    pub fn bitwise_eq(&self, other: &ParameterSet) -> bool {
        self.map.len() == other.map.len()
            && self.map.iter().zip(&other.map).all(|((na, a), (nb, b))| {
                na == nb
                    && a.shape() == b.shape()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
