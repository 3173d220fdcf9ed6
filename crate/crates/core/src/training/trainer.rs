//! The update loop: masking, refinement prediction, mixed inputs, the
//! combined objective and Adam updates, with periodic checkpoints.

use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{self, Checkpoint};
use super::losses::{
    length_loss, total_loss_tensor, weighted_nll, weighted_symmetric_kl, ConsistencySign,
    Distribution, LossBreakdown,
};
use super::mixing::{refine_predict_batch, sample_mask, substitute, MaskedTarget};
use crate::data::{batch_by_tokens, Batch, SentencePair, TokenId};
use crate::error::{Error, Result};
use crate::model::{Mode, NatModel};
use crate::optim::{adam_step, lr_at_step, AdamConfig, AdamState};
use crate::tensor::{Gradients, Tensor};

/// Which objective the trainer optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Three views with consistency terms.
    Eecr,
    /// Masked ground truth only; every view reports the same NLL and both
    /// consistency terms are zero.
    Cmlm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Substitution probability for observed positions.
    pub beta: f64,
    /// Consistency weight.
    pub gamma: f64,
    /// Largest number of refinement iterations drawn for predictions.
    pub max_refine_iterations: usize,
    pub label_smoothing: f32,
    pub base_lr: f32,
    pub warmup: u64,
    /// Target tokens per batch.
    pub token_budget: usize,
    pub max_updates: u64,
    pub max_epochs: usize,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub average_last: usize,
    pub seed: u64,
    pub cr_sign: ConsistencySign,
    pub objective: Objective,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 0.3,
            gamma: 0.4,
            max_refine_iterations: 10,
            label_smoothing: 0.1,
            base_lr: 5e-4,
            warmup: 4000,
            token_budget: 4096,
            max_updates: 300_000,
            max_epochs: usize::MAX,
            checkpoint_every: 1000,
            average_last: 10,
            seed: 1,
            cr_sign: ConsistencySign::Positive,
            objective: Objective::Eecr,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Plain CMLM training: no substitution and no consistency terms.
    pub fn baseline(self) -> Self {
        TrainConfig {
            beta: 0.0,
            gamma: 0.0,
            objective: Objective::Cmlm,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if !(self.gamma >= 0.0) {
            return bad(format!("gamma must be non-negative, got {}", self.gamma));
        }
        if self.max_refine_iterations == 0 {
            return bad("max refinement iterations must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.label_smoothing) {
            return bad(format!(
                "label smoothing must lie in [0, 1], got {}",
                self.label_smoothing
            ));
        }
        if !(self.base_lr > 0.0) || self.warmup == 0 {
            return bad("base_lr and warmup must be positive".into());
        }
        if self.token_budget == 0 || self.average_last == 0 {
            return bad("token_budget and average_last must be positive".into());
        }
        Ok(())
    }
}

/// Independent random streams so that disabling one feature leaves the
/// others' draws unchanged.
#[derive(Debug, Clone)]
struct Streams {
    mask: ChaCha8Rng,
    refine: ChaCha8Rng,
    substitution: ChaCha8Rng,
    dropout: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |id| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id);
            rng
        };
        Streams {
            mask: stream(1),
            refine: stream(2),
            substitution: stream(3),
            dropout: stream(4),
        }
    }
}

/// One applied update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateRecord {
    pub step: u64,
    pub losses: LossBreakdown,
    pub lr: f32,
}

impl UpdateRecord {
    /// Tab-separated `step nll1 nll2 nll3 kld1 kld2 len total lr k_used`.
    /// Floats use shortest round-trip formatting.
    pub fn log_line(&self) -> String {
        let l = &self.losses;
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step,
            l.nll1,
            l.nll2,
            l.nll3,
            l.kld1,
            l.kld2,
            l.len_loss,
            l.total,
            self.lr,
            l.k_used
        )
    }

    /// Inverse of [`UpdateRecord::log_line`]; `gamma` and `beta` are not
    /// logged and must be supplied.
    pub fn parse_log_line(line: &str, gamma: f32, beta: f32) -> Result<Self> {
        let fields: Vec<&str> = line.trim_end().split('\t').collect();
        if fields.len() != 10 {
            return Err(Error::InvalidArgument(format!(
                "log line has {} fields, expected 10",
                fields.len()
            )));
        }
        let f = |i: usize| -> Result<f32> {
            fields[i]
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad number {:?}", fields[i])))
        };
        let u = |i: usize| -> Result<u64> {
            fields[i]
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad integer {:?}", fields[i])))
        };
        Ok(UpdateRecord {
            step: u(0)?,
            losses: LossBreakdown {
                nll1: f(1)?,
                nll2: f(2)?,
                nll3: f(3)?,
                kld1: f(4)?,
                kld2: f(5)?,
                len_loss: f(6)?,
                total: f(7)?,
                gamma,
                beta,
                k_used: u(9)? as usize,
            },
            lr: f(8)?,
        })
    }
}

pub const LOG_HEADER: &str = "step\tnll1\tnll2\tnll3\tkld1\tkld2\tlen\ttotal\tlr\tk_used";

/// Where and how often to write checkpoints.
#[derive(Debug, Clone)]
pub struct CheckpointPolicy {
    pub dir: PathBuf,
}

/// Outcome of [`Trainer::train`].
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub updates: u64,
    pub epochs: usize,
    /// Checkpoints still on disk, oldest first.
    pub checkpoints: Vec<PathBuf>,
    pub stopped_early: bool,
}

pub struct Trainer {
    pub model: NatModel,
    pub config: TrainConfig,
    pub adam: AdamState,
    pub step: u64,
    streams: Streams,
    /// Refinement depth forced for every update, for inspection.
    pub forced_k: Option<usize>,
}

impl Trainer {
    pub fn new(model: NatModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(&model.params.tensors());
        Ok(Trainer {
            streams: Streams::new(config.seed),
            model,
            config,
            adam,
            step: 0,
            forced_k: None,
        })
    }

    /// Resumes from a checkpoint's parameters, optimizer state and step.
    pub fn from_checkpoint(ckpt: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = NatModel::from_params(ckpt.model_config, ckpt.params)?;
        let mut streams = Streams::new(config.seed);
        // Offset every stream so a resumed run does not replay earlier draws.
        for rng in [
            &mut streams.mask,
            &mut streams.refine,
            &mut streams.substitution,
            &mut streams.dropout,
        ] {
            rng.set_word_pos(ckpt.step as u128 * (1 << 32));
        }
        Ok(Trainer {
            streams,
            model,
            config,
            adam: ckpt.adam,
            step: ckpt.step,
            forced_k: None,
        })
    }

    /// Forward and backward pass over one batch without touching the
    /// parameters.
    pub fn compute_losses(&mut self, batch: &Batch) -> Result<(LossBreakdown, Gradients)> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let cfg = &self.config;
        let model = &self.model;
        let b = batch.len();
        let sources: Vec<&[TokenId]> = (0..b).map(|i| batch.source_row(i)).collect();
        let targets: Vec<&[TokenId]> = (0..b).map(|i| batch.target_row(i)).collect();
        model
            .config
            .check_target_length(*batch.target_lengths.iter().max().unwrap_or(&0))?;

        let masked: Vec<MaskedTarget> = targets
            .iter()
            .map(|t| sample_mask(t, &mut self.streams.mask))
            .collect::<Result<_>>()?;

        let eecr = cfg.objective == Objective::Eecr;
        let k_used = match (eecr, self.forced_k) {
            (false, _) => 0,
            (true, Some(k)) => k,
            (true, None) => self.streams.refine.gen_range(1..=cfg.max_refine_iterations),
        };

        let mut inputs: Vec<Vec<TokenId>> = Vec::with_capacity(3 * b);
        if eecr {
            let predicted = refine_predict_batch(model, &sources, &batch.target_lengths, k_used)?;
            let mut second = Vec::with_capacity(b);
            for (m, p) in masked.iter().zip(&predicted) {
                inputs.push(substitute(m, p, cfg.beta, &mut self.streams.substitution)?.tokens);
                second.push(substitute(m, p, cfg.beta, &mut self.streams.substitution)?.tokens);
            }
            inputs.extend(second);
        }
        inputs.extend(masked.iter().map(|m| m.tokens.clone()));
        let views = inputs.len() / b;

        let mut mode = Mode::Train(&mut self.streams.dropout);
        let encoder = model.encode(&sources, &mut mode)?;
        let rows: Vec<usize> = (0..views).flat_map(|_| 0..b).collect();
        let input_refs: Vec<&[TokenId]> = inputs.iter().map(Vec::as_slice).collect();
        let out = model.decode(&input_refs, &encoder, Some(&rows), &mut mode)?;

        // Every view supervises the same masked positions in the same order.
        let mut gt = Vec::new();
        let mut weights = Vec::new();
        for m in &masked {
            let w = 1.0 / (m.masked.len() * b) as f32;
            for &p in &m.masked {
                gt.push(m.ground_truth[p]);
                weights.push(w);
            }
        }
        let view_logits = |v: usize| -> Result<Tensor> {
            let idx: Vec<usize> = masked
                .iter()
                .enumerate()
                .flat_map(|(i, m)| m.masked.iter().map(move |&p| (i, p)))
                .map(|(i, p)| out.index(v * b + i, p))
                .collect();
            out.logits.gather_rows(&idx)
        };

        let len_loss = length_loss(&encoder.length_logits, &batch.target_lengths)?;
        let terms: [Tensor; 6] = if eecr {
            let logits = [view_logits(0)?, view_logits(1)?, view_logits(2)?];
            let nll = logits
                .iter()
                .map(|l| weighted_nll(&l.log_softmax(1)?, &gt, &weights, cfg.label_smoothing))
                .collect::<Result<Vec<_>>>()?;
            let dist = logits
                .iter()
                .map(Distribution::from_logits)
                .collect::<Result<Vec<_>>>()?;
            let kld1 = weighted_symmetric_kl(&dist[0], &dist[1], &weights)?;
            let kld2 = weighted_symmetric_kl(&dist[0], &dist[2], &weights)?
                .add(&weighted_symmetric_kl(&dist[1], &dist[2], &weights)?)?;
            [
                nll[0].clone(),
                nll[1].clone(),
                nll[2].clone(),
                kld1,
                kld2,
                len_loss,
            ]
        } else {
            let lp = view_logits(0)?.log_softmax(1)?;
            let nll = weighted_nll(&lp, &gt, &weights, cfg.label_smoothing)?;
            let zero = Tensor::scalar(0.0);
            [nll.clone(), nll.clone(), nll, zero.clone(), zero, len_loss]
        };
        let total = total_loss_tensor(&terms, cfg.gamma, cfg.cr_sign)?;
        let grads = total.backward()?;
        let breakdown = LossBreakdown {
            nll1: terms[0].item(),
            nll2: terms[1].item(),
            nll3: terms[2].item(),
            kld1: terms[3].item(),
            kld2: terms[4].item(),
            len_loss: terms[5].item(),
            total: total.item(),
            gamma: cfg.gamma as f32,
            beta: cfg.beta as f32,
            k_used,
        };
        if !breakdown.total.is_finite() {
            return Err(Error::Internal(format!(
                "non-finite loss at step {}",
                self.step + 1
            )));
        }
        Ok((breakdown, grads))
    }

    /// One full update on `batch`.
    pub fn step(&mut self, batch: &Batch) -> Result<UpdateRecord> {
        let (losses, grads) = self.compute_losses(batch)?;
        let lr = lr_at_step(self.step + 1, self.config.base_lr, self.config.warmup)?;
        let mut params = self.model.params.tensors();
        adam_step(&mut params, &grads, &mut self.adam, lr, &self.config.adam)?;
        self.model.params.set_tensors(params)?;
        self.step += 1;
        Ok(UpdateRecord {
            step: self.step,
            losses,
            lr,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_config: self.model.config,
            params: self.model.params.clone(),
            adam: self.adam.clone(),
            step: self.step,
        }
    }

    /// Runs epochs over `pairs` until `max_updates` or `max_epochs`.
    /// `on_update` sees every record; `on_epoch` runs after each epoch with
    /// the epoch number (from 1) and may stop training.
    pub fn train(
        &mut self,
        pairs: &[SentencePair],
        checkpoints: Option<&CheckpointPolicy>,
        mut on_update: impl FnMut(&UpdateRecord) -> Result<()>,
        mut on_epoch: impl FnMut(&Trainer, usize) -> Result<ControlFlow<()>>,
    ) -> Result<TrainSummary> {
        if pairs.is_empty() {
            return Err(Error::Empty("training corpus"));
        }
        let mut kept: Vec<PathBuf> = Vec::new();
        let mut epochs = 0;
        let mut stopped_early = false;
        'outer: while epochs < self.config.max_epochs && self.step < self.config.max_updates {
            let epoch_seed = self.config.seed ^ (epochs as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            let batches = batch_by_tokens(pairs, self.config.token_budget, epoch_seed)?;
            epochs += 1;
            for batch in &batches {
                let record = self.step(batch)?;
                log::debug!("{}", record.log_line());
                on_update(&record)?;
                if let Some(policy) = checkpoints {
                    let every = self.config.checkpoint_every;
                    if every > 0 && self.step.is_multiple_of(every) {
                        self.save_rotating(&policy.dir, &mut kept)?;
                    }
                }
                if self.step >= self.config.max_updates {
                    break 'outer;
                }
            }
            log::info!("epoch {epochs} done at update {}", self.step);
            if on_epoch(self, epochs)?.is_break() {
                stopped_early = true;
                break;
            }
        }
        if let Some(policy) = checkpoints {
            if kept
                .last()
                .is_none_or(|p| p != &checkpoint_path(&policy.dir, self.step))
            {
                self.save_rotating(&policy.dir, &mut kept)?;
            }
        }
        Ok(TrainSummary {
            updates: self.step,
            epochs,
            checkpoints: kept,
            stopped_early,
        })
    }

    fn save_rotating(&self, dir: &Path, kept: &mut Vec<PathBuf>) -> Result<()> {
        let path = checkpoint_path(dir, self.step);
        checkpoint::save(&self.checkpoint(), &path)?;
        kept.push(path);
        while kept.len() > self.config.average_last {
            let old = kept.remove(0);
            std::fs::remove_file(&old).map_err(|e| Error::io(&old, e))?;
        }
        Ok(())
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("checkpoint_{step:08}.mnat"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_model() -> NatModel {
        NatModel::new(ModelConfig {
            model_dim: 8,
            hidden_dim: 16,
            heads: 2,
            layers_enc: 1,
            layers_dec: 1,
            max_positions: 8,
            max_length_bins: 9,
            dropout_rate: 0.0,
            ..ModelConfig::desk(12)
        })
        .unwrap()
    }

    fn batch() -> Batch {
        let pairs = [
            SentencePair::new(vec![4, 5, 6], vec![7, 8]).unwrap(),
            SentencePair::new(vec![9, 10], vec![11, 4, 5]).unwrap(),
        ];
        Batch::from_pairs(&pairs.iter().collect::<Vec<_>>())
    }

    #[test]
    fn log_line_round_trips() {
        let mut t = Trainer::new(tiny_model(), TrainConfig::default()).unwrap();
        let r = t.step(&batch()).unwrap();
        let line = r.log_line();
        assert_eq!(line.split('\t').count(), LOG_HEADER.split('\t').count());
        let back = UpdateRecord::parse_log_line(&line, 0.4, 0.3).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn config_bounds() {
        assert!(TrainConfig {
            beta: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            gamma: -0.1,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            max_refine_iterations: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig::default().baseline().validate().is_ok());
    }

    #[test]
    fn update_changes_parameters() {
        let mut t = Trainer::new(tiny_model(), TrainConfig::default()).unwrap();
        let before = t.model.params.clone();
        let r = t.step(&batch()).unwrap();
        assert_eq!(r.step, 1);
        assert!(r.losses.k_used >= 1 && r.losses.k_used <= 10);
        assert!(!before.bitwise_eq(&t.model.params));
    }
}
