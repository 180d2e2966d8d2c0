use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{encode_prompt, GroundedExample, Vocabulary, DEFAULT_MAX_LEN, EOS};
use crate::error::{Error, Result};
use crate::model::{clip_grad_norm, AdamW, AdamWConfig, Gradients, OutputGrad, PolicyValueNet};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub epochs: usize,
    /// Initial learning rate, decayed linearly to 0 over all steps.
    pub lr_start: f64,
    pub batch_size: usize,
    pub max_len: usize,
    pub max_grad_norm: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            epochs: 10,
            lr_start: 1e-5,
            batch_size: 16,
            max_len: DEFAULT_MAX_LEN,
            max_grad_norm: 1.0,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("SFT epochs must be at least 1"));
        }
        if !(self.lr_start > 0.0) || !self.lr_start.is_finite() {
            return Err(Error::invalid("SFT lr_start must be > 0"));
        }
        if self.batch_size == 0 || self.max_len < 2 {
            return Err(Error::invalid("SFT batch_size must be ≥ 1 and max_len ≥ 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftReport {
    /// Mean per-token cross-entropy over each epoch, measured during the
    /// epoch's updates.
    pub epoch_losses: Vec<f64>,
}

struct Sample {
    state: Vec<u32>,
    target: Vec<u32>,
}

/// Sum of token cross-entropies and its gradient for one example.
fn example_grad(net: &PolicyValueNet, s: &Sample, scale: f64) -> Result<(Gradients, f64)> {
    let tr = net.trace_actions(&s.state, &s.target)?;
    let mut loss = 0.0;
    let grads: Vec<OutputGrad> = s
        .target
        .iter()
        .zip(&tr.logp)
        .map(|(&a, row)| {
            loss -= row[a as usize];
            OutputGrad::from_logp(row, a as usize, -scale, 0.0)
        })
        .collect();
    Ok((net.backward(&tr, &grads)?, loss))
}

/// Teacher-forced maximum likelihood on `reference + EOS` given the encoded
/// state, with AdamW and a linearly decaying learning rate.
pub fn train_sft(
    corpus: &[GroundedExample],
    net: &mut PolicyValueNet,
    vocab: &Vocabulary,
    cfg: &SftConfig,
) -> Result<SftReport> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("SFT corpus is empty"));
    }
    if net.shape().vocab != vocab.len() {
        return Err(Error::invalid(format!(
            "net vocabulary size {} does not match vocabulary of {}",
            net.shape().vocab,
            vocab.len()
        )));
    }
    let mut samples: Vec<Sample> = corpus
        .iter()
        .map(|ex| {
            let mut target = vocab.encode_text(&ex.reference);
            target.push(EOS);
            Sample {
                state: encode_prompt(ex, vocab, cfg.max_len),
                target,
            }
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(net.params().len(), cfg.optimizer);
    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs) as f64;
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        samples.shuffle(&mut rng);
        let (mut loss_sum, mut n_tokens) = (0.0, 0usize);
        for batch in samples.chunks(cfg.batch_size) {
            let tokens: usize = batch.iter().map(|s| s.target.len()).sum();
            let scale = 1.0 / tokens as f64;
            let net_ref: &PolicyValueNet = net;
            let results = par::map(batch, |s| example_grad(net_ref, s, scale));
            let mut grads = Gradients::zeros(net.shape());
            for r in results {
                let (g, l) = r?;
                grads.add_assign(&g);
                loss_sum += l;
            }
            n_tokens += tokens;
            if !loss_sum.is_finite() {
                return Err(Error::NonFinite(format!("SFT loss at epoch {epoch}, step {step}")));
            }
            clip_grad_norm(&mut grads, cfg.max_grad_norm);
            let lr = cfg.lr_start * (1.0 - step as f64 / total_steps);
            opt.step(net, &grads, lr);
            step += 1;
        }
        let mean = loss_sum / n_tokens as f64;
        log::debug!("sft epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
    }
    Ok(SftReport { epoch_losses })
}
