//! Learned-discriminator reward: a binary classifier that scores how likely a
//! response is the ground-truth one for a dialogue state.
//!
//! The state and the response are encoded separately by one recurrent
//! encoder with the policy's shape. The logit is a weighted elementwise
//! product of the two final hidden states plus the value head applied to the
//! response encoding. The product term lets the classifier compare the two
//! sides directly.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{GroundedExample, Vocabulary, BOS, EOS, SEP};
use crate::error::{Error, Result};
use crate::model::{AdamW, AdamWConfig, Gradients, NetShape, OutputGrad, PolicyValueNet};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub d_embed: usize,
    pub d_hidden: usize,
    /// Constant learning rate. The reference setup used 1e-6 for a large
    /// pretrained encoder; the small encoder here needs a larger step.
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            d_embed: 32,
            d_hidden: 64,
            learning_rate: 1e-2,
            batch_size: 8,
            max_len: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorModel {
    pub net: PolicyValueNet,
    /// Weights of the state-response product term, length `d_hidden`.
    pub pair_weight: Vec<f64>,
    pub vocab: Vocabulary,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorReport {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct PairGrad {
    net: Gradients,
    pair_weight: Vec<f64>,
    loss: f64,
}

impl DiscriminatorModel {
    /// `BOS knowledge SEP history`, keeping the most recent `max_len` tokens
    /// so the latest question is never cut.
    fn state_tokens(&self, example: &GroundedExample) -> Vec<u32> {
        let mut seq = vec![BOS];
        seq.extend(self.vocab.encode_text(&example.knowledge));
        for u in &example.history {
            seq.push(SEP);
            seq.extend(self.vocab.encode_text(&u.text));
        }
        tail(seq, self.max_len)
    }

    fn response_tokens(&self, response: &str) -> Vec<u32> {
        let mut seq = vec![SEP];
        seq.extend(self.vocab.encode_text(response));
        seq.push(EOS);
        seq.truncate(self.max_len);
        seq
    }

    fn logit_from(&self, hs: &[f64], hr: &[f64]) -> f64 {
        let product: f64 = self.pair_weight.iter().zip(hs).zip(hr).map(|((w, a), b)| w * a * b).sum();
        product + self.net.value(hr)
    }

    fn logit(&self, example: &GroundedExample, response: &str) -> Result<f64> {
        let hs = self.net.encode(&self.state_tokens(example))?;
        let hr = self.net.encode(&self.response_tokens(response))?;
        Ok(self.logit_from(&hs, &hr))
    }

    /// Probability that `response` is the ground-truth response, strictly
    /// inside (0, 1).
    pub fn score(&self, example: &GroundedExample, response: &str) -> Result<f64> {
        let p = sigmoid(self.logit(example, response)?);
        Ok(p.clamp(f64::EPSILON, 1.0 - f64::EPSILON))
    }

    /// Binary cross-entropy gradient for one labeled pair.
    fn grad(&self, example: &GroundedExample, response: &str, label: f64) -> Result<PairGrad> {
        let s = self.state_tokens(example);
        let r = self.response_tokens(response);
        let ts = self.net.trace(&s, s.len() - 1)?;
        let tr = self.net.trace(&r, r.len() - 1)?;
        let hs = self.net.encode(&s)?;
        let hr = self.net.encode(&r)?;
        let logit = self.logit_from(&hs, &hr);
        // stable BCE with logits
        let loss = logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p();
        let d = sigmoid(logit) - label;
        let w = &self.pair_weight;
        let dhs: Vec<f64> = (0..hs.len()).map(|i| d * w[i] * hr[i]).collect();
        let dhr: Vec<f64> = (0..hr.len()).map(|i| d * w[i] * hs[i]).collect();
        let mut net = self.net.backward(&ts, &[OutputGrad::hidden(dhs)])?;
        let gr = self.net.backward(
            &tr,
            &[OutputGrad {
                dvalue: d,
                dhidden: dhr,
                ..OutputGrad::zero()
            }],
        )?;
        net.add_assign(&gr);
        let pair_weight = hs.iter().zip(&hr).map(|(a, b)| d * a * b).collect();
        Ok(PairGrad { net, pair_weight, loss })
    }
}

fn tail(mut seq: Vec<u32>, max_len: usize) -> Vec<u32> {
    if seq.len() > max_len {
        seq.drain(..seq.len() - max_len);
    }
    seq
}

/// Trains the classifier on balanced positive (ground-truth) and negative
/// (model-generated or mismatched) responses with binary cross-entropy.
pub fn train_discriminator(
    positives: &[(GroundedExample, String)],
    negatives: &[(GroundedExample, String)],
    vocab: &Vocabulary,
    epochs: usize,
    cfg: &DiscriminatorConfig,
) -> Result<(DiscriminatorModel, DiscriminatorReport)> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::invalid("discriminator needs non-empty positive and negative sets"));
    }
    if positives.len() != negatives.len() {
        return Err(Error::invalid(format!(
            "discriminator sets must be balanced ({} positives vs {} negatives)",
            positives.len(),
            negatives.len()
        )));
    }
    if epochs == 0 {
        return Err(Error::invalid("epochs must be at least 1"));
    }
    if cfg.max_len < 2 {
        return Err(Error::invalid("discriminator max_len must be at least 2"));
    }
    let shape = NetShape::with_dims(vocab.len(), cfg.d_embed, cfg.d_hidden);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d15c);
    let mut model = DiscriminatorModel {
        net: PolicyValueNet::new(shape, cfg.seed),
        pair_weight: (0..cfg.d_hidden).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        vocab: vocab.clone(),
        max_len: cfg.max_len,
    };
    let mut data: Vec<(&GroundedExample, &str, f64)> = positives
        .iter()
        .map(|(e, r)| (e, r.as_str(), 1.0))
        .chain(negatives.iter().map(|(e, r)| (e, r.as_str(), 0.0)))
        .collect();
    let mut opt = AdamW::new(shape.n_params(), AdamWConfig::default());
    let mut opt_pair = AdamW::new(cfg.d_hidden, AdamWConfig::default());
    let mut epoch_losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        data.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in data.chunks(cfg.batch_size.max(1)) {
            let results = par::map(batch, |(e, r, y)| model.grad(e, r, *y));
            let mut g_net = Gradients::zeros(shape);
            let mut g_pair = vec![0.0; cfg.d_hidden];
            for res in results {
                let g = res?;
                g_net.add_assign(&g.net);
                g_pair.iter_mut().zip(&g.pair_weight).for_each(|(a, b)| *a += b);
                total += g.loss;
            }
            // mean over the batch, then clip the joint norm at 1
            let norm = (g_net.norm().powi(2) + g_pair.iter().map(|x| x * x).sum::<f64>()).sqrt();
            let scale = (1.0 / batch.len() as f64) * (1.0f64).min(batch.len() as f64 / norm.max(f64::MIN_POSITIVE));
            g_net.scale(scale);
            g_pair.iter_mut().for_each(|x| *x *= scale);
            opt.step(&mut model.net, &g_net, cfg.learning_rate);
            opt_pair.step_slice(&mut model.pair_weight, &g_pair, cfg.learning_rate);
        }
        let mean = total / data.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite("discriminator loss".into()));
        }
        epoch_losses.push(mean);
    }
    let correct = par::map(&data, |(e, r, y)| model.score(e, r).map(|p| (p > 0.5) == (*y > 0.5)))
        .into_iter()
        .collect::<Result<Vec<bool>>>()?
        .into_iter()
        .filter(|&c| c)
        .count();
    let report = DiscriminatorReport {
        epoch_losses,
        train_accuracy: correct as f64 / data.len() as f64,
    };
    Ok((model, report))
}

/// Terminal reward from the classifier, used in place of the blend.
pub fn discriminator_reward(model: &DiscriminatorModel, example: &GroundedExample, output: &str) -> Result<f64> {
    model.score(example, output)
}
