//! Supervised fine-tuning and KL-regularized PPO.

mod ppo;
mod sft;

pub use ppo::{
    decode_split, mean_kl_to_reference, ppo_gradients, ppo_update, rollout, train_ppo, LogRecord, PpoOutcome,
    PpoStats, RewardSource, RolloutContext,
};
pub use sft::{train_sft, SftConfig, SftReport};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AdamWConfig, DecodeConfig};
use crate::reward::KlConfig;

/// One sampled response with everything the update needs. Every per-token
/// list has one entry per action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub example_id: String,
    pub state: Vec<u32>,
    pub actions: Vec<u32>,
    pub response: String,
    pub logprobs_old: Vec<f64>,
    pub ref_logprobs: Vec<f64>,
    pub values: Vec<f64>,
    pub kl_terms: Vec<f64>,
    pub terminal_reward: f64,
    pub shaped_rewards: Vec<f64>,
    /// Empty until [`Trajectory::fill_advantages`] runs.
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Episodes end at EOS or at the horizon, so the bootstrap value is 0.
    pub fn fill_advantages(&mut self, gamma: f64, lam: f64) -> Result<()> {
        let (adv, ret) = compute_gae(&self.shaped_rewards, &self.values, 0.0, gamma, lam)?;
        self.advantages = adv;
        self.returns = ret;
        Ok(())
    }
}

/// Generalized advantage estimates by the backward recursion
/// `A_t = δ_t + γλ·A_{t+1}` with `δ_t = r_t + γ·V_{t+1} − V_t`, and
/// `returns[t] = A_t + V_t`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    bootstrap_value: f64,
    gamma: f64,
    lam: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.len() != values.len() {
        return Err(Error::LengthMismatch {
            what: "rewards vs values",
            left: rewards.len(),
            right: values.len(),
        });
    }
    if rewards.is_empty() {
        return Err(Error::invalid("GAE needs at least one step"));
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { bootstrap_value };
        let delta = rewards[t] + gamma * next_value - values[t];
        next_adv = delta + gamma * lam * next_adv;
        adv[t] = next_adv;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lam: f64,
    pub clip_eps: f64,
    pub epochs_per_batch: usize,
    pub batch_episodes: usize,
    pub value_coef: f64,
    /// Desk default for the small recurrent net. Large pretrained models are
    /// usually tuned around 5e-7.
    pub learning_rate: f64,
    pub total_iterations: usize,
    pub eval_every: usize,
    pub kl: KlConfig,
    /// Rollout sampling. Validation always uses beam search of width 4 with
    /// the same `max_new_tokens`.
    pub decode: DecodeConfig,
    pub max_grad_norm: f64,
    /// Token budget for the encoded state.
    pub max_len: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            lam: 0.95,
            clip_eps: 0.2,
            epochs_per_batch: 4,
            batch_episodes: 16,
            value_coef: 0.5,
            learning_rate: 3e-4,
            total_iterations: 10_000,
            eval_every: 100,
            kl: KlConfig::default(),
            decode: DecodeConfig::default(),
            max_grad_norm: 1.0,
            max_len: crate::corpus::DEFAULT_MAX_LEN,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lam) {
            return Err(Error::invalid("gamma and lam must lie in [0, 1]"));
        }
        if self.clip_eps.is_nan() || self.clip_eps <= 0.0 {
            return Err(Error::invalid("clip_eps must be > 0"));
        }
        if self.eval_every == 0 || self.epochs_per_batch == 0 || self.batch_episodes == 0 {
            return Err(Error::invalid("eval_every, epochs_per_batch and batch_episodes must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !(self.value_coef >= 0.0) {
            return Err(Error::invalid("learning_rate must be > 0 and value_coef ≥ 0"));
        }
        if self.max_len < 2 {
            return Err(Error::invalid("max_len must be at least 2"));
        }
        self.kl.validate()?;
        self.decode.validate()
    }

    pub fn eval_decode(&self) -> DecodeConfig {
        DecodeConfig::beam(self.decode.max_new_tokens)
    }
}

/// Per-episode generator seed from the run seed and the episode's position.
pub(crate) fn episode_seed(seed: u64, iteration: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(iteration.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
