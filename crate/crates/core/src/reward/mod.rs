//! Reward shaping: the accuracy/faithfulness blend assigned to the final
//! token, the per-token KL penalty against the frozen reference policy and
//! its adaptive coefficient.

mod discriminator;

pub use discriminator::{
    discriminator_reward, train_discriminator, DiscriminatorConfig, DiscriminatorModel, DiscriminatorReport,
};

use serde::{Deserialize, Serialize};

use crate::corpus::GroundedExample;
use crate::error::{Error, Result};
use crate::metrics::{embed_f1, sentence_bleu, tokenize_eval, EmbeddingProvider};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlendConfig {
    pub alpha: f64,
}

impl BlendConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid(format!("alpha {alpha} is outside [0, 1]")));
        }
        Ok(BlendConfig { alpha })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlEstimator {
    /// `log π(a|s) − log π0(a|s)` at the sampled token.
    SampledLogRatio,
    /// `Σ_a π(a|s) (log π(a|s) − log π0(a|s))` over the whole vocabulary.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlConfig {
    pub beta_init: f64,
    pub target_kl: f64,
    /// Controller gain.
    pub k_beta: f64,
    pub clip_band: f64,
    pub estimator: KlEstimator,
}

impl Default for KlConfig {
    fn default() -> Self {
        KlConfig {
            beta_init: 0.1,
            target_kl: 0.05,
            k_beta: 0.1,
            clip_band: 0.2,
            estimator: KlEstimator::SampledLogRatio,
        }
    }
}

impl KlConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.beta_init, self.target_kl, self.clip_band];
        if positive.iter().any(|x| !x.is_finite() || *x <= 0.0) || !self.k_beta.is_finite() || self.k_beta < 0.0 {
            return Err(Error::invalid("KL config: beta_init, target_kl, clip_band must be > 0 and k_beta ≥ 0"));
        }
        Ok(())
    }
}

/// Accuracy (BLEU/100 against the reference) and faithfulness (embedding
/// F1/100 against the knowledge) of one response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerminalScores {
    pub acc: f64,
    pub faith: f64,
}

impl TerminalScores {
    pub fn compute(output: &str, example: &GroundedExample, provider: &dyn EmbeddingProvider) -> Result<Self> {
        let hyp = tokenize_eval(output);
        if hyp.is_empty() {
            return Ok(TerminalScores { acc: 0.0, faith: 0.0 });
        }
        let reference = tokenize_eval(&example.reference);
        let knowledge = tokenize_eval(&example.knowledge);
        Ok(TerminalScores {
            acc: sentence_bleu(&hyp, &reference)? / 100.0,
            faith: embed_f1(&hyp, &knowledge, provider)? / 100.0,
        })
    }

    pub fn blend(&self, alpha: f64) -> f64 {
        alpha * self.acc + (1.0 - alpha) * self.faith
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub acc: f64,
    pub faith: f64,
    pub blended: f64,
    pub per_token_kl_penalty: Vec<f64>,
    pub shaped_rewards: Vec<f64>,
}

/// Terminal reward `α·acc + (1 − α)·faith`. The per-token fields are left
/// empty; an empty response scores zero on both terms.
pub fn blended_terminal_reward(
    output: &str,
    example: &GroundedExample,
    cfg: &BlendConfig,
    provider: &dyn EmbeddingProvider,
) -> Result<RewardBreakdown> {
    let s = TerminalScores::compute(output, example, provider)?;
    Ok(RewardBreakdown {
        acc: s.acc,
        faith: s.faith,
        blended: s.blend(cfg.alpha),
        per_token_kl_penalty: Vec::new(),
        shaped_rewards: Vec::new(),
    })
}

pub fn kl_terms(logp_policy: &[f64], logp_ref: &[f64]) -> Result<Vec<f64>> {
    if logp_policy.len() != logp_ref.len() {
        return Err(Error::LengthMismatch {
            what: "policy vs reference log-probs",
            left: logp_policy.len(),
            right: logp_ref.len(),
        });
    }
    if logp_policy.iter().chain(logp_ref).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("log-probability".into()));
    }
    Ok(logp_policy.iter().zip(logp_ref).map(|(p, q)| p - q).collect())
}

/// Full-distribution KL per position from log-probability rows.
pub fn full_kl_terms(policy_rows: &[Vec<f64>], ref_rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    if policy_rows.len() != ref_rows.len() {
        return Err(Error::LengthMismatch {
            what: "policy vs reference rows",
            left: policy_rows.len(),
            right: ref_rows.len(),
        });
    }
    Ok(policy_rows
        .iter()
        .zip(ref_rows)
        .map(|(p, q)| p.iter().zip(q).map(|(lp, lq)| lp.exp() * (lp - lq)).sum())
        .collect())
}

/// `r_t = −β·kl_t`, with the terminal reward added at the last token.
pub fn shape_rewards(terminal: f64, klterms: &[f64], beta: f64) -> Vec<f64> {
    let mut r: Vec<f64> = klterms.iter().map(|k| -beta * k).collect();
    if let Some(last) = r.last_mut() {
        *last += terminal;
    }
    r
}

/// Proportional controller: `β · (1 + k_β · clip((kl − target)/target, ±band))`.
pub fn adapt_beta(beta: f64, observed_mean_kl: f64, cfg: &KlConfig) -> f64 {
    let e = ((observed_mean_kl - cfg.target_kl) / cfg.target_kl).clamp(-cfg.clip_band, cfg.clip_band);
    beta * (1.0 + cfg.k_beta * e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Speaker, Utterance};
    use crate::metrics::HashedProvider;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn blend_endpoints_and_midpoint() {
        let s = TerminalScores { acc: 0.6, faith: 0.2 };
        assert_eq!(s.blend(1.0), 0.6);
        assert_eq!(s.blend(0.0), 0.2);
        let s = TerminalScores { acc: 0.40, faith: 0.90 };
        assert_abs_diff_eq!(s.blend(0.5), 0.65, epsilon = 1e-12);
    }

    #[test]
    fn blended_reward_on_example() {
        let ex = GroundedExample {
            id: "1".into(),
            history: vec![Utterance::new(Speaker::User, "q").unwrap()],
            knowledge: "w1 w2 w3 w4".into(),
            reference: "w1 w2 w3 w4".into(),
        };
        let p = HashedProvider::default();
        let r = blended_terminal_reward("w1 w2 w3 w4", &ex, &BlendConfig::new(0.3).unwrap(), &p).unwrap();
        assert_eq!((r.acc, r.faith, r.blended), (1.0, 1.0, 1.0));
        let r = blended_terminal_reward("", &ex, &BlendConfig::new(0.3).unwrap(), &p).unwrap();
        assert_eq!((r.acc, r.faith, r.blended), (0.0, 0.0, 0.0));
        assert!(BlendConfig::new(1.5).is_err());
    }

    #[test]
    fn kl_terms_cases() {
        assert_eq!(kl_terms(&[-1.0, -2.0], &[-1.0, -2.0]).unwrap(), vec![0.0, 0.0]);
        let k = kl_terms(&[0.5f64.ln()], &[0.25f64.ln()]).unwrap();
        assert_abs_diff_eq!(k[0], 2f64.ln(), epsilon = 1e-12);
        assert!(kl_terms(&[0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn full_kl_is_zero_for_equal_rows_and_positive_otherwise() {
        let p = vec![vec![0.5f64.ln(), 0.5f64.ln()]];
        let q = vec![vec![0.25f64.ln(), 0.75f64.ln()]];
        assert_eq!(full_kl_terms(&p, &p).unwrap(), vec![0.0]);
        assert!(full_kl_terms(&p, &q).unwrap()[0] > 0.0);
    }

    #[test]
    fn shaping_cases() {
        assert_eq!(shape_rewards(1.0, &[0.0, 0.0, 0.0], 0.1), vec![0.0, 0.0, 1.0]);
        let r = shape_rewards(0.0, &[2f64.ln()], 0.1);
        assert_abs_diff_eq!(r[0], -0.0693, epsilon = 1e-4);
        assert_eq!(shape_rewards(0.7, &[0.3, -0.2], 0.0), vec![0.0, 0.7]);
    }

    #[test]
    fn controller_cases() {
        let cfg = KlConfig {
            target_kl: 0.05,
            k_beta: 0.1,
            clip_band: 0.2,
            ..Default::default()
        };
        assert_eq!(adapt_beta(0.3, 0.05, &cfg), 0.3);
        assert_abs_diff_eq!(adapt_beta(0.3, 0.1, &cfg), 0.3 * 1.02, epsilon = 1e-15);
        assert_abs_diff_eq!(adapt_beta(0.3, 0.0, &cfg), 0.3 * 0.98, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn blend_is_affine(acc in 0.0f64..1.0, faith in 0.0f64..1.0, a in 0.0f64..1.0) {
            let s = TerminalScores { acc, faith };
            prop_assert!((s.blend(a) - (faith + a * (acc - faith))).abs() < 1e-12);
        }

        #[test]
        fn shaping_conserves_terminal(terminal in -1.0f64..1.0, kl in prop::collection::vec(-2.0f64..2.0, 1..20), beta in 0.0f64..5.0) {
            let r = shape_rewards(terminal, &kl, beta);
            let total: f64 = r.iter().sum();
            prop_assert!((total - (terminal - beta * kl.iter().sum::<f64>())).abs() < 1e-12);
        }

        #[test]
        fn controller_monotone(beta in 0.01f64..10.0, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let cfg = KlConfig::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(adapt_beta(beta, lo, &cfg) <= adapt_beta(beta, hi, &cfg));
        }
    }
}
