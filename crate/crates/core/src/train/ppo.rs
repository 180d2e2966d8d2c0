use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{episode_seed, PpoConfig, Trajectory};
use crate::corpus::{encode_prompt, GroundedExample, Vocabulary};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_corpus, EmbeddingProvider, MetricReport};
use crate::model::{
    beam_search, clip_grad_norm, greedy, sample_topk_with, AdamW, DecodeConfig, DecodeMode, Gradients, OutputGrad,
    PolicyValueNet,
};
use crate::par;
use crate::reward::{
    adapt_beta, discriminator_reward, full_kl_terms, kl_terms, shape_rewards, BlendConfig, DiscriminatorModel,
    KlEstimator, TerminalScores,
};

/// What scores a finished response.
#[derive(Debug, Clone, PartialEq)]
pub enum RewardSource {
    Blended(BlendConfig),
    Discriminator(Box<DiscriminatorModel>),
}

impl RewardSource {
    pub fn terminal(&self, response: &str, example: &GroundedExample, provider: &dyn EmbeddingProvider) -> Result<f64> {
        match self {
            RewardSource::Blended(cfg) => Ok(TerminalScores::compute(response, example, provider)?.blend(cfg.alpha)),
            RewardSource::Discriminator(model) => discriminator_reward(model, example, response),
        }
    }
}

/// Read-only inputs shared by every rollout in a batch.
#[derive(Clone, Copy)]
pub struct RolloutContext<'a> {
    pub vocab: &'a Vocabulary,
    pub reward: &'a RewardSource,
    pub provider: &'a dyn EmbeddingProvider,
    pub decode: DecodeConfig,
    pub kl_estimator: KlEstimator,
    pub beta: f64,
    pub max_len: usize,
}

fn check_vocab(net: &PolicyValueNet, vocab: &Vocabulary, what: &str) -> Result<()> {
    if net.shape().vocab != vocab.len() {
        return Err(Error::invalid(format!(
            "{what} has vocabulary size {} but the vocabulary has {} tokens",
            net.shape().vocab,
            vocab.len()
        )));
    }
    Ok(())
}

/// Samples one response from `net` and records everything PPO needs. The
/// terminal reward lands on the last token and every token pays
/// `β·klterm` for drifting from `ref_net`.
pub fn rollout(
    net: &PolicyValueNet,
    ref_net: &PolicyValueNet,
    example: &GroundedExample,
    ctx: &RolloutContext<'_>,
    rng: &mut impl Rng,
) -> Result<Trajectory> {
    check_vocab(net, ctx.vocab, "policy")?;
    check_vocab(ref_net, ctx.vocab, "reference policy")?;
    let decode = match ctx.decode.mode {
        DecodeMode::Topk => ctx.decode,
        DecodeMode::Greedy => DecodeConfig { k: 1, ..ctx.decode },
        DecodeMode::Beam => return Err(Error::invalid("rollouts need a sampling decoder, not beam search")),
    };
    let state = encode_prompt(example, ctx.vocab, ctx.max_len);
    let sampled = sample_topk_with(net, &state, &decode, rng)?;
    let (ref_logprobs, kl) = match ctx.kl_estimator {
        KlEstimator::SampledLogRatio => {
            let r = ref_net.sequence_logprobs(&state, &sampled.actions)?;
            let kl = kl_terms(&sampled.logprobs, &r)?;
            (r, kl)
        }
        KlEstimator::Full => {
            let p = net.trace_actions(&state, &sampled.actions)?;
            let q = ref_net.trace_actions(&state, &sampled.actions)?;
            let r = sampled.actions.iter().zip(&q.logp).map(|(&a, row)| row[a as usize]).collect();
            (r, full_kl_terms(&p.logp, &q.logp)?)
        }
    };
    let response = ctx.vocab.decode(&sampled.actions);
    let terminal = ctx.reward.terminal(&response, example, ctx.provider)?;
    Ok(Trajectory {
        example_id: example.id.clone(),
        shaped_rewards: shape_rewards(terminal, &kl, ctx.beta),
        state,
        actions: sampled.actions,
        response,
        logprobs_old: sampled.logprobs,
        ref_logprobs,
        values: sampled.values,
        kl_terms: kl,
        terminal_reward: terminal,
        advantages: Vec::new(),
        returns: Vec::new(),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub epoch_policy_losses: Vec<f64>,
    pub epoch_value_losses: Vec<f64>,
    /// Fraction of tokens whose clipped term was active, per epoch.
    pub epoch_clip_fractions: Vec<f64>,
    /// Gradient norms before clipping, per epoch.
    pub epoch_grad_norms: Vec<f64>,
    /// Mean per-token KL estimate to the reference policy at rollout time.
    pub mean_kl_to_ref: f64,
}

/// Per-batch advantage normalization to mean 0 and unit standard deviation,
/// with the standard deviation floored at 1e-8.
fn normalized_advantages(batch: &[Trajectory]) -> Vec<Vec<f64>> {
    let all: Vec<f64> = batch.iter().flat_map(|t| t.advantages.iter().copied()).collect();
    if all.iter().all(|&a| a == all[0]) {
        // skip the division so rounding in the mean cannot leak through the floor
        return batch.iter().map(|t| vec![0.0; t.len()]).collect();
    }
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    batch
        .iter()
        .map(|t| t.advantages.iter().map(|a| (a - mean) / std).collect())
        .collect()
}

struct TrajectoryGrad {
    grads: Gradients,
    policy_loss: f64,
    value_loss: f64,
    clipped: usize,
}

fn trajectory_grad(
    net: &PolicyValueNet,
    traj: &Trajectory,
    adv: &[f64],
    cfg: &PpoConfig,
    n_tokens: f64,
) -> Result<TrajectoryGrad> {
    let tr = net.trace_actions(&traj.state, &traj.actions)?;
    let (lo, hi) = (1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
    let mut out = TrajectoryGrad {
        grads: Gradients::zeros(net.shape()),
        policy_loss: 0.0,
        value_loss: 0.0,
        clipped: 0,
    };
    let mut heads = Vec::with_capacity(traj.len());
    for t in 0..traj.len() {
        let a = traj.actions[t] as usize;
        let ratio = (tr.logp[t][a] - traj.logprobs_old[t]).exp();
        if !ratio.is_finite() {
            return Err(Error::NonFinite(format!(
                "probability ratio at token {t} of episode {}",
                traj.example_id
            )));
        }
        let unclipped = ratio * adv[t];
        let clipped = ratio.clamp(lo, hi) * adv[t];
        // the gradient flows through whichever term is the minimum; the
        // clipped term is constant in the parameters
        let coeff = if unclipped <= clipped {
            -adv[t] * ratio / n_tokens
        } else {
            out.clipped += 1;
            0.0
        };
        out.policy_loss -= unclipped.min(clipped) / n_tokens;
        let err = tr.values[t] - traj.returns[t];
        out.value_loss += err * err / n_tokens;
        heads.push(OutputGrad::from_logp(
            &tr.logp[t],
            a,
            coeff,
            cfg.value_coef * 2.0 * err / n_tokens,
        ));
    }
    out.grads = net.backward(&tr, &heads)?;
    Ok(out)
}

/// Gradient of `policy_loss + value_coef·value_loss` for the batch at the
/// current parameters. Losses are token means over the whole batch.
pub fn ppo_gradients(net: &PolicyValueNet, batch: &[Trajectory], cfg: &PpoConfig) -> Result<(Gradients, f64, f64, f64)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty PPO batch"));
    }
    for t in batch {
        let n = t.len();
        if n == 0
            || [t.logprobs_old.len(), t.values.len(), t.advantages.len(), t.returns.len()]
                .iter()
                .any(|&l| l != n)
        {
            return Err(Error::invalid(format!(
                "trajectory {} has inconsistent lengths or no advantages",
                t.example_id
            )));
        }
    }
    let adv = normalized_advantages(batch);
    let n_tokens: usize = batch.iter().map(|t| t.len()).sum();
    let items: Vec<(&Trajectory, &Vec<f64>)> = batch.iter().zip(&adv).collect();
    let parts = par::map(&items, |(t, a)| trajectory_grad(net, t, a, cfg, n_tokens as f64));
    let mut grads = Gradients::zeros(net.shape());
    let (mut pl, mut vl, mut clipped) = (0.0, 0.0, 0usize);
    for p in parts {
        let p = p?;
        grads.add_assign(&p.grads);
        pl += p.policy_loss;
        vl += p.value_loss;
        clipped += p.clipped;
    }
    if !pl.is_finite() || !vl.is_finite() {
        return Err(Error::NonFinite(format!("PPO loss (policy {pl}, value {vl})")));
    }
    Ok((grads, pl, vl, clipped as f64 / n_tokens as f64))
}

/// `epochs_per_batch` optimizer steps on one batch of trajectories with
/// advantages already filled in.
pub fn ppo_update(net: &mut PolicyValueNet, opt: &mut AdamW, batch: &[Trajectory], cfg: &PpoConfig) -> Result<PpoStats> {
    let mut stats = PpoStats {
        mean_kl_to_ref: mean_per_token(batch.iter().map(|t| &t.kl_terms)),
        ..Default::default()
    };
    for _ in 0..cfg.epochs_per_batch {
        let (mut grads, pl, vl, clip_frac) = ppo_gradients(net, batch, cfg)?;
        let norm = clip_grad_norm(&mut grads, cfg.max_grad_norm);
        opt.step(net, &grads, cfg.learning_rate);
        stats.epoch_policy_losses.push(pl);
        stats.epoch_value_losses.push(vl);
        stats.epoch_clip_fractions.push(clip_frac);
        stats.epoch_grad_norms.push(norm);
    }
    Ok(stats)
}

fn mean_per_token<'a>(rows: impl Iterator<Item = &'a Vec<f64>>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for r in rows {
        sum += r.iter().sum::<f64>();
        n += r.len();
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Decodes every example. Sampling uses a per-example generator derived
/// from `decode.seed`, so results do not depend on scheduling.
pub fn decode_split(
    net: &PolicyValueNet,
    vocab: &Vocabulary,
    examples: &[GroundedExample],
    max_len: usize,
    decode: &DecodeConfig,
) -> Result<Vec<String>> {
    check_vocab(net, vocab, "policy")?;
    decode.validate()?;
    let indexed: Vec<(usize, &GroundedExample)> = examples.iter().enumerate().collect();
    par::map(&indexed, |(i, ex)| {
        let state = encode_prompt(ex, vocab, max_len);
        let tokens = match decode.mode {
            DecodeMode::Beam => beam_search(net, &state, decode)?,
            DecodeMode::Greedy => greedy(net, &state, decode.max_new_tokens)?,
            DecodeMode::Topk => {
                let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(decode.seed, 0, *i as u64));
                sample_topk_with(net, &state, decode, &mut rng)?.actions
            }
        };
        Ok(vocab.decode(&tokens))
    })
    .into_iter()
    .collect()
}

/// Mean per-token full-distribution KL from `policy` to `reference` along
/// responses sampled from `policy`.
pub fn mean_kl_to_reference(
    policy: &PolicyValueNet,
    reference: &PolicyValueNet,
    examples: &[GroundedExample],
    vocab: &Vocabulary,
    cfg: &PpoConfig,
    seed: u64,
) -> Result<f64> {
    let indexed: Vec<(usize, &GroundedExample)> = examples.iter().enumerate().collect();
    let rows = par::map(&indexed, |(i, ex)| -> Result<Vec<f64>> {
        let state = encode_prompt(ex, vocab, cfg.max_len);
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(seed, u64::MAX, *i as u64));
        let s = sample_topk_with(policy, &state, &cfg.decode, &mut rng)?;
        let p = policy.trace_actions(&state, &s.actions)?;
        let q = reference.trace_actions(&state, &s.actions)?;
        full_kl_terms(&p.logp, &q.logp)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(mean_per_token(rows.iter()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Iteration {
        iteration: usize,
        mean_terminal_reward: f64,
        mean_kl: f64,
        /// Coefficient used for this iteration's rollouts.
        beta: f64,
        policy_loss: f64,
        value_loss: f64,
        clip_fraction: f64,
        mean_response_tokens: f64,
    },
    Eval {
        iteration: usize,
        report: MetricReport,
        /// Mean terminal reward of the beam outputs under the training
        /// reward.
        mean_reward: f64,
    },
}

#[derive(Debug, Clone)]
pub struct PpoOutcome {
    /// Checkpoint with the highest validation overall score.
    pub best: PolicyValueNet,
    pub best_iteration: usize,
    pub best_report: MetricReport,
    pub final_net: PolicyValueNet,
    pub final_beta: f64,
    pub log: Vec<LogRecord>,
}

struct Evaluated {
    report: MetricReport,
    mean_reward: f64,
}

fn evaluate(
    net: &PolicyValueNet,
    val: &[GroundedExample],
    vocab: &Vocabulary,
    cfg: &PpoConfig,
    reward: &RewardSource,
    provider: &dyn EmbeddingProvider,
) -> Result<Evaluated> {
    let outputs = decode_split(net, vocab, val, cfg.max_len, &cfg.eval_decode())?;
    let report = evaluate_corpus(val, &outputs, provider)?;
    let pairs: Vec<(&GroundedExample, &String)> = val.iter().zip(&outputs).collect();
    let rewards = par::map(&pairs, |(ex, out)| reward.terminal(out, ex, provider))
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
    Ok(Evaluated {
        report,
        mean_reward: rewards.iter().sum::<f64>() / rewards.len() as f64,
    })
}

/// The PPO loop: rollouts, advantages, clipped updates and the β controller,
/// with a beam-search validation pass at iteration 0 and every `eval_every`
/// iterations. `init` also serves as the frozen reference policy.
#[allow(clippy::too_many_arguments)]
pub fn train_ppo(
    train: &[GroundedExample],
    val: &[GroundedExample],
    init: &PolicyValueNet,
    vocab: &Vocabulary,
    cfg: &PpoConfig,
    reward: &RewardSource,
    provider: &dyn EmbeddingProvider,
    on_record: &mut dyn FnMut(&LogRecord),
) -> Result<PpoOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("PPO needs non-empty train and validation splits"));
    }
    check_vocab(init, vocab, "initial policy")?;
    let reference = init.clone();
    let mut net = init.clone();
    let mut opt = AdamW::new(net.params().len(), cfg.optimizer);
    let mut beta = cfg.kl.beta_init;
    let mut log = Vec::new();
    let mut emit = |rec: LogRecord, log: &mut Vec<LogRecord>| {
        on_record(&rec);
        log.push(rec);
    };

    let first = evaluate(&net, val, vocab, cfg, reward, provider)?;
    let mut best = (net.clone(), 0usize, first.report);
    emit(
        LogRecord::Eval {
            iteration: 0,
            report: first.report,
            mean_reward: first.mean_reward,
        },
        &mut log,
    );

    for iteration in 1..=cfg.total_iterations {
        let mut pick = ChaCha8Rng::seed_from_u64(episode_seed(cfg.seed, iteration as u64, u64::MAX));
        let chosen: Vec<(u64, &GroundedExample)> = (0..cfg.batch_episodes as u64)
            .map(|j| (j, &train[pick.gen_range(0..train.len())]))
            .collect();
        let ctx = RolloutContext {
            vocab,
            reward,
            provider,
            decode: cfg.decode,
            kl_estimator: cfg.kl.estimator,
            beta,
            max_len: cfg.max_len,
        };
        let net_ref = &net;
        let mut batch = par::map(&chosen, |(j, ex)| {
            let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(cfg.seed, iteration as u64, *j));
            let mut t = rollout(net_ref, &reference, ex, &ctx, &mut rng)?;
            t.fill_advantages(cfg.gamma, cfg.lam)?;
            Ok(t)
        })
        .into_iter()
        .collect::<Result<Vec<Trajectory>>>()?;
        let stats = ppo_update(&mut net, &mut opt, &batch, cfg)?;
        let n = batch.len() as f64;
        emit(
            LogRecord::Iteration {
                iteration,
                mean_terminal_reward: batch.iter().map(|t| t.terminal_reward).sum::<f64>() / n,
                mean_kl: stats.mean_kl_to_ref,
                beta,
                policy_loss: stats.epoch_policy_losses[0],
                value_loss: stats.epoch_value_losses[0],
                clip_fraction: *stats.epoch_clip_fractions.last().unwrap_or(&0.0),
                mean_response_tokens: batch.iter().map(|t| t.len() as f64).sum::<f64>() / n,
            },
            &mut log,
        );
        batch.clear();
        beta = adapt_beta(beta, stats.mean_kl_to_ref, &cfg.kl);

        if iteration % cfg.eval_every == 0 {
            let ev = evaluate(&net, val, vocab, cfg, reward, provider)?;
            if ev.report.overall > best.2.overall {
                best = (net.clone(), iteration, ev.report);
            }
            emit(
                LogRecord::Eval {
                    iteration,
                    report: ev.report,
                    mean_reward: ev.mean_reward,
                },
                &mut log,
            );
        }
    }
    Ok(PpoOutcome {
        best: best.0,
        best_iteration: best.1,
        best_report: best.2,
        final_net: net,
        final_beta: beta,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabulary, generate_synthetic, SyntheticSpec};
    use crate::metrics::HashedProvider;
    use crate::model::NetShape;
    use crate::train::{train_sft, SftConfig};

    struct Fixture {
        train: Vec<GroundedExample>,
        val: Vec<GroundedExample>,
        vocab: Vocabulary,
        net: PolicyValueNet,
    }

    fn fixture() -> Fixture {
        let ex = generate_synthetic(&SyntheticSpec {
            vocab_size: 24,
            n_distractors: 2,
            span_len: 3,
            n_examples: 24,
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        let vocab = build_vocabulary(&ex, 1).unwrap();
        let net = PolicyValueNet::new(NetShape::with_dims(vocab.len(), 8, 16), 5);
        Fixture {
            train: ex[..16].to_vec(),
            val: ex[16..].to_vec(),
            vocab,
            net,
        }
    }

    fn small_cfg() -> PpoConfig {
        PpoConfig {
            batch_episodes: 4,
            epochs_per_batch: 2,
            learning_rate: 1e-2,
            total_iterations: 4,
            eval_every: 2,
            decode: DecodeConfig {
                max_new_tokens: 5,
                ..Default::default()
            },
            max_len: 64,
            seed: 9,
            ..Default::default()
        }
    }

    fn ctx<'a>(f: &'a Fixture, reward: &'a RewardSource, provider: &'a HashedProvider, beta: f64) -> RolloutContext<'a> {
        RolloutContext {
            vocab: &f.vocab,
            reward,
            provider,
            decode: small_cfg().decode,
            kl_estimator: KlEstimator::SampledLogRatio,
            beta,
            max_len: 64,
        }
    }

    fn batch(f: &Fixture, policy: &PolicyValueNet, n: usize) -> Vec<Trajectory> {
        let reward = RewardSource::Blended(BlendConfig::new(0.5).unwrap());
        let p = HashedProvider::default();
        let c = ctx(f, &reward, &p, 0.1);
        (0..n)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
                let mut t = rollout(policy, &f.net, &f.train[i % f.train.len()], &c, &mut rng).unwrap();
                t.fill_advantages(0.99, 0.95).unwrap();
                t
            })
            .collect()
    }

    fn perturbed(net: &PolicyValueNet) -> PolicyValueNet {
        let mut p = net.clone();
        p.params_mut().iter_mut().enumerate().for_each(|(i, x)| *x += 0.05 * ((i % 7) as f64 - 3.0));
        p
    }

    #[test]
    fn one_token_horizon() {
        let f = fixture();
        let reward = RewardSource::Blended(BlendConfig::new(0.5).unwrap());
        let p = HashedProvider::default();
        let mut c = ctx(&f, &reward, &p, 0.3);
        c.decode.max_new_tokens = 1;
        let policy = perturbed(&f.net);
        let t = rollout(&policy, &f.net, &f.train[0], &c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.shaped_rewards, vec![t.terminal_reward - 0.3 * t.kl_terms[0]]);
    }

    #[test]
    fn equal_policies_pay_no_penalty() {
        let f = fixture();
        let reward = RewardSource::Blended(BlendConfig::new(0.5).unwrap());
        let p = HashedProvider::default();
        for estimator in [KlEstimator::SampledLogRatio, KlEstimator::Full] {
            let mut c = ctx(&f, &reward, &p, 0.3);
            c.kl_estimator = estimator;
            let t = rollout(&f.net, &f.net, &f.train[1], &c, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
            assert!(t.kl_terms.iter().all(|&k| k == 0.0));
            let last = t.len() - 1;
            assert!(t.shaped_rewards[..last].iter().all(|&r| r == 0.0));
            assert_eq!(t.shaped_rewards[last], t.terminal_reward);
            assert_eq!(t.logprobs_old, t.ref_logprobs);
        }
    }

    #[test]
    fn rollouts_are_seeded() {
        let f = fixture();
        let policy = perturbed(&f.net);
        assert_eq!(batch(&f, &policy, 3), batch(&f, &policy, 3));
    }

    #[test]
    fn beam_decoding_cannot_drive_rollouts() {
        let f = fixture();
        let reward = RewardSource::Blended(BlendConfig::new(0.5).unwrap());
        let p = HashedProvider::default();
        let mut c = ctx(&f, &reward, &p, 0.1);
        c.decode = DecodeConfig::beam(4);
        assert!(rollout(&f.net, &f.net, &f.train[0], &c, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn first_epoch_ratio_is_one() {
        let f = fixture();
        let policy = perturbed(&f.net);
        let b = batch(&f, &policy, 6);
        let (_, pl, _, clip) = ppo_gradients(&policy, &b, &small_cfg()).unwrap();
        assert!(pl.abs() < 1e-12, "policy loss {pl}");
        assert_eq!(clip, 0.0);
    }

    #[test]
    fn equal_advantages_give_zero_policy_gradient() {
        let f = fixture();
        let mut b = batch(&f, &f.net, 4);
        for t in &mut b {
            t.advantages = vec![0.37; t.len()];
        }
        let cfg = PpoConfig {
            value_coef: 0.0,
            ..small_cfg()
        };
        let (g, pl, _, _) = ppo_gradients(&f.net, &b, &cfg).unwrap();
        assert_eq!(pl, 0.0);
        assert!(g.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn positive_advantage_raises_probability() {
        let f = fixture();
        let mut t = batch(&f, &f.net, 1).remove(0);
        while t.len() < 2 {
            t = batch(&f, &f.net, 2).remove(1);
        }
        let last = t.len() - 1;
        t.advantages = vec![0.0; t.len()];
        t.advantages[last] = 1.0;
        let cfg = PpoConfig {
            epochs_per_batch: 1,
            learning_rate: 1e-3,
            ..small_cfg()
        };
        let before = f.net.sequence_logprobs(&t.state, &t.actions).unwrap()[last];
        let mut net = f.net.clone();
        let mut opt = AdamW::new(net.params().len(), cfg.optimizer);
        ppo_update(&mut net, &mut opt, std::slice::from_ref(&t), &cfg).unwrap();
        let after = net.sequence_logprobs(&t.state, &t.actions).unwrap()[last];
        assert!(after > before, "{before} -> {after}");
    }

    #[test]
    fn unclipped_update_is_vanilla_policy_gradient() {
        let f = fixture();
        let policy = perturbed(&f.net);
        let b = batch(&f, &policy, 5);
        let cfg = PpoConfig {
            clip_eps: f64::INFINITY,
            epochs_per_batch: 1,
            value_coef: 0.0,
            ..small_cfg()
        };
        let (ppo, _, _, _) = ppo_gradients(&policy, &b, &cfg).unwrap();

        // REINFORCE with batch-normalized advantages, built independently
        let all: Vec<f64> = b.iter().flat_map(|t| t.advantages.clone()).collect();
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let std = (all.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        let mut vanilla = Gradients::zeros(policy.shape());
        for t in &b {
            let tr = policy.trace_actions(&t.state, &t.actions).unwrap();
            let heads: Vec<OutputGrad> = (0..t.len())
                .map(|i| {
                    let a_hat = (t.advantages[i] - mean) / std;
                    OutputGrad::from_logp(&tr.logp[i], t.actions[i] as usize, -a_hat / n, 0.0)
                })
                .collect();
            vanilla.add_assign(&policy.backward(&tr, &heads).unwrap());
        }
        let dot: f64 = ppo.data.iter().zip(&vanilla.data).map(|(a, b)| a * b).sum();
        let cos = dot / (ppo.norm() * vanilla.norm());
        assert!(cos > 0.999, "cosine {cos}");
    }

    #[test]
    fn zero_iterations_returns_init() {
        let f = fixture();
        let cfg = PpoConfig {
            total_iterations: 0,
            ..small_cfg()
        };
        let reward = RewardSource::Blended(BlendConfig::new(0.5).unwrap());
        let out = train_ppo(&f.train, &f.val, &f.net, &f.vocab, &cfg, &reward, &HashedProvider::default(), &mut |_| {})
            .unwrap();
        assert_eq!(out.best, f.net);
        assert_eq!(out.best_iteration, 0);
        assert_eq!(out.log.len(), 1);
        assert!(matches!(out.log[0], LogRecord::Eval { iteration: 0, .. }));
    }

    #[test]
    fn best_checkpoint_dominates_logged_evaluations() {
        let mut f = fixture();
        let sft = SftConfig {
            epochs: 3,
            lr_start: 1e-2,
            max_len: 64,
            ..Default::default()
        };
        let train = f.train.clone();
        train_sft(&train, &mut f.net, &f.vocab, &sft).unwrap();
        let cfg = PpoConfig {
            total_iterations: 6,
            eval_every: 1,
            ..small_cfg()
        };
        let reward = RewardSource::Blended(BlendConfig::new(0.5).unwrap());
        let p = HashedProvider::default();
        let mut streamed = Vec::new();
        let out = train_ppo(&f.train, &f.val, &f.net, &f.vocab, &cfg, &reward, &p, &mut |r| {
            streamed.push(r.clone())
        })
        .unwrap();
        assert_eq!(streamed, out.log);
        let evals: Vec<f64> = out
            .log
            .iter()
            .filter_map(|r| match r {
                LogRecord::Eval { report, .. } => Some(report.overall),
                _ => None,
            })
            .collect();
        assert_eq!(evals.len(), 7);
        assert!(evals.iter().all(|&o| out.best_report.overall >= o));
        let outputs = decode_split(&out.best, &f.vocab, &f.val, 64, &cfg.eval_decode()).unwrap();
        assert_eq!(evaluate_corpus(&f.val, &outputs, &p).unwrap(), out.best_report);
    }

    #[test]
    fn training_is_deterministic() {
        let f = fixture();
        let reward = RewardSource::Blended(BlendConfig::new(0.5).unwrap());
        let p = HashedProvider::default();
        let run = || {
            train_ppo(&f.train, &f.val, &f.net, &f.vocab, &small_cfg(), &reward, &p, &mut |_| {})
                .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.log, b.log);
        assert_eq!(a.final_net, b.final_net);
    }

    #[test]
    fn kl_to_self_is_zero() {
        let f = fixture();
        let kl = mean_kl_to_reference(&f.net, &f.net, &f.val, &f.vocab, &small_cfg(), 1).unwrap();
        assert_eq!(kl, 0.0);
        let other = perturbed(&f.net);
        assert!(mean_kl_to_reference(&other, &f.net, &f.val, &f.vocab, &small_cfg(), 1).unwrap() > 0.0);
    }
}
