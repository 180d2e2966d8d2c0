use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PolicyValueNet;
use crate::corpus::EOS;
use crate::error::{Error, Result};

/// Anything that can be decoded token by token.
pub trait StepModel {
    type State: Clone;

    /// State after consuming `prefix`.
    fn start(&self, prefix: &[u32]) -> Result<Self::State>;

    fn advance(&self, state: &Self::State, token: u32) -> Self::State;

    /// Next-token log-probabilities and the value of `state`.
    fn outputs(&self, state: &Self::State) -> (Vec<f64>, f64);
}

impl StepModel for PolicyValueNet {
    type State = Vec<f64>;

    fn start(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        self.encode(prefix)
    }

    fn advance(&self, state: &Vec<f64>, token: u32) -> Vec<f64> {
        self.step_hidden(state, token)
    }

    fn outputs(&self, state: &Vec<f64>) -> (Vec<f64>, f64) {
        self.heads(state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Topk,
    Beam,
    Greedy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub k: usize,
    pub beam_width: usize,
    pub max_new_tokens: usize,
    pub seed: u64,
    /// Beam scores are divided by `len^length_penalty`; 0 disables.
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            mode: DecodeMode::Topk,
            k: 50,
            beam_width: 4,
            max_new_tokens: 32,
            seed: 0,
            length_penalty: 0.0,
        }
    }
}

impl DecodeConfig {
    pub fn beam(max_new_tokens: usize) -> Self {
        DecodeConfig {
            mode: DecodeMode::Beam,
            max_new_tokens,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.beam_width == 0 || self.max_new_tokens == 0 {
            return Err(Error::invalid("k, beam_width and max_new_tokens must be at least 1"));
        }
        Ok(())
    }
}

/// A sampled continuation. `logprobs` are under the full (unrestricted)
/// policy distribution; `values` are the values of the states each action
/// was taken in.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub actions: Vec<u32>,
    pub logprobs: Vec<f64>,
    pub values: Vec<f64>,
}

fn argmax(logp: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in logp.iter().enumerate() {
        if x > logp[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding; ties go to the lower token id.
pub fn greedy<M: StepModel>(model: &M, prefix: &[u32], max_new_tokens: usize) -> Result<Vec<u32>> {
    let mut state = model.start(prefix)?;
    let mut out = Vec::new();
    for _ in 0..max_new_tokens {
        let (logp, _) = model.outputs(&state);
        let tok = argmax(&logp) as u32;
        out.push(tok);
        if tok == EOS {
            break;
        }
        state = model.advance(&state, tok);
    }
    Ok(out)
}

fn pick_topk(logp: &[f64], k: usize, rng: &mut impl Rng) -> usize {
    let mut idx: Vec<usize> = (0..logp.len()).collect();
    let k = k.min(idx.len());
    let by_prob = |a: &usize, b: &usize| logp[*b].partial_cmp(&logp[*a]).unwrap_or(Ordering::Equal).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, by_prob);
        idx.truncate(k);
    }
    idx.sort_by(by_prob);
    let max = logp[idx[0]];
    let weights: Vec<f64> = idx.iter().map(|&i| (logp[i] - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (w, &i) in weights.iter().zip(&idx) {
        if u < *w {
            return i;
        }
        u -= w;
    }
    *idx.last().unwrap()
}

/// Top-k sampling with a generator seeded from `cfg.seed`.
pub fn sample_topk<M: StepModel>(model: &M, prefix: &[u32], cfg: &DecodeConfig) -> Result<Sampled> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sample_topk_with(model, prefix, cfg, &mut rng)
}

/// Top-k sampling from a caller-supplied generator. Stops after EOS or
/// `max_new_tokens` actions.
pub fn sample_topk_with<M: StepModel>(
    model: &M,
    prefix: &[u32],
    cfg: &DecodeConfig,
    rng: &mut impl Rng,
) -> Result<Sampled> {
    cfg.validate()?;
    let mut state = model.start(prefix)?;
    let mut out = Sampled {
        actions: Vec::new(),
        logprobs: Vec::new(),
        values: Vec::new(),
    };
    for _ in 0..cfg.max_new_tokens {
        let (logp, value) = model.outputs(&state);
        let tok = pick_topk(&logp, cfg.k, rng);
        out.actions.push(tok as u32);
        out.logprobs.push(logp[tok]);
        out.values.push(value);
        if tok as u32 == EOS {
            break;
        }
        state = model.advance(&state, tok as u32);
    }
    Ok(out)
}

struct Hyp<S> {
    tokens: Vec<u32>,
    score: f64,
    state: S,
    finished: bool,
}

fn ranked(score: f64, len: usize, penalty: f64) -> f64 {
    if penalty == 0.0 {
        score
    } else {
        score / (len.max(1) as f64).powf(penalty)
    }
}

/// Beam search over summed log-probabilities. Finished hypotheses stay in
/// the pool and compete with open ones; equal scores are ordered by the
/// lexicographically smaller token sequence.
pub fn beam_search<M: StepModel>(model: &M, prefix: &[u32], cfg: &DecodeConfig) -> Result<Vec<u32>> {
    cfg.validate()?;
    let width = cfg.beam_width;
    let mut beams = vec![Hyp {
        tokens: Vec::new(),
        score: 0.0,
        state: model.start(prefix)?,
        finished: false,
    }];
    let cmp = |a: &Hyp<M::State>, b: &Hyp<M::State>| {
        let (sa, sb) = (
            ranked(a.score, a.tokens.len(), cfg.length_penalty),
            ranked(b.score, b.tokens.len(), cfg.length_penalty),
        );
        sb.partial_cmp(&sa).unwrap_or(Ordering::Equal).then_with(|| a.tokens.cmp(&b.tokens))
    };
    for _ in 0..cfg.max_new_tokens {
        if beams.iter().all(|b| b.finished) {
            break;
        }
        let mut pool: Vec<Hyp<M::State>> = Vec::new();
        for beam in beams {
            if beam.finished {
                pool.push(beam);
                continue;
            }
            let (logp, _) = model.outputs(&beam.state);
            for (tok, lp) in logp.iter().enumerate() {
                let mut tokens = beam.tokens.clone();
                tokens.push(tok as u32);
                pool.push(Hyp {
                    tokens,
                    score: beam.score + lp,
                    state: beam.state.clone(),
                    finished: tok as u32 == EOS,
                });
            }
        }
        pool.sort_by(cmp);
        pool.truncate(width);
        for h in pool.iter_mut().filter(|h| !h.finished) {
            let last = *h.tokens.last().expect("expanded hypothesis has a token");
            h.state = model.advance(&h.state, last);
        }
        beams = pool;
    }
    beams.sort_by(cmp);
    Ok(beams.into_iter().next().map(|h| h.tokens).unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetShape;

    /// Table-driven model over tokens {EOS=2, 5, 6}; the state is the
    /// generated suffix.
    struct Table;

    impl StepModel for Table {
        type State = Vec<u32>;

        fn start(&self, _prefix: &[u32]) -> Result<Vec<u32>> {
            Ok(Vec::new())
        }

        fn advance(&self, state: &Vec<u32>, token: u32) -> Vec<u32> {
            let mut s = state.clone();
            s.push(token);
            s
        }

        fn outputs(&self, state: &Vec<u32>) -> (Vec<f64>, f64) {
            // greedy takes 5 (0.5) then faces a flat 1/3 split; 6 (0.4) leads to a
            // 0.9-probability continuation. Beyond depth 2 EOS is certain.
            let probs: [f64; 3] = match state.as_slice() {
                [] => [0.1, 0.5, 0.4],
                [5] => [0.34, 0.33, 0.33],
                [6] => [0.05, 0.9, 0.05],
                _ => [1.0, 0.0, 0.0],
            };
            let mut lp = vec![f64::NEG_INFINITY; 7];
            lp[2] = probs[0].ln();
            lp[5] = probs[1].ln();
            lp[6] = probs[2].ln();
            (lp, 0.0)
        }
    }

    fn all_sequences(max_len: usize) -> Vec<(Vec<u32>, f64)> {
        let mut out = Vec::new();
        let mut stack = vec![(Vec::<u32>::new(), 0.0)];
        while let Some((seq, score)) = stack.pop() {
            if seq.last() == Some(&EOS) || seq.len() == max_len {
                out.push((seq, score));
                continue;
            }
            let (lp, _) = Table.outputs(&seq);
            for (t, l) in lp.iter().enumerate() {
                if l.is_finite() {
                    let mut s = seq.clone();
                    s.push(t as u32);
                    stack.push((s, score + l));
                }
            }
        }
        out
    }

    #[test]
    fn beam_beats_greedy_on_table() {
        let greedy_seq = greedy(&Table, &[1], 3).unwrap();
        assert_eq!(greedy_seq, vec![5, 2]);
        let cfg = DecodeConfig {
            beam_width: 2,
            max_new_tokens: 3,
            ..DecodeConfig::beam(3)
        };
        let beam = beam_search(&Table, &[1], &cfg).unwrap();
        let best = all_sequences(3)
            .into_iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        assert_eq!(beam, best.0);
        assert_eq!(beam, vec![6, 5, 2]);
    }

    #[test]
    fn wide_beam_finds_global_argmax() {
        let net = PolicyValueNet::new(NetShape::with_dims(4, 3, 5), 11);
        let prefix = [1u32, 3];
        let cfg = DecodeConfig {
            beam_width: 64,
            ..DecodeConfig::beam(3)
        };
        let beam = beam_search(&net, &prefix, &cfg).unwrap();
        // enumerate all sequences ending at EOS or length 3
        let mut best: Option<(Vec<u32>, f64)> = None;
        let mut stack = vec![Vec::<u32>::new()];
        while let Some(seq) = stack.pop() {
            if seq.last() == Some(&EOS) || seq.len() == 3 {
                let s: f64 = net.sequence_logprobs(&prefix, &seq).unwrap().iter().sum();
                if best.as_ref().is_none_or(|(_, b)| s > *b) {
                    best = Some((seq, s));
                }
                continue;
            }
            for t in 0..4u32 {
                let mut s = seq.clone();
                s.push(t);
                stack.push(s);
            }
        }
        assert_eq!(beam, best.unwrap().0);
    }

    #[test]
    fn beam_width_one_is_greedy_and_deterministic() {
        let net = PolicyValueNet::new(NetShape::with_dims(9, 4, 8), 5);
        let cfg = DecodeConfig {
            beam_width: 1,
            ..DecodeConfig::beam(6)
        };
        let b = beam_search(&net, &[1, 7, 8], &cfg).unwrap();
        assert_eq!(b, greedy(&net, &[1, 7, 8], 6).unwrap());
        assert_eq!(b, beam_search(&net, &[1, 7, 8], &cfg).unwrap());
    }

    #[test]
    fn topk_one_is_greedy_and_seeded() {
        let net = PolicyValueNet::new(NetShape::with_dims(9, 4, 8), 5);
        let cfg = DecodeConfig {
            k: 1,
            max_new_tokens: 6,
            ..Default::default()
        };
        let s = sample_topk(&net, &[1, 7], &cfg).unwrap();
        assert_eq!(s.actions, greedy(&net, &[1, 7], 6).unwrap());
        let cfg = DecodeConfig { k: 5, seed: 42, ..cfg };
        assert_eq!(sample_topk(&net, &[1, 7], &cfg).unwrap(), sample_topk(&net, &[1, 7], &cfg).unwrap());
    }

    #[test]
    fn topk_logprobs_are_unrestricted() {
        let net = PolicyValueNet::new(NetShape::with_dims(9, 4, 8), 5);
        let cfg = DecodeConfig {
            k: 2,
            max_new_tokens: 5,
            seed: 3,
            ..Default::default()
        };
        let s = sample_topk(&net, &[1, 7], &cfg).unwrap();
        let (lp, v) = net.score_actions(&[1, 7], &s.actions).unwrap();
        for (a, b) in lp.iter().zip(&s.logprobs) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in v.iter().zip(&s.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn full_k_sampling_matches_policy_distribution() {
        let net = PolicyValueNet::new(NetShape::with_dims(4, 3, 5), 21);
        let prefix = [1u32, 3];
        let (logp, _) = net.heads(&net.encode(&prefix).unwrap());
        let cfg = DecodeConfig {
            k: 4,
            max_new_tokens: 1,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let s = sample_topk_with(&net, &prefix, &cfg, &mut rng).unwrap();
            counts[s.actions[0] as usize] += 1;
        }
        let chi2: f64 = counts
            .iter()
            .zip(&logp)
            .map(|(&c, lp)| {
                let e = n as f64 * lp.exp();
                (c as f64 - e).powi(2) / e
            })
            .sum();
        // 3 degrees of freedom, p = 0.001 critical value
        assert!(chi2 < 16.27, "chi2 = {chi2}, counts = {counts:?}");
    }
}
