//! Policy/value network: a token embedding, one gated recurrent layer shared
//! by a softmax policy head and a scalar value head. All arithmetic is `f64`.

mod checkpoint;
mod decode;
mod optim;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint,
    FORMAT_VERSION,
};
pub use decode::{
    beam_search, greedy, sample_topk, sample_topk_with, DecodeConfig, DecodeMode, Sampled, StepModel,
};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub vocab: usize,
    pub d_embed: usize,
    pub d_hidden: usize,
}

impl NetShape {
    pub fn new(vocab: usize) -> Self {
        NetShape {
            vocab,
            d_embed: 64,
            d_hidden: 128,
        }
    }

    pub fn with_dims(vocab: usize, d_embed: usize, d_hidden: usize) -> Self {
        NetShape {
            vocab,
            d_embed,
            d_hidden,
        }
    }

    fn layout(&self) -> Layout {
        let (v, e, h) = (self.vocab, self.d_embed, self.d_hidden);
        let sizes = [v * e, 3 * h * e, 3 * h * h, 3 * h, v * h, v, h, 1];
        let mut offsets = [0usize; 9];
        for (i, s) in sizes.iter().enumerate() {
            offsets[i + 1] = offsets[i] + s;
        }
        Layout { offsets }
    }

    pub fn n_params(&self) -> usize {
        self.layout().offsets[8]
    }
}

/// Named parameter tensors, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tensor {
    Embedding = 0,
    /// Input weights for the update, reset and candidate gates, `3h × e`.
    GateInput = 1,
    /// Recurrent weights, `3h × h`.
    GateRecurrent = 2,
    GateBias = 3,
    PolicyWeight = 4,
    PolicyBias = 5,
    ValueWeight = 6,
    ValueBias = 7,
}

impl Tensor {
    pub const ALL: [Tensor; 8] = [
        Tensor::Embedding,
        Tensor::GateInput,
        Tensor::GateRecurrent,
        Tensor::GateBias,
        Tensor::PolicyWeight,
        Tensor::PolicyBias,
        Tensor::ValueWeight,
        Tensor::ValueBias,
    ];

    pub fn is_value_head(self) -> bool {
        matches!(self, Tensor::ValueWeight | Tensor::ValueBias)
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    offsets: [usize; 9],
}

impl Layout {
    fn range(&self, t: Tensor) -> std::ops::Range<usize> {
        let i = t as usize;
        self.offsets[i]..self.offsets[i + 1]
    }
}

/// Flat parameter-shaped buffer, used for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    shape: NetShape,
    pub data: Vec<f64>,
}

impl Gradients {
    pub fn zeros(shape: NetShape) -> Self {
        Gradients {
            shape,
            data: vec![0.0; shape.n_params()],
        }
    }

    pub fn tensor(&self, t: Tensor) -> &[f64] {
        &self.data[self.shape.layout().range(t)]
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Ordered sum; summation order is fixed so results are reproducible.
    pub fn sum(shape: NetShape, parts: impl IntoIterator<Item = Gradients>) -> Gradients {
        let mut total = Gradients::zeros(shape);
        for g in parts {
            total.add_assign(&g);
        }
        total
    }
}

/// Gradient of a scalar loss with respect to one position's head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrad {
    /// d loss / d logits, length `vocab`; empty means zero.
    pub dlogits: Vec<f64>,
    pub dvalue: f64,
    /// d loss / d hidden state for losses computed outside the heads,
    /// length `d_hidden`; empty means zero.
    pub dhidden: Vec<f64>,
}

impl OutputGrad {
    pub fn zero() -> Self {
        OutputGrad {
            dlogits: Vec::new(),
            dvalue: 0.0,
            dhidden: Vec::new(),
        }
    }

    /// Converts a gradient with respect to `log p(token)` into logit space:
    /// `d logp_a / d logit_j = [j == a] − p_j`.
    pub fn from_logp(logp_row: &[f64], token: usize, coeff: f64, dvalue: f64) -> Self {
        let mut dlogits: Vec<f64> = logp_row.iter().map(|lp| -coeff * lp.exp()).collect();
        dlogits[token] += coeff;
        OutputGrad {
            dlogits,
            dvalue,
            dhidden: Vec::new(),
        }
    }

    /// Gradient arriving directly at the hidden state.
    pub fn hidden(dhidden: Vec<f64>) -> Self {
        OutputGrad {
            dhidden,
            ..Self::zero()
        }
    }
}

#[derive(Debug, Clone)]
struct StepCache {
    token: usize,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    // recurrent contribution to the candidate gate, before the reset gate
    un: Vec<f64>,
    h: Vec<f64>,
}

/// Forward pass record used for backpropagation. Head outputs exist for
/// positions `head_from..len`.
#[derive(Debug, Clone)]
pub struct Trace {
    steps: Vec<StepCache>,
    pub head_from: usize,
    /// Per-position next-token log-probabilities (from `head_from`).
    pub logp: Vec<Vec<f64>>,
    /// Per-position values (from `head_from`).
    pub values: Vec<f64>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Per-position outputs of [`PolicyValueNet::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub logp: Vec<Vec<f64>>,
    pub values: Vec<f64>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn log_softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    v.iter_mut().for_each(|x| *x -= lse);
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyValueNet {
    shape: NetShape,
    params: Vec<f64>,
}

impl PolicyValueNet {
    /// Random initialization from a seeded generator.
    pub fn new(shape: NetShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = shape.layout();
        let mut params = vec![0.0; shape.n_params()];
        let recur = 1.0 / (shape.d_hidden as f64).sqrt();
        for t in Tensor::ALL {
            let scale = match t {
                Tensor::Embedding => 0.5,
                Tensor::GateInput | Tensor::GateRecurrent => recur,
                Tensor::PolicyWeight | Tensor::ValueWeight => 0.1 * recur,
                Tensor::GateBias | Tensor::PolicyBias | Tensor::ValueBias => 0.0,
            };
            for p in &mut params[layout.range(t)] {
                *p = if scale == 0.0 {
                    0.0
                } else {
                    rng.gen_range(-scale..scale)
                };
            }
        }
        PolicyValueNet { shape, params }
    }

    pub fn from_params(shape: NetShape, params: Vec<f64>) -> Result<Self> {
        if params.len() != shape.n_params() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                shape.n_params(),
                params.len()
            )));
        }
        Ok(PolicyValueNet { shape, params })
    }

    pub fn shape(&self) -> NetShape {
        self.shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn tensor(&self, t: Tensor) -> &[f64] {
        &self.params[self.shape.layout().range(t)]
    }

    pub fn tensor_mut(&mut self, t: Tensor) -> &mut [f64] {
        let r = self.shape.layout().range(t);
        &mut self.params[r]
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("token sequence is empty"));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= self.shape.vocab) {
            return Err(Error::invalid(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.shape.vocab
            )));
        }
        Ok(())
    }

    /// One recurrent step. Returns `(z, r, n, un, h)`.
    fn cell(&self, h_prev: &[f64], token: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let (e, hd) = (self.shape.d_embed, self.shape.d_hidden);
        let layout = self.shape.layout();
        let emb = &self.params[layout.range(Tensor::Embedding)][token * e..(token + 1) * e];
        let w = &self.params[layout.range(Tensor::GateInput)];
        let u = &self.params[layout.range(Tensor::GateRecurrent)];
        let b = &self.params[layout.range(Tensor::GateBias)];

        let mut z = vec![0.0; hd];
        let mut r = vec![0.0; hd];
        let mut n = vec![0.0; hd];
        let mut un = vec![0.0; hd];
        let mut h = vec![0.0; hd];
        for i in 0..hd {
            let zi = i;
            let ri = hd + i;
            z[i] = sigmoid(dot(&w[zi * e..(zi + 1) * e], emb) + dot(&u[zi * hd..(zi + 1) * hd], h_prev) + b[zi]);
            r[i] = sigmoid(dot(&w[ri * e..(ri + 1) * e], emb) + dot(&u[ri * hd..(ri + 1) * hd], h_prev) + b[ri]);
        }
        for i in 0..hd {
            let ni = 2 * hd + i;
            un[i] = dot(&u[ni * hd..(ni + 1) * hd], h_prev);
            n[i] = (dot(&w[ni * e..(ni + 1) * e], emb) + b[ni] + r[i] * un[i]).tanh();
            h[i] = (1.0 - z[i]) * n[i] + z[i] * h_prev[i];
        }
        (z, r, n, un, h)
    }

    /// Advances the hidden state by one token.
    pub fn step_hidden(&self, h_prev: &[f64], token: u32) -> Vec<f64> {
        self.cell(h_prev, token as usize).4
    }

    pub fn initial_hidden(&self) -> Vec<f64> {
        vec![0.0; self.shape.d_hidden]
    }

    /// Next-token log-probabilities and value at a hidden state.
    pub fn heads(&self, h: &[f64]) -> (Vec<f64>, f64) {
        let hd = self.shape.d_hidden;
        let layout = self.shape.layout();
        let wp = &self.params[layout.range(Tensor::PolicyWeight)];
        let bp = &self.params[layout.range(Tensor::PolicyBias)];
        let mut logits: Vec<f64> = (0..self.shape.vocab)
            .map(|j| dot(&wp[j * hd..(j + 1) * hd], h) + bp[j])
            .collect();
        log_softmax_in_place(&mut logits);
        let wv = &self.params[layout.range(Tensor::ValueWeight)];
        let bv = self.params[layout.range(Tensor::ValueBias)][0];
        (logits, dot(wv, h) + bv)
    }

    /// Value head only.
    pub fn value(&self, h: &[f64]) -> f64 {
        let layout = self.shape.layout();
        dot(&self.params[layout.range(Tensor::ValueWeight)], h) + self.params[layout.range(Tensor::ValueBias)][0]
    }

    /// Runs the prefix through the recurrent layer and returns the final
    /// hidden state.
    pub fn encode(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        let mut h = self.initial_hidden();
        for &t in tokens {
            h = self.step_hidden(&h, t);
        }
        Ok(h)
    }

    /// Next-token log-probabilities and values at every input position.
    pub fn forward(&self, tokens: &[u32]) -> Result<Forward> {
        let tr = self.trace(tokens, 0)?;
        Ok(Forward {
            logp: tr.logp,
            values: tr.values,
        })
    }

    /// Forward pass keeping the activations needed by [`Self::backward`].
    pub fn trace(&self, tokens: &[u32], head_from: usize) -> Result<Trace> {
        self.check_tokens(tokens)?;
        let mut steps = Vec::with_capacity(tokens.len());
        let mut logp = Vec::new();
        let mut values = Vec::new();
        let mut h_prev = self.initial_hidden();
        for (pos, &tok) in tokens.iter().enumerate() {
            let (z, r, n, un, h) = self.cell(&h_prev, tok as usize);
            if pos >= head_from {
                let (lp, v) = self.heads(&h);
                logp.push(lp);
                values.push(v);
            }
            let next = h.clone();
            steps.push(StepCache {
                token: tok as usize,
                h_prev,
                z,
                r,
                n,
                un,
                h,
            });
            h_prev = next;
        }
        Ok(Trace {
            steps,
            head_from,
            logp,
            values,
        })
    }

    /// Backpropagation through time. `grads[i]` is the loss gradient at
    /// position `trace.head_from + i`.
    pub fn backward(&self, trace: &Trace, grads: &[OutputGrad]) -> Result<Gradients> {
        let (v, e, hd) = (self.shape.vocab, self.shape.d_embed, self.shape.d_hidden);
        if grads.len() > trace.len() - trace.head_from.min(trace.len()) {
            return Err(Error::invalid("more output gradients than traced head positions"));
        }
        for g in grads {
            if !g.dvalue.is_finite() || g.dlogits.iter().chain(&g.dhidden).any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("loss gradient".into()));
            }
            if !g.dhidden.is_empty() && g.dhidden.len() != hd {
                return Err(Error::LengthMismatch {
                    what: "hidden gradient vs d_hidden",
                    left: g.dhidden.len(),
                    right: hd,
                });
            }
        }
        let layout = self.shape.layout();
        let p = &self.params;
        let wp = &p[layout.range(Tensor::PolicyWeight)];
        let wv = &p[layout.range(Tensor::ValueWeight)];
        let w = &p[layout.range(Tensor::GateInput)];
        let u = &p[layout.range(Tensor::GateRecurrent)];

        let mut out = Gradients::zeros(self.shape);
        let mut g_emb = vec![0.0; v * e];
        let mut g_w = vec![0.0; 3 * hd * e];
        let mut g_u = vec![0.0; 3 * hd * hd];
        let mut g_b = vec![0.0; 3 * hd];
        let mut g_wp = vec![0.0; v * hd];
        let mut g_bp = vec![0.0; v];
        let mut g_wv = vec![0.0; hd];
        let mut g_bv = 0.0;

        let last_with_grad = trace.head_from + grads.len();
        let mut dh_next = vec![0.0; hd];
        let mut dh = vec![0.0; hd];
        let mut da = vec![0.0; 3 * hd];
        for pos in (0..last_with_grad).rev() {
            let st = &trace.steps[pos];
            dh.copy_from_slice(&dh_next);
            if pos >= trace.head_from {
                let g = &grads[pos - trace.head_from];
                if !g.dlogits.is_empty() {
                    for j in 0..v {
                        let dl = g.dlogits[j];
                        if dl == 0.0 {
                            continue;
                        }
                        g_bp[j] += dl;
                        let row = &wp[j * hd..(j + 1) * hd];
                        let grow = &mut g_wp[j * hd..(j + 1) * hd];
                        for i in 0..hd {
                            grow[i] += dl * st.h[i];
                            dh[i] += dl * row[i];
                        }
                    }
                }
                if g.dvalue != 0.0 {
                    g_bv += g.dvalue;
                    for i in 0..hd {
                        g_wv[i] += g.dvalue * st.h[i];
                        dh[i] += g.dvalue * wv[i];
                    }
                }
                for (d, x) in dh.iter_mut().zip(&g.dhidden) {
                    *d += x;
                }
            }

            // h = (1 - z) * n + z * h_prev
            for i in 0..hd {
                let dn = dh[i] * (1.0 - st.z[i]);
                let dz = dh[i] * (st.h_prev[i] - st.n[i]);
                let dan = dn * (1.0 - st.n[i] * st.n[i]);
                let dr = dan * st.un[i];
                da[i] = dz * st.z[i] * (1.0 - st.z[i]);
                da[hd + i] = dr * st.r[i] * (1.0 - st.r[i]);
                da[2 * hd + i] = dan;
                dh_next[i] = dh[i] * st.z[i];
            }
            let emb_row = &p[layout.range(Tensor::Embedding)][st.token * e..(st.token + 1) * e];
            let g_emb_row = &mut g_emb[st.token * e..(st.token + 1) * e];
            for gi in 0..3 * hd {
                let d = da[gi];
                if d == 0.0 {
                    continue;
                }
                g_b[gi] += d;
                let wrow = &w[gi * e..(gi + 1) * e];
                let gwrow = &mut g_w[gi * e..(gi + 1) * e];
                for k in 0..e {
                    gwrow[k] += d * emb_row[k];
                    g_emb_row[k] += d * wrow[k];
                }
                // candidate gate sees the reset-gated recurrent term
                let dr_in = if gi >= 2 * hd { d * st.r[gi - 2 * hd] } else { d };
                let urow = &u[gi * hd..(gi + 1) * hd];
                let gurow = &mut g_u[gi * hd..(gi + 1) * hd];
                for k in 0..hd {
                    gurow[k] += dr_in * st.h_prev[k];
                    dh_next[k] += dr_in * urow[k];
                }
            }
        }

        let parts: [(Tensor, &[f64]); 8] = [
            (Tensor::Embedding, &g_emb),
            (Tensor::GateInput, &g_w),
            (Tensor::GateRecurrent, &g_u),
            (Tensor::GateBias, &g_b),
            (Tensor::PolicyWeight, &g_wp),
            (Tensor::PolicyBias, &g_bp),
            (Tensor::ValueWeight, &g_wv),
            (Tensor::ValueBias, std::slice::from_ref(&g_bv)),
        ];
        for (t, src) in parts {
            out.data[layout.range(t)].copy_from_slice(src);
        }
        Ok(out)
    }

    /// `log π(actions[t] | state, actions[..t])` for every `t`.
    pub fn sequence_logprobs(&self, state: &[u32], actions: &[u32]) -> Result<Vec<f64>> {
        Ok(self.score_actions(state, actions)?.0)
    }

    /// Log-probabilities of the actions and values of the states they were
    /// taken in.
    pub fn score_actions(&self, state: &[u32], actions: &[u32]) -> Result<(Vec<f64>, Vec<f64>)> {
        let tr = self.trace_actions(state, actions)?;
        let lp = actions
            .iter()
            .zip(&tr.logp)
            .map(|(&a, row)| row[a as usize])
            .collect();
        Ok((lp, tr.values))
    }

    /// Traces `state ++ actions[..T-1]` with heads at the positions where
    /// each action is chosen.
    pub fn trace_actions(&self, state: &[u32], actions: &[u32]) -> Result<Trace> {
        if actions.is_empty() {
            return Err(Error::invalid("action sequence is empty"));
        }
        if state.is_empty() {
            return Err(Error::invalid("state is empty"));
        }
        self.check_tokens(actions)?;
        let mut seq = Vec::with_capacity(state.len() + actions.len() - 1);
        seq.extend_from_slice(state);
        seq.extend_from_slice(&actions[..actions.len() - 1]);
        self.trace(&seq, state.len() - 1)
    }
}
