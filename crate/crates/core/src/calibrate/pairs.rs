use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Side;
use crate::corpus::GroundedExample;
use crate::error::{Error, Result};
use crate::io::write_atomic;

/// Two candidate responses for one example. `presented_first` is the blinded
/// presentation order drawn when the pair was made.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub pair_id: String,
    pub example_id: String,
    pub response_a: String,
    pub response_b: String,
    pub source_a: String,
    pub source_b: String,
    pub presented_first: Side,
}

impl CandidatePair {
    /// Responses in presentation order.
    pub fn presented(&self) -> (&str, &str) {
        match self.presented_first {
            Side::A => (&self.response_a, &self.response_b),
            Side::B => (&self.response_b, &self.response_a),
        }
    }
}

/// A labeled response source, e.g. a checkpoint with a decoding setup.
pub trait ResponseGenerator {
    fn label(&self) -> &str;
    fn generate(&self, example: &GroundedExample) -> Result<String>;
}

/// Adapts a closure into a [`ResponseGenerator`].
pub struct FnGenerator<F> {
    label: String,
    f: F,
}

impl<F> FnGenerator<F>
where
    F: Fn(&GroundedExample) -> Result<String>,
{
    pub fn new(label: impl Into<String>, f: F) -> Self {
        FnGenerator { label: label.into(), f }
    }
}

impl<F> ResponseGenerator for FnGenerator<F>
where
    F: Fn(&GroundedExample) -> Result<String>,
{
    fn label(&self) -> &str {
        &self.label
    }

    fn generate(&self, example: &GroundedExample) -> Result<String> {
        (self.f)(example)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    pub pairs: Vec<CandidatePair>,
    /// Sampled examples dropped because both generators gave the same text.
    pub n_filtered: usize,
}

/// Samples `n` examples with a seeded shuffle, generates a response from each
/// generator and draws a presentation order per pair. Pairs whose responses
/// are identical are dropped and counted in `n_filtered`.
pub fn make_pairs(
    examples: &[GroundedExample],
    gen_a: &dyn ResponseGenerator,
    gen_b: &dyn ResponseGenerator,
    n: usize,
    seed: u64,
) -> Result<PairSet> {
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    if n > examples.len() {
        return Err(Error::invalid(format!(
            "requested {n} pairs but only {} examples are available",
            examples.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    let mut pairs = Vec::with_capacity(n);
    let mut n_filtered = 0;
    for (k, &i) in order[..n].iter().enumerate() {
        let ex = &examples[i];
        let presented_first = if rng.gen_bool(0.5) { Side::A } else { Side::B };
        let response_a = gen_a.generate(ex)?;
        let response_b = gen_b.generate(ex)?;
        if response_a == response_b {
            n_filtered += 1;
            continue;
        }
        pairs.push(CandidatePair {
            pair_id: format!("pair-{k:04}"),
            example_id: ex.id.clone(),
            response_a,
            response_b,
            source_a: gen_a.label().to_string(),
            source_b: gen_b.label().to_string(),
            presented_first,
        });
    }
    if pairs.is_empty() {
        log::warn!("all {n_filtered} sampled pairs had identical responses and were filtered");
    }
    Ok(PairSet { pairs, n_filtered })
}

pub fn write_pairs(path: impl AsRef<Path>, pairs: &[CandidatePair]) -> Result<()> {
    let mut s = String::new();
    for p in pairs {
        s.push_str(&serde_json::to_string(p)?);
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<CandidatePair>> {
    let path = path.as_ref();
    let mut out: Vec<CandidatePair> = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: CandidatePair = serde_json::from_str(&line).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if pair.response_a == pair.response_b || out.iter().any(|p| p.pair_id == pair.pair_id) {
            return Err(Error::Record {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("pair {} is a duplicate or has identical responses", pair.pair_id),
            });
        }
        out.push(pair);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticSpec};

    fn corpus() -> Vec<GroundedExample> {
        generate_synthetic(&SyntheticSpec {
            n_examples: 40,
            ..Default::default()
        })
        .unwrap()
    }

    fn reference() -> FnGenerator<impl Fn(&GroundedExample) -> Result<String>> {
        FnGenerator::new("reference", |e: &GroundedExample| Ok(e.reference.clone()))
    }

    fn knowledge() -> FnGenerator<impl Fn(&GroundedExample) -> Result<String>> {
        FnGenerator::new("knowledge", |e: &GroundedExample| Ok(e.knowledge.clone()))
    }

    #[test]
    fn twenty_five_pairs_with_both_orders() {
        let ex = corpus();
        let mut seen = std::collections::HashSet::new();
        for seed in 0..4 {
            let set = make_pairs(&ex, &reference(), &knowledge(), 25, seed).unwrap();
            assert_eq!(set.pairs.len(), 25);
            assert_eq!(set.n_filtered, 0);
            let ids: std::collections::HashSet<_> = set.pairs.iter().map(|p| &p.pair_id).collect();
            assert_eq!(ids.len(), 25);
            for p in &set.pairs {
                assert_ne!(p.response_a, p.response_b);
                assert_eq!((p.source_a.as_str(), p.source_b.as_str()), ("reference", "knowledge"));
                seen.insert(p.presented_first);
            }
        }
        assert_eq!(seen.len(), 2);
    }

    #[test]
    fn identical_generators_filter_everything() {
        let ex = corpus();
        let set = make_pairs(&ex, &reference(), &reference(), 10, 0).unwrap();
        assert!(set.pairs.is_empty());
        assert_eq!(set.n_filtered, 10);
    }

    #[test]
    fn single_pair_and_bounds() {
        let ex = corpus();
        let set = make_pairs(&ex, &reference(), &knowledge(), 1, 5).unwrap();
        assert_eq!(set.pairs.len(), 1);
        let (first, _) = set.pairs[0].presented();
        let expected = match set.pairs[0].presented_first {
            Side::A => &set.pairs[0].response_a,
            Side::B => &set.pairs[0].response_b,
        };
        assert_eq!(first, expected);
        assert!(make_pairs(&ex, &reference(), &knowledge(), 41, 0).is_err());
        assert!(make_pairs(&ex, &reference(), &knowledge(), 0, 0).is_err());
    }

    #[test]
    fn seeded_and_round_trips() {
        let ex = corpus();
        let a = make_pairs(&ex, &reference(), &knowledge(), 12, 3).unwrap();
        let b = make_pairs(&ex, &reference(), &knowledge(), 12, 3).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        write_pairs(&path, &a.pairs).unwrap();
        assert_eq!(load_pairs(&path).unwrap(), a.pairs);
    }
}
