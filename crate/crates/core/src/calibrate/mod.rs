//! Choosing the blend coefficient α from pairwise expert judgments.
//!
//! For every α on a 0.01 grid both responses of each judged pair are scored
//! with the blended reward; the reward's preference vector is correlated with
//! the expert's, and the smallest α with the highest correlation wins.

mod pairs;
mod store;

pub use pairs::{load_pairs, make_pairs, write_pairs, CandidatePair, FnGenerator, PairSet, ResponseGenerator};
pub use store::{append_judgment, load_judgments, JudgmentStore};

use std::collections::HashMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::corpus::GroundedExample;
use crate::error::{Error, Result};
use crate::metrics::EmbeddingProvider;
use crate::par;
use crate::reward::TerminalScores;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    A,
    B,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::A => Side::B,
            Side::B => Side::A,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preference {
    A,
    B,
    #[serde(rename = "skip")]
    Skip,
}

impl From<Side> for Preference {
    fn from(side: Side) -> Self {
        match side {
            Side::A => Preference::A,
            Side::B => Preference::B,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub pair_id: String,
    pub preferred: Preference,
    pub annotator: String,
    #[serde(with = "rfc3339")]
    pub timestamp: DateTime<Utc>,
    pub presented_first: Side,
}

mod rfc3339 {
    use chrono::{DateTime, SecondsFormat, Utc};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&t.to_rfc3339_opts(SecondsFormat::AutoSi, true))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let s = String::deserialize(d)?;
        DateTime::parse_from_rfc3339(&s)
            .map(|t| t.with_timezone(&Utc))
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub alpha_star: f64,
    pub pearson_r: f64,
    /// `(α, r)` for every grid value.
    pub curve: Vec<(f64, f64)>,
    pub n_pairs_used: usize,
}

/// Number of steps on the α grid; α = i / 100 for i in 0..=100.
pub const GRID_STEPS: usize = 100;

pub fn alpha_grid() -> Vec<f64> {
    (0..=GRID_STEPS).map(|i| i as f64 / GRID_STEPS as f64).collect()
}

/// Product-moment correlation from raw sums. For the half-integer preference
/// vectors used here every intermediate is exact, so mirrored inputs give
/// bit-identical results.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            what: "pearson inputs",
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::invalid("pearson needs at least 2 points"));
    }
    let n = x.len() as f64;
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sx += a;
        sy += b;
        sxx += a * a;
        syy += b * b;
        sxy += a * b;
    }
    let vx = n * sxx - sx * sx;
    let vy = n * syy - sy * sy;
    if vx <= 0.0 {
        return Err(Error::ZeroVariance("x is constant".into()));
    }
    if vy <= 0.0 {
        return Err(Error::ZeroVariance("y is constant".into()));
    }
    let cov = n * sxy - sx * sy;
    Ok((cov / (vx * vy).sqrt()).clamp(-1.0, 1.0))
}

/// Reward-side preference: 1 if A scores higher, 0 if B does, 0.5 on a tie.
fn reward_preference(a: f64, b: f64) -> f64 {
    if a > b {
        1.0
    } else if a < b {
        0.0
    } else {
        0.5
    }
}

/// One judged pair with both responses already scored. `expert` is 1 when
/// the expert preferred A and 0 when they preferred B.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub expert: f64,
    pub a: TerminalScores,
    pub b: TerminalScores,
}

/// Correlation between expert and reward preferences at one α. A constant
/// reward preference vector has no defined correlation and counts as 0.
pub fn correlation_at(items: &[ScoredPair], alpha: f64) -> f64 {
    let expert: Vec<f64> = items.iter().map(|i| i.expert).collect();
    let ours: Vec<f64> = items
        .iter()
        .map(|i| reward_preference(i.a.blend(alpha), i.b.blend(alpha)))
        .collect();
    pearson(&expert, &ours).unwrap_or(0.0)
}

/// Grid search over already-scored pairs.
pub fn learn_alpha_scored(items: &[ScoredPair]) -> Result<CalibrationResult> {
    if items.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 usable judged pairs, found {}; annotate more pairs first",
            items.len()
        )));
    }
    if items.iter().all(|i| i.expert == items[0].expert) {
        return Err(Error::ZeroVariance(
            "the expert preferred the same side on every pair; collect more diverse demonstrations".into(),
        ));
    }
    let grid = alpha_grid();
    let curve: Vec<(f64, f64)> = par::map(&grid, |&alpha| (alpha, correlation_at(items, alpha)));
    let best = curve.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let alpha_star = curve.iter().find(|c| c.1 == best).map_or(0.0, |c| c.0);
    Ok(CalibrationResult {
        alpha_star,
        pearson_r: best,
        curve,
        n_pairs_used: items.len(),
    })
}

/// Scores every usable judged pair. Skipped judgments and judgments whose
/// pair or example is unknown are dropped.
pub fn score_judged_pairs(
    pairs: &[CandidatePair],
    judgments: &[Judgment],
    examples: &HashMap<String, GroundedExample>,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<ScoredPair>> {
    let by_id: HashMap<&str, &CandidatePair> = pairs.iter().map(|p| (p.pair_id.as_str(), p)).collect();
    let usable: Vec<(&CandidatePair, &GroundedExample, f64)> = judgments
        .iter()
        .filter_map(|j| {
            let expert = match j.preferred {
                Preference::A => 1.0,
                Preference::B => 0.0,
                Preference::Skip => return None,
            };
            let pair = *by_id.get(j.pair_id.as_str())?;
            let ex = examples.get(&pair.example_id)?;
            Some((pair, ex, expert))
        })
        .collect();
    par::map(&usable, |(pair, ex, expert)| -> Result<ScoredPair> {
        Ok(ScoredPair {
            expert: *expert,
            a: TerminalScores::compute(&pair.response_a, ex, provider)?,
            b: TerminalScores::compute(&pair.response_b, ex, provider)?,
        })
    })
    .into_iter()
    .collect()
}

/// Grid search for the α whose blended reward best agrees with the expert,
/// returning the smallest α among those with the highest correlation.
pub fn learn_alpha(
    pairs: &[CandidatePair],
    judgments: &[Judgment],
    examples: &HashMap<String, GroundedExample>,
    provider: &dyn EmbeddingProvider,
) -> Result<CalibrationResult> {
    learn_alpha_scored(&score_judged_pairs(pairs, judgments, examples, provider)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pearson_cases() {
        let x = [0.0, 1.0, 2.0, 5.0];
        assert_eq!(pearson(&x, &x).unwrap(), 1.0);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(pearson(&x, &neg).unwrap(), -1.0);
        let r = pearson(&[0.0, 1.0, 1.0, 0.0], &[0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(r, 0.5 / (1.0 * 0.75f64.sqrt()), epsilon = 1e-12);
        assert_abs_diff_eq!(r, 0.5774, epsilon = 1e-4);
    }

    #[test]
    fn pearson_zero_variance_names_side() {
        let e = pearson(&[1.0, 1.0], &[0.0, 1.0]).unwrap_err().to_string();
        assert!(e.contains("x is constant"), "{e}");
        let e = pearson(&[0.0, 1.0], &[2.0, 2.0]).unwrap_err().to_string();
        assert!(e.contains("y is constant"), "{e}");
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    fn random_items(n: usize, hidden: f64, seed: u64) -> Vec<ScoredPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let a = TerminalScores { acc: rng.gen(), faith: rng.gen() };
            let b = TerminalScores { acc: rng.gen(), faith: rng.gen() };
            let (ra, rb) = (a.blend(hidden), b.blend(hidden));
            if ra == rb {
                continue;
            }
            out.push(ScoredPair { expert: if ra > rb { 1.0 } else { 0.0 }, a, b });
        }
        out
    }

    #[test]
    fn recovers_hidden_alpha() {
        for (k, &hidden) in [0.0, 0.30, 0.92, 1.0].iter().enumerate() {
            let items = random_items(200, hidden, k as u64);
            let res = learn_alpha_scored(&items).unwrap();
            let at = res.curve.iter().find(|c| c.0 == hidden).unwrap();
            assert_eq!(at.1, 1.0, "α*={hidden}");
            assert_eq!(res.pearson_r, 1.0);
            let first_max = res.curve.iter().find(|c| c.1 == 1.0).unwrap().0;
            assert_eq!(res.alpha_star, first_max);
            assert!(res.alpha_star <= hidden);
            assert_eq!(res.n_pairs_used, 200);
        }
    }

    #[test]
    fn faith_only_expert_selects_zero() {
        // acc and faith orderings disagree on every pair; the expert follows faith
        let items: Vec<ScoredPair> = (0..10)
            .map(|i| {
                let hi = TerminalScores { acc: 0.1, faith: 0.5 + i as f64 * 0.03 };
                let lo = TerminalScores { acc: 0.9, faith: 0.2 };
                if i % 2 == 0 {
                    ScoredPair { expert: 1.0, a: hi, b: lo }
                } else {
                    ScoredPair { expert: 0.0, a: lo, b: hi }
                }
            })
            .collect();
        let res = learn_alpha_scored(&items).unwrap();
        assert_eq!(res.alpha_star, 0.0);
        assert_eq!(res.pearson_r, 1.0);
        assert_eq!(res.curve[100].1, -1.0);
    }

    #[test]
    fn invariant_under_pair_permutation() {
        let mut items = random_items(60, 0.41, 9);
        // add noise so the optimum is not trivially 1
        for i in items.iter_mut().step_by(7) {
            i.expert = 1.0 - i.expert;
        }
        let base = learn_alpha_scored(&items).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            items.shuffle(&mut rng);
            let res = learn_alpha_scored(&items).unwrap();
            assert_eq!(res.alpha_star, base.alpha_star);
            assert_eq!(res.pearson_r, base.pearson_r);
        }
    }

    #[test]
    fn invariant_under_side_swap_and_flip() {
        let mut items = random_items(80, 0.63, 11);
        for i in items.iter_mut().step_by(5) {
            i.expert = 1.0 - i.expert;
        }
        let base = learn_alpha_scored(&items).unwrap();
        let swapped: Vec<ScoredPair> = items
            .iter()
            .map(|i| ScoredPair { expert: 1.0 - i.expert, a: i.b, b: i.a })
            .collect();
        let res = learn_alpha_scored(&swapped).unwrap();
        assert_eq!(res.alpha_star, base.alpha_star);
        assert_eq!(res.pearson_r, base.pearson_r);
        assert_eq!(res.curve, base.curve);
    }

    #[test]
    fn curve_is_piecewise_constant() {
        for seed in 0..5 {
            let n = 8;
            let mut items = random_items(n, 0.5, 100 + seed);
            items[0].expert = 1.0 - items[0].expert;
            let fine: Vec<f64> = (0..=1000).map(|i| correlation_at(&items, i as f64 / 1000.0)).collect();
            let segments = 1 + fine.windows(2).filter(|w| w[0] != w[1]).count();
            assert!(segments <= n + 1, "seed {seed}: {segments} segments");
        }
    }

    #[test]
    fn degenerate_inputs_are_errors() {
        let items = random_items(5, 0.5, 1);
        assert!(learn_alpha_scored(&items[..1]).is_err());
        let same: Vec<ScoredPair> = items.iter().map(|i| ScoredPair { expert: 1.0, ..*i }).collect();
        let e = learn_alpha_scored(&same).unwrap_err();
        assert!(matches!(e, Error::ZeroVariance(_)));
        assert!(e.to_string().contains("diverse"));
    }

    fn judged(pair_id: &str, preferred: Preference) -> Judgment {
        Judgment {
            pair_id: pair_id.into(),
            preferred,
            annotator: "ann".into(),
            timestamp: DateTime::parse_from_rfc3339("2024-01-01T00:00:00Z").unwrap().with_timezone(&Utc),
            presented_first: Side::A,
        }
    }

    #[test]
    fn learn_alpha_from_text_pairs() {
        use crate::corpus::{Speaker, Utterance};
        use crate::metrics::HashedProvider;
        let ex = |id: &str| GroundedExample {
            id: id.into(),
            history: vec![Utterance::new(Speaker::User, "what about w01 ?").unwrap()],
            knowledge: "w01 w02 w03 w04 w05 w06".into(),
            reference: "w01 w02 w03 w09".into(),
        };
        let examples: HashMap<String, GroundedExample> =
            ["e0", "e1", "e2"].iter().map(|id| (id.to_string(), ex(id))).collect();
        let pair = |pid: &str, eid: &str, a: &str, b: &str| CandidatePair {
            pair_id: pid.into(),
            example_id: eid.into(),
            response_a: a.into(),
            response_b: b.into(),
            source_a: "x".into(),
            source_b: "y".into(),
            presented_first: Side::A,
        };
        let pairs = vec![
            pair("p0", "e0", "w01 w02 w03 w09", "w11 w12"),
            pair("p1", "e1", "w13 w14", "w01 w02 w03 w09"),
            pair("p2", "e2", "w01 w02 w03 w04", "w20"),
        ];
        let judgments = vec![
            judged("p0", Preference::A),
            judged("p1", Preference::B),
            judged("p2", Preference::Skip),
            judged("unknown", Preference::A),
        ];
        let p = HashedProvider::default();
        let res = learn_alpha(&pairs, &judgments, &examples, &p).unwrap();
        assert_eq!(res.n_pairs_used, 2);
        assert_eq!(res.curve.len(), 101);
        assert_eq!(res.pearson_r, 1.0);
        assert_eq!(res.alpha_star, 0.0);

        let e = learn_alpha(&pairs, &judgments[2..], &examples, &p).unwrap_err().to_string();
        assert!(e.contains("annotate"), "{e}");
    }

    #[test]
    fn judgment_serializes_rfc3339() {
        let j = judged("p0", Preference::Skip);
        let s = serde_json::to_string(&j).unwrap();
        assert!(s.contains("\"2024-01-01T00:00:00Z\""), "{s}");
        assert!(s.contains("\"skip\""), "{s}");
        assert_eq!(serde_json::from_str::<Judgment>(&s).unwrap(), j);
    }

    #[test]
    fn grid_has_101_points() {
        let g = alpha_grid();
        assert_eq!(g.len(), 101);
        assert_eq!(g[30], 0.3);
        assert_eq!(g[92], 0.92);
        assert_eq!(g[100], 1.0);
    }
}
