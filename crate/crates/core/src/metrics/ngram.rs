use std::collections::HashMap;

use crate::error::{Error, Result};

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence-level BLEU-4 on the ×100 scale.
///
/// Orders n ≥ 2 with zero clipped matches use add-one smoothing
/// `(0 + 1) / (total + 1)`; a zero unigram precision yields 0.
pub fn sentence_bleu(hyp: &[String], reference: &[String]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("BLEU reference is empty"));
    }
    if hyp.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let hyp_counts = ngram_counts(hyp, n);
        let ref_counts = ngram_counts(reference, n);
        let total = hyp.len().saturating_sub(n - 1);
        let matched: usize = hyp_counts
            .iter()
            .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if matched > 0 {
            matched as f64 / total as f64
        } else if n == 1 {
            return Ok(0.0);
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_sum += p.ln();
    }
    let (c, r) = (hyp.len() as f64, reference.len() as f64);
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    Ok((100.0 * bp * (log_sum / 4.0).exp()).clamp(0.0, 100.0))
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn f1_percent(overlap: f64, hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 || ref_len == 0 {
        return 0.0;
    }
    let p = overlap / hyp_len as f64;
    let r = overlap / ref_len as f64;
    if p + r == 0.0 {
        0.0
    } else {
        100.0 * 2.0 * p * r / (p + r)
    }
}

/// ROUGE-L F1 (×100) from the longest common subsequence.
pub fn rouge_l_f1(hyp: &[String], reference: &[String]) -> f64 {
    f1_percent(lcs_len(hyp, reference) as f64, hyp.len(), reference.len())
}

/// Multiset token-overlap F1 (×100).
pub fn token_f1(hyp: &[String], target: &[String]) -> f64 {
    let mut counts: HashMap<&str, isize> = HashMap::new();
    for t in target {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in hyp {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    f1_percent(overlap as f64, hyp.len(), target.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn bleu_identity_and_brevity() {
        let r = toks("the cat sat on the mat");
        assert_eq!(sentence_bleu(&r, &r).unwrap(), 100.0);
        let b = sentence_bleu(&r, &toks("the cat sat on the mat quickly")).unwrap();
        assert_abs_diff_eq!(b, 100.0 * (-1.0f64 / 6.0).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(b, 84.648, epsilon = 0.01);
    }

    #[test]
    fn bleu_degenerate_cases() {
        assert_eq!(sentence_bleu(&toks("a b c d"), &toks("e f g h")).unwrap(), 0.0);
        assert_eq!(sentence_bleu(&[], &toks("a")).unwrap(), 0.0);
        assert!(sentence_bleu(&toks("a"), &[]).is_err());
    }

    #[test]
    fn bleu_smoothing_hand_value() {
        // p1 = 2/4, p2 = 1/3 (matched "a b"), p3 = 1/(2+1), p4 = 1/(1+1); c == r
        let v = sentence_bleu(&toks("a b x y"), &toks("a b c d")).unwrap();
        let logs = 0.5f64.ln() + (1.0f64 / 3.0).ln() + (1.0f64 / 3.0).ln() + 0.5f64.ln();
        assert_abs_diff_eq!(v, 100.0 * (logs / 4.0).exp(), epsilon = 1e-9);
    }

    #[test]
    fn rouge_cases() {
        assert_eq!(rouge_l_f1(&toks("a b c"), &toks("a b c")), 100.0);
        assert_abs_diff_eq!(rouge_l_f1(&toks("a b c d"), &toks("a c d")), 600.0 / 7.0, epsilon = 1e-9);
        assert_eq!(rouge_l_f1(&toks("a b"), &toks("c d")), 0.0);
        assert_eq!(rouge_l_f1(&[], &toks("c d")), 0.0);
    }

    #[test]
    fn token_f1_cases() {
        assert_abs_diff_eq!(token_f1(&toks("a b c"), &toks("b c d")), 200.0 / 3.0, epsilon = 1e-9);
        assert_eq!(token_f1(&toks("a b"), &toks("a b")), 100.0);
        assert_eq!(token_f1(&[], &toks("a b")), 0.0);
        // clipped counts
        assert_abs_diff_eq!(token_f1(&toks("a a a"), &toks("a b")), 100.0 * 2.0 * (1.0 / 3.0) * 0.5 / (1.0 / 3.0 + 0.5), epsilon = 1e-9);
    }

    fn seq() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(0u8..6, 0..12).prop_map(|v| v.into_iter().map(|i| format!("t{i}")).collect())
    }

    proptest! {
        #[test]
        fn metrics_in_range(h in seq(), r in seq()) {
            for v in [rouge_l_f1(&h, &r), token_f1(&h, &r)] {
                prop_assert!((0.0..=100.0).contains(&v));
            }
            if !r.is_empty() {
                let b = sentence_bleu(&h, &r).unwrap();
                prop_assert!((0.0..=100.0).contains(&b));
            }
        }

        #[test]
        fn renaming_invariance(h in seq(), r in seq(), shift in 1u8..6) {
            let rename = |v: &[String]| -> Vec<String> {
                v.iter().map(|t| {
                    let i: u8 = t[1..].parse().unwrap();
                    format!("u{}", (i + shift) % 6)
                }).collect()
            };
            let (h2, r2) = (rename(&h), rename(&r));
            prop_assert_eq!(rouge_l_f1(&h, &r), rouge_l_f1(&h2, &r2));
            prop_assert_eq!(token_f1(&h, &r), token_f1(&h2, &r2));
        }

        #[test]
        fn self_comparison_is_maximal(h in prop::collection::vec(0u8..6, 1..12)) {
            let h: Vec<String> = h.into_iter().map(|i| format!("t{i}")).collect();
            prop_assert_eq!(rouge_l_f1(&h, &h), 100.0);
            prop_assert_eq!(token_f1(&h, &h), 100.0);
            prop_assert!((sentence_bleu(&h, &h).unwrap() - 100.0).abs() < 1e-9);
        }
    }
}
