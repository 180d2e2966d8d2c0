//! Evaluation metrics on the ×100 scale: sentence BLEU, ROUGE-L, embedding
//! greedy-match F1 and token F1, plus corpus aggregation.

mod embed;
mod ngram;

pub use embed::{embed_f1, EmbeddingProvider, HashedProvider, RemoteProvider};
pub use ngram::{rouge_l_f1, sentence_bleu, token_f1};

use serde::{Deserialize, Serialize};

use crate::corpus::GroundedExample;
use crate::error::{Error, Result};
use crate::par;

const PUNCT: &[char] = &['.', ',', ':', ';', '!', '?', '(', ')', '"', '\''];

/// Splits each punctuation character in `.,:;!?()"'` into its own token and
/// the rest on whitespace. Case is preserved.
pub fn tokenize_eval(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut cur = String::new();
        for ch in chunk.chars() {
            if PUNCT.contains(&ch) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Per-example scores. Accuracy metrics compare against the reference,
/// faithfulness metrics against the knowledge text.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExampleScores {
    pub sacrebleu: f64,
    pub rouge_l: f64,
    pub bertscore_f1: f64,
    pub token_f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sacrebleu: f64,
    pub rouge_l: f64,
    pub bertscore_f1: f64,
    pub token_f1: f64,
    pub overall: f64,
}

impl MetricReport {
    pub fn from_means(sacrebleu: f64, rouge_l: f64, bertscore_f1: f64, token_f1: f64) -> Self {
        MetricReport {
            sacrebleu,
            rouge_l,
            bertscore_f1,
            token_f1,
            overall: sacrebleu + rouge_l + bertscore_f1 + token_f1,
        }
    }

    /// Arithmetic mean per metric; `overall` is the sum of the stored means.
    pub fn from_examples(scores: &[ExampleScores]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::invalid("cannot aggregate an empty corpus"));
        }
        let n = scores.len() as f64;
        let mean = |f: fn(&ExampleScores) -> f64| scores.iter().map(f).sum::<f64>() / n;
        Ok(Self::from_means(
            mean(|s| s.sacrebleu),
            mean(|s| s.rouge_l),
            mean(|s| s.bertscore_f1),
            mean(|s| s.token_f1),
        ))
    }
}

pub fn score_example(
    example: &GroundedExample,
    output: &str,
    provider: &dyn EmbeddingProvider,
) -> Result<ExampleScores> {
    let hyp = tokenize_eval(output);
    let reference = tokenize_eval(&example.reference);
    let knowledge = tokenize_eval(&example.knowledge);
    let bertscore_f1 = if hyp.is_empty() {
        0.0
    } else {
        embed_f1(&hyp, &knowledge, provider)?
    };
    Ok(ExampleScores {
        sacrebleu: sentence_bleu(&hyp, &reference)?,
        rouge_l: rouge_l_f1(&hyp, &reference),
        bertscore_f1,
        token_f1: token_f1(&hyp, &knowledge),
    })
}

pub fn evaluate_corpus(
    examples: &[GroundedExample],
    outputs: &[String],
    provider: &dyn EmbeddingProvider,
) -> Result<MetricReport> {
    if examples.len() != outputs.len() {
        return Err(Error::LengthMismatch {
            what: "examples vs outputs",
            left: examples.len(),
            right: outputs.len(),
        });
    }
    let pairs: Vec<(&GroundedExample, &String)> = examples.iter().zip(outputs).collect();
    let scores = par::map(&pairs, |(ex, out)| score_example(ex, out, provider))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_examples(&scores)
}
