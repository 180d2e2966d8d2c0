//! Grounded-dialogue records, the policy vocabulary, state encoding and the
//! synthetic copy tasks used for desk-scale experiments.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SEP: u32 = 4;

const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<sep>"];

/// Default maximum length of an encoded state.
pub const DEFAULT_MAX_LEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Agent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
}

impl Utterance {
    pub fn new(speaker: Speaker, text: &str) -> Result<Self> {
        let text = text.trim();
        if text.is_empty() {
            return Err(Error::invalid("utterance text is empty"));
        }
        Ok(Utterance {
            speaker,
            text: text.to_string(),
        })
    }
}

/// One datapoint: conversation history, grounding knowledge and the reference
/// agent response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundedExample {
    pub id: String,
    pub history: Vec<Utterance>,
    pub knowledge: String,
    pub reference: String,
}

impl GroundedExample {
    /// Checks the record invariants, returning the name of the first
    /// violated field.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("id: must be non-empty".into());
        }
        if self.history.is_empty() {
            return Err("history: must be non-empty".into());
        }
        for (i, u) in self.history.iter().enumerate() {
            if u.text.is_empty() || u.text.trim() != u.text {
                return Err(format!("history[{i}].text: must be non-empty and trimmed"));
            }
        }
        if self.history.last().map(|u| u.speaker) != Some(Speaker::User) {
            return Err("history: final utterance must be spoken by the user".into());
        }
        if self.knowledge.trim().is_empty() {
            return Err("knowledge: must be non-empty".into());
        }
        if self.reference.trim().is_empty() {
            return Err("reference: must be non-empty".into());
        }
        Ok(())
    }
}

fn record_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Record {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_record(value: &Value) -> std::result::Result<GroundedExample, String> {
    let obj = value.as_object().ok_or("record is not an object")?;
    let str_field = |name: &str| -> std::result::Result<String, String> {
        match obj.get(name) {
            None => Err(format!("{name}: missing field")),
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(format!("{name}: expected a string")),
        }
    };
    let id = str_field("id")?;
    let knowledge = str_field("knowledge")?;
    let reference = str_field("reference")?;
    let history = match obj.get("history") {
        None => return Err("history: missing field".into()),
        Some(Value::Array(items)) => items
            .iter()
            .enumerate()
            .map(|(i, item)| {
                let speaker = match item.get("speaker").and_then(Value::as_str) {
                    Some("user") => Speaker::User,
                    Some("agent") => Speaker::Agent,
                    _ => return Err(format!("history[{i}].speaker: expected \"user\" or \"agent\"")),
                };
                let text = item
                    .get("text")
                    .and_then(Value::as_str)
                    .ok_or_else(|| format!("history[{i}].text: expected a string"))?;
                Utterance::new(speaker, text).map_err(|_| format!("history[{i}].text: empty"))
            })
            .collect::<std::result::Result<Vec<_>, _>>()?,
        Some(_) => return Err("history: expected an array".into()),
    };
    let ex = GroundedExample {
        id,
        history,
        knowledge: knowledge.trim().to_string(),
        reference: reference.trim().to_string(),
    };
    ex.validate()?;
    Ok(ex)
}

/// Reads a line-delimited dataset file. Blank lines are ignored.
pub fn load_examples(path: impl AsRef<Path>) -> Result<Vec<GroundedExample>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line)
            .map_err(|e| record_err(path, lineno, format!("malformed JSON: {e}")))?;
        let ex = parse_record(&value).map_err(|m| record_err(path, lineno, m))?;
        if let Some(first) = seen.insert(ex.id.clone(), lineno) {
            return Err(record_err(
                path,
                lineno,
                format!("id: duplicate id {:?} (first seen on line {first})", ex.id),
            ));
        }
        out.push(ex);
    }
    Ok(out)
}

/// Serializes examples in the dataset line format.
pub fn examples_to_jsonl(examples: &[GroundedExample]) -> Result<String> {
    let mut s = String::new();
    for ex in examples {
        s.push_str(&serde_json::to_string(ex)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn whitespace_tokens(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
}

/// Word-level vocabulary with reserved ids `PAD..=SEP`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocabulary::from_full_list(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Vocabulary holding the reserved tokens followed by `words` in order.
    pub fn from_tokens<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().map(Into::into));
        Self::from_full_list(tokens)
    }

    /// Rebuilds a vocabulary from its complete id-ordered token list.
    pub fn from_full_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(t, r)| t != r) {
            return Err(Error::invalid("vocabulary must start with the reserved tokens"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        whitespace_tokens(text).map(|t| self.id(t)).collect()
    }

    /// Renders ids as space-joined tokens. Decoding stops at the first EOS.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .map(|&id| self.token(id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// FNV-1a digest of the id-ordered token list, recorded in checkpoints.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tokens {
            for b in t.as_bytes().iter().chain(std::iter::once(&0u8)) {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Builds the vocabulary from every whitespace token in histories, knowledge
/// and references. Tokens are ordered by frequency (descending), then
/// lexicographically.
pub fn build_vocabulary(examples: &[GroundedExample], min_count: usize) -> Result<Vocabulary> {
    if examples.is_empty() {
        return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
    }
    if min_count == 0 {
        return Err(Error::invalid("min_count must be at least 1"));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for ex in examples {
        let texts = ex
            .history
            .iter()
            .map(|u| u.text.as_str())
            .chain([ex.knowledge.as_str(), ex.reference.as_str()]);
        for text in texts {
            for tok in whitespace_tokens(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_count && !RESERVED.contains(t))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t))
}

/// Encodes `BOS, history (utterances joined by SEP), SEP, knowledge`.
///
/// When the layout exceeds `max_len`, whole history utterances are dropped
/// oldest first, then the knowledge is cut from its tail.
pub fn encode_state(example: &GroundedExample, vocab: &Vocabulary, max_len: usize) -> Vec<u32> {
    let max_len = max_len.max(2);
    let utterances: Vec<Vec<u32>> = example
        .history
        .iter()
        .map(|u| vocab.encode_text(&u.text))
        .collect();
    let knowledge = vocab.encode_text(&example.knowledge);

    let hist_len = |from: usize| -> usize {
        let kept = &utterances[from..];
        kept.iter().map(Vec::len).sum::<usize>() + kept.len().saturating_sub(1)
    };
    let mut first = 0;
    while first < utterances.len() && 2 + hist_len(first) + knowledge.len() > max_len {
        first += 1;
    }

    let mut out = Vec::with_capacity(max_len);
    out.push(BOS);
    for (i, u) in utterances[first..].iter().enumerate() {
        if i > 0 {
            out.push(SEP);
        }
        out.extend_from_slice(u);
    }
    out.push(SEP);
    let room = max_len - out.len();
    out.extend_from_slice(&knowledge[..knowledge.len().min(room)]);
    out
}

/// Decoder prefix: the encoded state followed by BOS, which marks where the
/// response starts. Without it the first response position looks like any
/// other knowledge token to the recurrent policy.
pub fn encode_prompt(example: &GroundedExample, vocab: &Vocabulary, max_len: usize) -> Vec<u32> {
    let mut out = encode_state(example, vocab, max_len);
    out.push(BOS);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticVariant {
    /// Knowledge holds the relevant span among shuffled distractor spans.
    Copyspan,
    /// Knowledge is exactly the relevant span.
    Exact,
}

impl fmt::Display for SyntheticVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SyntheticVariant::Copyspan => f.write_str("copyspan"),
            SyntheticVariant::Exact => f.write_str("exact"),
        }
    }
}

impl std::str::FromStr for SyntheticVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copyspan" => Ok(SyntheticVariant::Copyspan),
            "exact" => Ok(SyntheticVariant::Exact),
            other => Err(Error::invalid(format!("unknown synthetic variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub variant: SyntheticVariant,
    pub vocab_size: usize,
    pub n_distractors: usize,
    pub span_len: usize,
    pub n_examples: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            variant: SyntheticVariant::Copyspan,
            vocab_size: 60,
            n_distractors: 6,
            span_len: 4,
            n_examples: 600,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 20 {
            return Err(Error::invalid("vocab_size must be at least 20"));
        }
        if self.span_len == 0 {
            return Err(Error::invalid("span_len must be at least 1"));
        }
        if self.n_examples == 0 {
            return Err(Error::invalid("n_examples must be at least 1"));
        }
        let spans = match self.variant {
            SyntheticVariant::Copyspan => self.n_distractors + 1,
            SyntheticVariant::Exact => 1,
        };
        if spans * self.span_len > self.vocab_size {
            return Err(Error::invalid(format!(
                "vocab_size {} is too small for {} distinct spans of length {}",
                self.vocab_size, spans, self.span_len
            )));
        }
        Ok(())
    }
}

pub fn synthetic_word(i: usize) -> String {
    format!("w{i:02}")
}

/// Generates a deterministic synthetic dataset.
///
/// Every span starts with its key token and spans within one example use
/// pairwise distinct words. The user turn names the key of the relevant span.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<GroundedExample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_spans = match spec.variant {
        SyntheticVariant::Copyspan => spec.n_distractors + 1,
        SyntheticVariant::Exact => 1,
    };
    let mut words: Vec<usize> = (0..spec.vocab_size).collect();
    let mut out = Vec::with_capacity(spec.n_examples);
    for i in 0..spec.n_examples {
        let (picked, _) = words.partial_shuffle(&mut rng, n_spans * spec.span_len);
        let spans: Vec<Vec<String>> = picked
            .chunks(spec.span_len)
            .map(|c| c.iter().map(|&w| synthetic_word(w)).collect())
            .collect();
        let relevant = spans[0].join(" ");
        let key = spans[0][0].clone();
        let mut order: Vec<usize> = (0..n_spans).collect();
        order.shuffle(&mut rng);
        let knowledge = order
            .iter()
            .map(|&s| spans[s].join(" "))
            .collect::<Vec<_>>()
            .join(" ");
        out.push(GroundedExample {
            id: format!("{}-{}-{:05}", spec.variant, spec.seed, i),
            history: vec![Utterance::new(Speaker::User, &format!("what about {key} ?"))?],
            knowledge,
            reference: relevant,
        });
    }
    Ok(out)
}

/// Splits off the first `n_train` examples as the training split.
pub fn split(examples: &[GroundedExample], n_train: usize) -> (Vec<GroundedExample>, Vec<GroundedExample>) {
    let n = n_train.min(examples.len());
    (examples[..n].to_vec(), examples[n..].to_vec())
}

/// Ids must be unique within a dataset.
pub fn check_unique_ids(examples: &[GroundedExample]) -> Result<()> {
    let mut seen = HashSet::new();
    for ex in examples {
        if !seen.insert(ex.id.as_str()) {
            return Err(Error::invalid(format!("duplicate id {:?}", ex.id)));
        }
    }
    Ok(())
}
