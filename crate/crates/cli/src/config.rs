//! Flat `section.key = value` run configuration. Defaults are overridden by
//! a config file, which is overridden by command-line `--set` pairs.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use groundrl::corpus::{SyntheticSpec, SyntheticVariant};
use groundrl::metrics::{EmbeddingProvider, HashedProvider, RemoteProvider};
use groundrl::model::{DecodeConfig, DecodeMode};
use groundrl::reward::{BlendConfig, DiscriminatorConfig, KlEstimator};
use groundrl::train::{PpoConfig, SftConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardKind {
    Blended,
    Discriminator,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProviderKind {
    Hashed { dim: usize, seed: u64 },
    Remote { url: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_embed: usize,
    pub d_hidden: usize,
    pub seed: u64,
    /// Token budget for encoded states, shared by every stage.
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train_path: Option<PathBuf>,
    pub val_path: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub model: ModelConfig,
    pub sft: SftConfig,
    pub ppo: PpoConfig,
    pub blend: BlendConfig,
    pub reward: RewardKind,
    pub discriminator: DiscriminatorConfig,
    pub discriminator_epochs: usize,
    /// Decoding used by `generate`, `evaluate` and `make-pairs`.
    pub decode: DecodeConfig,
    pub provider: ProviderKind,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let max_len = 64;
        RunConfig {
            train_path: None,
            val_path: None,
            synthetic: SyntheticSpec::default(),
            model: ModelConfig {
                d_embed: 16,
                d_hidden: 48,
                seed: 0,
                max_len,
            },
            sft: SftConfig {
                lr_start: 1e-2,
                max_len,
                ..Default::default()
            },
            ppo: PpoConfig {
                max_len,
                decode: DecodeConfig {
                    max_new_tokens: 12,
                    ..Default::default()
                },
                ..Default::default()
            },
            blend: BlendConfig { alpha: 0.5 },
            reward: RewardKind::Blended,
            discriminator: DiscriminatorConfig::default(),
            discriminator_epochs: 10,
            decode: DecodeConfig::beam(12),
            provider: ProviderKind::Hashed { dim: 64, seed: 7 },
            output_dir: PathBuf::from("."),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("{key}: cannot parse {value:?}: {e}"))
}

fn parse_mode(key: &str, value: &str) -> Result<DecodeMode> {
    match value {
        "topk" => Ok(DecodeMode::Topk),
        "beam" => Ok(DecodeMode::Beam),
        "greedy" => Ok(DecodeMode::Greedy),
        _ => bail!("{key}: expected topk, beam or greedy, got {value:?}"),
    }
}

fn set_decode(d: &mut DecodeConfig, field: &str, key: &str, value: &str) -> Result<()> {
    match field {
        "mode" => d.mode = parse_mode(key, value)?,
        "k" => d.k = parse(key, value)?,
        "beam_width" => d.beam_width = parse(key, value)?,
        "max_new_tokens" => d.max_new_tokens = parse(key, value)?,
        "seed" => d.seed = parse(key, value)?,
        "length_penalty" => d.length_penalty = parse(key, value)?,
        _ => bail!("unknown config key {key:?}"),
    }
    Ok(())
}

impl RunConfig {
    /// Applies one dotted key. Unknown keys are errors so typos surface.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let (section, field) = key.split_once('.').ok_or_else(|| anyhow!("config key {key:?} has no section"))?;
        match (section, field) {
            ("data", "train") => self.train_path = Some(PathBuf::from(value)),
            ("data", "val") => self.val_path = Some(PathBuf::from(value)),
            ("synthetic", "variant") => self.synthetic.variant = parse::<SyntheticVariant>(key, value)?,
            ("synthetic", "vocab_size") => self.synthetic.vocab_size = parse(key, value)?,
            ("synthetic", "n_distractors") => self.synthetic.n_distractors = parse(key, value)?,
            ("synthetic", "span_len") => self.synthetic.span_len = parse(key, value)?,
            ("synthetic", "n_examples") => self.synthetic.n_examples = parse(key, value)?,
            ("synthetic", "seed") => self.synthetic.seed = parse(key, value)?,
            ("model", "d_embed") => self.model.d_embed = parse(key, value)?,
            ("model", "d_hidden") => self.model.d_hidden = parse(key, value)?,
            ("model", "seed") => self.model.seed = parse(key, value)?,
            ("model", "max_len") => {
                let n = parse(key, value)?;
                self.model.max_len = n;
                self.sft.max_len = n;
                self.ppo.max_len = n;
            }
            ("sft", "epochs") => self.sft.epochs = parse(key, value)?,
            ("sft", "lr_start") => self.sft.lr_start = parse(key, value)?,
            ("sft", "batch_size") => self.sft.batch_size = parse(key, value)?,
            ("sft", "max_grad_norm") => self.sft.max_grad_norm = parse(key, value)?,
            ("sft", "seed") => self.sft.seed = parse(key, value)?,
            ("ppo", "gamma") => self.ppo.gamma = parse(key, value)?,
            ("ppo", "lam") => self.ppo.lam = parse(key, value)?,
            ("ppo", "clip_eps") => self.ppo.clip_eps = parse(key, value)?,
            ("ppo", "epochs_per_batch") => self.ppo.epochs_per_batch = parse(key, value)?,
            ("ppo", "batch_episodes") => self.ppo.batch_episodes = parse(key, value)?,
            ("ppo", "value_coef") => self.ppo.value_coef = parse(key, value)?,
            ("ppo", "learning_rate") => self.ppo.learning_rate = parse(key, value)?,
            ("ppo", "total_iterations") => self.ppo.total_iterations = parse(key, value)?,
            ("ppo", "eval_every") => self.ppo.eval_every = parse(key, value)?,
            ("ppo", "max_grad_norm") => self.ppo.max_grad_norm = parse(key, value)?,
            ("ppo", "seed") => self.ppo.seed = parse(key, value)?,
            ("kl", "beta_init") => self.ppo.kl.beta_init = parse(key, value)?,
            ("kl", "target_kl") => self.ppo.kl.target_kl = parse(key, value)?,
            ("kl", "k_beta") => self.ppo.kl.k_beta = parse(key, value)?,
            ("kl", "clip_band") => self.ppo.kl.clip_band = parse(key, value)?,
            ("kl", "estimator") => {
                self.ppo.kl.estimator = match value {
                    "sampled" => KlEstimator::SampledLogRatio,
                    "full" => KlEstimator::Full,
                    _ => bail!("{key}: expected sampled or full, got {value:?}"),
                }
            }
            ("rollout", f) => set_decode(&mut self.ppo.decode, f, key, value)?,
            ("decode", f) => set_decode(&mut self.decode, f, key, value)?,
            ("blend", "alpha") => self.blend = BlendConfig::new(parse(key, value)?)?,
            ("reward", "source") => {
                self.reward = match value {
                    "blended" => RewardKind::Blended,
                    "discriminator" => RewardKind::Discriminator,
                    _ => bail!("{key}: expected blended or discriminator, got {value:?}"),
                }
            }
            ("discriminator", "epochs") => self.discriminator_epochs = parse(key, value)?,
            ("discriminator", "d_embed") => self.discriminator.d_embed = parse(key, value)?,
            ("discriminator", "d_hidden") => self.discriminator.d_hidden = parse(key, value)?,
            ("discriminator", "learning_rate") => self.discriminator.learning_rate = parse(key, value)?,
            ("discriminator", "batch_size") => self.discriminator.batch_size = parse(key, value)?,
            ("discriminator", "seed") => self.discriminator.seed = parse(key, value)?,
            ("provider", "kind") => {
                self.provider = match value {
                    "hashed" => ProviderKind::Hashed { dim: 64, seed: 7 },
                    "remote" => ProviderKind::Remote { url: String::new() },
                    _ => bail!("{key}: expected hashed or remote, got {value:?}"),
                }
            }
            ("provider", "dim") | ("provider", "seed") => match &mut self.provider {
                ProviderKind::Hashed { dim, seed } => {
                    if field == "dim" {
                        *dim = parse(key, value)?;
                    } else {
                        *seed = parse(key, value)?;
                    }
                }
                ProviderKind::Remote { .. } => bail!("{key} applies only to provider.kind = hashed"),
            },
            ("provider", "url") => match &mut self.provider {
                ProviderKind::Remote { url } => *url = value.to_string(),
                ProviderKind::Hashed { .. } => bail!("{key} applies only to provider.kind = remote"),
            },
            ("output", "dir") => self.output_dir = PathBuf::from(value),
            _ => bail!("unknown config key {key:?}"),
        }
        Ok(())
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{origin}:{}: expected key = value", i + 1))?;
            self.set(k.trim(), v).with_context(|| format!("{origin}:{}", i + 1))?;
        }
        Ok(())
    }

    /// Defaults, then the file (if any), then each `key=value` override.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            cfg.apply_text(&text, &path.display().to_string())?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects key=value, got {o:?}"))?;
            cfg.set(k.trim(), v).with_context(|| format!("--set {o}"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.sft.validate()?;
        self.ppo.validate()?;
        self.decode.validate()?;
        if self.model.d_embed == 0 || self.model.d_hidden == 0 {
            bail!("model dimensions must be at least 1");
        }
        if let ProviderKind::Remote { url } = &self.provider {
            if url.is_empty() {
                bail!("provider.kind = remote needs provider.url");
            }
        }
        Ok(())
    }

    pub fn embedding_provider(&self) -> Result<Box<dyn EmbeddingProvider>> {
        Ok(match &self.provider {
            ProviderKind::Hashed { dim, seed } => Box::new(HashedProvider::new(*dim, *seed)?),
            ProviderKind::Remote { url } => Box::new(RemoteProvider::new(url)),
        })
    }
}
