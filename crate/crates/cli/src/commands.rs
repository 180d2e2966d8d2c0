use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use groundrl::calibrate::{
    learn_alpha, load_judgments, load_pairs, make_pairs, write_pairs, CalibrationResult, FnGenerator, JudgmentStore,
};
use groundrl::corpus::{
    build_vocabulary, check_unique_ids, encode_prompt, examples_to_jsonl, generate_synthetic, load_examples,
    GroundedExample, Vocabulary, EOS,
};
use groundrl::io::write_atomic;
use groundrl::metrics::evaluate_corpus;
use groundrl::model::{
    beam_search, greedy, load_checkpoint, load_checkpoint_for, sample_topk, save_checkpoint, DecodeConfig, DecodeMode,
    NetShape, PolicyValueNet,
};
use groundrl::reward::{
    blended_terminal_reward, kl_terms, shape_rewards, train_discriminator, BlendConfig, RewardBreakdown,
};
use groundrl::train::{train_ppo, train_sft, LogRecord, RewardSource};
use serde::{Deserialize, Serialize};

use crate::config::{RewardKind, RunConfig};

/// One decoded response, as written by `generate` and read by `evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub id: String,
    pub output: String,
}

fn to_json_pretty<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn jsonl<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn load_dataset(path: &Path) -> Result<Vec<GroundedExample>> {
    let examples = load_examples(path).with_context(|| format!("loading dataset {}", path.display()))?;
    check_unique_ids(&examples)?;
    Ok(examples)
}

fn dataset_path<'a>(flag: Option<&'a Path>, configured: Option<&'a Path>, what: &str) -> Result<&'a Path> {
    flag.or(configured)
        .ok_or_else(|| anyhow!("no {what} dataset: pass --{what} or set data.{what}"))
}

fn by_id(examples: &[GroundedExample]) -> HashMap<String, GroundedExample> {
    examples.iter().map(|e| (e.id.clone(), e.clone())).collect()
}

/// Seed for one example's sampled decode, stable across runs and orderings.
fn example_seed(seed: u64, id: &str) -> u64 {
    id.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64 ^ seed, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn decode_one(
    net: &PolicyValueNet,
    vocab: &Vocabulary,
    example: &GroundedExample,
    max_len: usize,
    cfg: &DecodeConfig,
) -> groundrl::Result<String> {
    let prompt = encode_prompt(example, vocab, max_len);
    let ids = match cfg.mode {
        DecodeMode::Beam => beam_search(net, &prompt, cfg)?,
        DecodeMode::Greedy => greedy(net, &prompt, cfg.max_new_tokens)?,
        DecodeMode::Topk => {
            let per_example = DecodeConfig {
                seed: example_seed(cfg.seed, &example.id),
                ..*cfg
            };
            sample_topk(net, &prompt, &per_example)?.actions
        }
    };
    Ok(vocab.decode(&ids))
}

fn decode_all(
    net: &PolicyValueNet,
    vocab: &Vocabulary,
    examples: &[GroundedExample],
    max_len: usize,
    cfg: &DecodeConfig,
) -> Result<Vec<String>> {
    groundrl::par::map(examples, |e| decode_one(net, vocab, e, max_len, cfg))
        .into_iter()
        .collect::<groundrl::Result<_>>()
        .map_err(Into::into)
}

pub fn gen_data(cfg: &RunConfig, out: &Path, val_out: Option<(&Path, usize)>) -> Result<()> {
    let examples = generate_synthetic(&cfg.synthetic)?;
    match val_out {
        None => write_atomic(out, examples_to_jsonl(&examples)?.as_bytes())?,
        Some((val_path, n_train)) => {
            if n_train >= examples.len() {
                bail!("--n-train {n_train} leaves no validation examples out of {}", examples.len());
            }
            let (train, val) = examples.split_at(n_train);
            write_atomic(out, examples_to_jsonl(train)?.as_bytes())?;
            write_atomic(val_path, examples_to_jsonl(val)?.as_bytes())?;
        }
    }
    log::info!("wrote {} examples", examples.len());
    Ok(())
}

pub fn run_sft(cfg: &RunConfig, train_path: Option<&Path>, out: &Path, log_path: Option<&Path>) -> Result<()> {
    let train = load_dataset(dataset_path(train_path, cfg.train_path.as_deref(), "train")?)?;
    let vocab = build_vocabulary(&train, 1)?;
    let shape = NetShape::with_dims(vocab.len(), cfg.model.d_embed, cfg.model.d_hidden);
    let mut net = PolicyValueNet::new(shape, cfg.model.seed);
    let report = train_sft(&train, &mut net, &vocab, &cfg.sft)?;
    log::info!("sft losses {:?}", report.epoch_losses);
    save_checkpoint(&net, &vocab, out)?;
    if let Some(p) = log_path {
        write_atomic(p, &to_json_pretty(&report)?)?;
    }
    Ok(())
}

pub struct PpoPaths<'a> {
    pub init: &'a Path,
    pub train: Option<&'a Path>,
    pub val: Option<&'a Path>,
    pub out: &'a Path,
    pub final_out: Option<&'a Path>,
    pub log: Option<&'a Path>,
    pub calibration: Option<&'a Path>,
}

fn discriminator_source(
    cfg: &RunConfig,
    init: &PolicyValueNet,
    vocab: &Vocabulary,
    train: &[GroundedExample],
) -> Result<RewardSource> {
    let sampling = DecodeConfig {
        mode: DecodeMode::Topk,
        ..cfg.ppo.decode
    };
    let outputs = decode_all(init, vocab, train, cfg.model.max_len, &sampling)?;
    let positives: Vec<(GroundedExample, String)> = train.iter().map(|e| (e.clone(), e.reference.clone())).collect();
    let negatives: Vec<(GroundedExample, String)> = train.iter().cloned().zip(outputs).collect();
    let (model, report) = train_discriminator(&positives, &negatives, vocab, cfg.discriminator_epochs, &cfg.discriminator)?;
    log::info!("discriminator training accuracy {:.3}", report.train_accuracy);
    Ok(RewardSource::Discriminator(Box::new(model)))
}

pub fn run_ppo(cfg: &RunConfig, paths: &PpoPaths) -> Result<()> {
    let train = load_dataset(dataset_path(paths.train, cfg.train_path.as_deref(), "train")?)?;
    let val = load_dataset(dataset_path(paths.val, cfg.val_path.as_deref(), "val")?)?;
    let ckpt = load_checkpoint(paths.init)?;
    let (init, vocab) = (ckpt.net, ckpt.vocab);
    let provider = cfg.embedding_provider()?;
    let blend = match paths.calibration {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let result: CalibrationResult = serde_json::from_str(&text)?;
            BlendConfig::new(result.alpha_star)?
        }
        None => cfg.blend,
    };
    let reward = match cfg.reward {
        RewardKind::Blended => RewardSource::Blended(blend),
        RewardKind::Discriminator => discriminator_source(cfg, &init, &vocab, &train)?,
    };
    let mut records = Vec::new();
    let outcome = train_ppo(&train, &val, &init, &vocab, &cfg.ppo, &reward, provider.as_ref(), &mut |r| {
        if let LogRecord::Eval { iteration, report, mean_reward } = r {
            log::info!("eval {iteration}: overall {:.2} mean reward {mean_reward:.4}", report.overall);
        }
        records.push(r.clone());
    })?;
    save_checkpoint(&outcome.best, &vocab, paths.out)?;
    if let Some(p) = paths.final_out {
        save_checkpoint(&outcome.final_net, &vocab, p)?;
    }
    if let Some(p) = paths.log {
        write_atomic(p, &jsonl(&records)?)?;
    }
    println!(
        "{}",
        serde_json::json!({
            "best_iteration": outcome.best_iteration,
            "best_report": outcome.best_report,
            "final_beta": outcome.final_beta,
        })
    );
    Ok(())
}

pub fn generate(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let examples = load_dataset(data)?;
    let outputs = decode_all(&ckpt.net, &ckpt.vocab, &examples, cfg.model.max_len, &cfg.decode)?;
    let records: Vec<OutputRecord> = examples
        .iter()
        .zip(outputs)
        .map(|(e, output)| OutputRecord { id: e.id.clone(), output })
        .collect();
    write_atomic(out, &jsonl(&records)?)?;
    Ok(())
}

fn load_outputs(path: &Path) -> Result<HashMap<String, String>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: OutputRecord =
            serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        if out.insert(rec.id.clone(), rec.output).is_some() {
            bail!("{}:{}: duplicate id {:?}", path.display(), i + 1, rec.id);
        }
    }
    Ok(out)
}

pub enum OutputSource<'a> {
    File(&'a Path),
    Checkpoint(&'a Path),
}

pub fn evaluate(cfg: &RunConfig, data: &Path, source: OutputSource, out: Option<&Path>) -> Result<()> {
    let examples = load_dataset(data)?;
    let outputs = match source {
        OutputSource::File(p) => {
            let mut map = load_outputs(p)?;
            examples
                .iter()
                .map(|e| map.remove(&e.id).ok_or_else(|| anyhow!("no output for example {:?}", e.id)))
                .collect::<Result<Vec<_>>>()?
        }
        OutputSource::Checkpoint(p) => {
            let ckpt = load_checkpoint(p)?;
            decode_all(&ckpt.net, &ckpt.vocab, &examples, cfg.model.max_len, &cfg.decode)?
        }
    };
    let provider = cfg.embedding_provider()?;
    let report = evaluate_corpus(&examples, &outputs, provider.as_ref())?;
    let bytes = to_json_pretty(&report)?;
    if let Some(p) = out {
        write_atomic(p, &bytes)?;
    }
    print!("{}", String::from_utf8(bytes)?);
    Ok(())
}

pub struct PairArgs<'a> {
    pub data: &'a Path,
    pub a: &'a Path,
    pub b: &'a Path,
    pub a_decode: DecodeMode,
    pub b_decode: DecodeMode,
    pub n: usize,
    pub seed: u64,
    pub out: &'a Path,
}

fn label(path: &Path, mode: DecodeMode) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mode = match mode {
        DecodeMode::Topk => "topk",
        DecodeMode::Beam => "beam",
        DecodeMode::Greedy => "greedy",
    };
    format!("{stem}:{mode}")
}

pub fn run_make_pairs(cfg: &RunConfig, args: &PairArgs) -> Result<()> {
    let examples = load_dataset(args.data)?;
    let ca = load_checkpoint(args.a)?;
    let vocab = ca.vocab.clone();
    let net_b = load_checkpoint_for(args.b, &vocab)?;
    let max_len = cfg.model.max_len;
    let cfg_a = DecodeConfig {
        mode: args.a_decode,
        seed: args.seed,
        ..cfg.decode
    };
    let cfg_b = DecodeConfig {
        mode: args.b_decode,
        seed: args.seed.wrapping_add(1),
        ..cfg.decode
    };
    let (net_a, va, vb) = (ca.net, &vocab, &vocab);
    let gen_a = FnGenerator::new(label(args.a, args.a_decode), |e: &GroundedExample| {
        decode_one(&net_a, va, e, max_len, &cfg_a)
    });
    let gen_b = FnGenerator::new(label(args.b, args.b_decode), |e: &GroundedExample| {
        decode_one(&net_b, vb, e, max_len, &cfg_b)
    });
    let set = make_pairs(&examples, &gen_a, &gen_b, args.n, args.seed)?;
    if set.n_filtered > 0 {
        log::warn!("{} pairs had identical responses and were dropped", set.n_filtered);
    }
    write_pairs(args.out, &set.pairs)?;
    println!("{}", serde_json::json!({ "pairs": set.pairs.len(), "filtered": set.n_filtered }));
    Ok(())
}

pub fn calibrate(cfg: &RunConfig, pairs: &Path, judgments: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    if !judgments.is_file() {
        bail!("judgment store {} does not exist", judgments.display());
    }
    let pairs = load_pairs(pairs)?;
    let judgments = load_judgments(&JudgmentStore::open(judgments)?)?;
    let examples = by_id(&load_dataset(data)?);
    let provider = cfg.embedding_provider()?;
    let result = learn_alpha(&pairs, &judgments, &examples, provider.as_ref())?;
    let bytes = to_json_pretty(&result)?;
    if let Some(p) = out {
        write_atomic(p, &bytes)?;
    }
    print!("{}", String::from_utf8(bytes)?);
    Ok(())
}

pub struct ServeArgs {
    pub pairs: PathBuf,
    pub judgments: PathBuf,
    pub data: PathBuf,
    pub ui_dir: Option<PathBuf>,
    pub addr: String,
}

pub fn serve(cfg: &RunConfig, args: ServeArgs) -> Result<()> {
    let pairs = load_pairs(&args.pairs)?;
    let examples = load_dataset(&args.data)?;
    let store = JudgmentStore::open(&args.judgments)?;
    let state = crate::service::ServiceState::new(pairs, examples, store, cfg.embedding_provider()?)?;
    let app = crate::service::router(Arc::new(state), args.ui_dir);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&args.addr)
            .await
            .with_context(|| format!("binding {}", args.addr))?;
        log::info!("annotation service listening on http://{}", listener.local_addr()?);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

pub struct ScoreArgs<'a> {
    pub data: &'a Path,
    pub id: &'a str,
    pub output: &'a str,
    pub alpha: Option<f64>,
    /// Policy and reference checkpoints; when both are given the per-token
    /// KL penalty and shaped rewards are filled in.
    pub policy: Option<&'a Path>,
    pub reference: Option<&'a Path>,
}

pub fn reward_score(cfg: &RunConfig, args: &ScoreArgs) -> Result<RewardBreakdown> {
    let examples = load_dataset(args.data)?;
    let example = examples
        .iter()
        .find(|e| e.id == args.id)
        .ok_or_else(|| anyhow!("no example with id {:?}", args.id))?;
    let blend = match args.alpha {
        Some(a) => BlendConfig::new(a)?,
        None => cfg.blend,
    };
    let provider = cfg.embedding_provider()?;
    let mut breakdown = blended_terminal_reward(args.output, example, &blend, provider.as_ref())?;
    match (args.policy, args.reference) {
        (Some(p), Some(r)) => {
            let ckpt = load_checkpoint(p)?;
            let reference = load_checkpoint_for(r, &ckpt.vocab)?;
            let state = encode_prompt(example, &ckpt.vocab, cfg.model.max_len);
            let mut actions = ckpt.vocab.encode_text(args.output);
            actions.push(EOS);
            let lp = ckpt.net.sequence_logprobs(&state, &actions)?;
            let lq = reference.sequence_logprobs(&state, &actions)?;
            let kl = kl_terms(&lp, &lq)?;
            let beta = cfg.ppo.kl.beta_init;
            breakdown.per_token_kl_penalty = kl.iter().map(|k| beta * k).collect();
            breakdown.shaped_rewards = shape_rewards(breakdown.blended, &kl, beta);
        }
        (None, None) => {}
        _ => bail!("--policy and --reference must be given together"),
    }
    Ok(breakdown)
}
