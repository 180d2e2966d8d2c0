//! Command-line workflow: data generation, training, evaluation, pair
//! construction, calibration and the annotation service.

pub mod commands;
pub mod config;
pub mod service;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use groundrl::model::DecodeMode;

use crate::commands::{OutputSource, PairArgs, PpoPaths, ScoreArgs, ServeArgs};
use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "groundrl", version, about = "Train and evaluate grounded response policies")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat `section.key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set ppo.gamma=0.9`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Mode {
    Topk,
    Beam,
    Greedy,
}

impl From<Mode> for DecodeMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Topk => DecodeMode::Topk,
            Mode::Beam => DecodeMode::Beam,
            Mode::Greedy => DecodeMode::Greedy,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset as JSONL.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Split after this many examples; the rest go to --val-out.
        #[arg(long, requires = "val_out")]
        n_train: Option<usize>,
        #[arg(long, requires = "n_train")]
        val_out: Option<PathBuf>,
    },
    /// Supervised fine-tuning from a fresh network.
    TrainSft {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// PPO from an SFT checkpoint; writes the best checkpoint.
    TrainPpo {
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also save the last iterate here.
        #[arg(long)]
        final_out: Option<PathBuf>,
        /// JSONL training log.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Take α from a calibration result instead of `blend.alpha`.
        #[arg(long, conflicts_with = "alpha")]
        calibration: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score outputs (a `generate` file or a checkpoint) against a dataset.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        outputs: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode a response for every example.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build blinded candidate pairs from two checkpoints or decoding setups.
    MakePairs {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        a: PathBuf,
        /// Defaults to the same checkpoint as --a.
        #[arg(long)]
        b: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "beam")]
        a_mode: Mode,
        #[arg(long, value_enum, default_value = "topk")]
        b_mode: Mode,
        #[arg(long, default_value_t = 25)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Choose α from the judgment store.
    Calibrate {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        judgments: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the pairwise annotation API and UI.
    AnnotateServe {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        judgments: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ui_dir: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
    /// Print the reward breakdown of one output for one example.
    RewardScore {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long)]
        output: String,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, requires = "reference")]
        policy: Option<PathBuf>,
        #[arg(long, requires = "policy")]
        reference: Option<PathBuf>,
    },
}

impl Command {
    /// Dedicated flags, expressed as config overrides so they take the
    /// highest precedence.
    fn overrides(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push(format!("{k}={v}"));
            }
        };
        match self {
            Command::GenData { variant, n, seed, .. } => {
                push("synthetic.variant", variant.clone());
                push("synthetic.n_examples", n.map(|x| x.to_string()));
                push("synthetic.seed", seed.map(|x| x.to_string()));
            }
            Command::TrainSft { seed, .. } => {
                push("sft.seed", seed.map(|x| x.to_string()));
                push("model.seed", seed.map(|x| x.to_string()));
            }
            Command::TrainPpo { seed, alpha, .. } => {
                push("ppo.seed", seed.map(|x| x.to_string()));
                push("blend.alpha", alpha.map(|x| x.to_string()));
            }
            Command::Generate { mode, seed, .. } => {
                let mode = mode.map(|m| m.to_possible_value().expect("named").get_name().to_string());
                push("decode.mode", mode);
                push("decode.seed", seed.map(|x| x.to_string()));
            }
            _ => {}
        }
        out
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut overrides = cli.common.overrides.clone();
    overrides.extend(cli.command.overrides());
    let cfg = RunConfig::load(cli.common.config.as_deref(), &overrides)?;
    match cli.command {
        Command::GenData { out, n_train, val_out, .. } => {
            let split = val_out.as_deref().zip(n_train);
            commands::gen_data(&cfg, &out, split)
        }
        Command::TrainSft { train, out, log, .. } => commands::run_sft(&cfg, train.as_deref(), &out, log.as_deref()),
        Command::TrainPpo {
            init,
            train,
            val,
            out,
            final_out,
            log,
            calibration,
            ..
        } => commands::run_ppo(
            &cfg,
            &PpoPaths {
                init: &init,
                train: train.as_deref(),
                val: val.as_deref(),
                out: &out,
                final_out: final_out.as_deref(),
                log: log.as_deref(),
                calibration: calibration.as_deref(),
            },
        ),
        Command::Evaluate {
            data,
            outputs,
            checkpoint,
            out,
        } => {
            let source = match (&outputs, &checkpoint) {
                (Some(p), _) => OutputSource::File(p),
                (None, Some(c)) => OutputSource::Checkpoint(c),
                (None, None) => anyhow::bail!("pass --outputs or --checkpoint"),
            };
            commands::evaluate(&cfg, &data, source, out.as_deref())
        }
        Command::Generate {
            checkpoint, data, out, ..
        } => commands::generate(&cfg, &checkpoint, &data, &out),
        Command::MakePairs {
            data,
            a,
            b,
            a_mode,
            b_mode,
            n,
            seed,
            out,
        } => {
            let b = b.unwrap_or_else(|| a.clone());
            commands::run_make_pairs(
                &cfg,
                &PairArgs {
                    data: &data,
                    a: &a,
                    b: &b,
                    a_decode: a_mode.into(),
                    b_decode: b_mode.into(),
                    n,
                    seed,
                    out: &out,
                },
            )
        }
        Command::Calibrate {
            pairs,
            judgments,
            data,
            out,
        } => commands::calibrate(&cfg, &pairs, &judgments, &data, out.as_deref()),
        Command::AnnotateServe {
            pairs,
            judgments,
            data,
            ui_dir,
            addr,
        } => commands::serve(
            &cfg,
            ServeArgs {
                pairs,
                judgments,
                data,
                ui_dir,
                addr,
            },
        ),
        Command::RewardScore {
            data,
            id,
            output,
            alpha,
            policy,
            reference,
        } => {
            let b = commands::reward_score(
                &cfg,
                &ScoreArgs {
                    data: &data,
                    id: &id,
                    output: &output,
                    alpha,
                    policy: policy.as_deref(),
                    reference: reference.as_deref(),
                },
            )?;
            println!("{}", serde_json::to_string_pretty(&b)?);
            Ok(())
        }
    }
}
