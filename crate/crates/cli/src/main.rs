use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use irisnas::iriscode::DEFAULT_MAX_SHIFT;
use irisnas::search::{LossKind, SearchConfig, SplitScheme, TrainConfig};
use irisnas::supernet::OperationSet;

mod config;
mod corpus;
mod model;

use config::Config;
use model::{EvalJob, NetShape, ScoreSource, SearchJob, TrainJob};

/// Budget-constrained architecture search for iris recognition.
#[derive(Parser, Debug)]
#[command(name = "irisnas", version)]
struct Cli {
    /// Seed for every random choice (splits, initialization, batches).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// JSON file of default flag values. Flags given on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic eye corpus with ground-truth circles.
    SynthData(SynthArgs),
    /// Segment and normalize eye images; optionally encode IrisCode templates.
    Preprocess(PreprocessArgs),
    /// Print the FLOP/parameter table of a supernet or architecture.
    Cost(CostArgs),
    /// Search an architecture under a budget.
    Search(SearchArgs),
    /// Train a searched architecture from scratch.
    Train(TrainArgs),
    /// Compute EER and FRR at a target FAR.
    Eval(EvalArgs),
    /// Hamming distance between two templates.
    Match(MatchArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    identities: Option<usize>,
    #[arg(long)]
    per_identity: Option<usize>,
    /// Largest eye rotation, in degrees.
    #[arg(long)]
    max_rotation: Option<f64>,
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    /// Manifest of eye images (`path,subject_id`).
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Ground-truth circles and masks (from synth-data) instead of segmenting.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Also encode IrisCode templates.
    #[arg(long)]
    templates: bool,
}

#[derive(Args, Debug)]
struct NetArgs {
    /// Node count L, including the stem output.
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    /// `basic`, `extended` or a comma list such as `conv3x3,maxpool2x2,zero`.
    #[arg(long)]
    ops: Option<String>,
    /// Box-average factor applied to the 64x512 normalized iris.
    #[arg(long)]
    downsample: Option<usize>,
}

#[derive(Args, Debug)]
struct CostArgs {
    /// Architecture JSON; without it the full supernet is tabulated.
    #[arg(long)]
    arch: Option<PathBuf>,
    #[arg(long)]
    out_dim: Option<usize>,
    #[command(flatten)]
    net: NetArgs,
}

#[derive(Args, Debug)]
struct SearchArgs {
    /// Normalized-iris manifest written by preprocess.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    budget_flops: Option<f64>,
    #[arg(long)]
    budget_params: Option<f64>,
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long)]
    lr_w: Option<f64>,
    #[arg(long)]
    lr_alpha: Option<f64>,
    #[arg(long)]
    alpha_l1: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// `xent` or `triplet`.
    #[arg(long)]
    loss: Option<String>,
    /// `sample` or `subject`.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    /// Architecture JSON to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the trace CSV here.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Also write the final supernet state (logits) here.
    #[arg(long)]
    state: Option<PathBuf>,
    #[command(flatten)]
    net: NetArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    arch: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    downsample: Option<usize>,
    /// Model directory to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Score CSV (`label,score`).
    #[arg(long, conflicts_with_all = ["model", "templates"])]
    scores: Option<PathBuf>,
    /// Model directory written by train; scores its test split.
    #[arg(long, requires = "manifest", conflicts_with = "templates")]
    model: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Template manifest written by preprocess --templates.
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    max_shift: Option<usize>,
    #[arg(long)]
    far: Option<f64>,
    /// Evenly spaced ROC thresholds instead of every distinct score.
    #[arg(long)]
    roc_points: Option<usize>,
    /// Write the ROC curve here.
    #[arg(long)]
    roc: Option<PathBuf>,
    /// Write the pooled scores here.
    #[arg(long)]
    scores_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MatchArgs {
    a: PathBuf,
    b: PathBuf,
    #[arg(long)]
    max_shift: Option<usize>,
}

fn net_shape(c: &Config, a: NetArgs) -> Result<NetShape> {
    let ops = c.pick(a.ops, "ops", "basic".to_string())?;
    Ok(NetShape {
        nodes: c.pick(a.nodes, "nodes", 4)?,
        channels: c.pick(a.channels, "channels", 8)?,
        ops: ops.parse::<OperationSet>()?,
        downsample: c.pick(a.downsample, "downsample", 16)?,
    })
}

fn run(cli: Cli) -> Result<()> {
    let name = match &cli.command {
        Command::SynthData(_) => "synth_data",
        Command::Preprocess(_) => "preprocess",
        Command::Cost(_) => "cost",
        Command::Search(_) => "search",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Match(_) => "match",
    };
    let c = Config::load(cli.config.as_deref(), name)?;
    let seed = c.pick(cli.seed, "seed", 0u64)?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::SynthData(a) => corpus::synth_data(
            &c.require(a.out, "out")?,
            c.pick(a.identities, "identities", 20)?,
            c.pick(a.per_identity, "per_identity", 10)?,
            c.pick(a.max_rotation, "max_rotation", 15.0)?,
            seed,
        )?,
        Command::Preprocess(a) => corpus::preprocess(
            &c.require(a.manifest, "manifest")?,
            &c.require(a.out, "out")?,
            c.optional(a.truth, "truth")?.as_deref(),
            a.templates || c.pick(None, "templates", false)?,
        )?,
        Command::Cost(a) => {
            let arch = c.optional(a.arch, "arch")?;
            let out_dim = c.pick(a.out_dim, "out_dim", 100)?;
            let shape = net_shape(&c, a.net)?;
            model::cost(&mut out, arch.as_deref(), &shape, out_dim, seed)?
        }
        Command::Search(a) => {
            let d = SearchConfig::default();
            let config = SearchConfig {
                budget: model::budget(
                    c.optional(a.budget_flops, "budget_flops")?,
                    c.optional(a.budget_params, "budget_params")?,
                )?,
                xi: c.pick(a.xi, "xi", d.xi)?,
                lr_w: c.pick(a.lr_w, "lr_w", d.lr_w)?,
                lr_alpha: c.pick(a.lr_alpha, "lr_alpha", d.lr_alpha)?,
                alpha_l1: c.pick(a.alpha_l1, "alpha_l1", d.alpha_l1)?,
                epochs: c.pick(a.epochs, "epochs", d.epochs)?,
                batch_size: c.pick(a.batch_size, "batch_size", d.batch_size)?,
                loss: c.parsed::<LossKind>(a.loss, "loss", "xent")?,
                seed,
                ..d
            };
            let job = SearchJob {
                manifest: c.require(a.manifest, "manifest")?,
                split: c.parsed::<SplitScheme>(a.split, "split", "sample")?,
                embedding_dim: c.pick(a.embedding_dim, "embedding_dim", TrainConfig::default().embedding_dim)?,
                out: c.require(a.out, "out")?,
                trace: c.optional(a.trace, "trace")?,
                state: c.optional(a.state, "state")?,
                shape: net_shape(&c, a.net)?,
                config,
            };
            model::search(&mut out, &job)?
        }
        Command::Train(a) => {
            let d = TrainConfig::default();
            let config = TrainConfig {
                lr: c.pick(a.lr, "lr", d.lr)?,
                epochs: c.pick(a.epochs, "epochs", d.epochs)?,
                batch_size: c.pick(a.batch_size, "batch_size", d.batch_size)?,
                embedding_dim: c.pick(a.embedding_dim, "embedding_dim", d.embedding_dim)?,
                seed,
                ..d
            };
            let job = TrainJob {
                manifest: c.require(a.manifest, "manifest")?,
                arch: c.require(a.arch, "arch")?,
                split: c.parsed::<SplitScheme>(a.split, "split", "sample")?,
                downsample: c.pick(a.downsample, "downsample", 16)?,
                out: c.require(a.out, "out")?,
                config,
            };
            model::train(&mut out, &job)?
        }
        Command::Eval(a) => {
            let max_shift = c.pick(a.max_shift, "max_shift", DEFAULT_MAX_SHIFT)?;
            let source = if let Some(p) = a.scores {
                ScoreSource::File(p)
            } else if let Some(dir) = a.model {
                ScoreSource::Model {
                    dir,
                    manifest: c.require(a.manifest, "manifest")?,
                }
            } else if let Some(manifest) = a.templates {
                ScoreSource::Templates { manifest, max_shift }
            } else {
                bail!("eval needs --scores, --model with --manifest, or --templates");
            };
            let job = EvalJob {
                source,
                far_target: c.pick(a.far, "far", irisnas::eval::DEFAULT_FAR_TARGET)?,
                roc_points: c.optional(a.roc_points, "roc_points")?,
                roc_out: c.optional(a.roc, "roc")?,
                scores_out: c.optional(a.scores_out, "scores_out")?,
                seed,
            };
            model::eval(&mut out, &job)?
        }
        Command::Match(a) => {
            let max_shift = c.pick(a.max_shift, "max_shift", DEFAULT_MAX_SHIFT)?;
            model::match_files(&mut out, &a.a, &a.b, max_shift)?
        }
    }
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
