//! The `pgs` command line: `train`, `stylize` and `bench`.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pgs_core::config::{Aggregator, ArchConfig, Metric, Mode, PipelineConfig, Selection, TrainConfig};
use pgs_core::params::ModelParameters;
use pgs_core::pipeline::stylize;

use crate::bench::{format_table, run_bench};
use crate::checkpoint::{load_checkpoint, load_checkpoint_for};
use crate::error::{PgsError, Result};
use crate::imageio::{load_for_stylize, save_png};
use crate::train::{loss_network, run_training, TrainJob};

/// Environment variable that overrides `--seed`.
pub const SEED_ENV: &str = "PGS_SEED";

#[derive(Debug, Parser)]
#[command(name = "pgs", version, about = "Patch-graph neural style transfer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on folders of content and style images.
    Train(TrainArgs),
    /// Stylize one content image with one style image.
    Stylize(StylizeArgs),
    /// Time inference at several square input sizes.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Ncc,
    Euclidean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AggregatorArg {
    Gat,
    Gcn,
    Gin,
    Sage,
    Edgeconv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Tiny,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SelectionArg {
    Hard,
    Soft,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Ncc => Metric::Ncc,
            MetricArg::Euclidean => Metric::Euclidean,
        }
    }
}

impl From<AggregatorArg> for Aggregator {
    fn from(a: AggregatorArg) -> Self {
        match a {
            AggregatorArg::Gat => Aggregator::Gat,
            AggregatorArg::Gcn => Aggregator::Gcn,
            AggregatorArg::Gin => Aggregator::Gin,
            AggregatorArg::Sage => Aggregator::Sage,
            AggregatorArg::Edgeconv => Aggregator::EdgeConv,
        }
    }
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Tiny => Mode::Tiny,
            ModeArg::Full => Mode::Full,
        }
    }
}

/// Graph and refinement switches shared by every command.
#[derive(Clone, Debug, Args)]
pub struct GraphArgs {
    /// Style neighbors per content patch (also the intra-content degree).
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Side of the square feature patches.
    #[arg(long = "patch-size", default_value_t = 5)]
    pub patch_size: usize,
    /// Step between neighboring patch origins.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Patch similarity used for neighbor search.
    #[arg(long, value_enum, default_value_t = MetricArg::Ncc)]
    pub metric: MetricArg,
    /// Message-passing aggregator.
    #[arg(long, value_enum, default_value_t = AggregatorArg::Gat)]
    pub aggregator: AggregatorArg,
    /// Skip content-to-content message passing [default: enabled].
    #[arg(long)]
    pub no_intra: bool,
    /// Use fixed-size style patches instead of predicted scales [default: enabled].
    #[arg(long)]
    pub no_deformable: bool,
    /// Skip the global statistics alignment before decoding [default: enabled].
    #[arg(long)]
    pub no_refine: bool,
}

impl GraphArgs {
    pub fn pipeline(&self, selection: Selection) -> PipelineConfig {
        PipelineConfig {
            k: self.k,
            patch_side: self.patch_size,
            stride: self.stride,
            metric: self.metric.into(),
            aggregator: self.aggregator.into(),
            intra_enabled: !self.no_intra,
            deformable_enabled: !self.no_deformable,
            refine_enabled: !self.no_refine,
            selection,
        }
    }
}

/// Architecture of a freshly initialized model.
#[derive(Clone, Debug, Args)]
pub struct ArchArgs {
    /// Network size: `tiny` trains on 64×64 crops, `full` on 256×256 with VGG-19.
    #[arg(long, value_enum, default_value_t = ModeArg::Tiny)]
    pub mode: ModeArg,
    /// Encoder output channels in tiny mode (multiple of 4).
    #[arg(long, default_value_t = 32)]
    pub channels: usize,
    /// Pretrained VGG-19 weights archive (full mode).
    #[arg(long)]
    pub vgg_weights: Option<PathBuf>,
}

impl ArchArgs {
    pub fn arch(&self) -> Result<ArchConfig> {
        let base = match self.mode {
            ModeArg::Tiny => ArchConfig::tiny(self.channels),
            ModeArg::Full => ArchConfig::full(),
        };
        base.validate()?;
        Ok(base)
    }
}

#[derive(Clone, Debug, Args)]
pub struct TrainArgs {
    /// Folder of content images.
    #[arg(long)]
    pub content_dir: PathBuf,
    /// Folder of style images.
    #[arg(long)]
    pub style_dir: PathBuf,
    /// Output folder for the checkpoint and the loss log.
    #[arg(long, default_value = "pgs-out")]
    pub out: PathBuf,
    /// Optimizer steps.
    #[arg(long, default_value_t = 1000)]
    pub iterations: usize,
    /// Content/style pairs per step.
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Decoupled weight decay.
    #[arg(long, default_value_t = 5e-5)]
    pub weight_decay: f64,
    /// Style loss weight.
    #[arg(long, default_value_t = 10.0)]
    pub lambda: f64,
    /// Seed for initialization and pair sampling (overridden by PGS_SEED).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Print a progress line every this many steps (0 disables).
    #[arg(long, default_value_t = 10)]
    pub log_every: usize,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub graph: GraphArgs,
}

#[derive(Clone, Debug, Args)]
pub struct StylizeArgs {
    /// Trained checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Content image.
    #[arg(long)]
    pub content: PathBuf,
    /// Style image.
    #[arg(long)]
    pub style: PathBuf,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
    /// Resize both inputs so their shorter side has this length [default: keep size].
    #[arg(long)]
    pub size: Option<u32>,
    /// Expected model size; a checkpoint of another size is rejected [default: accept any].
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Scale choice per style location.
    #[arg(long, value_enum, default_value_t = SelectionArg::Hard)]
    pub selection: SelectionArg,
    #[command(flatten)]
    pub graph: GraphArgs,
}

#[derive(Clone, Debug, Args)]
pub struct BenchArgs {
    /// Checkpoint to time [default: fresh parameters from --mode/--channels].
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Square input sides, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "256,384,512")]
    pub sizes: Vec<usize>,
    /// Timed runs per size.
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// Seed of the random inputs and fresh parameters (overridden by PGS_SEED).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub graph: GraphArgs,
}

fn seed_override(env: Option<OsString>, flag: u64) -> Result<u64> {
    match env {
        None => Ok(flag),
        Some(v) => v
            .to_str()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| PgsError::Usage(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))),
    }
}

fn cmd_train(args: &TrainArgs, seed_env: Option<OsString>, out: &mut dyn Write) -> Result<()> {
    let train = TrainConfig {
        iterations: args.iterations,
        batch_size: args.batch_size,
        learning_rate: args.lr,
        weight_decay: args.weight_decay,
        lambda: args.lambda,
        seed: seed_override(seed_env, args.seed)?,
    };
    train.validate()?;
    let job = TrainJob {
        arch: args.arch.arch()?,
        train,
        pipeline: args.graph.pipeline(Selection::Soft),
        content_dir: args.content_dir.clone(),
        style_dir: args.style_dir.clone(),
        out_dir: args.out.clone(),
        vgg_weights: args.arch.vgg_weights.clone(),
    };
    let every = args.log_every;
    let outcome = run_training(&job, |r| {
        if every > 0 && r.iteration % every == 0 {
            let _ = writeln!(
                out,
                "iteration {} content {:.6} style {:.6} total {:.6}",
                r.iteration, r.loss.content, r.loss.style, r.loss.total
            );
        }
    })?;
    writeln!(out, "checkpoint: {}", outcome.checkpoint.display()).ok();
    writeln!(out, "loss log: {}", outcome.loss_log.display()).ok();
    Ok(())
}

fn stylize_params(args: &StylizeArgs) -> Result<ModelParameters> {
    match args.mode {
        None => Ok(load_checkpoint(&args.checkpoint)?.0),
        Some(mode) => {
            let (params, _) = load_checkpoint(&args.checkpoint)?;
            let wanted = ArchConfig {
                mode: mode.into(),
                ..params.arch().clone()
            };
            load_checkpoint_for(&args.checkpoint, &wanted)
        }
    }
}

fn cmd_stylize(args: &StylizeArgs, out: &mut dyn Write) -> Result<()> {
    let params = stylize_params(args)?;
    let content = load_for_stylize(&args.content, args.size)?;
    let style = load_for_stylize(&args.style, args.size)?;
    let selection = match args.selection {
        SelectionArg::Hard => Selection::Hard,
        SelectionArg::Soft => Selection::Soft,
    };
    let result = stylize(&content, &style, &params, &args.graph.pipeline(selection))?;
    save_png(&result.image, &args.out)?;
    writeln!(out, "wrote {}", args.out.display()).ok();
    Ok(())
}

fn cmd_bench(args: &BenchArgs, seed_env: Option<OsString>, out: &mut dyn Write) -> Result<()> {
    let seed = seed_override(seed_env, args.seed)?;
    let params = match &args.checkpoint {
        Some(path) => load_checkpoint(path)?.0,
        None => {
            let arch = args.arch.arch()?;
            let net = loss_network(&arch, args.arch.vgg_weights.as_deref())?;
            ModelParameters::init(&arch, &net, seed)?
        }
    };
    let rows = run_bench(
        &params,
        &args.graph.pipeline(Selection::Hard),
        &args.sizes,
        args.repeats,
        seed,
    )?;
    write!(out, "{}", format_table(&rows)).ok();
    Ok(())
}

/// Runs one invocation and returns its exit code. `seed_env` is the value of
/// [`SEED_ENV`], if set.
pub fn run_with(
    argv: impl IntoIterator<Item = impl Into<OsString> + Clone>,
    seed_env: Option<OsString>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().ansi().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a, seed_env, out),
        Command::Stylize(a) => cmd_stylize(a, out),
        Command::Bench(a) => cmd_bench(a, seed_env, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

/// [`run_with`] on the process arguments, environment and standard streams.
pub fn run() -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(
        std::env::args_os(),
        std::env::var_os(SEED_ENV),
        &mut stdout.lock(),
        &mut stderr.lock(),
    )
}
