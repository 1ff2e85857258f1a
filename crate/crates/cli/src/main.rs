//! `refsketch`: pretrain a style encoder, curate corpora, train, extract and
//! evaluate. Progress goes to stderr; results go to the files named on the
//! command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use refsketch::evaluation::CyclicTarget;

#[derive(Debug, Parser)]
#[command(name = "refsketch", version, about = "Reference-based sketch extraction")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Seed for every random stream of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_parser = ["cpu"])]
    pub device: Option<String>,
    /// TOML file with [pretrain], [curate], [train] and [evaluate] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for every file the command writes.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true, value_parser = ["off", "error", "warn", "info", "debug", "trace"])]
    pub log_level: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the style encoder with a triplet loss on a corpus manifest.
    PretrainStyle(PretrainArgs),
    /// Cluster-based corpus curation.
    #[command(subcommand)]
    Curate(CurateCommand),
    Train(Box<TrainArgs>),
    /// Draw one content image in the style of one reference sketch.
    Extract(ExtractArgs),
    /// Score a checkpoint on the 4-style evaluation set.
    Evaluate(EvaluateArgs),
    /// Feed first-pass outputs back as references and score the second pass.
    CyclicEval(CyclicArgs),
    /// Write style embeddings of sketches to CSV.
    ExportEmbeddings(ExportArgs),
    /// Print the resolved configuration. Any other invocation may follow
    /// (`config-dump train --epochs 1 ...`) to include its flags.
    ConfigDump {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        invocation: Vec<String>,
    },
    /// Render synthetic corpora for smoke runs.
    SynthCorpus(SynthArgs),
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// CSV manifest with columns path, shape_id, style_id.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Encoder weights file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub max_attempts: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum CurateCommand {
    /// Cluster images and keep the clusters a reviewer lists per round.
    Cull(CullArgs),
    /// Cluster sketches into drawing styles.
    Styles(StylesArgs),
}

#[derive(Debug, Args)]
pub struct CurateShared {
    /// Directory of images.
    #[arg(long)]
    pub images: PathBuf,
    /// VGG16 weights; features fall back to pooled pixels without them.
    #[arg(long)]
    pub vgg_weights: Option<PathBuf>,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub thumb: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CullArgs {
    #[command(flatten)]
    pub shared: CurateShared,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Cluster labels to keep after one round, comma separated. Repeat once
    /// per reviewed round.
    #[arg(long)]
    pub keep: Vec<String>,
}

#[derive(Debug, Args)]
pub struct StylesArgs {
    #[command(flatten)]
    pub shared: CurateShared,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub color_dir: PathBuf,
    #[arg(long)]
    pub sketch_dir: PathBuf,
    /// Pretrained style encoder weights.
    #[arg(long)]
    pub style_encoder: Option<PathBuf>,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Generator width.
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// Channel attention reduction ratio.
    #[arg(long)]
    pub reduction: Option<usize>,
    #[arg(long)]
    pub discriminator_channels: Option<usize>,
    #[arg(long)]
    pub no_attention: bool,
    #[arg(long)]
    pub no_style: bool,
    #[arg(long)]
    pub no_line: bool,
    #[arg(long)]
    pub no_cyc: bool,
    /// Literal log(1 - D) generator objective.
    #[arg(long)]
    pub saturating: bool,
    #[arg(long)]
    pub hed_weights: Option<PathBuf>,
    #[arg(long)]
    pub vgg_weights: Option<PathBuf>,
    /// VGG taps compared by the line loss, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub line_taps: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub content: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Root of the evaluation set (color/ and style1..style4/).
    #[arg(long)]
    pub dataset: PathBuf,
    /// JSON report; a CSV with the same stem is written beside it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub vgg_weights: Option<PathBuf>,
    #[arg(long)]
    pub lpips_weights: Option<PathBuf>,
    /// Scoring resolution (512 for comparable numbers).
    #[arg(long)]
    pub resolution: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CyclicArgs {
    #[command(flatten)]
    pub eval: EvaluateArgs,
    #[arg(long, value_enum)]
    pub against: Option<Against>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Against {
    FirstOutput,
    GroundTruth,
}

impl From<Against> for CyclicTarget {
    fn from(a: Against) -> Self {
        match a {
            Against::FirstOutput => CyclicTarget::FirstOutput,
            Against::GroundTruth => CyclicTarget::GroundTruth,
        }
    }
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct SketchSource {
    /// Corpus manifest; its style_id fills the style column.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Directory of sketches; the style column is left empty.
    #[arg(long)]
    pub images: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub encoder: PathBuf,
    #[command(flatten)]
    pub source: SketchSource,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub resolution: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SynthKind {
    /// Style corpus with manifest.csv.
    Style,
    /// 25 shapes in color and four sketch styles.
    Eval,
    /// Unrelated color/ and sketch/ folders.
    Unpaired,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub kind: SynthKind,
    /// Number of shapes (style, unpaired); ignored for eval.
    #[arg(long, default_value_t = 12)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(e)) => e.exit(),
        Err(commands::Failure::Domain(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
