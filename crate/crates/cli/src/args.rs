use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "rfk", version, about = "ReduceFormer attention kit")]
pub struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, env = "RFK_SEED", default_value_t = 0)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-stage parameter and MAC table of a model variant.
    Summary(SummaryArgs),
    /// Logits of a model on an image, a raw tensor or random input.
    Forward(ForwardArgs),
    /// Time one attention operator or model.
    Bench(BenchArgs),
    /// Sweep tokens, channels or resolution and fit FLOP scaling slopes.
    Scaling(ScalingArgs),
    /// ReduceFormer against ReLU linear attention on one shared input.
    Compare(CompareArgs),
    /// Finite-difference check of reverse-mode gradients.
    Gradcheck(GradcheckArgs),
    /// Overfit a small model on random labels.
    TrainToy(TrainToyArgs),
    /// Write freshly initialized weights.
    SaveInit(SaveInitArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Preset variant: b1, b2 or b3.
    #[arg(long, conflicts_with = "config")]
    pub variant: Option<String>,
    /// key=value config file; flags below override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input resolution.
    #[arg(long = "res")]
    pub resolution: Option<usize>,
    /// Attention epsilon.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Local-context scales S.
    #[arg(long)]
    pub scales: Option<usize>,
    /// Depthwise kernel sizes, comma separated (S - 1 entries).
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub kernels: Option<Vec<usize>>,
    /// Number of classes.
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Args)]
pub struct SummaryArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("input").required(true)))]
pub struct ForwardArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Weight file written by save-init.
    #[arg(long, conflicts_with = "random_init", required_unless_present = "random_init")]
    pub weights: Option<PathBuf>,
    /// Use seeded random initialization instead of a weight file.
    #[arg(long)]
    pub random_init: bool,
    /// Binary PPM (P6) image.
    #[arg(long, group = "input")]
    pub image: Option<PathBuf>,
    /// Raw little-endian f32 tensor of shape (batch, 3, res, res).
    #[arg(long, group = "input")]
    pub raw: Option<PathBuf>,
    /// Seeded uniform [-1, 1) input.
    #[arg(long, group = "input")]
    pub random: bool,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    /// Logits CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Target {
    /// ReduceFormer attention.
    Rf,
    /// ReLU linear attention baseline.
    Eq1,
    Model,
}

#[derive(Debug, Args)]
pub struct TimingArgs {
    #[arg(long, default_value_t = 20)]
    pub repeats: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum)]
    pub target: Target,
    /// Attention channels.
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    /// Attention tokens.
    #[arg(long, default_value_t = 196)]
    pub n: usize,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub timing: TimingArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct ScalingArgs {
    #[arg(long, value_enum)]
    pub target: Target,
    /// Attention channels; a list makes it the swept axis.
    #[arg(long, value_delimiter = ',', default_value = "64")]
    pub d: Vec<usize>,
    /// Attention tokens; a list makes it the swept axis.
    #[arg(long, value_delimiter = ',', default_value = "49,196,784,3136")]
    pub n: Vec<usize>,
    /// Model resolutions to sweep.
    #[arg(long = "sweep-res", value_delimiter = ',')]
    pub sweep_res: Vec<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub timing: TimingArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    #[arg(long, default_value_t = 196)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 50)]
    pub repeats: usize,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// JSON report; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CheckOp {
    Relu,
    Conv2d,
    Reductions,
    RfAttn,
    RfBlock,
    All,
    /// ReLU with a deliberately wrong adjoint; must fail.
    #[value(hide = true)]
    BrokenRelu,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub op: CheckOp,
    #[arg(long, default_value_t = 8)]
    pub d: usize,
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = rfk_core::checks::GRADCHECK_TOL)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f32,
    #[arg(long, default_value_t = 16)]
    pub samples: usize,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    /// key=value config file for the model; the built-in toy config otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Fail unless final loss < max_ratio · initial loss.
    #[arg(long, default_value_t = 0.1)]
    pub max_ratio: f64,
    /// Loss trace CSV (step,loss); stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SaveInitArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
}
