//! Command-line driver: synthesis, training, evaluation, sweeps, theory checks and replay.
//!
//! Exit codes: 0 on success, 2 for usage, configuration or input errors, 3 for numerical
//! failures (divergence, degenerate norms) and replay mismatches.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod manifest;

pub use manifest::RunManifest;

const CSV_SCHEMAS: &str = "\
CSV outputs:
  train  <out>.log.csv         step,epoch,loss
  eval   scores.csv            metric,value  (v_measure, homogeneity, completeness, cd_r, inertia, pca_ratio_1, pca_ratio_2)
  eval   avgcossim.csv         label,<label_1>,...,<label_E>  (mean cosine between label groups)
  sweep-dims                   dim,v_measure,homogeneity,completeness,status  (status: ok | skipped)
  sweep-labels                 labels,config,loss,v_measure,cd_r
Undefined values are written as nan.

Exit codes: 0 success, 2 usage/config/input error, 3 numerical failure or replay mismatch.";

#[derive(Debug, Parser)]
#[command(name = "ecm-sphere", version, about = "Emotion-circumplex geometry on the unit hypersphere", after_help = CSV_SCHEMAS)]
pub struct Cli {
    /// Worker threads for parallel work items (0 = all cores).
    #[arg(long, global = true, env = "ECM_SPHERE_JOBS")]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted synthetic dataset.
    Synth(SynthArgs),
    /// Train a projection head.
    #[command(after_help = "Log <out>.log.csv: step,epoch,loss (steps and epochs count from 1)")]
    Train(TrainArgs),
    /// Embed a dataset through a checkpoint and write clustering and geometry reports.
    #[command(after_help = "scores.csv: metric,value rows v_measure, homogeneity, completeness, cd_r, inertia, pca_ratio_1, pca_ratio_2\navgcossim.csv: label,<label_1>,...,<label_E>")]
    Eval(EvalArgs),
    /// V-measure after PCA reduction to each requested dimension.
    #[command(after_help = "Output: dim,v_measure,homogeneity,completeness,status")]
    SweepDims(SweepDimsArgs),
    /// Synthesize, train every loss and evaluate for each ECM in a series.
    #[command(after_help = "Output: labels,config,loss,v_measure,cd_r")]
    SweepLabels(SweepLabelsArgs),
    /// Numerical theory checks.
    Verify(VerifyArgs),
    /// MDS plots of the representation before and after each block module.
    Trace(TraceArgs),
    /// Convert a JSON-lines fixture ({id, label, vectors}) into an ECM1 dataset.
    Import(ImportArgs),
    /// Rerun a command from its manifest and compare output digests.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HeadArg {
    Gpt,
    Ngpt,
}

impl From<HeadArg> for ecm_sphere::HeadKind {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::Gpt => Self::Gpt,
            HeadArg::Ngpt => Self::Ngpt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Sincere,
    Softcse,
    Circularcse,
}

impl From<LossArg> for ecm_sphere::losses::LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Sincere => Self::Sincere,
            LossArg::Softcse => Self::Softcse,
            LossArg::Circularcse => Self::Circularcse,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PoolingArg {
    Cls,
    Last,
    Mean,
}

impl From<PoolingArg> for ecm_sphere::Pooling {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::Cls => Self::Cls,
            PoolingArg::Last => Self::Last,
            PoolingArg::Mean => Self::Mean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for ecm_sphere::synth::Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Self::Train,
            SplitArg::Test => Self::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CheckArg {
    SincereSimplex,
}

/// Signal concentration; `None` is noise-free.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kappa(pub Option<f64>);

/// `inf` for noise-free tokens, otherwise a positive concentration.
pub fn parse_kappa(s: &str) -> Result<Kappa, String> {
    if s.eq_ignore_ascii_case("inf") || s.eq_ignore_ascii_case("infinity") {
        return Ok(Kappa(None));
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_infinite() && v > 0.0 => Ok(Kappa(None)),
        Ok(v) if v > 0.0 && v.is_finite() => Ok(Kappa(Some(v))),
        _ => Err(format!("expected a positive number or inf, got {s:?}")),
    }
}

#[derive(Debug, Clone, Args)]
pub struct GeneratorArgs {
    /// Records per label.
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 16)]
    pub d: usize,
    /// Tokens per record (one signal token, the rest distractors).
    #[arg(long = "T", default_value_t = 1)]
    pub t: usize,
    /// Concentration of the signal token around its label direction, or inf.
    #[arg(long, default_value = "50", value_parser = parse_kappa)]
    pub kappa: Kappa,
    /// Norm of the distractor tokens.
    #[arg(long, default_value_t = 1.0)]
    pub distractor_scale: f64,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// ECM config JSON; the default 12-label circle when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub generator: GeneratorArgs,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitArg,
}

#[derive(Debug, Clone, Args)]
pub struct HeadArgs {
    #[arg(long, value_enum, default_value = "ngpt")]
    pub head: HeadArg,
    #[arg(long, default_value_t = 2)]
    pub n_heads: usize,
    #[arg(long, value_enum, default_value = "mean")]
    pub pooling: PoolingArg,
}

#[derive(Debug, Clone, Args)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 15)]
    pub epochs: usize,
    #[arg(long, default_value_t = 5e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.05)]
    pub tau: f64,
    /// Intra-class hinge margin (CircularCSE).
    #[arg(long, default_value_t = 0.0)]
    pub margin: f64,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// ECM config JSON; the default 12-label circle when omitted.
    #[arg(long)]
    pub ecm: Option<PathBuf>,
    #[command(flatten)]
    pub head: HeadArgs,
    #[arg(long, value_enum, default_value = "sincere")]
    pub loss: LossArg,
    /// Checkpoint path; the log goes to `<out>.log.csv` and the manifest to `<out>.manifest.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct ClusterArgs {
    /// k-means restarts.
    #[arg(long, default_value_t = 10)]
    pub restarts: usize,
    #[arg(long, default_value_t = 300)]
    pub max_iter: usize,
    /// k-means seed.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub ecm: Option<PathBuf>,
    /// Report directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cluster: ClusterArgs,
    /// Samples per label in the MDS plot.
    #[arg(long, default_value_t = 40)]
    pub mds_per_label: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SweepDimsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub ecm: Option<PathBuf>,
    /// Comma-separated PCA dimensions; powers of two up to d, and d, when omitted.
    #[arg(long, value_delimiter = ',')]
    pub dims: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cluster: ClusterArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SweepLabelsArgs {
    /// Comma-separated ECM config files.
    #[arg(long, value_delimiter = ',', required = true)]
    pub ecm_series: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub generator: GeneratorArgs,
    #[command(flatten)]
    pub head: HeadArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Seed for synthesis, initialization, batching and clustering.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub restarts: usize,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum)]
    pub check: CheckArg,
    /// Number of prototypes.
    #[arg(long = "E")]
    pub e: usize,
    #[arg(long)]
    pub d: usize,
    #[arg(long, default_value_t = 0.1)]
    pub tau: f64,
    #[arg(long, default_value_t = 5000)]
    pub steps: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Run even when d < E − 1, to inspect the constrained optimum.
    #[arg(long)]
    pub allow_infeasible: bool,
    /// Also write the report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TraceArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub ecm: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub per_label: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ImportArgs {
    #[arg(long)]
    pub jsonl: PathBuf,
    #[arg(long)]
    pub ecm: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

/// Raised when a replayed command writes different bytes than its manifest recorded.
#[derive(Debug)]
pub struct ReplayMismatch(pub Vec<String>);

impl std::fmt::Display for ReplayMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "replay produced different outputs: {}", self.0.join(", "))
    }
}

impl std::error::Error for ReplayMismatch {}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<ecm_sphere::Error>() {
            return if e.is_numerical() { 3 } else { 2 };
        }
        if cause.is::<ReplayMismatch>() {
            return 3;
        }
    }
    2
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let argv: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.jobs.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return 2;
        }
    };
    match pool.install(|| commands::execute(&cli.command, &argv)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests;
