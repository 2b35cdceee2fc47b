//! Command-line frontend.
//!
//! Every report goes to stdout as a single JSON document. Failures print
//! `{"code": ..., "message": ...}` on stderr and exit with status 1 (2 for
//! usage errors).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::adapter::{Orientation, OrientationPolicy, SuffixConvention};
use crate::checkpoint::{FactorStorage, OutputOptions};
use crate::extsub::{Mode, VectorAxis};
use crate::pipeline::{
    inspect, run_extract, run_pipeline, run_stats, run_truncate, ComputeDType, PipelineSpec, RunOptions, Step,
};
use crate::store::DType;
use crate::textmetrics::{score_file, LineFormat, DEFAULT_THRESHOLD};
use crate::Error;

/// Environment variable holding the default worker thread count.
pub const THREADS_ENV: &str = "EXTSUB_THREADS";

#[derive(Debug, Parser)]
#[command(name = "extsub", version, about = "Arithmetic on low-rank adapter checkpoints")]
pub struct Cli {
    /// Worker threads (0 = available parallelism).
    #[arg(long, global = true, env = THREADS_ENV, default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Subtract an anti-expert module from an expert module.
    Subtract {
        #[arg(long)]
        expert: PathBuf,
        #[arg(long)]
        anti: PathBuf,
        #[arg(long, value_enum, default_value_t = CliMode::Ext)]
        mode: CliMode,
        /// Defaults to 1.0 for ext and 0.2 for direct.
        #[arg(long, allow_negative_numbers = true)]
        lambda: Option<f64>,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// Write the extracted deficiency of the anti-expert module.
    Extract {
        #[arg(long)]
        expert: PathBuf,
        #[arg(long)]
        anti: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// Run an ordered pipeline described by a JSON file.
    Compose {
        spec: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// List tensors, paired layers and ranks of a checkpoint.
    Inspect {
        path: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Per-layer geometry of an expert/anti-expert pair.
    Stats {
        #[arg(long)]
        expert: PathBuf,
        #[arg(long)]
        anti: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Re-factorize every layer of a checkpoint by truncated SVD.
    Truncate {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// n-gram repetition of a file of generated responses.
    Repn {
        path: PathBuf,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long, value_enum, default_value_t = CliLineFormat::Auto)]
        format: CliLineFormat,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CliMode {
    Direct,
    Ext,
}

impl From<CliMode> for Mode {
    fn from(m: CliMode) -> Self {
        match m {
            CliMode::Direct => Mode::Direct,
            CliMode::Ext => Mode::Ext,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CliComputeDType {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CliOutDType {
    Same,
    F64,
    F32,
    F16,
    Bf16,
}

impl CliOutDType {
    fn dtype(self) -> Option<DType> {
        match self {
            CliOutDType::Same => None,
            CliOutDType::F64 => Some(DType::F64),
            CliOutDType::F32 => Some(DType::F32),
            CliOutDType::F16 => Some(DType::F16),
            CliOutDType::Bf16 => Some(DType::BF16),
        }
    }

    fn parse(s: &str) -> Result<Self, Error> {
        <Self as ValueEnum>::from_str(s, true).map_err(|_| Error::Pipeline(format!("unknown out_dtype {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CliOrientation {
    Auto,
    Standard,
    Transposed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CliAxis {
    Rows,
    Columns,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CliLineFormat {
    Auto,
    Plain,
    Jsonl,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long, value_enum, default_value_t = CliComputeDType::F64)]
    pub compute_dtype: CliComputeDType,
    #[arg(long, value_enum, default_value_t = CliOutDType::Same)]
    pub out_dtype: CliOutDType,
    /// Degeneracy threshold on row norms (default 1e-12 for f64, 1e-6 for f32).
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long, default_value = ".lora_B.weight")]
    pub b_suffix: String,
    #[arg(long, default_value = ".lora_A.weight")]
    pub a_suffix: String,
    #[arg(long, value_enum, default_value_t = CliOrientation::Auto)]
    pub orientation: CliOrientation,
    #[arg(long, value_enum, default_value_t = CliAxis::Rows)]
    pub axis: CliAxis,
    /// In ext steps, extract against the original expert rather than the running result.
    #[arg(long)]
    pub frozen_expert: bool,
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    /// Truncation rank (default: each layer's original rank).
    #[arg(long, conflicts_with = "full")]
    pub rank: Option<usize>,
    /// Store full-rank deltas instead of truncating.
    #[arg(long)]
    pub full: bool,
    /// Store a layer at full rank when truncation error exceeds this.
    #[arg(long, conflicts_with = "full")]
    pub max_error: Option<f64>,
}

impl OutputArgs {
    fn storage(&self) -> FactorStorage {
        if self.full {
            FactorStorage::Full
        } else {
            FactorStorage::Truncate { rank: self.rank, max_error: self.max_error }
        }
    }
}

impl CommonArgs {
    fn options(&self, storage: FactorStorage) -> RunOptions {
        RunOptions {
            convention: SuffixConvention::new(&self.b_suffix, &self.a_suffix),
            orientation: match self.orientation {
                CliOrientation::Auto => OrientationPolicy::Auto,
                CliOrientation::Standard => OrientationPolicy::Fixed(Orientation::Standard),
                CliOrientation::Transposed => OrientationPolicy::Fixed(Orientation::Transposed),
            },
            compute: match self.compute_dtype {
                CliComputeDType::F32 => ComputeDType::F32,
                CliComputeDType::F64 => ComputeDType::F64,
            },
            eps: self.eps,
            axis: match self.axis {
                CliAxis::Rows => VectorAxis::Rows,
                CliAxis::Columns => VectorAxis::Columns,
            },
            output: OutputOptions { storage, out_dtype: self.out_dtype.dtype() },
            frozen_expert: self.frozen_expert,
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("reports serialize")
}

fn save(store: &crate::store::TensorStore, path: &Path) -> Result<(), Error> {
    Ok(store.save(path)?)
}

/// Runs a parsed command, returning the stdout JSON.
pub fn execute(command: &Command) -> Result<String, Error> {
    match command {
        Command::Subtract { expert, anti, mode, lambda, output, common, out } => {
            let opts = common.options(out.storage());
            let step = Step::new((*mode).into(), anti, *lambda);
            let outcome = run_pipeline(expert, &[step], &opts)?;
            save(&outcome.store, output)?;
            Ok(to_json(&outcome.summary))
        }
        Command::Extract { expert, anti, output, common, out } => {
            let opts = common.options(out.storage());
            let (store, summary, _) = run_extract(expert, anti, &opts)?;
            save(&store, output)?;
            Ok(to_json(&summary))
        }
        Command::Compose { spec, common } => {
            let spec = PipelineSpec::load(spec)?;
            let storage = if spec.full {
                FactorStorage::Full
            } else {
                FactorStorage::Truncate {
                    rank: spec.truncate.map(|t| t.rank),
                    max_error: spec.truncate.and_then(|t| t.max_error),
                }
            };
            let mut opts = common.options(storage);
            if let Some(c) = spec.compute_dtype {
                opts.compute = c;
            }
            if let Some(d) = &spec.out_dtype {
                opts.output.out_dtype = CliOutDType::parse(d)?.dtype();
            }
            if spec.eps.is_some() {
                opts.eps = spec.eps;
            }
            opts.frozen_expert |= spec.frozen_expert;
            let outcome = run_pipeline(&spec.expert, &spec.steps(), &opts)?;
            save(&outcome.store, &spec.output)?;
            Ok(to_json(&outcome.summary))
        }
        Command::Inspect { path, common } => {
            let opts = common.options(FactorStorage::default());
            Ok(to_json(&inspect(path, &opts)?))
        }
        Command::Stats { expert, anti, common } => {
            let opts = common.options(FactorStorage::default());
            Ok(to_json(&run_stats(expert, anti, &opts)?))
        }
        Command::Truncate { input, output, common, out } => {
            let opts = common.options(out.storage());
            let (store, layers) = run_truncate(input, &opts)?;
            save(&store, output)?;
            Ok(to_json(&json!({ "layers": layers })))
        }
        Command::Repn { path, n, threshold, format } => {
            let format = match format {
                CliLineFormat::Auto => LineFormat::Auto,
                CliLineFormat::Plain => LineFormat::Plain,
                CliLineFormat::Jsonl => LineFormat::JsonLines,
            };
            let score = score_file(path, *n, format)?;
            #[derive(Serialize)]
            struct RepReport {
                n: usize,
                count: usize,
                mean: f64,
                max: f64,
                over_threshold_count: usize,
                threshold: f64,
                over_threshold: bool,
            }
            Ok(to_json(&RepReport {
                n: *n,
                count: score.per_text.len(),
                mean: score.mean,
                max: score.max(),
                over_threshold_count: score.count_at_or_above(*threshold),
                threshold: *threshold,
                over_threshold: score.mean >= *threshold,
            }))
        }
    }
}

fn error_json(code: &str, message: &str) -> String {
    to_json(&json!({ "code": code, "message": message }))
}

/// Parses `args`, runs the command on a dedicated thread pool and returns
/// the process exit code. Output goes to the given writers.
pub fn run<I, T>(args: I, stdout: &mut dyn std::io::Write, stderr: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return 0;
            }
            let _ = writeln!(stderr, "{}", error_json("Usage", e.to_string().trim()));
            return 2;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(stderr, "{}", error_json("ThreadPool", &e.to_string()));
            return 1;
        }
    };
    match pool.install(|| execute(&cli.command)) {
        Ok(out) => {
            let _ = writeln!(stdout, "{out}");
            0
        }
        Err(e) => {
            let _ = writeln!(stderr, "{}", error_json(e.code(), &e.to_string()));
            1
        }
    }
}
