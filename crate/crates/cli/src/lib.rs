//! `dcls` command-line driver: gradient checks, timing sweeps, toy training and inspection.
//!
//! Exit codes: 0 success, 1 a checked criterion failed, 2 usage or I/O error.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Deserialize;

pub mod bench;
pub mod gradcheck;
pub mod inspect;
pub mod train;

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILED: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Library(#[from] dcls::DclsError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "dcls",
    version,
    about = "Dilated convolution with learnable spacings"
)]
pub struct Cli {
    /// Worker threads for the data-parallel kernels.
    #[arg(long, global = true, env = dcls::parallel::WORKERS_ENV)]
    pub workers: Option<usize>,

    /// TOML file with `[gradcheck]`, `[bench]`, `[train]` and `[inspect]` tables. Flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check analytic gradients against central finite differences.
    Gradcheck(gradcheck::GradcheckArgs),
    /// Time kernel construction against the convolution it feeds.
    Bench(bench::BenchArgs),
    /// Run the teacher/student position-recovery experiment.
    Train(train::TrainArgs),
    /// Emit a diagnostic from a saved model or training report.
    Inspect(inspect::InspectArgs),
}

/// Contents of the optional `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub workers: Option<usize>,
    #[serde(default)]
    pub gradcheck: gradcheck::GradcheckFile,
    #[serde(default)]
    pub bench: bench::BenchFile,
    /// Any `TrainConfig` field.
    #[serde(default)]
    pub train: Option<toml::Table>,
    #[serde(default)]
    pub inspect: inspect::InspectFile,
}

impl FileConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

/// Run a parsed command line and return the process exit code.
pub fn run(cli: Cli) -> u8 {
    match dispatch(cli) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_FAILED,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<bool> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let workers = cli.workers.or(file.workers);
    if workers == Some(0) {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    match cli.command {
        Command::Gradcheck(args) => {
            let opts = args.resolve(&file.gradcheck)?;
            Ok(in_pool(workers, || gradcheck::run_gradcheck(&opts)))
        }
        Command::Bench(args) => bench::run_bench(&args.resolve(&file.bench, workers)?),
        Command::Train(args) => {
            let (cfg, out_dir) = args.resolve(file.train.as_ref())?;
            in_pool(workers, || train::run_train(&cfg, &out_dir))
        }
        Command::Inspect(args) => {
            let opts = args.resolve(&file.inspect)?;
            in_pool(workers, || inspect::run_inspect(&opts))
        }
    }
}

/// Run `f` on `workers` threads, or on rayon's default pool.
fn in_pool<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    match workers {
        Some(n) => dcls::parallel::with_workers(n, f),
        None => f(),
    }
}

pub(crate) fn create_file(path: &Path) -> CliResult<std::io::BufWriter<std::fs::File>> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}
