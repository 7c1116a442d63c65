use std::io::Write;
use std::path::PathBuf;

use clap::Args;
use serde::Deserialize;

use dcls::diagnostics::bench::write_csv;
use dcls::diagnostics::{bench_construct_vs_conv, BenchSweep, Precision};

use crate::{create_file, CliError, CliResult};

/// Fewer repetitions than this still run, with a warning.
pub const MIN_REPS: usize = 5;

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Output CSV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Timed samples per stage and sweep point.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Dilated kernel sizes (square windows).
    #[arg(long, num_args = 1..)]
    pub s: Option<Vec<usize>>,
    /// Kernel element counts.
    #[arg(long, num_args = 1..)]
    pub m: Option<Vec<usize>>,
    /// Input map sizes (square maps).
    #[arg(long, num_args = 1..)]
    pub map: Option<Vec<usize>>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// f32 or f64.
    #[arg(long, value_parser = parse_precision)]
    pub precision: Option<Precision>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchFile {
    pub out: Option<PathBuf>,
    pub reps: Option<usize>,
    pub s: Option<Vec<usize>>,
    pub m: Option<Vec<usize>>,
    pub map: Option<Vec<usize>>,
    pub channels: Option<usize>,
    pub batch: Option<usize>,
    pub precision: Option<Precision>,
    pub seed: Option<u64>,
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(format!("expected f32 or f64, got {other}")),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchOptions {
    pub out: PathBuf,
    pub sweep: BenchSweep,
}

impl BenchArgs {
    /// Benchmarks run on one worker unless `workers` says otherwise.
    pub fn resolve(&self, file: &BenchFile, workers: Option<usize>) -> CliResult<BenchOptions> {
        let d = BenchSweep::default();
        let sweep = BenchSweep {
            dilated_sizes: self
                .s
                .clone()
                .or_else(|| file.s.clone())
                .unwrap_or(d.dilated_sizes),
            kernel_counts: self
                .m
                .clone()
                .or_else(|| file.m.clone())
                .unwrap_or(d.kernel_counts),
            map_sizes: self
                .map
                .clone()
                .or_else(|| file.map.clone())
                .unwrap_or(d.map_sizes),
            channels: self.channels.or(file.channels).unwrap_or(d.channels),
            batch: self.batch.or(file.batch).unwrap_or(d.batch),
            repetitions: self.reps.or(file.reps).unwrap_or(d.repetitions),
            workers: workers.unwrap_or(d.workers),
            precision: self.precision.or(file.precision).unwrap_or(d.precision),
            seed: self.seed.or(file.seed).unwrap_or(d.seed),
        };
        let lists = [&sweep.dilated_sizes, &sweep.kernel_counts, &sweep.map_sizes];
        if lists.iter().any(|l| l.is_empty() || l.contains(&0))
            || sweep.channels == 0
            || sweep.batch == 0
        {
            return Err(CliError::Usage(
                "sweep sizes, channels and batch must be positive".into(),
            ));
        }
        if sweep.repetitions == 0 {
            return Err(CliError::Usage("--reps must be at least 1".into()));
        }
        Ok(BenchOptions {
            out: self
                .out
                .clone()
                .or_else(|| file.out.clone())
                .unwrap_or_else(|| "bench.csv".into()),
            sweep,
        })
    }
}

pub fn run_bench(opts: &BenchOptions) -> CliResult<bool> {
    if opts.sweep.repetitions < MIN_REPS {
        eprintln!(
            "warning: {} repetitions is below the recommended {MIN_REPS}; medians will be noisy",
            opts.sweep.repetitions
        );
    }
    // Fail on an unwritable path before spending time on the sweep.
    let mut out = create_file(&opts.out)?;
    let rows = bench_construct_vs_conv(&opts.sweep)?;
    write_csv(&rows, &mut out)
        .and_then(|_| out.flush())
        .map_err(|e| CliError::io(&opts.out, e))?;
    println!(
        "workers {}, precision {:?}",
        opts.sweep.workers, opts.sweep.precision
    );
    write_csv(&rows, std::io::stdout().lock()).map_err(|e| CliError::io("stdout".as_ref(), e))?;
    Ok(true)
}
