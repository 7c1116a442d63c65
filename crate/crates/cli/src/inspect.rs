use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use dcls::diagnostics::gradcheck::random_array;
use dcls::diagnostics::{erf_map, position_histogram, DEFAULT_ERF_SAMPLES};
use dcls::model_file::{ModelFile, MAGIC};
use dcls::training::TrainReport;
use dcls::{ConvConfig, DclsLayer, FeatureMap, Sequential};

use crate::train::model_from_report;
use crate::{create_file, CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum What {
    /// Per-axis position histogram.
    Hist,
    /// Average position speed per epoch (training reports only).
    Speed,
    /// Effective receptive field of the stacked layers.
    Erf,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// A model file (`.dcls`) or a training report (`report.json`).
    pub path: PathBuf,
    #[arg(long, value_enum)]
    pub what: What,
    /// Write here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Output format for `erf`.
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Histogram bins per axis.
    #[arg(long)]
    pub bins: Option<usize>,
    /// Random inputs averaged by `erf`.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Input extent per axis for `erf`; defaults to the stacked receptive field plus a margin.
    #[arg(long)]
    pub map: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InspectFile {
    pub format: Option<Format>,
    pub bins: Option<usize>,
    pub samples: Option<usize>,
    pub map: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InspectOptions {
    pub path: PathBuf,
    pub what: What,
    pub out: Option<PathBuf>,
    pub format: Format,
    pub bins: usize,
    pub samples: usize,
    pub map: Option<usize>,
    pub seed: u64,
}

impl InspectArgs {
    pub fn resolve(&self, file: &InspectFile) -> CliResult<InspectOptions> {
        let opts = InspectOptions {
            path: self.path.clone(),
            what: self.what,
            out: self.out.clone(),
            format: self.format.or(file.format).unwrap_or_default(),
            bins: self.bins.or(file.bins).unwrap_or(9),
            samples: self.samples.or(file.samples).unwrap_or(DEFAULT_ERF_SAMPLES),
            map: self.map.or(file.map),
            seed: self.seed.or(file.seed).unwrap_or(0),
        };
        if opts.bins < 2 || opts.samples == 0 || opts.map == Some(0) {
            return Err(CliError::Usage(
                "--bins must be >= 2, --samples and --map positive".into(),
            ));
        }
        Ok(opts)
    }
}

enum Source {
    Model(ModelFile),
    Report(Box<TrainReport>),
}

fn load(path: &Path) -> CliResult<Source> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    if bytes.starts_with(MAGIC) {
        return ModelFile::from_bytes(&bytes)
            .map(Source::Model)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())));
    }
    serde_json::from_slice::<TrainReport>(&bytes)
        .map(|r| Source::Report(Box::new(r)))
        .map_err(|e| {
            CliError::Usage(format!(
                "{}: neither a model file nor a training report ({e})",
                path.display()
            ))
        })
}

pub fn run_inspect(opts: &InspectOptions) -> CliResult<bool> {
    let source = load(&opts.path)?;
    let mut buf = Vec::new();
    match (opts.what, &source) {
        (What::Hist, Source::Report(r)) => {
            r.histograms.write_csv(&mut buf).expect("write to memory")
        }
        (What::Hist, Source::Model(m)) => model_histograms(m, opts.bins, &mut buf)?,
        (What::Speed, Source::Report(r)) => r.write_speed_csv(&mut buf).expect("write to memory"),
        (What::Speed, Source::Model(_)) => {
            return Err(CliError::Usage(
                "speed needs per-epoch positions; pass a training report (report.json)".into(),
            ))
        }
        (What::Erf, source) => {
            let model = match source {
                Source::Model(m) => m.clone(),
                Source::Report(r) => model_from_report(r)?,
            };
            let erf = model_erf(&model, opts)?;
            match opts.format {
                Format::Csv => erf.write_csv(&mut buf).expect("write to memory"),
                Format::Json => {
                    buf = erf.to_json().map_err(dcls::DclsError::from)?.into_bytes();
                    buf.push(b'\n');
                }
            }
        }
    }
    match &opts.out {
        Some(path) => {
            let mut f = create_file(path)?;
            f.write_all(&buf)
                .and_then(|_| f.flush())
                .map_err(|e| CliError::io(path, e))?;
        }
        None => std::io::stdout()
            .write_all(&buf)
            .map_err(|e| CliError::io("stdout".as_ref(), e))?,
    }
    Ok(true)
}

/// Rows `layer,axis,bin,lower,upper,count`.
fn model_histograms(model: &ModelFile, bins: usize, out: &mut Vec<u8>) -> CliResult<()> {
    writeln!(out, "layer,axis,bin,lower,upper,count").expect("write to memory");
    for (l, layer) in model.layers.iter().enumerate() {
        let h = position_histogram(&layer.positions, &layer.spec, bins, 0)?;
        for (axis, (counts, edges)) in h.counts.iter().zip(&h.edges).enumerate() {
            for (bin, c) in counts.iter().enumerate() {
                writeln!(
                    out,
                    "{l},{axis},{bin},{},{},{c}",
                    edges[bin],
                    edges[bin + 1]
                )
                .expect("write to memory");
            }
        }
    }
    Ok(())
}

fn model_erf(model: &ModelFile, opts: &InspectOptions) -> CliResult<dcls::diagnostics::ErfMap> {
    let first = model
        .layers
        .first()
        .ok_or_else(|| CliError::Usage("model has no layers".into()))?;
    let ndims = first.spec.ndims;
    let mut stack = Sequential::default();
    let mut channels = first.spec.channels_in();
    let mut extent = vec![1usize; ndims];
    for layer in &model.layers {
        if layer.spec.ndims != ndims || layer.spec.channels_in() != channels {
            return Err(CliError::Usage(format!(
                "layer {} does not chain: expects {}D input with {} channels, previous layer gives {ndims}D with {channels}",
                layer.name,
                layer.spec.ndims,
                layer.spec.channels_in()
            )));
        }
        channels = layer.spec.channels_out;
        for (e, s) in extent.iter_mut().zip(&layer.spec.dilated_size) {
            *e += s - 1;
        }
        stack = stack.push(DclsLayer::new(
            layer.spec.clone(),
            ConvConfig::same(&layer.spec),
            layer.weights.clone(),
            layer.positions.clone(),
        )?);
    }
    let mut shape = vec![opts.samples, first.spec.channels_in()];
    match opts.map {
        Some(m) => shape.extend(std::iter::repeat_n(m, ndims)),
        None => shape.extend(extent.iter().map(|e| e + 6)),
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let inputs = FeatureMap(random_array(&shape, &mut rng));
    Ok(erf_map(&stack, &inputs, None)?)
}
