use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};

use dcls::diagnostics::HistogramSeries;
use dcls::model_file::{ModelFile, StoredLayer};
use dcls::training::{InitDist, TrainConfig, TrainReport};
use dcls::{ConvConfig, DclsLayer, PositionTensor, WeightTensor};

use crate::{create_file, CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    /// No comparison run.
    None,
    /// Fixed-grid dilated convolution with the same parameter budget.
    Dilated,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory for the report, CSVs and model file.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub map_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Weight decay of the weights group.
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub position_lr_multiplier: Option<f64>,
    /// Position initialisation: normal or uniform.
    #[arg(long)]
    pub init: Option<InitDist>,
    /// Student layers; with `--sync` they share one position tensor.
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub sync: bool,
    #[arg(long)]
    pub repulsive_coef: Option<f64>,
    #[arg(long)]
    pub repulsive_radius: Option<f64>,
    #[arg(long)]
    pub input_smoothing: Option<f64>,
    #[arg(long)]
    pub epoch_steps: Option<usize>,
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
}

impl TrainArgs {
    pub fn resolve(&self, file: Option<&toml::Table>) -> CliResult<(TrainConfig, PathBuf)> {
        let mut file_out_dir = None;
        let mut cfg = match file {
            Some(table) => {
                let mut table = table.clone();
                if let Some(v) = table.remove("out_dir") {
                    file_out_dir = Some(PathBuf::from(v.as_str().ok_or_else(|| {
                        CliError::Usage("[train] out_dir must be a string".into())
                    })?));
                }
                toml::Value::Table(table)
                    .try_into::<TrainConfig>()
                    .map_err(|e| CliError::Usage(format!("[train]: {e}")))?
            }
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { cfg.$field = v; })*
            };
        }
        set!(
            seed => seed, steps => steps, batch => batch, map_size => map_size, lr => base_lr,
            warmup_steps => warmup_steps, momentum => momentum, weight_decay => weight_decay,
            position_lr_multiplier => position_lr_multiplier, init => init, layers => layers,
            repulsive_coef => repulsive_coef, repulsive_radius => repulsive_radius,
            input_smoothing => input_smoothing, epoch_steps => epoch_steps,
        );
        if self.sync {
            cfg.sync = true;
        }
        if let Some(b) = self.baseline {
            cfg.baseline = b == Baseline::Dilated;
        }
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        let out_dir = self
            .out_dir
            .clone()
            .or(file_out_dir)
            .ok_or_else(|| CliError::Usage("--out-dir is required".into()))?;
        Ok((cfg, out_dir))
    }
}

/// Train, write every artifact into `out_dir`, and report whether recovery succeeded.
pub fn run_train(cfg: &TrainConfig, out_dir: &Path) -> CliResult<bool> {
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let report = dcls::training::train_toy(cfg)?;
    write_artifacts(&report, out_dir)?;

    match report.diverged_at {
        Some(step) => eprintln!("diverged at step {step}; partial report written"),
        None => {
            for t in &report.matched {
                println!(
                    "layer {} tap {:?}: learned {:?} (error {:.3}), weight {} -> {:.4}",
                    t.layer,
                    t.true_position,
                    t.learned_position
                        .iter()
                        .map(|v| (v * 1000.0).round() / 1000.0)
                        .collect::<Vec<_>>(),
                    t.position_error,
                    t.true_weight,
                    t.learned_weight
                );
            }
        }
    }
    if let Some(loss) = report.final_loss {
        println!("final loss {loss:.4e}");
    }
    if let Some(b) = &report.baseline {
        println!(
            "dilated baseline ({}x{} taps, dilation {}) final loss {:.4e}",
            b.kernel_size, b.kernel_size, b.dilation, b.final_loss
        );
    }
    println!(
        "max position error {:.4}, max weight error {:.2}%: {}",
        report.max_position_error,
        100.0 * report.max_weight_rel_error,
        if report.success() {
            "recovered"
        } else {
            "NOT recovered"
        }
    );
    Ok(report.success())
}

fn write_artifacts(report: &TrainReport, dir: &Path) -> CliResult<()> {
    let write = |name: &str, f: &dyn Fn(&mut dyn Write) -> std::io::Result<()>| -> CliResult<()> {
        let path = dir.join(name);
        let mut out = create_file(&path)?;
        f(&mut out)
            .and_then(|_| out.flush())
            .map_err(|e| CliError::io(&path, e))
    };
    write("report.json", &|out| {
        serde_json::to_writer_pretty(&mut *out, report)?;
        writeln!(out)
    })?;
    write("loss.csv", &|out| report.write_loss_csv(out))?;
    write("speed.csv", &|out| report.write_speed_csv(out))?;
    let hist_dir = dir.join("histograms");
    std::fs::create_dir_all(&hist_dir).map_err(|e| CliError::io(&hist_dir, e))?;
    for entry in &report.histograms.entries {
        let series = HistogramSeries {
            entries: vec![entry.clone()],
        };
        write(
            &format!("histograms/epoch_{:04}.csv", entry.epoch),
            &|out| series.write_csv(out),
        )?;
    }
    let model = model_from_report(report)?;
    let path = dir.join("model.dcls");
    model.save(&path).map_err(|e| match e {
        dcls::DclsError::Io(io) => CliError::io(&path, io),
        other => other.into(),
    })
}

/// Final student layers, rebuilt from the last epoch snapshot.
pub fn model_from_report(report: &TrainReport) -> CliResult<ModelFile> {
    let cfg = &report.config;
    let spec = cfg.student_spec()?;
    let last = report
        .epochs
        .last()
        .expect("the initial snapshot is always present");
    let (np, nw) = (
        spec.position_shape().iter().product::<usize>(),
        spec.weight_shape().iter().product::<usize>(),
    );
    if last.positions.len() != cfg.layers * np || last.weights.len() != cfg.layers * nw {
        return Err(CliError::Usage(format!(
            "report snapshot holds {} positions and {} weights, config implies {} and {}",
            last.positions.len(),
            last.weights.len(),
            cfg.layers * np,
            cfg.layers * nw
        )));
    }
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let positions = ndarray::Array4::from_shape_vec(
            spec.position_shape(),
            last.positions[l * np..(l + 1) * np].to_vec(),
        )
        .map_err(|e| CliError::Usage(format!("report positions: {e}")))?;
        let weights = ndarray::Array3::from_shape_vec(
            spec.weight_shape(),
            last.weights[l * nw..(l + 1) * nw].to_vec(),
        )
        .map_err(|e| CliError::Usage(format!("report weights: {e}")))?;
        let layer = DclsLayer::new(
            spec.clone(),
            ConvConfig::same(&spec),
            WeightTensor(weights),
            PositionTensor(positions),
        )?;
        layers.push(StoredLayer::from_layer(format!("layer{l}"), &layer));
    }
    Ok(ModelFile {
        layers,
        metadata: serde_json::json!({
            "seed": cfg.seed,
            "steps_run": report.steps_run,
            "epoch": last.epoch,
            "workers": report.workers,
            "recovered": report.recovered,
        }),
    })
}
