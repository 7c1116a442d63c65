//! Teacher/student position recovery.
//!
//! A teacher depthwise convolution with a few known taps maps random smooth
//! inputs to targets. A DCLS student with the same kernel count and window is
//! trained on the mean squared error with the position-learning techniques
//! (clamping after every step, separate parameter groups, optional position
//! sharing and repulsion). Optionally a fixed-grid dilated convolution with
//! the same parameter budget is trained on the same data for comparison.

use ndarray::{Array3, ArrayD, Dimension, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::assign::min_cost_assignment;
use crate::construct::{construct_forward, DenseKernel};
use crate::conv::{conv_direct, conv_weight_grad, ConvConfig, FeatureMap};
use crate::diagnostics::histogram::{position_histogram, HistogramSeries};
use crate::diagnostics::speed::{speed_series, SpeedSample};
use crate::error::{DclsError, Result};
use crate::grid::{KernelSpec, PositionTensor, WeightTensor};
use crate::layer::DclsLayer;
use crate::parallel::current_workers;
use crate::training::init::{clamp_positions, init_positions, InitDist};
use crate::training::optim::{
    make_param_groups, CosineSchedule, GroupOverrides, MomentumSgd, ParamGroup, ParamKind,
    StepDelta,
};
use crate::training::repulsive::repulsive_loss;
use crate::training::sync::SyncGroup;

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// A step whose loss exceeds this (or is not finite) ends the run as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e12;

/// One teacher tap, centered coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherTap {
    pub position: Vec<f64>,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub map_size: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub momentum: f64,
    /// Decoupled weight decay of the weights group; positions never decay.
    pub weight_decay: f64,
    pub position_lr_multiplier: f64,
    pub seed: u64,
    pub init: InitDist,
    /// Standard deviation of the initial student weights.
    pub weight_init_std: f64,
    pub repulsive_coef: f64,
    pub repulsive_radius: f64,
    pub dilated_size: Vec<usize>,
    pub teacher: Vec<TeacherTap>,
    /// Gaussian smoothing of the white-noise inputs, in cells. 0 disables it.
    pub input_smoothing: f64,
    /// Number of student layers, each with its own teacher weights over shared tap positions.
    pub layers: usize,
    /// Share one position tensor across all student layers.
    pub sync: bool,
    pub epoch_steps: usize,
    pub hist_bins: usize,
    /// Also train the fixed-grid dilated baseline.
    pub baseline: bool,
    /// Start the student exactly at the teacher's taps and weights.
    pub init_at_teacher: bool,
    pub max_position_error: f64,
    pub max_weight_rel_error: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch: 4,
            map_size: 24,
            base_lr: 0.02,
            warmup_steps: 100,
            momentum: 0.9,
            weight_decay: 0.0,
            position_lr_multiplier: 5.0,
            seed: 0,
            init: InitDist::Normal,
            weight_init_std: 0.1,
            repulsive_coef: 0.0,
            repulsive_radius: 1.0,
            dilated_size: vec![9, 9],
            teacher: vec![
                TeacherTap {
                    position: vec![-3.0, 2.0],
                    weight: 1.0,
                },
                TeacherTap {
                    position: vec![0.0, 0.0],
                    weight: -0.5,
                },
                TeacherTap {
                    position: vec![4.0, -4.0],
                    weight: 0.7,
                },
            ],
            input_smoothing: 3.0,
            layers: 1,
            sync: false,
            epoch_steps: 100,
            hist_bins: 9,
            baseline: false,
            init_at_teacher: false,
            max_position_error: 0.5,
            max_weight_rel_error: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn kernel_count(&self) -> usize {
        self.teacher.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DclsError::Precondition(msg));
        if self.steps == 0
            || self.batch == 0
            || self.map_size == 0
            || self.layers == 0
            || self.epoch_steps == 0
        {
            return bad("steps, batch, map_size, layers and epoch_steps must be positive".into());
        }
        if self.base_lr.is_nan() || self.base_lr <= 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "need base_lr > 0 and momentum in [0, 1), got {} and {}",
                self.base_lr, self.momentum
            ));
        }
        if self.weight_decay < 0.0
            || self.repulsive_coef < 0.0
            || self.repulsive_radius.is_nan()
            || self.repulsive_radius <= 0.0
        {
            return bad(
                "weight_decay and repulsive_coef must be >= 0, repulsive_radius > 0".into(),
            );
        }
        if self.input_smoothing < 0.0 || self.weight_init_std < 0.0 {
            return bad("input_smoothing and weight_init_std must be >= 0".into());
        }
        if self.teacher.is_empty() {
            return bad("teacher needs at least one tap".into());
        }
        let spec = self.student_spec()?;
        for (i, tap) in self.teacher.iter().enumerate() {
            if tap.position.len() != spec.ndims {
                return bad(format!(
                    "teacher tap {i} has {} coordinates for a {}D window",
                    tap.position.len(),
                    spec.ndims
                ));
            }
            for (d, &p) in tap.position.iter().enumerate() {
                let (lo, hi) = spec.bounds(d);
                if !(lo..=hi).contains(&p) {
                    return bad(format!(
                        "teacher tap {i} coordinate {p} outside [{lo}, {hi}]"
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn student_spec(&self) -> Result<KernelSpec> {
        KernelSpec::depthwise(&self.dilated_size, self.kernel_count(), 1)
    }
}

/// Learned tap matched to a teacher tap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedTap {
    pub layer: usize,
    pub true_position: Vec<f64>,
    pub learned_position: Vec<f64>,
    pub position_error: f64,
    pub true_weight: f64,
    pub learned_weight: f64,
    pub weight_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSnapshot {
    pub epoch: usize,
    pub step: usize,
    /// Mean training loss over the epoch; absent for the initial snapshot.
    pub mean_loss: Option<f64>,
    /// Positions of every student layer, flattened in layer order.
    pub positions: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub kernel_size: usize,
    pub dilation: usize,
    pub loss_curve: Vec<f64>,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub format_version: u32,
    pub config: TrainConfig,
    pub workers: usize,
    pub steps_run: usize,
    pub diverged_at: Option<usize>,
    pub loss_curve: Vec<f64>,
    pub lr_curve: Vec<f64>,
    pub epochs: Vec<EpochSnapshot>,
    pub speed: Vec<SpeedSample>,
    pub histograms: HistogramSeries,
    pub clamp_events: usize,
    /// Mean loss over the last epoch; absent when no step completed.
    pub final_loss: Option<f64>,
    pub matched: Vec<MatchedTap>,
    pub max_position_error: f64,
    pub max_weight_rel_error: f64,
    pub recovered: bool,
    pub baseline: Option<BaselineReport>,
    /// `Some(true)` when the DCLS student ends strictly below the baseline.
    pub beats_baseline: Option<bool>,
}

impl TrainReport {
    /// Recovery criteria met, no divergence, and the baseline (if trained) beaten.
    pub fn success(&self) -> bool {
        self.diverged_at.is_none() && self.recovered && self.beats_baseline.unwrap_or(true)
    }

    /// Rows `step,loss,lr`.
    pub fn write_loss_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "step,loss,lr")?;
        for (step, (loss, lr)) in self.loss_curve.iter().zip(&self.lr_curve).enumerate() {
            writeln!(out, "{step},{loss},{lr}")?;
        }
        Ok(())
    }

    /// Rows `epoch,speed`.
    pub fn write_speed_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "epoch,speed")?;
        for s in &self.speed {
            writeln!(out, "{},{}", s.epoch, s.value)?;
        }
        Ok(())
    }
}

/// State visible to a per-step observer, after the optimizer update and clamping.
pub struct StepView<'a> {
    pub step: usize,
    pub loss: f64,
    pub layers: &'a [DclsLayer],
    pub spec: &'a KernelSpec,
    pub groups: &'a [ParamGroup],
    /// Update of each layer's weights and of the position tensor(s), in that order.
    pub deltas: &'a [(String, StepDelta)],
}

/// Random smooth inputs, with per-pixel unit variance before boundary effects.
struct InputStream {
    rng: ChaCha8Rng,
    blur: Option<(DenseKernel, ConvConfig)>,
    shape: Vec<usize>,
}

impl InputStream {
    fn new(cfg: &TrainConfig, ndims: usize, seed: u64) -> Self {
        let blur = (cfg.input_smoothing > 0.0).then(|| {
            let sigma = cfg.input_smoothing;
            let radius = (3.0 * sigma).ceil() as usize;
            let width = 2 * radius + 1;
            let mut shape = vec![1, 1];
            shape.extend(std::iter::repeat_n(width, ndims));
            let mut k = ArrayD::from_shape_fn(IxDyn(&shape), |idx| {
                let r2: f64 = (2..idx.ndim())
                    .map(|d| (idx[d] as f64 - radius as f64).powi(2))
                    .sum();
                (-r2 / (2.0 * sigma * sigma)).exp()
            });
            let norm = k.mapv(|v| v * v).sum().sqrt();
            k /= norm;
            let cfg = ConvConfig::new(ndims).with_padding(&vec![radius; ndims]);
            (DenseKernel(k), cfg)
        });
        let mut shape = vec![cfg.batch, 1];
        shape.extend(std::iter::repeat_n(cfg.map_size, ndims));
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            blur,
            shape,
        }
    }

    fn next(&mut self) -> Result<FeatureMap> {
        let noise = ArrayD::from_shape_simple_fn(IxDyn(&self.shape), || {
            StandardNormal.sample(&mut self.rng)
        });
        let x = FeatureMap(noise);
        match &self.blur {
            Some((k, cfg)) => conv_direct(&x, k, cfg),
            None => Ok(x),
        }
    }
}

fn teacher_kernels(cfg: &TrainConfig, spec: &KernelSpec) -> Result<Vec<DenseKernel>> {
    let m = spec.kernel_count;
    let mut positions = PositionTensor::zeros(spec);
    for (k, tap) in cfg.teacher.iter().enumerate() {
        for (d, &p) in tap.position.iter().enumerate() {
            positions.0[[d, 0, 0, k]] = p;
        }
    }
    (0..cfg.layers)
        .map(|l| {
            let weights = WeightTensor(Array3::from_shape_fn((1, 1, m), |(_, _, k)| {
                teacher_weight(cfg, l, k)
            }));
            construct_forward(&weights, &positions, spec)
        })
        .collect()
}

/// Teacher weights of layer `l`: the configured weights, rotated by `l` so layers differ.
fn teacher_weight(cfg: &TrainConfig, layer: usize, k: usize) -> f64 {
    cfg.teacher[(k + layer) % cfg.teacher.len()].weight
}

fn mse_and_grad(y: &FeatureMap, target: &FeatureMap) -> (f64, FeatureMap) {
    let n = y.0.len() as f64;
    let residual = &y.0 - &target.0;
    let loss = residual.mapv(|r| r * r).sum() / n;
    (loss, FeatureMap(residual * (2.0 / n)))
}

fn flat(
    a: &ndarray::ArrayBase<impl ndarray::Data<Elem = f64>, impl ndarray::Dimension>,
) -> Vec<f64> {
    a.iter().copied().collect()
}

fn mean_tail(curve: &[f64], n: usize) -> f64 {
    let tail = &curve[curve.len().saturating_sub(n)..];
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}

/// Run the teacher/student experiment.
pub fn train_toy(cfg: &TrainConfig) -> Result<TrainReport> {
    train_toy_observed(cfg, |_| {})
}

/// [`train_toy`] with a callback invoked after every optimizer step.
pub fn train_toy_observed<F>(cfg: &TrainConfig, mut observer: F) -> Result<TrainReport>
where
    F: FnMut(&StepView<'_>),
{
    cfg.validate()?;
    let spec = cfg.student_spec()?;
    let ndims = spec.ndims;
    let m = spec.kernel_count;
    let conv_cfg = ConvConfig::same(&spec);
    let teachers = teacher_kernels(cfg, &spec)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let weight_init =
        Normal::new(0.0, cfg.weight_init_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut layers = Vec::with_capacity(cfg.layers);
    let shared_init = init_positions(&spec, cfg.init, cfg.seed.wrapping_add(1));
    for l in 0..cfg.layers {
        let (weights, positions) = if cfg.init_at_teacher {
            let w = WeightTensor(Array3::from_shape_fn((1, 1, m), |(_, _, k)| {
                teacher_weight(cfg, l, k)
            }));
            let mut p = PositionTensor::zeros(&spec);
            for (k, tap) in cfg.teacher.iter().enumerate() {
                for d in 0..ndims {
                    p.0[[d, 0, 0, k]] = tap.position[d];
                }
            }
            (w, p)
        } else {
            let w = WeightTensor(Array3::from_shape_simple_fn((1, 1, m), || {
                weight_init.sample(&mut rng)
            }));
            let p = if cfg.sync {
                shared_init.clone()
            } else {
                init_positions(&spec, cfg.init, cfg.seed.wrapping_add(1 + l as u64))
            };
            (w, p)
        };
        layers.push(DclsLayer::new(
            spec.clone(),
            conv_cfg.clone(),
            weights,
            positions,
        )?);
    }
    let mut sync = if cfg.sync {
        Some(SyncGroup::new(
            spec.clone(),
            layers[0].positions().clone(),
            cfg.layers,
        )?)
    } else {
        None
    };

    let names: Vec<String> = (0..cfg.layers)
        .flat_map(|l| [format!("layer{l}.weights"), format!("layer{l}.positions")])
        .collect();
    let groups = make_param_groups(
        names.iter().map(String::as_str),
        &GroupOverrides {
            weight_decay: Some(cfg.weight_decay),
            positions_lr_multiplier: Some(cfg.position_lr_multiplier),
            ..Default::default()
        },
    )?;
    let group_of = |kind: ParamKind| {
        groups
            .iter()
            .find(|g| g.kind == kind)
            .expect("both groups exist")
    };
    let schedule = CosineSchedule {
        base_lr: cfg.base_lr,
        warmup_steps: cfg.warmup_steps,
        total_steps: cfg.steps,
    };
    let mut optimizer = MomentumSgd::new(cfg.momentum);
    let mut inputs = InputStream::new(cfg, ndims, cfg.seed.wrapping_add(0x5eed));

    let snapshot =
        |layers: &[DclsLayer], epoch: usize, step: usize, mean_loss: Option<f64>| EpochSnapshot {
            epoch,
            step,
            mean_loss,
            positions: layers.iter().flat_map(|l| flat(&l.positions().0)).collect(),
            weights: layers.iter().flat_map(|l| flat(&l.weights().0)).collect(),
        };
    let histogram = |layers: &[DclsLayer], epoch: usize| -> Result<_> {
        let mut entry = position_histogram(layers[0].positions(), &spec, cfg.hist_bins, epoch)?;
        for layer in &layers[1..] {
            let other = position_histogram(layer.positions(), &spec, cfg.hist_bins, epoch)?;
            for (a, b) in entry.counts.iter_mut().zip(other.counts) {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            }
        }
        Ok(entry)
    };

    let mut loss_curve = Vec::with_capacity(cfg.steps);
    let mut lr_curve = Vec::with_capacity(cfg.steps);
    let mut epochs = vec![snapshot(&layers, 0, 0, None)];
    let mut histograms = HistogramSeries::default();
    histograms.push(histogram(&layers, 0)?);
    let mut clamp_events = 0;
    let mut diverged_at = None;

    for step in 0..cfg.steps {
        let lr = schedule.lr(step);
        let x = inputs.next()?;
        let mut step_loss = 0.0;
        let mut grads = Vec::with_capacity(cfg.layers);
        for (layer, teacher) in layers.iter().zip(&teachers) {
            let target = conv_direct(&x, teacher, &conv_cfg)?;
            let (y, ctx) = layer.forward_with_context(&x)?;
            let (loss, upstream) = mse_and_grad(&y, &target);
            let mut g = layer.param_grads(&ctx, &upstream)?;
            step_loss += loss;
            if cfg.repulsive_coef > 0.0 {
                let (rl, rg) = repulsive_loss(layer.positions(), cfg.repulsive_radius)?;
                step_loss += cfg.repulsive_coef * rl;
                g.d_positions.0.scaled_add(cfg.repulsive_coef, &rg.0);
            }
            grads.push(g);
        }
        if !step_loss.is_finite()
            || step_loss > DIVERGENCE_LOSS
            || grads.iter().any(|g| {
                g.d_positions
                    .0
                    .iter()
                    .chain(g.d_weights.0.iter())
                    .any(|v| !v.is_finite())
            })
        {
            diverged_at = Some(step);
            break;
        }

        let backup = layers.clone();
        let mut deltas = Vec::with_capacity(2 * cfg.layers);
        for (l, (layer, g)) in layers.iter_mut().zip(&grads).enumerate() {
            let name = format!("layer{l}.weights");
            let (w, _) = layer.params_mut();
            let delta = optimizer.step(
                &name,
                group_of(ParamKind::Weights),
                lr,
                w.0.as_slice_mut().expect("standard layout"),
                g.d_weights.0.as_slice().expect("standard layout"),
            );
            deltas.push((name, delta));
        }
        match sync.as_mut() {
            Some(group) => {
                for (l, g) in grads.iter().enumerate() {
                    group.submit(l, &g.d_positions)?;
                }
                let shared = group.sync_step()?.clone();
                let name = "shared.positions".to_string();
                let positions = group.positions_mut();
                let delta = optimizer.step(
                    &name,
                    group_of(ParamKind::Positions),
                    lr,
                    positions.0.as_slice_mut().expect("standard layout"),
                    shared.0.as_slice().expect("standard layout"),
                );
                clamp_events += clamp_positions(positions, &spec);
                deltas.push((name, delta));
                let mut members: Vec<&mut DclsLayer> = layers.iter_mut().collect();
                group.broadcast(&mut members)?;
            }
            None => {
                for (l, (layer, g)) in layers.iter_mut().zip(&grads).enumerate() {
                    let name = format!("layer{l}.positions");
                    let (_, p) = layer.params_mut();
                    let delta = optimizer.step(
                        &name,
                        group_of(ParamKind::Positions),
                        lr,
                        p.0.as_slice_mut().expect("standard layout"),
                        g.d_positions.0.as_slice().expect("standard layout"),
                    );
                    clamp_events += clamp_positions(p, &spec);
                    deltas.push((name, delta));
                }
            }
        }

        if layers.iter().any(|l| {
            l.weights()
                .0
                .iter()
                .chain(l.positions().0.iter())
                .any(|v| !v.is_finite())
        }) {
            // The update overflowed: keep the last finite parameters.
            if let Some(group) = sync.as_mut() {
                *group.positions_mut() = backup[0].positions().clone();
            }
            layers = backup;
            diverged_at = Some(step);
            break;
        }

        loss_curve.push(step_loss);
        lr_curve.push(lr);
        observer(&StepView {
            step,
            loss: step_loss,
            layers: &layers,
            spec: &spec,
            groups: &groups,
            deltas: &deltas,
        });

        if (step + 1) % cfg.epoch_steps == 0 {
            let epoch = epochs.len();
            epochs.push(snapshot(
                &layers,
                epoch,
                step + 1,
                Some(mean_tail(&loss_curve, cfg.epoch_steps)),
            ));
            histograms.push(histogram(&layers, epoch)?);
        }
    }
    // A partial last epoch (or a diverged run) still gets a snapshot of the final state.
    let updates = loss_curve.len();
    if epochs.last().is_some_and(|e| e.step != updates) {
        let epoch = epochs.len();
        let tail = updates - epochs.last().map_or(0, |e| e.step);
        epochs.push(snapshot(
            &layers,
            epoch,
            updates,
            Some(mean_tail(&loss_curve, tail)),
        ));
        histograms.push(histogram(&layers, epoch)?);
    }

    let position_snapshots: Vec<PositionTensor> = epochs
        .iter()
        .map(|e| {
            let shape = [cfg.layers * ndims, 1, 1, m];
            PositionTensor(
                ndarray::Array4::from_shape_vec(shape, e.positions.clone())
                    .expect("snapshot shape"),
            )
        })
        .collect();
    let speed = speed_series(&position_snapshots)?;

    let matched = match_taps(cfg, &layers);
    let max_position_error = matched.iter().map(|t| t.position_error).fold(0.0, f64::max);
    let max_weight_rel_error = matched
        .iter()
        .map(|t| t.weight_rel_error)
        .fold(0.0, f64::max);
    let recovered = diverged_at.is_none()
        && max_position_error <= cfg.max_position_error
        && max_weight_rel_error <= cfg.max_weight_rel_error;
    let final_loss = (!loss_curve.is_empty()).then(|| mean_tail(&loss_curve, cfg.epoch_steps));

    let baseline = if cfg.baseline && diverged_at.is_none() {
        Some(train_dilated_baseline(cfg, &spec, &teachers)?)
    } else {
        None
    };
    let beats_baseline = baseline
        .as_ref()
        .map(|b| final_loss.is_some_and(|f| f < b.final_loss));

    Ok(TrainReport {
        format_version: REPORT_FORMAT_VERSION,
        config: cfg.clone(),
        workers: current_workers(),
        steps_run: loss_curve.len(),
        diverged_at,
        loss_curve,
        lr_curve,
        epochs,
        speed,
        histograms,
        clamp_events,
        final_loss,
        matched,
        max_position_error,
        max_weight_rel_error,
        recovered,
        baseline,
        beats_baseline,
    })
}

fn match_taps(cfg: &TrainConfig, layers: &[DclsLayer]) -> Vec<MatchedTap> {
    let mut out = Vec::new();
    for (l, layer) in layers.iter().enumerate() {
        let p = layer.positions();
        let ndims = layer.spec.ndims;
        let m = layer.spec.kernel_count;
        let learned: Vec<Vec<f64>> = (0..m)
            .map(|k| (0..ndims).map(|d| p.0[[d, 0, 0, k]]).collect())
            .collect();
        let cost: Vec<Vec<f64>> = cfg
            .teacher
            .iter()
            .map(|t| learned.iter().map(|q| euclidean(&t.position, q)).collect())
            .collect();
        for (k, &j) in min_cost_assignment(&cost).iter().enumerate() {
            let true_weight = teacher_weight(cfg, l, k);
            let learned_weight = layer.weights().0[[0, 0, j]];
            out.push(MatchedTap {
                layer: l,
                true_position: cfg.teacher[k].position.clone(),
                learned_position: learned[j].clone(),
                position_error: cost[k][j],
                true_weight,
                learned_weight,
                weight_rel_error: (learned_weight - true_weight).abs()
                    / true_weight.abs().max(f64::MIN_POSITIVE),
            });
        }
    }
    out
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Fixed-grid dilated convolution with `kernel^ndims` weights, at most `(ndims + 1) * m`,
/// spread evenly over the same window. Trained on layer 0's teacher with the same data stream.
fn train_dilated_baseline(
    cfg: &TrainConfig,
    spec: &KernelSpec,
    teachers: &[DenseKernel],
) -> Result<BaselineReport> {
    let ndims = spec.ndims;
    let budget = (ndims + 1) * spec.kernel_count;
    let mut kernel = 1;
    while (kernel + 1usize).pow(ndims as u32) <= budget {
        kernel += 1;
    }
    let s = *spec.dilated_size.iter().min().expect("ndims >= 1");
    let dilation = if kernel > 1 {
        ((s - 1) / (kernel - 1)).max(1)
    } else {
        1
    };
    let pad = dilation * (kernel - 1) / 2;
    let conv_cfg = ConvConfig::new(ndims)
        .with_dilation(&vec![dilation; ndims])
        .with_padding(&vec![pad; ndims]);
    let target_cfg = ConvConfig::same(spec);

    let mut shape = vec![1, 1];
    shape.extend(std::iter::repeat_n(kernel, ndims));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xba5e);
    let init = Normal::new(0.0, cfg.weight_init_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut weights = DenseKernel(ArrayD::from_shape_simple_fn(IxDyn(&shape), || {
        init.sample(&mut rng)
    }));

    let groups = make_param_groups(
        ["baseline.weights"],
        &GroupOverrides {
            weight_decay: Some(cfg.weight_decay),
            ..Default::default()
        },
    )?;
    let schedule = CosineSchedule {
        base_lr: cfg.base_lr,
        warmup_steps: cfg.warmup_steps,
        total_steps: cfg.steps,
    };
    let mut optimizer = MomentumSgd::new(cfg.momentum);
    let mut inputs = InputStream::new(cfg, ndims, cfg.seed.wrapping_add(0x5eed));
    let mut loss_curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let x = inputs.next()?;
        let target = conv_direct(&x, &teachers[0], &target_cfg)?;
        let y = conv_direct(&x, &weights, &conv_cfg)?;
        let (loss, upstream) = mse_and_grad(&y, &target);
        if !loss.is_finite() {
            return Err(DclsError::NonFinite(format!(
                "baseline loss at step {step}"
            )));
        }
        let g = conv_weight_grad(&x, &upstream, &shape, &conv_cfg)?;
        optimizer.step(
            "baseline.weights",
            &groups[0],
            schedule.lr(step),
            weights.0.as_slice_mut().expect("standard layout"),
            g.0.as_slice().expect("standard layout"),
        );
        loss_curve.push(loss);
    }
    Ok(BaselineReport {
        kernel_size: kernel,
        dilation,
        final_loss: mean_tail(&loss_curve, cfg.epoch_steps),
        loss_curve,
    })
}
