//! Construction-vs-convolution timing harness.
//!
//! Every sweep point times the two stages of a depthwise DCLS forward pass
//! separately: building the dense kernel, and convolving a `map x map` input
//! with it. Each sample runs the stage enough times to last at least
//! [`MIN_SAMPLE`], one warmup sample is discarded, and the median over
//! samples is reported.

use std::io::Write;
use std::time::{Duration, Instant};

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::construct::construct_forward_raw;
use crate::conv::{conv_forward_raw, ConvConfig, ConvGeometry};
use crate::error::Result;
use crate::grid::KernelSpec;
use crate::parallel::with_workers;
use crate::training::{init_positions, InitDist};

pub const MIN_SAMPLE: Duration = Duration::from_millis(2);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSweep {
    pub dilated_sizes: Vec<usize>,
    pub kernel_counts: Vec<usize>,
    pub map_sizes: Vec<usize>,
    pub channels: usize,
    pub batch: usize,
    pub repetitions: usize,
    pub workers: usize,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for BenchSweep {
    fn default() -> Self {
        Self {
            dilated_sizes: vec![7, 17],
            kernel_counts: vec![17, 34],
            map_sizes: vec![28, 56],
            channels: 16,
            batch: 1,
            repetitions: 7,
            workers: 1,
            precision: Precision::F64,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub s: usize,
    pub m: usize,
    pub map: usize,
    pub construct_ms: f64,
    pub conv_ms: f64,
}

pub const CSV_HEADER: &str = "s,m,map,construct_ms,conv_ms";

pub fn write_csv<W: Write>(rows: &[BenchRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:.6},{:.6}",
            r.s, r.m, r.map, r.construct_ms, r.conv_ms
        )?;
    }
    Ok(())
}

/// Median per-call wall time of `f` in milliseconds.
pub fn median_ms<F: FnMut()>(mut f: F, repetitions: usize) -> f64 {
    let start = Instant::now();
    f();
    let single = start.elapsed().max(Duration::from_nanos(100));
    let inner = (MIN_SAMPLE.as_secs_f64() / single.as_secs_f64())
        .ceil()
        .max(1.0) as usize;

    let mut samples = Vec::with_capacity(repetitions);
    for rep in 0..=repetitions.max(1) {
        let start = Instant::now();
        for _ in 0..inner {
            f();
        }
        let per_call = start.elapsed().as_secs_f64() * 1e3 / inner as f64;
        if rep > 0 {
            samples.push(per_call);
        }
    }
    samples.sort_by(|a, b| a.total_cmp(b));
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

/// Least-squares line through `(xs, ys)`; returns `(slope, intercept, r_squared)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    (slope, intercept, r2)
}

fn stage_inputs(
    spec: &KernelSpec,
    map: usize,
    batch: usize,
    seed: u64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = (0..spec.num_slices() * spec.kernel_count)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let positions = init_positions(spec, InitDist::Uniform, seed)
        .0
        .into_raw_vec_and_offset()
        .0;
    let input = (0..batch * spec.channels_out * map * map)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    (weights, positions, input)
}

fn time_point<T: Float + Send + Sync>(
    spec: &KernelSpec,
    map: usize,
    batch: usize,
    reps: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let (w, p, x) = stage_inputs(spec, map, batch, seed);
    let cast = |v: Vec<f64>| -> Vec<T> { v.into_iter().map(|a| T::from(a).unwrap()).collect() };
    let (w, p, x) = (cast(w), cast(p), cast(x));
    let cfg = ConvConfig::same(spec);
    let geom = ConvGeometry::new(
        &[batch, spec.channels_out, map, map],
        &spec.kernel_shape(),
        &cfg,
    )?;
    let mut kernel = vec![T::zero(); spec.num_slices() * spec.slice_len()];
    let mut out = vec![T::zero(); geom.output_shape().iter().product()];

    construct_forward_raw(&w, &p, spec, &mut kernel)?;
    let construct_ms = median_ms(
        || construct_forward_raw(&w, &p, spec, &mut kernel).expect("checked"),
        reps,
    );
    let conv_ms = median_ms(|| conv_forward_raw(&x, &kernel, &geom, &mut out), reps);
    Ok((construct_ms, conv_ms))
}

/// Time every (s, m, map) combination of the sweep on `sweep.workers` threads.
pub fn bench_construct_vs_conv(sweep: &BenchSweep) -> Result<Vec<BenchRow>> {
    with_workers(sweep.workers, || {
        let mut rows = Vec::new();
        for &s in &sweep.dilated_sizes {
            for &m in &sweep.kernel_counts {
                let spec = KernelSpec::depthwise(&[s, s], m, sweep.channels)?;
                for &map in &sweep.map_sizes {
                    let (construct_ms, conv_ms) = match sweep.precision {
                        Precision::F32 => time_point::<f32>(
                            &spec,
                            map,
                            sweep.batch,
                            sweep.repetitions,
                            sweep.seed,
                        )?,
                        Precision::F64 => time_point::<f64>(
                            &spec,
                            map,
                            sweep.batch,
                            sweep.repetitions,
                            sweep.seed,
                        )?,
                    };
                    rows.push(BenchRow {
                        s,
                        m,
                        map,
                        construct_ms,
                        conv_ms,
                    });
                }
            }
        }
        Ok(rows)
    })
}
