//! Oracles and instrumentation.

pub mod bench;
pub mod erf;
pub mod gradcheck;
pub mod histogram;
pub mod speed;

pub use bench::{bench_construct_vs_conv, linear_fit, BenchRow, BenchSweep, Precision};
pub use erf::{erf_map, ErfMap, DEFAULT_ERF_SAMPLES};
pub use gradcheck::{
    construct_grad_error, construct_grad_error_with, conv_grad_errors, grad_check,
    random_off_lattice_positions, ConstructBackward, ConvGradErrors,
};
pub use histogram::{position_histogram, HistogramEntry, HistogramSeries};
pub use speed::{avg_speed, speed_series, SpeedSample};
