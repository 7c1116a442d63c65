use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grid::{check_shape, PositionTensor};

/// Average position speed at one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedSample {
    pub epoch: usize,
    pub value: f64,
}

/// Mean absolute per-coordinate displacement between two snapshots.
pub fn avg_speed(prev: &PositionTensor, curr: &PositionTensor) -> Result<f64> {
    check_shape("positions", prev.0.shape(), curr.0.shape())?;
    if curr.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = prev
        .0
        .iter()
        .zip(curr.0.iter())
        .map(|(a, b)| (b - a).abs())
        .sum();
    Ok(total / curr.len() as f64)
}

/// Speed series over per-epoch snapshots, with the first epoch fixed at zero.
pub fn speed_series(snapshots: &[PositionTensor]) -> Result<Vec<SpeedSample>> {
    let mut series = Vec::with_capacity(snapshots.len());
    if snapshots.is_empty() {
        return Ok(series);
    }
    series.push(SpeedSample {
        epoch: 0,
        value: 0.0,
    });
    for (epoch, pair) in snapshots.windows(2).enumerate() {
        series.push(SpeedSample {
            epoch: epoch + 1,
            value: avg_speed(&pair[0], &pair[1])?,
        });
    }
    Ok(series)
}
