use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::grid::{KernelSpec, PositionTensor};

/// Standard deviation of the default centered-normal position initialisation.
pub const INIT_STD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitDist {
    /// Centered normal with standard deviation [`INIT_STD`].
    #[default]
    Normal,
    /// Uniform over the clamp box of each axis.
    Uniform,
}

impl std::str::FromStr for InitDist {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normal" => Ok(Self::Normal),
            "uniform" => Ok(Self::Uniform),
            other => Err(format!(
                "unknown init distribution `{other}` (expected normal or uniform)"
            )),
        }
    }
}

/// Draw i.i.d. positions, then clamp them into the box. Deterministic in `seed`.
pub fn init_positions(spec: &KernelSpec, dist: InitDist, seed: u64) -> PositionTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = PositionTensor::zeros(spec);
    for axis in 0..spec.ndims {
        let (lower, upper) = spec.bounds(axis);
        let mut lane = positions.0.index_axis_mut(ndarray::Axis(0), axis);
        match dist {
            InitDist::Normal => {
                let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
                lane.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            }
            InitDist::Uniform => {
                let uniform = Uniform::new_inclusive(lower, upper).expect("valid bounds");
                lane.iter_mut().for_each(|v| *v = uniform.sample(&mut rng));
            }
        }
    }
    clamp_positions(&mut positions, spec);
    positions
}

/// Project every coordinate into its axis' clamp box. Returns how many coordinates moved.
pub fn clamp_positions(positions: &mut PositionTensor, spec: &KernelSpec) -> usize {
    let mut clamped = 0;
    for axis in 0..spec.ndims {
        let (lower, upper) = spec.bounds(axis);
        let mut lane = positions.0.index_axis_mut(ndarray::Axis(0), axis);
        for v in lane.iter_mut() {
            let c = v.clamp(lower, upper);
            if c != *v {
                clamped += 1;
                *v = c;
            }
        }
    }
    clamped
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_init_statistics() {
        let spec = KernelSpec::new(&[17], 100, 10, 10, 1).unwrap();
        let p = init_positions(&spec, InitDist::Normal, 42);
        let n = p.len() as f64;
        let mean = p.0.sum() / n;
        let std = (p.0.mapv(|v| (v - mean).powi(2)).sum() / (n - 1.0)).sqrt();
        assert_eq!(p.len(), 10_000);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((0.47..=0.53).contains(&std), "std {std}");
    }

    #[test]
    fn uniform_init_in_bounds() {
        let spec = KernelSpec::new(&[7, 4], 50, 4, 2, 2).unwrap();
        let p = init_positions(&spec, InitDist::Uniform, 1);
        p.check_bounds(&spec).unwrap();
    }

    #[test]
    fn init_is_deterministic() {
        let spec = KernelSpec::depthwise(&[9, 9], 5, 3).unwrap();
        for dist in [InitDist::Normal, InitDist::Uniform] {
            assert_eq!(
                init_positions(&spec, dist, 7),
                init_positions(&spec, dist, 7)
            );
        }
        assert_ne!(
            init_positions(&spec, InitDist::Normal, 7),
            init_positions(&spec, InitDist::Normal, 8)
        );
    }

    #[test]
    fn clamp_examples() {
        let spec = KernelSpec::depthwise(&[17], 1, 1).unwrap();
        let mut p = PositionTensor::zeros(&spec);
        p.0[[0, 0, 0, 0]] = 9.7;
        assert_eq!(clamp_positions(&mut p, &spec), 1);
        assert_eq!(p.0[[0, 0, 0, 0]], 8.0);

        p.0[[0, 0, 0, 0]] = -8.0001;
        assert_eq!(clamp_positions(&mut p, &spec), 1);
        assert_eq!(p.0[[0, 0, 0, 0]], -8.0);

        p.0[[0, 0, 0, 0]] = 3.25;
        assert_eq!(clamp_positions(&mut p, &spec), 0);
        assert_eq!(p.0[[0, 0, 0, 0]], 3.25);
    }
}
