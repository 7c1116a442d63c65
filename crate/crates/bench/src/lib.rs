//! Fixtures shared by the criterion benchmarks.

use dcls::conv::{ConvConfig, FeatureMap};
use dcls::diagnostics::gradcheck::{random_array, random_weights};
use dcls::training::{init_positions, InitDist};
use dcls::{KernelSpec, PositionTensor, WeightTensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A depthwise 2D layer and a matching input batch.
pub struct Fixture {
    pub spec: KernelSpec,
    pub cfg: ConvConfig,
    pub weights: WeightTensor,
    pub positions: PositionTensor,
    pub input: FeatureMap,
}

impl Fixture {
    pub fn depthwise(s: usize, m: usize, channels: usize, map: usize) -> Self {
        let spec = KernelSpec::depthwise(&[s, s], m, channels).expect("valid spec");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Self {
            cfg: ConvConfig::same(&spec),
            weights: random_weights(&spec, &mut rng),
            positions: init_positions(&spec, InitDist::Uniform, 0),
            input: FeatureMap(random_array(&[1, channels, map, map], &mut rng)),
            spec,
        }
    }
}
