//! Effective receptive field maps.

use std::io::Write;

use ndarray::{ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::conv::FeatureMap;
use crate::error::{DclsError, Result};
use crate::layer::Layer;

/// Number of input samples averaged by default.
pub const DEFAULT_ERF_SAMPLES: usize = 16;

/// Input-gradient magnitude map normalised into `[0, 1]`, over the input's spatial extent.
#[derive(Clone, Debug, PartialEq)]
pub struct ErfMap(pub ArrayD<f64>);

#[derive(Serialize, Deserialize)]
struct ErfJson {
    format_version: u32,
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl ErfMap {
    /// Cell with the largest value (first one on ties).
    pub fn argmax(&self) -> Vec<usize> {
        let (flat, _) = self
            .0
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                if v > best.1 {
                    (i, v)
                } else {
                    best
                }
            });
        let mut idx = vec![0; self.0.ndim()];
        let mut rest = flat;
        for (d, &s) in self.0.shape().iter().enumerate().rev() {
            idx[d] = rest % s;
            rest /= s;
        }
        idx
    }

    /// Plain CSV grid: one row per innermost line; 3D maps put a blank line between slices.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let last = self.0.ndim() - 1;
        let width = self.0.shape()[last];
        let rows: Vec<&[f64]> = self
            .0
            .as_slice()
            .expect("standard layout")
            .chunks(width)
            .collect();
        let per_slice = if self.0.ndim() == 3 {
            self.0.shape()[1]
        } else {
            rows.len()
        };
        for (r, row) in rows.iter().enumerate() {
            if r > 0 && r % per_slice == 0 {
                writeln!(out)?;
            }
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string(&ErfJson {
            format_version: 1,
            shape: self.0.shape().to_vec(),
            values: self.0.iter().copied().collect(),
        })
    }
}

/// Backpropagate a unit gradient from one output location (all channels) to the inputs,
/// average absolute input gradients over batch and channels, and normalise by the maximum.
///
/// `unit` selects the output location; `None` is the center of the output map.
pub fn erf_map(model: &dyn Layer, inputs: &FeatureMap, unit: Option<&[usize]>) -> Result<ErfMap> {
    let out = model.forward(inputs)?;
    let spatial = &out.shape()[2..];
    let unit: Vec<usize> = match unit {
        Some(u) => {
            if u.len() != spatial.len() || u.iter().zip(spatial).any(|(&i, &s)| i >= s) {
                return Err(DclsError::Precondition(format!(
                    "unit {u:?} outside output extent {spatial:?}"
                )));
            }
            u.to_vec()
        }
        None => spatial.iter().map(|s| s / 2).collect(),
    };
    let mut upstream = ArrayD::zeros(out.0.raw_dim());
    for b in 0..out.shape()[0] {
        for c in 0..out.shape()[1] {
            let mut idx = vec![b, c];
            idx.extend_from_slice(&unit);
            upstream[IxDyn(&idx)] = 1.0;
        }
    }
    let grad = model.backward_input(inputs, &FeatureMap(upstream))?;
    if let Some(v) = grad.0.iter().find(|v| !v.is_finite()) {
        return Err(DclsError::NonFinite(format!("input gradient value {v}")));
    }
    let map = grad
        .0
        .mapv(f64::abs)
        .mean_axis(Axis(0))
        .and_then(|m| m.mean_axis(Axis(0)))
        .ok_or_else(|| DclsError::Precondition("empty batch or channel axis".into()))?;
    let max = map.fold(0.0f64, |a, &b| a.max(b));
    let map = if max > 0.0 { map / max } else { map };
    Ok(ErfMap(map.as_standard_layout().into_owned()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::construct::DenseKernel;
    use crate::conv::ConvConfig;
    use crate::diagnostics::gradcheck::random_array;
    use crate::grid::{KernelSpec, PositionTensor, WeightTensor};
    use crate::layer::{DclsLayer, FixedConv, Sequential};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn inputs(shape: &[usize]) -> FeatureMap {
        FeatureMap(random_array(shape, &mut ChaCha8Rng::seed_from_u64(0)))
    }

    #[test]
    fn identity_layer_is_a_point_mass() {
        let id = FixedConv {
            kernel: DenseKernel(ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 1.0)),
            cfg: ConvConfig::new(2),
        };
        let erf = erf_map(&id, &inputs(&[4, 1, 9, 9]), None).unwrap();
        assert_eq!(erf.0[[4, 4]], 1.0);
        assert_eq!(erf.0.sum(), 1.0);
    }

    #[test]
    fn one_tap_dcls_layer_points_at_its_offset() {
        let spec = KernelSpec::depthwise(&[9, 9], 1, 2).unwrap();
        let mut p = PositionTensor::zeros(&spec);
        for c in 0..2 {
            p.0[[0, c, 0, 0]] = -3.0;
            p.0[[1, c, 0, 0]] = 2.0;
        }
        let w = WeightTensor(ndarray::Array3::from_elem(spec.weight_shape(), 0.7));
        let layer = DclsLayer::new(spec.clone(), ConvConfig::same(&spec), w, p).unwrap();
        let erf = erf_map(&layer, &inputs(&[3, 2, 15, 15]), None).unwrap();
        assert_eq!(erf.argmax(), vec![7 - 3, 7 + 2]);
        assert_eq!(erf.0.sum(), 1.0);
    }

    #[test]
    fn normalisation_contract_for_stacked_layers() {
        let spec = KernelSpec::depthwise(&[5, 5], 3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let make = |rng: &mut ChaCha8Rng| {
            let w = crate::diagnostics::gradcheck::random_weights(&spec, rng);
            let p = crate::diagnostics::gradcheck::random_off_lattice_positions(&spec, rng);
            DclsLayer::new(spec.clone(), ConvConfig::same(&spec), w, p).unwrap()
        };
        let model = Sequential::default()
            .push(make(&mut rng))
            .push(make(&mut rng));
        let erf = erf_map(&model, &inputs(&[2, 2, 12, 11]), None).unwrap();
        assert_eq!(erf.0.shape(), &[12, 11]);
        assert!(erf.0.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(erf.0.fold(0.0f64, |a, &b| a.max(b)), 1.0);
    }

    #[test]
    fn csv_grid_and_json() {
        let erf = ErfMap(ndarray::arr2(&[[0.0, 1.0], [0.5, 0.25]]).into_dyn());
        let mut buf = Vec::new();
        erf.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "0,1\n0.5,0.25\n");
        assert!(erf.to_json().unwrap().contains("\"format_version\":1"));
    }

    #[test]
    fn unit_outside_output_is_rejected() {
        let id = FixedConv {
            kernel: DenseKernel(ArrayD::from_elem(IxDyn(&[1, 1, 1]), 1.0)),
            cfg: ConvConfig::new(1),
        };
        assert!(erf_map(&id, &inputs(&[1, 1, 5]), Some(&[5])).is_err());
    }
}
