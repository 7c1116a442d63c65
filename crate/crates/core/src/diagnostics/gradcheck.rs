//! Central finite-difference gradient checking.

use ndarray::{Array, ArrayD, IxDyn};
use rand::Rng;

use crate::construct::{construct_backward, construct_forward, GradBundle, UpstreamGrad};
use crate::conv::{dcls_conv_backward, dcls_conv_forward, ConvConfig, FeatureMap};
use crate::error::{DclsError, Result};
use crate::grid::{KernelSpec, PositionTensor, WeightTensor};

/// Fractional parts of checked positions must lie in `[OFF_LATTICE_MARGIN, 1 - OFF_LATTICE_MARGIN]`.
pub const OFF_LATTICE_MARGIN: f64 = 0.05;

/// Compare `analytic` against central differences of `f` at `params`.
///
/// Returns `max_i |a_i - n_i| / max(1, |a_i|, |n_i|)`. Coordinates listed in
/// `off_lattice` are positions: the loss is not differentiable where they
/// take integer values, so they must keep their fractional part away from 0
/// and 1.
pub fn grad_check<F>(
    f: F,
    params: &[f64],
    analytic: &[f64],
    eps: f64,
    off_lattice: &[usize],
) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(DclsError::Precondition(format!(
            "eps must be in [1e-6, 1e-3], got {eps}"
        )));
    }
    if params.len() != analytic.len() {
        return Err(DclsError::ShapeMismatch {
            what: "analytic gradient",
            expected: vec![params.len()],
            actual: vec![analytic.len()],
        });
    }
    for &i in off_lattice {
        let frac = params[i] - params[i].floor();
        if !(OFF_LATTICE_MARGIN..=1.0 - OFF_LATTICE_MARGIN).contains(&frac) {
            return Err(DclsError::Precondition(format!(
                "coordinate {i} = {} is within {OFF_LATTICE_MARGIN} of a lattice point",
                params[i]
            )));
        }
    }
    let mut x = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let plus = f(&x);
        x[i] = orig - eps;
        let minus = f(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() || !analytic[i].is_finite() {
            return Err(DclsError::NonFinite(format!("coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i];
        worst = worst.max((a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs()));
    }
    Ok(worst)
}

/// Positions whose fractional parts lie in `[0.05, 0.95]` on every axis, inside the clamp box.
///
/// Axes of extent 1 have a single admissible position (0) and are left there.
pub fn random_off_lattice_positions<R: Rng>(spec: &KernelSpec, rng: &mut R) -> PositionTensor {
    let mut positions = PositionTensor::zeros(spec);
    for ((axis, ..), v) in positions.0.indexed_iter_mut() {
        let (lower, upper) = spec.bounds(axis);
        if upper > lower {
            let cell = rng.random_range(lower as i64..upper as i64) as f64;
            *v = cell + rng.random_range(OFF_LATTICE_MARGIN..=1.0 - OFF_LATTICE_MARGIN);
        }
    }
    positions
}

pub fn random_weights<R: Rng>(spec: &KernelSpec, rng: &mut R) -> WeightTensor {
    WeightTensor(Array::from_shape_fn(spec.weight_shape(), |_| {
        rng.random_range(-1.0..1.0)
    }))
}

pub fn random_array<R: Rng>(shape: &[usize], rng: &mut R) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
}

/// Signature of a kernel-construction backward pass, so alternative implementations can be checked.
pub type ConstructBackward =
    fn(&UpstreamGrad, &WeightTensor, &PositionTensor, &KernelSpec) -> Result<GradBundle>;

fn off_lattice_indices(spec: &KernelSpec, positions: &PositionTensor, offset: usize) -> Vec<usize> {
    positions
        .0
        .indexed_iter()
        .enumerate()
        .filter(|(_, ((axis, ..), _))| spec.dilated_size[*axis] > 1)
        .map(|(i, _)| offset + i)
        .collect()
}

/// Max relative error of `backward` against finite differences of `<G, construct_forward(w, p)>`,
/// over weights and positions jointly.
pub fn construct_grad_error_with(
    backward: ConstructBackward,
    spec: &KernelSpec,
    weights: &WeightTensor,
    positions: &PositionTensor,
    upstream: &UpstreamGrad,
    eps: f64,
) -> Result<f64> {
    let grads = backward(upstream, weights, positions, spec)?;
    let nw = weights.0.len();
    let params: Vec<f64> = weights
        .0
        .iter()
        .chain(positions.0.iter())
        .copied()
        .collect();
    let analytic: Vec<f64> = grads
        .d_weights
        .0
        .iter()
        .chain(grads.d_positions.0.iter())
        .copied()
        .collect();
    let loss = |x: &[f64]| {
        let w = WeightTensor(Array::from_shape_vec(spec.weight_shape(), x[..nw].to_vec()).unwrap());
        let p =
            PositionTensor(Array::from_shape_vec(spec.position_shape(), x[nw..].to_vec()).unwrap());
        match construct_forward(&w, &p, spec) {
            Ok(k) => k.0.iter().zip(upstream.0.iter()).map(|(a, b)| a * b).sum(),
            Err(_) => f64::NAN,
        }
    };
    grad_check(
        loss,
        &params,
        &analytic,
        eps,
        &off_lattice_indices(spec, positions, nw),
    )
}

pub fn construct_grad_error(
    spec: &KernelSpec,
    weights: &WeightTensor,
    positions: &PositionTensor,
    upstream: &UpstreamGrad,
    eps: f64,
) -> Result<f64> {
    construct_grad_error_with(construct_backward, spec, weights, positions, upstream, eps)
}

/// Per-parameter-family errors of the end-to-end DCLS convolution gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ConvGradErrors {
    pub input: f64,
    pub weights: f64,
    pub positions: f64,
}

impl ConvGradErrors {
    pub fn max(&self) -> f64 {
        self.input.max(self.weights).max(self.positions)
    }
}

/// Check `dcls_conv_backward` against finite differences of the loss `<R, conv(x; w, p)>`.
pub fn conv_grad_errors(
    spec: &KernelSpec,
    cfg: &ConvConfig,
    input: &FeatureMap,
    weights: &WeightTensor,
    positions: &PositionTensor,
    readout: &ArrayD<f64>,
    eps: f64,
) -> Result<ConvGradErrors> {
    let (out, ctx) = dcls_conv_forward(input, weights, positions, spec, cfg)?;
    if out.shape() != readout.shape() {
        return Err(DclsError::ShapeMismatch {
            what: "readout",
            expected: out.shape().to_vec(),
            actual: readout.shape().to_vec(),
        });
    }
    let (d_input, grads) = dcls_conv_backward(&ctx, &FeatureMap(readout.clone()))?;
    let loss = |x: &FeatureMap, w: &WeightTensor, p: &PositionTensor| match dcls_conv_forward(
        x, w, p, spec, cfg,
    ) {
        Ok((y, _)) => y.0.iter().zip(readout.iter()).map(|(a, b)| a * b).sum(),
        Err(_) => f64::NAN,
    };

    let xs: Vec<f64> = input.0.iter().copied().collect();
    let input_err = grad_check(
        |v| {
            loss(
                &FeatureMap(ArrayD::from_shape_vec(input.0.raw_dim(), v.to_vec()).unwrap()),
                weights,
                positions,
            )
        },
        &xs,
        &d_input.0.iter().copied().collect::<Vec<_>>(),
        eps,
        &[],
    )?;
    let ws: Vec<f64> = weights.0.iter().copied().collect();
    let weight_err = grad_check(
        |v| {
            loss(
                input,
                &WeightTensor(Array::from_shape_vec(spec.weight_shape(), v.to_vec()).unwrap()),
                positions,
            )
        },
        &ws,
        &grads.d_weights.0.iter().copied().collect::<Vec<_>>(),
        eps,
        &[],
    )?;
    let ps: Vec<f64> = positions.0.iter().copied().collect();
    let position_err = grad_check(
        |v| {
            loss(
                input,
                weights,
                &PositionTensor(Array::from_shape_vec(spec.position_shape(), v.to_vec()).unwrap()),
            )
        },
        &ps,
        &grads.d_positions.0.iter().copied().collect::<Vec<_>>(),
        eps,
        &off_lattice_indices(spec, positions, 0),
    )?;
    Ok(ConvGradErrors {
        input: input_err,
        weights: weight_err,
        positions: position_err,
    })
}
