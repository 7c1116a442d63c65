//! Dense kernel construction from (weights, positions) and its backward pass.
//!
//! Each element spreads its weight over the `2^ndims` grid cells around its
//! position with multilinear coefficients `prod_d (r_d or 1 - r_d)`.
//! Overlapping contributions add up. The backward pass reads the same cells
//! of the upstream gradient `G = dloss/dK`:
//!
//! * `dloss/dw_k   = sum_c coef_c * G[c]`
//! * `dloss/dp_k^d = w_k * sum_c (dcoef_c / dr_d) * G[c]`
//!
//! The math is applied independently to every (out-channel, in-channel) slice.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array3, Array4, ArrayD, IxDyn};
use num_traits::Float;
use rayon::prelude::*;

use crate::error::{DclsError, Result};
use crate::grid::{
    check_shape, linear_offset, InterpolationStencil, KernelSpec, PositionTensor, WeightTensor,
    MAX_DIMS,
};

/// Constructed kernel, shape `[channels_out, channels_in_per_group, s_1, .., s_n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseKernel(pub ArrayD<f64>);

/// `dloss/dK`, same shape as [`DenseKernel`].
#[derive(Clone, Debug, PartialEq)]
pub struct UpstreamGrad(pub ArrayD<f64>);

/// Gradients with respect to weights and positions.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBundle {
    pub d_weights: WeightTensor,
    pub d_positions: PositionTensor,
}

/// How concurrent writes into shared kernel cells are made race-free.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Accumulation {
    /// One task per (out, in) slice; elements of a slice are summed in order.
    #[default]
    SlicePartitioned,
    /// One task per element, compare-and-swap adds into shared cells.
    AtomicScatter,
}

fn check_inputs(
    weights: &WeightTensor,
    positions: &PositionTensor,
    spec: &KernelSpec,
) -> Result<()> {
    spec.validate()?;
    weights.check_shape(spec)?;
    positions.check_shape(spec)?;
    positions.check_bounds(spec)
}

/// Absolute coordinates of element `e` (flat over slices and elements).
#[inline]
fn absolute_position<T: Float>(
    positions: &[T],
    n_elems: usize,
    e: usize,
    sizes: &[usize],
) -> [f64; MAX_DIMS] {
    let mut abs = [0.0; MAX_DIMS];
    for (d, &s) in sizes.iter().enumerate() {
        abs[d] = positions[d * n_elems + e].to_f64().unwrap() + (s / 2) as f64;
    }
    abs
}

/// Slice-level construction on raw buffers.
///
/// `weights` is `[slices * m]`, `positions` is `[ndims, slices * m]` (centered),
/// `out` is `[slices * prod(s)]` and is overwritten.
pub fn construct_forward_raw<T>(
    weights: &[T],
    positions: &[T],
    spec: &KernelSpec,
    out: &mut [T],
) -> Result<()>
where
    T: Float + Send + Sync,
{
    let sizes = &spec.dilated_size[..];
    let m = spec.kernel_count;
    let n_elems = spec.num_slices() * m;
    let slice_len = spec.slice_len();
    debug_assert_eq!(weights.len(), n_elems);
    debug_assert_eq!(positions.len(), n_elems * spec.ndims);
    debug_assert_eq!(out.len(), spec.num_slices() * slice_len);

    out.par_chunks_mut(slice_len)
        .enumerate()
        .try_for_each(|(slice, cells)| {
            cells.fill(T::zero());
            for k in 0..m {
                let e = slice * m + k;
                let abs = absolute_position(positions, n_elems, e, sizes);
                let stencil = InterpolationStencil::new(&abs[..sizes.len()], sizes)?;
                let w = weights[e];
                stencil.for_each_corner(sizes, |idx, coef, _| {
                    cells[linear_offset(&idx, sizes)] =
                        cells[linear_offset(&idx, sizes)] + w * T::from(coef).unwrap();
                });
            }
            Ok(())
        })
}

fn atomic_add(cell: &AtomicU64, value: f64) {
    let mut current = cell.load(Ordering::Relaxed);
    loop {
        let next = (f64::from_bits(current) + value).to_bits();
        match cell.compare_exchange_weak(current, next, Ordering::Relaxed, Ordering::Relaxed) {
            Ok(_) => return,
            Err(seen) => current = seen,
        }
    }
}

fn construct_forward_atomic(
    weights: &[f64],
    positions: &[f64],
    spec: &KernelSpec,
) -> Result<Vec<f64>> {
    let sizes = &spec.dilated_size[..];
    let m = spec.kernel_count;
    let n_elems = spec.num_slices() * m;
    let slice_len = spec.slice_len();
    let cells: Vec<AtomicU64> = (0..spec.num_slices() * slice_len)
        .map(|_| AtomicU64::new(0f64.to_bits()))
        .collect();

    (0..n_elems).into_par_iter().try_for_each(|e| {
        let base = (e / m) * slice_len;
        let abs = absolute_position(positions, n_elems, e, sizes);
        let stencil = InterpolationStencil::new(&abs[..sizes.len()], sizes)?;
        let w = weights[e];
        stencil.for_each_corner(sizes, |idx, coef, _| {
            atomic_add(&cells[base + linear_offset(&idx, sizes)], w * coef);
        });
        Ok::<_, DclsError>(())
    })?;
    Ok(cells
        .into_iter()
        .map(|c| f64::from_bits(c.into_inner()))
        .collect())
}

/// Build the dense kernel. Positions must already lie inside the clamp box.
pub fn construct_forward(
    weights: &WeightTensor,
    positions: &PositionTensor,
    spec: &KernelSpec,
) -> Result<DenseKernel> {
    construct_forward_with(weights, positions, spec, Accumulation::default())
}

pub fn construct_forward_with(
    weights: &WeightTensor,
    positions: &PositionTensor,
    spec: &KernelSpec,
    accumulation: Accumulation,
) -> Result<DenseKernel> {
    check_inputs(weights, positions, spec)?;
    let w = weights.0.as_standard_layout();
    let p = positions.0.as_standard_layout();
    let w = w.as_slice().expect("standard layout");
    let p = p.as_slice().expect("standard layout");
    let data = match accumulation {
        Accumulation::SlicePartitioned => {
            let mut out = vec![0.0; spec.num_slices() * spec.slice_len()];
            construct_forward_raw(w, p, spec, &mut out)?;
            out
        }
        Accumulation::AtomicScatter => construct_forward_atomic(w, p, spec)?,
    };
    Ok(DenseKernel(
        ArrayD::from_shape_vec(IxDyn(&spec.kernel_shape()), data).expect("kernel shape"),
    ))
}

/// Gradients of the loss with respect to weights and positions given `dloss/dK`.
pub fn construct_backward(
    upstream: &UpstreamGrad,
    weights: &WeightTensor,
    positions: &PositionTensor,
    spec: &KernelSpec,
) -> Result<GradBundle> {
    check_inputs(weights, positions, spec)?;
    check_shape(
        "upstream gradient",
        &spec.kernel_shape(),
        upstream.0.shape(),
    )?;
    if let Some(v) = upstream.0.iter().find(|v| !v.is_finite()) {
        return Err(DclsError::NonFinite(format!("upstream gradient value {v}")));
    }

    let sizes = &spec.dilated_size[..];
    let ndims = spec.ndims;
    let m = spec.kernel_count;
    let n_elems = spec.num_slices() * m;
    let slice_len = spec.slice_len();
    let g = upstream.0.as_standard_layout();
    let g = g.as_slice().expect("standard layout");
    let w = weights.0.as_standard_layout();
    let w = w.as_slice().expect("standard layout");
    let p = positions.0.as_standard_layout();
    let p = p.as_slice().expect("standard layout");

    let per_element: Vec<(f64, [f64; MAX_DIMS])> = (0..n_elems)
        .into_par_iter()
        .map(|e| {
            let cells = &g[(e / m) * slice_len..][..slice_len];
            let abs = absolute_position(p, n_elems, e, sizes);
            let stencil = InterpolationStencil::new(&abs[..ndims], sizes)?;
            let mut dw = 0.0;
            let mut dp = [0.0; MAX_DIMS];
            stencil.for_each_corner(sizes, |idx, coef, dcoef| {
                let gv = cells[linear_offset(&idx, sizes)];
                dw += coef * gv;
                for d in 0..ndims {
                    dp[d] += dcoef[d] * gv;
                }
            });
            for v in &mut dp[..ndims] {
                *v *= w[e];
            }
            Ok((dw, dp))
        })
        .collect::<Result<_>>()?;

    let mut d_weights = Array3::zeros(spec.weight_shape());
    let mut d_positions = Array4::zeros(spec.position_shape());
    {
        let dw = d_weights.as_slice_mut().expect("standard layout");
        let dp = d_positions.as_slice_mut().expect("standard layout");
        for (e, (gw, gp)) in per_element.into_iter().enumerate() {
            dw[e] = gw;
            for d in 0..ndims {
                dp[d * n_elems + e] = gp[d];
            }
        }
    }
    Ok(GradBundle {
        d_weights: WeightTensor(d_weights),
        d_positions: PositionTensor(d_positions),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parallel::with_workers;
    use ndarray::{arr2, array, Array};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single(spec: &KernelSpec, w: f64, p: &[f64]) -> (WeightTensor, PositionTensor) {
        let mut weights = WeightTensor::zeros(spec);
        weights.0[[0, 0, 0]] = w;
        let mut positions = PositionTensor::zeros(spec);
        for (d, &v) in p.iter().enumerate() {
            positions.0[[d, 0, 0, 0]] = v;
        }
        (weights, positions)
    }

    fn random_params(spec: &KernelSpec, rng: &mut ChaCha8Rng) -> (WeightTensor, PositionTensor) {
        let weights = WeightTensor(Array::from_shape_fn(spec.weight_shape(), |_| {
            rng.random_range(-1.0..1.0)
        }));
        let mut positions = PositionTensor::zeros(spec);
        for ((d, ..), v) in positions.0.indexed_iter_mut() {
            let (lo, hi) = spec.bounds(d);
            *v = rng.random_range(lo..=hi);
        }
        (weights, positions)
    }

    #[test]
    fn forward_2d_fractional_example() {
        let spec = KernelSpec::depthwise(&[3, 3], 1, 1).unwrap();
        let (w, p) = single(&spec, 1.0, &[0.25, 0.5]);
        let k = construct_forward(&w, &p, &spec).unwrap().0;
        let slice = k
            .index_axis(ndarray::Axis(0), 0)
            .index_axis(ndarray::Axis(0), 0)
            .to_owned();
        let expected =
            arr2(&[[0.0, 0.0, 0.0], [0.0, 0.375, 0.375], [0.0, 0.125, 0.125]]).into_dyn();
        assert_eq!(slice, expected);
    }

    #[test]
    fn forward_2d_integer_example() {
        let spec = KernelSpec::depthwise(&[3, 3], 1, 1).unwrap();
        let (w, p) = single(&spec, 5.0, &[0.0, 0.0]);
        let k = construct_forward(&w, &p, &spec).unwrap().0;
        for (idx, &v) in k.indexed_iter() {
            let expected = if idx[2] == 1 && idx[3] == 1 { 5.0 } else { 0.0 };
            assert_eq!(v, expected);
        }
    }

    #[test]
    fn forward_1d_example() {
        // absolute 0.5 in a 3-wide window is centered -0.5
        let spec = KernelSpec::depthwise(&[3], 1, 1).unwrap();
        let (w, p) = single(&spec, 2.0, &[-0.5]);
        let k = construct_forward(&w, &p, &spec).unwrap().0;
        assert_eq!(k.into_raw_vec_and_offset().0, vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn backward_2d_example() {
        let spec = KernelSpec::depthwise(&[3, 3], 1, 1).unwrap();
        let (w, p) = single(&spec, 1.0, &[0.25, 0.5]);
        let g = UpstreamGrad(
            arr2(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]])
                .into_shape_with_order((1, 1, 3, 3))
                .unwrap()
                .into_dyn(),
        );
        let grads = construct_backward(&g, &w, &p, &spec).unwrap();
        assert!((grads.d_weights.0[[0, 0, 0]] - 6.25).abs() < 1e-15);
        assert!((grads.d_positions.0[[0, 0, 0, 0]] - 3.0).abs() < 1e-15);
        assert!((grads.d_positions.0[[1, 0, 0, 0]] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_upstream_gives_unit_weight_grads_and_zero_position_grads() {
        let spec = KernelSpec::new(&[5, 7], 6, 2, 3, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, p) = random_params(&spec, &mut rng);
        // keep clear of the upper edge, where corners are dropped
        let p = PositionTensor(p.0.mapv(|v| v.min(1.9)));
        let g = UpstreamGrad(ArrayD::from_elem(IxDyn(&spec.kernel_shape()), 2.5));
        let grads = construct_backward(&g, &w, &p, &spec).unwrap();
        assert!(grads.d_weights.0.iter().all(|&v| (v - 2.5).abs() < 1e-12));
        assert!(grads.d_positions.0.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn out_of_bounds_positions_are_rejected() {
        let spec = KernelSpec::depthwise(&[3, 3], 1, 1).unwrap();
        let (w, p) = single(&spec, 1.0, &[1.2, 0.0]);
        let err = construct_forward(&w, &p, &spec).unwrap_err();
        assert!(matches!(
            err,
            DclsError::PositionOutOfBounds { axis: 0, .. }
        ));
        assert!(err.to_string().contains("clamp"));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let spec = KernelSpec::depthwise(&[3, 3], 2, 1).unwrap();
        let other = KernelSpec::depthwise(&[3, 3], 3, 1).unwrap();
        let w = WeightTensor::zeros(&other);
        let p = PositionTensor::zeros(&spec);
        assert!(matches!(
            construct_forward(&w, &p, &spec),
            Err(DclsError::ShapeMismatch {
                what: "weights",
                ..
            })
        ));
        let w = WeightTensor::zeros(&spec);
        let g = UpstreamGrad(ArrayD::zeros(IxDyn(&[1, 1, 3, 4])));
        assert!(construct_backward(&g, &w, &p, &spec).is_err());
    }

    #[test]
    fn upper_boundary_keeps_mass() {
        let spec = KernelSpec::depthwise(&[4, 3], 1, 1).unwrap();
        let (w, p) = single(&spec, 3.0, &[1.0, 1.0]);
        let k = construct_forward(&w, &p, &spec).unwrap().0;
        assert_eq!(k[[0, 0, 3, 2]], 3.0);
        assert_eq!(k.sum(), 3.0);
    }

    #[test]
    fn atomic_and_partitioned_agree_across_workers() {
        let spec = KernelSpec::new(&[9, 9], 16, 4, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (w, p) = random_params(&spec, &mut rng);
        let reference = with_workers(1, || construct_forward(&w, &p, &spec).unwrap());
        for workers in [1, 4, 8] {
            for acc in [Accumulation::SlicePartitioned, Accumulation::AtomicScatter] {
                let k = with_workers(workers, || {
                    construct_forward_with(&w, &p, &spec, acc).unwrap()
                });
                let diff = (&k.0 - &reference.0)
                    .mapv(f64::abs)
                    .fold(0.0f64, |a, &b| a.max(b));
                assert!(diff <= 1e-12, "workers={workers} {acc:?}: {diff}");
            }
        }
    }

    #[test]
    fn raw_f32_matches_f64() {
        let spec = KernelSpec::depthwise(&[7, 7], 5, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (w, p) = random_params(&spec, &mut rng);
        let k64 = construct_forward(&w, &p, &spec).unwrap().0;
        let w32: Vec<f32> = w.0.iter().map(|&v| v as f32).collect();
        let p32: Vec<f32> = p.0.iter().map(|&v| v as f32).collect();
        let mut k32 = vec![0f32; k64.len()];
        construct_forward_raw(&w32, &p32, &spec, &mut k32).unwrap();
        for (a, b) in k64.iter().zip(&k32) {
            assert!((a - *b as f64).abs() < 1e-5);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn linear_in_weights(seed in any::<u64>(), alpha in -3.0f64..3.0) {
            let spec = KernelSpec::new(&[5, 4], 4, 2, 2, 1).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (w, p) = random_params(&spec, &mut rng);
            let k = construct_forward(&w, &p, &spec).unwrap().0;
            let ks = construct_forward(&WeightTensor(w.0.mapv(|v| alpha * v)), &p, &spec).unwrap().0;
            for (a, b) in k.iter().zip(ks.iter()) {
                prop_assert!((alpha * a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn permutation_invariant(seed in any::<u64>()) {
            let spec = KernelSpec::depthwise(&[6, 5, 4], 5, 1).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (w, p) = random_params(&spec, &mut rng);
            let perm = [3usize, 0, 4, 1, 2];
            let mut wp = w.clone();
            let mut pp = p.clone();
            for (dst, &src) in perm.iter().enumerate() {
                wp.0[[0, 0, dst]] = w.0[[0, 0, src]];
                for d in 0..3 {
                    pp.0[[d, 0, 0, dst]] = p.0[[d, 0, 0, src]];
                }
            }
            let a = construct_forward(&w, &p, &spec).unwrap().0;
            let b = construct_forward(&wp, &pp, &spec).unwrap().0;
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn coincident_elements_add(seed in any::<u64>()) {
            let two = KernelSpec::depthwise(&[7, 7], 2, 1).unwrap();
            let one = KernelSpec::depthwise(&[7, 7], 1, 1).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pos = [rng.random_range(-3.0..=3.0), rng.random_range(-3.0..=3.0)];
            let (w1, w2) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let w = WeightTensor(array![[[w1, w2]]]);
            let mut p = PositionTensor::zeros(&two);
            for (d, &v) in pos.iter().enumerate() { p.0[[d, 0, 0, 0]] = v; p.0[[d, 0, 0, 1]] = v; }
            let (ws, ps) = single(&one, w1 + w2, &pos);
            let a = construct_forward(&w, &p, &two).unwrap().0;
            let b = construct_forward(&ws, &ps, &one).unwrap().0;
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn mass_is_conserved(seed in any::<u64>()) {
            let spec = KernelSpec::new(&[3, 5, 2], 7, 2, 2, 2).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (w, p) = random_params(&spec, &mut rng);
            let k = construct_forward(&w, &p, &spec).unwrap().0;
            for o in 0..2 {
                for i in 0..2 {
                    let cells: f64 = k.index_axis(ndarray::Axis(0), o).index_axis(ndarray::Axis(0), i).sum();
                    let weights: f64 = (0..7).map(|e| w.0[[o, i, e]]).sum();
                    prop_assert!((cells - weights).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn weight_grad_is_exact_adjoint(seed in any::<u64>()) {
            let spec = KernelSpec::depthwise(&[5, 5], 3, 2).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (w, p) = random_params(&spec, &mut rng);
            let g = UpstreamGrad(ArrayD::from_shape_fn(IxDyn(&spec.kernel_shape()), |_| rng.random_range(-1.0..1.0)));
            let grads = construct_backward(&g, &w, &p, &spec).unwrap();
            for c in 0..2 {
                for k in 0..3 {
                    let mut unit = WeightTensor::zeros(&spec);
                    unit.0[[c, 0, k]] = 1.0;
                    let kk = construct_forward(&unit, &p, &spec).unwrap().0;
                    let inner: f64 = kk.iter().zip(g.0.iter()).map(|(a, b)| a * b).sum();
                    prop_assert!((inner - grads.d_weights.0[[c, 0, k]]).abs() <= 1e-14);
                }
            }
        }
    }
}
