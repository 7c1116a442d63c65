//! Kernel geometry, coordinate conventions and the floor/fraction split used
//! by every construction routine.
//!
//! Positions are stored centered: coordinate `0` is the kernel center. An
//! element is placed on the 0-based grid of extent `s_d` after shifting by
//! `s_d / 2` (integer division), so the admissible centered range along axis
//! `d` is `[-(s_d / 2), s_d - 1 - s_d / 2]`.

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{DclsError, Result};

pub const MAX_DIMS: usize = 3;

/// Geometry of one DCLS layer's kernel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub ndims: usize,
    /// Number of learnable elements per (out, in) kernel slice.
    pub kernel_count: usize,
    /// Extent of the constructed kernel along each axis.
    pub dilated_size: Vec<usize>,
    pub channels_out: usize,
    pub channels_in_per_group: usize,
    pub groups: usize,
}

impl KernelSpec {
    pub fn new(
        dilated_size: &[usize],
        kernel_count: usize,
        channels_out: usize,
        channels_in_per_group: usize,
        groups: usize,
    ) -> Result<Self> {
        let spec = Self {
            ndims: dilated_size.len(),
            kernel_count,
            dilated_size: dilated_size.to_vec(),
            channels_out,
            channels_in_per_group,
            groups,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Depthwise layer: one input channel per group, `channels` groups.
    pub fn depthwise(dilated_size: &[usize], kernel_count: usize, channels: usize) -> Result<Self> {
        Self::new(dilated_size, kernel_count, channels, 1, channels)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_DIMS).contains(&self.ndims) {
            return Err(DclsError::InvalidSpec(format!(
                "ndims must be 1, 2 or 3, got {}",
                self.ndims
            )));
        }
        if self.dilated_size.len() != self.ndims {
            return Err(DclsError::InvalidSpec(format!(
                "dilated_size has {} entries for ndims = {}",
                self.dilated_size.len(),
                self.ndims
            )));
        }
        if let Some(axis) = self.dilated_size.iter().position(|&s| s == 0) {
            return Err(DclsError::InvalidSpec(format!(
                "dilated_size[{axis}] must be >= 1"
            )));
        }
        if self.kernel_count == 0 {
            return Err(DclsError::InvalidSpec("kernel_count must be >= 1".into()));
        }
        if self.channels_out == 0 || self.channels_in_per_group == 0 || self.groups == 0 {
            return Err(DclsError::InvalidSpec(
                "channel counts and groups must be >= 1".into(),
            ));
        }
        if !self.channels_out.is_multiple_of(self.groups) {
            return Err(DclsError::InvalidSpec(format!(
                "channels_out = {} is not divisible by groups = {}",
                self.channels_out, self.groups
            )));
        }
        Ok(())
    }

    pub fn channels_in(&self) -> usize {
        self.channels_in_per_group * self.groups
    }

    pub fn position_shape(&self) -> [usize; 4] {
        [
            self.ndims,
            self.channels_out,
            self.channels_in_per_group,
            self.kernel_count,
        ]
    }

    pub fn weight_shape(&self) -> [usize; 3] {
        [
            self.channels_out,
            self.channels_in_per_group,
            self.kernel_count,
        ]
    }

    pub fn kernel_shape(&self) -> Vec<usize> {
        let mut shape = vec![self.channels_out, self.channels_in_per_group];
        shape.extend_from_slice(&self.dilated_size);
        shape
    }

    /// Number of cells in one (out, in) slice of the dense kernel.
    pub fn slice_len(&self) -> usize {
        self.dilated_size.iter().product()
    }

    pub fn num_slices(&self) -> usize {
        self.channels_out * self.channels_in_per_group
    }

    /// Centered clamp box `[lower, upper]` along `axis`.
    pub fn bounds(&self, axis: usize) -> (f64, f64) {
        let s = self.dilated_size[axis];
        let half = (s / 2) as f64;
        (-half, (s - 1) as f64 - half)
    }

    /// Shape-preserving padding for stride 1: `s_d / 2` per axis.
    pub fn same_padding(&self) -> Vec<usize> {
        self.dilated_size.iter().map(|s| s / 2).collect()
    }
}

/// Shift a centered coordinate onto the 0-based grid of `axis`.
pub fn to_absolute(p: f64, spec: &KernelSpec, axis: usize) -> f64 {
    debug_assert!(axis < spec.ndims);
    p + (spec.dilated_size[axis] / 2) as f64
}

/// Inverse of [`to_absolute`].
pub fn to_centered(p_abs: f64, spec: &KernelSpec, axis: usize) -> f64 {
    debug_assert!(axis < spec.ndims);
    p_abs - (spec.dilated_size[axis] / 2) as f64
}

/// Learnable element positions, shape `[ndims, channels_out, channels_in_per_group, kernel_count]`,
/// centered coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionTensor(pub Array4<f64>);

impl PositionTensor {
    pub fn zeros(spec: &KernelSpec) -> Self {
        Self(Array4::zeros(spec.position_shape()))
    }

    pub fn check_shape(&self, spec: &KernelSpec) -> Result<()> {
        check_shape("positions", &spec.position_shape(), self.0.shape())
    }

    /// Errors with [`DclsError::PositionOutOfBounds`] on the first coordinate outside the clamp box.
    pub fn check_bounds(&self, spec: &KernelSpec) -> Result<()> {
        for axis in 0..spec.ndims {
            let (lower, upper) = spec.bounds(axis);
            let lane = self.0.index_axis(ndarray::Axis(0), axis);
            for (element, &value) in lane.iter().enumerate() {
                if !(lower..=upper).contains(&value) {
                    return Err(DclsError::PositionOutOfBounds {
                        axis,
                        element,
                        value,
                        lower,
                        upper,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Element weights, shape `[channels_out, channels_in_per_group, kernel_count]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightTensor(pub Array3<f64>);

impl WeightTensor {
    pub fn zeros(spec: &KernelSpec) -> Self {
        Self(Array3::zeros(spec.weight_shape()))
    }

    pub fn check_shape(&self, spec: &KernelSpec) -> Result<()> {
        check_shape("weights", &spec.weight_shape(), self.0.shape())?;
        if let Some(v) = self.0.iter().find(|v| !v.is_finite()) {
            return Err(DclsError::NonFinite(format!("weight value {v}")));
        }
        Ok(())
    }
}

pub(crate) fn check_shape(what: &'static str, expected: &[usize], actual: &[usize]) -> Result<()> {
    if expected != actual {
        return Err(DclsError::ShapeMismatch {
            what,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        });
    }
    Ok(())
}

/// Floor indices and fractional parts of one absolute position.
///
/// The floor function is treated as having zero derivative; gradients only
/// ever flow through `frac`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InterpolationStencil {
    pub ndims: usize,
    pub floor_index: [usize; MAX_DIMS],
    pub frac: [f64; MAX_DIMS],
}

impl InterpolationStencil {
    /// Split `p_abs` into floor and fraction, checking `0 <= p_abs[d] <= sizes[d] - 1`.
    pub fn new(p_abs: &[f64], sizes: &[usize]) -> Result<Self> {
        debug_assert_eq!(p_abs.len(), sizes.len());
        let mut floor_index = [0; MAX_DIMS];
        let mut frac = [0.0; MAX_DIMS];
        for (axis, (&p, &s)) in p_abs.iter().zip(sizes).enumerate() {
            let upper = (s - 1) as f64;
            if !(0.0..=upper).contains(&p) {
                return Err(DclsError::Domain {
                    axis,
                    value: p,
                    upper,
                });
            }
            let fl = p.floor();
            floor_index[axis] = fl as usize;
            frac[axis] = p - fl;
        }
        Ok(Self {
            ndims: p_abs.len(),
            floor_index,
            frac,
        })
    }

    /// Visit the `2^ndims` cells adjacent to the position.
    ///
    /// The callback receives the cell's index, its multilinear coefficient and
    /// the derivative of that coefficient with respect to each fractional
    /// part. Cells whose index reaches `sizes[d]` are skipped; they only occur
    /// when the fraction on that axis is exactly zero, where the coefficient
    /// is zero too.
    #[inline]
    pub fn for_each_corner<F>(&self, sizes: &[usize], mut visit: F)
    where
        F: FnMut([usize; MAX_DIMS], f64, [f64; MAX_DIMS]),
    {
        let n = self.ndims;
        'corners: for corner in 0..(1usize << n) {
            let mut index = [0usize; MAX_DIMS];
            let mut factors = [1.0f64; MAX_DIMS];
            let mut signs = [0.0f64; MAX_DIMS];
            for d in 0..n {
                let upper = (corner >> d) & 1 == 1;
                let i = self.floor_index[d] + upper as usize;
                if i >= sizes[d] {
                    continue 'corners;
                }
                index[d] = i;
                let r = self.frac[d];
                factors[d] = if upper { r } else { 1.0 - r };
                signs[d] = if upper { 1.0 } else { -1.0 };
            }
            let coef = factors[..n].iter().product();
            let mut dcoef = [0.0; MAX_DIMS];
            for d in 0..n {
                dcoef[d] = signs[d]
                    * factors[..n]
                        .iter()
                        .enumerate()
                        .filter(|&(e, _)| e != d)
                        .map(|(_, f)| f)
                        .product::<f64>();
            }
            visit(index, coef, dcoef);
        }
    }
}

/// Row-major linear offset of `index` inside a grid of extent `sizes`.
#[inline]
pub(crate) fn linear_offset(index: &[usize; MAX_DIMS], sizes: &[usize]) -> usize {
    let mut offset = 0;
    for (d, &s) in sizes.iter().enumerate() {
        offset = offset * s + index[d];
    }
    offset
}
