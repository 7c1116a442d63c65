//! Direct (cross-correlation) convolution engine for 1D/2D/3D inputs, its two
//! adjoints, the fixed-grid dilated baseline and the full DCLS path.
//!
//! Internally every problem is lifted to three spatial axes by prepending unit
//! axes, so one set of loops serves all dimensionalities. The engine is dense:
//! it never inspects kernel values, so its cost depends on the kernel extent
//! and not on how many cells are nonzero.

use ndarray::{ArrayD, IxDyn};
use num_traits::Float;
use rayon::prelude::*;

use crate::construct::{
    construct_backward, construct_forward, DenseKernel, GradBundle, UpstreamGrad,
};
use crate::error::{DclsError, Result};
use crate::grid::{KernelSpec, PositionTensor, WeightTensor, MAX_DIMS};

/// Activations, shape `[batch, channels, d_1, .., d_n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(pub ArrayD<f64>);

impl FeatureMap {
    pub fn zeros(shape: &[usize]) -> Self {
        Self(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn shape(&self) -> &[usize] {
        self.0.shape()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvConfig {
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
    pub groups: usize,
    /// Only meaningful for the fixed-grid baseline; must be all ones on the DCLS path.
    pub dilation: Vec<usize>,
}

impl ConvConfig {
    /// Stride 1, no padding, one group, no dilation.
    pub fn new(ndims: usize) -> Self {
        Self {
            stride: vec![1; ndims],
            padding: vec![0; ndims],
            groups: 1,
            dilation: vec![1; ndims],
        }
    }

    /// Shape-preserving configuration for a DCLS layer: stride 1, padding `s_d / 2`.
    pub fn same(spec: &KernelSpec) -> Self {
        Self {
            padding: spec.same_padding(),
            groups: spec.groups,
            ..Self::new(spec.ndims)
        }
    }

    pub fn with_stride(mut self, stride: &[usize]) -> Self {
        self.stride = stride.to_vec();
        self
    }

    pub fn with_padding(mut self, padding: &[usize]) -> Self {
        self.padding = padding.to_vec();
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_dilation(mut self, dilation: &[usize]) -> Self {
        self.dilation = dilation.to_vec();
        self
    }

    pub fn ndims(&self) -> usize {
        self.stride.len()
    }
}

/// Resolved sizes of one convolution problem, lifted to three spatial axes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub ndims: usize,
    pub batch: usize,
    pub channels_in: usize,
    pub channels_out: usize,
    pub groups: usize,
    input: [usize; MAX_DIMS],
    kernel: [usize; MAX_DIMS],
    output: [usize; MAX_DIMS],
    stride: [usize; MAX_DIMS],
    padding: [usize; MAX_DIMS],
    dilation: [usize; MAX_DIMS],
}

fn lift(values: &[usize], fill: usize) -> [usize; MAX_DIMS] {
    let mut out = [fill; MAX_DIMS];
    out[MAX_DIMS - values.len()..].copy_from_slice(values);
    out
}

impl ConvGeometry {
    pub fn new(input_shape: &[usize], kernel_shape: &[usize], cfg: &ConvConfig) -> Result<Self> {
        let n = cfg.ndims();
        let geometry = |axis: usize, reason: String| DclsError::Geometry { axis, reason };
        if !(1..=MAX_DIMS).contains(&n) {
            return Err(geometry(0, format!("{n} spatial axes are not supported")));
        }
        if cfg.padding.len() != n || cfg.dilation.len() != n {
            return Err(geometry(
                0,
                "stride, padding and dilation lengths differ".into(),
            ));
        }
        if input_shape.len() != n + 2 {
            return Err(geometry(
                0,
                format!("input has rank {}, expected {}", input_shape.len(), n + 2),
            ));
        }
        if kernel_shape.len() != n + 2 {
            return Err(geometry(
                0,
                format!("kernel has rank {}, expected {}", kernel_shape.len(), n + 2),
            ));
        }
        let groups = cfg.groups;
        let (batch, channels_in) = (input_shape[0], input_shape[1]);
        let (channels_out, cin_g) = (kernel_shape[0], kernel_shape[1]);
        if groups == 0 || channels_out % groups != 0 {
            return Err(geometry(
                0,
                format!("{channels_out} output channels not divisible by {groups} groups"),
            ));
        }
        if cin_g * groups != channels_in {
            return Err(geometry(
                0,
                format!(
                    "kernel expects {cin_g} x {groups} input channels, input has {channels_in}"
                ),
            ));
        }
        let mut output = vec![0; n];
        for d in 0..n {
            let (i, k) = (input_shape[2 + d], kernel_shape[2 + d]);
            let (s, p, dl) = (cfg.stride[d], cfg.padding[d], cfg.dilation[d]);
            if i == 0 || k == 0 {
                return Err(geometry(d, "zero extent".into()));
            }
            if s == 0 || dl == 0 {
                return Err(geometry(d, "stride and dilation must be >= 1".into()));
            }
            let span = dl * (k - 1) + 1;
            if i + 2 * p < span {
                return Err(geometry(
                    d,
                    format!(
                        "kernel span {span} exceeds padded input extent {}",
                        i + 2 * p
                    ),
                ));
            }
            output[d] = (i + 2 * p - span) / s + 1;
        }
        Ok(Self {
            ndims: n,
            batch,
            channels_in,
            channels_out,
            groups,
            input: lift(&input_shape[2..], 1),
            kernel: lift(&kernel_shape[2..], 1),
            output: lift(&output, 1),
            stride: lift(&cfg.stride, 1),
            padding: lift(&cfg.padding, 0),
            dilation: lift(&cfg.dilation, 1),
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let mut shape = vec![self.batch, self.channels_out];
        shape.extend_from_slice(&self.output[MAX_DIMS - self.ndims..]);
        shape
    }

    pub fn input_shape(&self) -> Vec<usize> {
        let mut shape = vec![self.batch, self.channels_in];
        shape.extend_from_slice(&self.input[MAX_DIMS - self.ndims..]);
        shape
    }

    pub fn kernel_shape(&self) -> Vec<usize> {
        let mut shape = vec![self.channels_out, self.cin_per_group()];
        shape.extend_from_slice(&self.kernel[MAX_DIMS - self.ndims..]);
        shape
    }

    fn cin_per_group(&self) -> usize {
        self.channels_in / self.groups
    }

    fn cout_per_group(&self) -> usize {
        self.channels_out / self.groups
    }

    fn plane(sizes: &[usize; MAX_DIMS]) -> usize {
        sizes.iter().product()
    }

    /// Output index range `[lo, hi)` on `axis` for which kernel tap `k` reads inside the input.
    #[inline]
    fn valid_range(&self, axis: usize, k: usize) -> (usize, usize) {
        let s = self.stride[axis] as isize;
        let shift = (k * self.dilation[axis]) as isize - self.padding[axis] as isize;
        let extent = self.input[axis] as isize;
        // o * s + shift in [0, extent)
        let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
        let hi = if extent - 1 - shift < 0 {
            0
        } else {
            (extent - 1 - shift) / s + 1
        };
        let hi = hi.min(self.output[axis] as isize);
        (lo as usize, hi.max(lo) as usize)
    }

    #[inline]
    fn input_index(&self, axis: usize, o: usize, k: usize) -> usize {
        o * self.stride[axis] + k * self.dilation[axis] - self.padding[axis]
    }

    /// Visit every (tap, output, input) triple with both ends in range, for one channel pair.
    #[inline]
    fn for_each_tap<F>(&self, mut visit: F)
    where
        F: FnMut(usize, usize, usize, usize),
    {
        let (kp, ip, op) = (self.kernel, self.input, self.output);
        for kz in 0..kp[0] {
            let (z0, z1) = self.valid_range(0, kz);
            for ky in 0..kp[1] {
                let (y0, y1) = self.valid_range(1, ky);
                for kx in 0..kp[2] {
                    let (x0, x1) = self.valid_range(2, kx);
                    if x0 >= x1 {
                        continue;
                    }
                    let tap = (kz * kp[1] + ky) * kp[2] + kx;
                    for oz in z0..z1 {
                        let iz = self.input_index(0, oz, kz);
                        for oy in y0..y1 {
                            let iy = self.input_index(1, oy, ky);
                            let out_row = (oz * op[1] + oy) * op[2];
                            let in_row = (iz * ip[1] + iy) * ip[2];
                            let ix0 = self.input_index(2, x0, kx);
                            visit(tap, out_row + x0, in_row + ix0, x1 - x0);
                        }
                    }
                }
            }
        }
    }
}

/// Forward cross-correlation on raw row-major buffers. `out` is overwritten.
pub fn conv_forward_raw<T>(input: &[T], kernel: &[T], geom: &ConvGeometry, out: &mut [T])
where
    T: Float + Send + Sync,
{
    let in_plane = ConvGeometry::plane(&geom.input);
    let k_plane = ConvGeometry::plane(&geom.kernel);
    let out_plane = ConvGeometry::plane(&geom.output);
    let (cin_g, cout_g) = (geom.cin_per_group(), geom.cout_per_group());
    let sx = geom.stride[2];

    out.par_chunks_mut(out_plane)
        .enumerate()
        .for_each(|(idx, plane)| {
            let (b, oc) = (idx / geom.channels_out, idx % geom.channels_out);
            let g = oc / cout_g;
            plane.fill(T::zero());
            for ic in 0..cin_g {
                let x = &input[(b * geom.channels_in + g * cin_g + ic) * in_plane..][..in_plane];
                let k = &kernel[(oc * cin_g + ic) * k_plane..][..k_plane];
                geom.for_each_tap(|tap, o, i, len| {
                    let kv = k[tap];
                    let dst = &mut plane[o..o + len];
                    if sx == 1 {
                        for (d, &v) in dst.iter_mut().zip(&x[i..i + len]) {
                            *d = *d + kv * v;
                        }
                    } else {
                        for (j, d) in dst.iter_mut().enumerate() {
                            *d = *d + kv * x[i + j * sx];
                        }
                    }
                });
            }
        });
}

/// `dloss/dkernel` given `dloss/doutput`, on raw buffers. `out` is overwritten.
pub fn conv_weight_grad_raw<T>(input: &[T], upstream: &[T], geom: &ConvGeometry, out: &mut [T])
where
    T: Float + Send + Sync,
{
    let in_plane = ConvGeometry::plane(&geom.input);
    let k_plane = ConvGeometry::plane(&geom.kernel);
    let out_plane = ConvGeometry::plane(&geom.output);
    let (cin_g, cout_g) = (geom.cin_per_group(), geom.cout_per_group());
    let sx = geom.stride[2];

    out.par_chunks_mut(k_plane)
        .enumerate()
        .for_each(|(idx, kslice)| {
            let (oc, ic) = (idx / cin_g, idx % cin_g);
            let g = oc / cout_g;
            kslice.fill(T::zero());
            for b in 0..geom.batch {
                let x = &input[(b * geom.channels_in + g * cin_g + ic) * in_plane..][..in_plane];
                let gy = &upstream[(b * geom.channels_out + oc) * out_plane..][..out_plane];
                geom.for_each_tap(|tap, o, i, len| {
                    let mut acc = T::zero();
                    for j in 0..len {
                        acc = acc + gy[o + j] * x[i + j * sx];
                    }
                    kslice[tap] = kslice[tap] + acc;
                });
            }
        });
}

/// `dloss/dinput` given `dloss/doutput`, on raw buffers. `out` is overwritten.
pub fn conv_input_grad_raw<T>(kernel: &[T], upstream: &[T], geom: &ConvGeometry, out: &mut [T])
where
    T: Float + Send + Sync,
{
    let in_plane = ConvGeometry::plane(&geom.input);
    let k_plane = ConvGeometry::plane(&geom.kernel);
    let out_plane = ConvGeometry::plane(&geom.output);
    let (cin_g, cout_g) = (geom.cin_per_group(), geom.cout_per_group());
    let sx = geom.stride[2];

    // one task per (batch, group): the group's input channels are contiguous
    out.par_chunks_mut(cin_g * in_plane)
        .enumerate()
        .for_each(|(idx, dx)| {
            let (b, g) = (idx / geom.groups, idx % geom.groups);
            dx.fill(T::zero());
            for oc in g * cout_g..(g + 1) * cout_g {
                let gy = &upstream[(b * geom.channels_out + oc) * out_plane..][..out_plane];
                for ic in 0..cin_g {
                    let k = &kernel[(oc * cin_g + ic) * k_plane..][..k_plane];
                    let plane = &mut dx[ic * in_plane..][..in_plane];
                    geom.for_each_tap(|tap, o, i, len| {
                        let kv = k[tap];
                        for j in 0..len {
                            plane[i + j * sx] = plane[i + j * sx] + kv * gy[o + j];
                        }
                    });
                }
            }
        });
}

fn contiguous(a: &ArrayD<f64>) -> std::borrow::Cow<'_, [f64]> {
    match a.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(a.iter().copied().collect()),
    }
}

/// Cross-correlation of `input` with a dense kernel (no kernel flip, zero padding).
pub fn conv_direct(
    input: &FeatureMap,
    kernel: &DenseKernel,
    cfg: &ConvConfig,
) -> Result<FeatureMap> {
    let geom = ConvGeometry::new(input.shape(), kernel.0.shape(), cfg)?;
    let shape = geom.output_shape();
    let mut out = vec![0.0; shape.iter().product()];
    conv_forward_raw(
        &contiguous(&input.0),
        &contiguous(&kernel.0),
        &geom,
        &mut out,
    );
    Ok(FeatureMap(
        ArrayD::from_shape_vec(IxDyn(&shape), out).expect("output shape"),
    ))
}

/// Gradient of the loss with respect to the kernel (the convolution weight adjoint).
pub fn conv_weight_grad(
    input: &FeatureMap,
    upstream: &FeatureMap,
    kernel_shape: &[usize],
    cfg: &ConvConfig,
) -> Result<UpstreamGrad> {
    let geom = ConvGeometry::new(input.shape(), kernel_shape, cfg)?;
    check_upstream(&geom, upstream)?;
    let mut out = vec![0.0; kernel_shape.iter().product()];
    conv_weight_grad_raw(
        &contiguous(&input.0),
        &contiguous(&upstream.0),
        &geom,
        &mut out,
    );
    Ok(UpstreamGrad(
        ArrayD::from_shape_vec(IxDyn(kernel_shape), out).expect("kernel shape"),
    ))
}

/// Gradient of the loss with respect to the input (the convolution input adjoint).
pub fn conv_input_grad(
    kernel: &DenseKernel,
    upstream: &FeatureMap,
    input_shape: &[usize],
    cfg: &ConvConfig,
) -> Result<FeatureMap> {
    let geom = ConvGeometry::new(input_shape, kernel.0.shape(), cfg)?;
    check_upstream(&geom, upstream)?;
    let mut out = vec![0.0; input_shape.iter().product()];
    conv_input_grad_raw(
        &contiguous(&kernel.0),
        &contiguous(&upstream.0),
        &geom,
        &mut out,
    );
    Ok(FeatureMap(
        ArrayD::from_shape_vec(IxDyn(input_shape), out).expect("input shape"),
    ))
}

fn check_upstream(geom: &ConvGeometry, upstream: &FeatureMap) -> Result<()> {
    let expected = geom.output_shape();
    if upstream.shape() != expected.as_slice() {
        return Err(DclsError::ShapeMismatch {
            what: "output gradient",
            expected,
            actual: upstream.shape().to_vec(),
        });
    }
    Ok(())
}

/// Classical dilated convolution: the small kernel's taps sit on a regular grid of spacing `cfg.dilation`.
pub fn dilated_conv_baseline(
    input: &FeatureMap,
    weights: &DenseKernel,
    cfg: &ConvConfig,
) -> Result<FeatureMap> {
    conv_direct(input, weights, cfg)
}

/// Everything [`dcls_conv_backward`] needs from the forward call.
#[derive(Clone, Debug)]
pub struct DclsContext {
    pub input: FeatureMap,
    pub kernel: DenseKernel,
    pub weights: WeightTensor,
    pub positions: PositionTensor,
    pub spec: KernelSpec,
    pub cfg: ConvConfig,
    pub output_shape: Vec<usize>,
    /// Parameter version of the owning layer at forward time, if any.
    pub version: Option<u64>,
}

fn check_dcls_config(spec: &KernelSpec, cfg: &ConvConfig) -> Result<()> {
    if cfg.ndims() != spec.ndims {
        return Err(DclsError::Geometry {
            axis: 0,
            reason: format!(
                "config has {} axes, kernel spec has {}",
                cfg.ndims(),
                spec.ndims
            ),
        });
    }
    if let Some(axis) = cfg.dilation.iter().position(|&d| d != 1) {
        return Err(DclsError::Geometry {
            axis,
            reason: "the DCLS path learns its spacing; dilation must be 1".into(),
        });
    }
    if cfg.groups != spec.groups {
        return Err(DclsError::Geometry {
            axis: 0,
            reason: format!(
                "config groups {} differ from kernel spec groups {}",
                cfg.groups, spec.groups
            ),
        });
    }
    Ok(())
}

/// Construct the kernel, then convolve with it.
pub fn dcls_conv_forward(
    input: &FeatureMap,
    weights: &WeightTensor,
    positions: &PositionTensor,
    spec: &KernelSpec,
    cfg: &ConvConfig,
) -> Result<(FeatureMap, DclsContext)> {
    check_dcls_config(spec, cfg)?;
    let kernel = construct_forward(weights, positions, spec)?;
    let output = conv_direct(input, &kernel, cfg)?;
    let context = DclsContext {
        input: input.clone(),
        kernel,
        weights: weights.clone(),
        positions: positions.clone(),
        spec: spec.clone(),
        cfg: cfg.clone(),
        output_shape: output.shape().to_vec(),
        version: None,
    };
    Ok((output, context))
}

/// Returns `(dloss/dinput, parameter gradients)`.
pub fn dcls_conv_backward(
    context: &DclsContext,
    upstream: &FeatureMap,
) -> Result<(FeatureMap, GradBundle)> {
    let grads = dcls_conv_param_grads(context, upstream)?;
    let d_input = conv_input_grad(
        &context.kernel,
        upstream,
        context.input.shape(),
        &context.cfg,
    )?;
    Ok((d_input, grads))
}

/// Parameter gradients only, skipping the input adjoint.
pub fn dcls_conv_param_grads(context: &DclsContext, upstream: &FeatureMap) -> Result<GradBundle> {
    if upstream.shape() != context.output_shape.as_slice() {
        return Err(DclsError::StaleContext(format!(
            "output gradient has shape {:?}, forward produced {:?}",
            upstream.shape(),
            context.output_shape
        )));
    }
    let d_kernel = conv_weight_grad(
        &context.input,
        upstream,
        &context.spec.kernel_shape(),
        &context.cfg,
    )?;
    construct_backward(
        &d_kernel,
        &context.weights,
        &context.positions,
        &context.spec,
    )
}
