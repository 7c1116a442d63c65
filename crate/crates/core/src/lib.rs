//! Dilated convolution with learnable spacings (DCLS).
//!
//! A DCLS kernel holds a few weighted elements at real-valued positions
//! inside a larger window. The dense kernel is built by spreading each weight
//! over the neighbouring grid cells with multilinear interpolation, which makes
//! the kernel differentiable in the positions. The dense kernel is then used
//! by an ordinary convolution.
//!
//! * [`grid`]: kernel geometry and the floor/fraction split
//! * [`construct`]: kernel construction and its backward pass
//! * [`conv`]: direct convolution engine, dilated baseline and the full DCLS path
//! * [`training`]: position-learning toolkit and a teacher/student toy run
//! * [`diagnostics`]: gradient checking, histograms, speed, receptive fields, timing
//! * [`model_file`]: on-disk model format

pub mod assign;
pub mod construct;
pub mod conv;
pub mod diagnostics;
pub mod error;
pub mod grid;
pub mod layer;
pub mod model_file;
pub mod parallel;
pub mod training;

pub use construct::{
    construct_backward, construct_forward, construct_forward_with, Accumulation, DenseKernel,
    GradBundle, UpstreamGrad,
};
pub use conv::{
    conv_direct, conv_input_grad, conv_weight_grad, dcls_conv_backward, dcls_conv_forward,
    dcls_conv_param_grads, dilated_conv_baseline, ConvConfig, DclsContext, FeatureMap,
};
pub use error::{DclsError, Result};
pub use grid::{
    to_absolute, to_centered, InterpolationStencil, KernelSpec, PositionTensor, WeightTensor,
};
pub use layer::{DclsLayer, FixedConv, Layer, Sequential};
pub use model_file::{ModelFile, StoredLayer};
pub use training::{train_toy, TrainConfig, TrainReport};
