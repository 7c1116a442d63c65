//! Stateful layers built on the functional engine.

use crate::construct::{DenseKernel, GradBundle};
use crate::conv::{
    conv_direct, conv_input_grad, dcls_conv_backward, dcls_conv_forward, dcls_conv_param_grads,
    ConvConfig, DclsContext, FeatureMap,
};
use crate::error::{DclsError, Result};
use crate::grid::{KernelSpec, PositionTensor, WeightTensor};

/// A differentiable map from feature maps to feature maps.
pub trait Layer: Send + Sync {
    fn forward(&self, input: &FeatureMap) -> Result<FeatureMap>;

    /// `dloss/dinput` at `input` given `dloss/doutput`.
    fn backward_input(&self, input: &FeatureMap, upstream: &FeatureMap) -> Result<FeatureMap>;
}

/// A DCLS convolution layer owning its weights and positions.
#[derive(Clone, Debug)]
pub struct DclsLayer {
    pub spec: KernelSpec,
    pub cfg: ConvConfig,
    weights: WeightTensor,
    positions: PositionTensor,
    version: u64,
}

impl DclsLayer {
    pub fn new(
        spec: KernelSpec,
        cfg: ConvConfig,
        weights: WeightTensor,
        positions: PositionTensor,
    ) -> Result<Self> {
        spec.validate()?;
        weights.check_shape(&spec)?;
        positions.check_shape(&spec)?;
        Ok(Self {
            spec,
            cfg,
            weights,
            positions,
            version: 0,
        })
    }

    pub fn weights(&self) -> &WeightTensor {
        &self.weights
    }

    pub fn positions(&self) -> &PositionTensor {
        &self.positions
    }

    /// Mutable access to the parameters. Invalidates contexts from earlier forward calls.
    pub fn params_mut(&mut self) -> (&mut WeightTensor, &mut PositionTensor) {
        self.version += 1;
        (&mut self.weights, &mut self.positions)
    }

    pub fn set_positions(&mut self, positions: PositionTensor) -> Result<()> {
        positions.check_shape(&self.spec)?;
        self.version += 1;
        self.positions = positions;
        Ok(())
    }

    pub fn forward_with_context(&self, input: &FeatureMap) -> Result<(FeatureMap, DclsContext)> {
        let (out, mut ctx) =
            dcls_conv_forward(input, &self.weights, &self.positions, &self.spec, &self.cfg)?;
        ctx.version = Some(self.version);
        Ok((out, ctx))
    }

    fn check_context(&self, context: &DclsContext) -> Result<()> {
        if context.version != Some(self.version) {
            return Err(DclsError::StaleContext(format!(
                "context from parameter version {:?}, layer is at {}",
                context.version, self.version
            )));
        }
        Ok(())
    }

    pub fn backward(
        &self,
        context: &DclsContext,
        upstream: &FeatureMap,
    ) -> Result<(FeatureMap, GradBundle)> {
        self.check_context(context)?;
        dcls_conv_backward(context, upstream)
    }

    pub fn param_grads(&self, context: &DclsContext, upstream: &FeatureMap) -> Result<GradBundle> {
        self.check_context(context)?;
        dcls_conv_param_grads(context, upstream)
    }
}

impl Layer for DclsLayer {
    fn forward(&self, input: &FeatureMap) -> Result<FeatureMap> {
        Ok(self.forward_with_context(input)?.0)
    }

    fn backward_input(&self, input: &FeatureMap, upstream: &FeatureMap) -> Result<FeatureMap> {
        let (_, ctx) = self.forward_with_context(input)?;
        Ok(self.backward(&ctx, upstream)?.0)
    }
}

/// Convolution with a fixed dense kernel (standard or dilated).
#[derive(Clone, Debug)]
pub struct FixedConv {
    pub kernel: DenseKernel,
    pub cfg: ConvConfig,
}

impl Layer for FixedConv {
    fn forward(&self, input: &FeatureMap) -> Result<FeatureMap> {
        conv_direct(input, &self.kernel, &self.cfg)
    }

    fn backward_input(&self, input: &FeatureMap, upstream: &FeatureMap) -> Result<FeatureMap> {
        conv_input_grad(&self.kernel, upstream, input.shape(), &self.cfg)
    }
}

/// Layers applied in order.
#[derive(Default)]
pub struct Sequential(pub Vec<Box<dyn Layer>>);

impl Sequential {
    pub fn push(mut self, layer: impl Layer + 'static) -> Self {
        self.0.push(Box::new(layer));
        self
    }
}

impl Layer for Sequential {
    fn forward(&self, input: &FeatureMap) -> Result<FeatureMap> {
        let mut x = input.clone();
        for layer in &self.0 {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    fn backward_input(&self, input: &FeatureMap, upstream: &FeatureMap) -> Result<FeatureMap> {
        let mut activations = vec![input.clone()];
        for layer in &self.0[..self.0.len().saturating_sub(1)] {
            let next = layer.forward(activations.last().unwrap())?;
            activations.push(next);
        }
        let mut grad = upstream.clone();
        for (layer, x) in self.0.iter().zip(&activations).rev() {
            grad = layer.backward_input(x, &grad)?;
        }
        Ok(grad)
    }
}
