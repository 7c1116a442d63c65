//! Position sharing across layers of identical geometry.

use ndarray::Array4;

use crate::error::{DclsError, Result};
use crate::grid::{check_shape, KernelSpec, PositionTensor};
use crate::layer::DclsLayer;

/// One position tensor shared by several layers that keep their own weights.
///
/// Each member submits its position gradient after its backward pass;
/// [`SyncGroup::sync_step`] sums them into the shared gradient used by the
/// optimizer.
#[derive(Clone, Debug)]
pub struct SyncGroup {
    spec: KernelSpec,
    positions: PositionTensor,
    pending: Vec<Option<Array4<f64>>>,
    shared_grad: PositionTensor,
}

impl SyncGroup {
    pub fn new(spec: KernelSpec, positions: PositionTensor, members: usize) -> Result<Self> {
        positions.check_shape(&spec)?;
        if members == 0 {
            return Err(DclsError::Precondition(
                "sync group needs at least one member".into(),
            ));
        }
        Ok(Self {
            shared_grad: PositionTensor::zeros(&spec),
            spec,
            positions,
            pending: vec![None; members],
        })
    }

    pub fn members(&self) -> usize {
        self.pending.len()
    }

    pub fn positions(&self) -> &PositionTensor {
        &self.positions
    }

    pub fn positions_mut(&mut self) -> &mut PositionTensor {
        &mut self.positions
    }

    pub fn shared_grad(&self) -> &PositionTensor {
        &self.shared_grad
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    /// Record member `member`'s position gradient for the current step.
    pub fn submit(&mut self, member: usize, grad: &PositionTensor) -> Result<()> {
        check_shape(
            "member position gradient",
            &self.spec.position_shape(),
            grad.0.shape(),
        )?;
        let slot = self.pending.get_mut(member).ok_or_else(|| {
            DclsError::Precondition(format!("member {member} is not part of this sync group"))
        })?;
        *slot = Some(grad.0.clone());
        Ok(())
    }

    /// Sum all submitted member gradients into the shared gradient and clear the submissions.
    ///
    /// Fails without modifying state if any member has not submitted.
    pub fn sync_step(&mut self) -> Result<&PositionTensor> {
        let missing: Vec<usize> = self
            .pending
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_none())
            .map(|(i, _)| i)
            .collect();
        if !missing.is_empty() {
            return Err(DclsError::MissingGradients(missing));
        }
        self.shared_grad.0.fill(0.0);
        for g in self.pending.iter_mut() {
            self.shared_grad.0 += &g.take().expect("checked above");
        }
        Ok(&self.shared_grad)
    }

    /// Copy the shared positions into every member layer.
    pub fn broadcast(&self, layers: &mut [&mut DclsLayer]) -> Result<()> {
        for layer in layers {
            layer.set_positions(self.positions.clone())?;
        }
        Ok(())
    }
}
