//! Parameter groups, cosine schedule with warmup, and momentum SGD with
//! decoupled weight decay.

use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{DclsError, Result};

/// Learning-rate multiplier applied to positions by default.
pub const POSITION_LR_MULTIPLIER: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weights,
    Positions,
}

impl ParamKind {
    /// Classify a parameter by the last segment of its dotted name.
    pub fn classify(name: &str) -> Result<Self> {
        match name.rsplit('.').next().unwrap_or(name) {
            "weight" | "weights" | "W" => Ok(Self::Weights),
            "position" | "positions" | "P" => Ok(Self::Positions),
            _ => Err(DclsError::UnclassifiedParameter(name.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub kind: ParamKind,
    pub learning_rate_multiplier: f64,
    pub weight_decay: f64,
    pub members: Vec<String>,
}

/// Overrides for [`make_param_groups`]. `None` keeps the default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupOverrides {
    pub weight_decay: Option<f64>,
    pub weights_lr_multiplier: Option<f64>,
    pub positions_lr_multiplier: Option<f64>,
    pub positions_weight_decay: Option<f64>,
}

/// Split named parameters into a weights group and a positions group.
///
/// Positions get no weight decay and a 5x learning rate unless overridden;
/// weights get the base decay (default 0.05) and multiplier 1.
pub fn make_param_groups<'a>(
    names: impl IntoIterator<Item = &'a str>,
    overrides: &GroupOverrides,
) -> Result<Vec<ParamGroup>> {
    let mut weights = ParamGroup {
        kind: ParamKind::Weights,
        learning_rate_multiplier: overrides.weights_lr_multiplier.unwrap_or(1.0),
        weight_decay: overrides.weight_decay.unwrap_or(0.05),
        members: vec![],
    };
    let mut positions = ParamGroup {
        kind: ParamKind::Positions,
        learning_rate_multiplier: overrides
            .positions_lr_multiplier
            .unwrap_or(POSITION_LR_MULTIPLIER),
        weight_decay: overrides.positions_weight_decay.unwrap_or(0.0),
        members: vec![],
    };
    for name in names {
        match ParamKind::classify(name)? {
            ParamKind::Weights => weights.members.push(name.to_string()),
            ParamKind::Positions => positions.members.push(name.to_string()),
        }
    }
    for g in [&weights, &positions] {
        if g.weight_decay < 0.0 {
            return Err(DclsError::Precondition(format!(
                "negative weight decay for {:?}",
                g.kind
            )));
        }
    }
    Ok(vec![weights, positions])
}

/// Linear warmup followed by cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
        0.5 * self.base_lr * (1.0 + (PI * t).cos())
    }
}

/// The two parts of one parameter update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDelta {
    /// `-lr * velocity`
    pub gradient_term: Vec<f64>,
    /// `-lr * weight_decay * param`, identically zero for groups without decay.
    pub decay_term: Vec<f64>,
}

/// Momentum SGD with decoupled weight decay; velocity buffers keyed by parameter name.
#[derive(Clone, Debug)]
pub struct MomentumSgd {
    pub momentum: f64,
    velocity: HashMap<String, Vec<f64>>,
}

impl MomentumSgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: HashMap::new(),
        }
    }

    /// Update `params` in place with learning rate `base_lr * group multiplier`.
    pub fn step(
        &mut self,
        name: &str,
        group: &ParamGroup,
        base_lr: f64,
        params: &mut [f64],
        grads: &[f64],
    ) -> StepDelta {
        assert_eq!(params.len(), grads.len(), "gradient length for {name}");
        let lr = base_lr * group.learning_rate_multiplier;
        let velocity = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; params.len()]);
        let mut delta = StepDelta {
            gradient_term: Vec::with_capacity(params.len()),
            decay_term: Vec::with_capacity(params.len()),
        };
        for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
            *v = self.momentum * *v + g;
            let grad_term = -lr * *v;
            let decay = if group.weight_decay == 0.0 {
                0.0
            } else {
                -lr * group.weight_decay * *p
            };
            *p += grad_term + decay;
            delta.gradient_term.push(grad_term);
            delta.decay_term.push(decay);
        }
        delta
    }
}
