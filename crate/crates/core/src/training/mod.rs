//! Position-learning toolkit: initialisation, clamping, parameter groups,
//! position sharing, repulsion, and the teacher/student toy run.

pub mod init;
pub mod optim;
pub mod repulsive;
pub mod sync;
pub mod toy;

pub use init::{clamp_positions, init_positions, InitDist, INIT_STD};
pub use optim::{
    make_param_groups, CosineSchedule, GroupOverrides, MomentumSgd, ParamGroup, ParamKind,
    StepDelta, POSITION_LR_MULTIPLIER,
};
pub use repulsive::repulsive_loss;
pub use sync::SyncGroup;
pub use toy::{
    train_toy, train_toy_observed, MatchedTap, StepView, TeacherTap, TrainConfig, TrainReport,
};
