//! Minimal differentiable building blocks with hand-written reverse passes.

pub mod descriptor;
pub mod edgeconv;
pub mod gradcheck;
pub mod matrix;
pub mod mlp;
pub mod optim;
pub mod params;
pub mod pointnet;

pub use descriptor::{patch_descriptor, DescriptorNet};
pub use edgeconv::{edgeconv, EdgeConv, Graph};
pub use gradcheck::{grad_check, grad_check_input};
pub use matrix::FeatureMatrix;
pub use mlp::{mlp_backward, mlp_forward, Linear, Mlp, MlpArch};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind, TrainOutcome};
pub use params::{ParamStore, Tensor, CHECKPOINT_MAGIC};
pub use pointnet::{pointnet_encode, PointNetEncoder};
