//! Mixture of low-rank experts whose router applies, per selected expert, a
//! scalar gate and a learned rotation inside the expert's rank-r space.
//!
//! The numeric core is generic over [`Scalar`] (`f32`/`f64`); the `*64`
//! aliases below fix the precision used by the trainer, the checks and the
//! command-line tool.

pub mod adapter;
pub mod analysis;
pub mod autograd;
pub mod error;
pub mod numkit;
pub mod rotation;
pub mod scalar;
pub mod synth;
pub mod trainer;

pub use adapter::{
    count_trainable_routing_params, mlp_hidden_dim, AdapterConfig, AdapterLayer, ForwardCache, GateMode,
    Gradients, ParamGroup, Params, RoutingDecision,
};
pub use autograd::{backward, finite_diff_grad, grad_check, CheckReport};
pub use error::{Error, Result};
pub use numkit::{kaiming_uniform, sigmoid, softmax, Matrix, Rng, Vector};
pub use rotation::{apply_rotation, build_plane, decompose_transform, rotation_matrix_2d, rotation_matrix_r, RotationPlane};
pub use scalar::Scalar;

pub type Matrix64 = Matrix<f64>;
pub type Vector64 = Vector<f64>;
pub type Layer64 = AdapterLayer<f64>;
pub type Gradients64 = Gradients<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Vector32 = Vector<f32>;
pub type Layer32 = AdapterLayer<f32>;
