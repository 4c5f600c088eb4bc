//! Instruction-driven expressive 3D talking-face synthesis at desk scale.

pub mod autodiff;
pub mod av_instruction;
pub mod bridge;
pub mod checkpoint;
pub mod corpus;
pub mod diffusion;
pub mod error;
pub mod face_model;
pub mod metrics;
pub mod motion_prior;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod trainkit;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Mat;

/// Working precision for training and inference.
pub type Real = f32;
pub type Matrix = Mat<Real>;
pub type Template = face_model::HeadTemplate<f64>;
pub type Prior = motion_prior::MotionPrior<Real>;
pub type Alignment = av_instruction::AvAlign<Real>;
pub type InstructionLm = av_instruction::TinyLm<Real>;
pub type StyleBridge = bridge::Bridge<Real>;
pub type Sequence = face_model::CoeffSequence<Real>;

/// Double-precision variants, used by gradient checks.
pub mod wide {
    pub type Matrix = crate::Mat<f64>;
    pub type Prior = crate::motion_prior::MotionPrior<f64>;
    pub type Alignment = crate::av_instruction::AvAlign<f64>;
    pub type InstructionLm = crate::av_instruction::TinyLm<f64>;
    pub type StyleBridge = crate::bridge::Bridge<f64>;
}
