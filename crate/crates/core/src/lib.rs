//! Audio-visual speech enhancement with a multi-layer feature fusion
//! convolutional network, built on a small reverse-mode tensor engine.

pub mod dsp;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod model;
pub mod scalar;
pub mod shape;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Architecture, FusionStrategy, MffcnParams};
pub use scalar::Scalar;
pub use shape::{ConvSpec, Hw, ShapeTable};
pub use tape::{Activation, Gradients, NormMode, RunningStats, Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
