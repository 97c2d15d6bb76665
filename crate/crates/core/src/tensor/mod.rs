//! Dense-network numerical core.

pub mod checkpoint;
mod loss;
mod matrix;
mod net;
mod params;

pub use loss::{softmax, softmax_cross_entropy};
pub use matrix::Matrix;
pub use net::{Activation, DenseNet, GradientSet, Layer};
pub use params::{FreezeMask, ParamBuffer, ParamTensor};
