//! Small dense and 1-D convolutional network toolkit with reverse-mode
//! differentiation and Adam.

pub mod gradcheck;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use graph::{Graph, Var, BCE_EPS};
pub use kernels::{
    conv1d, conv1d_backward, conv_transpose1d, conv_transpose1d_backward, linear, linear_backward, sigmoid, ConvSpec,
    PadMode,
};
pub use params::{
    kaiming_uniform, orthogonal, sidecar_path, AdamConfig, ParamId, ParamStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use tensor::Tensor;
