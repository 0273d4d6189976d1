//! Feed-forward networks with reverse-mode gradients for parameters and inputs.

pub mod activation;
pub mod loss;
pub mod model;
pub mod network;
pub mod params;
pub mod spec;

pub use activation::Activation;
pub use loss::CrossEntropy;
pub use model::{InputGrad, Model};
pub use network::{Forward, LossGrads, Mode, Network};
pub use params::{Direction, ParamEntry, ParamVector, Role};
pub use spec::{InputNorm, LayerSpec, NetworkSpec};
