pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod plot;
pub mod scalar;
pub mod tensor;
pub mod tsne;

pub use error::{Error, Result};

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape64 = autodiff::Tape<f64>;
pub type MiniResNet64 = nn::MiniResNetParams<f64>;
