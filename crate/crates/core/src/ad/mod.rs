//! Small dense reverse-mode autodiff in `f64`, with the layers the models use.

pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use nn::{dropout, fan_in_uniform, glorot, readout, Bound, GraphConv, Linear, NamedTensor, ParamId, ParamStore, Readout};
pub use optim::Adam;
pub use tape::{sigmoid, take_non_finite, watch_finite, Gradients, Tape, Var};
pub use tensor::Tensor;
