pub mod autograd;
pub mod error;
pub mod params;
pub mod real;
pub mod tensor;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamId, Params};
pub use real::Real;
pub use tensor::Tensor;
pub mod datamodel;
pub mod protocols;
pub mod nn;
pub mod losses;
pub mod train;
