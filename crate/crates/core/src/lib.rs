pub mod cfm;
pub mod codec;
pub mod container;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod field;
pub mod metrics;
pub mod nn;
pub mod ode;
pub mod par;
pub mod pipeline;
pub mod tensor;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor, Var};
