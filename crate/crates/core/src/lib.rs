pub mod edg;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod tpf;

pub use error::{Error, ErrorKind, Result};
pub use tensor::{ParamId, ParamStore, Tape, Tensor, Var};
