pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod data;
pub mod error;
pub mod graph;
pub mod loss;
pub mod model;
pub mod norm;
pub mod optim;
pub mod params;
pub mod suites;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Mode, Var};
pub use params::{HeadId, Owner, Param, ParamId, ParamKind, ParamStore};
pub use tensor::{Scalar, Tensor};
