//! Layer-wise ensembling of a tappable backbone with a small task model.
//!
//! The crate is `no_std` (it needs `alloc`) and holds every numerical piece:
//! a reverse-mode autodiff [`graph`], the [`model`] zoo, training [`regime`]s,
//! [`data`] generators and the experiment [`harness`]. File formats, config
//! parsing and the command line live in the companion `levi-lab` crate.
#![no_std]

extern crate alloc;

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod graph;
pub mod model;
pub mod optim;
pub mod param;
pub mod regime;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, NodeId, OpKind};
pub use model::{HeadWeights, Model, Net};
pub use param::{Binding, ParamId, ParamStore};
pub use tensor::Tensor;
