//! World models, latent actor-critic and replay for the Hidden Order lab.
//!
//! The crate is built on a small reverse-mode autodiff tape over `f64`
//! tensors ([`graph`]). On top of it sit the grouped categorical latent
//! machinery ([`categorical`]), the transformer state-space model ([`tssm`])
//! and its recurrent baseline ([`rssm`]), the imagination-trained
//! actor-critic ([`agent`]) and the episodic replay buffer ([`replay`]).

pub mod agent;
pub mod categorical;
pub mod checkpoint;
mod conv;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod replay;
pub mod rng;
pub mod rssm;
pub mod tensor;
pub mod transformer;
pub mod tssm;
pub mod world_model;

pub use error::{Error, Result};
pub use graph::{Bound, Grads, Graph, SampleMode, Var};
pub use params::{ParamId, ParamSet};
pub use tensor::Tensor;
