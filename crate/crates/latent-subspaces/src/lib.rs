//! Orthogonal decomposition of a latent space into attribute subspaces, with editing
//! and disentanglement evaluation against a synthetic generator world.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod editing;
pub mod error;
pub mod evaluation;
pub mod persist;
pub mod schema;
pub mod subspace;
pub mod training;
pub mod world;

pub use error::{Error, Result};
pub use schema::{AttrKind, AttributeSchema};
pub use subspace::BasisMatrix;
pub use training::{train, Hyperparams, TrainedModel};
pub use world::{make_world, Dataset, World, WorldConfig};
