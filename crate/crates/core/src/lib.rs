//! Hidden-symmetry critical points and spurious minima of permutation-equivariant
//! two-layer networks: groups, permutation representations, equivariant
//! parameterizations, exact Gaussian-input losses, optimization, structural
//! reductions and the experiment pipelines built on them.

pub mod equiv;
pub mod error;
pub mod experiments;
pub mod group;
pub mod linalg;
pub mod loss;
pub mod optim;
pub mod prep;
pub mod reduce;
pub mod rng;

pub use error::{Error, Result};
