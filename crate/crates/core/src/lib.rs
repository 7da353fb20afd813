//! Rough paths over Euclidean spaces and over Lipschitz manifolds described
//! by chart atlases: signatures, sewing, rough integrals and RDEs, and their
//! chart-local counterparts.

pub mod atlas;
pub mod calculus;
pub mod error;
pub mod expr;
pub mod integral;
pub mod lift;
pub mod lip;
pub mod mpath;
pub mod mrde;
pub mod rde;
pub mod tensor;

pub use error::{Error, Result};
