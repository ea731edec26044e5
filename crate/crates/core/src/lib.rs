//! Dynamically slimmable DEMUCS speech enhancement.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]), the
//! slimmable building blocks ([`layers`]), the full backbone
//! ([`backbone`]), the routing subnet ([`router`]), training objectives
//! ([`losses`]), quality and compute metrics ([`metrics`]), desk-scale data
//! tooling ([`data`]), the two-stage trainer ([`training`]) and evaluation
//! ([`eval`]).

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod router;
pub mod tensor;
pub mod training;

pub use backbone::{Demucs, ModelConfig, Widths};
pub use error::{Error, Result};
pub use layers::UtilizationSet;
pub use router::{RouterConfig, RoutingTrace};
