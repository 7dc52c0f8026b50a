//! Context-aware motion prediction for humans and objects sharing a scene.
//!
//! The crate is organised around a small reverse-mode autodiff tape
//! ([`tensor`]), a scene/data layer ([`data`]), the graph context branch
//! ([`graph`]), the recurrent predictor ([`model`]), training ([`train`]),
//! synthetic scene generation ([`synth`]) and evaluation ([`eval`]).

pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
