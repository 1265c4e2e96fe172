//! Reverse-mode automatic differentiation over the operation set used by
//! the template decoder, the registration network and the losses.
//!
//! A [`Graph`] is a tape: every builder method evaluates its operation
//! eagerly, records it, and returns a [`Var`] handle. [`Graph::backward`]
//! walks the tape in reverse from a scalar root. Learnable tensors live in a
//! [`ParamStore`] outside the graph; [`Graph::param`] copies a parameter in
//! as a leaf and [`Gradients::accumulate_into`] routes adjoints back.
//!
//! Builder methods panic on shape mismatches (contract violations); the
//! panic message names the offending node ids.

mod adam;
pub mod checkpoint;
mod conv;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::Adam;
pub use gradcheck::{relative_error, GradCheck, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
