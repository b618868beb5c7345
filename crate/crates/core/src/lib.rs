//! Graph matching based collaborative filtering.
//!
//! Users and items are turned into complete graphs over their attribute
//! value pairs. Attribute pairs inside one graph interact through an MLP
//! (message passing), pairs across the two graphs through an element-wise
//! product (node matching), a GRU fuses both signals per node, and the
//! prediction is the dot product of the two summed graph representations.

pub mod autodiff;
pub mod checks;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod io;
pub mod model;
pub mod synth;
pub mod training;
pub mod variants;

pub use error::{GmcfError, Result};
