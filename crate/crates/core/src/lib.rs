#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod game;
pub mod grid;
pub mod kernel;
pub mod measures;
pub mod model;
pub mod optimizer;
pub mod payoff;
pub mod scenario;
pub mod solver;

pub use error::{Error, Result};
pub use grid::{Field, Grid};
