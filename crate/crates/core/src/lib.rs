#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod cli;
pub mod conformal;
pub mod energy;
pub mod error;
pub mod dynamics;
pub mod excitation;
pub mod io;
pub mod neuralcore;
pub mod operator;
pub mod par;
pub mod reliability;
pub mod rng;

pub use error::{Error, Result};
