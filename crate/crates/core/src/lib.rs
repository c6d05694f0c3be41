#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod conductor;
pub mod envsuite;
pub mod error;
pub mod grpo;
pub mod harness;
pub mod meta;
pub mod numerics;
pub mod optim;
pub mod rewards;
pub mod toy_lm;

pub use error::{Error, Result};
