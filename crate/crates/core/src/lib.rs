// `!(x > 0.0)` is the idiom for "not positive, or NaN"; the suggested
// partial_cmp rewrite hides that. Oracles index several arrays in lockstep.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod label_graph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod run;
pub mod tensor;
pub mod train;

pub use autodiff::{PoolKind, Tape, Var};
pub use error::{Error, Result};
pub use params::{Bound, Grads, ParamId, ParamStore};
pub use tensor::Tensor;
