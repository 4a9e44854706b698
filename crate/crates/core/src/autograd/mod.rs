//! Minimal reverse-mode differentiation engine.
//!
//! Define-by-run: every forward pass records a fresh [`Graph`] (a Wengert
//! list of [`Node`]s), and [`Graph::backward`] replays it in reverse.
//! Everything is `f64`; gradient checks at 1e-4 relative tolerance are not
//! reliable in single precision.
//!
//! A graph is single-threaded. Distinct graphs (distinct samples) share no
//! state and may run on distinct threads.

mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod params;

pub use checkpoint::{read_checkpoint, save_checkpoint, RawParam, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{finite_diff_check, relative_error, CheckEntry, CheckReport};
pub use graph::{Graph, Op, OpKind, TensorId, PUBLIC_OP_NAMES};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{ParamId, ParamSet, Parameter};
