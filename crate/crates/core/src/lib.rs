//! Steerable stereo depth estimation at desk scale.
//!
//! A pixel in front of a see-through surface has more than one plausible
//! depth. This crate treats that ambiguity as something the caller controls:
//! a tiny stereo matcher is conditioned on a scalar preference `c` in `[0,1]`
//! (0 = nearest surface, 1 = farthest) and trained so that sweeping `c`
//! walks the prediction across the layer set.
//!
//! The pieces:
//!
//! - [`autograd`] — a minimal reverse-mode differentiation engine (f64
//!   throughout) with an Adam/SGD optimizer, a binary checkpoint format,
//!   and a finite-difference gradient checker.
//! - [`scenegen`] — a procedural renderer for two-layer stereo scenes
//!   (opaque background plus an optional semi-transparent plate) with exact
//!   per-layer ground truth.
//! - [`condmod`] — the two conditional computation primitives: a two-expert
//!   conditional mixture-of-experts and a gated direct condition injection,
//!   plus the sinusoidal condition embedding both consume.
//! - [`stereonet`] — the matcher itself: conv encoder, correlation cost
//!   volume, condition-modulated fusion, soft-argmax readout, and an
//!   iterative conditional refinement loop.
//! - [`supervise`] — condition-aware supervision: reference-disparity
//!   targets, nearest-layer selection, layer-consistency masking, the mixed
//!   `c` sampling strategy, and the composite loss.
//! - [`evaluate`] — EPE / Bad-τ metrics over region partitions and the
//!   determinism / monotonicity / diversity property checks.
//! - [`train`] — the deterministic single-threaded training loop.
//!
//! Dataset generation and evaluation are data-parallel across samples; the
//! `parallel` feature (on by default) backs them with rayon, and disabling
//! it falls back to sequential code with identical results.

pub mod autograd;
pub mod condmod;
pub mod evaluate;
pub mod parallel;
pub mod scenegen;
pub mod stereonet;
pub mod supervise;
pub mod train;

mod error;
mod rng;

pub use error::{Error, Result};
pub use rng::derive_seed;
