//! Self-annotated preference alignment for a from-scratch micro language
//! model.
//!
//! The crate trains a tiny decoder-only LM end to end: supervised
//! fine-tuning on synthetic sequence tasks, seed preference optimization,
//! then an iterative loop that samples response pairs, judges them with the
//! model's own implicit reward, refines suspect labels via confidence
//! flagging and logit extrapolation, and trains on the result. An
//! edit-distance oracle stands in for human gold labels and judge models.
//!
//! Modules map onto the moving parts:
//!
//! * [`pref`] — scalar preference algebra: implicit rewards, judgment,
//!   losses, flagging thresholds, logit extrapolation.
//! * [`lm`] — the micro LM: tokenizer, forward/backward, optimizer,
//!   sampler, checkpoints.
//! * [`pipeline`] — the iterative loop as an explicit state machine with
//!   run manifests.
//! * [`oracle`] — synthetic copy/reverse/sort tasks with a programmatic
//!   judge and win-rate reports.
//! * [`config`] / [`dataset`] — run configuration and line-delimited
//!   record files.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod lm;
pub mod oracle;
pub mod pipeline;
pub mod pref;
pub mod seeding;

pub use error::{Error, Result};
