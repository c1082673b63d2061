//! Incremental object detection lab for set-prediction detectors.
//!
//! The crate trains a small query-based detector over sequential phases of
//! new categories and compares three ways of keeping old categories alive:
//! pseudo labels alone, knowledge distillation through Hungarian-matched
//! teacher/student predictions, and index-aligned query distillation over a
//! thresholded set of proxy queries. Exemplar replay with label realignment
//! runs after each incremental stage.

pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod labels;
pub mod losses;
pub mod matcher;
pub mod par;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
