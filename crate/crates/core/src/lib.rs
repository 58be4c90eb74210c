//! Adversarial attacks on semantic segmentation.
//!
//! The engine couples a small hand-differentiated conv segmentation model with
//! PGD attacks driven by an APGD step-size controller. Objectives include the
//! Tsallis cross-entropy family, pixel-wise CE and the SegPGD, CosPGD, JS and
//! masked-CE baselines. Metrics, worst-case aggregation and row-wise ranking
//! turn attack outputs into benchmark reports.

pub mod attack;
pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod objectives;
pub mod report;
pub mod schedules;
pub mod segmodel;
pub mod tensor;
pub mod train;
pub mod tseg;

pub use error::{Error, Result};
