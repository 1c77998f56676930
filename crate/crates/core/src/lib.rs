//! Block-coordinate geometric median descent (BGmD) and baseline robust
//! aggregators, with a corruption-injection training simulator.

pub mod error;
pub mod aggregate;
pub mod compress;
pub mod corrupt;
pub mod engine;
pub mod gm;
pub mod linalg;
pub mod memory;
pub mod record;
pub mod rng;
pub mod tasks;
pub mod timing;

pub use error::{Error, Result};
pub use linalg::{frobenius_norm_sq, row_mean, GradMatrix, ParamVector};
pub use record::RunRecord;
pub use rng::{RngStream, StreamId};
