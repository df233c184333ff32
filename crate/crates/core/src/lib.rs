//! Contextual explanations for max-pooled multi-instance tile classifiers,
//! evaluated on synthetic whole-slide data.
//!
//! Modules follow the data flow: [`synthdata`] generates slides and tiles,
//! [`nets`] trains the tile classifier and segmentation model on top of the
//! [`tensor`] engine, [`xai`] turns layer taps into normalized heatmaps,
//! [`metrics`] scores them, and [`harness`] runs the experiments end to end.

pub mod error;
pub mod harness;
pub mod metrics;
pub mod nets;
pub mod synthdata;
pub mod tensor;
pub mod xai;

pub use error::{Error, Result};
