//! Temporal answering grounding: locate the video span answering a question
//! by predicting a subtitle text span, guided by a visual prompt token
//! distilled from frame-level highlight scores.

pub mod certify;
pub mod config;
pub mod corpus;
pub mod crossmodal;
pub mod error;
pub mod eval;
pub mod highlight;
pub mod model;
pub mod selection;
pub mod spanpred;
pub mod trainer;

pub use config::{DecodeMode, TrainConfig};
pub use error::{CoreError, Result};
