//! Introspective decoding and cross-modal multi-agent verification for
//! hallucination mitigation, over a seeded toy multimodal decoder.

pub mod agents;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod introspection;
pub mod model;
pub mod numerics;
pub mod orchestrator;
pub mod par;
pub mod scene;
pub mod vocab;

pub use error::{Error, Result};
