//! Multimodal dialogue response retrieval.
//!
//! Three ways of wiring a textual-context dual-encoder retriever that answers
//! with either a text or an image response:
//!
//! - **DR**: separately trained intent predictor, text retriever and image
//!   retriever, combined by gating on the predicted intent.
//! - **SDR**: the same gating, but one context encoder shared by all three
//!   subtasks and trained on the summed objective.
//! - **MDR**: no intent predictor; text and image responses are ranked in one
//!   joint embedding space.
//!
//! Everything runs on a small reverse-mode autodiff engine ([`autodiff`])
//! with desk-scale encoders ([`encoders`]), trained on topic-conditioned
//! synthetic dialogues ([`data`]) and scored with R@k over fixed candidate
//! pools ([`eval`]).

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod objectives;
pub mod params;
pub mod regimes;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
