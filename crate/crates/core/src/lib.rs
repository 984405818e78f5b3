//! Retrieval-augmented dynamic prompting for classification with missing
//! modalities, on a small frozen multimodal transformer.

pub mod backbone;
pub mod data;
pub mod encoders;
pub mod error;
pub mod generator;
pub mod harness;
pub mod head;
pub mod memory;
pub mod model;
pub mod numerics;
pub mod prompter;
pub mod retriever;

pub use error::{Error, Result};
