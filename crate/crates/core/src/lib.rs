pub mod agent;
pub mod backbone;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod error;
pub mod expert;
pub mod inference;
pub mod nn;
pub mod numerics;
pub mod pipeline;
pub mod router;
pub mod templates;
pub mod text2comp;
pub mod tokenizer;

pub use error::{PiernError, Result};
