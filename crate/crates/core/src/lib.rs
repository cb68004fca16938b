//! Compressed change-detection maps built from binary local features.

pub mod bitpack;
pub mod classifier;
pub mod error;
pub mod eval;
pub mod feature;
pub mod map;
pub mod mining;
pub mod proposals;
pub mod ranking;
pub mod registration;
pub mod vocabulary;

pub use error::{Error, Result};
