pub mod attention;
pub mod bench;
pub mod datagen;
pub mod error;
pub mod indexer;
pub mod numerics;
pub mod sparsity;
pub mod theory;
pub mod vsaggregate;

pub use error::{Error, Result};
