pub mod adapter;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod feedback;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod raster;
pub mod sampler;
pub mod text;
pub mod tokenizer;

pub use error::{Error, Result};
