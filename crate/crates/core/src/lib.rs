//! Representation dissimilarity for small residual networks.
//!
//! - [`store`]: the on-disk activation format and row conventions
//! - [`kernel`]: gram matrices, unbiased HSIC and batched CKA
//! - [`metric`]: arccos-CKA distances, clustering and block detection
//! - [`nn`]: a tiny attention-free residual network with exact gradients
//! - [`stitch`]: stitched models and their training
//! - [`toy`]: synthetic tasks and model populations

pub mod error;
pub mod kernel;
pub mod metric;
pub mod nn;
pub mod stitch;
pub mod store;
pub mod toy;

pub use error::{Error, Result};
