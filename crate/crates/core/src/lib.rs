//! Single-stream image-text product embedding model.
//!
//! The crate covers the whole pipeline: a synthetic product catalog, BPE
//! title tokenization, image patching, masked pretraining with five
//! objectives (image-text matching, masked token and patch reconstruction
//! from local states, and the same reconstructions from the global `[CLS]`
//! state), leaf-category fine-tuning, and exact embedding retrieval with
//! recall / precision / accuracy metrics.

pub mod data_synth;
pub mod error;
pub mod image;
pub mod masking;
pub mod model;
pub mod objectives;
pub mod retrieval;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod trainer;
pub mod verification;

pub use error::{Error, Result};

/// `path` with a `.partial` suffix; outputs are written there and renamed
/// into place once complete.
pub fn partial_path(path: &std::path::Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".partial");
    std::path::PathBuf::from(s)
}
