//! Interpretable tensor fusion for multimodal learning.
//!
//! The crate trains small multimodal classifiers whose fusion layer holds
//! one weight block per modality or modality interaction. Block norms are
//! turned into disentangled relevance scores, and a generalized batch
//! normalization for interaction tensors keeps higher-order blocks from
//! absorbing lower-order signal. Verification routines numerically certify
//! the optimization identities and the normalization guarantees the method
//! relies on.

pub mod analysis;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod normalization;
pub mod synthdata;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Writes a file atomically: the content lands under a temporary name in
/// the same directory and is renamed into place.
pub fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| std::path::Path::new("."));
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    if !dir.as_os_str().is_empty() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
