//! Speaker embedding networks (TDNN family, factorized TDNN, residual and
//! multitask variants) and the scoring back-end around them: LDA, length
//! normalization, PLDA with unsupervised adaptation, adaptive score
//! normalization, PAV calibration, linear fusion and detection metrics.

pub mod archive;
pub mod backend;
pub mod calibration;
pub mod embedder;
pub mod error;
pub mod features;
pub mod linalg;
pub mod models;
pub mod netspec;
pub mod pipeline;
pub mod scorenorm;
pub mod toy;

pub use error::{Error, ErrorClass, Result};
