//! Speaker verification backend toolkit.
//!
//! Turns precomputed segment-level speaker embeddings into trial scores,
//! applies score normalization, calibration and multi-system fusion, and
//! computes detection metrics (EER, minDCF, Cllr, DET points). Also ships
//! numeric pooling-layer and margin-loss kernels with analytic gradients,
//! plus seed-driven data augmentation transforms.

pub mod augment;
pub mod calib;
pub mod corpus_io;
pub mod kernels;
pub mod metrics;
pub mod scoring;
