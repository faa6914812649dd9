//! Numeric pooling and loss kernels with analytic gradients.
//!
//! All kernels are pure f64 functions. Gradients are exposed as
//! vector-Jacobian products (caller supplies the upstream cotangent) so
//! they can be verified against central finite differences.

mod loss;
mod pooling;

pub use loss::{
    loss_aam, loss_circle, loss_sc_aam, loss_softmax_ce, CircleGrads, LossParams,
};
pub use pooling::{
    pool_asp, pool_asp_vjp, pool_mhap, pool_mhap_vjp, pool_sap, pool_sap_vjp, pool_sp,
    pool_sp_vjp, pool_tap, pool_tap_vjp, AttentionGrads, FrameMatrix, PoolingParams,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("frame matrix must have T >= 1 and d >= 1 with finite entries")]
    InvalidFrameMatrix,
    #[error("pooling params have wrong shape or non-finite entries")]
    InvalidPoolingParams,
    #[error("channel count {dim} is not divisible by head count {heads}")]
    HeadMismatch { dim: usize, heads: usize },
    #[error("class index {index} out of range for {classes} classes")]
    ClassIndexOutOfRange { index: usize, classes: usize },
    #[error("at least 2 classes required, got {0}")]
    TooFewClasses(usize),
    #[error("sub-center count must be >= 1")]
    NoSubcenters,
    #[error("similarity sets must both be non-empty")]
    EmptySimilaritySet,
    #[error("invalid loss params: {0}")]
    InvalidLossParams(&'static str),
}

/// Variance floor inside std sqrt; keeps gradients finite at zero variance.
pub(crate) const STD_EPS: f64 = 1e-10;
