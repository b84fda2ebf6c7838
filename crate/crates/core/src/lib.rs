//! Square-root-covariance visual-inertial estimation toolkit.
//!
//! The estimator tracks an upper-triangular factor `U` with `U^T U = P`
//! instead of the covariance `P` itself, using a Cholesky-based measurement
//! update that preserves the triangular structure. On top of the filter
//! kernels sit IMU preintegration, sliding-window camera measurement
//! processing, a feature-less dynamic initializer, a synthetic-world Monte
//! Carlo harness and ASL-style dataset ingestion.
//!
//! All numerical code is generic over the scalar type ([`scalar::Scalar`]),
//! instantiable in `f32` and `f64` with identical control flow.

pub mod chi2;
pub mod dataset;
pub mod dense;
pub mod error;
pub mod flops;
pub mod geom;
pub mod imu;
pub mod init;
pub mod mat;
pub mod scalar;
pub mod sim;
pub mod srf;
pub mod tri;
pub mod vio;
pub mod vision;

pub use error::{DatasetError, ImuError, InitError, KernelError, SrfError, VisionError};
pub use scalar::{Precision, Scalar};

/// Concrete precision aliases for the workhorse types.
pub type MatF32 = mat::Mat<f32>;
pub type MatF64 = mat::Mat<f64>;
pub type SqrtStateF32 = srf::SqrtState<f32>;
pub type SqrtStateF64 = srf::SqrtState<f64>;
