//! Scalar abstraction over the two supported floating-point precisions.
//!
//! Every numerical routine in this crate is generic over [`Scalar`] so the
//! same control flow runs in 32-bit and 64-bit mode. Tolerances that guard
//! factorization pivots scale with the precision, not with an absolute
//! constant, since single-precision operation is a supported configuration
//! rather than a degraded one.

use num_traits::{Float, FromPrimitive, NumAssignOps};
use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssignOps
    + Sum
    + Debug
    + Display
    + LowerExp
    + Default
    + Send
    + Sync
    + 'static
{
    /// Relative pivot/rank tolerance for factorizations in this precision.
    const PIVOT_TOL: f64;

    /// Machine epsilon as f64 for tolerance arithmetic.
    const EPS: f64;

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 conversion")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("to_f64")
    }
}

impl Scalar for f32 {
    const PIVOT_TOL: f64 = 1e-6;
    const EPS: f64 = f32::EPSILON as f64;
}

impl Scalar for f64 {
    const PIVOT_TOL: f64 = 1e-12;
    const EPS: f64 = f64::EPSILON;
}

/// Which precision a run executes in; used by configuration and CSV output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn label(self) -> &'static str {
        match self {
            Precision::Single => "single",
            Precision::Double => "double",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" | "f32" | "float" => Ok(Precision::Single),
            "double" | "f64" => Ok(Precision::Double),
            other => Err(format!("unknown precision '{other}'")),
        }
    }
}
