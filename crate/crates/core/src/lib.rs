//! Numerical laboratory for Chern-curvature algebra, positivity cones and the
//! Hermitian curvature flow on complex tori.

// index loops mirror the tensor formulas; `!(x > 0.0)` also rejects NaN
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod algebra;
pub mod cones;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod hcf;
pub mod linalg;
pub mod ode;
pub mod random;
pub mod tensor;

pub use algebra::{CurvatureOperator, Endo, EndoSpace, HermitianMetric, IndexedCurvature};
pub use error::{Error, Result};
