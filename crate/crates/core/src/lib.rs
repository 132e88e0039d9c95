//! Numerics for mesoscopic eigenvalue statistics of Wigner-type matrices:
//! variance profiles and sampling, the vector Dyson equation, the stability
//! operator and its saturated self-energy, the resolvent two-point function,
//! and the mesoscopic central limit theorem.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod clt;
pub mod dyson;
pub mod ensemble;
pub mod error;
pub mod linalg;
pub mod quad;
pub mod stability;
pub mod stats;
pub mod twopoint;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;
