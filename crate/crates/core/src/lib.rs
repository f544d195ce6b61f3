//! Steady compressible power-law and Herschel–Bulkley flow: a regularized
//! solver hierarchy on structured grids plus the numerical checks that go
//! with it.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod constitutive;
pub mod continuity;
pub mod error;
pub mod fields;
pub mod linalg;
pub mod momentum;
pub mod outer;

pub use error::{Error, Result};
