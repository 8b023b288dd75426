//! Numerical laboratory for N-player Nash systems, mean field games with
//! local and mollified couplings, and their particle approximations on the
//! periodic torus.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod coupling;
pub mod error;
pub mod grid;
pub mod harness;
pub mod measures;
pub mod mfg;
pub mod nash;
pub mod particles;
pub mod pde;
pub mod spectral;
pub use error::{Error, Result};
