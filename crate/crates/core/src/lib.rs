//! Temporal pyramid routing over per-frame feature pyramids.
//!
//! A query frame's pyramid is aligned against a reference frame's pyramid
//! scale by scale (deformable sampling, inner and outer gates), then the
//! result is redistributed across scales by a gated routing space. Gates
//! produce exact zeros, so inference skips gated-off work through masked
//! convolution, and a budget loss charges the compute the gates leave open.

pub mod budget;
pub mod cpr;
pub mod dacr;
pub mod error;
pub mod gate;
pub mod gradcheck;
pub mod gradsuite;
pub mod kernels;
pub mod params;
pub mod pyramid;
pub mod tape;
pub mod tensor;
pub mod tracker;

pub use error::{Result, TprError};
pub use params::{Init, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
