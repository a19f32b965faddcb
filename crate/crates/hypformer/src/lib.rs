//! Hyperbolic transformer library on the Lorentz model.
//!
//! Layers, attention, and the full encoder operate directly on the
//! hyperboloid: points carry a time-like coordinate recomputed after every
//! transformation so the curvature constraint holds exactly. Two attention
//! mechanisms are provided -- quadratic softmax attention driven by
//! hyperbolic distance, and a linear-complexity attention that reorders the
//! space-like products -- plus a small reverse-mode autodiff engine, graph
//! utilities, and a training loop.

pub mod autodiff;
pub mod error;

pub mod geometry;

pub mod blocks;

pub mod attention;

pub mod data;

pub mod model;

pub use error::{Error, Result};
