//! Desk-scale computational toolkit for multiscale density analysis of
//! discrete measures.
//!
//! The crate realizes, with exact oracles wherever the arithmetic allows:
//! density square functions and their smooth variants, β/α flatness
//! coefficients, Menger curvature and the truncated Cauchy transform, a
//! David–Mattila-style dyadic lattice, stopping-time corona decompositions,
//! and the iterative approximating-curve construction with its transplanted
//! measures ν^k and pushforwards σ^k.

pub mod corona;
pub mod curvature;
pub mod curve;
pub mod density;
pub mod error;
pub mod flatness;
pub mod lattice;
pub mod measure;

pub use error::{Error, Result};
