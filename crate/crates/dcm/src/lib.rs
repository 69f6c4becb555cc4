//! Dynamic connection masking for classifier heads, with a desk-scale
//! noisy-label training lab around it.
//!
//! During training, each input node's outgoing classifier edges are scored
//! by the standard deviation of their activation across the batch, and the
//! lowest-scoring fraction is temporarily zeroed before the forward pass.
//! Masked weights keep their values and can be revived at the next interval;
//! test-time evaluation runs the full classifier. Both a plain MLP head and
//! a Kolmogorov-Arnold head (learnable B-spline edge functions) support the
//! mechanism, and a dual clean/noisy backward measures how much label noise
//! corrupts the backbone gradient.
//!
//! The numeric core (matrices, layer primitives, the tape, splines, masking
//! math) is generic over the scalar type; the experiment stack is pinned to
//! f64 via [`Real`].

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod instrument;
pub mod masking;
pub mod matrix;
pub mod model;
pub mod noise;
pub mod ops;
pub mod plot;
pub mod scalar;
pub mod spline;
pub mod tape;
pub mod train;

pub use error::{DcmError, Result};
pub use matrix::Matrix;
pub use scalar::Scalar;

/// Scalar type of the experiment stack. The gradient-check tolerances the
/// acceptance suite asserts (1e-6 relative) are not reachable in f32.
pub type Real = f64;

/// Dense matrix over [`Real`].
pub type Mat = Matrix<Real>;

/// Spline grid over [`Real`].
pub type Grid = spline::SplineGrid<Real>;
