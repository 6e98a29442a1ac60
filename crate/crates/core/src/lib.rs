//! Hyperbolic kinematic pose sequence estimation.
//!
//! Lifts 2D keypoint sequences to 3D with a transformer whose spatial
//! attention scores joints by proximity on the Lorentz hyperboloid, by the
//! closeness of their image-plane velocities and by skeleton hop distance.
//! Temporal attention runs over a fixed band of neighbouring frames.

pub mod attention;
pub mod autodiff;
mod binio;
pub mod embedding;
pub mod error;
pub mod harness;
pub mod instrument;
pub mod layers;
pub mod lorentz;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod real;
pub mod skeleton;

pub use error::{Error, Result};
pub use real::Real;
