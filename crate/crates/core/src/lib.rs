//! Forward synthesis of the Lorentzian time-separation function on a timelike
//! hypersurface, and recovery of the metric jet at a point of that surface
//! from the sampled separations alone.

pub mod distance;
pub mod error;
pub mod geodesic;
pub mod hypersurface;
pub mod manifold;
pub mod measurement;
pub mod recovery;
pub mod scenario;
pub mod small;

pub use error::{Error, Result};
