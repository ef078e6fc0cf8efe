//! Icosahedral spherical image representation and arbitrary-projection
//! super-resolution.

pub mod checkpoint;
pub mod clip;
pub mod conv;
pub mod data;
pub mod decoder;
pub mod error;
pub mod icosphere;
pub mod imageio;
pub mod layout;
pub mod metrics;
pub mod pipeline;
pub mod projection;
pub mod sliif;

pub use error::{Error, Result};

/// Scalar type of network parameters and activations (`f32` by default, `f64`
/// for gradient checks).
pub trait Real:
    ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).expect("representable")
    }

    fn f64(self) -> f64 {
        <f64 as num_traits::NumCast>::from(self).expect("representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}
