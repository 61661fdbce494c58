//! A small 3D U-net regressor trained with L1 loss and Adam.
//!
//! Everything is generic over the scalar so that training runs in `f32` while
//! gradient checks run in `f64`.

pub mod adam;
pub mod checkpoint;
pub mod layers;
pub mod tensor;
pub mod train;
pub mod unet;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

pub use adam::Adam;
pub use tensor::Tensor5;
pub use train::{predict, train, TrainConfig, TrainState};
pub use unet::{l1_loss, UNet, UNetConfig};

pub trait Scalar: Float + Send + Sync + Debug + Sum + 'static {}
impl<T: Float + Send + Sync + Debug + Sum + 'static> Scalar for T {}

#[inline]
pub(crate) fn cast<T: Scalar>(v: f64) -> T {
    T::from(v).expect("finite value representable in the scalar type")
}
