//! Minimal layer toolkit on top of candle tensors.

pub mod conv;
pub mod layers;
pub mod ops;
pub mod params;

pub use conv::{conv2d, ConvGeometry};
pub use layers::{l2_normalize, BatchNorm2d, Conv2d, Conv2dSpec, Linear};
pub use params::{Builder, Entry, Init, Kind, ParamStore};
