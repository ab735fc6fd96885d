//! Network architecture: SNR-adaptive semantic codec, split channel codec
//! and the CSI-token channel-matrix adaptors.

mod config;
pub mod layers;
mod link;
mod model;
mod params;

pub use config::{ModelConfig, Variant};
pub use link::{sample_noise, LinkBatch};
pub use model::{ChannelMatrixAdaptor, ForwardOutput, JsccNet, Side};
pub use params::{Bound, Group, ParamEntry, ParamId, ParameterStore};
