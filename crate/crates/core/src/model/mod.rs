//! Network definition: configuration, parameters and the forward pass.

pub mod adapter;
pub mod config;
pub mod layers;
pub mod network;
pub mod params;

pub use adapter::{adapter_forward, depth_encoder, depth_gate};
pub use config::ModelConfig;
pub use layers::Layers;
pub use network::{decoder_forward, encoder_forward, forward, infer, predict_and_reconstruct, wavelet_transform_block};
pub use params::{init_params, schema, ParamSpec, ParamStore};
