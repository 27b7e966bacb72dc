//! Tokenization, image features, prompt packing and the two-tower encoder.

pub mod checkpoint;
pub mod decode;
pub mod image;
pub mod lora;
pub mod model;
pub mod pack;
pub mod params;
pub mod tape;
pub mod vocab;

pub use image::{image_featurize, FeatureMode, Featurizer, ImageSource};
pub use lora::{lora_wrap, LoraConfig, LoraLinear};
pub use model::{forward_and_pool, forward_eval, Bound, Head, PoolSpans, TowerOutputs, TowerVars};
pub use pack::{PackedSequence, Packer};
pub use params::{ModelConfig, ModelParams, ParamKind, TrainMode};
pub use vocab::Vocab;
