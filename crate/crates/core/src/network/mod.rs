//! Prediction heads, losses, optimizer and the composed field model.

pub mod adam;
pub mod classes;
pub mod loss;
pub mod mlp;
pub mod model;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use classes::{SemanticClassSet, MANHOLE, ROAD, TRAFFIC_LANE};
pub use loss::{cross_entropy, loss_color, loss_height, loss_semantic, softmax, LossParts};
pub use mlp::{sigmoid, Dense, HeadCache, HeadGrads, MlpHead, OutputActivation};
pub use model::{AppearanceSums, Branch, FieldModel, FnHeight, HeightField, HeightSnapshot, ModelConfig, CHUNK};
