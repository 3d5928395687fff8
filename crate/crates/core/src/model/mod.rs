//! Feature extractor, attention pooling and classifier.

pub mod attention;
pub mod config;
pub mod gradcheck;
pub mod network;

pub use attention::{attention_scores, pool_attention, pool_max, summarize_head, AttentionOutput};
pub use config::{format_blocks, parse_blocks, ConvBlock, ModelConfig, PoolingMode, Profile};
pub use network::{shape_trace, ForwardPass, Gradients, Inference, Prediction, SceneModel, ShapeRow};
pub use gradcheck::{check_model_gradients, ModelGradcheck};
