//! Attention-based multiple-instance learning: attention pooling over
//! instance features, a bag embedding, and a swappable classification or
//! regression MLP head with analytic gradients.

mod checkpoint;
mod model;
mod params;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use model::{
    backward_bag, backward_batch, forward_bag, forward_batch, forward_features,
    sample_dropout_mask, update_running_stats, BagOutput, BatchTrace, HeadTrace, PoolTrace,
};
pub use params::{BatchNorm, HeadKind, ModelConfig, ModelParams, ParamGrads, BN_EPS, BN_MOMENTUM};
