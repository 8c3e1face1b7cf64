//! Dense tensors, hand-differentiated transformer blocks, Adam, gradient
//! checking and checkpoints.

pub mod attention;
pub mod blocks;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tensor;

pub use attention::{AttentionCache, MultiHeadAttention};
pub use blocks::{
    AttentionSublayer, AttentionSublayerCache, BlockDims, CrossAttentionLayer, CrossAttentionLayerCache,
    CrossModalLayer, CrossModalLayerCache, FfnSublayer, FfnSublayerCache, SelfAttentionBlock,
    SelfAttentionBlockCache,
};
pub use checkpoint::Checkpoint;
pub use gradcheck::{finite_diff_check, BlockProbe, Differentiable, GradCheckReport};
pub use layers::{gelu, softmax, softmax_backward, Ffn, FfnCache, LayerNorm, Linear};
pub use params::{AdamConfig, ParamId, ParamStore};
pub use tensor::Tensor;
