//! Fixed model family: an L-block MLP backbone with per-task linear heads.

pub mod adam;
pub mod backprop;
pub mod forward;
pub mod spec;
pub mod train;

pub use adam::{Adam, AdamConfig};
pub use backprop::{backbone_backward, backprop_grads, Gradients, LossSignal};
pub use forward::{
    argmax_columns, block_forward, cross_entropy_with_grad, entropy_with_grad, forward_with_trace, head_logits,
    softmax_entropy, RepTrace,
};
pub use spec::{join_dims, parse_dims, ModelSpec, PRETRAIN_HEAD};
pub use train::{pretrain, train_classifier, train_expert, TrainConfig, TrainOutcome};
