//! The token transformer: configuration, parameters, forward/backward, and
//! checkpoint serialization.

mod checkpoint;
mod tensor;
mod transformer;
mod weights;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointFlags, CKPT_MAGIC};
pub use tensor::{gemm, matmul, Scalar, View, ViewMut};
pub use transformer::{
    softmax_f64, AttnMode, CondMemory, ConditionSet, Logits, Phase, TrainExample, Transformer, SEMANTIC_SCALE,
};
pub use weights::{decays, Block, ModelConfig, Param, Weights};

#[cfg(test)]
mod tests;
