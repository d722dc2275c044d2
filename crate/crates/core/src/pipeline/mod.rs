//! Training loop, the three decoding regimes, extrapolation, and guided
//! generation.

mod conditions;
mod decode;
mod train;

pub use conditions::{build_conditions, max_condition_len};
pub use decode::{guided_generate, left_columns, DecodeConfig, DecodeRun, Decoder, Regime};
pub use train::{make_example, masked_accuracy, AdamW, LossKind, TraceRecord, TrainConfig, TrainData, Trainer};
