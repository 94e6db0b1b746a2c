//! Base surrogates (FNO, periodic CNN), their conditioning variants and
//! the checkpoint format.

mod base;
mod checkpoint;
pub(crate) mod init;
mod surrogate;

pub use base::{
    make_conditional_input, make_prev2_input, BaseConfig, BaseModel, Cnn, CnnConfig, Fno, FnoConfig,
};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use surrogate::{BaseKind, Conditioning, ModelConfig, StepOutput, Surrogate};
