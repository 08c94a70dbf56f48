//! The micro language model: tokenizer, decoder-only transformer with a
//! hand-written backward pass, AdamW with warm-up/cosine scheduling,
//! temperature sampling, and a binary checkpoint format.
//!
//! The model dtype is generic: `f32` runs the pipeline, `f64` backs the
//! finite-difference gradient verification.

mod checkpoint;
mod loss;
mod model;
mod optim;
mod sample;
mod tensor;
mod vocab;

pub use checkpoint::{load_checkpoint, load_checkpoint_matching, save_checkpoint};
pub use loss::{
    batch_loss, logp_from_pass, preference_loss_and_grads, response_rows_f64, row_logp, row_probs,
    sequence_logprob, sft_loss_and_grads, FlagHook, PrefItemView, PrefStepStat, PreferenceBatch,
    PreferenceItem, SftExample, TrainBatch,
};
pub use model::{
    backward, forward, forward_logits, forward_step, ForwardPass, KvCache, ModelConfig,
};
pub use optim::{eval_loss, train_step, train_step_with_hook, OptimConfig, OptimState, StepOutput};
pub use sample::{sample_response, GenerationConfig};
pub use tensor::{gaussian, GradStore, ParameterStore, Scalar, Tensor};
pub use vocab::Vocabulary;
