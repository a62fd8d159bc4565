//! Dense numeric core: tensors, the LSTM cell, losses, Adam and dropout.

mod adam;
mod dropout;
mod loss;
mod lstm;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamMoments};
pub use dropout::dropout_mask;
pub use loss::{
    argmax, eos_bce_loss, eos_bce_loss_grad, log_softmax, masked_intent_loss,
    masked_intent_loss_grad, multitask_loss, sigmoid, softmax, softplus, LossInputs,
};
pub use lstm::{lstm_step, lstm_step_backward, lstm_step_cached, LstmCache, LstmParams};
pub use tensor::{dot, Tensor};
