//! Incremental online intent detection.
//!
//! Recurrent models consume a transcript one word at a time, emit an intent
//! distribution after every word, and detect utterance boundaries lexically
//! so that intents can be committed without waiting for end-pointing.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix it to `f64`, which training and evaluation use.

pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod neural;
pub mod scalar;
pub mod streaming;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use corpus::{Corpus, StreamSample, StreamSet, Utterance, Vocabulary};
pub use models::{ModelConfig, Variant};

pub type Tensor = neural::Tensor<f64>;
pub type LstmParams = neural::LstmParams<f64>;
pub type Parameters = models::Parameters<f64>;
pub type Model = models::Model<f64>;
pub type StreamState = models::StreamState<f64>;
pub type StepOutput = models::StepOutput<f64>;
pub type Session<'m> = streaming::Session<'m, f64>;
pub type Event = streaming::Event<f64>;

pub type Tensor32 = neural::Tensor<f32>;
pub type Parameters32 = models::Parameters<f32>;
pub type Model32 = models::Model<f32>;
