//! The five architecture variants, their parameters and initialization.
//!
//! Every variant embeds tokens through one shared table. Intent variants run
//! an LSTM + linear head producing `C` logits per token; the EOS branch runs
//! its own LSTM + linear head producing one logit per token. With
//! [`Variant::MultitaskFb`] the EOS probability of token `t` is appended to
//! the embedding of token `t` before it enters the intent LSTM.

mod checkpoint;
mod forward;
mod gradcheck;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{LstmParams, Tensor};
use crate::scalar::Scalar;

pub use checkpoint::{
    format_checkpoint, load_checkpoint, load_checkpoint_as, parse_checkpoint, save_checkpoint,
    CHECKPOINT_HEADER,
};
pub use forward::{
    backward, forward, loss_and_gradients, step, ForwardOutput, LossBreakdown, StepOutput,
    StreamState, Tape,
};
pub use gradcheck::{gradcheck, gradcheck_model, tiny_config, GradCheckReport, FD_DELTA};

pub(crate) use forward::forward_with_feedback;

/// Initialization half-width for weight matrices.
pub const INIT_RANGE: f64 = 0.08;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Offline,
    Online,
    EosOnly,
    Multitask,
    MultitaskFb,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Offline,
        Variant::Online,
        Variant::EosOnly,
        Variant::Multitask,
        Variant::MultitaskFb,
    ];

    pub fn has_intent(self) -> bool {
        self != Variant::EosOnly
    }

    pub fn has_eos(self) -> bool {
        matches!(
            self,
            Variant::EosOnly | Variant::Multitask | Variant::MultitaskFb
        )
    }

    pub fn has_feedback(self) -> bool {
        self == Variant::MultitaskFb
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Offline => "OFFLINE",
            Variant::Online => "ONLINE",
            Variant::EosOnly => "EOS_ONLY",
            Variant::Multitask => "MULTITASK",
            Variant::MultitaskFb => "MULTITASK_FB",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::invalid(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub n_intents: usize,
    pub dropout: f64,
    pub eos_threshold: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub const DEFAULT_EMBEDDING_DIM: usize = 556;
    pub const DEFAULT_HIDDEN_DIM: usize = 32;

    pub fn new(variant: Variant, vocab_size: usize, n_intents: usize) -> Self {
        ModelConfig {
            variant,
            vocab_size,
            embedding_dim: Self::DEFAULT_EMBEDDING_DIM,
            hidden_dim: Self::DEFAULT_HIDDEN_DIM,
            n_intents,
            dropout: 0.1,
            eos_threshold: 0.5,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("embedding_dim", self.embedding_dim),
            ("hidden_dim", self.hidden_dim),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        if self.variant.has_intent() && self.n_intents < 2 {
            return Err(Error::invalid("n_intents must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        if !(self.eos_threshold > 0.0 && self.eos_threshold < 1.0) {
            return Err(Error::invalid("eos_threshold must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Input width of the intent LSTM: the embedding plus the feedback column.
    pub fn intent_input_dim(&self) -> usize {
        self.embedding_dim + usize::from(self.variant.has_feedback())
    }

    /// Serialized as comma-separated `key=value` pairs.
    pub fn to_line(&self) -> String {
        format!(
            "variant={},vocab_size={},embedding_dim={},hidden_dim={},n_intents={},dropout={},eos_threshold={},seed={}",
            self.variant,
            self.vocab_size,
            self.embedding_dim,
            self.hidden_dim,
            self.n_intents,
            self.dropout,
            self.eos_threshold,
            self.seed
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let mut cfg = ModelConfig::new(Variant::Online, 0, 0);
        let mut seen = Vec::new();
        for pair in line.trim().split(',') {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("bad config entry `{pair}`")))?;
            let bad = || Error::invalid(format!("bad value for `{k}`: `{v}`"));
            match k {
                "variant" => cfg.variant = v.parse()?,
                "vocab_size" => cfg.vocab_size = v.parse().map_err(|_| bad())?,
                "embedding_dim" => cfg.embedding_dim = v.parse().map_err(|_| bad())?,
                "hidden_dim" => cfg.hidden_dim = v.parse().map_err(|_| bad())?,
                "n_intents" => cfg.n_intents = v.parse().map_err(|_| bad())?,
                "dropout" => cfg.dropout = v.parse().map_err(|_| bad())?,
                "eos_threshold" => cfg.eos_threshold = v.parse().map_err(|_| bad())?,
                "seed" => cfg.seed = v.parse().map_err(|_| bad())?,
                other => return Err(Error::invalid(format!("unknown config key `{other}`"))),
            }
            seen.push(k.to_string());
        }
        for key in [
            "variant",
            "vocab_size",
            "embedding_dim",
            "hidden_dim",
            "n_intents",
            "dropout",
            "eos_threshold",
            "seed",
        ] {
            if !seen.iter().any(|s| s == key) {
                return Err(Error::invalid(format!("missing config key `{key}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A task-specific LSTM with its time-distributed linear output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Branch<S> {
    pub lstm: LstmParams<S>,
    /// `K × H`
    pub w_out: Tensor<S>,
    /// `K`
    pub b_out: Tensor<S>,
}

impl<S: Scalar> Branch<S> {
    pub fn zeros(input_dim: usize, hidden_dim: usize, outputs: usize) -> Self {
        Branch {
            lstm: LstmParams::zeros(input_dim, hidden_dim),
            w_out: Tensor::zeros(&[outputs, hidden_dim]),
            b_out: Tensor::zeros(&[outputs]),
        }
    }

    fn zeros_like(&self) -> Self {
        Branch {
            lstm: LstmParams {
                w_x: self.lstm.w_x.zeros_like(),
                w_h: self.lstm.w_h.zeros_like(),
                b: self.lstm.b.zeros_like(),
            },
            w_out: self.w_out.zeros_like(),
            b_out: self.b_out.zeros_like(),
        }
    }
}

/// All trainable tensors of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameters<S> {
    /// `V × E`, shared by both branches.
    pub embedding: Tensor<S>,
    pub intent: Option<Branch<S>>,
    pub eos: Option<Branch<S>>,
}

impl<S: Scalar> Parameters<S> {
    /// Zero tensors with the shapes `config` implies.
    pub fn zeros(config: &ModelConfig) -> Self {
        let h = config.hidden_dim;
        Parameters {
            embedding: Tensor::zeros(&[config.vocab_size, config.embedding_dim]),
            intent: config
                .variant
                .has_intent()
                .then(|| Branch::zeros(config.intent_input_dim(), h, config.n_intents)),
            eos: config
                .variant
                .has_eos()
                .then(|| Branch::zeros(config.embedding_dim, h, 1)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Parameters {
            embedding: self.embedding.zeros_like(),
            intent: self.intent.as_ref().map(Branch::zeros_like),
            eos: self.eos.as_ref().map(Branch::zeros_like),
        }
    }

    /// Named tensors in canonical order.
    pub fn tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (prefix, branch) in [("intent", &self.intent), ("eos", &self.eos)] {
            if let Some(b) = branch {
                out.push((format!("{prefix}.w_x"), &b.lstm.w_x));
                out.push((format!("{prefix}.w_h"), &b.lstm.w_h));
                out.push((format!("{prefix}.b"), &b.lstm.b));
                out.push((format!("{prefix}.w_out"), &b.w_out));
                out.push((format!("{prefix}.b_out"), &b.b_out));
            }
        }
        out
    }

    /// Same order as [`Parameters::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = vec![&mut self.embedding];
        for b in [&mut self.intent, &mut self.eos].into_iter().flatten() {
            out.push(&mut b.lstm.w_x);
            out.push(&mut b.lstm.w_h);
            out.push(&mut b.lstm.b);
            out.push(&mut b.w_out);
            out.push(&mut b.b_out);
        }
        out
    }

    pub fn n_values(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    pub fn sum_squares(&self) -> S {
        self.tensors().iter().map(|(_, t)| t.sum_squares()).sum()
    }

    pub fn scale(&mut self, k: S) {
        for t in self.tensors_mut() {
            t.scale(k);
        }
    }

    /// Checks every tensor shape against `config`.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expected = Parameters::<S>::zeros(config);
        let mine = self.tensors();
        let theirs = expected.tensors();
        if mine.len() != theirs.len()
            || mine.iter().zip(&theirs).any(|((a, _), (b, _))| a != b)
        {
            return Err(Error::VariantMismatch {
                expected: config.variant.to_string(),
                found: mine
                    .iter()
                    .map(|(n, _)| n.as_str())
                    .collect::<Vec<_>>()
                    .join(" "),
            });
        }
        for ((name, a), (_, b)) in mine.iter().zip(&theirs) {
            if a.dims() != b.dims() {
                return Err(Error::CheckpointShape {
                    name: name.clone(),
                    expected: b.dims().to_vec(),
                    found: a.dims().to_vec(),
                });
            }
        }
        Ok(())
    }
}

// Each tensor draws from its own ChaCha stream so adding or widening one
// tensor leaves the others untouched.
fn tensor_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn fill_uniform<S: Scalar>(t: &mut Tensor<S>, rng: &mut ChaCha8Rng, range: f64) {
    for v in t.values_mut() {
        *v = S::of(rng.gen_range(-range..range));
    }
}

fn init_branch<S: Scalar>(
    branch: &mut Branch<S>,
    seed: u64,
    stream_base: u64,
    main_inputs: usize,
    range: f64,
) {
    let h = branch.lstm.hidden_dim();
    let cols = branch.lstm.input_dim();

    // Main input columns first, then any extra (feedback) columns.
    let mut rng = tensor_rng(seed, stream_base);
    let w_x = branch.lstm.w_x.values_mut();
    for r in 0..4 * h {
        for c in 0..main_inputs {
            w_x[r * cols + c] = S::of(rng.gen_range(-range..range));
        }
    }
    for r in 0..4 * h {
        for c in main_inputs..cols {
            w_x[r * cols + c] = S::of(rng.gen_range(-range..range));
        }
    }
    fill_uniform(&mut branch.lstm.w_h, &mut tensor_rng(seed, stream_base + 1), range);
    branch.lstm.b.fill(S::zero());
    for v in &mut branch.lstm.b.values_mut()[h..2 * h] {
        *v = S::one();
    }
    fill_uniform(&mut branch.w_out, &mut tensor_rng(seed, stream_base + 2), range);
    branch.b_out.fill(S::zero());
}

/// Uniform(−0.08, 0.08) weights, zero biases, forget-gate bias 1.
pub fn init_model<S: Scalar>(config: &ModelConfig) -> Result<Parameters<S>> {
    init_model_with_range(config, INIT_RANGE)
}

pub fn init_model_with_range<S: Scalar>(config: &ModelConfig, range: f64) -> Result<Parameters<S>> {
    config.validate()?;
    let mut p = Parameters::zeros(config);
    fill_uniform(&mut p.embedding, &mut tensor_rng(config.seed, 1), range);
    if let Some(b) = p.intent.as_mut() {
        init_branch(b, config.seed, 10, config.embedding_dim, range);
    }
    if let Some(b) = p.eos.as_mut() {
        init_branch(b, config.seed, 20, config.embedding_dim, range);
    }
    Ok(p)
}

/// Parameters bundled with the configuration that shapes them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub params: Parameters<S>,
}

impl<S: Scalar> Model<S> {
    pub fn new(config: ModelConfig, params: Parameters<S>) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Model { config, params })
    }

    pub fn init(config: ModelConfig) -> Result<Self> {
        let params = init_model(&config)?;
        Ok(Model { config, params })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn fresh_state(&self) -> StreamState<S> {
        StreamState::fresh(&self.config)
    }

    pub fn step(&self, state: &StreamState<S>, token: usize) -> Result<(StreamState<S>, StepOutput<S>)> {
        step(&self.params, &self.config, state, token)
    }

    /// Inference-mode forward pass.
    pub fn infer(&self, tokens: &[usize]) -> Result<ForwardOutput<S>> {
        forward(&self.params, &self.config, tokens, None)
    }
}
