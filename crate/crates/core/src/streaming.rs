//! Token-at-a-time inference with end-of-sentence triggered intent commits.
//!
//! A [`Session`] keeps the recurrent state of one stream. Every pushed token
//! yields, in order, a hypothesis (when an intent branch exists), an EOS
//! detection (when the boundary source fires) and a commit of the current
//! utterance's intent (when both are present). The recurrent state is never
//! reset at a boundary.

use crate::error::{Error, Result};
use crate::models::{Model, StreamState};
use crate::neural::argmax;
use crate::scalar::Scalar;

/// Where utterance boundaries come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EosMode {
    /// The caller supplies the gold flag with every token.
    Oracle,
    /// A model's EOS probability is thresholded.
    Predicted,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Event<S> {
    Hypothesis {
        position: usize,
        intent_dist: Vec<S>,
    },
    /// In oracle mode `eos_prob` is the model's estimate when it has an EOS
    /// branch and 1 otherwise.
    EosDetected { position: usize, eos_prob: S },
    /// `span` is half-open: the utterance covers `span.0..span.1`.
    IntentCommitted {
        span: (usize, usize),
        intent: usize,
        intent_dist: Vec<S>,
    },
}

impl<S> Event<S> {
    /// The stream position the event refers to.
    pub fn position(&self) -> usize {
        match self {
            Event::Hypothesis { position, .. } | Event::EosDetected { position, .. } => *position,
            Event::IntentCommitted { span, .. } => span.1 - 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Session<'m, S> {
    intent_model: Option<&'m Model<S>>,
    /// Boundary model when it differs from the intent model.
    eos_model: Option<&'m Model<S>>,
    intent_state: Option<StreamState<S>>,
    eos_state: Option<StreamState<S>>,
    mode: EosMode,
    threshold: f64,
    position: usize,
    utt_start: usize,
}

impl<'m, S: Scalar> Session<'m, S> {
    /// A session over a single model. Predicted mode needs an EOS branch.
    pub fn open(model: &'m Model<S>, mode: EosMode) -> Result<Self> {
        if mode == EosMode::Predicted && !model.variant().has_eos() {
            return Err(Error::IncompatibleSession(format!(
                "{} has no EOS branch; pair it with an EOS_ONLY model",
                model.variant()
            )));
        }
        Ok(Session {
            intent_model: model.variant().has_intent().then_some(model),
            eos_model: (!model.variant().has_intent()).then_some(model),
            intent_state: model.variant().has_intent().then(|| model.fresh_state()),
            eos_state: (!model.variant().has_intent()).then(|| model.fresh_state()),
            mode,
            threshold: model.config.eos_threshold,
            position: 0,
            utt_start: 0,
        })
    }

    /// Intent hypotheses from `intent_model`, boundaries from a separate
    /// `eos_model`, both advanced in lockstep.
    pub fn composite(intent_model: &'m Model<S>, eos_model: &'m Model<S>) -> Result<Self> {
        if !intent_model.variant().has_intent() {
            return Err(Error::IncompatibleSession(format!(
                "{} has no intent branch",
                intent_model.variant()
            )));
        }
        if !eos_model.variant().has_eos() {
            return Err(Error::IncompatibleSession(format!(
                "{} has no EOS branch",
                eos_model.variant()
            )));
        }
        if intent_model.config.vocab_size != eos_model.config.vocab_size {
            return Err(Error::IncompatibleSession(format!(
                "vocabulary sizes differ ({} vs {})",
                intent_model.config.vocab_size, eos_model.config.vocab_size
            )));
        }
        Ok(Session {
            intent_model: Some(intent_model),
            eos_model: Some(eos_model),
            intent_state: Some(intent_model.fresh_state()),
            eos_state: Some(eos_model.fresh_state()),
            mode: EosMode::Predicted,
            threshold: eos_model.config.eos_threshold,
            position: 0,
            utt_start: 0,
        })
    }

    /// Overrides the threshold taken from the boundary model's config.
    pub fn with_threshold(mut self, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(Error::invalid(format!("threshold {threshold} outside (0, 1]")));
        }
        self.threshold = threshold;
        Ok(self)
    }

    pub fn mode(&self) -> EosMode {
        self.mode
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Number of tokens consumed so far.
    pub fn position(&self) -> usize {
        self.position
    }

    /// Start of the utterance not yet committed.
    pub fn utterance_start(&self) -> usize {
        self.utt_start
    }

    /// Consumes one token. `oracle_eos` must be given in oracle mode and only there.
    pub fn push(&mut self, token: usize, oracle_eos: Option<bool>) -> Result<Vec<Event<S>>> {
        match (self.mode, oracle_eos) {
            (EosMode::Oracle, None) => {
                return Err(Error::invalid("oracle mode needs an EOS flag with every token"))
            }
            (EosMode::Predicted, Some(_)) => {
                return Err(Error::invalid("EOS flags are only accepted in oracle mode"))
            }
            _ => {}
        }

        let mut intent_dist = None;
        let mut eos_prob = None;
        if let (Some(m), Some(st)) = (self.intent_model, &self.intent_state) {
            let (next, out) = m.step(st, token)?;
            intent_dist = out.intent_dist;
            eos_prob = out.eos_prob;
            self.intent_state = Some(next);
        }
        if let (Some(m), Some(st)) = (self.eos_model, &self.eos_state) {
            let (next, out) = m.step(st, token)?;
            eos_prob = out.eos_prob;
            self.eos_state = Some(next);
        }

        let position = self.position;
        let mut events = Vec::with_capacity(3);
        if let Some(d) = &intent_dist {
            events.push(Event::Hypothesis {
                position,
                intent_dist: d.clone(),
            });
        }
        let boundary = match oracle_eos {
            Some(flag) => flag.then(|| eos_prob.unwrap_or_else(S::one)),
            None => eos_prob.filter(|p| p.as_f64() >= self.threshold),
        };
        if let Some(p) = boundary {
            events.push(Event::EosDetected {
                position,
                eos_prob: p,
            });
            if let Some(d) = intent_dist {
                events.push(Event::IntentCommitted {
                    span: (self.utt_start, position + 1),
                    intent: argmax(&d),
                    intent_dist: d,
                });
            }
            self.utt_start = position + 1;
        }
        self.position += 1;
        Ok(events)
    }

    /// Pushes a whole token sequence, concatenating the events.
    pub fn push_all(&mut self, tokens: &[usize], oracle_eos: Option<&[bool]>) -> Result<Vec<Event<S>>> {
        if let Some(flags) = oracle_eos {
            if flags.len() != tokens.len() {
                return Err(Error::DimensionMismatch {
                    context: "oracle EOS flags".into(),
                    expected: tokens.len(),
                    actual: flags.len(),
                });
            }
        }
        let mut events = Vec::new();
        for (i, &t) in tokens.iter().enumerate() {
            events.extend(self.push(t, oracle_eos.map(|f| f[i]))?);
        }
        Ok(events)
    }
}

/// Runs an ONLINE-style intent model with a separate EOS model over a token
/// stream.
pub fn run_composite<S: Scalar>(
    intent_model: &Model<S>,
    eos_model: &Model<S>,
    tokens: &[usize],
) -> Result<Vec<Event<S>>> {
    Session::composite(intent_model, eos_model)?.push_all(tokens, None)
}

/// The committed `(span, intent)` pairs in an event list.
pub fn commits<S>(events: &[Event<S>]) -> Vec<((usize, usize), usize)> {
    events
        .iter()
        .filter_map(|e| match e {
            Event::IntentCommitted { span, intent, .. } => Some((*span, *intent)),
            _ => None,
        })
        .collect()
}
