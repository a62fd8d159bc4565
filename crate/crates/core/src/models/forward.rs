use rand::RngCore;

use super::{Branch, ModelConfig, Parameters};
use crate::corpus::StreamSample;
use crate::error::{Error, Result};
use crate::neural::{
    dropout_mask, eos_bce_loss_grad, lstm_step_backward, lstm_step_cached, masked_intent_loss_grad,
    sigmoid, softmax, LossInputs, LstmCache, Tensor,
};
use crate::scalar::Scalar;

/// Hidden and cell vectors of one LSTM.
#[derive(Clone, Debug, PartialEq)]
pub struct CellState<S> {
    pub h: Vec<S>,
    pub c: Vec<S>,
}

impl<S: Scalar> CellState<S> {
    fn zeros(hidden: usize) -> Self {
        CellState {
            h: vec![S::zero(); hidden],
            c: vec![S::zero(); hidden],
        }
    }
}

/// Recurrent state of a streaming session. Callers own it; [`step`] returns
/// the successor instead of mutating.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamState<S> {
    pub intent: Option<CellState<S>>,
    pub eos: Option<CellState<S>>,
    pub steps: usize,
}

impl<S: Scalar> StreamState<S> {
    pub fn fresh(config: &ModelConfig) -> Self {
        StreamState {
            intent: config
                .variant
                .has_intent()
                .then(|| CellState::zeros(config.hidden_dim)),
            eos: config
                .variant
                .has_eos()
                .then(|| CellState::zeros(config.hidden_dim)),
            steps: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput<S> {
    /// Softmax over intents; absent for EOS_ONLY.
    pub intent_dist: Option<Vec<S>>,
    /// Absent for OFFLINE and ONLINE.
    pub eos_prob: Option<S>,
}

#[derive(Clone, Debug)]
struct BranchStep<S> {
    cache: LstmCache<S>,
    out_mask: Option<Vec<S>>,
    head_in: Vec<S>,
    logits: Vec<S>,
}

#[derive(Clone, Debug)]
struct StepRecord<S> {
    token: usize,
    emb_mask: Option<Vec<S>>,
    intent: Option<BranchStep<S>>,
    eos: Option<BranchStep<S>>,
}

/// Per-timestep intermediates recorded by [`forward`] for [`backward`].
#[derive(Clone, Debug)]
pub struct Tape<S> {
    records: Vec<StepRecord<S>>,
    /// Feedback value fed to the intent LSTM at each step (MULTITASK_FB only).
    pub feedback: Vec<S>,
}

impl<S> Tape<S> {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<S> {
    /// `T × C`
    pub intent_logits: Option<Tensor<S>>,
    /// `T`
    pub eos_logits: Option<Vec<S>>,
    pub tape: Tape<S>,
}

fn run_branch<S: Scalar>(
    branch: &Branch<S>,
    input: Vec<S>,
    state: &CellState<S>,
    out_mask: Option<Vec<S>>,
) -> Result<BranchStep<S>> {
    let cache = lstm_step_cached(input, &state.h, &state.c, &branch.lstm)?;
    let head_in = match &out_mask {
        Some(m) => cache.h.iter().zip(m).map(|(&h, &k)| h * k).collect(),
        None => cache.h.clone(),
    };
    let mut logits = branch.b_out.values().to_vec();
    branch.w_out.matvec_acc(&head_in, &mut logits);
    Ok(BranchStep {
        cache,
        out_mask,
        head_in,
        logits,
    })
}

// One timestep shared by the whole-sequence pass and the streaming step, so
// the two agree bit for bit.
fn advance<S: Scalar, R: RngCore + ?Sized>(
    params: &Parameters<S>,
    config: &ModelConfig,
    state: &StreamState<S>,
    token: usize,
    mut rng: Option<&mut R>,
    frozen_feedback: Option<S>,
) -> Result<(StepRecord<S>, Option<S>)> {
    if token >= config.vocab_size {
        return Err(Error::TokenOutOfRange {
            token,
            vocab_size: config.vocab_size,
        });
    }
    let hidden = config.hidden_dim;
    let mut mask = |dim: usize| -> Option<Vec<S>> {
        rng.as_deref_mut()
            .map(|r| dropout_mask(dim, config.dropout, r, true))
    };

    let mut x = params.embedding.row(token).to_vec();
    let emb_mask = mask(config.embedding_dim);
    if let Some(m) = &emb_mask {
        x.iter_mut().zip(m).for_each(|(v, &k)| *v *= k);
    }

    let eos = match (&params.eos, &state.eos) {
        (Some(b), Some(s)) => Some(run_branch(b, x.clone(), s, mask(hidden))?),
        (None, None) => None,
        _ => return Err(Error::invalid("stream state does not match model")),
    };

    let mut feedback = None;
    if config.variant.has_feedback() {
        let live = eos.as_ref().map(|e| sigmoid(e.logits[0]));
        feedback = frozen_feedback.or(live);
    }

    let intent = match (&params.intent, &state.intent) {
        (Some(b), Some(s)) => {
            let mut input = x;
            if let Some(fb) = feedback {
                input.push(fb);
            }
            Some(run_branch(b, input, s, mask(hidden))?)
        }
        (None, None) => None,
        _ => return Err(Error::invalid("stream state does not match model")),
    };

    Ok((
        StepRecord {
            token,
            emb_mask,
            intent,
            eos,
        },
        feedback,
    ))
}

fn next_state<S: Scalar>(record: &StepRecord<S>, steps: usize) -> StreamState<S> {
    let cell = |b: &BranchStep<S>| CellState {
        h: b.cache.h.clone(),
        c: b.cache.c.clone(),
    };
    StreamState {
        intent: record.intent.as_ref().map(cell),
        eos: record.eos.as_ref().map(cell),
        steps: steps + 1,
    }
}

/// Left-to-right pass over `tokens` from the zero state.
///
/// Passing a generator enables training mode: dropout masks are drawn for the
/// embedding output and each LSTM output. `None` is inference.
pub fn forward<S: Scalar>(
    params: &Parameters<S>,
    config: &ModelConfig,
    tokens: &[usize],
    rng: Option<&mut dyn RngCore>,
) -> Result<ForwardOutput<S>> {
    forward_with_feedback(params, config, tokens, rng, None)
}

/// As [`forward`], optionally pinning the feedback column to given values
/// instead of the live EOS probabilities.
pub(crate) fn forward_with_feedback<S: Scalar>(
    params: &Parameters<S>,
    config: &ModelConfig,
    tokens: &[usize],
    mut rng: Option<&mut dyn RngCore>,
    frozen_feedback: Option<&[S]>,
) -> Result<ForwardOutput<S>> {
    if tokens.is_empty() {
        return Err(Error::invalid("forward over an empty sequence"));
    }
    if let Some(f) = frozen_feedback {
        if f.len() != tokens.len() {
            return Err(Error::DimensionMismatch {
                context: "frozen feedback".into(),
                expected: tokens.len(),
                actual: f.len(),
            });
        }
    }
    let t_len = tokens.len();
    let mut state = StreamState::fresh(config);
    let mut records = Vec::with_capacity(t_len);
    let mut feedback = Vec::new();
    let mut intent_logits = params
        .intent
        .as_ref()
        .map(|_| Tensor::zeros(&[t_len, config.n_intents]));
    let mut eos_logits = params.eos.as_ref().map(|_| Vec::with_capacity(t_len));

    for (t, &token) in tokens.iter().enumerate() {
        let frozen = frozen_feedback.map(|f| f[t]);
        let (record, fb) = advance(params, config, &state, token, rng.as_deref_mut(), frozen)?;
        state = next_state(&record, state.steps);
        if let (Some(out), Some(b)) = (intent_logits.as_mut(), &record.intent) {
            out.row_mut(t).copy_from_slice(&b.logits);
        }
        if let (Some(out), Some(b)) = (eos_logits.as_mut(), &record.eos) {
            out.push(b.logits[0]);
        }
        feedback.extend(fb);
        records.push(record);
    }

    Ok(ForwardOutput {
        intent_logits,
        eos_logits,
        tape: Tape { records, feedback },
    })
}

/// Exactly one LSTM step per branch, inference mode.
pub fn step<S: Scalar>(
    params: &Parameters<S>,
    config: &ModelConfig,
    state: &StreamState<S>,
    token: usize,
) -> Result<(StreamState<S>, StepOutput<S>)> {
    let (record, _) = advance::<S, dyn RngCore>(params, config, state, token, None, None)?;
    let next = next_state(&record, state.steps);
    let out = StepOutput {
        intent_dist: record.intent.as_ref().map(|b| softmax(&b.logits)),
        eos_prob: record.eos.as_ref().map(|b| sigmoid(b.logits[0])),
    };
    Ok((next, out))
}

// Full-sequence BPTT through one branch. `d_logits(t)` is the loss gradient
// w.r.t. that branch's logits at step t; input gradients for the embedding
// columns are accumulated into `d_embedded`.
fn backprop_branch<S: Scalar>(
    branch: &Branch<S>,
    grads: &mut Branch<S>,
    steps: &[&BranchStep<S>],
    d_logits: impl Fn(usize) -> Vec<S>,
    d_embedded: &mut [Vec<S>],
) {
    let hidden = branch.lstm.hidden_dim();
    let mut dh_next = vec![S::zero(); hidden];
    let mut dc_next = vec![S::zero(); hidden];
    for t in (0..steps.len()).rev() {
        let st = steps[t];
        let dl = d_logits(t);
        grads.w_out.outer_acc(&dl, &st.head_in);
        for (b, &d) in grads.b_out.values_mut().iter_mut().zip(&dl) {
            *b += d;
        }
        let mut dh = vec![S::zero(); hidden];
        branch.w_out.matvec_t_acc(&dl, &mut dh);
        if let Some(m) = &st.out_mask {
            dh.iter_mut().zip(m).for_each(|(v, &k)| *v *= k);
        }
        for (a, &b) in dh.iter_mut().zip(&dh_next) {
            *a += b;
        }
        let (dx, dh_prev, dc_prev) =
            lstm_step_backward(&branch.lstm, &st.cache, &dh, &dc_next, &mut grads.lstm);
        // The feedback column, if any, sits past the embedding and is a constant.
        for (a, &b) in d_embedded[t].iter_mut().zip(&dx) {
            *a += b;
        }
        dh_next = dh_prev;
        dc_next = dc_prev;
    }
}

/// Reverse-mode gradients of a loss whose gradients w.r.t. the logits are
/// `d_intent` (`T × C`) and `d_eos` (`T`).
pub fn backward<S: Scalar>(
    params: &Parameters<S>,
    config: &ModelConfig,
    tape: &Tape<S>,
    d_intent: Option<&Tensor<S>>,
    d_eos: Option<&[S]>,
) -> Result<Parameters<S>> {
    let t_len = tape.len();
    let mut grads = params.zeros_like();
    let mut d_embedded = vec![vec![S::zero(); config.embedding_dim]; t_len];

    if let (Some(d), Some(branch), Some(g)) = (d_intent, &params.intent, grads.intent.as_mut()) {
        if d.rows() != t_len {
            return Err(Error::DimensionMismatch {
                context: "intent logit gradient".into(),
                expected: t_len,
                actual: d.rows(),
            });
        }
        let steps: Vec<&BranchStep<S>> = tape
            .records
            .iter()
            .map(|r| r.intent.as_ref().expect("tape recorded intent branch"))
            .collect();
        backprop_branch(branch, g, &steps, |t| d.row(t).to_vec(), &mut d_embedded);
    }
    if let (Some(d), Some(branch), Some(g)) = (d_eos, &params.eos, grads.eos.as_mut()) {
        if d.len() != t_len {
            return Err(Error::DimensionMismatch {
                context: "eos logit gradient".into(),
                expected: t_len,
                actual: d.len(),
            });
        }
        let steps: Vec<&BranchStep<S>> = tape
            .records
            .iter()
            .map(|r| r.eos.as_ref().expect("tape recorded eos branch"))
            .collect();
        backprop_branch(branch, g, &steps, |t| vec![d[t]], &mut d_embedded);
    }

    for (record, dx) in tape.records.iter().zip(d_embedded) {
        let row = grads.embedding.row_mut(record.token);
        match &record.emb_mask {
            Some(m) => {
                for ((r, d), &k) in row.iter_mut().zip(dx).zip(m) {
                    *r += d * k;
                }
            }
            None => {
                for (r, d) in row.iter_mut().zip(dx) {
                    *r += d;
                }
            }
        }
    }
    Ok(grads)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown<S> {
    /// Masked intent cross-entropy, when the model has an intent branch.
    pub intent: Option<S>,
    /// Per-token EOS BCE, when the model has an EOS branch.
    pub eos: Option<S>,
}

impl<S: Scalar> LossBreakdown<S> {
    pub fn total(&self) -> S {
        self.intent.unwrap_or_else(S::zero) + self.eos.unwrap_or_else(S::zero)
    }
}

/// Loss of the model's own objective on one sample together with its
/// gradients: masked intent CE for the intent branch plus per-token BCE for
/// the EOS branch.
pub fn loss_and_gradients<S: Scalar>(
    params: &Parameters<S>,
    config: &ModelConfig,
    sample: &StreamSample,
    rng: Option<&mut dyn RngCore>,
) -> Result<(LossBreakdown<S>, Parameters<S>)> {
    let (loss, grads, _) = loss_and_gradients_with_feedback(params, config, sample, rng, None)?;
    Ok((loss, grads))
}

pub(crate) fn loss_and_gradients_with_feedback<S: Scalar>(
    params: &Parameters<S>,
    config: &ModelConfig,
    sample: &StreamSample,
    rng: Option<&mut dyn RngCore>,
    frozen_feedback: Option<&[S]>,
) -> Result<(LossBreakdown<S>, Parameters<S>, Vec<S>)> {
    let out = forward_with_feedback(params, config, &sample.token_ids, rng, frozen_feedback)?;
    let inputs = LossInputs {
        intent_logits: out.intent_logits.as_ref(),
        eos_logits: out.eos_logits.as_deref(),
        intent_ids: &sample.intent_ids,
        eos_flags: &sample.eos_flags,
    };
    let mut loss = LossBreakdown::default();
    let mut d_intent = None;
    let mut d_eos = None;
    if out.intent_logits.is_some() {
        let (l, g) = masked_intent_loss_grad(&inputs)?;
        loss.intent = Some(l);
        d_intent = Some(g);
    }
    if let Some(e) = &out.eos_logits {
        let (l, g) = eos_bce_loss_grad(e, &sample.eos_flags)?;
        loss.eos = Some(l);
        d_eos = Some(g);
    }
    let grads = backward(params, config, &out.tape, d_intent.as_ref(), d_eos.as_deref())?;
    Ok((loss, grads, out.tape.feedback))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_model, init_model_with_range, Variant};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(variant: Variant) -> ModelConfig {
        ModelConfig {
            embedding_dim: 4,
            hidden_dim: 3,
            dropout: 0.0,
            seed: 3,
            ..ModelConfig::new(variant, 6, 3)
        }
    }

    #[test]
    fn single_token_gives_one_row() {
        for v in Variant::ALL {
            let c = cfg(v);
            let p: Parameters<f64> = init_model(&c).unwrap();
            let out = forward(&p, &c, &[2], None).unwrap();
            if v.has_intent() {
                assert_eq!(out.intent_logits.unwrap().dims(), [1, 3]);
            }
            if v.has_eos() {
                assert_eq!(out.eos_logits.unwrap().len(), 1);
            }
        }
    }

    #[test]
    fn offline_and_online_share_the_forward() {
        let mut off = cfg(Variant::Offline);
        let mut on = cfg(Variant::Online);
        off.seed = 11;
        on.seed = 11;
        let p: Parameters<f64> = init_model(&off).unwrap();
        let a = forward(&p, &off, &[1, 2, 3, 0], None).unwrap();
        let b = forward(&p, &on, &[1, 2, 3, 0], None).unwrap();
        assert_eq!(a.intent_logits, b.intent_logits);
    }

    #[test]
    fn rejects_out_of_range_tokens() {
        let c = cfg(Variant::Online);
        let p: Parameters<f64> = init_model(&c).unwrap();
        assert!(matches!(
            forward(&p, &c, &[1, 6], None),
            Err(Error::TokenOutOfRange { token: 6, .. })
        ));
        assert!(step(&p, &c, &StreamState::fresh(&c), 9).is_err());
    }

    // With a silent EOS branch the feedback column is a constant 0.5, so
    // the intent branch must equal a plain LSTM over [embedding, 0.5].
    #[test]
    fn zero_eos_branch_feeds_back_one_half() {
        let c = cfg(Variant::MultitaskFb);
        let mut p: Parameters<f64> = init_model_with_range(&c, 0.5).unwrap();
        let eos = p.eos.as_mut().unwrap();
        for t in [
            &mut eos.lstm.w_x,
            &mut eos.lstm.w_h,
            &mut eos.lstm.b,
            &mut eos.w_out,
            &mut eos.b_out,
        ] {
            t.fill(0.0);
        }
        let tokens = [4, 1, 1, 5, 0];
        let out = forward(&p, &c, &tokens, None).unwrap();
        assert!(out.tape.feedback.iter().all(|&f| f == 0.5));

        let branch = p.intent.as_ref().unwrap();
        let (mut h, mut cell) = (vec![0.0; 3], vec![0.0; 3]);
        let logits = out.intent_logits.unwrap();
        for (t, &tok) in tokens.iter().enumerate() {
            let mut x = p.embedding.row(tok).to_vec();
            x.push(0.5);
            let (h2, c2) = crate::neural::lstm_step(&x, &h, &cell, &branch.lstm).unwrap();
            h = h2;
            cell = c2;
            let mut expect = branch.b_out.values().to_vec();
            branch.w_out.matvec_acc(&h, &mut expect);
            for k in 0..3 {
                assert!((expect[k] - logits.row(t)[k]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn step_folding_equals_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for v in Variant::ALL {
            let c = cfg(v);
            let p: Parameters<f64> = init_model_with_range(&c, 0.6).unwrap();
            let tokens: Vec<usize> = (0..9).map(|_| rng.gen_range(0..6)).collect();
            let out = forward(&p, &c, &tokens, None).unwrap();
            let mut state = StreamState::fresh(&c);
            for (t, &tok) in tokens.iter().enumerate() {
                let (next, o) = step(&p, &c, &state, tok).unwrap();
                state = next;
                if let Some(d) = o.intent_dist {
                    assert_eq!(d, softmax(out.intent_logits.as_ref().unwrap().row(t)));
                }
                if let Some(e) = o.eos_prob {
                    assert_eq!(e, sigmoid(out.eos_logits.as_ref().unwrap()[t]));
                }
            }
            assert_eq!(state.steps, tokens.len());
        }
    }

    #[test]
    fn empty_mask_without_eos_branch_gives_zero_gradients() {
        let c = cfg(Variant::Online);
        let p: Parameters<f64> = init_model(&c).unwrap();
        let sample = StreamSample {
            token_ids: vec![1, 2, 3],
            eos_flags: vec![false, false, false],
            intent_ids: vec![0, 0, 0],
            utt_spans: vec![(0, 3)],
            sources: vec![0],
        };
        let (loss, g) = loss_and_gradients(&p, &c, &sample, None).unwrap();
        assert_eq!(loss.total(), 0.0);
        assert_eq!(g.sum_squares(), 0.0);
    }

    #[test]
    fn eos_only_leaves_no_intent_gradients() {
        let c = cfg(Variant::Multitask);
        let p: Parameters<f64> = init_model(&c).unwrap();
        let sample = StreamSample {
            token_ids: vec![1, 2, 3],
            eos_flags: vec![false, false, false],
            intent_ids: vec![0, 0, 0],
            utt_spans: vec![(0, 3)],
            sources: vec![0],
        };
        let (loss, g) = loss_and_gradients(&p, &c, &sample, None).unwrap();
        assert_eq!(loss.intent, Some(0.0));
        assert!(loss.eos.unwrap() > 0.0);
        let gi = g.intent.unwrap();
        assert_eq!(gi.w_out.sum_squares() + gi.b_out.sum_squares(), 0.0);
        assert_eq!(gi.lstm.w_x.sum_squares(), 0.0);
        assert!(g.eos.unwrap().w_out.sum_squares() > 0.0);
    }
}
