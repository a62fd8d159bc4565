//! Softmax, sigmoid and the two training objectives: cross-entropy masked to
//! utterance-final positions, and per-token end-of-sentence BCE.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    let one = S::one();
    if x >= S::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

/// Max-subtracted softmax.
pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<S>().ln() + max;
    logits.iter().map(|&z| z - lse).collect()
}

pub fn argmax<S: Scalar>(xs: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Per-timestep network outputs paired with gold labels for one stream.
#[derive(Clone, Copy, Debug)]
pub struct LossInputs<'a, S> {
    /// `T × C`
    pub intent_logits: Option<&'a Tensor<S>>,
    /// `T`
    pub eos_logits: Option<&'a [S]>,
    /// Gold intent at every position.
    pub intent_ids: &'a [usize],
    /// Oracle end-of-sentence flags; both the CE mask and the BCE target.
    pub eos_flags: &'a [bool],
}

impl<'a, S: Scalar> LossInputs<'a, S> {
    pub fn len(&self) -> usize {
        self.eos_flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eos_flags.is_empty()
    }

    fn check(&self) -> Result<()> {
        let t = self.eos_flags.len();
        if t == 0 {
            return Err(Error::invalid("loss over an empty sequence"));
        }
        if self.intent_ids.len() != t {
            return Err(Error::DimensionMismatch {
                context: "intent ids".into(),
                expected: t,
                actual: self.intent_ids.len(),
            });
        }
        if let Some(l) = self.intent_logits {
            if l.rows() != t {
                return Err(Error::DimensionMismatch {
                    context: "intent logits rows".into(),
                    expected: t,
                    actual: l.rows(),
                });
            }
            if l.cols() < 2 {
                return Err(Error::invalid("need at least 2 intent classes"));
            }
            if let Some(&bad) = self.intent_ids.iter().find(|&&c| c >= l.cols()) {
                return Err(Error::invalid(format!("intent id {bad} out of range")));
            }
        }
        if let Some(e) = self.eos_logits {
            if e.len() != t {
                return Err(Error::DimensionMismatch {
                    context: "eos logits".into(),
                    expected: t,
                    actual: e.len(),
                });
            }
        }
        Ok(())
    }
}

/// `−Σ_t eos(t) · log softmax(logits_t)[gold_t]`, summed over the sample.
///
/// A sample without any flagged position contributes 0 and logs a warning.
pub fn masked_intent_loss<S: Scalar>(l: &LossInputs<S>) -> Result<S> {
    Ok(masked_intent_loss_grad(l)?.0)
}

/// Loss plus its gradient w.r.t. the intent logits.
pub fn masked_intent_loss_grad<S: Scalar>(l: &LossInputs<S>) -> Result<(S, Tensor<S>)> {
    l.check()?;
    let logits = l
        .intent_logits
        .ok_or_else(|| Error::invalid("masked intent loss needs intent logits"))?;
    let mut grad = logits.zeros_like();
    let mut loss = S::zero();
    let mut flagged = 0usize;
    for t in 0..l.len() {
        if !l.eos_flags[t] {
            continue;
        }
        flagged += 1;
        let gold = l.intent_ids[t];
        let row = logits.row(t);
        loss -= log_softmax(row)[gold];
        let g = grad.row_mut(t);
        for (gc, p) in g.iter_mut().zip(softmax(row)) {
            *gc = p;
        }
        g[gold] -= S::one();
    }
    if flagged == 0 {
        log::warn!("degenerate sample: no end-of-sentence position in the loss mask");
    }
    Ok((loss, grad))
}

/// Per-token BCE on `sigmoid(logit)`, summed over every position.
pub fn eos_bce_loss<S: Scalar>(eos_logits: &[S], eos_flags: &[bool]) -> Result<S> {
    Ok(eos_bce_loss_grad(eos_logits, eos_flags)?.0)
}

pub fn eos_bce_loss_grad<S: Scalar>(eos_logits: &[S], eos_flags: &[bool]) -> Result<(S, Vec<S>)> {
    if eos_logits.len() != eos_flags.len() {
        return Err(Error::DimensionMismatch {
            context: "eos logits".into(),
            expected: eos_flags.len(),
            actual: eos_logits.len(),
        });
    }
    let mut loss = S::zero();
    let mut grad = Vec::with_capacity(eos_logits.len());
    for (&z, &y) in eos_logits.iter().zip(eos_flags) {
        if y {
            loss += softplus(-z);
            grad.push(sigmoid(z) - S::one());
        } else {
            loss += softplus(z);
            grad.push(sigmoid(z));
        }
    }
    Ok((loss, grad))
}

/// Masked intent cross-entropy plus per-token EOS BCE.
pub fn multitask_loss<S: Scalar>(l: &LossInputs<S>) -> Result<S> {
    l.check()?;
    let eos = l
        .eos_logits
        .ok_or_else(|| Error::invalid("multi-task loss needs eos logits"))?;
    Ok(masked_intent_loss(l)? + eos_bce_loss(eos, l.eos_flags)?)
}
