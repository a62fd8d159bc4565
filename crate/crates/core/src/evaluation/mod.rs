//! Intent and end-of-sentence metrics over stitched streams.
//!
//! Intent accuracy is measured four ways:
//!
//! * **oracle**: argmax at every gold utterance end;
//! * **predicted**: for every gold utterance, the prediction at the last
//!   predicted EOS inside its span (no predicted EOS in the span is an error);
//! * **matched**: over predicted EOS that coincide with a gold EOS;
//! * **false positive**: over predicted EOS at non-gold positions, scored
//!   against the enclosing utterance's intent.
//!
//! EOS detection is scored per token and as exact-position boundary
//! precision/recall/F1.

mod early;
mod significance;

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{StreamSample, StreamSet};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::neural::{argmax, sigmoid, softmax};
use crate::scalar::Scalar;

pub use early::{
    early_detection, early_positions, paired_positions, EarlyDetection, EarlyDetectionDist,
    EARLY_BINS,
};
pub use significance::permutation_test;

/// Per-token model outputs for one stream.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamTrace {
    /// Argmax intent at every position.
    pub intent_argmax: Option<Vec<usize>>,
    pub eos_probs: Option<Vec<f64>>,
}

/// Runs the intent source and the EOS source over one stream in inference mode.
pub fn trace_stream<S: Scalar>(
    intent: Option<&Model<S>>,
    eos: Option<&Model<S>>,
    sample: &StreamSample,
) -> Result<StreamTrace> {
    let mut trace = StreamTrace {
        intent_argmax: None,
        eos_probs: None,
    };
    let shared = matches!((intent, eos), (Some(a), Some(b)) if std::ptr::eq(a, b));
    if let Some(m) = intent {
        let out = m.infer(&sample.token_ids)?;
        let logits = out
            .intent_logits
            .ok_or_else(|| Error::invalid(format!("{} has no intent branch", m.variant())))?;
        trace.intent_argmax = Some((0..logits.rows()).map(|t| argmax(&softmax(logits.row(t)))).collect());
        if shared {
            trace.eos_probs = out
                .eos_logits
                .map(|e| e.into_iter().map(|z| sigmoid(z).as_f64()).collect());
        }
    }
    if let (Some(m), false) = (eos, shared) {
        let out = m.infer(&sample.token_ids)?;
        let logits = out
            .eos_logits
            .ok_or_else(|| Error::invalid(format!("{} has no EOS branch", m.variant())))?;
        trace.eos_probs = Some(logits.into_iter().map(|z| sigmoid(z).as_f64()).collect());
    }
    Ok(trace)
}

/// Outcome for one gold utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub stream: usize,
    pub span: (usize, usize),
    pub gold: usize,
    /// Prediction at the oracle EOS.
    pub oracle_pred: Option<usize>,
    /// Prediction at the last predicted EOS inside the span.
    pub predicted_pred: Option<usize>,
    /// Predictions at every predicted EOS inside the span, in order.
    pub commits: Vec<usize>,
    /// Stable-correct-prefix position in (0, 1], when the oracle prediction is correct.
    pub early_stable: Option<f64>,
    /// First position with a correct argmax, under the same condition.
    pub early_first: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub max_utts: usize,
    pub n_streams: usize,
    pub n_utterances: usize,
    pub n_tokens: usize,
    pub intent_acc_oracle: Option<f64>,
    pub intent_acc_predicted: Option<f64>,
    pub intent_acc_matched: Option<f64>,
    pub intent_acc_false_pos: Option<f64>,
    pub eos_token_acc: Option<f64>,
    pub eos_boundary_precision: Option<f64>,
    pub eos_boundary_recall: Option<f64>,
    pub eos_boundary_f1: Option<f64>,
    /// Fraction of tokens that are not utterance-final: the score of an
    /// EOS detector that never fires.
    pub non_eos_fraction: f64,
    pub n_predicted_eos: usize,
    pub n_matched: usize,
    pub n_false_pos: usize,
    pub records: Vec<UtteranceRecord>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub const CSV_HEADER: &'static str = "model,max_utts,intent_acc_oracle,intent_acc_predicted,intent_acc_matched,intent_acc_false_pos,eos_token_acc,eos_precision,eos_recall,eos_f1";

    /// One CSV row; absent metrics are left empty.
    pub fn csv_row(&self, model: &str) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut row = format!("{model},{}", self.max_utts);
        for v in [
            self.intent_acc_oracle,
            self.intent_acc_predicted,
            self.intent_acc_matched,
            self.intent_acc_false_pos,
            self.eos_token_acc,
            self.eos_boundary_precision,
            self.eos_boundary_recall,
            self.eos_boundary_f1,
        ] {
            let _ = write!(row, ",{}", f(v));
        }
        row
    }
}

/// Which models provide intents and boundaries.
#[derive(Clone, Copy, Debug)]
pub struct EvalSources<'m, S> {
    pub intent: Option<&'m Model<S>>,
    pub eos: Option<&'m Model<S>>,
    /// `eos_prob >= threshold` is a predicted boundary.
    pub threshold: f64,
}

#[derive(Default)]
struct Tally {
    oracle_correct: usize,
    predicted_correct: usize,
    matched: usize,
    matched_correct: usize,
    false_pos: usize,
    false_pos_correct: usize,
    token_correct: usize,
    tp: usize,
    fp: usize,
    fn_: usize,
    tokens: usize,
    eos_tokens: usize,
}

impl Tally {
    fn merge(&mut self, o: &Tally) {
        self.oracle_correct += o.oracle_correct;
        self.predicted_correct += o.predicted_correct;
        self.matched += o.matched;
        self.matched_correct += o.matched_correct;
        self.false_pos += o.false_pos;
        self.false_pos_correct += o.false_pos_correct;
        self.token_correct += o.token_correct;
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tokens += o.tokens;
        self.eos_tokens += o.eos_tokens;
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn score_stream(
    index: usize,
    sample: &StreamSample,
    trace: &StreamTrace,
    threshold: f64,
) -> (Tally, Vec<UtteranceRecord>) {
    let mut tally = Tally {
        tokens: sample.len(),
        eos_tokens: sample.eos_flags.iter().filter(|&&f| f).count(),
        ..Tally::default()
    };
    let predicted: Option<Vec<bool>> = trace
        .eos_probs
        .as_ref()
        .map(|p| p.iter().map(|&x| x >= threshold).collect());

    if let Some(pred) = &predicted {
        for t in 0..sample.len() {
            let gold = sample.eos_flags[t];
            tally.token_correct += usize::from(pred[t] == gold);
            match (pred[t], gold) {
                (true, true) => tally.tp += 1,
                (true, false) => tally.fp += 1,
                (false, true) => tally.fn_ += 1,
                (false, false) => {}
            }
            if let (true, Some(a)) = (pred[t], &trace.intent_argmax) {
                let correct = a[t] == sample.intent_ids[t];
                if gold {
                    tally.matched += 1;
                    tally.matched_correct += usize::from(correct);
                } else {
                    tally.false_pos += 1;
                    tally.false_pos_correct += usize::from(correct);
                }
            }
        }
    }

    let mut records = Vec::with_capacity(sample.n_utterances());
    for &(start, end) in &sample.utt_spans {
        let gold = sample.intent_ids[start];
        let mut rec = UtteranceRecord {
            stream: index,
            span: (start, end),
            gold,
            oracle_pred: None,
            predicted_pred: None,
            commits: Vec::new(),
            early_stable: None,
            early_first: None,
        };
        if let Some(a) = &trace.intent_argmax {
            let at_eos = a[end - 1];
            rec.oracle_pred = Some(at_eos);
            tally.oracle_correct += usize::from(at_eos == gold);
            if at_eos == gold {
                let (stable, first) = early_positions(&a[start..end], gold);
                rec.early_stable = Some(stable);
                rec.early_first = Some(first);
            }
            if let Some(pred) = &predicted {
                rec.commits = (start..end).filter(|&t| pred[t]).map(|t| a[t]).collect();
                rec.predicted_pred = rec.commits.last().copied();
                tally.predicted_correct += usize::from(rec.predicted_pred == Some(gold));
            }
        }
        records.push(rec);
    }
    (tally, records)
}

/// Computes every metric the given sources support.
pub fn evaluate<S: Scalar>(sources: &EvalSources<'_, S>, streams: &StreamSet) -> Result<EvalReport> {
    if sources.intent.is_none() && sources.eos.is_none() {
        return Err(Error::invalid("evaluation needs an intent or an EOS source"));
    }
    if let (Some(a), Some(b)) = (sources.intent, sources.eos) {
        if a.config.vocab_size != b.config.vocab_size {
            return Err(Error::IncompatibleSession(
                "intent and EOS models use different vocabularies".into(),
            ));
        }
    }
    let per_stream: Vec<(Tally, Vec<UtteranceRecord>)> = streams
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let trace = trace_stream(sources.intent, sources.eos, s)?;
            Ok(score_stream(i, s, &trace, sources.threshold))
        })
        .collect::<Result<_>>()?;

    let mut tally = Tally::default();
    let mut records = Vec::new();
    for (t, r) in per_stream {
        tally.merge(&t);
        records.extend(r);
    }
    let n_utts = records.len();
    let has_intent = sources.intent.is_some();
    let has_eos = sources.eos.is_some();
    let precision = ratio(tally.tp, tally.tp + tally.fp);
    let recall = ratio(tally.tp, tally.tp + tally.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };

    Ok(EvalReport {
        max_utts: streams.max_utts,
        n_streams: streams.samples.len(),
        n_utterances: n_utts,
        n_tokens: tally.tokens,
        intent_acc_oracle: has_intent.then(|| ratio(tally.oracle_correct, n_utts)),
        intent_acc_predicted: (has_intent && has_eos).then(|| ratio(tally.predicted_correct, n_utts)),
        intent_acc_matched: (has_intent && has_eos).then(|| ratio(tally.matched_correct, tally.matched)),
        intent_acc_false_pos: (has_intent && has_eos)
            .then(|| ratio(tally.false_pos_correct, tally.false_pos)),
        eos_token_acc: has_eos.then(|| ratio(tally.token_correct, tally.tokens)),
        eos_boundary_precision: has_eos.then_some(precision),
        eos_boundary_recall: has_eos.then_some(recall),
        eos_boundary_f1: has_eos.then_some(f1),
        non_eos_fraction: ratio(tally.tokens - tally.eos_tokens, tally.tokens),
        n_predicted_eos: tally.tp + tally.fp,
        n_matched: tally.matched,
        n_false_pos: tally.false_pos,
        records,
    })
}

/// Intent accuracy at gold utterance ends.
pub fn eval_oracle<S: Scalar>(model: &Model<S>, streams: &StreamSet) -> Result<EvalReport> {
    if !model.variant().has_intent() {
        return Err(Error::invalid(format!("{} has no intent branch", model.variant())));
    }
    evaluate(
        &EvalSources {
            intent: Some(model),
            eos: None,
            threshold: model.config.eos_threshold,
        },
        streams,
    )
}

/// Intent accuracy with boundaries taken from `eos_model`, plus EOS metrics.
/// For the multi-task variants pass the same model twice.
pub fn eval_predicted<S: Scalar>(
    intent_model: &Model<S>,
    eos_model: &Model<S>,
    streams: &StreamSet,
    threshold: f64,
) -> Result<EvalReport> {
    if !eos_model.variant().has_eos() {
        return Err(Error::invalid(format!(
            "{} cannot predict end-of-sentence",
            eos_model.variant()
        )));
    }
    evaluate(
        &EvalSources {
            intent: Some(intent_model),
            eos: Some(eos_model),
            threshold,
        },
        streams,
    )
}

/// EOS metrics alone.
pub fn eval_eos<S: Scalar>(eos_model: &Model<S>, streams: &StreamSet, threshold: f64) -> Result<EvalReport> {
    if !eos_model.variant().has_eos() {
        return Err(Error::invalid(format!(
            "{} cannot predict end-of-sentence",
            eos_model.variant()
        )));
    }
    evaluate(
        &EvalSources {
            intent: None,
            eos: Some(eos_model),
            threshold,
        },
        streams,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> StreamSample {
        // utterances: [0,3) intent 1, [3,5) intent 0
        StreamSample::from_utterances(&[(vec![1, 2, 3], 1), (vec![4, 5], 0)]).unwrap()
    }

    fn trace(argmax: Vec<usize>, eos: Vec<f64>) -> StreamTrace {
        StreamTrace {
            intent_argmax: Some(argmax),
            eos_probs: Some(eos),
        }
    }

    #[test]
    fn perfect_eos_source() {
        let s = sample();
        let (t, r) = score_stream(0, &s, &trace(vec![0, 1, 1, 0, 1], vec![0., 0., 1., 0., 1.]), 0.5);
        assert_eq!(t.tp, 2);
        assert_eq!(t.fp + t.fn_, 0);
        assert_eq!(t.oracle_correct, 1);
        assert_eq!(t.predicted_correct, 1);
        assert_eq!(t.matched_correct, 1);
        assert_eq!(r[0].predicted_pred, Some(1));
        assert_eq!(r[1].predicted_pred, Some(1));
    }

    #[test]
    fn silent_eos_source() {
        let s = sample();
        let (t, r) = score_stream(0, &s, &trace(vec![1; 5], vec![0.1; 5]), 0.5);
        assert_eq!(t.predicted_correct, 0);
        assert_eq!(t.token_correct, 3);
        assert!(r.iter().all(|x| x.predicted_pred.is_none()));
    }

    #[test]
    fn last_predicted_eos_in_span_wins() {
        let s = sample();
        // fires at 0 (wrong intent 0) and 1 (right intent 1) inside the first span
        let (t, r) = score_stream(0, &s, &trace(vec![0, 1, 0, 0, 0], vec![0.9, 0.9, 0.2, 0.2, 0.2]), 0.5);
        assert_eq!(r[0].commits, [0, 1]);
        assert_eq!(r[0].predicted_pred, Some(1));
        assert_eq!(t.false_pos, 2);
        assert_eq!(t.false_pos_correct, 1);
        assert_eq!(t.predicted_correct, 1);
    }

    #[test]
    fn threshold_is_inclusive() {
        let s = sample();
        let (t, _) = score_stream(0, &s, &trace(vec![1; 5], vec![0., 0., 0.5, 0., 0.5]), 0.5);
        assert_eq!(t.tp, 2);
    }

    #[test]
    fn csv_row_leaves_missing_metrics_blank() {
        let r = EvalReport {
            max_utts: 3,
            intent_acc_oracle: Some(0.5),
            ..EvalReport::default()
        };
        assert_eq!(r.csv_row("ONLINE"), "ONLINE,3,0.500000,,,,,,,");
        assert_eq!(
            EvalReport::CSV_HEADER.split(',').count(),
            r.csv_row("x").split(',').count()
        );
    }
}
