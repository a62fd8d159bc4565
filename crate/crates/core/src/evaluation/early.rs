//! Early-detection analysis: how far into an utterance the model settles on
//! the right intent.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{evaluate, EvalSources};
use crate::corpus::StreamSet;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::scalar::Scalar;

pub const EARLY_BINS: usize = 20;

/// Normalized positions for one utterance whose final prediction is correct:
/// `(stable, first)` where `stable` is the start of the trailing run of
/// correct argmaxes and `first` is the first correct argmax. Positions are
/// `(index + 1) / len`, so they lie in (0, 1].
pub fn early_positions(argmax: &[usize], gold: usize) -> (f64, f64) {
    let len = argmax.len();
    let mut stable = len - 1;
    while stable > 0 && argmax[stable - 1] == gold {
        stable -= 1;
    }
    let first = argmax.iter().position(|&a| a == gold).unwrap_or(len - 1);
    let norm = |i: usize| (i + 1) as f64 / len as f64;
    (norm(stable), norm(first))
}

/// Class-balanced histogram over right-closed bins `(k/20, (k+1)/20]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyDetectionDist {
    pub weights: Vec<f64>,
    /// Class-balanced mean position.
    pub mean: f64,
    pub n_utterances: usize,
}

impl EarlyDetectionDist {
    /// Every utterance gets weight `1 / (n_classes · n_in_its_class)`, so each
    /// class present contributes equally.
    pub fn from_positions(points: &[(usize, f64)]) -> Self {
        let mut weights = vec![0.0; EARLY_BINS];
        if points.is_empty() {
            return EarlyDetectionDist {
                weights,
                mean: 0.0,
                n_utterances: 0,
            };
        }
        let n_classes = points.iter().map(|p| p.0).max().unwrap_or(0) + 1;
        let mut per_class = vec![0usize; n_classes];
        for &(c, _) in points {
            per_class[c] += 1;
        }
        let present = per_class.iter().filter(|&&n| n > 0).count() as f64;

        // Canonical summation order keeps results independent of stream order.
        let mut sorted = points.to_vec();
        sorted.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let mut mean = 0.0;
        for &(c, pos) in &sorted {
            let w = 1.0 / (present * per_class[c] as f64);
            weights[bin_of(pos)] += w;
            mean += w * pos;
        }
        EarlyDetectionDist {
            weights,
            mean,
            n_utterances: points.len(),
        }
    }

    /// `bin_low,bin_high,weight` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,weight\n");
        for (k, w) in self.weights.iter().enumerate() {
            let _ = writeln!(
                out,
                "{:.2},{:.2},{w:.12}",
                k as f64 / EARLY_BINS as f64,
                (k + 1) as f64 / EARLY_BINS as f64
            );
        }
        out
    }
}

fn bin_of(pos: f64) -> usize {
    let k = (pos * EARLY_BINS as f64).ceil() as usize;
    k.clamp(1, EARLY_BINS) - 1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyDetection {
    /// Stable-correct-prefix distribution.
    pub stable: EarlyDetectionDist,
    /// First-touch distribution.
    pub first_touch: EarlyDetectionDist,
    /// Stable position per gold utterance, in stream order; `None` where the
    /// prediction at the utterance end is wrong.
    pub positions: Vec<Option<f64>>,
    pub first_positions: Vec<Option<f64>>,
}

/// Early-detection positions under oracle segmentation.
pub fn early_detection<S: Scalar>(model: &Model<S>, streams: &StreamSet) -> Result<EarlyDetection> {
    if !model.variant().has_intent() {
        return Err(Error::invalid(format!("{} has no intent branch", model.variant())));
    }
    let report = evaluate(
        &EvalSources {
            intent: Some(model),
            eos: None,
            threshold: model.config.eos_threshold,
        },
        streams,
    )?;
    let stable: Vec<(usize, f64)> = report
        .records
        .iter()
        .filter_map(|r| r.early_stable.map(|p| (r.gold, p)))
        .collect();
    let first: Vec<(usize, f64)> = report
        .records
        .iter()
        .filter_map(|r| r.early_first.map(|p| (r.gold, p)))
        .collect();
    Ok(EarlyDetection {
        stable: EarlyDetectionDist::from_positions(&stable),
        first_touch: EarlyDetectionDist::from_positions(&first),
        positions: report.records.iter().map(|r| r.early_stable).collect(),
        first_positions: report.records.iter().map(|r| r.early_first).collect(),
    })
}

/// Keeps the utterances for which both models have a position.
pub fn paired_positions(a: &[Option<f64>], b: &[Option<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "unpaired samples: {} vs {} utterances",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter()
        .zip(b)
        .filter_map(|(x, y)| Some(((*x)?, (*y)?)))
        .unzip())
}
