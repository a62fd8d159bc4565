//! Central finite-difference check of the analytic gradients.
//!
//! For MULTITASK_FB the feedback column is held at its unperturbed values
//! while differencing, mirroring the backward pass which treats feedback as
//! a constant input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::forward::loss_and_gradients_with_feedback;
use super::{init_model_with_range, ModelConfig, Parameters, Variant};
use crate::corpus::StreamSample;
use crate::error::Result;
use crate::neural::{eos_bce_loss, masked_intent_loss, LossInputs};

/// Step used for the central differences.
pub const FD_DELTA: f64 = 1e-5;

// Relative errors are measured against max(|analytic|, |numeric|, this).
const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub variant: Variant,
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub n_checked: usize,
}

fn loss_only(
    params: &Parameters<f64>,
    config: &ModelConfig,
    sample: &StreamSample,
    mask_seed: u64,
    frozen: Option<&[f64]>,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let out = super::forward_with_feedback(params, config, &sample.token_ids, Some(&mut rng), frozen)?;
    let inputs = LossInputs {
        intent_logits: out.intent_logits.as_ref(),
        eos_logits: out.eos_logits.as_deref(),
        intent_ids: &sample.intent_ids,
        eos_flags: &sample.eos_flags,
    };
    let mut loss = 0.0;
    if out.intent_logits.is_some() {
        loss += masked_intent_loss(&inputs)?;
    }
    if let Some(e) = &out.eos_logits {
        loss += eos_bce_loss(e, &sample.eos_flags)?;
    }
    Ok(loss)
}

/// Compares every analytic gradient entry against central differences.
/// Dropout masks are redrawn from `mask_seed` for every evaluation so all
/// evaluations see the same masks.
pub fn gradcheck_model(
    params: &Parameters<f64>,
    config: &ModelConfig,
    sample: &StreamSample,
    mask_seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let (_, grads, feedback) =
        loss_and_gradients_with_feedback(params, config, sample, Some(&mut rng), None)?;
    let frozen = config.variant.has_feedback().then_some(feedback.as_slice());

    let mut report = GradCheckReport {
        variant: config.variant,
        max_rel_error: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        n_checked: 0,
    };
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = grads
        .tensors()
        .into_iter()
        .map(|(_, t)| t.values().to_vec())
        .collect();

    let mut probe = params.clone();
    for (k, name) in names.iter().enumerate() {
        for i in 0..analytic[k].len() {
            let orig = probe.tensors_mut()[k].values()[i];
            probe.tensors_mut()[k].values_mut()[i] = orig + FD_DELTA;
            let plus = loss_only(&probe, config, sample, mask_seed, frozen)?;
            probe.tensors_mut()[k].values_mut()[i] = orig - FD_DELTA;
            let minus = loss_only(&probe, config, sample, mask_seed, frozen)?;
            probe.tensors_mut()[k].values_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * FD_DELTA);
            let a = analytic[k][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.n_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_tensor = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

/// The tiny configuration used by [`gradcheck`]: V=5, E=3, H=2, C=2.
pub fn tiny_config(variant: Variant, seed: u64) -> ModelConfig {
    ModelConfig {
        embedding_dim: 3,
        hidden_dim: 2,
        dropout: 0.2,
        seed,
        ..ModelConfig::new(variant, 5, 2)
    }
}

/// Checks one variant on a random tiny model and a stitched two-utterance
/// sample of four tokens.
pub fn gradcheck(variant: Variant, seed: u64) -> Result<GradCheckReport> {
    let config = tiny_config(variant, seed);
    let params = init_model_with_range::<f64>(&config, 0.5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let first: Vec<usize> = (0..2).map(|_| rng.gen_range(0..5)).collect();
    let second: Vec<usize> = (0..2).map(|_| rng.gen_range(0..5)).collect();
    let sample = StreamSample::from_utterances(&[(first, 0), (second, 1)])?;
    gradcheck_model(&params, &config, &sample, seed.wrapping_add(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_variant_passes() {
        for v in Variant::ALL {
            for seed in 0..3 {
                let r = gradcheck(v, seed).unwrap();
                assert!(
                    r.max_rel_error < 1e-4,
                    "{v} seed {seed}: {} at {}[{}]",
                    r.max_rel_error,
                    r.worst_tensor,
                    r.worst_index
                );
            }
        }
    }

    // Differencing with live feedback picks up the intent loss' dependence on
    // the EOS branch, which the backward pass deliberately ignores.
    #[test]
    fn live_feedback_differs_from_the_constant_convention() {
        let config = tiny_config(Variant::MultitaskFb, 4);
        let params = init_model_with_range::<f64>(&config, 0.5).unwrap();
        let sample = StreamSample::from_utterances(&[(vec![1, 2], 0), (vec![3, 4], 1)]).unwrap();
        let (_, grads, _) = loss_and_gradients_with_feedback(
            &params,
            &config,
            &sample,
            Some(&mut ChaCha8Rng::seed_from_u64(1)),
            None,
        )
        .unwrap();
        let analytic = grads.eos.as_ref().unwrap().w_out.values()[0];
        let mut probe = params.clone();
        probe.eos.as_mut().unwrap().w_out.values_mut()[0] += FD_DELTA;
        let plus = loss_only(&probe, &config, &sample, 1, None).unwrap();
        probe.eos.as_mut().unwrap().w_out.values_mut()[0] -= 2.0 * FD_DELTA;
        let minus = loss_only(&probe, &config, &sample, 1, None).unwrap();
        let live = (plus - minus) / (2.0 * FD_DELTA);
        assert!((live - analytic).abs() > 1e-4 * analytic.abs().max(live.abs()));
    }
}
