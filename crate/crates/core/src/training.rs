//! Training regimes, the epoch loop, dev-set model selection and grid search.
//!
//! Every sample is one Adam step. OFFLINE trains on single utterances (its
//! loss reduces to cross-entropy at the final word); the other variants train
//! on streams stitched from up to `max_utts_train` utterances.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_vocab, stitch_streams_labeled, Corpus, StreamSet, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluation::{eval_eos, eval_oracle};
use crate::models::{loss_and_gradients, Model, ModelConfig, Parameters, Variant};
use crate::neural::{adam_step, AdamConfig, AdamMoments};
use crate::scalar::Scalar;

/// Hidden sizes tried by the default grid.
pub const DEFAULT_GRID_HIDDEN: [usize; 4] = [32, 64, 128, 256];
/// Dropout rates tried by the default grid.
pub const DEFAULT_GRID_DROPOUT: [f64; 5] = [0.1, 0.15, 0.2, 0.25, 0.3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    /// `vocab_size` and `n_intents` are replaced by what the training corpus
    /// yields; the seed initializes the weights and drives shuffling,
    /// stitching and dropout.
    pub config: ModelConfig,
    pub lr: f64,
    pub epochs: usize,
    pub max_utts_train: usize,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub grid_hidden: Vec<usize>,
    pub grid_dropout: Vec<f64>,
}

impl TrainSpec {
    pub fn new(variant: Variant) -> Self {
        TrainSpec {
            config: ModelConfig::new(variant, 1, 2),
            lr: 0.001,
            epochs: 20,
            max_utts_train: if variant == Variant::Offline { 1 } else { 3 },
            clip_norm: Some(5.0),
            grid_hidden: DEFAULT_GRID_HIDDEN.to_vec(),
            grid_dropout: DEFAULT_GRID_DROPOUT.to_vec(),
        }
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr must be positive"));
        }
        if self.max_utts_train == 0 {
            return Err(Error::invalid("max_utts_train must be at least 1"));
        }
        if self.variant() == Variant::Offline && self.max_utts_train != 1 {
            return Err(Error::invalid("OFFLINE trains on single utterances (max_utts_train=1)"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::invalid("clip_norm must be positive"));
            }
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values. Blank lines
    /// and `#` comments are ignored; grids are comma-separated.
    pub fn apply_config(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                line: n + 1,
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected key=value, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = || parse_err(format!("bad value for `{k}`: `{v}`"));
            match k {
                "variant" => {
                    let variant: Variant = v.parse().map_err(|_| bad())?;
                    if variant != self.variant() {
                        self.max_utts_train = TrainSpec::new(variant).max_utts_train;
                    }
                    self.config.variant = variant;
                }
                "embedding_dim" => self.config.embedding_dim = v.parse().map_err(|_| bad())?,
                "hidden_dim" => self.config.hidden_dim = v.parse().map_err(|_| bad())?,
                "dropout" => self.config.dropout = v.parse().map_err(|_| bad())?,
                "eos_threshold" => self.config.eos_threshold = v.parse().map_err(|_| bad())?,
                "seed" => self.config.seed = v.parse().map_err(|_| bad())?,
                "lr" => self.lr = v.parse().map_err(|_| bad())?,
                "epochs" => self.epochs = v.parse().map_err(|_| bad())?,
                "max_utts_train" => self.max_utts_train = v.parse().map_err(|_| bad())?,
                "clip_norm" => {
                    self.clip_norm = match v {
                        "none" | "off" => None,
                        _ => Some(v.parse().map_err(|_| bad())?),
                    }
                }
                "grid_hidden" => self.grid_hidden = parse_list(v).map_err(|_| bad())?,
                "grid_dropout" => self.grid_dropout = parse_list(v).map_err(|_| bad())?,
                other => return Err(parse_err(format!("unknown key `{other}`"))),
            }
        }
        Ok(())
    }

    pub fn load(variant: Variant, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec = TrainSpec::new(variant);
        spec.apply_config(&text)?;
        Ok(spec)
    }
}

fn parse_list<T: std::str::FromStr>(v: &str) -> std::result::Result<Vec<T>, T::Err> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean per-sample training loss (with dropout) for each epoch.
    pub train_loss: Vec<f64>,
    pub dev_intent_acc: Vec<Option<f64>>,
    pub dev_eos_acc: Vec<Option<f64>>,
    /// Number of steps per epoch whose gradient was clipped.
    pub clipped_steps: Vec<usize>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.train_loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_loss.is_empty()
    }

    /// The dev score used for model selection at each epoch.
    pub fn dev_score(&self, variant: Variant, epoch: usize) -> f64 {
        let v = if variant.has_intent() {
            self.dev_intent_acc[epoch]
        } else {
            self.dev_eos_acc[epoch]
        };
        v.unwrap_or(0.0)
    }

    pub fn best_dev_score(&self, variant: Variant) -> f64 {
        self.dev_score(variant, self.best_epoch - 1)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,dev_intent_acc,dev_eos_acc\n");
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for e in 0..self.len() {
            let _ = writeln!(
                out,
                "{},{:.8},{},{}",
                e + 1,
                self.train_loss[e],
                f(self.dev_intent_acc[e]),
                f(self.dev_eos_acc[e])
            );
        }
        out
    }
}

/// A trained model together with what is needed to feed it text.
#[derive(Clone, Debug)]
pub struct TrainOutcome<S> {
    pub model: Model<S>,
    pub vocab: Vocabulary,
    /// Intent labels in id order.
    pub intents: Vec<String>,
    pub history: TrainHistory,
}

/// Adam state for every parameter tensor.
#[derive(Clone, Debug)]
pub struct Optimizer<S> {
    pub cfg: AdamConfig,
    moments: Vec<AdamMoments<S>>,
    step: u64,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(params: &Parameters<S>, lr: f64) -> Self {
        Optimizer {
            cfg: AdamConfig {
                lr,
                ..AdamConfig::default()
            },
            moments: params
                .tensors()
                .iter()
                .map(|(_, t)| AdamMoments::zeros(t.len()))
                .collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut Parameters<S>, grads: &Parameters<S>) -> Result<()> {
        self.step += 1;
        for ((p, (_, g)), m) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.moments.iter_mut())
        {
            adam_step(p.values_mut(), g.values(), m, &self.cfg, self.step)?;
        }
        Ok(())
    }
}

/// Rescales `grads` to global norm `max_norm` if it is larger. Returns
/// whether clipping happened.
pub fn clip_global_norm<S: Scalar>(grads: &mut Parameters<S>, max_norm: f64) -> bool {
    let norm = grads.sum_squares().as_f64().sqrt();
    if norm > max_norm {
        grads.scale(S::of(max_norm / norm));
        true
    } else {
        false
    }
}

// Independent generator streams derived from the run seed.
const STREAM_SHUFFLE: u64 = 1;
const STREAM_DROPOUT: u64 = 2;
const DEV_SEED_OFFSET: u64 = 0x5ee0_de00;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Training and dev streams for a spec. Dev is stitched with the same
/// `max_utts_train` as training, under a seed distinct from the training one.
pub fn prepare_streams(
    spec: &TrainSpec,
    train: &Corpus,
    dev: &Corpus,
    vocab: &Vocabulary,
) -> Result<(StreamSet, StreamSet)> {
    let labels = train.intent_set();
    let train_streams = stitch_streams_labeled(train, vocab, labels, spec.max_utts_train, spec.seed())?;
    let dev_streams = stitch_streams_labeled(
        dev,
        vocab,
        labels,
        spec.max_utts_train,
        spec.seed().wrapping_add(DEV_SEED_OFFSET),
    )?;
    Ok((train_streams, dev_streams))
}

/// Dev metrics in inference mode: `(intent accuracy at oracle EOS, EOS per-token accuracy)`.
pub fn dev_metrics<S: Scalar>(model: &Model<S>, dev: &StreamSet) -> Result<(Option<f64>, Option<f64>)> {
    let intent = if model.variant().has_intent() {
        eval_oracle(model, dev)?.intent_acc_oracle
    } else {
        None
    };
    let eos = if model.variant().has_eos() {
        eval_eos(model, dev, model.config.eos_threshold)?.eos_token_acc
    } else {
        None
    };
    Ok((intent, eos))
}

/// Trains one configuration and keeps the parameters of the dev-best epoch
/// (earliest epoch on ties).
pub fn train<S: Scalar>(spec: &TrainSpec, train: &Corpus, dev: &Corpus) -> Result<TrainOutcome<S>> {
    spec.validate()?;
    let vocab = build_vocab(train, 1);
    let (train_streams, dev_streams) = prepare_streams(spec, train, dev, &vocab)?;
    let config = ModelConfig {
        vocab_size: vocab.len(),
        n_intents: train.intent_set().len(),
        ..spec.config.clone()
    };
    let (model, history) = train_on_streams(spec, config, &train_streams, &dev_streams)?;
    Ok(TrainOutcome {
        model,
        vocab,
        intents: train.intent_set().to_vec(),
        history,
    })
}

/// The epoch loop over pre-encoded streams.
pub fn train_on_streams<S: Scalar>(
    spec: &TrainSpec,
    config: ModelConfig,
    train: &StreamSet,
    dev: &StreamSet,
) -> Result<(Model<S>, TrainHistory)> {
    spec.validate()?;
    config.validate()?;
    if train.samples.is_empty() || dev.samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if let Some(s) = train.samples.iter().find(|s| s.n_utterances() > spec.max_utts_train) {
        return Err(Error::invalid(format!(
            "training stream with {} utterances exceeds max_utts_train={}",
            s.n_utterances(),
            spec.max_utts_train
        )));
    }

    let mut model = Model::<S>::init(config)?;
    let mut opt = Optimizer::new(&model.params, spec.lr);
    let mut shuffle_rng = rng_for(spec.seed(), STREAM_SHUFFLE);
    let mut dropout_rng = rng_for(spec.seed(), STREAM_DROPOUT);
    let mut order: Vec<usize> = (0..train.samples.len()).collect();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Parameters<S>)> = None;

    for epoch in 0..spec.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut clipped = 0;
        for &i in &order {
            let (loss, mut grads) =
                loss_and_gradients(&model.params, &model.config, &train.samples[i], Some(&mut dropout_rng))?;
            total += loss.total().as_f64();
            if let Some(max) = spec.clip_norm {
                clipped += usize::from(clip_global_norm(&mut grads, max));
            }
            opt.update(&mut model.params, &grads)?;
        }
        if !model.params.is_finite() {
            return Err(Error::invalid(format!(
                "training diverged in epoch {} (non-finite parameters)",
                epoch + 1
            )));
        }
        let (intent_acc, eos_acc) = dev_metrics(&model, dev)?;
        history.train_loss.push(total / train.samples.len() as f64);
        history.dev_intent_acc.push(intent_acc);
        history.dev_eos_acc.push(eos_acc);
        history.clipped_steps.push(clipped);

        let score = history.dev_score(model.variant(), epoch);
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, model.params.clone()));
            history.best_epoch = epoch + 1;
        }
    }
    let (_, params) = best.expect("at least one epoch");
    model.params = params;
    Ok((model, history))
}

/// One trained grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub hidden_dim: usize,
    pub dropout: f64,
    pub dev_score: f64,
    pub history: TrainHistory,
}

#[derive(Clone, Debug)]
pub struct GridOutcome<S> {
    pub best: TrainOutcome<S>,
    /// Every point, ordered by hidden size then dropout.
    pub points: Vec<GridPoint>,
}

/// Trains every `hidden_dim × dropout` combination concurrently and keeps
/// the dev-best, preferring the smaller hidden size and then the smaller
/// dropout on ties.
pub fn grid_search<S: Scalar>(spec: &TrainSpec, train: &Corpus, dev: &Corpus) -> Result<GridOutcome<S>> {
    if spec.grid_hidden.is_empty() || spec.grid_dropout.is_empty() {
        return Err(Error::invalid("grid search needs at least one hidden size and one dropout rate"));
    }
    spec.validate()?;
    let mut hidden = spec.grid_hidden.clone();
    hidden.sort_unstable();
    hidden.dedup();
    let mut dropout = spec.grid_dropout.clone();
    dropout.sort_by(f64::total_cmp);
    dropout.dedup();
    let combos: Vec<(usize, f64)> = hidden
        .iter()
        .flat_map(|&h| dropout.iter().map(move |&d| (h, d)))
        .collect();

    let vocab = build_vocab(train, 1);
    let (train_streams, dev_streams) = prepare_streams(spec, train, dev, &vocab)?;
    let base = ModelConfig {
        vocab_size: vocab.len(),
        n_intents: train.intent_set().len(),
        ..spec.config.clone()
    };
    let results: Vec<(Model<S>, TrainHistory)> = combos
        .par_iter()
        .map(|&(h, d)| {
            let config = ModelConfig {
                hidden_dim: h,
                dropout: d,
                ..base.clone()
            };
            train_on_streams(spec, config, &train_streams, &dev_streams)
        })
        .collect::<Result<_>>()?;

    let variant = spec.variant();
    let mut best_idx = 0;
    for (i, (_, h)) in results.iter().enumerate() {
        if h.best_dev_score(variant) > results[best_idx].1.best_dev_score(variant) {
            best_idx = i;
        }
    }
    let points = combos
        .iter()
        .zip(&results)
        .map(|(&(h, d), (_, hist))| GridPoint {
            hidden_dim: h,
            dropout: d,
            dev_score: hist.best_dev_score(variant),
            history: hist.clone(),
        })
        .collect();
    let (model, history) = results.into_iter().nth(best_idx).expect("non-empty grid");
    Ok(GridOutcome {
        best: TrainOutcome {
            model,
            vocab,
            intents: train.intent_set().to_vec(),
            history,
        },
        points,
    })
}
