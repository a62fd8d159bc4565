//! A checkpoint plus the sidecar files needed to feed it text:
//! `<ckpt>.vocab` (one token per line, id order) and `<ckpt>.intents`
//! (one label per line, id order).

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use islu::models::{load_checkpoint, save_checkpoint};
use islu::{Model, Vocabulary};

pub struct Bundle {
    pub model: Model,
    pub vocab: Vocabulary,
    pub intents: Vec<String>,
}

fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn history_path(path: &Path) -> PathBuf {
    sidecar(path, "history.csv")
}

impl Bundle {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.model.params, &self.model.config, path)?;
        let vocab = sidecar(path, "vocab");
        fs::write(&vocab, self.vocab.to_text()).with_context(|| format!("writing {}", vocab.display()))?;
        let intents = sidecar(path, "intents");
        let mut text = self.intents.join("\n");
        text.push('\n');
        fs::write(&intents, text).with_context(|| format!("writing {}", intents.display()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, config) = load_checkpoint::<f64>(path)?;
        let model = Model::new(config, params)?;
        let vocab_path = sidecar(path, "vocab");
        let text = fs::read_to_string(&vocab_path)
            .with_context(|| format!("reading {}", vocab_path.display()))?;
        let vocab = Vocabulary::parse(&text)?;
        if vocab.len() != model.config.vocab_size {
            bail!(
                "{} has {} entries but the checkpoint expects {}",
                vocab_path.display(),
                vocab.len(),
                model.config.vocab_size
            );
        }
        let intents_path = sidecar(path, "intents");
        let intents: Vec<String> = fs::read_to_string(&intents_path)
            .with_context(|| format!("reading {}", intents_path.display()))?
            .lines()
            .map(str::to_string)
            .collect();
        if model.variant().has_intent() && intents.len() != model.config.n_intents {
            bail!(
                "{} lists {} intents but the checkpoint expects {}",
                intents_path.display(),
                intents.len(),
                model.config.n_intents
            );
        }
        Ok(Bundle { model, vocab, intents })
    }
}
