//! JSON-lines corpora and traces, model files and adapter checkpoints.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statecot_core::corpus::Vocab;
use statecot_core::model::{Group, Model, ModelConfig};
use statecot_core::numerics::Tensor;

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let mut v: Vocab = read_json(path)?;
    v.rebuild_index();
    Ok(v)
}

/// Hex SHA-256 of the model configuration's JSON form.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    format!("{:x}", Sha256::digest(json))
}

/// Trainable tensors only, tied to the configuration they were trained for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Self {
            config_hash: config_hash(&model.config),
            tensors: model
                .params()
                .into_iter()
                .filter(|p| p.1 == Group::Adapter)
                .map(|(n, _, t)| (n, t.clone()))
                .collect(),
        }
    }

    /// Copies the adapter tensors into `model`, which must have the same
    /// configuration.
    pub fn apply(&self, model: &mut Model) -> Result<()> {
        let want = config_hash(&model.config);
        ensure!(
            self.config_hash == want,
            "checkpoint was trained for config {} but the model has {}",
            self.config_hash,
            want
        );
        let mut seen = 0;
        for (name, group, t) in model.params_mut() {
            if group != Group::Adapter {
                continue;
            }
            let src = self.tensors.get(&name).with_context(|| format!("checkpoint lacks {name}"))?;
            ensure!(src.shape() == t.shape(), "{name}: shape {:?} vs {:?}", src.shape(), t.shape());
            *t = src.clone();
            seen += 1;
        }
        if seen != self.tensors.len() {
            bail!("checkpoint has {} tensors, model has {seen} trainable", self.tensors.len());
        }
        Ok(())
    }
}

/// A full model with the vocabulary it was built over.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub vocab: Vocab,
    pub model: Model,
}

pub fn read_model(path: &Path) -> Result<ModelFile> {
    let mut m: ModelFile = read_json(path)?;
    m.vocab.rebuild_index();
    m.model.config.validate().with_context(|| format!("model in {}", path.display()))?;
    Ok(m)
}
