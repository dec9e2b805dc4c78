//! Run configuration: one TOML file, `--set key=value` and command flags on
//! top, echoed into the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use statecot_core::corpus::{SegmentConfig, SynthParams};
use statecot_core::model::ModelConfig;
use statecot_core::reasoning::CorrectionConfig;
use statecot_core::training::TrainConfig;

pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub paths: Paths,
    /// Shape of the model. `base_vocab` and `n_patterns` are filled in from
    /// the vocabulary and the clustering.
    pub model: ModelConfig,
    pub synth: SynthSettings,
    pub segment: SegmentSettings,
    pub pretrain: TrainConfig,
    pub train: TrainConfig,
    pub correction: CorrectionConfig,
    pub generate: GenerateSettings,
    pub prune: PruneSettings,
    pub bench: BenchSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("run"),
            paths: Paths::default(),
            model: ModelConfig::default(),
            synth: SynthSettings::default(),
            segment: SegmentSettings::default(),
            pretrain: TrainConfig {
                lr: 3e-3,
                epochs: 20,
                batch_size: 8,
                ..TrainConfig::default()
            },
            train: TrainConfig::default(),
            correction: CorrectionConfig::default(),
            generate: GenerateSettings::default(),
            prune: PruneSettings::default(),
            bench: BenchSettings::default(),
        }
    }
}

/// Input and output files. Relative paths resolve against `out_dir`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub corpus: PathBuf,
    pub annotated: PathBuf,
    pub vocab: PathBuf,
    pub clusters: PathBuf,
    pub base: PathBuf,
    pub checkpoint: PathBuf,
    pub traces: PathBuf,
    pub pruned: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "corpus.jsonl".into(),
            annotated: "annotated.jsonl".into(),
            vocab: "vocab.json".into(),
            clusters: "clusters.json".into(),
            base: "base.json".into(),
            checkpoint: "adapters.json".into(),
            traces: "traces.jsonl".into(),
            pruned: "pruned.jsonl".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSettings {
    pub samples: usize,
    #[serde(flatten)]
    pub params: SynthParams,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            samples: 200,
            params: SynthParams::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    /// Next-token statistics of the corpus itself.
    Bigram,
    /// Hidden states and predictions of the base model (`paths.base`).
    Model,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentSettings {
    pub scorer: ScorerKind,
    #[serde(flatten)]
    pub cluster: SegmentConfig,
}

impl Default for SegmentSettings {
    fn default() -> Self {
        Self {
            scorer: ScorerKind::Bigram,
            cluster: SegmentConfig::synthetic(4, 0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateSettings {
    pub sample: bool,
    pub temperature: f64,
    pub top_p: f64,
    pub diversity: bool,
    pub max_steps: Option<usize>,
    pub step_cap: Option<usize>,
    /// Number of corpus prompts to generate for; all when unset.
    pub limit: Option<usize>,
}

impl Default for GenerateSettings {
    fn default() -> Self {
        Self {
            sample: false,
            temperature: 0.6,
            top_p: 0.95,
            diversity: true,
            max_steps: None,
            step_cap: None,
            limit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneSettings {
    pub keep_fraction: f64,
}

impl Default for PruneSettings {
    fn default() -> Self {
        Self { keep_fraction: 0.8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSettings {
    pub lengths: Vec<usize>,
    pub reps: usize,
    pub warmup: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub prompt_len: usize,
    pub step_len: usize,
    pub csv: PathBuf,
    pub gnuplot: PathBuf,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            lengths: vec![512, 1024, 2048, 4096, 8192],
            reps: 5,
            warmup: 1,
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            prompt_len: 16,
            step_len: 64,
            csv: "bench.csv".into(),
            gnuplot: "bench.dat".into(),
        }
    }
}

impl RunConfig {
    /// Defaults, overlaid with `file` when given, then with each
    /// `key.path=value` assignment.
    pub fn load(file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut value = toml::Table::try_from(RunConfig::default())?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let overlay: toml::Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            merge(&mut value, overlay);
        }
        for s in sets {
            let (key, raw) = s.split_once('=').with_context(|| format!("--set expects key=value, got {s:?}"))?;
            set_path(&mut value, key.trim(), parse_scalar(raw.trim()))?;
        }
        let cfg: RunConfig = toml::Value::Table(value).try_into().context("invalid configuration")?;
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Writes the configuration a command actually ran with.
    pub fn echo(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.out_dir).with_context(|| format!("creating {}", self.out_dir.display()))?;
        let path = self.out_dir.join(EFFECTIVE_CONFIG);
        fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    // anything that is not a TOML literal is taken as a bare string
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).with_context(|| format!("empty key in {key:?}"))?;
    let mut cur = table;
    for p in parts {
        cur = match cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new())) {
            toml::Value::Table(t) => t,
            _ => bail!("{key}: {p} is not a section"),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
