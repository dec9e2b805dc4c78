//! Command-line driver. Every command loads the run configuration, applies
//! its own flags on top, echoes the result into the output directory and
//! then does its work.

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use statecot_core::bench::Schedule;
use statecot_core::corpus::{synth_corpus, synth_vocab, AnnotatedSample, ClusterModel, CoTSample};
use statecot_core::model::{Clock, DecodePolicy, GenerateOptions, GenerationTrace, InferenceModel, Model, EmbeddingSource, RuntimeOptions};
use statecot_core::numerics::Real;
use statecot_core::reasoning::CorrectionConfig;
use statecot_core::training::{train, StepLog};

use crate::bench::{bench_model, latency_sweep, write_csv, write_gnuplot, SweepConfig, Trend};
use crate::config::RunConfig;
use crate::io::{self, Checkpoint, ModelFile};
use crate::pipeline;
use crate::verify;

pub const PRECISION_VAR: &str = "STATECOT_PRECISION";

#[derive(Parser, Debug)]
#[command(name = "statecot", version, about = "Step-structured reasoning runtime: data, training, generation, benchmarks")]
pub struct Cli {
    /// TOML run configuration; defaults are used for anything it omits.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration value, e.g. `--set train.lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub sets: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic arithmetic corpus and its vocabulary.
    Synth {
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Find transition tokens, split steps, cluster them into patterns.
    Segment {
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train the adapters with distillation from the base model; pretrains
    /// a base model first unless one is given.
    Train {
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Generate step-structured traces for the corpus prompts.
    Generate(GenerateArgs),
    /// Score each annotated step and drop the weakest.
    Prune {
        #[arg(long)]
        keep: Option<f64>,
    },
    /// Latency and memory sweep over context lengths.
    Bench {
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Run the oracle suite; exits nonzero when any check fails.
    Verify,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long, conflicts_with = "sample")]
    pub greedy: bool,
    #[arg(long)]
    pub sample: bool,
    #[arg(long)]
    pub no_correction: bool,
    #[arg(long)]
    pub no_diversity: bool,
    #[arg(long)]
    pub alpha_max: Option<f64>,
    #[arg(long)]
    pub t_max: Option<usize>,
    #[arg(long)]
    pub limit: Option<usize>,
}

/// A request the command line should have rejected; reported with exit 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    pub fn from_env() -> Result<Self> {
        match std::env::var(PRECISION_VAR).as_deref() {
            Err(_) | Ok("f64") => Ok(Precision::F64),
            Ok("f32") => Ok(Precision::F32),
            Ok(other) => Err(UsageError(format!("{PRECISION_VAR} must be f64 or f32, got {other:?}")).into()),
        }
    }
}

struct WallClock(Instant);

impl Clock for WallClock {
    fn now_ms(&mut self) -> f64 {
        self.0.elapsed().as_secs_f64() * 1e3
    }
}

#[derive(Serialize, Deserialize)]
pub struct ClusterFile {
    pub transitions: Vec<String>,
    pub model: ClusterModel,
    pub refine_history: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct TraceRecord {
    pub index: usize,
    pub query: String,
    pub expected: String,
    pub answer: String,
    pub trace: GenerationTrace,
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.sets)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = cli.out_dir {
        cfg.out_dir = d;
    }
    let precision = Precision::from_env()?;
    match cli.command {
        Command::Synth { samples } => {
            if let Some(n) = samples {
                cfg.synth.samples = n;
            }
            cfg.echo()?;
            synth(&cfg)
        }
        Command::Segment { k } => {
            if let Some(k) = k {
                cfg.segment.cluster.k = k;
            }
            cfg.echo()?;
            segment(&cfg)
        }
        Command::Train { base, epochs } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.echo()?;
            train_cmd(&cfg, base)
        }
        Command::Generate(args) => {
            apply_generate_flags(&mut cfg, &args);
            cfg.echo()?;
            let correction = if args.no_correction {
                CorrectionConfig::disabled()
            } else {
                cfg.correction
            };
            match precision {
                Precision::F64 => generate::<f64>(&cfg, correction),
                Precision::F32 => generate::<f32>(&cfg, correction),
            }
        }
        Command::Prune { keep } => {
            if let Some(k) = keep {
                cfg.prune.keep_fraction = k;
            }
            cfg.echo()?;
            match precision {
                Precision::F64 => prune::<f64>(&cfg),
                Precision::F32 => prune::<f32>(&cfg),
            }
        }
        Command::Bench { lengths, reps } => {
            if let Some(l) = lengths {
                cfg.bench.lengths = l;
            }
            if let Some(r) = reps {
                cfg.bench.reps = r;
            }
            cfg.echo()?;
            match precision {
                Precision::F64 => bench::<f64>(&cfg),
                Precision::F32 => bench::<f32>(&cfg),
            }
        }
        Command::Verify => {
            cfg.echo()?;
            let checks = verify::run_all(cfg.seed);
            for c in &checks {
                println!("{}", c.line());
            }
            io::write_json(&cfg.out_dir.join("verify.json"), &checks)?;
            verify::all_pass(&checks)
        }
    }
}

fn apply_generate_flags(cfg: &mut RunConfig, args: &GenerateArgs) {
    let g = &mut cfg.generate;
    if args.sample {
        g.sample = true;
    }
    if args.greedy {
        g.sample = false;
    }
    if args.no_diversity {
        g.diversity = false;
    }
    if args.limit.is_some() {
        g.limit = args.limit;
    }
    if let Some(a) = args.alpha_max {
        cfg.correction.alpha_max = a;
    }
    if let Some(t) = args.t_max {
        cfg.correction.t_max = t;
    }
    if args.no_correction {
        cfg.correction.enabled = false;
    }
}

fn synth(cfg: &RunConfig) -> Result<()> {
    let corpus = synth_corpus(cfg.seed, cfg.synth.samples, &cfg.synth.params);
    io::write_jsonl(&cfg.resolve(&cfg.paths.corpus), &corpus)?;
    io::write_json(&cfg.resolve(&cfg.paths.vocab), &synth_vocab(&cfg.synth.params))?;
    println!("wrote {} samples", corpus.len());
    Ok(())
}

fn segment(cfg: &RunConfig) -> Result<()> {
    let corpus: Vec<CoTSample> = io::read_jsonl(&cfg.resolve(&cfg.paths.corpus))?;
    let vocab = io::read_vocab(&cfg.resolve(&cfg.paths.vocab))?;
    let base = match cfg.segment.scorer {
        crate::config::ScorerKind::Model => Some(io::read_model(&cfg.resolve(&cfg.paths.base))?.model),
        crate::config::ScorerKind::Bigram => None,
    };
    let seg = pipeline::segment(&corpus, &vocab, cfg.segment.scorer, base.as_ref(), &cfg.segment.cluster)?;
    io::write_jsonl(&cfg.resolve(&cfg.paths.annotated), &seg.samples)?;
    let transitions = seg
        .transitions
        .iter()
        .map(|&t| vocab.word(t).map(String::from))
        .collect::<statecot_core::Result<Vec<_>>>()?;
    println!("transition tokens: {}", transitions.join(" "));
    io::write_json(
        &cfg.resolve(&cfg.paths.clusters),
        &ClusterFile {
            transitions,
            model: seg.model,
            refine_history: seg.refine_history,
        },
    )
}

fn write_log(path: &std::path::Path, log: &[StepLog]) -> Result<()> {
    let mut w = csv::Writer::from_writer(io::create(path)?);
    w.write_record(["step", "epoch", "lr", "loss_ar", "loss_kd", "loss_total"])?;
    for s in log {
        w.write_record([
            s.step.to_string(),
            s.epoch.to_string(),
            format!("{:e}", s.lr),
            format!("{:.6}", s.loss_ar),
            format!("{:.6}", s.loss_kd),
            format!("{:.6}", s.loss_total),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn train_cmd(cfg: &RunConfig, base: Option<PathBuf>) -> Result<()> {
    let annotated: Vec<AnnotatedSample> = io::read_jsonl(&cfg.resolve(&cfg.paths.annotated))?;
    let vocab = io::read_vocab(&cfg.resolve(&cfg.paths.vocab))?;
    let k = annotated
        .iter()
        .flat_map(|s| s.steps.iter().map(|x| x.pattern))
        .max()
        .unwrap_or(1)
        .max(cfg.segment.cluster.k);
    let config = pipeline::model_config(&cfg.model, &vocab, k);
    let data = pipeline::encode_all(&annotated, &vocab, &config.tokens())?;
    let mut model = match base {
        Some(p) => {
            let f = io::read_model(&p)?;
            anyhow::ensure!(f.vocab == vocab, "base model in {} uses another vocabulary", p.display());
            f.model
        }
        None => {
            let mut log = Vec::new();
            let mut model = Model::random(config, cfg.seed)?;
            statecot_core::training::pretrain_base(&mut model, &data, &cfg.pretrain, &mut |s| log.push(s.clone()))?;
            write_log(&cfg.out_dir.join("pretrain_report.csv"), &log)?;
            io::write_json(
                &cfg.resolve(&cfg.paths.base),
                &ModelFile {
                    vocab: vocab.clone(),
                    model: model.clone(),
                },
            )?;
            model
        }
    };
    let mut log = Vec::new();
    let report = train(&mut model, &data, &cfg.train, &mut |s| log.push(s.clone()))?;
    write_log(&cfg.out_dir.join("train_report.csv"), &log)?;
    io::write_json(&cfg.resolve(&cfg.paths.checkpoint), &Checkpoint::from_model(&model))?;
    println!(
        "{} steps, {} samples skipped, {} trainable parameters, base frozen: {}",
        report.steps.len(),
        report.skipped,
        report.trainable_params,
        report.frozen_unchanged()
    );
    Ok(())
}

/// Base model with the trained adapters applied, and its vocabulary.
fn load_reasoning_model(cfg: &RunConfig) -> Result<ModelFile> {
    let mut f = io::read_model(&cfg.resolve(&cfg.paths.base))?;
    let ck: Checkpoint = io::read_json(&cfg.resolve(&cfg.paths.checkpoint))?;
    ck.apply(&mut f.model)?;
    Ok(f)
}

fn generate<T: Real>(cfg: &RunConfig, correction: CorrectionConfig) -> Result<()> {
    let f = load_reasoning_model(cfg)?;
    let rt = InferenceModel::<T>::new(&f.model, EmbeddingSource::Markers)?;
    let annotated: Vec<AnnotatedSample> = io::read_jsonl(&cfg.resolve(&cfg.paths.annotated))?;
    let g = &cfg.generate;
    let mut opts = GenerateOptions::new(RuntimeOptions::reasoning(correction));
    opts.diversity = g.diversity;
    opts.max_steps = g.max_steps;
    opts.step_cap = g.step_cap;
    let mut records = Vec::new();
    let mut clock = WallClock(Instant::now());
    for (i, s) in annotated.iter().enumerate().take(g.limit.unwrap_or(usize::MAX)) {
        if g.sample {
            opts.policy = DecodePolicy::Nucleus {
                temperature: g.temperature,
                top_p: g.top_p,
                seed: cfg.seed.wrapping_add(i as u64),
            };
        }
        let prompt = pipeline::prompt_tokens(&f.vocab, &s.query);
        let trace = rt.generate(&prompt, &opts, &mut clock).with_context(|| format!("sample {i}"))?;
        records.push(TraceRecord {
            index: i,
            query: s.query.clone(),
            expected: s.answer.clone(),
            answer: pipeline::answer_text(&f.vocab, &trace)?,
            trace,
        });
    }
    let correct = records.iter().filter(|r| r.answer.trim() == r.expected.trim()).count();
    io::write_jsonl(&cfg.resolve(&cfg.paths.traces), &records)?;
    println!("{} traces, {correct} answers match", records.len());
    Ok(())
}

fn prune<T: Real>(cfg: &RunConfig) -> Result<()> {
    let f = load_reasoning_model(cfg)?;
    let rt = InferenceModel::<T>::new(&f.model, EmbeddingSource::Markers)?;
    let annotated: Vec<AnnotatedSample> = io::read_jsonl(&cfg.resolve(&cfg.paths.annotated))?;
    let runtime = RuntimeOptions::reasoning(cfg.correction);
    let mut pruned = Vec::with_capacity(annotated.len());
    let mut w = csv::Writer::from_writer(io::create(&cfg.out_dir.join("qualities.csv"))?);
    w.write_record(["index", "steps", "kept", "quality"])?;
    for (i, s) in annotated.iter().enumerate() {
        if s.steps.is_empty() {
            pruned.push(s.clone());
            continue;
        }
        let p = pipeline::prune_sample(&rt, runtime, &f.vocab, s, cfg.prune.keep_fraction)
            .with_context(|| format!("sample {i}"))?;
        w.write_record([
            i.to_string(),
            s.steps.len().to_string(),
            p.sample.steps.len().to_string(),
            format!("{:.6}", p.quality),
        ])?;
        pruned.push(p.sample);
    }
    w.flush()?;
    io::write_jsonl(&cfg.resolve(&cfg.paths.pruned), &pruned)?;
    let before: usize = annotated.iter().map(|s| s.steps.len()).sum();
    let after: usize = pruned.iter().map(|s| s.steps.len()).sum();
    println!("kept {after} of {before} steps");
    Ok(())
}

fn bench<T: Real>(cfg: &RunConfig) -> Result<()> {
    let b = &cfg.bench;
    let max_len = b.lengths.iter().copied().max().context("no bench lengths")?;
    let model = bench_model(b.n_layers, b.d_model, b.n_heads, max_len, cfg.seed)?;
    let sweep = SweepConfig {
        lengths: b.lengths.iter().copied().collect::<BTreeSet<_>>().into_iter().collect(),
        reps: b.reps,
        warmup: b.warmup,
        schedule: Schedule {
            prompt_len: b.prompt_len,
            step_len: b.step_len,
        },
        require_single_thread: true,
    };
    let mut notes = Vec::new();
    let points = latency_sweep::<T>(&model, &sweep, &mut notes)?;
    for n in &notes {
        eprintln!("note: {n}");
    }
    write_csv(&points, io::create(&cfg.resolve(&b.csv))?)?;
    write_gnuplot(&points, io::create(&cfg.resolve(&b.gnuplot))?)?;
    for p in &points {
        println!(
            "{:>6} {:<8} {:.4} ms/token, peak cache {}",
            p.context_len,
            p.mode.name(),
            p.per_token_ms,
            p.cache_positions_peak
        );
    }
    if let Ok(t) = Trend::from_points(&points) {
        io::write_json(&cfg.out_dir.join("bench_trend.json"), &t)?;
    }
    Ok(())
}
