//! Adapter training: next-token loss under the segmented mask plus
//! distillation toward the full-attention base model, with every base
//! weight frozen.

mod optim;

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{lr_at, AdamW};

use crate::corpus::EncodedSample;
use crate::error::{contract, Error, Result};
use crate::model::{forward_logits, register_params, EmbeddingSource, Group, Model, RuntimeOptions};
use crate::numerics::{backward, Tape, Tensor, Var};
use crate::reasoning::CorrectionConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub beta_kd: f64,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_sample_len: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Apply the step correction between spans during training forwards.
    pub train_with_correction: bool,
    pub correction: CorrectionConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta_kd: 0.2,
            lr: 2e-4,
            warmup_ratio: 0.03,
            epochs: 2,
            batch_size: 32,
            max_sample_len: 1024,
            weight_decay: 0.0,
            seed: 0,
            train_with_correction: false,
            correction: CorrectionConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta_kd < 0.0 || !(0.0..1.0).contains(&self.warmup_ratio) || self.batch_size == 0 || self.lr <= 0.0 {
            return Err(contract!("invalid training config {:?}", self));
        }
        Ok(())
    }

    /// Runtime options of the model being trained.
    pub fn student_options(&self) -> RuntimeOptions {
        RuntimeOptions::reasoning(if self.train_with_correction {
            self.correction
        } else {
            CorrectionConfig::disabled()
        })
    }
}

/// Log-probabilities of the base model under full causal attention with no
/// linear branch.
pub fn teacher_log_probs(model: &Model, sample: &EncodedSample) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = register_params(&mut tape, model, None);
    let logits = forward_logits(
        &mut tape,
        model,
        &vars,
        &sample.tokens,
        &sample.layout,
        &RuntimeOptions::vanilla(),
        EmbeddingSource::Markers,
    )?;
    let lp = tape.log_softmax(logits);
    Ok(tape.value(lp).clone())
}

/// Loss nodes of one sample on a tape.
pub struct LossVars {
    pub ar: Var,
    pub kd: Option<Var>,
    pub total: Var,
}

/// Records the student forward and both losses. `teacher` holds the base
/// model's log-probabilities; without it only the next-token loss is built.
#[allow(clippy::too_many_arguments)]
pub fn record_losses(
    tape: &mut Tape,
    model: &Model,
    vars: &crate::model::ParamVars,
    sample: &EncodedSample,
    opts: &RuntimeOptions,
    source: EmbeddingSource,
    teacher: Option<&Arc<Tensor>>,
    beta_kd: f64,
) -> Result<LossVars> {
    let logits = forward_logits(tape, model, vars, &sample.tokens, &sample.layout, opts, source)?;
    let logq = tape.log_softmax(logits);
    let rows = sample.layout.target_rows();
    let picks: Vec<(usize, usize)> = rows.clone().map(|r| (r, sample.tokens[r + 1])).collect();
    let ar = tape.nll(logq, Arc::new(picks))?;
    let Some(teacher) = teacher else {
        return Ok(LossVars { ar, kd: None, total: ar });
    };
    if teacher.shape() != tape.value(logq).shape() {
        return Err(contract!(
            "teacher vocabulary {:?} differs from student {:?}",
            teacher.shape(),
            tape.value(logq).shape()
        ));
    }
    let kd = tape.kl(teacher.clone(), logq, Arc::new(rows.collect()))?;
    let weighted = tape.scale(kd, beta_kd);
    let total = tape.add(ar, weighted)?;
    Ok(LossVars {
        ar,
        kd: Some(kd),
        total,
    })
}

/// Mean next-token loss over the thinking and answer positions.
pub fn ar_loss(model: &Model, sample: &EncodedSample, opts: &RuntimeOptions) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = register_params(&mut tape, model, None);
    let l = record_losses(&mut tape, model, &vars, sample, opts, EmbeddingSource::Markers, None, 0.0)?;
    Ok(tape.value(l.ar).data()[0])
}

/// Mean `KL(base ‖ model)` over the thinking and answer positions.
pub fn kd_loss(base: &Model, model: &Model, sample: &EncodedSample, opts: &RuntimeOptions) -> Result<f64> {
    if base.config.vocab() != model.config.vocab() {
        return Err(contract!("vocabulary mismatch"));
    }
    let teacher = Arc::new(teacher_log_probs(base, sample)?);
    let mut tape = Tape::new();
    let vars = register_params(&mut tape, model, None);
    let l = record_losses(&mut tape, model, &vars, sample, opts, EmbeddingSource::Markers, Some(&teacher), 1.0)?;
    Ok(tape.value(l.kd.expect("teacher given")).data()[0])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_ar: f64,
    pub loss_kd: f64,
    pub loss_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    pub skipped: usize,
    pub frozen_checksum_before: u64,
    pub frozen_checksum_after: u64,
    pub trainable_params: usize,
}

impl TrainReport {
    pub fn frozen_unchanged(&self) -> bool {
        self.frozen_checksum_before == self.frozen_checksum_after
    }
}

/// What a training run updates and how the student runs.
struct Plan {
    group: Group,
    opts: RuntimeOptions,
    source: EmbeddingSource,
    distill: bool,
}

/// Trains the adapter group with `L_AR + β·L_KD`. The teacher is the same
/// model's base weights (including the base rows of the marker tokens), so
/// it is fixed for the whole run.
pub fn train(model: &mut Model, corpus: &[EncodedSample], cfg: &TrainConfig, on_step: &mut dyn FnMut(&StepLog)) -> Result<TrainReport> {
    let plan = Plan {
        group: Group::Adapter,
        opts: cfg.student_options(),
        source: EmbeddingSource::Markers,
        distill: true,
    };
    run(model, corpus, cfg, &plan, on_step)
}

/// Trains every base weight with the next-token loss under ordinary causal
/// attention, then copies the marker rows into the adapter table.
pub fn pretrain_base(model: &mut Model, corpus: &[EncodedSample], cfg: &TrainConfig, on_step: &mut dyn FnMut(&StepLog)) -> Result<TrainReport> {
    let plan = Plan {
        group: Group::Base,
        opts: RuntimeOptions::vanilla(),
        source: EmbeddingSource::Base,
        distill: false,
    };
    let report = run(model, corpus, cfg, &plan, on_step)?;
    model.sync_marker_embeddings();
    Ok(report)
}

fn run(model: &mut Model, corpus: &[EncodedSample], cfg: &TrainConfig, plan: &Plan, on_step: &mut dyn FnMut(&StepLog)) -> Result<TrainReport> {
    cfg.validate()?;
    let frozen = match plan.group {
        Group::Adapter => Group::Base,
        Group::Base => Group::Adapter,
    };
    let before = model.checksum(frozen);
    let usable: Vec<usize> = (0..corpus.len())
        .filter(|&i| corpus[i].tokens.len() <= cfg.max_sample_len)
        .collect();
    let skipped = corpus.len() - usable.len();
    if usable.is_empty() {
        return Err(contract!("no training sample fits max_sample_len {}", cfg.max_sample_len));
    }
    let teachers: Vec<Option<Arc<Tensor>>> = if plan.distill {
        // marker rows of the reference are the frozen base rows
        let mut base = model.clone();
        base.sync_marker_embeddings();
        let model = &base;
        corpus
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if usable.contains(&i) {
                    teacher_log_probs(model, s).map(|t| Some(Arc::new(t)))
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<_>>()?
    } else {
        alloc::vec![None; corpus.len()]
    };
    let steps_per_epoch = usable.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut logs = Vec::with_capacity(total_steps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order = usable.clone();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<(String, Tensor)> = Vec::new();
            let (mut ar, mut kd, mut total) = (0.0, 0.0, 0.0);
            for &i in batch {
                let mut tape = Tape::new();
                let vars = register_params(&mut tape, model, Some(plan.group));
                let l = record_losses(
                    &mut tape,
                    model,
                    &vars,
                    &corpus[i],
                    &plan.opts,
                    plan.source,
                    teachers[i].as_ref(),
                    cfg.beta_kd,
                )?;
                let lt = tape.value(l.total).data()[0];
                if !lt.is_finite() {
                    return Err(Error::NonFinite {
                        step,
                        detail: format!(
                            "sample {i} (len {}), lr {:.3e}, loss_ar {}, trainable norm {:.4e}",
                            corpus[i].tokens.len(),
                            lr_at(step, total_steps, cfg),
                            tape.value(l.ar).data()[0],
                            group_norm(model, plan.group)
                        ),
                    });
                }
                ar += tape.value(l.ar).data()[0];
                kd += l.kd.map_or(0.0, |k| tape.value(k).data()[0]);
                total += lt;
                let mut g = backward(&tape, l.total)?;
                for (k, (name, v)) in vars.trainable.iter().enumerate() {
                    let gt = g.take(*v).unwrap_or_else(|| Tensor::zeros(tape.value(*v).shape()));
                    if grads.len() <= k {
                        grads.push((name.clone(), gt));
                    } else {
                        grads[k].1.data_mut().iter_mut().zip(gt.data()).for_each(|(a, b)| *a += b);
                    }
                }
            }
            let b = batch.len() as f64;
            for (_, g) in grads.iter_mut() {
                g.data_mut().iter_mut().for_each(|x| *x /= b);
            }
            let lr = lr_at(step, total_steps, cfg);
            opt.step(model, plan.group, &grads, lr)?;
            let log = StepLog {
                step,
                epoch,
                lr,
                loss_ar: ar / b,
                loss_kd: kd / b,
                loss_total: total / b,
            };
            on_step(&log);
            logs.push(log);
            step += 1;
        }
    }
    Ok(TrainReport {
        steps: logs,
        skipped,
        frozen_checksum_before: before,
        frozen_checksum_after: model.checksum(frozen),
        trainable_params: model.count(plan.group),
    })
}

fn group_norm(model: &Model, group: Group) -> f64 {
    libm::sqrt(
        model
            .params()
            .iter()
            .filter(|p| p.1 == group)
            .map(|p| p.2.dot(p.2))
            .sum(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub rel_error_ar: f64,
    pub rel_error_kd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Frozen parameters that nonetheless received a gradient.
    pub frozen_with_grad: usize,
}

fn rel_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff = libm::sqrt(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum());
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares backward gradients of both losses for every adapter parameter
/// against central differences. Errors are norm-relative per tensor.
pub fn grad_check(base: &Model, model: &Model, sample: &EncodedSample, opts: &RuntimeOptions, eps: f64) -> Result<GradCheckReport> {
    let teacher = Arc::new(teacher_log_probs(base, sample)?);
    let eval = |m: &Model| -> Result<(f64, f64)> {
        let mut tape = Tape::new();
        let vars = register_params(&mut tape, m, None);
        let l = record_losses(&mut tape, m, &vars, sample, opts, EmbeddingSource::Markers, Some(&teacher), 1.0)?;
        Ok((tape.value(l.ar).data()[0], tape.value(l.kd.expect("kd")).data()[0]))
    };
    let analytic = |which: usize| -> Result<Vec<(String, Tensor, bool)>> {
        let mut tape = Tape::new();
        let vars = register_params(&mut tape, model, Some(Group::Adapter));
        let l = record_losses(&mut tape, model, &vars, sample, opts, EmbeddingSource::Markers, Some(&teacher), 1.0)?;
        let loss = if which == 0 { l.ar } else { l.kd.expect("kd") };
        let g = backward(&tape, loss)?;
        let frozen = [vars.embed, vars.head, vars.final_norm];
        let leak = frozen.iter().any(|v| g.get(*v).is_some());
        Ok(vars
            .trainable
            .iter()
            .map(|(n, v)| (n.clone(), g.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(*v).shape())), leak))
            .collect())
    };
    let ga = analytic(0)?;
    let gk = analytic(1)?;
    let frozen_with_grad = usize::from(ga.iter().chain(&gk).any(|e| e.2));
    let mut entries = Vec::new();
    let mut coordinates = 0;
    let mut probe = model.clone();
    let names: Vec<String> = ga.iter().map(|e| e.0.clone()).collect();
    for (k, name) in names.iter().enumerate() {
        let shape = ga[k].1.shape().to_vec();
        let mut num_ar = Tensor::zeros(&shape);
        let mut num_kd = Tensor::zeros(&shape);
        for j in 0..num_ar.len() {
            let orig = param_mut(&mut probe, name)?.data()[j];
            param_mut(&mut probe, name)?.data_mut()[j] = orig + eps;
            let (pa, pk) = eval(&probe)?;
            param_mut(&mut probe, name)?.data_mut()[j] = orig - eps;
            let (ma, mk) = eval(&probe)?;
            param_mut(&mut probe, name)?.data_mut()[j] = orig;
            num_ar.data_mut()[j] = (pa - ma) / (2.0 * eps);
            num_kd.data_mut()[j] = (pk - mk) / (2.0 * eps);
            coordinates += 1;
        }
        entries.push(GradCheckEntry {
            name: name.clone(),
            rel_error_ar: rel_error(&ga[k].1, &num_ar),
            rel_error_kd: rel_error(&gk[k].1, &num_kd),
        });
    }
    let max_rel_error = entries
        .iter()
        .map(|e| e.rel_error_ar.max(e.rel_error_kd))
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        entries,
        max_rel_error,
        coordinates,
        frozen_with_grad,
    })
}

fn param_mut<'a>(model: &'a mut Model, name: &str) -> Result<&'a mut Tensor> {
    model
        .params_mut()
        .into_iter()
        .find(|p| p.0 == name)
        .map(|p| p.2)
        .ok_or_else(|| contract!("no parameter named {name}"))
}
