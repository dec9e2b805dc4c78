//! Step ledger: per-step state deltas, their running mean (the global
//! reasoning direction), the correction blend applied when a step closes, and
//! cosine process rewards.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::attention::StateMatrix;
use crate::error::{contract, Error, Result};
use crate::numerics::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrectionConfig {
    pub alpha_max: f64,
    /// Maximum number of reasoning steps; also the ramp length of α.
    pub t_max: usize,
    pub enabled: bool,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self {
            alpha_max: 0.4,
            t_max: 40,
            enabled: true,
        }
    }
}

impl CorrectionConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha_max) || self.t_max == 0 {
            return Err(contract!("invalid correction config {:?}", self));
        }
        Ok(())
    }
}

/// Linear ramp `t / t_max` capped at `alpha_max`.
pub fn alpha_schedule(t: usize, cfg: &CorrectionConfig) -> Result<f64> {
    if t < 1 {
        return Err(contract!("step index starts at 1"));
    }
    cfg.validate()?;
    Ok((t as f64 / cfg.t_max as f64).min(cfg.alpha_max))
}

/// Running mean after the `t`-th delta: `(1 − 1/t)·mean + (1/t)·delta`.
pub fn momentum_update<T: Real>(global_dir: &StateMatrix<T>, raw_delta: &StateMatrix<T>, t: usize) -> StateMatrix<T> {
    assert!(t >= 1, "momentum step index starts at 1");
    let w = T::one() / T::lit(t as f64);
    let keep = T::one() - w;
    let data = global_dir
        .as_slice()
        .iter()
        .zip(raw_delta.as_slice())
        .map(|(&g, &d)| keep * g + w * d)
        .collect();
    StateMatrix::from_data(global_dir.heads(), global_dir.d_head(), data)
}

/// Cosine between a global direction and a step delta, treating each layer's
/// matrices as flat vectors and averaging over layers. A layer where exactly
/// one side is zero contributes 0.
pub fn process_reward<T: Real>(global_dir: &[StateMatrix<T>], raw_delta: &[StateMatrix<T>]) -> Result<f64> {
    if global_dir.len() != raw_delta.len() || global_dir.is_empty() {
        return Err(contract!(
            "reward over {} vs {} layers",
            global_dir.len(),
            raw_delta.len()
        ));
    }
    let mut total = 0.0;
    for (g, d) in global_dir.iter().zip(raw_delta) {
        let (ng, nd) = (g.norm().to_f64(), d.norm().to_f64());
        if ng == 0.0 && nd == 0.0 {
            return Err(Error::UndefinedReward);
        }
        if ng == 0.0 || nd == 0.0 {
            continue;
        }
        let c = g.frobenius_dot(d).to_f64() / (ng * nd);
        total += c.clamp(-1.0, 1.0);
    }
    Ok(total / global_dir.len() as f64)
}

/// Rewards of every step of a finished trace against the trace's mean
/// step delta, which is what the momentum direction converges to.
pub fn rewards_against_mean<T: Real>(raw_deltas: &[Vec<StateMatrix<T>>]) -> Result<Vec<f64>> {
    let Some(first) = raw_deltas.first() else {
        return Ok(Vec::new());
    };
    let mut mean: Vec<StateMatrix<T>> = first
        .iter()
        .map(|m| StateMatrix::zeros(m.heads(), m.d_head()))
        .collect();
    for (t, d) in raw_deltas.iter().enumerate() {
        if d.len() != mean.len() {
            return Err(contract!("step {t} has {} layers, expected {}", d.len(), mean.len()));
        }
        for (g, x) in mean.iter_mut().zip(d) {
            *g = momentum_update(g, x, t + 1);
        }
    }
    raw_deltas.iter().map(|d| process_reward(&mean, d)).collect()
}

/// Indices of the steps kept when the lowest-reward ones are dropped; the
/// kept count is `ceil(keep_fraction · n)` and ties favour earlier steps.
pub fn kept_step_indices(rewards: &[f64], keep_fraction: f64) -> Result<Vec<usize>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(contract!("keep_fraction {} outside (0, 1]", keep_fraction));
    }
    let n = rewards.len();
    let keep = libm::ceil(keep_fraction * n as f64) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| rewards[b].total_cmp(&rewards[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order.into_iter().take(keep.min(n)).collect();
    kept.sort_unstable();
    Ok(kept)
}

/// Mean process reward of a sample.
pub fn sample_quality(rewards: &[f64]) -> Result<f64> {
    if rewards.is_empty() {
        return Err(contract!("sample quality of zero steps"));
    }
    Ok(rewards.iter().sum::<f64>() / rewards.len() as f64)
}

/// Outcome of closing one step.
#[derive(Clone, Debug)]
pub struct StepReport<T> {
    /// 1-based step index.
    pub step_index: usize,
    pub alpha: f64,
    pub corrected: bool,
    /// `S_t − S_{t−1}` per layer before correction.
    pub raw_delta: Vec<StateMatrix<T>>,
    /// Frobenius norm of the raw delta over all layers.
    pub raw_delta_norm: f64,
    /// Cosine against the global direction of the preceding steps.
    pub reward: Option<f64>,
}

/// Per-context bookkeeping of step boundaries.
#[derive(Clone, Debug)]
pub struct StepLedger<T> {
    snapshots: Option<Vec<StateMatrix<T>>>,
    global_dir: Vec<StateMatrix<T>>,
    steps_completed: usize,
    config: CorrectionConfig,
}

impl<T: Real> StepLedger<T> {
    pub fn new(n_layers: usize, heads: usize, d_head: usize, config: CorrectionConfig) -> Self {
        Self {
            snapshots: None,
            global_dir: (0..n_layers).map(|_| StateMatrix::zeros(heads, d_head)).collect(),
            steps_completed: 0,
            config,
        }
    }

    pub fn config(&self) -> &CorrectionConfig {
        &self.config
    }

    pub fn steps_completed(&self) -> usize {
        self.steps_completed
    }

    pub fn global_dir(&self) -> &[StateMatrix<T>] {
        &self.global_dir
    }

    pub fn snapshots(&self) -> Option<&[StateMatrix<T>]> {
        self.snapshots.as_deref()
    }

    pub fn is_open(&self) -> bool {
        self.snapshots.is_some()
    }

    /// Records `S_{t−1}` for the step about to start.
    pub fn begin_step(&mut self, states: &[StateMatrix<T>]) -> Result<()> {
        if self.snapshots.is_some() {
            return Err(contract!("begin_step while a step is open"));
        }
        self.snapshots = Some(states.to_vec());
        Ok(())
    }

    /// Closes the open step: measures the raw delta, blends it with the
    /// global direction of earlier steps, writes `S_{t−1} + blended` back into
    /// `states`, and folds the raw delta into the running mean.
    pub fn end_step(&mut self, states: &mut [StateMatrix<T>]) -> Result<StepReport<T>> {
        let snaps = self
            .snapshots
            .take()
            .ok_or_else(|| contract!("end_step without begin_step"))?;
        let t = self.steps_completed + 1;
        let alpha = if self.config.enabled {
            alpha_schedule(t, &self.config)?
        } else {
            0.0
        };
        let raw: Vec<StateMatrix<T>> = states.iter().zip(&snaps).map(|(s, p)| s.minus(p)).collect();
        let reward = process_reward(&self.global_dir, &raw).ok();
        let corrected = alpha > 0.0;
        if corrected {
            let a = T::lit(alpha);
            let keep = T::one() - a;
            for ((s, snap), (d, g)) in states
                .iter_mut()
                .zip(&snaps)
                .zip(raw.iter().zip(&self.global_dir))
            {
                for (((x, &p), &dx), &gx) in s
                    .as_mut_slice()
                    .iter_mut()
                    .zip(snap.as_slice())
                    .zip(d.as_slice())
                    .zip(g.as_slice())
                {
                    *x = p + (keep * dx + a * gx);
                }
            }
        }
        self.global_dir = self
            .global_dir
            .iter()
            .zip(&raw)
            .map(|(g, d)| momentum_update(g, d, t))
            .collect();
        self.steps_completed = t;
        let raw_delta_norm = libm::sqrt(raw.iter().map(|d| d.frobenius_dot(d).to_f64()).sum());
        Ok(StepReport {
            step_index: t,
            alpha,
            corrected,
            raw_delta: raw,
            raw_delta_norm,
            reward,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_state(rng: &mut ChaCha8Rng) -> StateMatrix<f64> {
        StateMatrix::from_data(2, 3, (0..18).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn scaled(s: &StateMatrix<f64>, c: f64) -> StateMatrix<f64> {
        StateMatrix::from_data(s.heads(), s.d_head(), s.as_slice().iter().map(|x| x * c).collect())
    }

    #[test]
    fn alpha_examples() {
        let cfg = CorrectionConfig::default();
        assert!((alpha_schedule(1, &cfg).unwrap() - 0.025).abs() < 1e-15);
        assert_eq!(alpha_schedule(16, &cfg).unwrap(), 0.4);
        let full = CorrectionConfig {
            alpha_max: 1.0,
            ..cfg
        };
        assert_eq!(alpha_schedule(40, &full).unwrap(), 1.0);
        assert!(alpha_schedule(0, &cfg).is_err());
    }

    #[test]
    fn momentum_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let prior = rand_state(&mut rng);
        let d = rand_state(&mut rng);
        assert_eq!(momentum_update(&prior, &d, 1), d);

        let mut eye = StateMatrix::<f64>::zeros(1, 2);
        eye.head_mut(0)[0] = 1.0;
        eye.head_mut(0)[3] = 1.0;
        let g = momentum_update(&StateMatrix::zeros(1, 2), &eye, 1);
        let g = momentum_update(&g, &scaled(&eye, 3.0), 2);
        assert_eq!(g, scaled(&eye, 2.0));
    }

    #[test]
    fn momentum_equals_direct_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let deltas: Vec<_> = (0..10).map(|_| rand_state(&mut rng)).collect();
        let mut g = StateMatrix::zeros(2, 3);
        for (i, d) in deltas.iter().enumerate() {
            g = momentum_update(&g, d, i + 1);
        }
        let mut sum = vec![0.0; 18];
        for d in &deltas {
            sum.iter_mut().zip(d.as_slice()).for_each(|(s, x)| *s += x);
        }
        for (a, s) in g.as_slice().iter().zip(&sum) {
            assert!((a - s / 10.0).abs() < 1e-9);
        }
    }

    #[test]
    fn reward_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = rand_state(&mut rng);
        assert!((process_reward(&[g.clone()], &[g.clone()]).unwrap() - 1.0).abs() < 1e-12);
        assert!((process_reward(&[g.clone()], &[scaled(&g, -1.0)]).unwrap() + 1.0).abs() < 1e-12);
        let mut e1 = StateMatrix::<f64>::zeros(1, 2);
        e1.head_mut(0)[0] = 1.0;
        let mut e2 = StateMatrix::<f64>::zeros(1, 2);
        e2.head_mut(0)[3] = 1.0;
        assert_eq!(process_reward(&[e1], &[e2]).unwrap(), 0.0);
        let z = StateMatrix::<f64>::zeros(1, 2);
        assert_eq!(process_reward(&[z.clone()], &[z]), Err(Error::UndefinedReward));
    }

    #[test]
    fn prune_indices_example() {
        assert_eq!(kept_step_indices(&[0.9, 0.1, 0.8, 0.5], 0.5).unwrap(), vec![0, 2]);
        assert_eq!(kept_step_indices(&[0.3, 0.3, 0.3], 1.0).unwrap(), vec![0, 1, 2]);
        assert_eq!(kept_step_indices(&[0.3, 0.3, 0.3], 0.5).unwrap(), vec![0, 1]);
        assert!(kept_step_indices(&[0.3], 0.0).is_err());
    }

    #[test]
    fn quality_examples() {
        assert_eq!(sample_quality(&[1.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(sample_quality(&[1.0, -1.0]).unwrap(), 0.0);
        assert!(sample_quality(&[]).is_err());
    }

    #[test]
    fn ledger_contract_errors() {
        let mut l = StepLedger::<f64>::new(1, 1, 2, CorrectionConfig::default());
        let mut s = vec![StateMatrix::zeros(1, 2)];
        assert!(l.end_step(&mut s).is_err());
        l.begin_step(&s).unwrap();
        assert!(l.begin_step(&s).is_err());
    }

    #[test]
    fn first_step_shrinks_toward_snapshot() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s0 = vec![rand_state(&mut rng)];
        let mut l = StepLedger::new(1, 2, 3, CorrectionConfig::default());
        l.begin_step(&s0).unwrap();
        let d = rand_state(&mut rng);
        let mut live = vec![StateMatrix::from_data(
            2,
            3,
            s0[0].as_slice().iter().zip(d.as_slice()).map(|(a, b)| a + b).collect(),
        )];
        let rep = l.end_step(&mut live).unwrap();
        assert!(rep.corrected);
        assert_eq!(rep.reward, Some(0.0));
        for ((x, p), dx) in live[0].as_slice().iter().zip(s0[0].as_slice()).zip(d.as_slice()) {
            assert!((x - (p + 0.975 * dx)).abs() < 1e-12);
        }
    }

    #[test]
    fn disabled_correction_leaves_states_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut l = StepLedger::new(1, 2, 3, CorrectionConfig::disabled());
        let mut live = vec![rand_state(&mut rng)];
        for _ in 0..5 {
            l.begin_step(&live).unwrap();
            let d = rand_state(&mut rng);
            live[0]
                .as_mut_slice()
                .iter_mut()
                .zip(d.as_slice())
                .for_each(|(x, y)| *x += y);
            let before = live.clone();
            let rep = l.end_step(&mut live).unwrap();
            assert!(!rep.corrected);
            assert_eq!(rep.alpha, 0.0);
            assert_eq!(before, live);
        }
    }

    #[test]
    fn rewards_against_mean_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let base = rand_state(&mut rng);
        // two aligned steps and one opposite step: mean is along `base`
        let deltas = vec![vec![scaled(&base, 2.0)], vec![scaled(&base, 1.0)], vec![scaled(&base, -0.5)]];
        let r = rewards_against_mean(&deltas).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-12 && (r[1] - 1.0).abs() < 1e-12);
        assert!((r[2] + 1.0).abs() < 1e-12);
        assert!(rewards_against_mean::<f64>(&[]).unwrap().is_empty());
    }
}
