//! Wall-clock latency sweep over context lengths for the step-evicting model
//! and the full-cache baseline.

use std::io::Write;
use std::time::Instant;

use anyhow::{bail, ensure, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statecot_core::bench::{cache_bytes_per_position, drive, flop_count, BenchMode, Schedule};
use statecot_core::model::{EmbeddingSource, InferenceModel, Model, ModelConfig};
use statecot_core::numerics::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub context_len: usize,
    pub mode: BenchMode,
    pub per_token_ms: f64,
    pub total_ms: f64,
    pub cache_positions_peak: usize,
    pub cache_bytes_est: usize,
    pub flops_analytic: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub lengths: Vec<usize>,
    pub reps: usize,
    pub warmup: usize,
    pub schedule: Schedule,
    /// Refuse to time while other threads exist in the process.
    pub require_single_thread: bool,
}

/// Model used for timing: random weights, rotary positions, context limit
/// large enough for the sweep.
pub fn bench_model(n_layers: usize, d_model: usize, n_heads: usize, max_len: usize, seed: u64) -> Result<Model> {
    let mut cfg = ModelConfig::tiny(n_layers, d_model, n_heads, 64, 4);
    cfg.context_limit = max_len;
    cfg.max_step_len = max_len;
    Ok(Model::random(cfg, seed)?)
}

/// Threads of this process, when the platform reports it.
pub fn thread_count() -> Option<usize> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find_map(|l| l.strip_prefix("Threads:"))
        .and_then(|v| v.trim().parse().ok())
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Runs every length in both modes. Lengths past the model's context limit
/// are skipped and reported in `notes`.
pub fn latency_sweep<T: Real>(model: &Model, cfg: &SweepConfig, notes: &mut Vec<String>) -> Result<Vec<BenchPoint>> {
    ensure!(cfg.reps > 0, "reps must be positive");
    ensure!(cfg.lengths.windows(2).all(|w| w[0] < w[1]), "lengths must be ascending");
    if cfg.require_single_thread {
        if let Some(n) = thread_count().filter(|&n| n > 1) {
            bail!("refusing to benchmark with {n} threads in the process");
        }
    }
    let rt = InferenceModel::<T>::new(model, EmbeddingSource::Markers)?;
    let limit = model.config.context_limit;
    let bytes = cache_bytes_per_position::<T>(&model.config);
    let mut points = Vec::new();
    let lengths: Vec<usize> = cfg
        .lengths
        .iter()
        .copied()
        .filter(|&c| {
            let ok = c <= limit;
            if !ok {
                notes.push(format!("skipped length {c}: context limit is {limit}"));
            }
            ok
        })
        .collect();
    if let Some(&first) = lengths.first() {
        for _ in 0..cfg.warmup {
            for mode in BenchMode::ALL {
                drive(&rt, mode, cfg.schedule, first)?;
            }
        }
    }
    for &c in &lengths {
        for mode in BenchMode::ALL {
            let mut times = Vec::with_capacity(cfg.reps);
            let mut peak = 0;
            for _ in 0..cfg.reps {
                let t0 = Instant::now();
                let r = drive(&rt, mode, cfg.schedule, c)?;
                times.push(t0.elapsed().as_secs_f64() * 1e3);
                peak = r.peak_cache;
            }
            let total = median(&mut times);
            points.push(BenchPoint {
                context_len: c,
                mode,
                per_token_ms: total / c as f64,
                total_ms: total,
                cache_positions_peak: peak,
                cache_bytes_est: peak * bytes,
                flops_analytic: flop_count(&model.config, c, mode, cfg.schedule),
            });
        }
    }
    Ok(points)
}

pub fn write_csv<W: Write>(points: &[BenchPoint], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["context_len", "mode", "per_token_ms", "cache_positions_peak", "cache_bytes_est", "flops_analytic"])?;
    for p in points {
        out.write_record([
            p.context_len.to_string(),
            p.mode.name().to_string(),
            format!("{:.6}", p.per_token_ms),
            p.cache_positions_peak.to_string(),
            p.cache_bytes_est.to_string(),
            p.flops_analytic.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Whitespace-separated columns, one row per length; plot with
/// `plot 'bench.dat' using 1:2 title 'baseline', '' using 1:3 title 'mam'`.
pub fn write_gnuplot<W: Write>(points: &[BenchPoint], mut w: W) -> Result<()> {
    writeln!(w, "# context_len baseline_ms_per_token mam_ms_per_token baseline_cache mam_cache")?;
    let mut lens: Vec<usize> = points.iter().map(|p| p.context_len).collect();
    lens.dedup();
    for c in lens {
        let get = |m| points.iter().find(|p| p.context_len == c && p.mode == m);
        if let (Some(b), Some(m)) = (get(BenchMode::Baseline), get(BenchMode::Mam)) {
            writeln!(
                w,
                "{c} {:.6} {:.6} {} {}",
                b.per_token_ms, m.per_token_ms, b.cache_positions_peak, m.cache_positions_peak
            )?;
        }
    }
    Ok(())
}

/// Coefficient of determination of the least-squares polynomial fit.
pub fn poly_fit_r2(xs: &[f64], ys: &[f64], degree: usize) -> f64 {
    let n = xs.len();
    let a = DMatrix::from_fn(n, degree + 1, |i, j| xs[i].powi(j as i32));
    let b = DVector::from_column_slice(ys);
    let Ok(coef) = a.clone().svd(true, true).solve(&b, 1e-12) else {
        return f64::NAN;
    };
    let resid = &b - &a * coef;
    let mean = ys.iter().sum::<f64>() / n as f64;
    let tot: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    if tot == 0.0 {
        return 1.0;
    }
    1.0 - resid.norm_squared() / tot
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    pub baseline_quadratic_r2: f64,
    pub mam_linear_r2: f64,
    pub mam_peak_constant: bool,
    pub baseline_peak_is_context: bool,
    pub ratio_first: f64,
    pub ratio_last: f64,
    /// (max − min) / min of the mam per-token latency.
    pub mam_latency_spread: f64,
    pub baseline_latency_increasing: bool,
}

impl Trend {
    pub fn from_points(points: &[BenchPoint]) -> Result<Self> {
        let pick = |m| -> Vec<&BenchPoint> { points.iter().filter(|p| p.mode == m).collect() };
        let (b, m) = (pick(BenchMode::Baseline), pick(BenchMode::Mam));
        ensure!(b.len() >= 3 && b.len() == m.len(), "need at least three lengths in both modes");
        let xs: Vec<f64> = b.iter().map(|p| p.context_len as f64).collect();
        let bt: Vec<f64> = b.iter().map(|p| p.total_ms).collect();
        let mt: Vec<f64> = m.iter().map(|p| p.total_ms).collect();
        let mp: Vec<f64> = m.iter().map(|p| p.per_token_ms).collect();
        let lo = mp.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = mp.iter().cloned().fold(0.0, f64::max);
        Ok(Self {
            baseline_quadratic_r2: poly_fit_r2(&xs, &bt, 2),
            mam_linear_r2: poly_fit_r2(&xs, &mt, 1),
            mam_peak_constant: m.iter().all(|p| p.cache_positions_peak == m[0].cache_positions_peak),
            baseline_peak_is_context: b.iter().all(|p| p.cache_positions_peak == p.context_len),
            ratio_first: b[0].per_token_ms / m[0].per_token_ms,
            ratio_last: b[b.len() - 1].per_token_ms / m[m.len() - 1].per_token_ms,
            mam_latency_spread: (hi - lo) / lo,
            baseline_latency_increasing: b.windows(2).all(|w| w[1].per_token_ms > w[0].per_token_ms),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_polynomials_fit_perfectly() {
        let xs = [1.0, 2.0, 3.0, 5.0, 8.0];
        let quad: Vec<f64> = xs.iter().map(|x| 3.0 * x * x - x + 2.0).collect();
        assert!((poly_fit_r2(&xs, &quad, 2) - 1.0).abs() < 1e-12);
        assert!(poly_fit_r2(&xs, &quad, 1) < 0.99);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn sweep_rows_and_skips() {
        let model = bench_model(1, 16, 2, 200, 1).unwrap();
        let cfg = SweepConfig {
            lengths: vec![40, 80, 160, 400],
            reps: 1,
            warmup: 0,
            schedule: Schedule {
                prompt_len: 4,
                step_len: 8,
            },
            require_single_thread: false,
        };
        let mut notes = Vec::new();
        let pts = latency_sweep::<f32>(&model, &cfg, &mut notes).unwrap();
        assert_eq!(pts.len(), 3 * 2);
        assert_eq!(notes.len(), 1);
        let mut buf = Vec::new();
        write_csv(&pts, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.starts_with("context_len,mode,per_token_ms,cache_positions_peak,cache_bytes_est,flops_analytic"));
        let t = Trend::from_points(&pts).unwrap();
        assert!(t.mam_peak_constant && t.baseline_peak_is_context);
    }
}
