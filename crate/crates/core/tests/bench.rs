use statecot_core::bench::{cache_peak, drive, flop_count, BenchMode, Schedule};
use statecot_core::model::{EmbeddingSource, InferenceModel, Model, ModelConfig};

#[test]
fn analytic_counts_match_instrumented_run() {
    let cfg = ModelConfig::tiny(2, 16, 2, 20, 3);
    let model = Model::random(cfg.clone(), 4).unwrap();
    let rt = InferenceModel::<f64>::new(&model, EmbeddingSource::Markers).unwrap();
    for (p, s) in [(3, 5), (1, 2), (7, 16)] {
        let sched = Schedule {
            prompt_len: p,
            step_len: s,
        };
        for c in [p + 1, 40, 97] {
            for mode in BenchMode::ALL {
                let r = drive(&rt, mode, sched, c).unwrap();
                assert_eq!(r.tokens, c);
                assert_eq!(r.macs, flop_count(&cfg, c, mode, sched), "{mode:?} p={p} s={s} c={c}");
                assert_eq!(r.peak_cache, cache_peak(c, mode, sched));
            }
        }
    }
}

#[test]
fn mam_peak_is_flat_and_baseline_peak_is_the_context() {
    let cfg = ModelConfig::tiny(1, 8, 2, 12, 2);
    let model = Model::random(cfg, 1).unwrap();
    let rt = InferenceModel::<f32>::new(&model, EmbeddingSource::Markers).unwrap();
    let sched = Schedule {
        prompt_len: 4,
        step_len: 8,
    };
    let mut peaks = Vec::new();
    for c in [64, 128, 256] {
        peaks.push(drive(&rt, BenchMode::Mam, sched, c).unwrap().peak_cache);
        assert_eq!(drive(&rt, BenchMode::Baseline, sched, c).unwrap().peak_cache, c);
    }
    assert!(peaks.iter().all(|&p| p == 12), "{peaks:?}");
}

#[test]
fn over_limit_and_bad_schedules_are_rejected() {
    let mut cfg = ModelConfig::tiny(1, 8, 2, 12, 2);
    cfg.context_limit = 50;
    let model = Model::random(cfg, 1).unwrap();
    let rt = InferenceModel::<f64>::new(&model, EmbeddingSource::Markers).unwrap();
    let sched = Schedule {
        prompt_len: 4,
        step_len: 8,
    };
    assert!(drive(&rt, BenchMode::Mam, sched, 51).is_err());
    assert!(drive(&rt, BenchMode::Mam, sched, 4).is_err());
    assert!(drive(&rt, BenchMode::Mam, Schedule { prompt_len: 4, step_len: 1 }, 20).is_err());
}
