use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statecot_core::attention::{
    segmented_mask, ttt_update, AttnStats, GateParams, KVCache, LaBranch, MamLayer, ProjectionSet, Segment, Span,
    StateMatrix,
};
use statecot_core::numerics::Matrix;

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix<f64> {
    Matrix {
        rows,
        cols,
        data: (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect(),
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_layer(rng: &mut ChaCha8Rng, d: usize, heads: usize) -> MamLayer<f64> {
    let proj = ProjectionSet {
        wq: rand_matrix(rng, d, d, 0.5),
        wk: rand_matrix(rng, d, d, 0.5),
        wv: rand_matrix(rng, d, d, 0.5),
        wo: rand_matrix(rng, d, d, 0.5),
        heads,
        d_head: d / heads,
    };
    MamLayer {
        la_q: rand_matrix(rng, d, d, 0.5),
        la_k: rand_matrix(rng, d, d, 0.5),
        la_v: rand_matrix(rng, d, d, 0.5),
        gate: GateParams {
            down: rand_matrix(rng, d, 3, 0.5),
            up: rand_matrix(rng, 3, d, 0.5),
            bias: rand_vec(rng, d),
            scale: 1.0,
        },
        proj,
    }
}

fn matvec(m: &Matrix<f64>, x: &[f64]) -> Vec<f64> {
    (0..m.cols)
        .map(|j| (0..m.rows).map(|i| x[i] * m.data[i * m.cols + j]).sum())
        .collect()
}

/// Dense attention over all positions, with `visible(i, j)` deciding which
/// entries survive; masked scores are dropped before normalising.
fn dense_attention(
    layer: &MamLayer<f64>,
    hs: &[Vec<f64>],
    visible: impl Fn(usize, usize) -> bool,
) -> Vec<Vec<f64>> {
    let p = &layer.proj;
    let dh = p.d_head;
    let qs: Vec<_> = hs.iter().map(|h| matvec(&p.wq, h)).collect();
    let ks: Vec<_> = hs.iter().map(|h| matvec(&p.wk, h)).collect();
    let vs: Vec<_> = hs.iter().map(|h| matvec(&p.wv, h)).collect();
    (0..hs.len())
        .map(|i| {
            let mut out = vec![0.0; p.heads * dh];
            for h in 0..p.heads {
                let r = h * dh..(h + 1) * dh;
                let mut w: Vec<(usize, f64)> = (0..hs.len())
                    .filter(|&j| visible(i, j))
                    .map(|j| {
                        let s: f64 = qs[i][r.clone()].iter().zip(&ks[j][r.clone()]).map(|(a, b)| a * b).sum();
                        (j, (s / (dh as f64).sqrt()).exp())
                    })
                    .collect();
                let z: f64 = w.iter().map(|x| x.1).sum();
                w.iter_mut().for_each(|x| x.1 /= z);
                for (j, pj) in w {
                    for (o, v) in out[r.clone()].iter_mut().zip(&vs[j][r.clone()]) {
                        *o += pj * v;
                    }
                }
            }
            out
        })
        .collect()
}

#[test]
fn single_token_attends_to_itself() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let layer = random_layer(&mut rng, 8, 2);
    let h = rand_vec(&mut rng, 8);
    let mut cache = KVCache::new(1, 8);
    let out = layer
        .sa_forward(&h, &mut cache, 0, 0, Segment::Prompt, None, &mut AttnStats::default())
        .unwrap();
    let v = matvec(&layer.proj.wv, &h);
    for (a, b) in out.iter().zip(&v) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn identical_keys_average_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut layer = random_layer(&mut rng, 4, 1);
    // Zero key projection: every key is 0, every score equal.
    layer.proj.wk = Matrix::zeros(4, 4);
    let mut cache = KVCache::new(1, 4);
    let h1 = rand_vec(&mut rng, 4);
    let h2 = rand_vec(&mut rng, 4);
    let mut st = AttnStats::default();
    layer.sa_forward(&h1, &mut cache, 0, 0, Segment::Prompt, None, &mut st).unwrap();
    let out = layer.sa_forward(&h2, &mut cache, 0, 1, Segment::Prompt, None, &mut st).unwrap();
    let (v1, v2) = (matvec(&layer.proj.wv, &h1), matvec(&layer.proj.wv, &h2));
    for i in 0..4 {
        assert!((out[i] - 0.5 * (v1[i] + v2[i])).abs() < 1e-12);
    }
}

#[test]
fn step_attention_matches_dense_masked_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let layer = random_layer(&mut rng, 16, 4);
    let hs: Vec<Vec<f64>> = (0..12).map(|_| rand_vec(&mut rng, 16)).collect();
    // Prompt of 8, then a first step of 3 (evicted), then a 4-token step.
    let mut cache = KVCache::new(1, 16);
    let mut st = AttnStats::default();
    let mut got = Vec::new();
    for h in &hs[..8] {
        got.push(layer.sa_forward(h, &mut cache, 0, 0, Segment::Prompt, None, &mut st).unwrap());
    }
    cache.seal_prompt();
    let extra: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng, 16)).collect();
    for h in &extra {
        layer.sa_forward(h, &mut cache, 0, 0, Segment::Step, None, &mut st).unwrap();
    }
    assert_eq!(cache.evict_step(), 3);
    for h in &hs[8..] {
        got.push(layer.sa_forward(h, &mut cache, 0, 0, Segment::Step, None, &mut st).unwrap());
    }
    let want = dense_attention(&layer, &hs, |i, j| j <= i);
    for (g, w) in got.iter().zip(&want) {
        for (a, b) in g.iter().zip(w) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn recurrent_reads_match_cumulative_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let layer = random_layer(&mut rng, 8, 2);
    let mut s0 = StateMatrix::zeros(2, 4);
    s0.as_mut_slice().iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
    let hs: Vec<Vec<f64>> = (0..16).map(|_| rand_vec(&mut rng, 8)).collect();
    let mut state = s0.clone();
    let mut st = AttnStats::default();
    let got: Vec<Vec<f64>> = hs.iter().map(|h| layer.la_forward(h, &mut state, &mut st)).collect();
    for t in 0..16 {
        let q = matvec(&layer.la_q, &hs[t]);
        for head in 0..2 {
            let mut s: Vec<f64> = s0.head(head).to_vec();
            for h in &hs[..t] {
                let k = matvec(&layer.la_k, h);
                let v = matvec(&layer.la_v, h);
                for a in 0..4 {
                    for b in 0..4 {
                        s[a * 4 + b] += k[head * 4 + a] * v[head * 4 + b];
                    }
                }
            }
            for b in 0..4 {
                let o: f64 = (0..4).map(|a| q[head * 4 + a] * s[a * 4 + b]).sum();
                assert!((got[t][head * 4 + b] - o).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn zero_state_reads_zero_and_stores_outer_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let layer = random_layer(&mut rng, 4, 1);
    let h = rand_vec(&mut rng, 4);
    let mut s = StateMatrix::zeros(1, 4);
    let o = layer.la_forward(&h, &mut s, &mut AttnStats::default());
    assert!(o.iter().all(|&x| x == 0.0));
    let (k, v) = (matvec(&layer.la_k, &h), matvec(&layer.la_v, &h));
    for a in 0..4 {
        for b in 0..4 {
            assert_eq!(s.head(0)[a * 4 + b], k[a] * v[b]);
        }
    }
}

#[test]
fn gate_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut layer = random_layer(&mut rng, 6, 2);
    let h = rand_vec(&mut rng, 6);
    let g = layer.gate(&h);
    let pre: Vec<f64> = {
        let z = matvec(&layer.gate.down, &h);
        matvec(&layer.gate.up, &z).iter().zip(&layer.gate.bias).map(|(a, b)| a + b).collect()
    };
    for (x, p) in g.iter().zip(&pre) {
        assert!((x - 1.0 / (1.0 + (-p).exp())).abs() < 1e-12);
    }
    layer.gate.up = Matrix::zeros(3, 6);
    layer.gate.bias = vec![0.0; 6];
    assert!(layer.gate(&h).iter().all(|&x| x == 0.5));
}

#[test]
fn gate_saturates_along_positive_direction() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut layer = random_layer(&mut rng, 4, 1);
    layer.gate.bias = vec![0.0; 4];
    let h = rand_vec(&mut rng, 4);
    let pre = {
        let z = matvec(&layer.gate.down, &h);
        matvec(&layer.gate.up, &z)
    };
    // Flip signs so every preactivation is positive, then scale up.
    let signs: Vec<f64> = pre.iter().map(|p| p.signum()).collect();
    for r in 0..3 {
        for c in 0..4 {
            layer.gate.up.data[r * 4 + c] *= signs[c];
        }
    }
    let mut prev = vec![0.5; 4];
    for s in [1.0, 10.0, 1e2, 1e3, 1e6, 1e9] {
        layer.gate.scale = s;
        let g = layer.gate(&h);
        for (a, b) in g.iter().zip(&prev) {
            assert!(a >= b);
        }
        prev = g;
    }
    assert!(prev.iter().all(|&x| x > 1.0 - 1e-9));
}

#[test]
fn closed_gate_leaves_softmax_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let layer = random_layer(&mut rng, 8, 2);
    let hs: Vec<Vec<f64>> = (0..5).map(|_| rand_vec(&mut rng, 8)).collect();
    let mut c1 = KVCache::new(1, 8);
    let mut c2 = KVCache::new(1, 8);
    let mut s = StateMatrix::zeros(2, 4);
    let mut st = AttnStats::default();
    for (i, h) in hs.iter().enumerate() {
        let a = layer
            .mam_forward(h, &mut c1, &mut s, 0, i, Segment::Prompt, None, LaBranch::FixedGate(0.0), &mut st)
            .unwrap();
        let sa = layer.sa_forward(h, &mut c2, 0, i, Segment::Prompt, None, &mut st).unwrap();
        assert_eq!(a, matvec(&layer.proj.wo, &sa));
    }
}

#[test]
fn open_gate_on_empty_state_adds_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let layer = random_layer(&mut rng, 8, 2);
    let h = rand_vec(&mut rng, 8);
    let mut s = StateMatrix::zeros(2, 4);
    let mut st = AttnStats::default();
    let out = layer
        .mam_forward(&h, &mut KVCache::new(1, 8), &mut s, 0, 0, Segment::Prompt, None, LaBranch::FixedGate(1.0), &mut st)
        .unwrap();
    let sa = layer.sa_forward(&h, &mut KVCache::new(1, 8), 0, 0, Segment::Prompt, None, &mut st).unwrap();
    assert_eq!(out, matvec(&layer.proj.wo, &sa));
}

#[test]
fn mixed_block_matches_monolithic_reimplementation() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let layer = random_layer(&mut rng, 12, 3);
    let hs: Vec<Vec<f64>> = (0..9).map(|_| rand_vec(&mut rng, 12)).collect();
    let mut cache = KVCache::new(1, 12);
    let mut s = StateMatrix::zeros(3, 4);
    let mut st = AttnStats::default();
    let mut got = Vec::new();
    for (i, h) in hs.iter().enumerate() {
        got.push(
            layer
                .mam_forward(h, &mut cache, &mut s, 0, i, Segment::Prompt, None, LaBranch::Gated, &mut st)
                .unwrap(),
        );
    }
    let sa = dense_attention(&layer, &hs, |i, j| j <= i);
    for i in 0..hs.len() {
        let q = matvec(&layer.la_q, &hs[i]);
        let mut mixed = vec![0.0; 12];
        let z = matvec(&layer.gate.down, &hs[i]);
        let pre = matvec(&layer.gate.up, &z);
        for c in 0..12 {
            let head = c / 4;
            let col = c % 4;
            let mut o = 0.0;
            for h in &hs[..i] {
                let k = matvec(&layer.la_k, h);
                let v = matvec(&layer.la_v, h);
                let qk: f64 = (0..4).map(|a| q[head * 4 + a] * k[head * 4 + a]).sum();
                o += qk * v[head * 4 + col];
            }
            let g = 1.0 / (1.0 + (-(pre[c] + layer.gate.bias[c])).exp());
            mixed[c] = g * o + sa[i][c];
        }
        let want = matvec(&layer.proj.wo, &mixed);
        for (a, b) in got[i].iter().zip(&want) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn five_steps_leave_only_the_prompt() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let layer = random_layer(&mut rng, 4, 1);
    let mut cache = KVCache::new(1, 4);
    let mut st = AttnStats::default();
    for i in 0..6 {
        layer
            .sa_forward(&rand_vec(&mut rng, 4), &mut cache, 0, i, Segment::Prompt, None, &mut st)
            .unwrap();
    }
    cache.seal_prompt();
    for step in 0..5 {
        for i in 0..(3 + step) {
            layer
                .sa_forward(&rand_vec(&mut rng, 4), &mut cache, 0, 6 + i, Segment::Step, None, &mut st)
                .unwrap();
            assert!(cache.len() <= 6 + 3 + step);
        }
        assert_eq!(cache.evict_step(), 3 + step);
        assert_eq!(cache.len(), 6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn recurrent_equals_parallel(seed in any::<u64>(), len in 1usize..24, dh in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ks: Vec<Vec<f64>> = (0..len).map(|_| rand_vec(&mut rng, dh)).collect();
        let vs: Vec<Vec<f64>> = (0..len).map(|_| rand_vec(&mut rng, dh)).collect();
        let qs: Vec<Vec<f64>> = (0..len).map(|_| rand_vec(&mut rng, dh)).collect();
        let mut s = StateMatrix::zeros(1, dh);
        for t in 0..len {
            let o = s.read(0, &qs[t]);
            s.accumulate(0, &ks[t], &vs[t]);
            for b in 0..dh {
                let want: f64 = (0..t)
                    .map(|i| qs[t].iter().zip(&ks[i]).map(|(x, y)| x * y).sum::<f64>() * vs[i][b])
                    .sum();
                prop_assert!((o[b] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn unit_rate_update_is_the_accumulation(seed in any::<u64>(), dh in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rand_vec(&mut rng, dh);
        let v = rand_vec(&mut rng, dh);
        let mut s = StateMatrix::from_data(1, dh, rand_vec(&mut rng, dh * dh));
        let via_ttt = ttt_update(s.head(0), &k, &v, 1.0);
        s.accumulate(0, &k, &v);
        prop_assert_eq!(via_ttt.as_slice(), s.head(0));
    }

    #[test]
    fn mask_respects_spans(p in 1usize..6, lens in proptest::collection::vec(1usize..5, 1..5)) {
        let mut spans = Vec::new();
        let mut at = p;
        for l in &lens {
            spans.push(Span::new(at, at + l));
            at += l;
        }
        let m = segmented_mask(p, &spans).unwrap();
        for i in 0..at {
            for j in 0..at {
                let same = spans.iter().any(|s| s.contains(i) && s.contains(j));
                prop_assert_eq!(m.allows(i, j), j <= i && (j < p || same));
            }
        }
    }
}
