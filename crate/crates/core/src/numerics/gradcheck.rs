use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{backward, finite_diff_grad, Tape, Tensor, Var};
use crate::error::{contract, Result};

fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let scale = a.norm().max(b.norm()).max(1e-12);
    a.zip_map(b, |x, y| x - y).map(|d| d.norm() / scale).unwrap_or(f64::INFINITY)
}

/// Largest norm-relative gap between backward and central differences over
/// the parameters of `f`.
pub fn op_gradient_error(params: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone().with_grad(true))).collect();
    let loss = f(&mut tape, &vars);
    let grads = backward(&tape, loss)?;
    let numeric = finite_diff_grad(
        |ps: &[Tensor]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ps.iter().map(|p| t.leaf(p.clone())).collect();
            let l = f(&mut t, &vs);
            t.value(l).data()[0]
        },
        params,
        1e-6,
    );
    let mut worst = 0.0f64;
    for (v, n) in vars.iter().zip(&numeric) {
        let a = grads.get(*v).ok_or_else(|| contract!("no gradient reached a parameter"))?;
        worst = worst.max(rel_err(a, n));
    }
    Ok(worst)
}

/// Backward-vs-finite-difference error for small composites that together
/// exercise every differentiable tape operation.
pub fn op_gradient_report(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
    let c = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let row = Tensor::randn(&[4], 1.0, &mut rng);
    let w = Tensor::randn(&[2, 4], 1.0, &mut rng);
    let target = {
        let mut tt = Tape::new();
        let x = tt.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let l = tt.log_softmax(x);
        Arc::new(tt.value(l).clone())
    };
    let mut out = Vec::new();
    out.push((
        "matmul, sigmoid, dot",
        op_gradient_error(&[a.clone(), b.clone()], |t, v| {
            let m = t.matmul(v[0], v[1]).unwrap();
            let s = t.sigmoid(m);
            t.dot(s, m).unwrap()
        })?,
    ));
    out.push((
        "matmul_nt, silu, sum",
        op_gradient_error(&[a.clone(), c.clone()], |t, v| {
            let m = t.matmul_nt(v[0], v[1]).unwrap();
            let s = t.silu(m);
            t.sum(s)
        })?,
    ));
    out.push((
        "matmul_tn",
        op_gradient_error(&[a.clone(), c.clone()], |t, v| {
            let m = t.matmul_tn(v[0], v[1]).unwrap();
            t.dot(m, m).unwrap()
        })?,
    ));
    out.push((
        "add, sub, mul, add_row, mul_row, scale",
        op_gradient_error(&[a.clone(), c.clone(), row], |t, v| {
            let s = t.sub(v[0], v[1]).unwrap();
            let m = t.mul(s, v[0]).unwrap();
            let r = t.mul_row(m, v[2]).unwrap();
            let r = t.add_row(r, v[2]).unwrap();
            let r = t.add(r, v[1]).unwrap();
            let r = t.scale(r, 0.7);
            t.dot(r, r).unwrap()
        })?,
    ));
    out.push((
        "masked_softmax, mul_const",
        op_gradient_error(&[a.clone(), c.clone()], |t, v| {
            let mask = [true, false, true, false, true, true, true, true, false, false, false, true];
            let p = t.masked_softmax(v[0], &mask).unwrap();
            let k = t.mul_const(p, Arc::new(vec![0.5; 12])).unwrap();
            t.dot(k, v[1]).unwrap()
        })?,
    ));
    out.push((
        "rms_norm, rope",
        op_gradient_error(&[a.clone(), c.clone()], |t, v| {
            let n = t.rms_norm(v[0], 1e-6);
            let r = t.rope(n, Arc::new(vec![0, 3, 17]), 10000.0).unwrap();
            t.dot(r, v[1]).unwrap()
        })?,
    ));
    out.push((
        "gather_rows, slice/concat cols and rows",
        op_gradient_error(&[w, c], |t, v| {
            let g = t.gather_rows(v[0], Arc::new(vec![1, 0, 1])).unwrap();
            let x = t.slice_cols(v[1], 1, 2).unwrap();
            let y = t.slice_cols(v[1], 0, 2).unwrap();
            let cc = t.concat_cols(&[x, y]).unwrap();
            let rr = t.slice_rows(cc, 1, 2).unwrap();
            let top = t.slice_rows(v[1], 0, 1).unwrap();
            let stacked = t.concat_rows(&[rr, top]).unwrap();
            t.dot(stacked, g).unwrap()
        })?,
    ));
    out.push((
        "log_softmax, kl, nll",
        op_gradient_error(&[a], move |t, v| {
            let l = t.log_softmax(v[0]);
            let kl = t.kl(target.clone(), l, Arc::new(vec![0, 2])).unwrap();
            let nll = t.nll(l, Arc::new(vec![(0, 1), (1, 3)])).unwrap();
            t.add(kl, nll).unwrap()
        })?,
    ));
    Ok(out)
}
