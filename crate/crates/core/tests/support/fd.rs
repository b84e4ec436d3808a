// Central finite-difference gradient checks. Shared by the core gradient
// tests and the acceptance target.
#![allow(dead_code)]

use edibnet::autodiff::{Tape, Var};
use edibnet::model::{Layers, ParamStore};
use edibnet::{Result, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f32 = 1e-3;
pub const TOL: f64 = 1e-3;

pub fn random(shape: Shape, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.numel()).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

// probe loss: sum(r * y) accumulated in f64
fn probe(y: &Tensor, r: &Tensor) -> f64 {
    y.data().iter().zip(r.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

/// Checks the gradient of `sum(r * f(inputs))` w.r.t. every input.
/// Returns the worst relative error.
pub fn check_inputs<F>(inputs: &[Tensor], seed: u64, f: F) -> f64
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.leaf(&format!("in{i}"), t))
        .collect();
    let y = f(&tape, &vars).unwrap();
    let r = random(y.shape(), seed ^ 0x9e37);
    let loss = tape.sum(&tape.mul(&y, &tape.constant(r.clone())).unwrap());
    let grads = tape.backward(&loss).unwrap();

    let eval = |xs: &[Tensor]| {
        let t = Tape::inference();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        probe(f(&t, &vs).unwrap().value(), &r)
    };

    let mut worst = 0.0f64;
    for (i, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = grads.wrt(var).unwrap().data().iter().map(|&v| v as f64).collect();
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut xs = inputs.to_vec();
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            xs[i].data_mut()[j] = x0 + EPS;
            let lp = eval(&xs);
            xs[i].data_mut()[j] = x0 - EPS;
            let lm = eval(&xs);
            xs[i].data_mut()[j] = x0;
            numeric.push((lp - lm) / (2.0 * EPS as f64));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Analytic and central-difference gradients w.r.t. the named store
/// parameters, probing at most `max_elems` elements of each with step `eps`.
pub fn param_gradients<F>(
    store: &ParamStore,
    names: &[&str],
    max_elems: usize,
    eps: f32,
    seed: u64,
    f: F,
) -> Vec<(String, Vec<f64>, Vec<f64>)>
where
    F: Fn(&Layers) -> Result<Var>,
{
    let tape = Tape::new();
    let y = f(&Layers::new(&tape, store)).unwrap();
    let r = random(y.shape(), seed ^ 0x51f1);
    let loss = tape.sum(&tape.mul(&y, &tape.constant(r.clone())).unwrap());
    let grads = tape.backward(&loss).unwrap();

    let eval = |s: &ParamStore| {
        let t = Tape::inference();
        probe(f(&Layers::new(&t, s)).unwrap().value(), &r)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut out = Vec::new();
    for name in names {
        let g = grads.get(name).unwrap().clone();
        let n = g.numel();
        let idx: Vec<usize> = if n <= max_elems {
            (0..n).collect()
        } else {
            (0..max_elems).map(|_| rng.gen_range(0..n)).collect()
        };
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for j in idx {
            let x0 = store.get(name).unwrap().data()[j];
            work.get_mut(name).unwrap().data_mut()[j] = x0 + eps;
            let lp = eval(&work);
            work.get_mut(name).unwrap().data_mut()[j] = x0 - eps;
            let lm = eval(&work);
            work.get_mut(name).unwrap().data_mut()[j] = x0;
            analytic.push(g.data()[j] as f64);
            numeric.push((lp - lm) / (2.0 * eps as f64));
        }
        out.push((name.to_string(), analytic, numeric));
    }
    out
}

/// Worst per-parameter relative error of [`param_gradients`].
pub fn check_params<F>(store: &ParamStore, names: &[&str], max_elems: usize, eps: f32, seed: u64, f: F) -> f64
where
    F: Fn(&Layers) -> Result<Var>,
{
    let mut worst = 0.0f64;
    for (name, a, n) in param_gradients(store, names, max_elems, eps, seed, f) {
        let e = rel_err(&a, &n);
        if e > TOL {
            eprintln!("{name}: relative error {e:.3e}");
        }
        worst = worst.max(e);
    }
    worst
}

/// Replaces every parameter with random values in `[-amp, amp)`.
pub fn randomize(store: &mut ParamStore, seed: u64, amp: f32) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v = rng.gen_range(-amp..amp);
        }
    }
}

/// Fills all-zero tensors (heads, fusion convs, biases) so zero-initialised
/// layers pass gradient through.
pub fn fill_zeros(store: &mut ParamStore, seed: u64, amp: f32) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in store.iter_mut() {
        if t.data().iter().any(|&v| v != 0.0) {
            continue;
        }
        for v in t.data_mut() {
            *v = rng.gen_range(-amp..amp);
        }
    }
}
