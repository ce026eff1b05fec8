//! Finite-difference checks of every differentiable tape op in 64-bit.
//! Each `check_*` draws one random instance and returns the worst
//! relative error over the op's differentiable inputs.

#![allow(dead_code)]

use glyphnet::gradcheck::{numeric_gradient, relative_error};
use glyphnet::{Padding, PoolKind, Result, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;

/// A named check drawing one random instance.
pub type Check = (&'static str, fn(&mut ChaCha8Rng) -> f64);

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values at least 0.01 apart, so a step of `STEP` never reorders them.
pub fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.0137).collect();
    v.shuffle(rng);
    Tensor::new(shape, v).unwrap()
}

/// Magnitudes in [0.05, 2] with random signs, away from the ReLU kink.
pub fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..2.0);
            if rng.random() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, v).unwrap()
}

/// `sum(r ⊙ y)`: a scalar that depends on every element of `y`.
pub fn project(tape: &mut Tape<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let m = tape.mul(y, rv)?;
    tape.sum(m)
}

/// Worst relative error between the tape gradient and central differences
/// over every element of every input.
pub fn compare(inputs: &[Tensor<f64>], build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).unwrap().data().to_vec();
        let mut x = inputs[i].clone();
        let numeric = numeric_gradient(&mut x, STEP, None, |xi| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| tape.input(if j == i { xi.clone() } else { t.clone() }))
                .collect();
            let loss = build(&mut tape, &vars)?;
            tape.value(loss)?.item()
        })
        .unwrap();
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

fn padding(rng: &mut ChaCha8Rng) -> Padding {
    if rng.random() {
        Padding::Same
    } else {
        Padding::Valid
    }
}

pub fn check_conv2d(rng: &mut ChaCha8Rng) -> f64 {
    let (n, cin, cout) = (
        rng.random_range(1..=2),
        rng.random_range(1..=3),
        rng.random_range(1..=3),
    );
    let k = rng.random_range(1..=3);
    let (h, w) = (rng.random_range(k..=6), rng.random_range(k..=6));
    let (stride, pad) = (rng.random_range(1..=2), padding(rng));
    let x = uniform(rng, &[n, cin, h, w], -1.0, 1.0);
    let kernel = uniform(rng, &[cout, cin, k, k], -1.0, 1.0);
    let bias = uniform(rng, &[cout], -1.0, 1.0);
    let out = glyphnet::ops::conv2d(&x, &kernel, Some(&bias), stride, pad).unwrap();
    let r = uniform(rng, out.shape(), -1.0, 1.0);
    compare(&[x, kernel, bias], |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
        project(t, y, &r)
    })
}

pub fn check_pool(rng: &mut ChaCha8Rng, kind: PoolKind) -> f64 {
    let (n, c) = (rng.random_range(1..=2), rng.random_range(1..=3));
    let size = rng.random_range(2..=3);
    let (h, w) = (rng.random_range(size..=7), rng.random_range(size..=7));
    let (stride, pad) = (rng.random_range(1..=2), padding(rng));
    let x = distinct(rng, &[n, c, h, w]);
    let (out, _, _) = glyphnet::ops::pool2d(&x, kind, size, stride, pad).unwrap();
    let r = uniform(rng, out.shape(), -1.0, 1.0);
    compare(&[x], |t, v| {
        let y = t.pool2d(v[0], kind, size, stride, pad)?;
        project(t, y, &r)
    })
}

pub fn check_dense(rng: &mut ChaCha8Rng) -> f64 {
    let (b, i, o) = (
        rng.random_range(1..=4),
        rng.random_range(1..=6),
        rng.random_range(1..=5),
    );
    let x = uniform(rng, &[b, i], -1.0, 1.0);
    let w = uniform(rng, &[i, o], -1.0, 1.0);
    let bias = uniform(rng, &[o], -1.0, 1.0);
    let r = uniform(rng, &[b, o], -1.0, 1.0);
    compare(&[x, w, bias], |t, v| {
        let y = t.linear(v[0], v[1], v[2])?;
        project(t, y, &r)
    })
}

/// Batch statistics are recomputed on every evaluation, so the input
/// gradient includes the paths through the batch mean and variance.
pub fn check_batch_norm(rng: &mut ChaCha8Rng) -> f64 {
    let (m, c) = (rng.random_range(2..=4), rng.random_range(1..=3));
    let (h, w) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let offset = rng.random_range(-2.0..2.0);
    let x = uniform(rng, &[m, c, h, w], offset - 1.0, offset + 1.0);
    let gamma = uniform(rng, &[c], 0.5, 1.5);
    let beta = uniform(rng, &[c], -1.0, 1.0);
    let r = uniform(rng, &[m, c, h, w], -1.0, 1.0);
    compare(&[x, gamma, beta], |t, v| {
        let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
        project(t, y, &r)
    })
}

pub fn check_relu(rng: &mut ChaCha8Rng) -> f64 {
    let shape = [rng.random_range(1..=3), rng.random_range(1..=4), 3, 3];
    let x = off_kink(rng, &shape);
    let r = uniform(rng, &shape, -1.0, 1.0);
    compare(&[x], |t, v| {
        let y = t.relu(v[0])?;
        project(t, y, &r)
    })
}

/// With the mask held fixed (same seed on every evaluation) dropout is
/// linear in its input.
pub fn check_dropout_fixed_mask(rng: &mut ChaCha8Rng) -> f64 {
    let shape = [rng.random_range(1..=3), rng.random_range(2..=12)];
    let rate = rng.random_range(0.1..0.7);
    let seed = rng.random();
    let x = uniform(rng, &shape, -1.0, 1.0);
    let r = uniform(rng, &shape, -1.0, 1.0);
    compare(&[x], |t, v| {
        let y = t.dropout(v[0], rate, &mut ChaCha8Rng::seed_from_u64(seed))?;
        project(t, y, &r)
    })
}

/// Averaged over many masks, the gradient of `sum(r ⊙ dropout(x))` should
/// be `r`. Returns the largest deviation in standard errors.
pub fn dropout_expectation_z(rng: &mut ChaCha8Rng, masks: usize) -> f64 {
    let len = 16;
    let rate = rng.random_range(0.1..0.7);
    let x = uniform(rng, &[len], -1.0, 1.0);
    let r = uniform(rng, &[len], 0.5, 1.5);
    let mut mean = vec![0.0; len];
    for _ in 0..masks {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let y = tape.dropout(xv, rate, rng).unwrap();
        let loss = project(&mut tape, y, &r).unwrap();
        let g = tape.backward(loss).unwrap();
        for (m, &gi) in mean.iter_mut().zip(g.get(xv).unwrap().data()) {
            *m += gi / masks as f64;
        }
    }
    // each mask value is 0 or 1/(1-p): variance p/(1-p)
    let se = (rate / (1.0 - rate) / masks as f64).sqrt();
    mean.iter()
        .zip(r.data())
        .map(|(m, ri)| ((m - ri) / (ri * se)).abs())
        .fold(0.0, f64::max)
}

pub fn check_softmax_cross_entropy(rng: &mut ChaCha8Rng) -> f64 {
    let (b, k) = (rng.random_range(1..=4), rng.random_range(2..=6));
    let logits = uniform(rng, &[b, k], -3.0, 3.0);
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
    compare(&[logits], |t, v| t.softmax_cross_entropy(v[0], &labels))
}

pub fn check_softmax(rng: &mut ChaCha8Rng) -> f64 {
    let shape = [rng.random_range(1..=4), rng.random_range(2..=6)];
    let x = uniform(rng, &shape, -3.0, 3.0);
    let r = uniform(rng, &shape, -1.0, 1.0);
    compare(&[x], |t, v| {
        let y = t.softmax(v[0])?;
        project(t, y, &r)
    })
}

pub fn check_batch_norm_infer(rng: &mut ChaCha8Rng) -> f64 {
    let c = rng.random_range(1..=3);
    let shape = [rng.random_range(1..=3), c, 2, 2];
    let x = uniform(rng, &shape, -2.0, 2.0);
    let gamma = uniform(rng, &[c], 0.5, 1.5);
    let beta = uniform(rng, &[c], -1.0, 1.0);
    let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..2.0)).collect();
    let r = uniform(rng, &shape, -1.0, 1.0);
    compare(&[x, gamma, beta], |t, v| {
        let y = t.batch_norm_infer(v[0], v[1], v[2], &mean, &var, 1e-5)?;
        project(t, y, &r)
    })
}

/// Global average pooling, channel concatenation, addition and flattening.
pub fn check_structural(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.random_range(1..=2);
    let (ca, cb) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let a = uniform(rng, &[n, ca, 3, 3], -1.0, 1.0);
    let b = uniform(rng, &[n, cb, 3, 3], -1.0, 1.0);
    let d = uniform(rng, &[n, ca + cb, 3, 3], -1.0, 1.0);
    let r = uniform(rng, &[n, ca + cb], -1.0, 1.0);
    let r2 = uniform(rng, &[n, (ca + cb) * 9], -1.0, 1.0);
    compare(&[a, b, d], |t, v| {
        let cat = t.concat_channels(&[v[0], v[1]])?;
        let sum = t.add(cat, v[2])?;
        let gap = t.global_avg_pool(sum)?;
        let l1 = project(t, gap, &r)?;
        let flat = t.flatten(sum)?;
        let l2 = project(t, flat, &r2)?;
        t.add(l1, l2)
    })
}
