#![allow(dead_code)]

use multiattn::birnn::LstmVars;
use multiattn::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Values on a 1/8 grid in [-2, 2]: sums and products of a few of these are
/// exact in binary floating point.
pub fn dyadic(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| f64::from(rng.gen_range(-16i32..=16)) / 8.0).collect()).unwrap()
}

/// Twelve tensors in gate order f, i, o, c: four W, four U, four b.
pub fn lstm_tensors(rng: &mut impl Rng, hidden: usize, input: usize) -> Vec<Tensor<f64>> {
    let mut v = Vec::new();
    for _ in 0..4 {
        v.push(uniform(rng, &[hidden, input], 0.8));
    }
    for _ in 0..4 {
        v.push(uniform(rng, &[hidden, hidden], 0.8));
    }
    for _ in 0..4 {
        v.push(uniform(rng, &[hidden], 0.5));
    }
    v
}

pub fn bind_lstm<'a>(g: &mut Graph<'a, f64>, p: &'a [Tensor<f64>]) -> LstmVars {
    let v: Vec<_> = p.iter().map(|t| g.param(t)).collect();
    LstmVars {
        w: [v[0], v[1], v[2], v[3]],
        u: [v[4], v[5], v[6], v[7]],
        b: [v[8], v[9], v[10], v[11]],
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
