use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Real, Tensor};

/// `(fan_in, fan_out)`: `(in, out)` for an `[out × in]` matrix and
/// `(Cin·kh·kw, Cout·kh·kw)` for `[Cout × Cin × kh × kw]` kernels.
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (*n, *n),
        [out, inp] => (*inp, *out),
        [out, inp, rest @ ..] => {
            let field: usize = rest.iter().product();
            (inp * field, out * field)
        }
    }
}

/// Half-width `√(6 / (fan_in + fan_out))` of the Xavier uniform range.
pub fn xavier_bound(shape: &[usize]) -> f64 {
    let (fi, fo) = fans(shape);
    (6.0 / (fi + fo) as f64).sqrt()
}

/// Seeds a generator from the run seed and a parameter name, so every
/// parameter's draw is independent of construction order.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a over the seed bytes followed by the name.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in seed.to_le_bytes().iter().chain(name.as_bytes()) {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Uniform draws on `[-a, a]` with `a` the Xavier bound of `shape`.
pub fn xavier_init<F: Real>(shape: &[usize], seed: u64, name: &str) -> Tensor<F> {
    let a = xavier_bound(shape);
    let mut rng = param_rng(seed, name);
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::from_f64_lossy(rng.gen_range(-a..=a))).collect();
    Tensor::new(shape.to_vec(), data).expect("xavier shape")
}
