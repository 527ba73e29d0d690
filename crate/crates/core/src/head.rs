//! Classification layer, sigmoid posteriors, cross-entropy and thresholding.

use crate::error::{Error, Result};
use crate::graph::{self, Graph, Var};
use crate::tensor::Real;

/// Class logits `z = W · vec(Ψ) + b`, where `vec` flattens `Ψ` (`[d_φ × T]`)
/// column by column.
pub fn classify<F: Real>(g: &mut Graph<'_, F>, psi: Var, weight: Var, bias: Var) -> Result<Var> {
    let n = g.value(psi).len();
    let cols = g.transpose(psi)?;
    let flat = g.reshape(cols, [n])?;
    g.linear(flat, weight, bias)
}

/// `P_j = 1 / (1 + e^{-z_j})`.
pub fn posteriors<F: Real>(z: &[F]) -> Vec<F> {
    z.iter().map(|&v| graph::sigmoid(v)).collect()
}

/// Mean over classes of the binary cross-entropy with probabilities clamped
/// to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss<F: Real>(p: &[F], y: &[F]) -> F {
    graph::bce_prob_value(p, y) / F::from_usize(p.len().max(1)).unwrap()
}

/// Mean of per-sample losses.
pub fn batch_loss<F: Real>(per_sample: &[F]) -> F {
    per_sample.iter().copied().sum::<F>() / F::from_usize(per_sample.len().max(1)).unwrap()
}

/// `ŷ_j = 1` iff `P_j ≥ threshold`.
pub fn predict<F: Real>(p: &[F], threshold: f64) -> Result<Vec<u8>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config(format!("threshold {threshold} outside (0, 1)")));
    }
    let t = F::from_f64_lossy(threshold);
    Ok(p.iter().map(|&v| u8::from(v >= t)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn posterior_values() {
        assert_eq!(posteriors(&[0.0f64]), vec![0.5]);
        let p = posteriors(&[-1.0f64, 2.0]);
        assert!((p[0] - 0.268_941_421_369_995_1).abs() < 1e-15);
        assert!((p[1] - 0.880_797_077_977_882_3).abs() < 1e-15);
        let grid: Vec<f64> = (-40..=40).map(|v| v as f64 * 0.5).collect();
        let p = posteriors(&grid);
        assert!(p.windows(2).all(|w| w[0] < w[1]));
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn loss_values() {
        let y = [1.0f64, 0.0];
        assert!(bce_loss(&y, &y) <= 2e-7);
        let half = [0.5f64; 5];
        let y5 = [1.0, 0.0, 1.0, 1.0, 0.0];
        assert!((bce_loss(&half, &y5) - std::f64::consts::LN_2).abs() < 1e-15);
        let loss = bce_loss(&[0.9f64, 0.2], &y);
        let want = -0.5 * (0.9f64.ln() + 0.8f64.ln());
        assert!((loss - want).abs() < 1e-15);
        assert!((loss - 0.164_252_033_486_018_2).abs() < 1e-12);
    }

    #[test]
    fn thresholding() {
        assert_eq!(predict(&[0.49f64, 0.5, 0.51], 0.5).unwrap(), vec![0, 1, 1]);
        assert_eq!(predict(&[0.9f64, 0.2, 0.7], 0.5).unwrap(), vec![1, 0, 1]);
        assert_eq!(predict(&[0.9f64, 0.2, 0.7], 0.999).unwrap(), vec![0, 0, 0]);
        assert!(matches!(predict(&[0.5f64], 1.0), Err(Error::Config(_))));
        assert!(matches!(predict(&[0.5f64], 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_weights_give_bias() {
        let psi = Tensor::<f64>::ones([256, 4]);
        let w = Tensor::<f64>::zeros([43, 1024]);
        let b = Tensor::<f64>::new([43], (0..43).map(|v| v as f64).collect()).unwrap();
        let mut g = Graph::new();
        let (p, wv, bv) = (g.input(&psi), g.param(&w), g.param(&b));
        let z = classify(&mut g, p, wv, bv).unwrap();
        assert_eq!(g.value(z), &b);
    }

    #[test]
    fn vectorization_is_column_major() {
        // Ψ = [[1, 2], [3, 4]] → vec = [1, 3, 2, 4]; pick each position with a one-hot row.
        let psi = Tensor::<f64>::new([2, 2], vec![1., 2., 3., 4.]).unwrap();
        let w = Tensor::<f64>::eye(4);
        let b = Tensor::<f64>::zeros([4]);
        let mut g = Graph::new();
        let (p, wv, bv) = (g.input(&psi), g.param(&w), g.param(&b));
        let z = classify(&mut g, p, wv, bv).unwrap();
        assert_eq!(g.value(z).data(), &[1., 3., 2., 4.]);
    }
}
