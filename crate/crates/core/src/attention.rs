//! Multi-attention pooling of the sequential descriptors.
//!
//! `A = softmax_rows(W_a2 · tanh(W_a1 · Ω))` gives T weightings over the R
//! patches; the image descriptor is `Ψ = max(0, Ω · Aᵀ)`.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Real;

/// Attention scores `[T × R]` for a descriptor matrix `Ω` of shape
/// `[d_φ × R]` (one patch per column). No bias terms are involved.
pub fn attention_scores<F: Real>(g: &mut Graph<'_, F>, omega: Var, w_a1: Var, w_a2: Var) -> Result<Var> {
    let hidden = g.matmul(w_a1, omega)?;
    let hidden = g.tanh(hidden);
    let logits = g.matmul(w_a2, hidden)?;
    g.softmax_rows(logits)
}

/// `Ψ = max(0, Ω · Aᵀ)`, shape `[d_φ × T]`.
pub fn pool_descriptors<F: Real>(g: &mut Graph<'_, F>, omega: Var, scores: Var) -> Result<Var> {
    let (r_omega, r_scores) = (g.shape(omega).get(1).copied(), g.shape(scores).get(1).copied());
    if r_omega != r_scores || g.shape(omega).len() != 2 || g.shape(scores).len() != 2 {
        return Err(Error::dim(format!(
            "descriptor matrix {:?} and attention matrix {:?} disagree on patch count",
            g.shape(omega),
            g.shape(scores)
        )));
    }
    let at = g.transpose(scores)?;
    let mixed = g.matmul(omega, at)?;
    Ok(g.relu(mixed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_second_layer_gives_uniform_scores() {
        let omega = Tensor::<f64>::new([3, 5], (0..15).map(|v| v as f64 - 4.0).collect()).unwrap();
        let w1 = Tensor::<f64>::new([2, 3], vec![0.3, -0.2, 0.1, 0.5, 0.4, -0.6]).unwrap();
        let w2 = Tensor::<f64>::zeros([4, 2]);
        let mut g = Graph::new();
        let (o, a1, a2) = (g.input(&omega), g.param(&w1), g.param(&w2));
        let a = attention_scores(&mut g, o, a1, a2).unwrap();
        assert_eq!(g.shape(a), &[4, 5]);
        assert!(g.value(a).data().iter().all(|&v| v == 0.2));
    }

    #[test]
    fn one_hot_row_selects_a_patch() {
        let omega = Tensor::<f64>::new([2, 3], vec![1., -2., 3., -4., 5., 6.]).unwrap();
        let a = Tensor::<f64>::new([1, 3], vec![0., 1., 0.]).unwrap();
        let mut g = Graph::new();
        let (o, av) = (g.input(&omega), g.input(&a));
        let psi = pool_descriptors(&mut g, o, av).unwrap();
        assert_eq!(g.value(psi).data(), &[0., 5.]);
    }

    #[test]
    fn patch_count_mismatch() {
        let omega = Tensor::<f64>::zeros([2, 3]);
        let a = Tensor::<f64>::zeros([2, 4]);
        let mut g = Graph::new();
        let (o, av) = (g.input(&omega), g.input(&a));
        assert!(matches!(pool_descriptors(&mut g, o, av), Err(Error::Dimension(_))));
    }
}
