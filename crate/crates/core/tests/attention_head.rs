mod common;

use common::*;
use multiattn::attention::{attention_scores, pool_descriptors};
use multiattn::head::{bce_loss, posteriors, predict};
use multiattn::{Graph, Tensor};
use proptest::prelude::*;

/// Direct loop transcription of the score and pooling formulas.
fn transcribe(omega: &Tensor<f64>, w1: &Tensor<f64>, w2: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let (d, r) = (omega.shape()[0], omega.shape()[1]);
    let (da, t) = (w1.shape()[0], w2.shape()[0]);
    let mut hidden = vec![0.0; da * r];
    for a in 0..da {
        for p in 0..r {
            let mut s = 0.0;
            for k in 0..d {
                s += w1.data()[a * d + k] * omega.data()[k * r + p];
            }
            hidden[a * r + p] = s.tanh();
        }
    }
    let mut scores = vec![0.0; t * r];
    for i in 0..t {
        let logits: Vec<f64> = (0..r)
            .map(|p| (0..da).map(|a| w2.data()[i * da + a] * hidden[a * r + p]).sum())
            .collect();
        let total: f64 = logits.iter().map(|z| z.exp()).sum();
        for p in 0..r {
            scores[i * r + p] = logits[p].exp() / total;
        }
    }
    let mut psi = vec![0.0; d * t];
    for k in 0..d {
        for i in 0..t {
            let s: f64 = (0..r).map(|p| omega.data()[k * r + p] * scores[i * r + p]).sum();
            psi[k * t + i] = s.max(0.0);
        }
    }
    (scores, psi)
}

fn run(omega: &Tensor<f64>, w1: &Tensor<f64>, w2: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let mut g = Graph::new();
    let (o, a1, a2) = (g.input(omega), g.input(w1), g.input(w2));
    let a = attention_scores(&mut g, o, a1, a2).unwrap();
    let psi = pool_descriptors(&mut g, o, a).unwrap();
    (g.value(a).clone(), g.value(psi).clone())
}

#[test]
fn matches_transcription() {
    let mut r = rng(21);
    for _ in 0..50 {
        let omega = uniform(&mut r, &[8, 4], 1.5);
        let w1 = uniform(&mut r, &[3, 8], 1.0);
        let w2 = uniform(&mut r, &[2, 3], 2.0);
        let (a, psi) = run(&omega, &w1, &w2);
        let (a_ref, psi_ref) = transcribe(&omega, &w1, &w2);
        for (x, y) in a.data().iter().zip(&a_ref).chain(psi.data().iter().zip(&psi_ref)) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }
}

#[test]
fn single_head_pools_one_column() {
    let mut r = rng(22);
    let omega = uniform(&mut r, &[5, 6], 1.0);
    let (a, psi) = run(&omega, &uniform(&mut r, &[4, 5], 1.0), &uniform(&mut r, &[1, 4], 1.0));
    assert_eq!(a.shape(), &[1, 6]);
    assert_eq!(psi.shape(), &[5, 1]);
}

#[test]
fn uniform_scores_average_the_patches() {
    let mut r = rng(23);
    let omega = uniform(&mut r, &[6, 4], 1.0);
    let (_, psi) = run(&omega, &uniform(&mut r, &[3, 6], 1.0), &Tensor::zeros([2, 3]));
    for k in 0..6 {
        let mean = omega.data()[k * 4..(k + 1) * 4].iter().sum::<f64>() / 4.0;
        for t in 0..2 {
            assert!((psi.data()[k * 2 + t] - mean.max(0.0)).abs() < 1e-15);
        }
    }
}

/// Permuting patches permutes the score columns and leaves the pooled
/// descriptor unchanged. On dyadic inputs every sum is exact, so equality is
/// bit-for-bit.
#[test]
fn pooling_is_permutation_invariant_exactly() {
    let mut r = rng(24);
    let (d, rr, t) = (8, 6, 3);
    for _ in 0..50 {
        let omega = dyadic(&mut r, &[d, rr]);
        let a = dyadic(&mut r, &[t, rr]);
        let mut perm: Vec<usize> = (0..rr).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
        let permute = |m: &Tensor<f64>, rows: usize| {
            let data = (0..rows).flat_map(|i| perm.iter().map(move |&p| m.data()[i * rr + p])).collect();
            Tensor::new([rows, rr], data).unwrap()
        };
        let (op, ap) = (permute(&omega, d), permute(&a, t));
        let mut g = Graph::new();
        let (o1, a1, o2, a2) = (g.input(&omega), g.input(&a), g.input(&op), g.input(&ap));
        let p1 = pool_descriptors(&mut g, o1, a1).unwrap();
        let p2 = pool_descriptors(&mut g, o2, a2).unwrap();
        assert_eq!(g.value(p1), g.value(p2));
    }
}

#[test]
fn scores_follow_patch_permutations() {
    let mut r = rng(25);
    let omega = uniform(&mut r, &[8, 5], 1.0);
    let (w1, w2) = (uniform(&mut r, &[4, 8], 1.0), uniform(&mut r, &[3, 4], 1.0));
    let perm = [3, 0, 4, 1, 2];
    let op = Tensor::new([8, 5], (0..8).flat_map(|k| perm.map(|p| omega.data()[k * 5 + p])).collect()).unwrap();
    let (a, psi) = run(&omega, &w1, &w2);
    let (ap, psip) = run(&op, &w1, &w2);
    for t in 0..3 {
        for (j, &p) in perm.iter().enumerate() {
            assert!((ap.data()[t * 5 + j] - a.data()[t * 5 + p]).abs() < 1e-15);
        }
    }
    for (x, y) in psi.data().iter().zip(psip.data()) {
        assert!((x - y).abs() < 1e-14);
    }
}

proptest! {
    #[test]
    fn scores_are_distributions_and_pooling_is_nonnegative(
        seed in any::<u64>(),
        d in 1usize..10,
        rr in 1usize..9,
        da in 1usize..6,
        t in 1usize..5,
    ) {
        let mut r = rng(seed);
        let omega = uniform(&mut r, &[d, rr], 3.0);
        let (a, psi) = run(&omega, &uniform(&mut r, &[da, d], 2.0), &uniform(&mut r, &[t, da], 4.0));
        for i in 0..t {
            let row = &a.data()[i * rr..(i + 1) * rr];
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        prop_assert!(psi.data().iter().all(|&v| v >= 0.0));
        // Before rectification each pooled column is a convex combination of
        // the patch columns, so it lies within their per-row range.
        for k in 0..d {
            let vals = &omega.data()[k * rr..(k + 1) * rr];
            let hi = vals.iter().cloned().fold(f64::MIN, f64::max);
            for i in 0..t {
                prop_assert!(psi.data()[k * t + i] <= hi.max(0.0) + 1e-12);
            }
        }
    }

    #[test]
    fn posteriors_are_monotone(a in -40.0f64..40.0, b in -40.0f64..40.0) {
        let p = posteriors(&[a, b]);
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        if a < b {
            prop_assert!(p[0] <= p[1]);
        }
    }

    #[test]
    fn logit_loss_gradient_is_scaled_residual(
        z in proptest::collection::vec(-8.0f64..8.0, 1..12),
        bits in any::<u16>(),
    ) {
        let c = z.len();
        let y: Vec<f64> = (0..c).map(|j| f64::from((bits >> j) & 1)).collect();
        let zt = Tensor::from_vec(z.clone());
        let mut g = Graph::new();
        let zv = g.leaf(zt, true);
        let loss = g.bce_with_logits(zv, &Tensor::from_vec(y.clone())).unwrap();
        let grads = g.backward(loss).unwrap();
        let p = posteriors(&z);
        for j in 0..c {
            let want = (p[j] - y[j]) / c as f64;
            prop_assert!((grads.get_slice(zv).unwrap()[j] - want).abs() < 1e-10);
        }
    }
}

#[test]
fn posterior_grid_is_increasing() {
    let z: Vec<f64> = (-200..=200).map(|i| f64::from(i) * 0.1).collect();
    let p = posteriors(&z);
    assert!(p.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(posteriors(&[0.0f64])[0], 0.5);
    assert!(p[400] > 1.0 - 1e-8);
}

#[test]
fn loss_hand_cases() {
    assert!(bce_loss(&[1.0f64, 0.0, 1.0], &[1.0, 0.0, 1.0]) <= 2e-7);
    let half = bce_loss(&[0.5f64; 5], &[1.0, 0.0, 0.0, 1.0, 1.0]);
    assert!((half - std::f64::consts::LN_2).abs() < 1e-15);
    let v = bce_loss(&[0.9f64, 0.2], &[1.0, 0.0]);
    assert!((v - -0.5 * (0.9f64.ln() + 0.8f64.ln())).abs() < 1e-15);
}

#[test]
fn thresholding_hand_cases() {
    assert_eq!(predict(&[0.9f64, 0.2, 0.7], 0.5).unwrap(), vec![1, 0, 1]);
    assert_eq!(predict(&[0.49f64, 0.5, 0.51], 0.5).unwrap(), vec![0, 1, 1]);
    assert_eq!(predict(&[0.9f64, 0.98], 0.99).unwrap(), vec![0, 0]);
}
