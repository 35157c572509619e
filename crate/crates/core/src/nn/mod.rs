//! Differentiable building blocks: the tape, parameter storage, layers,
//! Adam, checkpoints and the finite-difference gradient checker.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;

pub use checkpoint::{Checkpoint, CheckpointManifest};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use layers::{AttentionBlock, FeedForward, ForwardCtx, LayerNorm, Linear, TransformerBlock};
pub use optim::Adam;
pub use params::{init_parameters, InitScheme, ParameterStore};
pub use tape::{softmax_rows, AttentionSpec, Gradients, Graph, Tensor, Var};

use ndarray::{Array1, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Single-head scaled dot-product attention: `softmax(Q Kᵀ / sqrt(d)) V`.
/// Returns the outputs and the weight matrix (one row per query).
pub fn scaled_attention(
    queries: ArrayView2<f64>,
    keys: ArrayView2<f64>,
    values: ArrayView2<f64>,
) -> Result<(Tensor, Tensor)> {
    let d = queries.ncols();
    if keys.ncols() != d {
        return Err(Error::Shape(format!(
            "queries have dimension {d}, keys {}",
            keys.ncols()
        )));
    }
    if values.nrows() != keys.nrows() {
        return Err(Error::Shape(format!(
            "{} value rows for {} keys",
            values.nrows(),
            keys.nrows()
        )));
    }
    if keys.nrows() == 0 {
        return Err(Error::Shape("attention over zero keys".into()));
    }
    let scores = queries.dot(&keys.t()) / (d as f64).sqrt();
    let weights = softmax_rows(scores.view());
    let outputs = weights.dot(&values);
    Ok((outputs, weights))
}

fn log_softmax(x: ArrayView1<f64>, tau: f64) -> Array1<f64> {
    let scaled = x.mapv(|v| v / tau);
    let max = scaled.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    scaled.mapv(|v| v - lse)
}

/// `KL(softmax(p/τ) ‖ softmax(q/τ))`.
pub fn kl_divergence(p_logits: ArrayView1<f64>, q_logits: ArrayView1<f64>, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
    }
    if p_logits.len() != q_logits.len() {
        return Err(Error::Shape(format!(
            "logit lengths differ: {} vs {}",
            p_logits.len(),
            q_logits.len()
        )));
    }
    let lp = log_softmax(p_logits, tau);
    let lq = log_softmax(q_logits, tau);
    let kl: f64 = lp
        .iter()
        .zip(lq.iter())
        .map(|(&a, &b)| a.exp() * (a - b))
        .sum();
    // Rounding can leave a tiny negative residue at equality.
    Ok(kl.max(0.0))
}

/// Graph version of [`kl_divergence`], one value per row: `teacher` and
/// `student` are m×n logit matrices, the result is m×1.
pub fn kl_rows(g: &mut Graph, teacher: Var, student: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
    }
    let t = g.scale(teacher, 1.0 / tau);
    let s = g.scale(student, 1.0 / tau);
    let lp = g.log_softmax(t);
    let lq = g.log_softmax(s);
    let p = g.exp(lp);
    let diff = g.sub(lp, lq)?;
    let terms = g.mul(p, diff)?;
    Ok(g.row_sum(terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    #[test]
    fn single_key_takes_all_weight() {
        let (out, w) =
            scaled_attention(array![[0.3, -2.0]].view(), array![[1.0, 1.0]].view(), array![[5.0, 6.0, 7.0]].view())
                .unwrap();
        assert_eq!(w, array![[1.0]]);
        assert_eq!(out, array![[5.0, 6.0, 7.0]]);
    }

    #[test]
    fn orthogonal_query_splits_evenly() {
        let (_, w) = scaled_attention(
            array![[0.0, 0.0, 1.0]].view(),
            array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]].view(),
            array![[1.0], [2.0]].view(),
        )
        .unwrap();
        assert!((w[[0, 0]] - 0.5).abs() < 1e-15 && (w[[0, 1]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn hand_evaluated_softmax() {
        // q = [1, 2]; keys [1,0], [0,1], [1,1] → scores 1/√2, 2/√2, 3/√2.
        let (_, w) = scaled_attention(
            array![[1.0, 2.0]].view(),
            array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]].view(),
            Array2::<f64>::zeros((3, 1)).view(),
        )
        .unwrap();
        let s = 2f64.sqrt();
        let e = [(1.0 / s).exp(), (2.0 / s).exp(), (3.0 / s).exp()];
        let z: f64 = e.iter().sum();
        for i in 0..3 {
            assert!((w[[0, i]] - e[i] / z).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_shape_mismatch() {
        let r = scaled_attention(
            array![[1.0, 2.0]].view(),
            array![[1.0, 0.0, 0.0]].view(),
            array![[1.0]].view(),
        );
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn kl_identical_is_zero() {
        let p = array![0.3, -1.2, 4.0];
        assert_eq!(kl_divergence(p.view(), p.view(), 2.5).unwrap(), 0.0);
    }

    #[test]
    fn kl_diverging_is_large() {
        let kl = kl_divergence(array![0.0, 0.0].view(), array![50.0, -50.0].view(), 1.0).unwrap();
        assert!(kl > 40.0, "{kl}");
    }

    #[test]
    fn kl_two_point_closed_form() {
        // p = softmax([1,0]) = (a, 1-a), q = softmax([0,1]) = (1-a, a).
        let a = 1.0 / (1.0 + (-1.0f64).exp());
        let expected = a * (a / (1.0 - a)).ln() + (1.0 - a) * ((1.0 - a) / a).ln();
        let kl = kl_divergence(array![1.0, 0.0].view(), array![0.0, 1.0].view(), 1.0).unwrap();
        assert!((kl - expected).abs() < 1e-9);
    }

    #[test]
    fn kl_rejects_non_positive_tau() {
        let p = array![1.0];
        assert!(matches!(kl_divergence(p.view(), p.view(), 0.0), Err(Error::Domain(_))));
        assert!(matches!(kl_divergence(p.view(), p.view(), -1.0), Err(Error::Domain(_))));
    }

    proptest! {
        #[test]
        fn kl_non_negative(
            pair in (1usize..12).prop_flat_map(|n| (
                prop::collection::vec(-20.0f64..20.0, n),
                prop::collection::vec(-20.0f64..20.0, n),
            )),
            tau in 0.05f64..10.0,
        ) {
            let (p, q) = pair;
            let kl = kl_divergence(Array1::from(p).view(), Array1::from(q).view(), tau).unwrap();
            prop_assert!(kl >= 0.0);
        }

        #[test]
        fn softmax_is_distribution(row in prop::collection::vec(-500.0f64..500.0, 1..20), shift in -100.0f64..100.0) {
            let x = Array2::from_shape_vec((1, row.len()), row).unwrap();
            let p = softmax_rows(x.view());
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.sum() - 1.0).abs() < 1e-9);
            let shifted = softmax_rows((&x + shift).view());
            for (a, b) in p.iter().zip(shifted.iter()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn attention_permutation_equivariant(seed in 0u64..500) {
            use rand::{seq::SliceRandom, SeedableRng, Rng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(2..7);
            let q = Array2::from_shape_simple_fn((1, 4), || rng.random_range(-2.0..2.0));
            let k = Array2::from_shape_simple_fn((n, 4), || rng.random_range(-2.0..2.0));
            let v = Array2::from_shape_simple_fn((n, 3), || rng.random_range(-2.0..2.0));
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let kp = k.select(ndarray::Axis(0), &perm);
            let vp = v.select(ndarray::Axis(0), &perm);
            let (o1, w1) = scaled_attention(q.view(), k.view(), v.view()).unwrap();
            let (o2, w2) = scaled_attention(q.view(), kp.view(), vp.view()).unwrap();
            for (a, b) in o1.iter().zip(o2.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            for (i, &p) in perm.iter().enumerate() {
                prop_assert!((w2[[0, i]] - w1[[0, p]]).abs() < 1e-15);
            }
        }
    }
}
