//! Brute-force attention oracles.
//!
//! Both functions are written directly in terms of the tensor primitives
//! (`matmul`, `masked_fill`, `row_softmax`) and share no code with the fast
//! kernels they are used to check.

use crate::config::{FeatureMap, GlobalScale};
use crate::error::{dim_err, Result};
use crate::tensor::{mask_fill_value, masked_fill, matmul, row_softmax, Mask, Scalar, Tensor};

/// Query rows processed per block, bounding the score matrix to
/// `BLOCK × n` entries.
const BLOCK: usize = 256;

fn check_qkv<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<()> {
    for (name, t) in [("Q", q), ("K", k), ("V", v)] {
        if t.shape().len() != 2 {
            return dim_err(format!("{name} must be a matrix, got {:?}", t.shape()));
        }
    }
    if q.rows() != k.rows() || k.rows() != v.rows() {
        return dim_err(format!(
            "row counts differ: Q {} K {} V {}",
            q.rows(),
            k.rows(),
            v.rows()
        ));
    }
    if q.cols() != k.cols() {
        return dim_err(format!("Q width {} != K width {}", q.cols(), k.cols()));
    }
    Ok(())
}

/// Quadratic softmax attention with `1/√d_k` scaling.
///
/// With `causal`, row `t` attends to rows `0..=t`.
pub fn softmax_attention_ref<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    causal: bool,
) -> Result<Tensor<T>> {
    check_qkv(q, k, v)?;
    let n = q.rows();
    let scale = T::one() / T::lit(q.cols() as f64).sqrt();
    let mut out = Vec::with_capacity(n * v.cols());
    let mut start = 0;
    while start < n {
        let end = (start + BLOCK).min(n);
        let visible = if causal { end } else { n };
        let kt = k.slice_rows(0, visible).transpose();
        let scores = matmul(&q.slice_rows(start, end), &kt)?;
        let scores = if causal {
            let mut mask = Mask::filled(&[end - start, visible], true);
            for i in 0..end - start {
                for j in start + i + 1..visible {
                    mask.set(i, j, false);
                }
            }
            masked_fill(&scores, &mask, mask_fill_value())?
        } else {
            scores
        };
        let probs = row_softmax(&scores, scale)?;
        let block = matmul(&probs, &v.slice_rows(0, visible))?;
        out.extend_from_slice(block.data());
        start = end;
    }
    Tensor::new(vec![n, v.cols()], out)
}

/// Unnormalised causal linear attention evaluated in quadratic form:
/// `out_t = scale(count_t) · Σ_{i ∈ visible(t)} (φ(q_t)·φ(k_i)) v_i`.
///
/// `visible(t)` is `0..=t` with `include_current`, otherwise `0..t` (so the
/// first row is zero).
pub fn causal_linear_attention_ref<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    feature_map: FeatureMap,
    include_current: bool,
    global_scale: GlobalScale,
) -> Result<Tensor<T>> {
    check_qkv(q, k, v)?;
    let n = q.rows();
    let fq = q.map(|x| feature_map.apply(x));
    let fk = k.map(|x| feature_map.apply(x));
    let sim = matmul(&fq, &fk.transpose())?;
    let mut mask = Mask::filled(&[n, n], false);
    for i in 0..n {
        let last = if include_current { i + 1 } else { i };
        for j in 0..last {
            mask.set(i, j, true);
        }
    }
    let sim = masked_fill(&sim, &mask, T::zero())?;
    let mut out = matmul(&sim, v)?;
    for t in 0..n {
        let count = if include_current { t + 1 } else { t };
        let f: T = global_scale.factor(count);
        out.row_mut(t).iter_mut().for_each(|x| *x = *x * f);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn col(xs: &[f64]) -> Tensor {
        Tensor::new(vec![xs.len(), 1], xs.to_vec()).unwrap()
    }

    #[test]
    fn single_token_returns_value_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = Tensor::<f64>::random(&[1, 4], -1.0, 1.0, &mut rng);
        let k = Tensor::<f64>::random(&[1, 4], -1.0, 1.0, &mut rng);
        let v = Tensor::<f64>::random(&[1, 4], -1.0, 1.0, &mut rng);
        let causal = softmax_attention_ref(&q, &k, &v, true).unwrap();
        let full = softmax_attention_ref(&q, &k, &v, false).unwrap();
        assert_eq!(causal, v);
        assert_eq!(full, causal);
    }

    #[test]
    fn identical_keys_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let q = Tensor::<f64>::random(&[3, 2], -1.0, 1.0, &mut rng);
        let k = Tensor::new(vec![3, 2], vec![0.3, -0.2, 0.3, -0.2, 0.3, -0.2]).unwrap();
        let v = Tensor::<f64>::random(&[3, 2], -1.0, 1.0, &mut rng);
        let out = softmax_attention_ref(&q, &k, &v, true).unwrap();
        for c in 0..2 {
            let mean = (v.at(0, c) + v.at(1, c) + v.at(2, c)) / 3.0;
            assert!((out.at(2, c) - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_evaluated_exp_weights() {
        let q = col(&[1.0, 1.0]);
        let k = col(&[0.0, 3f64.ln()]);
        let v = col(&[1.0, 5.0]);
        let out = softmax_attention_ref(&q, &k, &v, true).unwrap();
        assert!((out.at(1, 0) - 4.0).abs() < 1e-14);
        assert_eq!(out.at(0, 0), 1.0);
    }

    #[test]
    fn blocked_evaluation_matches_dense_rows() {
        // n spans several blocks; compare against per-row direct evaluation.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 600;
        let q = Tensor::<f64>::random(&[n, 3], -1.0, 1.0, &mut rng);
        let k = Tensor::<f64>::random(&[n, 3], -1.0, 1.0, &mut rng);
        let v = Tensor::<f64>::random(&[n, 2], -1.0, 1.0, &mut rng);
        let out = softmax_attention_ref(&q, &k, &v, true).unwrap();
        for t in [0, 255, 256, 599] {
            let logits: Vec<f64> = (0..=t)
                .map(|j| (0..3).map(|c| q.at(t, c) * k.at(j, c)).sum::<f64>() / 3f64.sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = w.iter().sum();
            for c in 0..2 {
                let e: f64 = (0..=t).map(|j| w[j] * v.at(j, c)).sum::<f64>() / z;
                assert!((out.at(t, c) - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_reference_hand_cumsum() {
        let q = col(&[2.0, 2.0]);
        let k = col(&[1.0, 3.0]);
        let v = col(&[1.0, 5.0]);
        let out =
            causal_linear_attention_ref(&q, &k, &v, FeatureMap::Identity, true, GlobalScale::None)
                .unwrap();
        assert_eq!(out.data(), &[2.0, 32.0]);
        let strict =
            causal_linear_attention_ref(&q, &k, &v, FeatureMap::Identity, false, GlobalScale::None)
                .unwrap();
        assert_eq!(strict.data(), &[0.0, 2.0]);
        let scaled = causal_linear_attention_ref(
            &q,
            &k,
            &v,
            FeatureMap::Identity,
            true,
            GlobalScale::InverseCount,
        )
        .unwrap();
        assert_eq!(scaled.data(), &[2.0, 16.0]);
    }

    #[test]
    fn relu_equals_identity_on_nonnegative_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let q = Tensor::<f64>::random(&[6, 3], 0.0, 1.0, &mut rng);
        let k = Tensor::<f64>::random(&[6, 3], 0.0, 1.0, &mut rng);
        let v = Tensor::<f64>::random(&[6, 3], -1.0, 1.0, &mut rng);
        let a = causal_linear_attention_ref(&q, &k, &v, FeatureMap::Relu, true, GlobalScale::None)
            .unwrap();
        let b =
            causal_linear_attention_ref(&q, &k, &v, FeatureMap::Identity, true, GlobalScale::None)
                .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn linear_reference_is_linear_in_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let q = Tensor::<f64>::random(&[7, 3], -1.0, 1.0, &mut rng);
        let k = Tensor::<f64>::random(&[7, 3], -1.0, 1.0, &mut rng);
        let v1 = Tensor::<f64>::random(&[7, 3], -1.0, 1.0, &mut rng);
        let v2 = Tensor::<f64>::random(&[7, 3], -1.0, 1.0, &mut rng);
        let (a, b) = (0.7, -1.3);
        let mix = v1.scale(a).add(&v2.scale(b)).unwrap();
        let f = |v: &Tensor| {
            causal_linear_attention_ref(&q, &k, v, FeatureMap::EluPlusOne, true, GlobalScale::None)
                .unwrap()
        };
        let lhs = f(&mix);
        let rhs = f(&v1).scale(a).add(&f(&v2).scale(b)).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-10);
    }

    #[test]
    fn future_rows_do_not_affect_past_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let n = 9;
        let q = Tensor::<f64>::random(&[n, 4], -1.0, 1.0, &mut rng);
        let k = Tensor::<f64>::random(&[n, 4], -1.0, 1.0, &mut rng);
        let v = Tensor::<f64>::random(&[n, 4], -1.0, 1.0, &mut rng);
        let base_sm = softmax_attention_ref(&q, &k, &v, true).unwrap();
        let base_la =
            causal_linear_attention_ref(&q, &k, &v, FeatureMap::Relu, false, GlobalScale::None)
                .unwrap();
        for t in 0..n - 1 {
            let mut k2 = k.clone();
            let mut v2 = v.clone();
            let mut q2 = q.clone();
            for r in t + 1..n {
                k2.row_mut(r).iter_mut().for_each(|x| *x += 3.0);
                v2.row_mut(r).iter_mut().for_each(|x| *x -= 2.0);
                q2.row_mut(r).iter_mut().for_each(|x| *x *= -1.5);
            }
            let sm = softmax_attention_ref(&q2, &k2, &v2, true).unwrap();
            let la = causal_linear_attention_ref(
                &q2,
                &k2,
                &v2,
                FeatureMap::Relu,
                false,
                GlobalScale::None,
            )
            .unwrap();
            for r in 0..=t {
                assert_eq!(sm.row(r), base_sm.row(r));
                assert_eq!(la.row(r), base_la.row(r));
            }
        }
    }

    #[test]
    fn shape_errors() {
        let a = Tensor::<f64>::zeros(&[3, 2]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        assert!(softmax_attention_ref(&a, &b, &a, true).is_err());
        assert!(
            causal_linear_attention_ref(&a, &a, &b, FeatureMap::Relu, true, GlobalScale::None)
                .is_err()
        );
    }
}
