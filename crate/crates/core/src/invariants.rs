//! Quick oracle-equivalence suite behind the `invariants` subcommand.
//!
//! Every check compares a fast path against a slow, independently written
//! computation on small random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augmented::{
    augmented_attention, augmented_attention_backward, augmented_attention_forward,
    grouped_global_la_forward, ConvWeights,
};
use crate::config::{AttnConfig, FeatureMap, GlobalScale};
use crate::decode::DecodeState;
use crate::error::Result;
use crate::model::{generate_greedy, generate_speculative, ModelConfig, ToyModel};
use crate::reference::causal_linear_attention_ref;
use crate::speculative::{commit_path, tree_attention_forward, RandomDrafter, SpecTree, TreeShape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    Tensor::<f64>::random(&[n, d], -1.0, 1.0, rng)
}

fn random_config(rng: &mut ChaCha8Rng) -> AttnConfig {
    let fm = [
        FeatureMap::Relu,
        FeatureMap::EluPlusOne,
        FeatureMap::Identity,
    ][rng.gen_range(0..3)];
    let gs = if rng.gen_bool(0.5) {
        GlobalScale::None
    } else {
        GlobalScale::InverseCount
    };
    AttnConfig::single_head(
        rng.gen_range(1..7),
        rng.gen_range(1..9),
        rng.gen_range(1..6),
    )
    .with_alpha(rng.gen_range(0.0..2.0))
    .with_feature_map(fm)
    .with_global_scale(gs)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Per-token loops straight from the definition of each branch.
pub fn naive_augmented(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    w: &ConvWeights,
    cfg: &AttnConfig,
) -> Tensor {
    let (n, d, g, kk) = (q.rows(), q.cols(), cfg.group_size, cfg.conv_kernel);
    let fm = cfg.feature_map;
    let mut out = Tensor::zeros(&[n, d]);
    for t in 0..n {
        let start = t / g * g;
        let scores: Vec<f64> = (start..=t)
            .map(|i| (0..d).map(|c| q.at(t, c) * k.at(i, c)).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
        let mut global = vec![0.0; d];
        for i in 0..start {
            let s: f64 = (0..d)
                .map(|c| fm.apply(q.at(t, c)) * fm.apply(k.at(i, c)))
                .sum();
            (0..d).for_each(|c| global[c] += s * v.at(i, c));
        }
        let scale: f64 = cfg.global_scale.factor(start);
        for c in 0..d {
            let local: f64 = (start..=t)
                .map(|i| (scores[i - start] - m).exp() / z * v.at(i, c))
                .sum();
            let mut conv = 0.0;
            for j in 0..kk {
                // Newest tap reads row t, or row t + ⌊k/2⌋ when centred.
                let newest = t as isize
                    + if cfg.unmasked_conv {
                        (kk / 2) as isize
                    } else {
                        0
                    };
                let src = newest - (kk - 1 - j) as isize;
                if src >= 0 && (src as usize) < n {
                    conv += w.taps().at(j, c) * v.at(src as usize, c);
                }
            }
            out.set(t, c, local + cfg.alpha * scale * global[c] + conv);
        }
    }
    out
}

fn branch_sums(rng: &mut ChaCha8Rng, cases: usize) -> Result<Check> {
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let cfg = random_config(rng).with_unmasked_conv(rng.gen_bool(0.2));
        let n = rng.gen_range(1..33);
        let d = cfg.head_dim;
        let (q, k, v) = (rows(rng, n, d), rows(rng, n, d), rows(rng, n, d));
        let w = ConvWeights::random(cfg.conv_kernel, d, 1.0, rng);
        let fast = augmented_attention(&q, &k, &v, &w, &cfg)?;
        worst = worst.max(
            fast.max_abs_diff(&naive_augmented(&q, &k, &v, &w, &cfg))
                .unwrap_or(f64::INFINITY),
        );
    }
    Ok(Check {
        name: "branch sums match per-token loops",
        passed: worst <= 1e-12,
        detail: format!("{cases} configs, max err {worst:.2e}"),
    })
}

fn prefill_decode(rng: &mut ChaCha8Rng, cases: usize) -> Result<Check> {
    let mut worst = 0.0f64;
    let mut state_mismatch = 0;
    for _ in 0..cases {
        let cfg = random_config(rng);
        let n = rng.gen_range(1..65);
        let d = cfg.head_dim;
        let (q, k, v) = (rows(rng, n, d), rows(rng, n, d), rows(rng, n, d));
        let w = ConvWeights::random(cfg.conv_kernel, d, 1.0, rng);
        let batched = augmented_attention(&q, &k, &v, &w, &cfg)?;
        let mut s = DecodeState::new(&cfg)?;
        for t in 0..n {
            let o = s.decode_step(q.row(t), k.row(t), v.row(t), &w)?;
            worst = worst.max(max_diff(&o, batched.row(t)));
        }
        let cut = rng.gen_range(0..=n);
        let mut split = DecodeState::new(&cfg)?;
        let a = split.prefill(
            &q.slice_rows(0, cut),
            &k.slice_rows(0, cut),
            &v.slice_rows(0, cut),
            &w,
        )?;
        let b = split.prefill(
            &q.slice_rows(cut, n),
            &k.slice_rows(cut, n),
            &v.slice_rows(cut, n),
            &w,
        )?;
        let joined = Tensor::concat_rows(&[&a, &b])?;
        worst = worst.max(joined.max_abs_diff(&batched).unwrap_or(f64::INFINITY));
        if split.pos() != s.pos() || max_diff(split.kv_state(), s.kv_state()) > 1e-10 {
            state_mismatch += 1;
        }
    }
    Ok(Check {
        name: "prefill and stepwise decode agree",
        passed: worst <= 1e-10 && state_mismatch == 0,
        detail: format!("{cases} cases, max err {worst:.2e}, state mismatches {state_mismatch}"),
    })
}

fn random_tree(rng: &mut ChaCha8Rng) -> Result<SpecTree> {
    let depth = rng.gen_range(1..5);
    let fan: Vec<usize> = (0..depth).map(|_| rng.gen_range(1..4)).collect();
    let shape = TreeShape::fan_out(&fan)?;
    let tokens: Vec<u32> = (0..shape.len()).map(|_| rng.gen_range(0..50)).collect();
    SpecTree::from_shape(&shape, &tokens)
}

fn tree_sequential(rng: &mut ChaCha8Rng, cases: usize) -> Result<Check> {
    let mut worst = 0.0f64;
    let mut commit_fail = 0;
    for _ in 0..cases {
        let cfg = random_config(rng);
        let d = cfg.head_dim;
        let w = ConvWeights::random(cfg.conv_kernel, d, 1.0, rng);
        let mut state = DecodeState::new(&cfg)?;
        let p = rng.gen_range(0..12);
        state.prefill(&rows(rng, p, d), &rows(rng, p, d), &rows(rng, p, d), &w)?;
        let tree = random_tree(rng)?;
        let m = tree.len();
        let (q, k, v) = (rows(rng, m, d), rows(rng, m, d), rows(rng, m, d));
        let fast = tree_attention_forward(&state, &tree, &q, &k, &v, &w)?;
        for leaf in tree.leaves() {
            let path = tree.path(leaf);
            let mut seq = state.clone();
            for &i in &path {
                let o = seq.decode_step(q.row(i), k.row(i), v.row(i), &w)?;
                worst = worst.max(max_diff(&o, fast.row(i)));
            }
            let pick = |t: &Tensor| {
                Tensor::from_rows(&path.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>())
            };
            let mut committed = state.clone();
            commit_path(&mut committed, &pick(&k)?, &pick(&v)?)?;
            if !committed.bitwise_eq(&seq) {
                commit_fail += 1;
            }
        }
    }
    Ok(Check {
        name: "tree pass matches per-path sequential decode",
        passed: worst <= 1e-10 && commit_fail == 0,
        detail: format!("{cases} trees, max err {worst:.2e}, commit mismatches {commit_fail}"),
    })
}

fn causality(rng: &mut ChaCha8Rng, cases: usize) -> Result<Check> {
    let (mut leaks, mut undetected) = (0, 0);
    for _ in 0..cases {
        let mut cfg = random_config(rng);
        cfg.conv_kernel = rng.gen_range(2..6);
        let n = rng.gen_range(2..24);
        let d = cfg.head_dim;
        let (q, k, mut v) = (rows(rng, n, d), rows(rng, n, d), rows(rng, n, d));
        let w = ConvWeights::random(cfg.conv_kernel, d, 1.0, rng);
        let t = rng.gen_range(0..n - 1);
        let base = augmented_attention(&q, &k, &v, &w, &cfg)?;
        let unmasked = cfg.clone().with_unmasked_conv(true);
        let base_u = augmented_attention(&q, &k, &v, &w, &unmasked)?;
        let (mut q2, mut k2) = (q.clone(), k.clone());
        for i in t + 1..n {
            for tensor in [&mut q2, &mut k2, &mut v] {
                tensor.row_mut(i).iter_mut().for_each(|x| *x += 1.0);
            }
        }
        let pert = augmented_attention(&q2, &k2, &v, &w, &cfg)?;
        if (0..=t).any(|i| pert.row(i) != base.row(i)) {
            leaks += 1;
        }
        let pert_u = augmented_attention(&q2, &k2, &v, &w, &unmasked)?;
        if (0..=t).all(|i| pert_u.row(i) == base_u.row(i)) {
            undetected += 1;
        }
    }
    Ok(Check {
        name: "masked mode is causal, unmasked mode leaks",
        passed: leaks == 0 && undetected == 0,
        detail: format!(
            "{cases} cases, masked leaks {leaks}, unmasked cases without a leak {undetected}"
        ),
    })
}

fn gradients(rng: &mut ChaCha8Rng, cases: usize) -> Result<Check> {
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let mut cfg = random_config(rng);
        cfg.feature_map = FeatureMap::EluPlusOne;
        let n = rng.gen_range(1..9);
        let d = cfg.head_dim;
        let mut inputs = [
            rows(rng, n, d),
            rows(rng, n, d),
            rows(rng, n, d),
            rows(rng, cfg.conv_kernel, d),
        ];
        let probe = rows(rng, n, d);
        let loss = |x: &[Tensor; 4]| -> Result<f64> {
            let w = ConvWeights::new(x[3].clone())?;
            let out = augmented_attention(&x[0], &x[1], &x[2], &w, &cfg)?;
            Ok(out
                .data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum())
        };
        let w = ConvWeights::new(inputs[3].clone())?;
        let (_, cache) = augmented_attention_forward(&inputs[0], &inputs[1], &inputs[2], &w, &cfg)?;
        let g = augmented_attention_backward(cache, &probe)?;
        let analytic = [g.dq, g.dk, g.dv, g.dw];
        for t in 0..4 {
            for j in 0..inputs[t].len() {
                let orig = inputs[t].data()[j];
                inputs[t].data_mut()[j] = orig + 1e-6;
                let up = loss(&inputs)?;
                inputs[t].data_mut()[j] = orig - 1e-6;
                let down = loss(&inputs)?;
                inputs[t].data_mut()[j] = orig;
                let num = (up - down) / 2e-6;
                let a = analytic[t].data()[j];
                let abs = (num - a).abs();
                if abs > 1e-8 {
                    worst = worst.max(abs / num.abs().max(a.abs()));
                }
            }
        }
    }
    Ok(Check {
        name: "backward matches central differences",
        passed: worst < 1e-4,
        detail: format!("{cases} configs, max rel err {worst:.2e}"),
    })
}

fn g1_reduction(rng: &mut ChaCha8Rng, cases: usize) -> Result<Check> {
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let cfg = random_config(rng);
        let n = rng.gen_range(1..40);
        let d = cfg.head_dim;
        let (q, k, v) = (rows(rng, n, d), rows(rng, n, d), rows(rng, n, d));
        let (fast, _) =
            grouped_global_la_forward(&q, &k, &v, 1, cfg.feature_map, cfg.global_scale)?;
        let slow =
            causal_linear_attention_ref(&q, &k, &v, cfg.feature_map, false, cfg.global_scale)?;
        worst = worst.max(fast.max_abs_diff(&slow).unwrap_or(f64::INFINITY));
    }
    Ok(Check {
        name: "single-token groups reduce to strict linear attention",
        passed: worst <= 1e-12,
        detail: format!("{cases} instances, max err {worst:.2e}"),
    })
}

fn speculative_greedy(rng: &mut ChaCha8Rng, cases: usize) -> Result<Check> {
    let mut mismatches = 0;
    for i in 0..cases {
        let mut mc = ModelConfig::new(12, 8, 2, 2);
        mc.ffn_mult = 2;
        mc.max_seq = 64;
        mc.attn.group_size = rng.gen_range(1..5);
        mc.attn.conv_kernel = rng.gen_range(1..5);
        mc.seed = rng.gen();
        let model = ToyModel::new(&mc)?;
        let prompt: Vec<u32> = (0..rng.gen_range(1..6))
            .map(|_| rng.gen_range(0..12))
            .collect();
        let tree = random_tree(rng)?.shape();
        let greedy = generate_greedy(&model, &prompt, 16)?;
        let (spec, _) = generate_speculative(
            &model,
            &prompt,
            16,
            &tree,
            &mut RandomDrafter::new(i as u64, 12),
        )?;
        if spec != greedy {
            mismatches += 1;
        }
    }
    Ok(Check {
        name: "speculative generation equals greedy",
        passed: mismatches == 0,
        detail: format!("{cases} prompt/tree pairs, mismatches {mismatches}"),
    })
}

/// Runs the whole suite; `scale` multiplies the number of random cases.
pub fn run_all(seed: u64, scale: usize) -> Vec<Check> {
    let s = scale.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    type Suite = fn(&mut ChaCha8Rng, usize) -> Result<Check>;
    let suites: [(&'static str, Suite, usize); 7] = [
        ("branch sums", branch_sums, 20),
        ("prefill/decode", prefill_decode, 20),
        ("tree/sequential", tree_sequential, 20),
        ("causality", causality, 50),
        ("gradients", gradients, 2),
        ("G=1 reduction", g1_reduction, 20),
        ("speculative/greedy", speculative_greedy, 5),
    ];
    suites
        .into_iter()
        .map(|(label, f, n)| {
            f(&mut rng, n * s).unwrap_or_else(|e| Check {
                name: label,
                passed: false,
                detail: format!("error: {e}"),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for c in run_all(3, 1) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
