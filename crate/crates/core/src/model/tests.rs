use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::speculative::RandomDrafter;

fn small(seed: u64) -> ModelConfig {
    let mut c = ModelConfig::new(11, 8, 2, 2);
    c.ffn_mult = 2;
    c.max_seq = 64;
    c.attn.group_size = 3;
    c.attn.conv_kernel = 4;
    c.attn.alpha = 0.7;
    c.seed = seed;
    c
}

fn random_tokens(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

#[test]
fn prefill_shapes_and_errors() {
    let m = ToyModel::new(&small(0)).unwrap();
    let l = model_prefill(&m, &[3]).unwrap();
    assert_eq!(l.shape(), &[1, 11]);
    assert!(l.all_finite());
    assert!(matches!(model_prefill(&m, &[11]), Err(Error::Input(_))));
    assert!(matches!(model_prefill(&m, &[]), Err(Error::Input(_))));
    assert!(matches!(model_prefill(&m, &[0; 65]), Err(Error::Input(_))));
    let mut bad = small(0);
    bad.n_heads = 3;
    assert!(matches!(ToyModel::new(&bad), Err(Error::Config(_))));
}

#[test]
fn prefill_is_causal_and_deterministic() {
    let m = ToyModel::new(&small(1)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let toks = random_tokens(&mut rng, 12, 11);
        let base = model_prefill(&m, &toks).unwrap();
        assert_eq!(
            base,
            model_prefill(&ToyModel::new(&small(1)).unwrap(), &toks).unwrap()
        );
        let t = rng.gen_range(0..11);
        let mut pert = toks.clone();
        pert[t + 1] = (pert[t + 1] + 1) % 11;
        let other = model_prefill(&m, &pert).unwrap();
        for i in 0..=t {
            assert_eq!(base.row(i), other.row(i));
        }
    }
}

#[test]
fn streaming_matches_batched_logits() {
    let m = ToyModel::new(&small(2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let toks = random_tokens(&mut rng, 17, 11);
    let full = model_prefill(&m, &toks).unwrap();
    let mut s = ModelState::new(&m).unwrap();
    let a = s.advance(&m, &toks[..5]).unwrap();
    let b = s.advance(&m, &toks[5..6]).unwrap();
    let c = s.advance(&m, &toks[6..]).unwrap();
    let stitched = Tensor::concat_rows(&[&a, &b, &c]).unwrap();
    assert!(full.max_abs_diff(&stitched).unwrap() <= 1e-10);
    assert_eq!(s.tokens(), toks.as_slice());
}

#[test]
fn greedy_equals_full_recompute() {
    for seed in 0..4 {
        let m = ToyModel::new(&small(seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prompt = random_tokens(&mut rng, 1 + seed as usize * 3, 11);
        let n_new = 32 - prompt.len();
        let g = generate_greedy(&m, &prompt, n_new).unwrap();
        assert_eq!(g.len(), n_new);
        assert_eq!(g, generate_recompute(&m, &prompt, n_new).unwrap());
        assert_eq!(g, generate_greedy(&m, &prompt, n_new).unwrap());
    }
    let m = ToyModel::new(&small(0)).unwrap();
    assert!(generate_greedy(&m, &[1, 2], 0).unwrap().is_empty());
    assert!(matches!(generate_greedy(&m, &[], 3), Err(Error::Input(_))));
    assert!(matches!(
        generate_greedy(&m, &[1; 60], 5),
        Err(Error::Input(_))
    ));
}

#[test]
fn speculative_equals_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..12u64 {
        let m = ToyModel::new(&small(trial)).unwrap();
        let len = rng.gen_range(1..8);
        let prompt = random_tokens(&mut rng, len, 11);
        let n_new = rng.gen_range(1..20);
        let shape: TreeShape = ["1", "2", "3,2", "2,2,2", "1,1,1,1", "parents:-1,-1,0,0,2"]
            [trial as usize % 6]
            .parse()
            .unwrap();
        let greedy = generate_greedy(&m, &prompt, n_new).unwrap();
        let (spec, stats) = generate_speculative(
            &m,
            &prompt,
            n_new,
            &shape,
            &mut RandomDrafter::new(trial, 11),
        )
        .unwrap();
        assert_eq!(spec, greedy);
        assert!(stats.rounds <= n_new);
        let (own, _) =
            generate_speculative(&m, &prompt, n_new, &shape, &mut SelfDrafter::new(&m)).unwrap();
        assert_eq!(own, greedy);
    }
}

#[test]
fn perfect_chain_draft_is_fully_accepted() {
    let m = ToyModel::new(&small(5)).unwrap();
    for depth in 1..5 {
        let shape = TreeShape::chain(depth).unwrap();
        let (out, stats) =
            generate_speculative(&m, &[1, 2, 3], 20, &shape, &mut SelfDrafter::new(&m)).unwrap();
        assert_eq!(out, generate_greedy(&m, &[1, 2, 3], 20).unwrap());
        assert!(stats.accepted.iter().all(|&a| a == depth), "{stats:?}");
        assert_eq!(stats.rounds, 20usize.div_ceil(depth + 1));
    }
}

#[test]
fn unmasked_model_cannot_stream() {
    let mut c = small(0);
    c.unmasked_conv = true;
    let m = ToyModel::new(&c).unwrap();
    assert!(matches!(
        generate_greedy(&m, &[1], 2),
        Err(Error::Config(_))
    ));
    assert_eq!(generate_recompute(&m, &[1, 2], 3).unwrap().len(), 3);
}

#[test]
fn model_gradients_match_finite_differences() {
    let mut c = small(7);
    c.vocab_size = 6;
    c.attn.feature_map = crate::config::FeatureMap::EluPlusOne;
    let mut m = ToyModel::new(&c).unwrap();
    let batch = vec![
        Example {
            tokens: vec![0, 3, 5, 1, 2, 2, 4],
            prompt_len: 3,
        },
        Example {
            tokens: vec![5, 1, 1, 0, 3],
            prompt_len: 1,
        },
    ];
    let (_, grads) = loss_and_grads(&m, &batch).unwrap();
    let h = 1e-6;
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.data().to_vec()).collect();
    for (ti, ga) in analytic.iter().enumerate() {
        for j in 0..ga.len() {
            let orig = m.weights.tensors()[ti].data()[j];
            m.weights.tensors_mut()[ti].data_mut()[j] = orig + h;
            let up = loss_and_grads(&m, &batch).unwrap().0;
            m.weights.tensors_mut()[ti].data_mut()[j] = orig - h;
            let down = loss_and_grads(&m, &batch).unwrap().0;
            m.weights.tensors_mut()[ti].data_mut()[j] = orig;
            let num = (up - down) / (2.0 * h);
            let err = (num - ga[j]).abs() / num.abs().max(ga[j].abs()).max(1e-8);
            assert!(
                err < 1e-4 || (num - ga[j]).abs() < 1e-8,
                "tensor {ti} elem {j}: {num} vs {}",
                ga[j]
            );
        }
    }
}

#[test]
fn tasks_are_well_formed() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let e = Task::Copy.sample(16, 24, &mut rng).unwrap();
    assert_eq!(e.tokens.len(), 24);
    assert_eq!(e.tokens[0], 15);
    assert_eq!(e.tokens[12], 14);
    assert_eq!(e.prompt_len, 13);
    assert_eq!(&e.tokens[1..12], e.answer());
    assert_eq!(e.targets().len(), 23);
    let e = Task::Induction.sample(16, 24, &mut rng).unwrap();
    assert_eq!(e.tokens.len(), 24);
    let (a, b) = (e.tokens[22], e.tokens[23]);
    let hits: Vec<usize> = (1..22).filter(|&i| e.tokens[i] == a).collect();
    assert_eq!(hits.len(), 1);
    assert_eq!(e.tokens[hits[0] + 1], b);
    assert_eq!(e.answer(), &[b]);
    assert!(Task::Copy.sample(16, 40, &mut rng).is_err());
    assert_eq!("induction".parse::<Task>().unwrap(), Task::Induction);
}

#[test]
fn zero_learning_rate_keeps_loss_constant() {
    let mut c = small(0);
    c.vocab_size = 10;
    let mut m = ToyModel::new(&c).unwrap();
    let before = m.clone();
    let tc = TrainConfig {
        steps: 6,
        lr: 0.0,
        batch_size: 2,
        seq_len: 10,
        log_every: 2,
        eval_every: 0,
        eval_examples: 2,
        ..TrainConfig::default()
    };
    let r = train_synthetic(&mut m, &tc).unwrap();
    assert_eq!(r.curve.len(), 4);
    assert!(r.curve.iter().all(|p| p.loss == r.curve[0].loss));
    assert_eq!(m, before);
}

#[test]
fn training_reduces_loss() {
    let mut c = small(0);
    c.vocab_size = 8;
    let mut m = ToyModel::new(&c).unwrap();
    let tc = TrainConfig {
        steps: 40,
        lr: 0.3,
        batch_size: 4,
        seq_len: 10,
        eval_examples: 2,
        ..TrainConfig::default()
    };
    let r = train_synthetic(&mut m, &tc).unwrap();
    assert!(r.final_loss < r.curve[0].loss);
    let mut diverging = ToyModel::new(&c).unwrap();
    let err = train_synthetic(&mut diverging, &TrainConfig { lr: 1e300, ..tc }).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }));
}
