//! Timing harnesses behind the `bench` and `spec-bench` subcommands.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augmented::{augmented_attention, ConvWeights};
use crate::config::AttnConfig;
use crate::decode::DecodeState;
use crate::error::{Error, Result};
use crate::reference::softmax_attention_ref;
use crate::speculative::{
    decode_paths_independently_counted, tree_attention_forward_counted, Drafter, RandomDrafter,
    SpecTree, TreeShape,
};
use crate::tensor::{Scalar, Tensor};

pub const BENCH_HEADER: [&str; 5] = ["variant", "seq_len", "ms_mean", "ms_p50", "mem_bytes"];
pub const SPEC_BENCH_HEADER: [&str; 4] = ["mode", "nodes", "leaves", "ms_mean"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Augmented,
    Quadratic,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Augmented => "augmented",
            Variant::Quadratic => "quadratic",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub variant: Variant,
    pub seq_len: usize,
    pub ms_mean: f64,
    pub ms_p50: f64,
    /// Estimated bytes of intermediate buffers, excluding inputs.
    pub mem_bytes: u64,
}

/// Attention-operator prefill benchmark: `attn.n_heads` heads of width
/// `attn.head_dim` over random per-head Q, K, V.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub seq_lens: Vec<usize>,
    pub attn: AttnConfig,
    pub variants: Vec<Variant>,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seq_lens: vec![1024, 8192],
            attn: AttnConfig::new(256, 4),
            variants: vec![Variant::Augmented, Variant::Quadratic],
            reps: 3,
            warmup: 1,
            seed: 0,
        }
    }
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Working-set estimate in elements for one head.
fn mem_elems(variant: Variant, n: usize, cfg: &AttnConfig) -> usize {
    let d = cfg.head_dim;
    match variant {
        // local, global and conv outputs, the combined output, S and one
        // group of scores
        Variant::Augmented => 4 * n * d + d * d + cfg.group_size,
        // a block of scores (raw, masked, softmaxed), transposed keys and the
        // output
        Variant::Quadratic => 3 * 256.min(n) * n + 2 * n * d,
    }
}

/// Runs one variant once over all heads.
pub fn run_variant<T: Scalar>(
    variant: Variant,
    heads: &[(Tensor<T>, Tensor<T>, Tensor<T>)],
    conv: &[ConvWeights<T>],
    cfg: &AttnConfig,
) -> Result<Vec<Tensor<T>>> {
    heads
        .iter()
        .zip(conv)
        .map(|((q, k, v), w)| match variant {
            Variant::Augmented => augmented_attention(q, k, v, w, cfg),
            Variant::Quadratic => softmax_attention_ref(q, k, v, true),
        })
        .collect()
}

/// Per-head `(q, k, v)`.
pub type HeadInputs<T> = Vec<(Tensor<T>, Tensor<T>, Tensor<T>)>;

/// Random per-head inputs of length `n`.
pub fn random_heads<T: Scalar>(
    n: usize,
    cfg: &AttnConfig,
    rng: &mut ChaCha8Rng,
) -> (HeadInputs<T>, Vec<ConvWeights<T>>) {
    let d = cfg.head_dim;
    let heads = (0..cfg.n_heads)
        .map(|_| {
            (
                Tensor::random(&[n, d], -1.0, 1.0, rng),
                Tensor::random(&[n, d], -1.0, 1.0, rng),
                Tensor::random(&[n, d], -1.0, 1.0, rng),
            )
        })
        .collect();
    let bound = 1.0 / (cfg.conv_kernel as f64).sqrt();
    let conv = (0..cfg.n_heads)
        .map(|_| ConvWeights::random(cfg.conv_kernel, d, bound, rng))
        .collect();
    (heads, conv)
}

/// Wall time in milliseconds of each timed repetition.
pub fn time_variant<T: Scalar>(variant: Variant, n: usize, bc: &BenchConfig) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(bc.seed ^ n as u64);
    let (heads, conv) = random_heads::<T>(n, &bc.attn, &mut rng);
    for _ in 0..bc.warmup {
        run_variant(variant, &heads, &conv, &bc.attn)?;
    }
    (0..bc.reps.max(1))
        .map(|_| {
            let t = Instant::now();
            let out = run_variant(variant, &heads, &conv, &bc.attn)?;
            let ms = t.elapsed().as_secs_f64() * 1e3;
            std::hint::black_box(out);
            Ok(ms)
        })
        .collect()
}

pub fn bench_prefill<T: Scalar>(bc: &BenchConfig) -> Result<Vec<BenchRow>> {
    bc.attn.validate()?;
    if bc.seq_lens.contains(&0) {
        return Err(Error::Config("sequence lengths must be positive".into()));
    }
    let mut rows = Vec::new();
    for &n in &bc.seq_lens {
        for &variant in &bc.variants {
            let mut times = time_variant::<T>(variant, n, bc)?;
            let elems = mem_elems(variant, n, &bc.attn) * bc.attn.n_heads;
            rows.push(BenchRow {
                variant,
                seq_len: n,
                ms_mean: mean(&times),
                ms_p50: median(&mut times),
                mem_bytes: (elems * std::mem::size_of::<T>()) as u64,
            });
        }
    }
    Ok(rows)
}

pub fn write_bench_csv<W: Write>(rows: &[BenchRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(BENCH_HEADER)?;
    for r in rows {
        w.write_record([
            r.variant.name().to_string(),
            r.seq_len.to_string(),
            format!("{:.4}", r.ms_mean),
            format!("{:.4}", r.ms_p50),
            r.mem_bytes.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpecBenchRow {
    /// `tree` or `per-path`.
    pub mode: &'static str,
    pub nodes: usize,
    pub leaves: usize,
    pub ms_mean: f64,
    /// Q/K/V rows materialised per round.
    pub qkv_rows: usize,
}

/// Speculation-round benchmark for one head: the committed prefix is
/// `prefix_len` random tokens, each round scores a fresh random tree.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecBenchConfig {
    pub shape: TreeShape,
    pub rounds: usize,
    pub prefix_len: usize,
    pub attn: AttnConfig,
    pub seed: u64,
}

impl SpecBenchConfig {
    pub fn new(shape: TreeShape) -> Self {
        Self {
            shape,
            rounds: 100,
            prefix_len: 100,
            attn: AttnConfig::single_head(64, 64, 63),
            seed: 0,
        }
    }
}

/// A committed single-head state plus random node inputs for the benchmark.
pub fn spec_bench_inputs(
    sc: &SpecBenchConfig,
) -> Result<(DecodeState, SpecTree, [Tensor; 3], ConvWeights)> {
    let mut cfg = sc.attn.clone();
    cfg.max_tree_depth = cfg.max_tree_depth.max(64);
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let d = cfg.head_dim;
    let w = ConvWeights::random(
        cfg.conv_kernel,
        d,
        1.0 / (cfg.conv_kernel as f64).sqrt(),
        &mut rng,
    );
    let mut state = DecodeState::new(&cfg)?;
    let p = sc.prefix_len;
    state.prefill(
        &Tensor::<f64>::random(&[p, d], -1.0, 1.0, &mut rng),
        &Tensor::<f64>::random(&[p, d], -1.0, 1.0, &mut rng),
        &Tensor::<f64>::random(&[p, d], -1.0, 1.0, &mut rng),
        &w,
    )?;
    let tree = RandomDrafter::new(sc.seed, 1000).propose(&[], 0, &sc.shape)?;
    let m = tree.len();
    let qkv = [
        Tensor::<f64>::random(&[m, d], -1.0, 1.0, &mut rng),
        Tensor::<f64>::random(&[m, d], -1.0, 1.0, &mut rng),
        Tensor::<f64>::random(&[m, d], -1.0, 1.0, &mut rng),
    ];
    Ok((state, tree, qkv, w))
}

pub fn bench_speculation(sc: &SpecBenchConfig) -> Result<Vec<SpecBenchRow>> {
    let (state, tree, [q, k, v], w) = spec_bench_inputs(sc)?;
    let rounds = sc.rounds.max(1);
    let mut rows = Vec::with_capacity(2);
    for mode in ["tree", "per-path"] {
        let run = || match mode {
            "tree" => tree_attention_forward_counted(&state, &tree, &q, &k, &v, &w),
            _ => decode_paths_independently_counted(&state, &tree, &q, &k, &v, &w),
        };
        let qkv_rows = run()?.qkv_rows;
        let t = Instant::now();
        for _ in 0..rounds {
            std::hint::black_box(run()?);
        }
        rows.push(SpecBenchRow {
            mode,
            nodes: tree.len(),
            leaves: tree.leaves().len(),
            ms_mean: t.elapsed().as_secs_f64() * 1e3 / rounds as f64,
            qkv_rows,
        });
    }
    Ok(rows)
}

pub fn write_spec_csv<W: Write>(rows: &[SpecBenchRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SPEC_BENCH_HEADER)?;
    for r in rows {
        w.write_record([
            r.mode.to_string(),
            r.nodes.to_string(),
            r.leaves.to_string(),
            format!("{:.4}", r.ms_mean),
        ])?;
    }
    w.flush()?;
    Ok(())
}
