//! Three-branch augmented linear attention over a full sequence.
//!
//! For a single head the output is
//!
//! ```text
//! out = local_group_softmax(Q, K, V) + α · grouped_global_la(Q, K, V) + causal_dwconv(V)
//! ```
//!
//! * the local branch runs causal softmax attention inside non-overlapping
//!   groups of `G` tokens;
//! * the global branch lets a token in group `g` read the running state
//!   `S_{g-1} = Σ φ(k_i)ᵀ v_i` over every token of earlier groups;
//! * the convolution branch is a depthwise filter over the value stream whose
//!   taps only reach the current and past positions.
//!
//! Each branch can also be evaluated on top of a prefix (a folded state, a
//! partially filled group and a convolution tail); the streaming decoder
//! uses that form for chunked prefill.

mod multihead;

pub(crate) use multihead::{merge_heads, split_heads};
pub use multihead::{
    multi_head_augmented, multi_head_augmented_backward, multi_head_augmented_forward, AttnWeights,
    MultiHeadCache, MultiHeadGrads,
};

use crate::config::{AttnConfig, FeatureMap, GlobalScale};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{add_outer, axpy, dot, softmax_in_place, vec_mat, Scalar, Tensor};

/// Depthwise convolution taps, `k × d_k`. Row 0 is the oldest tap and row
/// `k-1` multiplies the current position.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights<T: Scalar = f64> {
    taps: Tensor<T>,
}

impl<T: Scalar> ConvWeights<T> {
    pub fn new(taps: Tensor<T>) -> Result<Self> {
        if taps.shape().len() != 2 || taps.rows() == 0 {
            return dim_err(format!("conv taps must be k x d_k, got {:?}", taps.shape()));
        }
        Ok(Self { taps })
    }

    pub fn zeros(kernel: usize, channels: usize) -> Self {
        Self {
            taps: Tensor::zeros(&[kernel, channels]),
        }
    }

    /// Passes the current row through unchanged.
    pub fn identity(kernel: usize, channels: usize) -> Self {
        let mut w = Self::zeros(kernel, channels);
        w.taps
            .row_mut(kernel - 1)
            .iter_mut()
            .for_each(|x| *x = T::one());
        w
    }

    pub fn random<R: rand::Rng + ?Sized>(
        kernel: usize,
        channels: usize,
        bound: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            taps: Tensor::random(&[kernel, channels], -bound, bound, rng),
        }
    }

    pub fn kernel(&self) -> usize {
        self.taps.rows()
    }

    pub fn channels(&self) -> usize {
        self.taps.cols()
    }

    pub fn tap(&self, j: usize) -> &[T] {
        self.taps.row(j)
    }

    pub fn taps(&self) -> &Tensor<T> {
        &self.taps
    }

    pub fn taps_mut(&mut self) -> &mut Tensor<T> {
        &mut self.taps
    }
}

/// Elementwise feature map.
pub fn feature_map<T: Scalar>(x: &Tensor<T>, kind: FeatureMap) -> Tensor<T> {
    x.map(|v| kind.apply(v))
}

/// Attention context that precedes the rows handed to a branch. The
/// convolution tail is passed to [`conv_branch`] separately.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Prefix<'a, T: Scalar> {
    /// Folded `d_k × d_k` state.
    pub state: Option<&'a [T]>,
    /// Tokens folded into `state`.
    pub folded: usize,
    /// Rows of the currently open (not yet folded) group.
    pub open_k: &'a [Vec<T>],
    pub open_v: &'a [Vec<T>],
}

impl<T: Scalar> Prefix<'_, T> {
    pub(crate) fn empty() -> Self {
        Prefix {
            state: None,
            folded: 0,
            open_k: &[],
            open_v: &[],
        }
    }
}

fn check_inputs<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<usize> {
    for (name, t) in [("Q", q), ("K", k), ("V", v)] {
        if t.shape().len() != 2 {
            return dim_err(format!("{name} must be n x d_k, got {:?}", t.shape()));
        }
    }
    if q.shape() != k.shape() || k.shape() != v.shape() {
        return dim_err(format!(
            "Q {:?}, K {:?}, V {:?} must match",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    Ok(q.cols())
}

fn check_group(g: usize) -> Result<()> {
    if g == 0 {
        return Err(Error::Config("group_size must be >= 1".into()));
    }
    Ok(())
}

/// Softmax attention of `q` over the given keys/values, written into `out`.
/// `scratch` receives the attention probabilities.
#[inline]
pub(crate) fn attend_row<T: Scalar>(
    q: &[T],
    keys: &[&[T]],
    values: &[&[T]],
    scale: T,
    scratch: &mut Vec<T>,
    out: &mut [T],
) {
    scratch.clear();
    scratch.extend(keys.iter().map(|k| dot(q, k)));
    softmax_in_place(scratch, scale);
    out.iter_mut().for_each(|x| *x = T::zero());
    for (&p, v) in scratch.iter().zip(values) {
        axpy(out, p, v);
    }
}

/// `factor · φ(q) · S`.
#[inline]
pub(crate) fn global_row<T: Scalar>(fq: &[T], state: &[T], factor: T, out: &mut [T]) {
    vec_mat(fq, state, out.len(), out);
    out.iter_mut().for_each(|x| *x = *x * factor);
}

/// Adds `Σ_j W[j] ⊙ window[j]` into `out`; `None` entries are zero padding.
#[inline]
pub(crate) fn conv_row<T: Scalar>(w: &ConvWeights<T>, window: &[Option<&[T]>], out: &mut [T]) {
    out.iter_mut().for_each(|x| *x = T::zero());
    for (j, row) in window.iter().enumerate() {
        if let Some(row) = row {
            for ((o, &wj), &x) in out.iter_mut().zip(w.tap(j)).zip(row.iter()) {
                *o = *o + wj * x;
            }
        }
    }
}

/// Final mix of the three branches for one row.
#[inline]
pub(crate) fn combine_row<T: Scalar>(
    local: &[T],
    global: &[T],
    conv: &[T],
    alpha: T,
    out: &mut [T],
) {
    for (((o, &l), &g), &c) in out.iter_mut().zip(local).zip(global).zip(conv) {
        *o = (l + alpha * g) + c;
    }
}

/// Causal depthwise convolution of `v` with left zero padding.
pub fn masked_dwconv_forward<T: Scalar>(v: &Tensor<T>, w: &ConvWeights<T>) -> Result<Tensor<T>> {
    conv_branch(v, w, &[], false)
}

/// Depthwise convolution whose window is centred on the current row, so
/// taps read up to `⌊k/2⌋` future rows. Only used for the leakage
/// negative control.
pub fn unmasked_dwconv_forward<T: Scalar>(v: &Tensor<T>, w: &ConvWeights<T>) -> Result<Tensor<T>> {
    conv_branch(v, w, &[], true)
}

/// Row read by tap `j` for output row `t`. Negative values reach back into
/// the tail (or the left zero padding); values `>= n` are right padding.
#[inline]
pub(crate) fn conv_source(t: usize, j: usize, k: usize, unmasked: bool) -> isize {
    let offset = if unmasked { k / 2 } else { 0 };
    t as isize + j as isize + offset as isize - (k as isize - 1)
}

pub(crate) fn conv_branch<T: Scalar>(
    v: &Tensor<T>,
    w: &ConvWeights<T>,
    tail: &[Vec<T>],
    unmasked: bool,
) -> Result<Tensor<T>> {
    if v.shape().len() != 2 || v.cols() != w.channels() {
        return dim_err(format!(
            "conv: V {:?} vs taps {:?}",
            v.shape(),
            w.taps().shape()
        ));
    }
    let (n, d) = (v.rows(), v.cols());
    let k = w.kernel();
    let mut out = vec![T::zero(); n * d];
    let mut window: Vec<Option<&[T]>> = Vec::with_capacity(k);
    for t in 0..n {
        window.clear();
        for j in 0..k {
            let s = conv_source(t, j, k, unmasked);
            window.push(if s >= 0 {
                let s = s as usize;
                (s < n).then(|| v.row(s))
            } else {
                let back = (-s) as usize;
                (back <= tail.len()).then(|| tail[tail.len() - back].as_slice())
            });
        }
        conv_row(w, &window, &mut out[t * d..(t + 1) * d]);
    }
    Ok(Tensor::from_parts(vec![n, d], out))
}

/// Causal softmax attention restricted to non-overlapping groups of `g`
/// tokens.
pub fn local_group_attention_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    g: usize,
) -> Result<(Tensor<T>, LocalCache<T>)> {
    check_inputs(q, k, v)?;
    check_group(g)?;
    let (out, probs) = local_branch(q, k, v, g, &Prefix::empty(), true);
    Ok((out, LocalCache { probs }))
}

/// Attention probabilities of the local branch, one row per token covering
/// the keys from its group start up to itself.
#[derive(Debug, Clone)]
pub struct LocalCache<T: Scalar = f64> {
    pub probs: Vec<Vec<T>>,
}

pub(crate) fn local_branch<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    g: usize,
    prefix: &Prefix<'_, T>,
    keep_probs: bool,
) -> (Tensor<T>, Vec<Vec<T>>) {
    let (n, d) = (q.rows(), q.cols());
    let b = prefix.open_k.len();
    let scale = T::one() / T::lit(d as f64).sqrt();
    let mut out = vec![T::zero(); n * d];
    let mut probs = Vec::with_capacity(if keep_probs { n } else { 0 });
    let mut keys: Vec<&[T]> = Vec::with_capacity(g);
    let mut vals: Vec<&[T]> = Vec::with_capacity(g);
    let mut scratch = Vec::with_capacity(g);
    for i in 0..n {
        let c = b + i;
        let start = (c / g) * g;
        keys.clear();
        vals.clear();
        for idx in start..=c {
            if idx < b {
                keys.push(&prefix.open_k[idx]);
                vals.push(&prefix.open_v[idx]);
            } else {
                keys.push(k.row(idx - b));
                vals.push(v.row(idx - b));
            }
        }
        attend_row(
            q.row(i),
            &keys,
            &vals,
            scale,
            &mut scratch,
            &mut out[i * d..(i + 1) * d],
        );
        if keep_probs {
            probs.push(scratch.clone());
        }
    }
    (Tensor::from_parts(vec![n, d], out), probs)
}

/// States and feature maps kept by the global branch for the backward pass.
#[derive(Debug, Clone)]
pub struct GlobalCache<T: Scalar = f64> {
    /// `S_{g-1}` read by the tokens of group `g`, flattened `d_k × d_k`.
    pub group_states: Vec<Vec<T>>,
    /// Tokens folded into each entry of `group_states`.
    pub group_counts: Vec<usize>,
    pub fq: Tensor<T>,
    pub fk: Tensor<T>,
}

/// Grouped global linear attention: a token in group `g` reads
/// `φ(q) · S_{g-1}`, where `S_{g-1}` sums `φ(k_i)ᵀ v_i` over all earlier
/// groups. Tokens of the first group output zero.
pub fn grouped_global_la_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    g: usize,
    fm: FeatureMap,
    scale: GlobalScale,
) -> Result<(Tensor<T>, GlobalCache<T>)> {
    check_inputs(q, k, v)?;
    check_group(g)?;
    Ok(global_branch(q, k, v, g, fm, scale, &Prefix::empty(), true))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn global_branch<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    g: usize,
    fm: FeatureMap,
    scale: GlobalScale,
    prefix: &Prefix<'_, T>,
    keep_states: bool,
) -> (Tensor<T>, GlobalCache<T>) {
    let (n, d) = (q.rows(), q.cols());
    let b = prefix.open_k.len();
    let mut state = match prefix.state {
        Some(s) => s.to_vec(),
        None => vec![T::zero(); d * d],
    };
    let mut folded = prefix.folded;
    let fq = feature_map(q, fm);
    let fk = feature_map(k, fm);
    let mut out = vec![T::zero(); n * d];
    let mut group_states = Vec::new();
    let mut group_counts = Vec::new();
    if keep_states && n > 0 {
        group_states.push(state.clone());
        group_counts.push(folded);
    }
    let mut phi_scratch = vec![T::zero(); d];
    for i in 0..n {
        let c = b + i;
        if c > 0 && c.is_multiple_of(g) {
            // The group ending at c-1 is complete: fold it in row order.
            for idx in c - g..c {
                if idx < b {
                    for (p, &x) in phi_scratch.iter_mut().zip(&prefix.open_k[idx]) {
                        *p = fm.apply(x);
                    }
                    add_outer(&mut state, &phi_scratch, &prefix.open_v[idx]);
                } else {
                    add_outer(&mut state, fk.row(idx - b), v.row(idx - b));
                }
            }
            folded += g;
            if keep_states {
                group_states.push(state.clone());
                group_counts.push(folded);
            }
        }
        global_row(
            fq.row(i),
            &state,
            scale.factor(folded),
            &mut out[i * d..(i + 1) * d],
        );
    }
    (
        Tensor::from_parts(vec![n, d], out),
        GlobalCache {
            group_states,
            group_counts,
            fq,
            fk,
        },
    )
}

fn check_weights<T: Scalar>(d: usize, w: &ConvWeights<T>, cfg: &AttnConfig) -> Result<()> {
    cfg.validate()?;
    if d != cfg.head_dim {
        return dim_err(format!(
            "inputs have width {d}, config head_dim {}",
            cfg.head_dim
        ));
    }
    if w.kernel() != cfg.conv_kernel || w.channels() != d {
        return dim_err(format!(
            "conv taps {:?} vs kernel {} x width {d}",
            w.taps().shape(),
            cfg.conv_kernel
        ));
    }
    Ok(())
}

/// Branch outputs combined into a single tensor, no cache.
pub fn augmented_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    w: &ConvWeights<T>,
    cfg: &AttnConfig,
) -> Result<Tensor<T>> {
    let d = check_inputs(q, k, v)?;
    check_weights(d, w, cfg)?;
    let prefix = Prefix::empty();
    let (local, _) = local_branch(q, k, v, cfg.group_size, &prefix, false);
    let (global, _) = global_branch(
        q,
        k,
        v,
        cfg.group_size,
        cfg.feature_map,
        cfg.global_scale,
        &prefix,
        false,
    );
    let conv = conv_branch(v, w, &[], cfg.unmasked_conv)?;
    Ok(combine(&local, &global, &conv, T::lit(cfg.alpha)))
}

pub(crate) fn combine<T: Scalar>(
    local: &Tensor<T>,
    global: &Tensor<T>,
    conv: &Tensor<T>,
    alpha: T,
) -> Tensor<T> {
    let d = local.cols();
    let mut out = vec![T::zero(); local.len()];
    for (i, o) in out.chunks_mut(d.max(1)).enumerate() {
        combine_row(local.row(i), global.row(i), conv.row(i), alpha, o);
    }
    Tensor::from_parts(local.shape().to_vec(), out)
}

/// Everything the backward pass needs from one forward call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    w: ConvWeights,
    cfg: AttnConfig,
    local: LocalCache,
    global: GlobalCache,
    /// Global branch output before the α weight.
    global_out: Tensor,
}

impl ForwardCache {
    pub fn config(&self) -> &AttnConfig {
        &self.cfg
    }

    pub fn seq_len(&self) -> usize {
        self.q.rows()
    }
}

/// Forward pass keeping the cache required by [`augmented_attention_backward`].
pub fn augmented_attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    w: &ConvWeights,
    cfg: &AttnConfig,
) -> Result<(Tensor, ForwardCache)> {
    let d = check_inputs(q, k, v)?;
    check_weights(d, w, cfg)?;
    let prefix = Prefix::empty();
    let (local, probs) = local_branch(q, k, v, cfg.group_size, &prefix, true);
    let (global, gcache) = global_branch(
        q,
        k,
        v,
        cfg.group_size,
        cfg.feature_map,
        cfg.global_scale,
        &prefix,
        true,
    );
    let conv = conv_branch(v, w, &[], cfg.unmasked_conv)?;
    let out =
        combine(&local, &global, &conv, cfg.alpha).check_finite("augmented_attention_forward")?;
    let cache = ForwardCache {
        q: q.clone(),
        k: k.clone(),
        v: v.clone(),
        w: w.clone(),
        cfg: cfg.clone(),
        local: LocalCache { probs },
        global: gcache,
        global_out: global,
    };
    Ok((out, cache))
}

/// Gradients of a single-head augmented attention call.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnGrads {
    pub dq: Tensor,
    pub dk: Tensor,
    pub dv: Tensor,
    /// Gradient of the convolution taps, `k × d_k`.
    pub dw: Tensor,
    pub dalpha: f64,
}

/// Analytic gradients of [`augmented_attention_forward`]. Consumes the cache.
pub fn augmented_attention_backward(cache: ForwardCache, d_out: &Tensor) -> Result<AttnGrads> {
    let ForwardCache {
        q,
        k,
        v,
        w,
        cfg,
        local,
        global,
        global_out,
    } = cache;
    if d_out.shape() != q.shape() {
        return Err(Error::Contract(format!(
            "gradient {:?} does not match cached forward {:?}",
            d_out.shape(),
            q.shape()
        )));
    }
    if local.probs.len() != q.rows() {
        return Err(Error::Contract(
            "cache was built without local probabilities".into(),
        ));
    }
    let (n, d) = (q.rows(), q.cols());
    let g = cfg.group_size;
    let scale = cfg.softmax_scale();
    let mut dq = Tensor::zeros(&[n, d]);
    let mut dk = Tensor::zeros(&[n, d]);
    let mut dv = Tensor::zeros(&[n, d]);

    // Local branch.
    let mut dp = Vec::with_capacity(g);
    for i in 0..n {
        let start = (i / g) * g;
        let p = &local.probs[i];
        let go = d_out.row(i);
        dp.clear();
        dp.extend((start..=i).map(|j| dot(go, v.row(j))));
        let mean: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
        for (jj, j) in (start..=i).enumerate() {
            axpy(dv.row_mut(j), p[jj], go);
            let ds = p[jj] * (dp[jj] - mean) * scale;
            axpy(dq.row_mut(i), ds, k.row(j));
            axpy(dk.row_mut(j), ds, q.row(i));
        }
    }

    // Global branch: per-group state gradients, then suffix sums over groups.
    let n_groups = global.group_states.len();
    let mut d_states = vec![vec![0.0; d * d]; n_groups];
    let mut dphi = vec![0.0; d];
    for i in 0..n {
        let gi = i / g;
        let coeff = cfg.alpha * cfg.global_scale.factor::<f64>(global.group_counts[gi]);
        if coeff == 0.0 {
            continue;
        }
        let s = &global.group_states[gi];
        let go = d_out.row(i);
        for (a, dpa) in dphi.iter_mut().enumerate() {
            *dpa = coeff * dot(&s[a * d..(a + 1) * d], go);
        }
        for (c, dqc) in dq.row_mut(i).iter_mut().enumerate() {
            *dqc += dphi[c] * cfg.feature_map.derivative(q.at(i, c));
        }
        let fq: Vec<f64> = global.fq.row(i).iter().map(|x| x * coeff).collect();
        add_outer(&mut d_states[gi], &fq, go);
    }
    let mut suffix = vec![0.0; d * d];
    for gi in (0..n_groups).rev() {
        // Rows of group gi feed the states of every later group.
        for i in gi * g..((gi + 1) * g).min(n) {
            let fk = global.fk.row(i);
            let vi = v.row(i);
            for a in 0..d {
                let r = &suffix[a * d..(a + 1) * d];
                dk.row_mut(i)[a] += dot(r, vi) * cfg.feature_map.derivative(k.at(i, a));
                axpy(dv.row_mut(i), fk[a], r);
            }
        }
        for (sacc, &ds) in suffix.iter_mut().zip(&d_states[gi]) {
            *sacc += ds;
        }
    }
    let dalpha = d_out
        .data()
        .iter()
        .zip(global_out.data())
        .map(|(a, b)| a * b)
        .sum();

    // Convolution branch.
    let kk = w.kernel();
    let mut dw = Tensor::zeros(&[kk, d]);
    for t in 0..n {
        let go = d_out.row(t);
        for j in 0..kk {
            let s = conv_source(t, j, kk, cfg.unmasked_conv);
            if s < 0 || s as usize >= n {
                continue;
            }
            let s = s as usize;
            for c in 0..d {
                dw.row_mut(j)[c] += go[c] * v.at(s, c);
                dv.row_mut(s)[c] += w.tap(j)[c] * go[c];
            }
        }
    }

    Ok(AttnGrads {
        dq,
        dk,
        dv,
        dw,
        dalpha,
    })
}
