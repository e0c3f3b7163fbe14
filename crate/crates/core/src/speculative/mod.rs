//! Tree-based speculative decoding on top of [`DecodeState`].
//!
//! All candidates of one speculation round are evaluated in a single pass
//! that reads the committed state without modifying it. Each node sees
//! exactly what it would see had its root-path been decoded sequentially:
//!
//! * local softmax over the committed rows of its group plus those of its
//!   ancestors that fall into the same group;
//! * the folded state `S`, extended by any groups its own ancestors
//!   completed during speculation;
//! * a convolution window gathered along its root-path (tail rows, then
//!   ancestors, then itself), never including siblings.

mod tree;

pub use tree::{
    draft_stub, tree_mask, Drafter, RandomDrafter, SpecTree, TreeNode, TreeShape, DEFAULT_MAX_DEPTH,
};

use std::collections::HashMap;

use crate::augmented::{attend_row, combine_row, conv_row, global_row, ConvWeights};
use crate::decode::DecodeState;
use crate::error::{dim_err, Error, Result};
use crate::tensor::{add_outer, Tensor};

/// Output of a speculative pass plus the number of query/key/value rows it
/// materialised.
#[derive(Debug, Clone)]
pub struct SpecPass {
    pub out: Tensor,
    pub qkv_rows: usize,
}

/// Greedy verification outcome.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyResult {
    /// Accepted nodes, forming a path down from the root.
    pub accepted: Vec<usize>,
    /// The verifier's token after the last accepted node.
    pub bonus_token: u32,
}

fn check_nodes(state: &DecodeState, tree: &SpecTree, rows: &[(&str, &Tensor)]) -> Result<()> {
    let d = state.head_dim();
    for (name, t) in rows {
        if t.shape() != [tree.len(), d] {
            return dim_err(format!(
                "{name} is {:?}, expected [{}, {d}]",
                t.shape(),
                tree.len()
            ));
        }
    }
    Ok(())
}

fn check_depth(state: &DecodeState, tree: &SpecTree) -> Result<()> {
    let max = state.config().max_tree_depth;
    if tree.max_depth() > max {
        return Err(Error::Config(format!(
            "tree depth {} exceeds configured maximum {max}",
            tree.max_depth()
        )));
    }
    Ok(())
}

/// Convolution window (oldest tap first) for a node whose root-path is
/// `path`; rows come from the committed tail and then the path itself.
fn path_window<'a>(
    state: &'a DecodeState,
    path: &[usize],
    node_v: &'a Tensor,
    kernel: usize,
) -> Vec<Option<&'a [f64]>> {
    let tail = state.conv_tail();
    let depth = path.len();
    (0..kernel)
        .map(|j| {
            let back = kernel - 1 - j;
            if back < depth {
                Some(node_v.row(path[depth - 1 - back]))
            } else {
                let from_end = back - depth + 1;
                (from_end <= tail.len()).then(|| tail[tail.len() - from_end].as_slice())
            }
        })
        .collect()
}

/// Gathered convolution windows, `m × k × d_k`: block `x` holds the `k` most
/// recent value rows along the root-path of `x` (newest last, zero padded on
/// the old side).
pub fn unfold_conv_rows(tree: &SpecTree, node_v: &Tensor, state: &DecodeState) -> Result<Tensor> {
    check_nodes(state, tree, &[("V", node_v)])?;
    let (m, d, k) = (tree.len(), state.head_dim(), state.config().conv_kernel);
    let mut out = Tensor::zeros(&[m, k, d]);
    for x in 0..m {
        let window = path_window(state, &tree.path(x), node_v, k);
        for (j, row) in window.into_iter().enumerate() {
            if let Some(row) = row {
                let at = (x * k + j) * d;
                out.data_mut()[at..at + d].copy_from_slice(row);
            }
        }
    }
    Ok(out)
}

/// Evaluates every node of `tree` against the frozen `state`.
pub fn tree_attention_forward(
    state: &DecodeState,
    tree: &SpecTree,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    w: &ConvWeights,
) -> Result<Tensor> {
    tree_attention_forward_counted(state, tree, q, k, v, w).map(|p| p.out)
}

pub fn tree_attention_forward_counted(
    state: &DecodeState,
    tree: &SpecTree,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    w: &ConvWeights,
) -> Result<SpecPass> {
    check_depth(state, tree)?;
    check_nodes(state, tree, &[("Q", q), ("K", k), ("V", v)])?;
    let cfg = state.config();
    if w.kernel() != cfg.conv_kernel || w.channels() != cfg.head_dim {
        return dim_err(format!(
            "conv taps {:?} do not match config",
            w.taps().shape()
        ));
    }
    let (m, d, g) = (tree.len(), cfg.head_dim, cfg.group_size);
    let pos = state.pos();
    let open_group = pos / g;
    let scale = cfg.softmax_scale();
    let fm = cfg.feature_map;

    // States extended past the open group, keyed by the last ancestor that
    // belongs to a completed group.
    let mut extended: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut out = Tensor::zeros(&[m, d]);
    let mut keys: Vec<&[f64]> = Vec::with_capacity(g);
    let mut vals: Vec<&[f64]> = Vec::with_capacity(g);
    let mut scratch = Vec::with_capacity(g);
    let (mut local, mut global, mut conv) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut phi = vec![0.0; d];

    for x in 0..m {
        let path = tree.path(x);
        let abs = pos + path.len() - 1;
        let group = abs / g;

        keys.clear();
        vals.clear();
        let first_in_group = if group == open_group {
            keys.extend(state.group_keys().iter().map(Vec::as_slice));
            vals.extend(state.group_values().iter().map(Vec::as_slice));
            0
        } else {
            group * g - pos
        };
        for &node in &path[first_in_group..] {
            keys.push(k.row(node));
            vals.push(v.row(node));
        }
        attend_row(q.row(x), &keys, &vals, scale, &mut scratch, &mut local);

        let fq = fm.apply_slice(q.row(x));
        if group == open_group {
            global_row(
                &fq,
                state.kv_state(),
                cfg.global_scale.factor(state.folded()),
                &mut global,
            );
        } else {
            let boundary = path[first_in_group - 1];
            let s = extended.entry(boundary).or_insert_with(|| {
                let mut s = state.kv_state().to_vec();
                for (kr, vr) in state.group_keys().iter().zip(state.group_values()) {
                    phi.iter_mut().zip(kr).for_each(|(p, &a)| *p = fm.apply(a));
                    add_outer(&mut s, &phi, vr);
                }
                for &node in &path[..first_in_group] {
                    phi.iter_mut()
                        .zip(k.row(node))
                        .for_each(|(p, &a)| *p = fm.apply(a));
                    add_outer(&mut s, &phi, v.row(node));
                }
                s
            });
            global_row(&fq, s, cfg.global_scale.factor(group * g), &mut global);
        }

        let window = path_window(state, &path, v, cfg.conv_kernel);
        conv_row(w, &window, &mut conv);
        combine_row(&local, &global, &conv, cfg.alpha, out.row_mut(x));
    }
    Ok(SpecPass {
        out: out.check_finite("tree_attention_forward")?,
        qkv_rows: m,
    })
}

/// Sequence-based baseline: every root-to-leaf path is decoded separately on
/// its own copy of the state.
pub fn decode_paths_independently(
    state: &DecodeState,
    tree: &SpecTree,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    w: &ConvWeights,
) -> Result<Tensor> {
    decode_paths_independently_counted(state, tree, q, k, v, w).map(|p| p.out)
}

pub fn decode_paths_independently_counted(
    state: &DecodeState,
    tree: &SpecTree,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    w: &ConvWeights,
) -> Result<SpecPass> {
    check_depth(state, tree)?;
    check_nodes(state, tree, &[("Q", q), ("K", k), ("V", v)])?;
    let d = state.head_dim();
    let mut out: Vec<Option<Vec<f64>>> = vec![None; tree.len()];
    let mut rows = 0;
    for leaf in tree.leaves() {
        let path = tree.path(leaf);
        let gather =
            |t: &Tensor| -> Vec<Vec<f64>> { path.iter().map(|&i| t.row(i).to_vec()).collect() };
        let (qp, kp, vp) = (gather(q), gather(k), gather(v));
        rows += path.len();
        let mut own = state.clone();
        for (step, &node) in path.iter().enumerate() {
            let o = own.decode_step(&qp[step], &kp[step], &vp[step], w)?;
            match &out[node] {
                Some(prev) => {
                    let diff = prev
                        .iter()
                        .zip(&o)
                        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                    if diff > 1e-10 {
                        return Err(Error::Consistency(format!(
                            "node {node} differs by {diff:e} between paths"
                        )));
                    }
                }
                None => out[node] = Some(o),
            }
        }
    }
    let mut t = Tensor::zeros(&[tree.len(), d]);
    for (i, row) in out.into_iter().enumerate() {
        let row = row.ok_or_else(|| Error::Consistency(format!("node {i} on no path")))?;
        t.row_mut(i).copy_from_slice(&row);
    }
    Ok(SpecPass {
        out: t,
        qkv_rows: rows,
    })
}

/// Greedy verification: starting at the root, repeatedly accept the child
/// whose token equals the verifier's argmax at the current position.
/// Ties go to the lowest node index.
pub fn verify_greedy(
    tree: &SpecTree,
    verifier_argmax: &[u32],
    root_argmax: u32,
) -> Result<VerifyResult> {
    if verifier_argmax.len() != tree.len() {
        return dim_err(format!(
            "{} verifier tokens for {} nodes",
            verifier_argmax.len(),
            tree.len()
        ));
    }
    let mut accepted = Vec::new();
    let mut want = root_argmax;
    let mut candidates = tree.root_children();
    while let Some(&hit) = candidates.iter().find(|&&c| tree.token(c) == want) {
        accepted.push(hit);
        want = verifier_argmax[hit];
        candidates = tree.children(hit);
    }
    Ok(VerifyResult {
        accepted,
        bonus_token: want,
    })
}

/// Commits accepted rows (in path order) into the state, exactly as the
/// same number of sequential decode steps would.
pub fn commit_path(state: &mut DecodeState, k_rows: &Tensor, v_rows: &Tensor) -> Result<()> {
    let d = state.head_dim();
    if k_rows.shape().len() != 2
        || k_rows.shape() != v_rows.shape()
        || (k_rows.rows() > 0 && k_rows.cols() != d)
    {
        return dim_err(format!(
            "commit rows K {:?} V {:?} for head_dim {d}",
            k_rows.shape(),
            v_rows.shape()
        ));
    }
    for i in 0..k_rows.rows() {
        state.commit(k_rows.row(i), v_rows.row(i))?;
    }
    Ok(())
}
