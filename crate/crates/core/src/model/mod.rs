//! A small pre-norm decoder-only transformer built on the augmented
//! attention, with greedy and tree-speculative generation.

mod config;
mod train;

pub use config::ModelConfig;
pub use train::{
    batch_loss, cross_entropy, eval_accuracy, loss_and_grads, train_synthetic, CurvePoint, Example,
    Task, TrainConfig, TrainReport,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augmented::{merge_heads, multi_head_augmented, split_heads, AttnWeights, ConvWeights};
use crate::decode::DecodeState;
use crate::error::{dim_err, Error, Result};
use crate::speculative::{
    commit_path, tree_attention_forward, verify_greedy, Drafter, SpecTree, TreeShape,
};
use crate::tensor::{matmul, Tensor};

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub attn: AttnWeights,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    /// `d_model × ffn_hidden`
    pub w1: Tensor,
    /// `ffn_hidden × d_model`
    pub w2: Tensor,
}

/// All trainable tensors. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    /// `vocab × d_model`, shared with the output head.
    pub emb: Tensor,
    pub layers: Vec<LayerWeights>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
}

impl ModelWeights {
    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor| Tensor::zeros(t.shape());
        Self {
            emb: z(&self.emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    ln1_g: z(&l.ln1_g),
                    ln1_b: z(&l.ln1_b),
                    attn: AttnWeights {
                        wq: z(&l.attn.wq),
                        wk: z(&l.attn.wk),
                        wv: z(&l.attn.wv),
                        wo: z(&l.attn.wo),
                        conv: l
                            .attn
                            .conv
                            .iter()
                            .map(|c| ConvWeights::zeros(c.kernel(), c.channels()))
                            .collect(),
                    },
                    ln2_g: z(&l.ln2_g),
                    ln2_b: z(&l.ln2_b),
                    w1: z(&l.w1),
                    w2: z(&l.w2),
                })
                .collect(),
            lnf_g: z(&self.lnf_g),
            lnf_b: z(&self.lnf_b),
        }
    }

    /// Every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.emb];
        for l in &self.layers {
            out.extend([
                &l.ln1_g, &l.ln1_b, &l.attn.wq, &l.attn.wk, &l.attn.wv, &l.attn.wo,
            ]);
            out.extend(l.attn.conv.iter().map(|c| c.taps()));
            out.extend([&l.ln2_g, &l.ln2_b, &l.w1, &l.w2]);
        }
        out.extend([&self.lnf_g, &self.lnf_b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.emb];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_g,
                &mut l.ln1_b,
                &mut l.attn.wq,
                &mut l.attn.wk,
                &mut l.attn.wv,
                &mut l.attn.wo,
            ]);
            out.extend(l.attn.conv.iter_mut().map(|c| c.taps_mut()));
            out.extend([&mut l.ln2_g, &mut l.ln2_b, &mut l.w1, &mut l.w2]);
        }
        out.extend([&mut self.lnf_g, &mut self.lnf_b]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    cfg: ModelConfig,
    pub weights: ModelWeights,
}

fn uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let b = 1.0 / (fan_in as f64).sqrt();
    Tensor::<f64>::random(shape, -b, b, rng)
}

impl ToyModel {
    /// Randomly initialised model, uniform in `±1/√fan_in`, seeded by
    /// `cfg.seed`.
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let acfg = cfg.attn_config();
        let (d, f) = (cfg.d_model, cfg.ffn_hidden());
        let emb = uniform(&[cfg.vocab_size, d], d, &mut rng);
        let layers = (0..cfg.n_layers)
            .map(|_| {
                let attn = AttnWeights {
                    wq: uniform(&[d, d], d, &mut rng),
                    wk: uniform(&[d, d], d, &mut rng),
                    wv: uniform(&[d, d], d, &mut rng),
                    wo: uniform(&[d, d], d, &mut rng),
                    conv: (0..cfg.n_heads)
                        .map(|_| {
                            let k = acfg.conv_kernel;
                            ConvWeights::random(k, acfg.head_dim, 1.0 / (k as f64).sqrt(), &mut rng)
                        })
                        .collect(),
                };
                LayerWeights {
                    ln1_g: ones(d),
                    ln1_b: Tensor::zeros(&[d]),
                    attn,
                    ln2_g: ones(d),
                    ln2_b: Tensor::zeros(&[d]),
                    w1: uniform(&[d, f], d, &mut rng),
                    w2: uniform(&[f, d], f, &mut rng),
                }
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            weights: ModelWeights {
                emb,
                layers,
                lnf_g: ones(d),
                lnf_b: Tensor::zeros(&[d]),
            },
        })
    }

    /// Wraps existing weights after checking their shapes.
    pub fn from_weights(cfg: &ModelConfig, weights: ModelWeights) -> Result<Self> {
        let template = Self::new(cfg)?;
        let a = template.weights.tensors();
        let b = weights.tensors();
        if a.len() != b.len() || a.iter().zip(&b).any(|(x, y)| x.shape() != y.shape()) {
            return dim_err("weights do not match the model config");
        }
        if !weights.all_finite() {
            return Err(Error::NonFinite("ToyModel::from_weights"));
        }
        Ok(Self {
            cfg: cfg.clone(),
            weights,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::Input(format!(
                "token {t} out of range for vocab {}",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    pub(crate) fn embed(&self, tokens: &[u32]) -> Tensor {
        let d = self.cfg.d_model;
        let mut x = Tensor::zeros(&[tokens.len(), d]);
        for (i, &t) in tokens.iter().enumerate() {
            x.row_mut(i)
                .copy_from_slice(self.weights.emb.row(t as usize));
        }
        x
    }

    fn ffn(&self, l: &LayerWeights, x: &Tensor) -> Result<Tensor> {
        let h = matmul(&layer_norm(x, &l.ln2_g, &l.ln2_b), &l.w1)?.map(gelu);
        matmul(&h, &l.w2)
    }

    fn head(&self, x: &Tensor) -> Result<Tensor> {
        let xf = layer_norm(x, &self.weights.lnf_g, &self.weights.lnf_b);
        matmul(&xf, &self.weights.emb.transpose())
    }

    /// Output of one pre-norm block given the attention result for `x`.
    fn finish_block(&self, l: &LayerWeights, x: &Tensor, attn: &Tensor) -> Result<Tensor> {
        let mut x = x.add(attn)?;
        let f = self.ffn(l, &x)?;
        x.add_assign(&f)?;
        Ok(x)
    }
}

fn ones(d: usize) -> Tensor {
    Tensor::from_parts(vec![d], vec![1.0; d])
}

/// Row-wise layer norm with learned scale and shift.
pub(crate) fn layer_norm(x: &Tensor, g: &Tensor, b: &Tensor) -> Tensor {
    let d = x.cols();
    let mut y = x.clone();
    for i in 0..x.rows() {
        let row = y.row_mut(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * g.data()[j] + b.data()[j];
        }
    }
    y
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Logits for every position of `tokens`, computed in one batched pass.
pub fn model_prefill(model: &ToyModel, tokens: &[u32]) -> Result<Tensor> {
    let cfg = model.config();
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_seq {
        return Err(Error::Input(format!(
            "{} tokens exceed max_seq {}",
            tokens.len(),
            cfg.max_seq
        )));
    }
    model.check_tokens(tokens)?;
    let acfg = cfg.attn_config();
    let mut x = model.embed(tokens);
    for l in &model.weights.layers {
        let a = multi_head_augmented(&layer_norm(&x, &l.ln1_g, &l.ln1_b), &l.attn, &acfg)?;
        x = model.finish_block(l, &x, &a)?;
    }
    model.head(&x)
}

/// Node keys and values per layer and head, as returned by
/// [`ModelState::speculate`].
pub type NodeKv = Vec<Vec<(Tensor, Tensor)>>;

/// Per-layer, per-head decoding states of a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    layers: Vec<Vec<DecodeState>>,
    tokens: Vec<u32>,
}

impl ModelState {
    pub fn new(model: &ToyModel) -> Result<Self> {
        let acfg = model.config().attn_config();
        let layers = (0..model.config().n_layers)
            .map(|_| (0..acfg.n_heads).map(|_| DecodeState::new(&acfg)).collect())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            tokens: Vec::new(),
        })
    }

    /// Committed tokens.
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn head_state(&self, layer: usize, head: usize) -> &DecodeState {
        &self.layers[layer][head]
    }

    /// Feeds `tokens` through every layer, committing them, and returns their
    /// logits.
    pub fn advance(&mut self, model: &ToyModel, tokens: &[u32]) -> Result<Tensor> {
        model.check_tokens(tokens)?;
        let acfg = model.config().attn_config();
        let mut x = model.embed(tokens);
        for (l, heads) in model.weights.layers.iter().zip(&mut self.layers) {
            let h = layer_norm(&x, &l.ln1_g, &l.ln1_b);
            let q = split_heads(&matmul(&h, &l.attn.wq)?, &acfg);
            let k = split_heads(&matmul(&h, &l.attn.wk)?, &acfg);
            let v = split_heads(&matmul(&h, &l.attn.wv)?, &acfg);
            let outs = heads
                .iter_mut()
                .enumerate()
                .map(|(i, s)| s.prefill(&q[i], &k[i], &v[i], &l.attn.conv[i]))
                .collect::<Result<Vec<_>>>()?;
            let a = matmul(&merge_heads(&outs), &l.attn.wo)?;
            x = model.finish_block(l, &x, &a)?;
        }
        self.tokens.extend_from_slice(tokens);
        model.head(&x)
    }

    /// Logits for every node of `tree` without committing anything, plus the
    /// per-layer, per-head node keys and values needed to commit a path.
    pub fn speculate(&self, model: &ToyModel, tree: &SpecTree) -> Result<(Tensor, NodeKv)> {
        let tokens: Vec<u32> = tree.nodes().iter().map(|n| n.token).collect();
        model.check_tokens(&tokens)?;
        let acfg = model.config().attn_config();
        let mut x = model.embed(&tokens);
        let mut kv = Vec::with_capacity(self.layers.len());
        for (l, heads) in model.weights.layers.iter().zip(&self.layers) {
            let h = layer_norm(&x, &l.ln1_g, &l.ln1_b);
            let q = split_heads(&matmul(&h, &l.attn.wq)?, &acfg);
            let k = split_heads(&matmul(&h, &l.attn.wk)?, &acfg);
            let v = split_heads(&matmul(&h, &l.attn.wv)?, &acfg);
            let outs = heads
                .iter()
                .enumerate()
                .map(|(i, s)| tree_attention_forward(s, tree, &q[i], &k[i], &v[i], &l.attn.conv[i]))
                .collect::<Result<Vec<_>>>()?;
            let a = matmul(&merge_heads(&outs), &l.attn.wo)?;
            x = model.finish_block(l, &x, &a)?;
            kv.push(k.into_iter().zip(v).collect());
        }
        Ok((model.head(&x)?, kv))
    }

    /// Commits the nodes of `path` using keys and values from [`Self::speculate`].
    pub fn commit_nodes(
        &mut self,
        tree: &SpecTree,
        kv: &[Vec<(Tensor, Tensor)>],
        path: &[usize],
    ) -> Result<()> {
        let pick = |t: &Tensor| -> Result<Tensor> {
            let rows: Vec<Vec<f64>> = path.iter().map(|&i| t.row(i).to_vec()).collect();
            if rows.is_empty() {
                return Ok(Tensor::zeros(&[0, t.cols()]));
            }
            Tensor::from_rows(&rows)
        };
        for (heads, layer_kv) in self.layers.iter_mut().zip(kv) {
            for (s, (k, v)) in heads.iter_mut().zip(layer_kv) {
                commit_path(s, &pick(k)?, &pick(v)?)?;
            }
        }
        self.tokens.extend(path.iter().map(|&i| tree.token(i)));
        Ok(())
    }
}

fn check_budget(model: &ToyModel, prompt: &[u32], n_new: usize) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::Input("prompt is empty".into()));
    }
    let max = model.config().max_seq;
    if prompt.len() + n_new > max {
        return Err(Error::Input(format!(
            "prompt {} + {n_new} new tokens exceed max_seq {max}",
            prompt.len()
        )));
    }
    model.check_tokens(prompt)
}

/// Greedy continuation of `prompt` using the streaming decode states.
pub fn generate_greedy(model: &ToyModel, prompt: &[u32], n_new: usize) -> Result<Vec<u32>> {
    check_budget(model, prompt, n_new)?;
    let mut out = Vec::with_capacity(n_new);
    if n_new == 0 {
        return Ok(out);
    }
    let mut state = ModelState::new(model)?;
    let logits = state.advance(model, prompt)?;
    let mut next = argmax(logits.row(logits.rows() - 1));
    loop {
        out.push(next);
        if out.len() == n_new {
            return Ok(out);
        }
        let logits = state.advance(model, &[next])?;
        next = argmax(logits.row(0));
    }
}

/// Greedy continuation by re-running the full batched forward on the growing
/// sequence at every step. Works in either convolution mode.
pub fn generate_recompute(model: &ToyModel, prompt: &[u32], n_new: usize) -> Result<Vec<u32>> {
    check_budget(model, prompt, n_new)?;
    let mut seq = prompt.to_vec();
    for _ in 0..n_new {
        let logits = model_prefill(model, &seq)?;
        seq.push(argmax(logits.row(logits.rows() - 1)));
    }
    Ok(seq.split_off(prompt.len()))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SpecStats {
    pub rounds: usize,
    /// Accepted draft length per round, not counting the bonus token.
    pub accepted: Vec<usize>,
}

impl SpecStats {
    pub fn mean_accepted(&self) -> f64 {
        if self.accepted.is_empty() {
            return 0.0;
        }
        self.accepted.iter().sum::<usize>() as f64 / self.accepted.len() as f64
    }
}

/// Speculative greedy generation: every round drafts a tree of shape
/// `shape`, scores all nodes in one pass, commits the longest path agreeing
/// with the model's own argmax and then the model's bonus token.
pub fn generate_speculative(
    model: &ToyModel,
    prompt: &[u32],
    n_new: usize,
    shape: &TreeShape,
    drafter: &mut dyn Drafter,
) -> Result<(Vec<u32>, SpecStats)> {
    check_budget(model, prompt, n_new)?;
    let mut stats = SpecStats::default();
    let mut out = Vec::with_capacity(n_new);
    if n_new == 0 {
        return Ok((out, stats));
    }
    let mut state = ModelState::new(model)?;
    let logits = state.advance(model, prompt)?;
    let mut next = argmax(logits.row(logits.rows() - 1));
    while out.len() < n_new {
        let tree = drafter.propose(state.tokens(), next, shape)?;
        let (node_logits, kv) = state.speculate(model, &tree)?;
        let verdict: Vec<u32> = (0..tree.len())
            .map(|i| argmax(node_logits.row(i)))
            .collect();
        let res = verify_greedy(&tree, &verdict, next)?;
        stats.rounds += 1;
        stats.accepted.push(res.accepted.len());
        state.commit_nodes(&tree, &kv, &res.accepted)?;
        out.extend(res.accepted.iter().map(|&i| tree.token(i)));
        out.push(res.bonus_token);
        let logits = state.advance(model, &[res.bonus_token])?;
        next = argmax(logits.row(0));
    }
    out.truncate(n_new);
    Ok((out, stats))
}

/// Drafts with the model itself: the first child at every level carries the
/// model's greedy continuation, other nodes carry other tokens.
pub struct SelfDrafter<'a> {
    model: &'a ToyModel,
}

impl<'a> SelfDrafter<'a> {
    pub fn new(model: &'a ToyModel) -> Self {
        Self { model }
    }
}

impl Drafter for SelfDrafter<'_> {
    fn propose(&mut self, context: &[u32], next_token: u32, shape: &TreeShape) -> Result<SpecTree> {
        let vocab = self.model.config().vocab_size as u32;
        let parents = shape.parents();
        let depth = {
            let mut d = vec![0usize; parents.len()];
            for (i, p) in parents.iter().enumerate() {
                d[i] = p.map_or(1, |p| d[p] + 1);
            }
            d.into_iter().max().unwrap_or(0)
        };
        let mut greedy = vec![next_token];
        if depth > 1 {
            let mut state = ModelState::new(self.model)?;
            state.advance(self.model, context)?;
            let mut tok = next_token;
            for _ in 1..depth {
                let l = state.advance(self.model, &[tok])?;
                tok = argmax(l.row(0));
                greedy.push(tok);
            }
        }
        // A node is "on track" when it is the first child of an on-track node.
        let mut on_track = vec![false; parents.len()];
        let mut level = vec![0usize; parents.len()];
        let mut tokens = Vec::with_capacity(parents.len());
        let mut seen_first: Vec<Option<usize>> = vec![None; parents.len() + 1];
        for (i, p) in parents.iter().enumerate() {
            let slot = p.map_or(0, |p| p + 1);
            let first = seen_first[slot].is_none();
            if first {
                seen_first[slot] = Some(i);
            }
            level[i] = p.map_or(0, |p| level[p] + 1);
            on_track[i] = first && p.is_none_or(|p| on_track[p]);
            let g = greedy[level[i]];
            tokens.push(if on_track[i] {
                g
            } else {
                (g + 1 + i as u32 % (vocab - 1).max(1)) % vocab
            });
        }
        SpecTree::from_shape(shape, &tokens)
    }
}

#[cfg(test)]
mod tests;
