//! Manual backward pass, synthetic tasks and a plain gradient-descent loop.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    gelu, gelu_grad, generate_greedy, generate_recompute, model_prefill, ModelWeights, ToyModel,
    LN_EPS,
};
use crate::augmented::{
    multi_head_augmented_backward, multi_head_augmented_forward, MultiHeadCache,
};
use crate::error::{Error, Result};
use crate::tensor::{matmul, Tensor};

struct LnCache {
    xhat: Tensor,
    inv: Vec<f64>,
}

fn ln_forward(x: &Tensor, g: &Tensor, b: &Tensor) -> (Tensor, LnCache) {
    let (n, d) = (x.rows(), x.cols());
    let mut xhat = x.clone();
    let mut y = x.clone();
    let mut inv = Vec::with_capacity(n);
    for i in 0..n {
        let row = xhat.row_mut(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * s);
        inv.push(s);
        for (j, o) in y.row_mut(i).iter_mut().enumerate() {
            *o = xhat.at(i, j) * g.data()[j] + b.data()[j];
        }
    }
    (y, LnCache { xhat, inv })
}

/// Returns `dx` and accumulates into `dg`, `db`.
fn ln_backward(c: &LnCache, g: &Tensor, dy: &Tensor, dg: &mut Tensor, db: &mut Tensor) -> Tensor {
    let (n, d) = (dy.rows(), dy.cols());
    let mut dx = Tensor::zeros(&[n, d]);
    let mut dxh = vec![0.0; d];
    for i in 0..n {
        let (xh, dyr) = (c.xhat.row(i), dy.row(i));
        for j in 0..d {
            dg.data_mut()[j] += dyr[j] * xh[j];
            db.data_mut()[j] += dyr[j];
            dxh[j] = dyr[j] * g.data()[j];
        }
        let sum: f64 = dxh.iter().sum();
        let dot: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
        let s = c.inv[i] / d as f64;
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = s * (d as f64 * dxh[j] - sum - xh[j] * dot);
        }
    }
    dx
}

struct LayerCache {
    ln1: LnCache,
    attn: MultiHeadCache,
    ln2: LnCache,
    f_in: Tensor,
    pre: Tensor,
    act: Tensor,
}

/// Mean cross-entropy over the rows listed in `targets` (`(row, token)`).
pub fn cross_entropy(logits: &Tensor, targets: &[(usize, u32)]) -> f64 {
    let mut total = 0.0;
    for &(i, t) in targets {
        let row = logits.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[t as usize];
    }
    total / targets.len().max(1) as f64
}

/// Summed loss and accumulated gradients for one sequence. The loss of each
/// target is weighted by `weight`.
fn accumulate(
    model: &ToyModel,
    tokens: &[u32],
    targets: &[(usize, u32)],
    weight: f64,
    grads: &mut ModelWeights,
) -> Result<f64> {
    let cfg = model.config();
    let acfg = cfg.attn_config();
    let w = &model.weights;
    let mut x = model.embed(tokens);
    let mut caches = Vec::with_capacity(w.layers.len());
    for l in &w.layers {
        let (h, ln1) = ln_forward(&x, &l.ln1_g, &l.ln1_b);
        let (a, attn) = multi_head_augmented_forward(&h, &l.attn, &acfg)?;
        x.add_assign(&a)?;
        let (f_in, ln2) = ln_forward(&x, &l.ln2_g, &l.ln2_b);
        let pre = matmul(&f_in, &l.w1)?;
        let act = pre.map(gelu);
        x.add_assign(&matmul(&act, &l.w2)?)?;
        caches.push(LayerCache {
            ln1,
            attn,
            ln2,
            f_in,
            pre,
            act,
        });
    }
    let (xf, lnf) = ln_forward(&x, &w.lnf_g, &w.lnf_b);
    let logits = matmul(&xf, &w.emb.transpose())?;
    if !logits.all_finite() {
        return Err(Error::NonFinite("model forward"));
    }

    let mut dlogits = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    for &(i, t) in targets {
        let row = logits.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        loss += weight * (m + z.ln() - row[t as usize]);
        for (j, o) in dlogits.row_mut(i).iter_mut().enumerate() {
            *o += weight * (row[j] - m).exp() / z;
        }
        dlogits.row_mut(i)[t as usize] -= weight;
    }

    grads.emb.add_assign(&matmul(&dlogits.transpose(), &xf)?)?;
    let dxf = matmul(&dlogits, &w.emb)?;
    let mut dx = ln_backward(&lnf, &w.lnf_g, &dxf, &mut grads.lnf_g, &mut grads.lnf_b);

    for ((l, c), g) in w
        .layers
        .iter()
        .zip(caches)
        .zip(grads.layers.iter_mut())
        .rev()
    {
        g.w2.add_assign(&matmul(&c.act.transpose(), &dx)?)?;
        let dact = matmul(&dx, &l.w2.transpose())?;
        let mut dpre = dact;
        for (o, &p) in dpre.data_mut().iter_mut().zip(c.pre.data()) {
            *o *= gelu_grad(p);
        }
        g.w1.add_assign(&matmul(&c.f_in.transpose(), &dpre)?)?;
        let df_in = matmul(&dpre, &l.w1.transpose())?;
        dx.add_assign(&ln_backward(
            &c.ln2,
            &l.ln2_g,
            &df_in,
            &mut g.ln2_g,
            &mut g.ln2_b,
        ))?;

        let ag = multi_head_augmented_backward(c.attn, &dx, &l.attn)?;
        g.attn.wq.add_assign(&ag.wq)?;
        g.attn.wk.add_assign(&ag.wk)?;
        g.attn.wv.add_assign(&ag.wv)?;
        g.attn.wo.add_assign(&ag.wo)?;
        for (gc, dc) in g.attn.conv.iter_mut().zip(&ag.conv) {
            gc.taps_mut().add_assign(dc)?;
        }
        dx.add_assign(&ln_backward(
            &c.ln1,
            &l.ln1_g,
            &ag.dx,
            &mut g.ln1_g,
            &mut g.ln1_b,
        ))?;
    }
    for (i, &t) in tokens.iter().enumerate() {
        let row = grads.emb.row_mut(t as usize);
        row.iter_mut().zip(dx.row(i)).for_each(|(o, &d)| *o += d);
    }
    Ok(loss)
}

/// Mean next-token cross-entropy over all targets of `batch` and its
/// gradient with respect to every weight.
pub fn loss_and_grads(model: &ToyModel, batch: &[Example]) -> Result<(f64, ModelWeights)> {
    let count: usize = batch.iter().map(|e| e.targets().len()).sum();
    if count == 0 {
        return Err(Error::Input("batch has no targets".into()));
    }
    let mut grads = model.weights.zeros_like();
    let mut loss = 0.0;
    for ex in batch {
        model.check_tokens(&ex.tokens)?;
        loss += accumulate(
            model,
            &ex.tokens,
            &ex.targets(),
            1.0 / count as f64,
            &mut grads,
        )?;
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Task {
    /// `BOS x₁…x_L SEP x₁…x_L`; the second copy is predicted.
    #[default]
    Copy,
    /// Random symbols containing one bigram `a b`, ending in `a`; predict `b`.
    Induction,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "induction" => Ok(Task::Induction),
            _ => Err(Error::Config(format!(
                "unknown task `{s}` (copy, induction)"
            ))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Copy => "copy",
            Task::Induction => "induction",
        })
    }
}

/// One task instance. `tokens[prompt_len..]` is the answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
}

impl Example {
    /// Next-token training pairs `(row, token)` over the whole sequence: the
    /// logits at `row` should predict `token`.
    pub fn targets(&self) -> Vec<(usize, u32)> {
        (1..self.tokens.len())
            .map(|i| (i - 1, self.tokens[i]))
            .collect()
    }

    pub fn prompt(&self) -> &[u32] {
        &self.tokens[..self.prompt_len]
    }

    pub fn answer(&self) -> &[u32] {
        &self.tokens[self.prompt_len..]
    }
}

impl Task {
    /// Draws an instance of total length `seq_len` over `vocab` tokens. The
    /// two largest ids are reserved (`SEP = vocab-2`, `BOS = vocab-1`).
    /// Copy payloads use distinct symbols.
    pub fn sample<R: Rng + ?Sized>(
        self,
        vocab: usize,
        seq_len: usize,
        rng: &mut R,
    ) -> Result<Example> {
        if vocab < 4 {
            return Err(Error::Config("tasks need vocab_size >= 4".into()));
        }
        let symbols = (vocab - 2) as u32;
        let (sep, bos) = (symbols, symbols + 1);
        match self {
            Task::Copy => {
                let len = (seq_len.saturating_sub(2)) / 2;
                if len == 0 || len > symbols as usize {
                    return Err(Error::Config(format!(
                        "copy task needs 1 <= (seq_len-2)/2 <= {symbols}, got {len}"
                    )));
                }
                let mut pool: Vec<u32> = (0..symbols).collect();
                pool.shuffle(rng);
                let payload = &pool[..len];
                let mut tokens = vec![bos];
                tokens.extend_from_slice(payload);
                tokens.push(sep);
                tokens.extend_from_slice(payload);
                Ok(Example {
                    prompt_len: len + 2,
                    tokens,
                })
            }
            Task::Induction => {
                if seq_len < 5 {
                    return Err(Error::Config("induction task needs seq_len >= 5".into()));
                }
                let a = rng.gen_range(0..symbols);
                let b = loop {
                    let b = rng.gen_range(0..symbols);
                    if b != a {
                        break b;
                    }
                };
                let mut tokens = vec![bos];
                tokens.extend((1..seq_len).map(|_| loop {
                    let t = rng.gen_range(0..symbols);
                    if t != a {
                        break t;
                    }
                }));
                let at = rng.gen_range(1..seq_len - 3);
                tokens[at] = a;
                tokens[at + 1] = b;
                tokens[seq_len - 2] = a;
                tokens[seq_len - 1] = b;
                Ok(Example {
                    prompt_len: seq_len - 1,
                    tokens,
                })
            }
        }
    }
}

/// Fraction of answer tokens produced correctly by free-running greedy
/// generation. Masked models decode incrementally; unmasked ones recompute
/// the full sequence every step.
pub fn eval_accuracy(model: &ToyModel, examples: &[Example]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for ex in examples {
        let gen = if model.config().unmasked_conv {
            generate_recompute(model, ex.prompt(), ex.answer().len())?
        } else {
            generate_greedy(model, ex.prompt(), ex.answer().len())?
        };
        hit += gen.iter().zip(ex.answer()).filter(|(a, b)| a == b).count();
        total += ex.answer().len();
    }
    Ok(hit as f64 / total.max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Record the monitor loss every this many steps (and after the last).
    pub log_every: usize,
    /// Evaluate generation every this many steps (and after the last one);
    /// 0 evaluates only at the end.
    pub eval_every: usize,
    pub eval_examples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Copy,
            steps: 1000,
            lr: 0.1,
            batch_size: 8,
            seq_len: 24,
            log_every: 10,
            eval_every: 100,
            eval_examples: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    /// Loss on a fixed monitor batch drawn from the training distribution.
    pub loss: f64,
    /// Loss of the minibatch used for the update at this step.
    pub batch_loss: f64,
    pub eval_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub curve: Vec<CurvePoint>,
    pub final_loss: f64,
    pub final_eval_acc: f64,
    /// Accuracy of uniform guessing over the task's content symbols.
    pub chance: f64,
}

/// Mean loss of `examples` from a batched forward pass.
pub fn batch_loss(model: &ToyModel, examples: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for ex in examples {
        let logits = model_prefill(model, &ex.tokens)?;
        let t = ex.targets();
        total += cross_entropy(&logits, &t) * t.len() as f64;
        count += t.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Plain gradient descent with a fixed learning rate. Step `s` of the curve
/// is measured before update `s` is applied.
pub fn train_synthetic(model: &mut ToyModel, tc: &TrainConfig) -> Result<TrainReport> {
    let vocab = model.config().vocab_size;
    if tc.seq_len > model.config().max_seq {
        return Err(Error::Config(format!(
            "seq_len {} exceeds max_seq {}",
            tc.seq_len,
            model.config().max_seq
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut side = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x9e37_79b9_7f4a_7c15);
    let held_out = (0..tc.eval_examples)
        .map(|_| tc.task.sample(vocab, tc.seq_len, &mut side))
        .collect::<Result<Vec<_>>>()?;
    let monitor = (0..tc.batch_size.max(1))
        .map(|_| tc.task.sample(vocab, tc.seq_len, &mut side))
        .collect::<Result<Vec<_>>>()?;

    let mut curve = Vec::new();
    let mut prev = f64::NAN;
    for step in 0..=tc.steps {
        let batch = (0..tc.batch_size.max(1))
            .map(|_| tc.task.sample(vocab, tc.seq_len, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let diverged = |detail: String| Error::Diverged { step, detail };
        let (loss, grads) = loss_and_grads(model, &batch).map_err(|e| diverged(e.to_string()))?;
        if !loss.is_finite() {
            return Err(diverged(format!("batch loss {loss}, previous {prev}")));
        }
        prev = loss;
        let last = step == tc.steps;
        if last || step % tc.log_every.max(1) == 0 {
            let eval_acc = if last || (tc.eval_every > 0 && step % tc.eval_every == 0) {
                Some(eval_accuracy(model, &held_out)?)
            } else {
                None
            };
            curve.push(CurvePoint {
                step,
                loss: batch_loss(model, &monitor)?,
                batch_loss: loss,
                eval_acc,
            });
        }
        if last {
            break;
        }
        for (p, g) in model.weights.tensors_mut().into_iter().zip(grads.tensors()) {
            p.data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(w, &d)| *w -= tc.lr * d);
        }
        if !model.weights.all_finite() {
            return Err(diverged(format!(
                "non-finite weights after update, batch loss {loss}"
            )));
        }
    }
    let last = curve[curve.len() - 1];
    Ok(TrainReport {
        final_loss: last.loss,
        final_eval_acc: last.eval_acc.unwrap_or(f64::NAN),
        chance: 1.0 / (vocab - 2) as f64,
        curve,
    })
}
