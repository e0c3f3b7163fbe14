//! Multi-head wrapper: project, run one augmented head per column block,
//! concatenate and apply the output projection.

use super::{
    augmented_attention, augmented_attention_backward, augmented_attention_forward, ConvWeights,
    ForwardCache,
};
use crate::config::AttnConfig;
use crate::error::{dim_err, Result};
use crate::tensor::{matmul, Scalar, Tensor};

/// Projection and convolution parameters of one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnWeights<T: Scalar = f64> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    /// One set of taps per head.
    pub conv: Vec<ConvWeights<T>>,
}

impl<T: Scalar> AttnWeights<T> {
    pub fn validate(&self, cfg: &AttnConfig) -> Result<()> {
        cfg.validate()?;
        let d = cfg.d_model;
        for (name, w) in [
            ("Wq", &self.wq),
            ("Wk", &self.wk),
            ("Wv", &self.wv),
            ("Wo", &self.wo),
        ] {
            if w.shape() != [d, d] {
                return dim_err(format!("{name} is {:?}, expected [{d}, {d}]", w.shape()));
            }
        }
        if self.conv.len() != cfg.n_heads {
            return dim_err(format!(
                "{} conv kernels for {} heads",
                self.conv.len(),
                cfg.n_heads
            ));
        }
        Ok(())
    }
}

pub(crate) fn split_heads<T: Scalar>(x: &Tensor<T>, cfg: &AttnConfig) -> Vec<Tensor<T>> {
    (0..cfg.n_heads)
        .map(|h| x.slice_cols(h * cfg.head_dim, (h + 1) * cfg.head_dim))
        .collect()
}

pub(crate) fn merge_heads<T: Scalar>(heads: &[Tensor<T>]) -> Tensor<T> {
    let n = heads[0].rows();
    let dk = heads[0].cols();
    let mut out = Tensor::zeros(&[n, dk * heads.len()]);
    for (h, t) in heads.iter().enumerate() {
        for i in 0..n {
            out.row_mut(i)[h * dk..(h + 1) * dk].copy_from_slice(t.row(i));
        }
    }
    out
}

fn check_x<T: Scalar>(x: &Tensor<T>, cfg: &AttnConfig) -> Result<()> {
    if x.shape().len() != 2 || x.cols() != cfg.d_model {
        return dim_err(format!(
            "X is {:?}, expected n x {}",
            x.shape(),
            cfg.d_model
        ));
    }
    Ok(())
}

/// `Concat(head_1, …, head_h) · Wo` with each head an augmented attention.
pub fn multi_head_augmented<T: Scalar>(
    x: &Tensor<T>,
    weights: &AttnWeights<T>,
    cfg: &AttnConfig,
) -> Result<Tensor<T>> {
    weights.validate(cfg)?;
    check_x(x, cfg)?;
    let q = split_heads(&matmul(x, &weights.wq)?, cfg);
    let k = split_heads(&matmul(x, &weights.wk)?, cfg);
    let v = split_heads(&matmul(x, &weights.wv)?, cfg);
    let head_cfg = cfg.clone();
    let heads = (0..cfg.n_heads)
        .map(|h| augmented_attention(&q[h], &k[h], &v[h], &weights.conv[h], &head_cfg))
        .collect::<Result<Vec<_>>>()?;
    matmul(&merge_heads(&heads), &weights.wo)
}

#[derive(Debug, Clone)]
pub struct MultiHeadCache {
    x: Tensor,
    heads: Vec<ForwardCache>,
    merged: Tensor,
}

#[derive(Debug, Clone)]
pub struct MultiHeadGrads {
    pub dx: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub conv: Vec<Tensor>,
    pub alpha: f64,
}

pub fn multi_head_augmented_forward(
    x: &Tensor,
    weights: &AttnWeights,
    cfg: &AttnConfig,
) -> Result<(Tensor, MultiHeadCache)> {
    weights.validate(cfg)?;
    check_x(x, cfg)?;
    let q = split_heads(&matmul(x, &weights.wq)?, cfg);
    let k = split_heads(&matmul(x, &weights.wk)?, cfg);
    let v = split_heads(&matmul(x, &weights.wv)?, cfg);
    let mut outs = Vec::with_capacity(cfg.n_heads);
    let mut caches = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let (o, c) = augmented_attention_forward(&q[h], &k[h], &v[h], &weights.conv[h], cfg)?;
        outs.push(o);
        caches.push(c);
    }
    let merged = merge_heads(&outs);
    let y = matmul(&merged, &weights.wo)?;
    Ok((
        y,
        MultiHeadCache {
            x: x.clone(),
            heads: caches,
            merged,
        },
    ))
}

pub fn multi_head_augmented_backward(
    cache: MultiHeadCache,
    d_out: &Tensor,
    weights: &AttnWeights,
) -> Result<MultiHeadGrads> {
    let MultiHeadCache { x, heads, merged } = cache;
    let d_wo = matmul(&merged.transpose(), d_out)?;
    let d_merged = matmul(d_out, &weights.wo.transpose())?;
    let n_heads = heads.len();
    let dk = merged.cols() / n_heads;
    let mut dq = Vec::with_capacity(n_heads);
    let mut dkk = Vec::with_capacity(n_heads);
    let mut dv = Vec::with_capacity(n_heads);
    let mut conv = Vec::with_capacity(n_heads);
    let mut alpha = 0.0;
    for (h, hc) in heads.into_iter().enumerate() {
        let g = augmented_attention_backward(hc, &d_merged.slice_cols(h * dk, (h + 1) * dk))?;
        dq.push(g.dq);
        dkk.push(g.dk);
        dv.push(g.dv);
        conv.push(g.dw);
        alpha += g.dalpha;
    }
    let (dq, dkk, dv) = (merge_heads(&dq), merge_heads(&dkk), merge_heads(&dv));
    let xt = x.transpose();
    let mut dx = matmul(&dq, &weights.wq.transpose())?;
    dx.add_assign(&matmul(&dkk, &weights.wk.transpose())?)?;
    dx.add_assign(&matmul(&dv, &weights.wv.transpose())?)?;
    Ok(MultiHeadGrads {
        dx,
        wq: matmul(&xt, &dq)?,
        wk: matmul(&xt, &dkk)?,
        wv: matmul(&xt, &dv)?,
        wo: d_wo,
        conv,
        alpha,
    })
}
