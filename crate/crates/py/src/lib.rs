//! Python bindings. Matrices cross the boundary as lists of rows
//! (`list[list[float]]`); token sequences as `list[int]`.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use auglin::augmented::{augmented_attention_forward, grouped_global_la_forward, ConvWeights};
use auglin::model::{generate_greedy, generate_speculative, model_prefill, SelfDrafter};
use auglin::reference::softmax_attention_ref;
use auglin::speculative::{verify_greedy, RandomDrafter, SpecTree, TreeShape};
use auglin::{Error, FeatureMap, GlobalScale, ModelConfig, Tensor, ToyModel};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Diverged { .. } | Error::NonFinite(_) | Error::Consistency(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

pub fn to_tensor(rows: Vec<Vec<f64>>, cols: usize) -> Result<Tensor, Error> {
    if rows.is_empty() {
        return Ok(Tensor::zeros(&[0, cols]));
    }
    Tensor::from_rows(&rows)
}

pub fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Attention hyperparameters for one head.
#[pyclass(name = "AttnConfig", module = "auglin", from_py_object)]
#[derive(Clone)]
pub struct PyAttnConfig {
    inner: auglin::AttnConfig,
}

#[pymethods]
impl PyAttnConfig {
    #[new]
    #[pyo3(signature = (head_dim, group_size, conv_kernel, alpha=1.0, feature_map="elu_plus_one", global_scale="none", unmasked_conv=false))]
    fn new(
        head_dim: usize,
        group_size: usize,
        conv_kernel: usize,
        alpha: f64,
        feature_map: &str,
        global_scale: &str,
        unmasked_conv: bool,
    ) -> PyResult<Self> {
        let fm: FeatureMap = feature_map.parse().map_err(py_err)?;
        let gs: GlobalScale = global_scale.parse().map_err(py_err)?;
        let inner = auglin::AttnConfig::single_head(head_dim, group_size, conv_kernel)
            .with_alpha(alpha)
            .with_feature_map(fm)
            .with_global_scale(gs)
            .with_unmasked_conv(unmasked_conv);
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn head_dim(&self) -> usize {
        self.inner.head_dim
    }

    #[getter]
    fn group_size(&self) -> usize {
        self.inner.group_size
    }

    #[getter]
    fn conv_kernel(&self) -> usize {
        self.inner.conv_kernel
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "AttnConfig(head_dim={}, group_size={}, conv_kernel={}, alpha={}, feature_map='{}', global_scale='{}', unmasked_conv={})",
            c.head_dim, c.group_size, c.conv_kernel, c.alpha, c.feature_map, c.global_scale, c.unmasked_conv
        )
    }
}

fn conv(taps: Vec<Vec<f64>>, cfg: &auglin::AttnConfig) -> PyResult<ConvWeights> {
    ConvWeights::new(to_tensor(taps, cfg.head_dim).map_err(py_err)?).map_err(py_err)
}

/// Single-head augmented attention over a whole sequence.
#[pyfunction]
fn augmented_attention(
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    conv_taps: Vec<Vec<f64>>,
    config: &PyAttnConfig,
) -> PyResult<Vec<Vec<f64>>> {
    let c = &config.inner;
    let d = c.head_dim;
    let w = conv(conv_taps, c)?;
    let (q, k, v) = (to_tensor(q, d), to_tensor(k, d), to_tensor(v, d));
    let (out, _) = augmented_attention_forward(
        &q.map_err(py_err)?,
        &k.map_err(py_err)?,
        &v.map_err(py_err)?,
        &w,
        c,
    )
    .map_err(py_err)?;
    Ok(to_rows(&out))
}

/// Quadratic softmax attention, for comparison.
#[pyfunction]
#[pyo3(signature = (q, k, v, causal=true))]
fn softmax_attention(
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    causal: bool,
) -> PyResult<Vec<Vec<f64>>> {
    let d = q.first().map_or(0, Vec::len);
    let q = to_tensor(q, d).map_err(py_err)?;
    let k = to_tensor(k, d).map_err(py_err)?;
    let v = to_tensor(v, d).map_err(py_err)?;
    Ok(to_rows(
        &softmax_attention_ref(&q, &k, &v, causal).map_err(py_err)?,
    ))
}

/// The global branch on its own: each token reads the linear-attention
/// state of all complete earlier groups.
#[pyfunction]
#[pyo3(signature = (q, k, v, group_size, feature_map="elu_plus_one", global_scale="none"))]
fn grouped_global_attention(
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    group_size: usize,
    feature_map: &str,
    global_scale: &str,
) -> PyResult<Vec<Vec<f64>>> {
    let d = q.first().map_or(0, Vec::len);
    let q = to_tensor(q, d).map_err(py_err)?;
    let k = to_tensor(k, d).map_err(py_err)?;
    let v = to_tensor(v, d).map_err(py_err)?;
    let fm = feature_map.parse().map_err(py_err)?;
    let gs = global_scale.parse().map_err(py_err)?;
    let (out, _) = grouped_global_la_forward(&q, &k, &v, group_size, fm, gs).map_err(py_err)?;
    Ok(to_rows(&out))
}

/// Streaming state for one attention head.
#[pyclass(name = "DecodeState", module = "auglin")]
pub struct PyDecodeState {
    inner: auglin::DecodeState,
    conv: ConvWeights,
}

#[pymethods]
impl PyDecodeState {
    #[new]
    fn new(config: &PyAttnConfig, conv_taps: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Self {
            inner: auglin::DecodeState::new(&config.inner).map_err(py_err)?,
            conv: conv(conv_taps, &config.inner)?,
        })
    }

    /// Consumes one token's projections and returns its output row.
    fn step(&mut self, q: Vec<f64>, k: Vec<f64>, v: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner
            .decode_step(&q, &k, &v, &self.conv)
            .map_err(py_err)
    }

    fn prefill(
        &mut self,
        q: Vec<Vec<f64>>,
        k: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    ) -> PyResult<Vec<Vec<f64>>> {
        let d = self.inner.head_dim();
        let q = to_tensor(q, d).map_err(py_err)?;
        let k = to_tensor(k, d).map_err(py_err)?;
        let v = to_tensor(v, d).map_err(py_err)?;
        Ok(to_rows(
            &self.inner.prefill(&q, &k, &v, &self.conv).map_err(py_err)?,
        ))
    }

    #[getter]
    fn pos(&self) -> usize {
        self.inner.pos()
    }

    #[getter]
    fn folded(&self) -> usize {
        self.inner.folded()
    }

    fn snapshot(&self) -> Vec<u8> {
        self.inner.snapshot()
    }
}

/// Parses `"4,2,2"` or `"parents:-1,0,0"` into a parent list (`None` for
/// children of the committed prefix).
#[pyfunction]
fn parse_tree(spec: &str) -> PyResult<Vec<Option<usize>>> {
    let shape: TreeShape = spec.parse().map_err(py_err)?;
    Ok(shape.parents().to_vec())
}

/// Greedy verification: returns the accepted node indices and the bonus token.
#[pyfunction]
fn verify_tree(
    parents: Vec<Option<usize>>,
    tokens: Vec<u32>,
    verifier_argmax: Vec<u32>,
    root_argmax: u32,
) -> PyResult<(Vec<usize>, u32)> {
    let shape = TreeShape::new(parents).map_err(py_err)?;
    let tree = SpecTree::from_shape(&shape, &tokens).map_err(py_err)?;
    let r = verify_greedy(&tree, &verifier_argmax, root_argmax).map_err(py_err)?;
    Ok((r.accepted, r.bonus_token))
}

/// Small decoder-only transformer built on the augmented attention.
#[pyclass(name = "ToyModel", module = "auglin")]
pub struct PyToyModel {
    inner: ToyModel,
}

#[pymethods]
impl PyToyModel {
    #[new]
    #[pyo3(signature = (vocab_size=16, d_model=64, n_heads=4, n_layers=2, group_size=64, conv_kernel=5, max_seq=256, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        vocab_size: usize,
        d_model: usize,
        n_heads: usize,
        n_layers: usize,
        group_size: usize,
        conv_kernel: usize,
        max_seq: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let mut c = ModelConfig::new(vocab_size, d_model, n_heads, n_layers);
        c.attn.group_size = group_size;
        c.attn.conv_kernel = conv_kernel;
        c.max_seq = max_seq;
        c.seed = seed;
        Ok(Self {
            inner: ToyModel::new(&c).map_err(py_err)?,
        })
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.config().vocab_size
    }

    /// Next-token logits at every position.
    fn logits(&self, tokens: Vec<u32>) -> PyResult<Vec<Vec<f64>>> {
        Ok(to_rows(
            &model_prefill(&self.inner, &tokens).map_err(py_err)?,
        ))
    }

    fn generate(&self, prompt: Vec<u32>, n_new: usize) -> PyResult<Vec<u32>> {
        generate_greedy(&self.inner, &prompt, n_new).map_err(py_err)
    }

    /// Speculative greedy generation. `drafter` is `"self"` or `"random"`.
    /// Returns the tokens and the mean number of accepted drafts per round.
    #[pyo3(signature = (prompt, n_new, tree="4,2,2", drafter="self", seed=0))]
    fn generate_speculative(
        &self,
        prompt: Vec<u32>,
        n_new: usize,
        tree: &str,
        drafter: &str,
        seed: u64,
    ) -> PyResult<(Vec<u32>, f64)> {
        let shape: TreeShape = tree.parse().map_err(py_err)?;
        let (out, stats) = match drafter {
            "self" => generate_speculative(
                &self.inner,
                &prompt,
                n_new,
                &shape,
                &mut SelfDrafter::new(&self.inner),
            ),
            "random" => {
                let mut d = RandomDrafter::new(seed, self.inner.config().vocab_size as u32);
                generate_speculative(&self.inner, &prompt, n_new, &shape, &mut d)
            }
            other => return Err(PyValueError::new_err(format!("unknown drafter `{other}`"))),
        }
        .map_err(py_err)?;
        Ok((out, stats.mean_accepted()))
    }
}

#[pymodule]
#[pyo3(name = "auglin")]
fn auglin_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyAttnConfig>()?;
    m.add_class::<PyDecodeState>()?;
    m.add_class::<PyToyModel>()?;
    m.add_function(wrap_pyfunction!(augmented_attention, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_attention, m)?)?;
    m.add_function(wrap_pyfunction!(grouped_global_attention, m)?)?;
    m.add_function(wrap_pyfunction!(parse_tree, m)?)?;
    m.add_function(wrap_pyfunction!(verify_tree, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        assert_eq!(to_rows(&to_tensor(rows.clone(), 2).unwrap()), rows);
        assert_eq!(to_tensor(vec![], 3).unwrap().shape(), &[0, 3]);
        assert!(to_tensor(vec![vec![1.0], vec![1.0, 2.0]], 1).is_err());
    }
}
