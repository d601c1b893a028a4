//! Similarity heads: multi-head attention score, Gaussian distance and cosine.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::config::{defaults, Metric};
use crate::error::{Error, Result};
use crate::params::{he_normal, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub heads: usize,
    pub d2: usize,
    pub temperature: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            heads: defaults::HEADS,
            d2: defaults::D2,
            temperature: defaults::TEMPERATURE,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return Err(Error::config("head.heads", "must be at least 1"));
        }
        if self.d2 == 0 {
            return Err(Error::config("head.d2", "must be at least 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("head.temperature", "must be positive"));
        }
        Ok(())
    }
}

/// `b x d1` encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Tensor);

impl Embedding {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(Error::dim(format!("embedding must be 2-D, got {:?}", t.shape())));
        }
        Ok(Embedding(t))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn rows(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }
}

/// `b1 x b2` scores; entry `(i, j)` depends only on query `i` and key `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix(Tensor);

impl SimilarityMatrix {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(Error::dim(format!("similarity must be 2-D, got {:?}", t.shape())));
        }
        Ok(SimilarityMatrix(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.0.shape()[0], self.0.shape()[1])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get2(i, j)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }
}

/// Explicit attention-head weights. Heads are stacked along the projection
/// axis: `wq`, `wk` are `d1 x (h * d2)` and `bq`, `bk` have length `h * d2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionHeadParams {
    pub heads: usize,
    pub temperature: f64,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
}

impl AttentionHeadParams {
    /// Stacks per-head `d1 x d2` matrices and `d2` biases.
    pub fn from_heads(
        wq: &[Tensor],
        bq: &[Tensor],
        wk: &[Tensor],
        bk: &[Tensor],
        temperature: f64,
    ) -> Result<Self> {
        let h = wq.len();
        if h == 0 || bq.len() != h || wk.len() != h || bk.len() != h {
            return Err(Error::dim("every head needs W_Q, b_Q, W_K and b_K"));
        }
        let stack_w = |ws: &[Tensor]| -> Result<Tensor> {
            let (d1, d2) = (ws[0].shape()[0], ws[0].shape()[1]);
            let mut out = vec![0.0; d1 * h * d2];
            for (i, w) in ws.iter().enumerate() {
                if w.shape() != [d1, d2] {
                    return Err(Error::dim(format!("head {i} weight is {:?}, expected {:?}", w.shape(), [d1, d2])));
                }
                for r in 0..d1 {
                    out[r * h * d2 + i * d2..r * h * d2 + (i + 1) * d2].copy_from_slice(w.row(r));
                }
            }
            Tensor::new(&[d1, h * d2], out)
        };
        let stack_b = |bs: &[Tensor]| -> Tensor {
            let data: Vec<f64> = bs.iter().flat_map(|b| b.data().iter().copied()).collect();
            let n = data.len();
            Tensor::new(&[n], data).expect("flat")
        };
        Ok(AttentionHeadParams {
            heads: h,
            temperature,
            wq: stack_w(wq)?,
            bq: stack_b(bq),
            wk: stack_w(wk)?,
            bk: stack_b(bk),
        })
    }
}

/// `sigmoid((1/h) * sum_i (q W_i^Q + b_i^Q)(k W_i^K + b_i^K)^T / temperature)`.
///
/// With the heads stacked along the projection axis the per-head sum is a
/// single `Q K^T` product.
#[allow(clippy::too_many_arguments)]
pub fn attention_graph(
    g: &mut Graph,
    q: Var,
    k: Var,
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    heads: usize,
    temperature: f64,
) -> Result<Var> {
    check_pair(g, q, k)?;
    if g.shape(wq)[0] != g.shape(q)[1] {
        return Err(Error::dim(format!(
            "embedding width {} does not match head input {}",
            g.shape(q)[1],
            g.shape(wq)[0]
        )));
    }
    let qp = g.matmul(q, wq)?;
    let qp = g.add_bias(qp, bq)?;
    let kp = g.matmul(k, wk)?;
    let kp = g.add_bias(kp, bk)?;
    let logits = g.matmul_t(qp, kp)?;
    let scaled = g.scale(logits, 1.0 / (heads as f64 * temperature));
    Ok(g.sigmoid(scaled))
}

/// `exp(-||q_i - k_j||^2 / d1)`.
pub fn gaussian_graph(g: &mut Graph, q: Var, k: Var) -> Result<Var> {
    check_pair(g, q, k)?;
    let d1 = g.shape(q)[1] as f64;
    let d = g.sq_dist(q, k)?;
    let s = g.scale(d, -1.0 / d1);
    Ok(g.exp(s))
}

/// `(cos(q_i, k_j) + 1) / 2`; a zero row scores 0.5 against everything.
pub fn cosine_graph(g: &mut Graph, q: Var, k: Var) -> Result<Var> {
    check_pair(g, q, k)?;
    for (v, side) in [(q, "query"), (k, "key")] {
        let t = g.value(v);
        if (0..t.rows()).any(|i| t.row(i).iter().all(|&x| x == 0.0)) {
            log::warn!("zero-norm {side} embedding; its cosine scores are 0.5");
        }
    }
    let qn = g.row_normalize(q)?;
    let kn = g.row_normalize(k)?;
    let c = g.matmul_t(qn, kn)?;
    Ok(g.affine(c, 0.5, 0.5))
}

fn check_pair(g: &Graph, q: Var, k: Var) -> Result<()> {
    let (a, b) = (g.shape(q), g.shape(k));
    if a.len() != 2 || b.len() != 2 || a[1] != b[1] {
        return Err(Error::dim(format!("embedding shapes {:?} and {:?} are incompatible", a, b)));
    }
    Ok(())
}

pub fn attention_similarity(q: &Embedding, k: &Embedding, p: &AttentionHeadParams) -> Result<SimilarityMatrix> {
    let mut g = Graph::new();
    let (qv, kv) = (g.constant(q.0.clone()), g.constant(k.0.clone()));
    let wq = g.constant(p.wq.clone());
    let bq = g.constant(p.bq.clone());
    let wk = g.constant(p.wk.clone());
    let bk = g.constant(p.bk.clone());
    let s = attention_graph(&mut g, qv, kv, wq, bq, wk, bk, p.heads, p.temperature)?;
    SimilarityMatrix::new(g.value(s).clone())
}

pub fn gaussian_similarity(q: &Embedding, k: &Embedding) -> Result<SimilarityMatrix> {
    let mut g = Graph::new();
    let (qv, kv) = (g.constant(q.0.clone()), g.constant(k.0.clone()));
    let s = gaussian_graph(&mut g, qv, kv)?;
    SimilarityMatrix::new(g.value(s).clone())
}

pub fn cosine_similarity(q: &Embedding, k: &Embedding) -> Result<SimilarityMatrix> {
    let mut g = Graph::new();
    let (qv, kv) = (g.constant(q.0.clone()), g.constant(k.0.clone()));
    let s = cosine_graph(&mut g, qv, kv)?;
    SimilarityMatrix::new(g.value(s).clone())
}

/// Trainable attention head registered in a [`ParamStore`] under `head.`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionHead {
    config: HeadConfig,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
}

impl AttentionHead {
    pub fn build(config: &HeadConfig, d1: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let width = config.heads * config.d2;
        let gain = 0.5f64.sqrt();
        let wq = store.add("head.wq", he_normal(&[d1, width], d1, gain, rng));
        let bq = store.add("head.bq", Tensor::zeros(&[width]));
        // W_K starts as a copy of W_Q so the initial logit is a positive
        // semi-definite form; the two are trained independently from there.
        let wk = store.add("head.wk", store.get(wq).clone());
        let bk = store.add("head.bk", Tensor::zeros(&[width]));
        Ok(AttentionHead {
            config: config.clone(),
            wq,
            bq,
            wk,
            bk,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, q: Var, k: Var) -> Result<Var> {
        let wq = g.param(store, self.wq);
        let bq = g.param(store, self.bq);
        let wk = g.param(store, self.wk);
        let bk = g.param(store, self.bk);
        attention_graph(g, q, k, wq, bq, wk, bk, self.config.heads, self.config.temperature)
    }

    pub fn params(&self, store: &ParamStore) -> AttentionHeadParams {
        AttentionHeadParams {
            heads: self.config.heads,
            temperature: self.config.temperature,
            wq: store.get(self.wq).clone(),
            bq: store.get(self.bq).clone(),
            wk: store.get(self.wk).clone(),
            bk: store.get(self.bk).clone(),
        }
    }

    /// Similarity under `metric`; the attention parameters are only read for
    /// [`Metric::Attention`].
    pub fn similarity(&self, g: &mut Graph, store: &ParamStore, metric: Metric, q: Var, k: Var) -> Result<Var> {
        match metric {
            Metric::Attention => self.forward(g, store, q, k),
            Metric::Gaussian => gaussian_graph(g, q, k),
            Metric::Cosine => cosine_graph(g, q, k),
        }
    }
}
