//! The assembled network: encoder, similarity head and Weight-Net sharing one parameter store.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::config::{Metric, ScenarioConfig};
use crate::data::{CsiSample, SampleShape};
use crate::encoder::{batch_tensor, payload_tensor, Encoder};
use crate::error::Result;
use crate::params::ParamStore;
use crate::similarity::{AttentionHead, SimilarityMatrix};
use crate::templates::{PairSimilarity, TemplateSet, WeightNet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossFiNet {
    pub encoder: Encoder,
    pub head: AttentionHead,
    pub weightnet: WeightNet,
    pub metric: Metric,
}

impl CrossFiNet {
    pub fn build(config: &ScenarioConfig, shape: SampleShape, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        let encoder = Encoder::build(&config.encoder, shape, store, rng)?;
        let head = AttentionHead::build(&config.head, encoder.d1(), store, rng)?;
        let weightnet = WeightNet::build(&config.weightnet, store, rng)?;
        Ok(CrossFiNet {
            encoder,
            head,
            weightnet,
            metric: config.metric(),
        })
    }

    /// Similarity between two embedding batches under the configured metric.
    pub fn score(&self, g: &mut Graph, store: &ParamStore, eq: Var, ek: Var) -> Result<Var> {
        self.head.similarity(g, store, self.metric, eq, ek)
    }

    /// `S(samples, templates)` without gradient tracking.
    pub fn similarity_to_templates(&self, store: &ParamStore, samples: &[CsiSample], templates: &TemplateSet) -> Result<SimilarityMatrix> {
        let rows = templates.inference_rows()?;
        let shape = self.encoder.shape();
        let mut g = Graph::new();
        let q = g.constant(batch_tensor(samples, shape)?);
        let k = g.constant(payload_tensor(&rows, shape)?);
        let s = self.similarity(&mut g, store, q, k)?;
        SimilarityMatrix::new(g.value(s).clone())
    }

    pub fn embed(&self, store: &ParamStore, samples: &[CsiSample]) -> Result<Tensor> {
        self.encoder.encode(store, samples)
    }
}

impl PairSimilarity for CrossFiNet {
    fn sample_shape(&self) -> SampleShape {
        self.encoder.shape()
    }

    fn similarity(&self, g: &mut Graph, store: &ParamStore, q: Var, k: Var) -> Result<Var> {
        let eq = self.encoder.forward(g, store, q)?;
        let ek = if q == k { eq } else { self.encoder.forward(g, store, k)? };
        self.score(g, store, eq, ek)
    }
}
