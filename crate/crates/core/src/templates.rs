//! Weight-Net quality scoring and per-class template generation.

use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::autodiff::{Graph, Var};
use crate::config::defaults;
use crate::data::{CsiSample, SampleShape};
use crate::encoder::payload_tensor;
use crate::error::{Error, Result};
use crate::layers::{Block, Conv};
use crate::params::{he_normal, ParamId, ParamStore};
use crate::similarity::SimilarityMatrix;
use crate::tensor::Tensor;

pub const TEMPLATES_KIND: &str = "templates";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightNetConfig {
    pub channels: usize,
    /// Residual blocks after the stem convolution.
    pub blocks: usize,
    /// Largest pool (`k`) accepted.
    pub max_pool: usize,
}

impl Default for WeightNetConfig {
    fn default() -> Self {
        WeightNetConfig {
            channels: defaults::WEIGHTNET_CHANNELS,
            blocks: 1,
            max_pool: defaults::WEIGHTNET_MAX_POOL,
        }
    }
}

/// Per-sample quality scores in `(0, 1)`, one per pooled sample.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(pub Vec<f64>);

/// Anything that maps a `k x k` pool similarity matrix to `k` weights on a graph.
pub trait QualityScorer {
    fn score(&self, g: &mut Graph, store: &ParamStore, s: Var) -> Result<Var>;
}

/// Similarity between payload batches (`b x 2 x t x D`) on a graph; the key
/// batch goes through the key branch.
pub trait PairSimilarity {
    fn sample_shape(&self) -> SampleShape;
    fn similarity(&self, g: &mut Graph, store: &ParamStore, q: Var, k: Var) -> Result<Var>;
}

/// Residual CNN over the similarity matrix viewed as a 1-channel image.
///
/// Feature maps are averaged across columns, so row `i` of `S` yields the
/// feature vector of sample `i`; a shared linear layer and a sigmoid turn it
/// into the sample's weight. Any `k <= max_pool` is accepted without padding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightNet {
    config: WeightNetConfig,
    stem: Conv,
    blocks: Vec<Block>,
    out_w: ParamId,
    out_b: ParamId,
}

impl WeightNet {
    pub fn build(config: &WeightNetConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        if config.channels == 0 || config.max_pool == 0 {
            return Err(Error::config("weightnet", "channels and max_pool must be positive"));
        }
        let c = config.channels;
        let stem = Conv::new(store, "weightnet.stem", 1, c, 3, 1, 1.0, rng);
        let blocks = (0..config.blocks)
            .map(|i| Block::new(store, &format!("weightnet.block{i}"), c, c, 1, rng))
            .collect();
        let out_w = store.add("weightnet.out.w", he_normal(&[c, 1], c, 0.1, rng));
        let out_b = store.add("weightnet.out.b", Tensor::zeros(&[1]));
        Ok(WeightNet {
            config: config.clone(),
            stem,
            blocks,
            out_w,
            out_b,
        })
    }

    pub fn config(&self) -> &WeightNetConfig {
        &self.config
    }
}

impl QualityScorer for WeightNet {
    fn score(&self, g: &mut Graph, store: &ParamStore, s: Var) -> Result<Var> {
        let shape = g.shape(s).to_vec();
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(Error::dim(format!("Weight-Net needs a square matrix, got {:?}", shape)));
        }
        let k = shape[0];
        if k > self.config.max_pool {
            return Err(Error::PoolSize {
                size: k,
                max: self.config.max_pool,
            });
        }
        let c = self.config.channels;
        let img = g.reshape(s, &[1, 1, k, k])?;
        let mut h = self.stem.forward(g, store, img)?;
        h = g.relu(h);
        for b in &self.blocks {
            h = b.forward(g, store, h)?;
        }
        let rows = g.mean_last(h); // 1 x c x k
        let rows = g.reshape(rows, &[c, k])?;
        let feats = g.transpose(rows)?;
        let w = g.param(store, self.out_w);
        let b = g.param(store, self.out_b);
        let z = g.matmul(feats, w)?;
        let z = g.add_bias(z, b)?;
        let z = g.reshape(z, &[k])?;
        Ok(g.sigmoid(z))
    }
}

/// Fixed weights regardless of the similarity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedWeights(pub Vec<f64>);

impl QualityScorer for FixedWeights {
    fn score(&self, g: &mut Graph, _store: &ParamStore, s: Var) -> Result<Var> {
        let k = g.shape(s)[0];
        if self.0.len() != k {
            return Err(Error::dim(format!("{} fixed weights for a pool of {k}", self.0.len())));
        }
        Ok(g.constant(Tensor::new(&[k], self.0.clone())?))
    }
}

/// Scores a pool from its self-similarity matrix.
pub fn score_sample_quality(s: &SimilarityMatrix, scorer: &dyn QualityScorer, store: &ParamStore) -> Result<WeightVector> {
    let mut g = Graph::new();
    let sv = g.constant(s.tensor().clone());
    let w = scorer.score(&mut g, store, sv)?;
    Ok(WeightVector(g.value(w).data().to_vec()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    WeightedAverage,
    SelectedSourceSample,
    SelectedTargetSample,
    SupportSample,
    PlainAverage,
    RandomSample,
}

/// One template per class plus how it was obtained.
///
/// An uncovered class has no template of its own; it may carry a fallback
/// (zero-shot target classes fall back to their source template).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub shape: SampleShape,
    pub templates: Vec<Option<Vec<f64>>>,
    pub provenance: Vec<Option<Provenance>>,
    pub fallback: Vec<Option<Vec<f64>>>,
}

impl TemplateSet {
    pub fn empty(classes: usize, shape: SampleShape) -> Self {
        TemplateSet {
            shape,
            templates: vec![None; classes],
            provenance: vec![None; classes],
            fallback: vec![None; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.templates.len()
    }

    pub fn set(&mut self, class: usize, payload: Vec<f64>, provenance: Provenance) {
        self.templates[class] = Some(payload);
        self.provenance[class] = Some(provenance);
    }

    pub fn coverage(&self) -> Vec<bool> {
        self.templates.iter().map(Option::is_some).collect()
    }

    pub fn covered_classes(&self) -> Vec<usize> {
        (0..self.classes()).filter(|&c| self.templates[c].is_some()).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.templates.iter().all(Option::is_some)
    }

    /// Template or fallback of a class.
    pub fn resolved(&self, class: usize) -> Option<&[f64]> {
        self.templates[class]
            .as_deref()
            .or(self.fallback[class].as_deref())
    }

    /// Every class's template for inference, or the first class lacking one.
    pub fn inference_rows(&self) -> Result<Vec<&[f64]>> {
        (0..self.classes())
            .map(|c| self.resolved(c).ok_or(Error::UncoveredClass(c)))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        archive::save(path, TEMPLATES_KIND, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        archive::load(path, TEMPLATES_KIND)
    }
}

/// `min(k, len)` distinct indices in ascending order.
pub fn sample_pool(len: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    if k >= len {
        return (0..len).collect();
    }
    let mut idx = sample_indices(rng, len, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Weighted per-class templates on a graph, rows ordered as `classes`.
pub struct GraphTemplates {
    pub classes: Vec<usize>,
    pub templates: Var,
    pub weights: Var,
}

/// Algorithm 1 on a graph: `S = sim(pool, pool)`, `W = scorer(S)` and per
/// class `sum W_i x_i / sum W_i`. Classes absent from the pool are omitted.
/// With `detach_weights` no gradient reaches the scorer or the similarity
/// model through the template values.
pub fn weighted_templates_graph(
    g: &mut Graph,
    sim: &dyn PairSimilarity,
    scorer: &dyn QualityScorer,
    store: &ParamStore,
    pool: &[&CsiSample],
    detach_weights: bool,
) -> Result<GraphTemplates> {
    if pool.is_empty() {
        return Err(Error::Precondition("template pool is empty".into()));
    }
    let shape = sim.sample_shape();
    let rows: Vec<&[f64]> = pool.iter().map(|s| s.data.as_slice()).collect();
    let x4 = g.constant(payload_tensor(&rows, shape)?);
    let s = sim.similarity(g, store, x4, x4)?;
    let mut w = scorer.score(g, store, s)?;
    if detach_weights {
        w = g.detach(w);
    }
    let mut classes: Vec<usize> = pool.iter().map(|s| s.label).collect();
    classes.sort_unstable();
    classes.dedup();
    let k = pool.len();
    let mut m = vec![0.0; classes.len() * k];
    for (i, s) in pool.iter().enumerate() {
        let r = classes.binary_search(&s.label).expect("collected");
        m[r * k + i] = 1.0;
    }
    let m = g.constant(Tensor::new(&[classes.len(), k], m)?);
    let mw = g.scale_cols(m, w)?;
    let p = shape.payload_len();
    let x = g.constant(payload_tensor(&rows, shape)?.reshape(&[k, p])?);
    let num = g.matmul(mw, x)?;
    let den = g.sum_last(mw);
    let inv = g.recip(den);
    let templates = g.scale_rows(num, inv)?;
    Ok(GraphTemplates {
        classes,
        templates,
        weights: w,
    })
}

fn pack(g: &Graph, gt: &GraphTemplates, classes: usize, shape: SampleShape, provenance: Provenance) -> TemplateSet {
    let mut set = TemplateSet::empty(classes, shape);
    let t = g.value(gt.templates);
    for (r, &c) in gt.classes.iter().enumerate() {
        if c < classes {
            set.set(c, t.row(r).to_vec(), provenance);
        }
    }
    set
}

/// Algorithm 1: weighted-average templates from `k` pool samples drawn with `rng`.
pub fn generate_templates_indomain(
    pool: &[CsiSample],
    k: usize,
    classes: usize,
    sim: &dyn PairSimilarity,
    scorer: &dyn QualityScorer,
    store: &ParamStore,
    rng: &mut impl Rng,
) -> Result<TemplateSet> {
    let idx = sample_pool(pool.len(), k, rng);
    let picked: Vec<&CsiSample> = idx.iter().map(|&i| &pool[i]).collect();
    let mut g = Graph::new();
    let gt = weighted_templates_graph(&mut g, sim, scorer, store, &picked, true)?;
    let set = pack(&g, &gt, classes, sim.sample_shape(), Provenance::WeightedAverage);
    for c in 0..classes {
        if set.templates[c].is_none() {
            log::warn!("class {c} absent from the sampled template pool");
        }
    }
    Ok(set)
}

/// Per class, the pool member with the largest weight (first one wins ties).
fn select_by_weight(labels: &[usize], weights: &[f64], classes: usize) -> Vec<Option<usize>> {
    let mut best: Vec<Option<usize>> = vec![None; classes];
    let mut best_w = vec![0.0; classes];
    for (i, (&l, &w)) in labels.iter().zip(weights).enumerate() {
        if l < classes && w > best_w[l] {
            best_w[l] = w;
            best[l] = Some(i);
        }
    }
    best
}

/// Algorithm 2 source half over an already drawn pool: per class the
/// member with the largest Weight-Net score.
pub fn select_source_templates(
    pool: &[&CsiSample],
    classes: usize,
    sim: &dyn PairSimilarity,
    scorer: &dyn QualityScorer,
    store: &ParamStore,
) -> Result<TemplateSet> {
    if pool.is_empty() {
        return Err(Error::Precondition("zero-shot training pool is empty".into()));
    }
    let shape = sim.sample_shape();
    let rows: Vec<&[f64]> = pool.iter().map(|s| s.data.as_slice()).collect();
    let mut g = Graph::new();
    let x = g.constant(payload_tensor(&rows, shape)?);
    let s = sim.similarity(&mut g, store, x, x)?;
    let w = scorer.score(&mut g, store, s)?;
    let labels: Vec<usize> = pool.iter().map(|s| s.label).collect();
    let best = select_by_weight(&labels, g.value(w).data(), classes);
    let mut set = TemplateSet::empty(classes, shape);
    for (c, b) in best.iter().enumerate() {
        if let Some(i) = b {
            set.set(c, rows[*i].to_vec(), Provenance::SelectedSourceSample);
        }
    }
    Ok(set)
}

/// Algorithm 2 source half: per class the highest-weighted of `k` pool samples.
pub fn zeroshot_source_templates(
    train_pool: &[CsiSample],
    k: usize,
    classes: usize,
    sim: &dyn PairSimilarity,
    scorer: &dyn QualityScorer,
    store: &ParamStore,
    rng: &mut impl Rng,
) -> Result<TemplateSet> {
    let idx = sample_pool(train_pool.len(), k, rng);
    let picked: Vec<&CsiSample> = idx.iter().map(|&i| &train_pool[i]).collect();
    select_source_templates(&picked, classes, sim, scorer, store)
}

/// Algorithm 2 target half: each of `k` unlabeled target samples is assigned
/// its most similar source template; per class the best-scoring one becomes
/// the target template. Classes nobody maps to keep the source template as
/// their fallback.
pub fn zeroshot_target_templates(
    source: &TemplateSet,
    test_pool: &[&[f64]],
    k: usize,
    sim: &dyn PairSimilarity,
    store: &ParamStore,
    rng: &mut impl Rng,
) -> Result<TemplateSet> {
    if test_pool.is_empty() {
        return Err(Error::Precondition("zero-shot target pool is empty".into()));
    }
    let shape = sim.sample_shape();
    let covered = source.covered_classes();
    if covered.is_empty() {
        return Err(Error::Precondition("source templates cover no class".into()));
    }
    let idx = sample_pool(test_pool.len(), k, rng);
    let rows: Vec<&[f64]> = idx.iter().map(|&i| test_pool[i]).collect();
    let trows: Vec<&[f64]> = covered
        .iter()
        .map(|&c| source.templates[c].as_deref().expect("covered"))
        .collect();
    let mut g = Graph::new();
    let q = g.constant(payload_tensor(&rows, shape)?);
    let kt = g.constant(payload_tensor(&trows, shape)?);
    let s = sim.similarity(&mut g, store, q, kt)?;
    let s = g.value(s);
    let classes = source.classes();
    let mut set = TemplateSet::empty(classes, shape);
    let mut best_w = vec![0.0; classes];
    for (i, row) in rows.iter().enumerate() {
        let (col, score) = argmax(s.row(i));
        let y = covered[col];
        if score > best_w[y] {
            best_w[y] = score;
            set.set(y, row.to_vec(), Provenance::SelectedTargetSample);
        }
    }
    for c in 0..classes {
        if set.templates[c].is_none() {
            set.fallback[c] = source.templates[c].clone();
            log::warn!("no target sample mapped to class {c}; using its source template");
        }
    }
    Ok(set)
}

/// Algorithm 2: `(source, target)` template sets.
#[allow(clippy::too_many_arguments)]
pub fn generate_templates_zeroshot(
    train_pool: &[CsiSample],
    test_pool: &[&[f64]],
    k: usize,
    classes: usize,
    sim: &dyn PairSimilarity,
    scorer: &dyn QualityScorer,
    store: &ParamStore,
    rng: &mut impl Rng,
) -> Result<(TemplateSet, TemplateSet)> {
    if test_pool.is_empty() {
        return Err(Error::Precondition("zero-shot target pool is empty".into()));
    }
    let source = zeroshot_source_templates(train_pool, k, classes, sim, scorer, store, rng)?;
    let target = zeroshot_target_templates(&source, test_pool, k, sim, store, rng)?;
    Ok((source, target))
}

/// Few-shot templates: the support samples themselves when every class has
/// one, otherwise Algorithm 1 over the whole support set.
pub fn templates_from_support(
    support: &[CsiSample],
    classes: usize,
    sim: &dyn PairSimilarity,
    scorer: &dyn QualityScorer,
    store: &ParamStore,
) -> Result<TemplateSet> {
    if support.is_empty() {
        return Err(Error::Precondition("support set is empty".into()));
    }
    let mut counts = vec![0usize; classes];
    for s in support {
        if s.label >= classes {
            return Err(Error::LabelOutOfRange {
                label: s.label,
                classes,
            });
        }
        counts[s.label] += 1;
    }
    let set = if counts.iter().all(|&c| c <= 1) {
        let mut set = TemplateSet::empty(classes, sim.sample_shape());
        for s in support {
            set.set(s.label, s.data.clone(), Provenance::SupportSample);
        }
        set
    } else {
        let all: Vec<&CsiSample> = support.iter().collect();
        let mut g = Graph::new();
        let gt = weighted_templates_graph(&mut g, sim, scorer, store, &all, true)?;
        pack(&g, &gt, classes, sim.sample_shape(), Provenance::WeightedAverage)
    };
    for (c, n) in counts.iter().enumerate() {
        if *n == 0 {
            log::warn!("support set has no sample of class {c}");
        }
    }
    Ok(set)
}

/// Per-class arithmetic mean of `k` pool samples.
pub fn plain_average_templates(pool: &[CsiSample], k: usize, classes: usize, shape: SampleShape, rng: &mut impl Rng) -> TemplateSet {
    let idx = sample_pool(pool.len(), k, rng);
    let p = shape.payload_len();
    let mut sums = vec![vec![0.0; p]; classes];
    let mut counts = vec![0usize; classes];
    for &i in &idx {
        let s = &pool[i];
        if s.label < classes {
            counts[s.label] += 1;
            for (a, v) in sums[s.label].iter_mut().zip(&s.data) {
                *a += v;
            }
        }
    }
    let mut set = TemplateSet::empty(classes, shape);
    for c in 0..classes {
        if counts[c] > 0 {
            let n = counts[c] as f64;
            set.set(c, sums[c].iter().map(|v| v / n).collect(), Provenance::PlainAverage);
        }
    }
    set
}

/// One uniformly drawn pool member per class.
pub fn random_sample_templates(pool: &[CsiSample], classes: usize, shape: SampleShape, rng: &mut impl Rng) -> TemplateSet {
    let mut set = TemplateSet::empty(classes, shape);
    for c in 0..classes {
        let members: Vec<&CsiSample> = pool.iter().filter(|s| s.label == c).collect();
        if let Some(s) = members.choose(rng) {
            set.set(c, s.data.clone(), Provenance::RandomSample);
        }
    }
    set
}

/// Index and value of the row maximum; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (j, &v) in row.iter().enumerate() {
        if v > best.1 {
            best = (j, v);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::gaussian_graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Gaussian similarity on flattened payloads: no parameters at all.
    struct RawGaussian(SampleShape);

    impl PairSimilarity for RawGaussian {
        fn sample_shape(&self) -> SampleShape {
            self.0
        }
        fn similarity(&self, g: &mut Graph, _: &ParamStore, q: Var, k: Var) -> Result<Var> {
            let p = self.0.payload_len();
            let (bq, bk) = (g.shape(q)[0], g.shape(k)[0]);
            let q = g.reshape(q, &[bq, p])?;
            let k = g.reshape(k, &[bk, p])?;
            gaussian_graph(g, q, k)
        }
    }

    const SHAPE: SampleShape = SampleShape { packets: 1, subcarriers: 2 };

    fn s(label: usize, v: [f64; 4]) -> CsiSample {
        CsiSample {
            data: v.to_vec(),
            shape: SHAPE,
            label,
            domain: 0,
            session: 0,
            start_ms: 0,
        }
    }

    #[test]
    fn weighted_mean_with_stub_weights() {
        let pool = vec![s(0, [1.0, 2.0, 3.0, 4.0]), s(0, [0.0, 0.0, 1.0, 1.0]), s(0, [10.0, -10.0, 0.0, 2.0])];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = generate_templates_indomain(
            &pool,
            3,
            1,
            &RawGaussian(SHAPE),
            &FixedWeights(vec![0.2, 0.3, 0.5]),
            &ParamStore::new(),
            &mut rng,
        )
        .unwrap();
        let want: Vec<f64> = (0..4)
            .map(|j| (0.2 * pool[0].data[j] + 0.3 * pool[1].data[j] + 0.5 * pool[2].data[j]) / (0.2 + 0.3 + 0.5))
            .collect();
        assert_eq!(t.templates[0].as_ref().unwrap(), &want);
        assert_eq!(t.provenance[0], Some(Provenance::WeightedAverage));
    }

    #[test]
    fn single_member_class_copies_the_sample() {
        let pool = vec![s(0, [1.0, 2.0, 3.0, 4.0]), s(1, [0.1, 0.2, 0.3, 0.4]), s(1, [5.0, 5.0, 5.0, 5.0])];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = generate_templates_indomain(
            &pool,
            3,
            3,
            &RawGaussian(SHAPE),
            &FixedWeights(vec![0.37, 0.5, 0.5]),
            &ParamStore::new(),
            &mut rng,
        )
        .unwrap();
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(t.templates[0].as_ref().unwrap(), &pool[0].data));
        assert!(close(t.templates[1].as_ref().unwrap(), &[2.55, 2.6, 2.65, 2.7]));
        assert_eq!(t.coverage(), vec![true, true, false]);
        assert!(matches!(t.inference_rows(), Err(Error::UncoveredClass(2))));
    }

    #[test]
    fn weight_net_scores_in_unit_interval_and_checks_shape() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = WeightNet::build(
            &WeightNetConfig {
                max_pool: 6,
                ..Default::default()
            },
            &mut store,
            &mut rng,
        )
        .unwrap();
        let sq = SimilarityMatrix::new(Tensor::new(&[5, 5], (0..25).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap()).unwrap();
        let w = score_sample_quality(&sq, &net, &store).unwrap();
        assert_eq!(w.0.len(), 5);
        assert!(w.0.iter().all(|&v| v > 0.0 && v < 1.0));
        let rect = SimilarityMatrix::new(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(score_sample_quality(&rect, &net, &store), Err(Error::Dimension(_))));
        let big = SimilarityMatrix::new(Tensor::zeros(&[7, 7])).unwrap();
        assert!(matches!(
            score_sample_quality(&big, &net, &store),
            Err(Error::PoolSize { size: 7, max: 6 })
        ));
    }

    #[test]
    fn zeroshot_on_identical_pools_returns_source_templates() {
        let pool = vec![
            s(0, [1.0, 0.0, 0.0, 0.0]),
            s(1, [0.0, 1.0, 0.0, 0.0]),
            s(0, [0.9, 0.1, 0.0, 0.0]),
            s(1, [0.0, 0.0, 3.0, 0.0]),
        ];
        let unl: Vec<&[f64]> = pool.iter().map(|s| s.data.as_slice()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (src, tgt) = generate_templates_zeroshot(
            &pool,
            &unl,
            4,
            2,
            &RawGaussian(SHAPE),
            &FixedWeights(vec![0.3, 0.9, 0.6, 0.2]),
            &ParamStore::new(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(src.templates[0].as_ref().unwrap(), &pool[2].data);
        assert_eq!(src.templates[1].as_ref().unwrap(), &pool[1].data);
        assert_eq!(tgt.templates, src.templates);
        assert_eq!(tgt.provenance[0], Some(Provenance::SelectedTargetSample));
    }

    #[test]
    fn zeroshot_weight_ties_keep_first() {
        let best = select_by_weight(&[0, 0, 1, 0], &[0.5, 0.5, 0.1, 0.4], 2);
        assert_eq!(best, vec![Some(0), Some(2)]);
    }

    #[test]
    fn unmapped_target_class_falls_back_to_source() {
        let pool = vec![s(0, [1.0, 0.0, 0.0, 0.0]), s(1, [0.0, 5.0, 0.0, 0.0])];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sim = RawGaussian(SHAPE);
        let store = ParamStore::new();
        let src = zeroshot_source_templates(&pool, 2, 2, &sim, &FixedWeights(vec![0.5, 0.5]), &store, &mut rng).unwrap();
        assert!(src.is_complete());
        let target = [[1.1, 0.0, 0.0, 0.0], [0.9, 0.2, 0.0, 0.0]];
        let unl: Vec<&[f64]> = target.iter().map(|r| r.as_slice()).collect();
        let tgt = zeroshot_target_templates(&src, &unl, 2, &sim, &store, &mut rng).unwrap();
        assert_eq!(tgt.coverage(), vec![true, false]);
        assert_eq!(tgt.resolved(1).unwrap(), pool[1].data.as_slice());
        // both map to class 0; the closer one wins
        assert_eq!(tgt.templates[0].as_deref().unwrap(), target[0].as_slice());
    }

    #[test]
    fn support_templates() {
        let shape = SHAPE;
        let one = vec![s(2, [1.0; 4]), s(0, [2.0; 4]), s(1, [3.0; 4])];
        let t = templates_from_support(&one, 3, &RawGaussian(shape), &FixedWeights(vec![]), &ParamStore::new()).unwrap();
        for x in &one {
            assert_eq!(t.templates[x.label].as_ref().unwrap(), &x.data);
            assert_eq!(t.provenance[x.label], Some(Provenance::SupportSample));
        }
        let empty: Vec<CsiSample> = vec![];
        assert!(matches!(
            templates_from_support(&empty, 3, &RawGaussian(shape), &FixedWeights(vec![]), &ParamStore::new()),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn template_set_round_trips_through_archive() {
        let mut t = TemplateSet::empty(2, SHAPE);
        t.set(0, vec![0.1, 0.2, 1.0 / 3.0, 4.0], Provenance::WeightedAverage);
        t.fallback[1] = Some(vec![1.0; 4]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.archive");
        t.save(&p).unwrap();
        assert_eq!(TemplateSet::load(&p).unwrap(), t);
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[0.1, 0.9, 0.3]).0, 1);
        assert_eq!(argmax(&[0.5, 0.5]).0, 0);
    }
}
