//! Shared twin feature extractor: residual CNN over `2 x t x D` CSI windows.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::autodiff::{Graph, Var};
use crate::config::defaults;
use crate::data::{CsiSample, SampleShape};
use crate::error::{Error, Result};
use crate::layers::{Block, Conv};
use crate::params::{he_normal, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Archive kind for importable weight sets.
pub const WEIGHTS_KIND: &str = "weights";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderVariant {
    /// ResNet-18 layout with a 2-channel stem.
    PaperResnet18,
    /// Stem plus two residual stages, about 46k parameters at the default width.
    TinyResidual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderInit {
    /// He-normal (fan-in) weights, zero biases, residual branch outputs scaled by 0.5.
    RandomDocumented,
    /// Named arrays from `pretrained_path`; falls back to random init when absent.
    ImportedPretrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    /// Embedding width; `None` picks the variant default.
    pub d1: Option<usize>,
    pub init: EncoderInit,
    pub pretrained_path: Option<PathBuf>,
    /// Channels of the first stage; later stages double it.
    pub base_channels: Option<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            variant: EncoderVariant::TinyResidual,
            d1: None,
            init: EncoderInit::RandomDocumented,
            pretrained_path: None,
            base_channels: None,
        }
    }
}

impl EncoderConfig {
    pub fn d1(&self) -> usize {
        self.d1.unwrap_or(match self.variant {
            EncoderVariant::TinyResidual => defaults::D1_TINY,
            EncoderVariant::PaperResnet18 => defaults::D1_RESNET18,
        })
    }

    pub fn base_channels(&self) -> usize {
        self.base_channels.unwrap_or(match self.variant {
            EncoderVariant::TinyResidual => 24,
            EncoderVariant::PaperResnet18 => 64,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.d1() < 2 {
            return Err(Error::config("encoder.d1", "must be at least 2"));
        }
        if self.base_channels() == 0 {
            return Err(Error::config("encoder.base_channels", "must be positive"));
        }
        Ok(())
    }
}

/// Parameter layout of one encoder inside a [`ParamStore`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Encoder {
    config: EncoderConfig,
    shape: SampleShape,
    stem: Conv,
    stem_pool: bool,
    blocks: Vec<Block>,
    fc_w: ParamId,
    fc_b: ParamId,
}

impl Encoder {
    /// Registers all parameters under the `encoder.` prefix.
    pub fn build(config: &EncoderConfig, shape: SampleShape, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = config.base_channels();
        let (stem, stem_pool, blocks, width) = match config.variant {
            EncoderVariant::TinyResidual => {
                let stem = Conv::new(store, "encoder.stem", 2, c, 3, 2, 1.0, rng);
                let blocks = vec![
                    Block::new(store, "encoder.layer1.0", c, c, 1, rng),
                    Block::new(store, "encoder.layer2.0", c, 2 * c, 2, rng),
                ];
                (stem, false, blocks, 2 * c)
            }
            EncoderVariant::PaperResnet18 => {
                let stem = Conv::new(store, "encoder.stem", 2, c, 7, 2, 1.0, rng);
                let mut blocks = Vec::new();
                let mut cin = c;
                for (stage, mult) in [1, 2, 4, 8].into_iter().enumerate() {
                    let cout = c * mult;
                    for i in 0..2 {
                        let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                        let name = format!("encoder.layer{}.{}", stage + 1, i);
                        blocks.push(Block::new(store, &name, cin, cout, stride, rng));
                        cin = cout;
                    }
                }
                (stem, true, blocks, 8 * c)
            }
        };
        let d1 = config.d1();
        let fc_w = store.add("encoder.fc.w", he_normal(&[width, d1], width, 0.5, rng));
        let fc_b = store.add("encoder.fc.b", Tensor::zeros(&[d1]));
        let enc = Encoder {
            config: config.clone(),
            shape,
            stem,
            stem_pool,
            blocks,
            fc_w,
            fc_b,
        };
        if config.init == EncoderInit::ImportedPretrained {
            match &config.pretrained_path {
                Some(p) if p.exists() => {
                    let named: BTreeMap<String, Tensor> = archive::load(p, WEIGHTS_KIND)?;
                    let n = enc.import_weights(store, &named)?;
                    log::info!("imported {n} encoder arrays from {}", p.display());
                }
                other => log::warn!(
                    "pretrained weights unavailable ({:?}); using random fan-in init",
                    other
                ),
            }
        }
        Ok(enc)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn shape(&self) -> SampleShape {
        self.shape
    }

    pub fn d1(&self) -> usize {
        self.config.d1()
    }

    /// `x` is `b x 2 x t x D`; returns `b x d1`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let [c, t, d] = self.shape.dims();
        let s = g.shape(x);
        if s.len() != 4 || s[1..] != [c, t, d] {
            return Err(Error::dim(format!(
                "encoder built for {:?} inputs, got {:?}",
                [c, t, d],
                s
            )));
        }
        let b = s[0];
        let mut h = self.stem.forward(g, store, x)?;
        h = g.relu(h);
        if self.stem_pool {
            h = g.max_pool2d(h, 3, 2, 1)?;
        }
        for block in &self.blocks {
            h = block.forward(g, store, h)?;
        }
        let hs = g.shape(h).to_vec();
        let flat = g.reshape(h, &[b, hs[1], hs[2] * hs[3]])?;
        let pooled = g.mean_last(flat);
        let w = g.param(store, self.fc_w);
        let bias = g.param(store, self.fc_b);
        let z = g.matmul(pooled, w)?;
        g.add_bias(z, bias)
    }

    /// Evaluation-mode embedding of a batch of samples (no gradient tracking).
    pub fn encode(&self, store: &ParamStore, samples: &[CsiSample]) -> Result<Tensor> {
        let x = batch_tensor(samples, self.shape)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let z = self.forward(&mut g, store, xv)?;
        Ok(g.value(z).clone())
    }

    /// Copies matching named arrays into the store. A 3-channel first-layer
    /// kernel is averaged over its input channels and replicated to 2.
    pub fn import_weights(&self, store: &mut ParamStore, named: &BTreeMap<String, Tensor>) -> Result<usize> {
        let stem_w = store.name(self.stem.w).to_string();
        let mut count = 0;
        let ids: Vec<ParamId> = store.ids().filter(|&id| store.name(id).starts_with("encoder.")).collect();
        for id in ids {
            let name = store.name(id).to_string();
            let Some(src) = named.get(&name) else { continue };
            let value = if name == stem_w && src.shape().len() == 4 && src.shape()[1] != 2 {
                adapt_input_channels(src, 2)?
            } else {
                src.clone()
            };
            store.assign(id, value)?;
            count += 1;
        }
        Ok(count)
    }
}

/// Averages an OIHW kernel over its input-channel axis and replicates the mean
/// into `channels` input channels.
pub fn adapt_input_channels(kernel: &Tensor, channels: usize) -> Result<Tensor> {
    let s = kernel.shape();
    if s.len() != 4 || s[1] == 0 {
        return Err(Error::dim(format!("expected an OIHW kernel, got {:?}", s)));
    }
    let (o, i, hw) = (s[0], s[1], s[2] * s[3]);
    let src = kernel.data();
    let mut out = Vec::with_capacity(o * channels * hw);
    for oc in 0..o {
        let mean: Vec<f64> = (0..hw)
            .map(|p| (0..i).map(|ic| src[(oc * i + ic) * hw + p]).sum::<f64>() / i as f64)
            .collect();
        for _ in 0..channels {
            out.extend_from_slice(&mean);
        }
    }
    Tensor::new(&[o, channels, s[2], s[3]], out)
}

/// Stacks sample payloads into a `b x 2 x t x D` array.
pub fn batch_tensor(samples: &[CsiSample], shape: SampleShape) -> Result<Tensor> {
    if let Some(s) = samples.iter().find(|s| s.shape != shape) {
        return Err(Error::dim(format!(
            "sample shaped {:?}, model built for {:?}",
            s.shape, shape
        )));
    }
    let rows: Vec<&[f64]> = samples.iter().map(|s| s.data.as_slice()).collect();
    payload_tensor(&rows, shape)
}

/// Stacks raw payload rows (samples or templates) into a `b x 2 x t x D` array.
pub fn payload_tensor(rows: &[&[f64]], shape: SampleShape) -> Result<Tensor> {
    Tensor::stack(&shape.dims(), rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(shape: SampleShape, seed: u64) -> (Encoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = EncoderConfig {
            base_channels: Some(4),
            d1: Some(6),
            ..Default::default()
        };
        let enc = Encoder::build(&cfg, shape, &mut store, &mut rng).unwrap();
        (enc, store)
    }

    fn sample(shape: SampleShape, seed: u64) -> CsiSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CsiSample {
            data: (0..shape.payload_len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
            shape,
            label: 0,
            domain: 0,
            session: 0,
            start_ms: 0,
        }
    }

    #[test]
    fn default_tiny_size_and_output_shape() {
        let shape = SampleShape::new(32, 16);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::build(&EncoderConfig::default(), shape, &mut store, &mut rng).unwrap();
        let n = store.numel();
        assert!((30_000..70_000).contains(&n), "tiny encoder has {n} parameters");
        let batch: Vec<_> = (0..4).map(|i| sample(shape, i)).collect();
        let z = enc.encode(&store, &batch).unwrap();
        assert_eq!(z.shape(), &[4, 64]);
        assert!(z.is_finite());
    }

    #[test]
    fn duplicate_samples_embed_identically() {
        let shape = SampleShape::new(8, 6);
        let (enc, store) = tiny(shape, 1);
        let s = sample(shape, 3);
        let z = enc.encode(&store, &[s.clone(), sample(shape, 4), s]).unwrap();
        assert_eq!(z.row(0), z.row(2));
    }

    #[test]
    fn wrong_shape_is_a_dimension_error() {
        let (enc, store) = tiny(SampleShape::new(8, 6), 1);
        let other = sample(SampleShape::new(8, 5), 0);
        assert!(matches!(enc.encode(&store, &[other]), Err(Error::Dimension(_))));
    }

    #[test]
    fn resnet18_accepts_two_channels() {
        let shape = SampleShape::new(16, 8);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = EncoderConfig {
            variant: EncoderVariant::PaperResnet18,
            base_channels: Some(4),
            ..Default::default()
        };
        let enc = Encoder::build(&cfg, shape, &mut store, &mut rng).unwrap();
        let stem = store.get(store.find("encoder.stem.w").unwrap());
        assert_eq!(stem.shape(), &[4, 2, 7, 7]);
        let z = enc.encode(&store, &[sample(shape, 0), sample(shape, 1)]).unwrap();
        assert_eq!(z.shape(), &[2, 512]);
    }

    #[test]
    fn three_channel_kernel_is_averaged_and_replicated() {
        // one output channel, 1x1 taps: inputs (1, 2, 6) average to 3
        let k = Tensor::new(&[1, 3, 1, 1], vec![1.0, 2.0, 6.0]).unwrap();
        let a = adapt_input_channels(&k, 2).unwrap();
        assert_eq!(a.shape(), &[1, 2, 1, 1]);
        assert_eq!(a.data(), &[3.0, 3.0]);
    }

    #[test]
    fn import_adapts_stem_and_copies_rest() {
        let shape = SampleShape::new(8, 6);
        let (enc, mut store) = tiny(shape, 1);
        let mut named = BTreeMap::new();
        named.insert("encoder.stem.w".to_string(), Tensor::full(&[4, 3, 3, 3], 0.25));
        named.insert("encoder.fc.b".to_string(), Tensor::full(&[6], -1.0));
        named.insert("unrelated".to_string(), Tensor::zeros(&[1]));
        assert_eq!(enc.import_weights(&mut store, &named).unwrap(), 2);
        let stem = store.get(store.find("encoder.stem.w").unwrap());
        assert_eq!(stem.shape(), &[4, 2, 3, 3]);
        assert!(stem.data().iter().all(|&v| v == 0.25));
        assert!(store.get(store.find("encoder.fc.b").unwrap()).data().iter().all(|&v| v == -1.0));
    }

    /// Central differences of a scalar readout along random parameter directions.
    #[test]
    fn gradient_matches_finite_differences() {
        let shape = SampleShape::new(8, 6);
        let (enc, store) = tiny(shape, 7);
        let batch: Vec<_> = (0..3).map(|i| sample(shape, 10 + i)).collect();
        let x = batch_tensor(&batch, shape).unwrap();
        let readout = Tensor::new(&[3, 6], (0..18).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect()).unwrap();
        let loss = |store: &ParamStore| -> (f64, Vec<(ParamId, Tensor)>) {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let z = enc.forward(&mut g, store, xv).unwrap();
            let r = g.constant(readout.clone());
            let p = g.mul(z, r).unwrap();
            let s = g.sum(p);
            let grads = g.backward(s).unwrap();
            (g.value(s).item(), g.param_grads(&grads))
        };
        let (_, grads) = loss(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let h = 1e-6; // small enough that no ReLU changes side inside the stencil
        for _ in 0..10 {
            let dir: Vec<Tensor> = store
                .iter()
                .map(|p| noise(&p.value, &mut rng))
                .collect();
            let analytic: f64 = grads
                .iter()
                .map(|(id, g)| g.data().iter().zip(dir[id.index()].data()).map(|(a, b)| a * b).sum::<f64>())
                .sum();
            let shifted = |sign: f64| {
                let mut s = store.clone();
                for id in store.ids() {
                    let v = s.get_mut(id).data_mut();
                    for (a, d) in v.iter_mut().zip(dir[id.index()].data()) {
                        *a += sign * h * d;
                    }
                }
                loss(&s).0
            };
            let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-8);
            assert!(rel < 1e-3, "fd {fd} vs analytic {analytic} (rel {rel})");
        }
    }

    fn noise(t: &Tensor, rng: &mut impl rand::Rng) -> Tensor {
        Tensor::new(t.shape(), (0..t.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }
}
