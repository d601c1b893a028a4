//! Template-based inference, metrics reports, ablation grids and the plain-classifier baseline.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::config::{Metric, Scenario, ScenarioConfig, TemplateMethod};
use crate::data::CsiSample;
use crate::encoder::{batch_tensor, Encoder};
use crate::error::{Error, Result};
use crate::model::CrossFiNet;
use crate::params::{he_normal, Adam, AdamConfig, ParamStore};
use crate::similarity::SimilarityMatrix;
use crate::templates::{argmax, sample_pool, TemplateSet};
use crate::tensor::Tensor;
use crate::training::{learning_rate, prepare, train, TrainData, TrainOutput};

/// Rows classified per forward pass.
const EVAL_CHUNK: usize = 128;

/// Row-wise argmax; ties go to the lowest class index.
pub fn classify_matrix(s: &SimilarityMatrix) -> Vec<usize> {
    (0..s.shape().0).map(|i| argmax(s.row(i)).0).collect()
}

/// `argmax_j S(sample, template_j)` per sample.
pub fn classify(net: &CrossFiNet, store: &ParamStore, samples: &[CsiSample], templates: &TemplateSet) -> Result<Vec<usize>> {
    templates.inference_rows()?;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let s = net.similarity_to_templates(store, chunk, templates)?;
        out.extend(classify_matrix(&s));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: Scenario,
    pub seed: u64,
    pub metric: Option<Metric>,
    pub template_method: Option<TemplateMethod>,
    pub accuracy: f64,
    /// `None` for classes absent from the test split.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub total: usize,
}

impl MetricsReport {
    pub fn from_predictions(truth: &[usize], predicted: &[usize], classes: usize, scenario: Scenario, seed: u64) -> Result<Self> {
        if truth.is_empty() {
            return Err(Error::Precondition("empty test split".into()));
        }
        if truth.len() != predicted.len() {
            return Err(Error::dim(format!("{} labels, {} predictions", truth.len(), predicted.len())));
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            for l in [t, p] {
                if l >= classes {
                    return Err(Error::LabelOutOfRange { label: l, classes });
                }
            }
            confusion[t][p] += 1;
        }
        let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[c] as f64 / n as f64)
            })
            .collect();
        Ok(MetricsReport {
            scenario,
            seed,
            metric: None,
            template_method: None,
            accuracy: correct as f64 / truth.len() as f64,
            per_class_accuracy,
            confusion,
            total: truth.len(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Classifies `test` against `templates` and summarizes.
pub fn evaluate(
    net: &CrossFiNet,
    store: &ParamStore,
    test: &[CsiSample],
    templates: &TemplateSet,
    config: &ScenarioConfig,
) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::Precondition("empty test split".into()));
    }
    let pred = classify(net, store, test, templates)?;
    let truth: Vec<usize> = test.iter().map(|s| s.label).collect();
    let mut r = MetricsReport::from_predictions(&truth, &pred, templates.classes(), config.scenario, config.seed)?;
    r.metric = Some(net.metric);
    r.template_method = Some(config.template_method);
    Ok(r)
}

/// Split, train and evaluate one config. The test split is read with labels
/// only after training has finished.
pub fn run_scenario(config: &ScenarioConfig, samples: &[CsiSample], classes: usize) -> Result<(TrainOutput, MetricsReport)> {
    let data = prepare(samples, config, classes)?;
    let out = train(config, &data.view())?;
    if data.test.labeled_reads() != 0 {
        return Err(Error::Precondition("training read labeled test data".into()));
    }
    let report = evaluate(&out.state.net, &out.state.store, data.test.labeled(), &out.templates, config)?;
    Ok((out, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub scenario: Scenario,
    /// Shots per class; meaningful for k-shot and new-class rows.
    pub k: usize,
    pub metric: Metric,
    pub template_method: TemplateMethod,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

/// Runs every config; a failing config becomes a row with `error` set.
pub fn run_ablation(grid: &[(String, ScenarioConfig)], samples: &[CsiSample], classes: usize) -> Vec<AblationRow> {
    grid.iter()
        .map(|(name, cfg)| {
            let result = run_scenario(cfg, samples, classes);
            if let Err(e) = &result {
                log::warn!("ablation row `{name}` failed: {e}");
            }
            AblationRow {
                name: name.clone(),
                scenario: cfg.scenario,
                k: cfg.k,
                metric: cfg.metric(),
                template_method: cfg.template_method,
                seed: cfg.seed,
                accuracy: result.as_ref().ok().map(|(_, r)| r.accuracy),
                error: result.err().map(|e| e.to_string()),
            }
        })
        .collect()
}

/// Metric × template-method grid around a base config.
pub fn default_grid(base: &ScenarioConfig) -> Vec<(String, ScenarioConfig)> {
    let mut grid = Vec::new();
    for metric in [Metric::Attention, Metric::Gaussian, Metric::Cosine] {
        grid.push((
            format!("metric-{metric}"),
            ScenarioConfig {
                metric: Some(metric),
                template_method: TemplateMethod::WeightNet,
                ..base.clone()
            },
        ));
    }
    for method in [TemplateMethod::PlainAverage, TemplateMethod::RandomSample] {
        grid.push((
            format!("template-{method}"),
            ScenarioConfig {
                template_method: method,
                ..base.clone()
            },
        ));
    }
    grid
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_ablation_csv(path: &Path) -> Result<Vec<AblationRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    r.deserialize()
        .map(|rec| {
            rec.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
        })
        .collect()
}

/// Encoder plus a linear softmax head.
pub struct LinearClassifier {
    pub store: ParamStore,
    pub encoder: Encoder,
    w: crate::params::ParamId,
    b: crate::params::ParamId,
}

impl LinearClassifier {
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, samples: &[&CsiSample]) -> Result<crate::autodiff::Var> {
        let owned: Vec<CsiSample> = samples.iter().map(|s| (*s).clone()).collect();
        let x = g.constant(batch_tensor(&owned, self.encoder.shape())?);
        let z = self.encoder.forward(g, store, x)?;
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let l = g.matmul(z, w)?;
        g.add_bias(l, b)
    }

    pub fn predict(&self, samples: &[CsiSample]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(EVAL_CHUNK) {
            let refs: Vec<&CsiSample> = chunk.iter().collect();
            let mut g = Graph::new();
            let l = self.logits(&mut g, &self.store, &refs)?;
            let t = g.value(l);
            out.extend((0..t.rows()).map(|i| argmax(t.row(i)).0));
        }
        Ok(out)
    }
}

/// Cross-entropy training of the same encoder with a linear head; the
/// comparison floor for cross-domain runs. Uses the config's encoder,
/// epochs, batch size, optimizer settings and seed.
pub fn train_baseline(config: &ScenarioConfig, data: &TrainData<'_>) -> Result<LinearClassifier> {
    if data.train.is_empty() {
        return Err(Error::config("scenario", "training split is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::new();
    let encoder = Encoder::build(&config.encoder, data.shape, &mut store, &mut rng)?;
    let d1 = encoder.d1();
    let n = data.classes;
    let w = store.add("classifier.w", he_normal(&[d1, n], d1, 1.0, &mut rng));
    let b = store.add("classifier.b", Tensor::zeros(&[n]));
    let mut model = LinearClassifier { store, encoder, w, b };
    let mut adam = Adam::new(
        AdamConfig {
            weight_decay: config.weight_decay,
            ..Default::default()
        },
        &model.store,
    );
    let per_epoch = data.train.len().div_ceil(config.batch_size).max(1);
    for epoch in 0..config.epochs {
        let lr = learning_rate(config, epoch as u64);
        for _ in 0..per_epoch {
            let batch: Vec<&CsiSample> = sample_pool(data.train.len(), config.batch_size, &mut rng)
                .into_iter()
                .map(|i| &data.train[i])
                .collect();
            let mut g = Graph::new();
            let logits = model.logits(&mut g, &model.store, &batch)?;
            let lp = g.log_softmax(logits)?;
            let mut onehot = vec![0.0; batch.len() * n];
            for (i, s) in batch.iter().enumerate() {
                onehot[i * n + s.label] = 1.0;
            }
            let oh = g.constant(Tensor::new(&[batch.len(), n], onehot)?);
            let picked = g.mul(lp, oh)?;
            let total = g.sum(picked);
            let loss = g.scale(total, -1.0 / batch.len() as f64);
            let grads = g.backward(loss)?;
            let pg = g.param_grads(&grads);
            adam.step(&mut model.store, &pg, lr);
        }
    }
    Ok(model)
}

/// Trains the baseline and evaluates it on the labeled test split.
pub fn baseline_classifier(config: &ScenarioConfig, data: &TrainData<'_>) -> Result<MetricsReport> {
    let model = train_baseline(config, data)?;
    let test = data.test.labeled();
    let pred = model.predict(test)?;
    let truth: Vec<usize> = test.iter().map(|s| s.label).collect();
    MetricsReport::from_predictions(&truth, &pred, data.classes, config.scenario, config.seed)
}
