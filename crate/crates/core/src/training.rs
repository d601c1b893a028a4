//! Scenario training: alternating comparative and template steps,
//! pre-train / fine-tune, checkpoints and the run-directory layout.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::autodiff::{Graph, Var};
use crate::config::{LrSchedule, Scenario, ScenarioConfig, TemplateMethod};
use crate::data::{split_scenario, AmplitudeNormalizer, CsiSample, SampleShape};
use crate::encoder::payload_tensor;
use crate::error::{Error, Result};
use crate::losses::{comparative_loss_graph, mk_mmd_graph, template_loss_graph};
use crate::model::CrossFiNet;
use crate::params::{Adam, AdamConfig, ParamStore};
use crate::templates::{
    generate_templates_indomain, generate_templates_zeroshot, plain_average_templates, random_sample_templates,
    sample_pool, select_source_templates, templates_from_support, weighted_templates_graph, TemplateSet,
};

pub const CHECKPOINT_KIND: &str = "checkpoint";

/// Test split wrapper that counts every labeled read.
#[derive(Debug, Default)]
pub struct AuditedSplit {
    samples: Vec<CsiSample>,
    labeled_reads: AtomicUsize,
    unlabeled_reads: AtomicUsize,
}

impl AuditedSplit {
    pub fn new(samples: Vec<CsiSample>) -> Self {
        AuditedSplit {
            samples,
            labeled_reads: AtomicUsize::new(0),
            unlabeled_reads: AtomicUsize::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Payloads only.
    pub fn unlabeled(&self) -> Vec<&[f64]> {
        self.unlabeled_reads.fetch_add(1, Ordering::SeqCst);
        self.samples.iter().map(|s| s.data.as_slice()).collect()
    }

    /// Full samples including labels; every call is recorded.
    pub fn labeled(&self) -> &[CsiSample] {
        self.labeled_reads.fetch_add(1, Ordering::SeqCst);
        &self.samples
    }

    pub fn labeled_reads(&self) -> usize {
        self.labeled_reads.load(Ordering::SeqCst)
    }

    pub fn unlabeled_reads(&self) -> usize {
        self.unlabeled_reads.load(Ordering::SeqCst)
    }
}

/// Normalized splits ready for training.
#[derive(Debug)]
pub struct PreparedData {
    pub train: Vec<CsiSample>,
    pub support: Vec<CsiSample>,
    pub test: AuditedSplit,
    pub classes: usize,
    pub shape: SampleShape,
    pub normalizer: AmplitudeNormalizer,
}

impl PreparedData {
    pub fn view(&self) -> TrainData<'_> {
        TrainData {
            train: &self.train,
            support: &self.support,
            test: &self.test,
            classes: self.classes,
            shape: self.shape,
        }
    }
}

/// Splits `samples` for the scenario and normalizes amplitudes with
/// statistics fitted on the training split alone.
pub fn prepare(samples: &[CsiSample], config: &ScenarioConfig, classes: usize) -> Result<PreparedData> {
    let shape = samples
        .first()
        .map(|s| s.shape)
        .ok_or_else(|| Error::Data("no samples".into()))?;
    let mut splits = split_scenario(samples, config)?;
    if splits.train.is_empty() {
        return Err(Error::config("scenario", "training split is empty"));
    }
    let normalizer = AmplitudeNormalizer::fit(&splits.train)?;
    normalizer.apply_all(&mut splits.train)?;
    normalizer.apply_all(&mut splits.support)?;
    normalizer.apply_all(&mut splits.test)?;
    Ok(PreparedData {
        train: splits.train,
        support: splits.support,
        test: AuditedSplit::new(splits.test),
        classes,
        shape,
        normalizer,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a [CsiSample],
    pub support: &'a [CsiSample],
    pub test: &'a AuditedSplit,
    pub classes: usize,
    pub shape: SampleShape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepKind {
    Comparative,
    Template,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub phase: Phase,
    pub kind: StepKind,
    pub loss: f64,
    /// Unweighted MK-MMD term when it was part of the step.
    pub mmd: Option<f64>,
}

/// ChaCha8 position, enough to resume the exact stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos_hi: u64,
    word_pos_lo: u64,
}

mod rng_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(rng: &ChaCha8Rng, s: S) -> std::result::Result<S::Ok, S::Error> {
        let pos = rng.get_word_pos();
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<ChaCha8Rng, D::Error> {
        let st = RngState::deserialize(d)?;
        let mut rng = ChaCha8Rng::from_seed(st.seed);
        rng.set_stream(st.stream);
        rng.set_word_pos(((st.word_pos_hi as u128) << 64) | st.word_pos_lo as u128);
        Ok(rng)
    }
}

/// Everything needed to continue a run bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub config: ScenarioConfig,
    pub store: ParamStore,
    pub net: CrossFiNet,
    pub adam: Adam,
    /// Completed iterations (one comparative plus one template step each).
    pub iteration: u64,
    pub comparative_steps: u64,
    pub template_steps: u64,
    pub skipped_template_steps: u64,
    pub finetune_steps: u64,
    /// Templates of the most recent template step.
    pub templates: Option<TemplateSet>,
    #[serde(with = "rng_serde")]
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: &ScenarioConfig, shape: SampleShape) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let net = CrossFiNet::build(config, shape, &mut store, &mut rng)?;
        let adam = Adam::new(
            AdamConfig {
                weight_decay: config.weight_decay,
                ..Default::default()
            },
            &store,
        );
        Ok(TrainState {
            config: config.clone(),
            store,
            net,
            adam,
            iteration: 0,
            comparative_steps: 0,
            template_steps: 0,
            skipped_template_steps: 0,
            finetune_steps: 0,
            templates: None,
            rng,
        })
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        archive::save(path, CHECKPOINT_KIND, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        archive::load(path, CHECKPOINT_KIND)
    }
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    state.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    TrainState::load(path)
}

/// Iteration budget of each phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    pub iters_per_epoch: u64,
    pub pretrain: u64,
    pub finetune_iters_per_epoch: u64,
    pub finetune: u64,
}

impl Schedule {
    pub fn new(config: &ScenarioConfig, data: &TrainData<'_>) -> Self {
        let per_epoch = |n: usize| n.div_ceil(config.batch_size).max(1) as u64;
        let iters_per_epoch = per_epoch(data.train.len());
        let finetune_iters_per_epoch = per_epoch(data.support.len());
        let finetune = if config.scenario == Scenario::KShot && config.k > 1 {
            config.finetune_epochs() as u64 * finetune_iters_per_epoch
        } else {
            0
        };
        Schedule {
            iters_per_epoch,
            pretrain: config.epochs as u64 * iters_per_epoch,
            finetune_iters_per_epoch,
            finetune,
        }
    }

    pub fn total(&self) -> u64 {
        self.pretrain + self.finetune
    }

    /// Phase and epoch of an iteration.
    pub fn locate(&self, iteration: u64) -> (Phase, u64) {
        if iteration < self.pretrain {
            (Phase::Pretrain, iteration / self.iters_per_epoch)
        } else {
            (Phase::Finetune, (iteration - self.pretrain) / self.finetune_iters_per_epoch)
        }
    }
}

pub fn learning_rate(config: &ScenarioConfig, epoch: u64) -> f64 {
    match config.lr_schedule {
        LrSchedule::Constant => config.learning_rate,
        LrSchedule::Exponential { gamma } => config.learning_rate * gamma.powi(epoch as i32),
    }
}

fn rows_of<'a>(samples: &[&'a CsiSample]) -> Vec<&'a [f64]> {
    samples.iter().map(|s| s.data.as_slice()).collect()
}

fn draw<'a, T>(items: &'a [T], n: usize, rng: &mut ChaCha8Rng) -> Vec<&'a T> {
    sample_pool(items.len(), n, rng).into_iter().map(|i| &items[i]).collect()
}

/// Adds `mmd_weight * MK-MMD(emb, target)` when a target batch is given.
fn with_mmd(
    g: &mut Graph,
    state: &TrainState,
    loss: Var,
    emb: Var,
    target: Option<&[&[f64]]>,
) -> Result<(Var, Option<f64>)> {
    let Some(rows) = target else {
        return Ok((loss, None));
    };
    let xt = g.constant(payload_tensor(rows, state.net.encoder.shape())?);
    let et = state.net.encoder.forward(g, &state.store, xt)?;
    let m = mk_mmd_graph(g, emb, et, &state.config.loss)?;
    let value = g.value(m).item();
    let wm = g.scale(m, state.config.loss.mmd_weight);
    Ok((g.add(loss, wm)?, Some(value)))
}

fn apply(g: &Graph, state: &mut TrainState, loss: Var, lr: f64) -> Result<f64> {
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Precondition(format!("non-finite loss {value}")));
    }
    let grads = g.backward(loss)?;
    let pg = g.param_grads(&grads);
    state.adam.step(&mut state.store, &pg, lr);
    Ok(value)
}

/// One update on the pairwise loss of `batch` against itself (plus MK-MMD
/// against `mmd_target`). Returns `(loss, mmd)`.
pub fn step_comparative(
    state: &mut TrainState,
    batch: &[&CsiSample],
    mmd_target: Option<&[&[f64]]>,
    lr: f64,
) -> Result<(f64, Option<f64>)> {
    let mut g = Graph::new();
    let x = g.constant(payload_tensor(&rows_of(batch), state.net.encoder.shape())?);
    let e = state.net.encoder.forward(&mut g, &state.store, x)?;
    let s = state.net.score(&mut g, &state.store, e, e)?;
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let loss = comparative_loss_graph(&mut g, s, &labels, &labels, state.config.loss.alpha)?;
    let (loss, mmd) = with_mmd(&mut g, state, loss, e, mmd_target)?;
    let value = apply(&g, state, loss, lr)?;
    state.comparative_steps += 1;
    Ok((value, mmd))
}

/// One update on the batch-vs-template loss. Templates are rebuilt from
/// `pool` first: Weight-Net weighted averages, or in zero-shot the
/// highest-scoring pool member per class. `None` when a batch class has no
/// template (the step is skipped).
pub fn step_template(
    state: &mut TrainState,
    batch: &[&CsiSample],
    pool: &[&CsiSample],
    classes: usize,
    mmd_target: Option<&[&[f64]]>,
    lr: f64,
) -> Result<Option<(f64, Option<f64>)>> {
    let shape = state.net.encoder.shape();
    let mut g = Graph::new();
    let (covered, t_payload) = if state.config.scenario == Scenario::ZeroShot {
        let set = select_source_templates(pool, classes, &state.net, &state.net.weightnet, &state.store)?;
        let covered = set.covered_classes();
        let rows: Vec<&[f64]> = covered.iter().map(|&c| set.templates[c].as_deref().expect("covered")).collect();
        let t = g.constant(payload_tensor(&rows, shape)?);
        state.templates = Some(set);
        (covered, t)
    } else {
        let gt = weighted_templates_graph(
            &mut g,
            &state.net,
            &state.net.weightnet,
            &state.store,
            pool,
            state.config.detach_templates,
        )?;
        let mut set = TemplateSet::empty(classes, shape);
        let tv = g.value(gt.templates);
        for (r, &c) in gt.classes.iter().enumerate() {
            if c < classes {
                set.set(c, tv.row(r).to_vec(), crate::templates::Provenance::WeightedAverage);
            }
        }
        state.templates = Some(set);
        let [c, t, d] = shape.dims();
        let n = gt.classes.len();
        (gt.classes, g.reshape(gt.templates, &[n, c, t, d])?)
    };
    let mut mapped = Vec::with_capacity(batch.len());
    for s in batch {
        match covered.binary_search(&s.label) {
            Ok(i) => mapped.push(i),
            Err(_) => {
                log::warn!("class {} has no template in this pool; template step skipped", s.label);
                state.skipped_template_steps += 1;
                return Ok(None);
            }
        }
    }
    let et = state.net.encoder.forward(&mut g, &state.store, t_payload)?;
    let x = g.constant(payload_tensor(&rows_of(batch), shape)?);
    let eb = state.net.encoder.forward(&mut g, &state.store, x)?;
    let s = state.net.score(&mut g, &state.store, eb, et)?;
    let loss = template_loss_graph(&mut g, s, &mapped, state.config.loss.alpha)?;
    let (loss, mmd) = with_mmd(&mut g, state, loss, eb, mmd_target)?;
    let value = apply(&g, state, loss, lr)?;
    state.template_steps += 1;
    Ok(Some((value, mmd)))
}

/// Payloads MK-MMD aligns the training batches with, if any.
fn mmd_targets<'a>(config: &ScenarioConfig, data: &TrainData<'a>) -> Option<Vec<&'a [f64]>> {
    if !config.use_mmd {
        return None;
    }
    let rows: Vec<&'a [f64]> = match config.scenario {
        Scenario::ZeroShot if config.use_unlabeled_target => data.test.unlabeled(),
        Scenario::ZeroShot => {
            log::warn!("zero-shot MK-MMD needs use_unlabeled_target; disabled");
            return None;
        }
        Scenario::KShot | Scenario::NewClass => data.support.iter().map(|s| s.data.as_slice()).collect(),
        Scenario::InDomain => {
            log::warn!("MK-MMD has no target domain in the in-domain scenario; disabled");
            return None;
        }
    };
    if rows.is_empty() {
        log::warn!("MK-MMD target set is empty; disabled");
        return None;
    }
    if config.scenario != Scenario::ZeroShot {
        if let Some(msg) = mmd_label_caution(data.train, data.support) {
            log::warn!("{msg}");
        }
    }
    Some(rows)
}

/// MK-MMD aligns marginals, which only helps when both sides carry the same
/// classes. Returns a caution when the label sets differ.
pub fn mmd_label_caution(source: &[CsiSample], target: &[CsiSample]) -> Option<String> {
    let labels = |xs: &[CsiSample]| xs.iter().map(|s| s.label).collect::<std::collections::BTreeSet<_>>();
    let (a, b) = (labels(source), labels(target));
    (a != b).then(|| format!("MK-MMD with differing label sets (source {a:?}, target {b:?}); alignment may hurt"))
}

fn check_scenario(config: &ScenarioConfig, data: &TrainData<'_>) -> Result<()> {
    if data.train.is_empty() {
        return Err(Error::config("scenario", "training split is empty"));
    }
    if config.scenario.needs_shots() && data.support.is_empty() {
        return Err(Error::config("scenario", format!("{} needs a support set", config.scenario)));
    }
    if config.scenario == Scenario::ZeroShot && data.test.is_empty() {
        return Err(Error::config("scenario", "zero-shot needs unlabeled target data"));
    }
    if let Some(s) = data.train.iter().chain(data.support).find(|s| s.label >= data.classes) {
        return Err(Error::LabelOutOfRange {
            label: s.label,
            classes: data.classes,
        });
    }
    Ok(())
}

/// Runs iterations from `state.iteration` up to `until` (default: the end of the schedule).
pub fn run(state: &mut TrainState, data: &TrainData<'_>, until: Option<u64>, log: &mut Vec<LossRecord>) -> Result<()> {
    let config = state.config.clone();
    check_scenario(&config, data)?;
    let reads = data.test.labeled_reads();
    let schedule = Schedule::new(&config, data);
    let end = until.map_or(schedule.total(), |u| u.min(schedule.total()));
    let targets = mmd_targets(&config, data);
    let pool_size = config.pool_size(data.classes);
    let all_support: Vec<&CsiSample> = data.support.iter().collect();
    while state.iteration < end {
        let (phase, epoch) = schedule.locate(state.iteration);
        let lr = learning_rate(&config, epoch);
        let source = match phase {
            Phase::Pretrain => data.train,
            Phase::Finetune => data.support,
        };
        let target_batch: Option<Vec<&[f64]>> = match (&targets, phase) {
            (Some(t), Phase::Pretrain) => Some(draw(t, config.batch_size, &mut state.rng).into_iter().copied().collect()),
            _ => None,
        };
        let batch = draw(source, config.batch_size, &mut state.rng);
        let (loss, mmd) = step_comparative(state, &batch, target_batch.as_deref(), lr)?;
        let step = state.comparative_steps + state.template_steps;
        log.push(LossRecord {
            step,
            phase,
            kind: StepKind::Comparative,
            loss,
            mmd,
        });
        let batch = draw(source, config.batch_size, &mut state.rng);
        let pool = match phase {
            Phase::Pretrain => draw(data.train, pool_size, &mut state.rng),
            Phase::Finetune => all_support.clone(),
        };
        if let Some((loss, mmd)) = step_template(state, &batch, &pool, data.classes, target_batch.as_deref(), lr)? {
            log.push(LossRecord {
                step: state.comparative_steps + state.template_steps,
                phase,
                kind: StepKind::Template,
                loss,
                mmd,
            });
        }
        if phase == Phase::Finetune {
            state.finetune_steps += 2;
        }
        state.iteration += 1;
    }
    if data.test.labeled_reads() != reads {
        return Err(Error::Precondition("training read labeled test data".into()));
    }
    Ok(())
}

/// Inference templates for the scenario from the trained state.
pub fn final_templates(state: &mut TrainState, data: &TrainData<'_>) -> Result<TemplateSet> {
    let config = state.config.clone();
    let n = data.classes;
    let shape = data.shape;
    let k = config.pool_size(n);
    let from_pool = |state: &mut TrainState, pool: &[CsiSample], k: usize| -> Result<TemplateSet> {
        let TrainState { net, store, rng, .. } = state;
        Ok(match config.template_method {
            TemplateMethod::WeightNet => generate_templates_indomain(pool, k, n, &*net, &net.weightnet, store, rng)?,
            TemplateMethod::PlainAverage => plain_average_templates(pool, k, n, shape, rng),
            TemplateMethod::RandomSample => random_sample_templates(pool, n, shape, rng),
        })
    };
    let reads = data.test.labeled_reads();
    let set = match config.scenario {
        Scenario::InDomain => from_pool(state, data.train, k)?,
        Scenario::KShot => match config.template_method {
            TemplateMethod::WeightNet => templates_from_support(data.support, n, &state.net, &state.net.weightnet, &state.store)?,
            _ => from_pool(state, data.support, data.support.len())?,
        },
        Scenario::ZeroShot => {
            if config.template_method != TemplateMethod::WeightNet {
                log::warn!("zero-shot always selects templates with Weight-Net; template_method ignored");
            }
            let test = data.test.unlabeled();
            let TrainState { net, store, rng, .. } = state;
            generate_templates_zeroshot(data.train, &test, k, n, &*net, &net.weightnet, store, rng)?.1
        }
        Scenario::NewClass => {
            let mut set = from_pool(state, data.train, k)?;
            let new = templates_from_support(data.support, n, &state.net, &state.net.weightnet, &state.store)?;
            for c in new.covered_classes() {
                set.templates[c] = new.templates[c].clone();
                set.provenance[c] = new.provenance[c];
            }
            set
        }
    };
    if data.test.labeled_reads() != reads {
        return Err(Error::Precondition("template generation read labeled test data".into()));
    }
    Ok(set)
}

pub struct TrainOutput {
    pub state: TrainState,
    pub templates: TemplateSet,
    pub log: Vec<LossRecord>,
}

/// Full scenario run from a fresh state.
pub fn train(config: &ScenarioConfig, data: &TrainData<'_>) -> Result<TrainOutput> {
    let mut state = TrainState::new(config, data.shape)?;
    let mut log = Vec::new();
    run(&mut state, data, None, &mut log)?;
    let templates = final_templates(&mut state, data)?;
    Ok(TrainOutput { state, templates, log })
}

pub fn write_loss_log(path: &Path, log: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in log {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
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

/// Files of one run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn create(path: &Path) -> Result<Self> {
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        Ok(RunDir(path.to_path_buf()))
    }

    pub fn open(path: &Path) -> Result<Self> {
        if !path.is_dir() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "run directory not found"),
            ));
        }
        Ok(RunDir(path.to_path_buf()))
    }

    pub fn config(&self) -> PathBuf {
        self.0.join("config.toml")
    }

    pub fn manifest(&self) -> PathBuf {
        self.0.join("run.json")
    }

    pub fn loss_log(&self) -> PathBuf {
        self.0.join("loss_log.csv")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.0.join("checkpoint.archive")
    }

    pub fn templates(&self) -> PathBuf {
        self.0.join("templates.archive")
    }

    pub fn metrics(&self) -> PathBuf {
        self.0.join("metrics.json")
    }

    pub fn write_config(&self, config: &ScenarioConfig) -> Result<()> {
        let p = self.config();
        fs::write(&p, config.to_toml()).map_err(|e| Error::io(&p, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_domain, windows_from_sessions, SyntheticDomainSpec};
    use crate::encoder::EncoderConfig;

    fn toy_samples() -> Vec<CsiSample> {
        let mut samples = Vec::new();
        for domain in 0..2 {
            let spec = SyntheticDomainSpec {
                packets_per_sample: 16,
                stride: 8,
                subcarriers: 8,
                ..SyntheticDomainSpec::new(domain, 3)
            };
            let sessions = synthesize_domain(&spec, 6, 40 + domain as u64).unwrap();
            samples.extend(windows_from_sessions(&sessions, spec.shape(), spec.stride).unwrap());
        }
        samples
    }

    fn toy_config(scenario: Scenario) -> ScenarioConfig {
        ScenarioConfig {
            scenario,
            k: 2,
            epochs: 1,
            batch_size: 8,
            pool_size: Some(6),
            learning_rate: 1e-3,
            encoder: EncoderConfig {
                base_channels: Some(4),
                d1: Some(8),
                ..Default::default()
            },
            head: crate::similarity::HeadConfig {
                heads: 2,
                d2: 4,
                temperature: 2.0,
            },
            ..Default::default()
        }
    }

    fn toy(scenario: Scenario) -> (ScenarioConfig, PreparedData) {
        let config = toy_config(scenario);
        let data = prepare(&toy_samples(), &config, 3).unwrap();
        (config, data)
    }

    fn params_equal(a: &ParamStore, b: &ParamStore) -> bool {
        a.iter().zip(b.iter()).all(|(x, y)| x.value.data() == y.value.data())
    }

    #[test]
    fn alternation_is_one_to_one() {
        let (cfg, data) = toy(Scenario::InDomain);
        let out = train(&cfg, &data.view()).unwrap();
        let s = &out.state;
        assert_eq!(s.comparative_steps, s.iteration);
        assert_eq!(s.template_steps + s.skipped_template_steps, s.iteration);
        assert_eq!(out.log.iter().filter(|r| r.kind == StepKind::Comparative).count() as u64, s.iteration);
        assert!(out.templates.is_complete());
        assert_eq!(data.test.labeled_reads(), 0);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (mut cfg, data) = toy(Scenario::InDomain);
        cfg.learning_rate = 0.0;
        let before = TrainState::new(&cfg, data.shape).unwrap();
        let out = train(&cfg, &data.view()).unwrap();
        assert!(params_equal(&before.store, &out.state.store));
    }

    #[test]
    fn template_step_reaches_weight_net() {
        let (cfg, data) = toy(Scenario::InDomain);
        let mut state = TrainState::new(&cfg, data.shape).unwrap();
        let before = state.store.clone();
        let batch: Vec<&CsiSample> = data.train.iter().take(6).collect();
        let pool: Vec<&CsiSample> = data.train.iter().step_by(3).take(9).collect();
        step_template(&mut state, &batch, &pool, 3, None, 1e-3).unwrap().unwrap();
        let moved = |prefix: &str| {
            before
                .iter()
                .zip(state.store.iter())
                .filter(|(a, _)| a.name.starts_with(prefix))
                .any(|(a, b)| a.value.data() != b.value.data())
        };
        assert!(moved("weightnet."));
        assert!(moved("encoder."));
    }

    #[test]
    fn template_path_gradient_is_live() {
        let (cfg, data) = toy(Scenario::InDomain);
        let batch: Vec<&CsiSample> = data.train.iter().take(6).collect();
        let pool: Vec<&CsiSample> = data.train.iter().step_by(3).take(9).collect();
        let update = |detach: bool| {
            let mut c = cfg.clone();
            c.detach_templates = detach;
            let mut state = TrainState::new(&c, data.shape).unwrap();
            step_template(&mut state, &batch, &pool, 3, None, 1e-3).unwrap().unwrap();
            state.store
        };
        let (live, cut) = (update(false), update(true));
        let enc_differs = live
            .iter()
            .zip(cut.iter())
            .filter(|(a, _)| a.name.starts_with("encoder."))
            .any(|(a, b)| a.value.data() != b.value.data());
        assert!(enc_differs);
        let wn_still = cut
            .iter()
            .zip(TrainState::new(&cfg, data.shape).unwrap().store.iter())
            .filter(|(a, _)| a.name.starts_with("weightnet."))
            .all(|(a, b)| a.value.data() == b.value.data());
        assert!(wn_still, "detached templates must not update Weight-Net");
    }

    #[test]
    fn one_shot_skips_finetuning() {
        let cfg = ScenarioConfig {
            k: 1,
            ..toy_config(Scenario::KShot)
        };
        let data = prepare(&toy_samples(), &cfg, 3).unwrap();
        let out = train(&cfg, &data.view()).unwrap();
        assert_eq!(out.state.finetune_steps, 0);
        assert_eq!(out.state.iteration, Schedule::new(&cfg, &data.view()).pretrain);
        assert!(out.log.iter().all(|r| r.phase == Phase::Pretrain));
    }

    #[test]
    fn k_shot_finetunes_on_support() {
        let (cfg, data) = toy(Scenario::KShot);
        let out = train(&cfg, &data.view()).unwrap();
        let sched = Schedule::new(&cfg, &data.view());
        assert!(sched.finetune > 0);
        assert_eq!(out.state.finetune_steps, 2 * sched.finetune);
        for s in &data.support {
            assert!(out.templates.templates[s.label].is_some());
        }
    }

    #[test]
    fn zero_shot_with_mmd_logs_the_term_and_reads_no_labels() {
        let (mut cfg, data) = toy(Scenario::ZeroShot);
        cfg.use_mmd = true;
        cfg.use_unlabeled_target = true;
        let out = train(&cfg, &data.view()).unwrap();
        assert!(out.log.iter().all(|r| r.mmd.is_some()));
        assert_eq!(data.test.labeled_reads(), 0);
        assert!(data.test.unlabeled_reads() > 0);
        assert!(out.templates.classes() == 3);
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted_run() {
        let (mut cfg, data) = toy(Scenario::InDomain);
        cfg.epochs = 2;
        let view = data.view();
        let full = {
            let mut s = TrainState::new(&cfg, data.shape).unwrap();
            run(&mut s, &view, None, &mut Vec::new()).unwrap();
            s
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.archive");
        let mut s = TrainState::new(&cfg, data.shape).unwrap();
        run(&mut s, &view, Some(3), &mut Vec::new()).unwrap();
        assert_eq!(s.iteration, 3);
        s.save(&p).unwrap();
        let bytes = fs::read(&p).unwrap();
        let mut resumed = TrainState::load(&p).unwrap();
        resumed.save(&p).unwrap();
        assert_eq!(fs::read(&p).unwrap(), bytes);
        run(&mut resumed, &view, None, &mut Vec::new()).unwrap();
        assert!(params_equal(&resumed.store, &full.store));
        assert_eq!(resumed.iteration, full.iteration);
    }

    #[test]
    fn loss_log_round_trips() {
        let log = vec![
            LossRecord {
                step: 1,
                phase: Phase::Pretrain,
                kind: StepKind::Comparative,
                loss: 3.5,
                mmd: None,
            },
            LossRecord {
                step: 2,
                phase: Phase::Finetune,
                kind: StepKind::Template,
                loss: 0.25,
                mmd: Some(0.125),
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.csv");
        write_loss_log(&p, &log).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("step,phase,kind,loss,mmd\n"));
        assert_eq!(read_loss_log(&p).unwrap(), log);
    }

    #[test]
    fn exponential_schedule() {
        let cfg = ScenarioConfig {
            learning_rate: 1.0,
            lr_schedule: LrSchedule::Exponential { gamma: 0.5 },
            ..Default::default()
        };
        assert_eq!(learning_rate(&cfg, 0), 1.0);
        assert_eq!(learning_rate(&cfg, 3), 0.125);
    }

    #[test]
    fn mmd_caution_only_for_differing_label_sets() {
        let (_, kshot) = toy(Scenario::KShot);
        assert!(mmd_label_caution(&kshot.train, &kshot.support).is_none());
        let (_, newc) = toy(Scenario::NewClass);
        let msg = mmd_label_caution(&newc.train, &newc.support).unwrap();
        assert!(msg.contains("target {2}"), "{msg}");
    }
}
