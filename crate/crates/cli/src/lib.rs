//! Command-line front end: synthesis, conversion, training, evaluation, ablation and plots.

pub mod args;
pub mod manifest;
pub mod plot;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use crossfi::config::Scenario;
use crossfi::data::wigesture::{convert_tree, ConvertOptions};
use crossfi::data::{load_dataset, synthesize_domain, windows_from_sessions, write_dataset, CsiSample, DatasetManifest, Drift, SyntheticDomainSpec};
use crossfi::eval::{default_grid, evaluate, run_ablation, write_ablation_csv, AblationRow};
use crossfi::templates::TemplateSet;
use crossfi::training::{final_templates, prepare, read_loss_log, run, write_loss_log, RunDir, TrainState};
use crossfi::{ErrorKind, ScenarioConfig};
use serde::{Deserialize, Serialize};

use args::{AblateArgs, Cli, Command, ConvertArgs, EvalArgs, PlotArgs, ScenarioArgs, SynthArgs, TrainArgs};
use manifest::RunManifest;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

/// Exit status for an error: the first library error in the chain decides.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<crossfi::Error>() {
            return match e.kind() {
                ErrorKind::Config => EXIT_CONFIG,
                ErrorKind::Data => EXIT_DATA,
                ErrorKind::Runtime => EXIT_RUNTIME,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<toml::de::Error>() {
            return EXIT_DATA;
        }
    }
    EXIT_RUNTIME
}

pub fn run_cli(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(&cli, a),
        Command::ConvertWigesture(a) => cmd_convert(&cli, a),
        Command::Train(a) => cmd_train(&cli, a),
        Command::Eval(a) => cmd_eval(&cli, a),
        Command::Ablate(a) => cmd_ablate(&cli, a),
        Command::Plot(a) => cmd_plot(&cli, a),
    }
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| anyhow!(crossfi_config("out", "--out is required for this command")))
}

fn crossfi_config(field: &str, message: &str) -> crossfi::Error {
    crossfi::Error::Config {
        field: field.into(),
        message: message.into(),
    }
}

/// Creates `dir` and proves it is writable.
fn ensure_writable(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| crossfi::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"").map_err(|e| crossfi::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    fs::remove_file(&probe).ok();
    Ok(())
}

/// Domain list accepted by `synth --config`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub domain: Vec<SyntheticDomainSpec>,
}

fn synth_specs(cli: &Cli, a: &SynthArgs) -> Result<Vec<SyntheticDomainSpec>> {
    let mut specs = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let cfg: SynthConfig = toml::from_str(&text).map_err(|e| crossfi_config("config", e.message()))?;
            cfg.domain
        }
        None => {
            if a.domains == 0 || a.classes == 0 {
                bail!(crossfi_config("domains", "need at least one domain and one class"));
            }
            (0..a.domains).map(|d| SyntheticDomainSpec::new(d, a.classes)).collect()
        }
    };
    for s in &mut specs {
        if let Some(v) = a.noise_std {
            s.noise_std = v;
        }
        if let Some(v) = a.subcarriers {
            s.subcarriers = v;
        }
        if let Some(v) = a.packets {
            s.packets_per_sample = v;
        }
        if let Some(v) = a.stride {
            s.stride = v;
        }
        if let Some(v) = a.sample_rate {
            s.sample_rate = v;
        }
        if let Some(v) = a.n_paths {
            s.n_paths = v;
        }
        if let Some(v) = a.interference_rate {
            s.interference.rate_hz = v;
            if s.interference.packets == 0 {
                s.interference.packets = 8;
                s.interference.noise_std = 1.0;
            }
        }
        if a.no_drift {
            s.drift = Drift::default();
        }
        if cli.config.is_none() && (a.stride.is_some() || a.sample_rate.is_some()) {
            s.class_motion_profiles = SyntheticDomainSpec::default_profiles(a.classes, s.sample_rate, s.stride);
        }
        s.validate()?;
    }
    let first = &specs[0];
    let classes = first.class_motion_profiles.len();
    for s in &specs[1..] {
        if s.shape() != first.shape() || s.stride != first.stride || s.class_motion_profiles.len() != classes {
            bail!(crossfi_config("domain", "all domains must share shape, stride and class count"));
        }
    }
    Ok(specs)
}

fn cmd_synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let out = out_dir(cli)?;
    let specs = synth_specs(cli, a)?;
    ensure_writable(out)?;
    let seed = cli.seed.unwrap_or(0);
    RunManifest::new(out, cli.config.as_deref(), Some(seed), None)?.write(out)?;
    let mut sessions = Vec::new();
    for spec in &specs {
        sessions.extend(synthesize_domain(spec, a.per_class, seed)?);
    }
    let first = &specs[0];
    let manifest = DatasetManifest {
        subcarriers: first.subcarriers,
        packets_per_sample: first.packets_per_sample,
        stride: first.stride,
        sample_period_ms: Some((1000.0 / first.sample_rate).round() as u64),
        classes: (0..first.class_motion_profiles.len()).map(|c| format!("class{c}")).collect(),
        domains: specs.iter().map(|s| format!("domain{}", s.domain)).collect(),
        sessions: Vec::new(),
    };
    write_dataset(out, manifest, &sessions)?;
    log::info!("wrote {} sessions to {}", sessions.len(), out.display());
    Ok(())
}

fn cmd_convert(cli: &Cli, a: &ConvertArgs) -> Result<()> {
    let out = out_dir(cli)?;
    if a.packets == 0 || a.stride == 0 || a.period_ms == 0 {
        bail!(crossfi_config("packets", "packets, stride and period_ms must be positive"));
    }
    if !(a.timestamp_divisor > 0.0) {
        bail!(crossfi_config("timestamp_divisor", "must be positive"));
    }
    ensure_writable(out)?;
    RunManifest::new(out, None, cli.seed, None)?.write(out)?;
    let opts = ConvertOptions {
        period_ms: a.period_ms,
        subcarriers: a.subcarriers,
        timestamp_divisor: a.timestamp_divisor,
        packets_per_sample: a.packets,
        stride: a.stride,
    };
    let m = convert_tree(&a.input, out, &opts)?;
    log::info!(
        "converted {} sessions ({} domains, {} classes)",
        m.sessions.len(),
        m.domains.len(),
        m.classes.len()
    );
    Ok(())
}

/// Config file (or defaults) with the command-line flags layered on top.
pub fn scenario_config(cli: &Cli, a: &ScenarioArgs) -> Result<ScenarioConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ScenarioConfig::from_toml(&text)?
        }
        None => ScenarioConfig::default(),
    };
    if let Some(v) = cli.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.scenario {
        cfg.scenario = v;
    }
    if let Some(v) = a.k {
        cfg.k = v;
    }
    if let Some(v) = a.metric {
        cfg.metric = Some(v);
    }
    if let Some(v) = a.template_method {
        cfg.template_method = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.finetune_epochs {
        cfg.finetune_epochs = Some(v);
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.weight_decay {
        cfg.weight_decay = v;
    }
    cfg.use_mmd |= a.use_mmd;
    cfg.use_unlabeled_target |= a.use_unlabeled_target;
    if let Some(v) = a.alpha {
        cfg.loss.alpha = v;
    }
    if let Some(v) = a.mmd_weight {
        cfg.loss.mmd_weight = v;
    }
    if let Some(v) = a.mmd_kernels {
        cfg.loss.kernel_count = v;
    }
    if !a.target_domains.is_empty() {
        cfg.target_domains = a.target_domains.clone();
    }
    if let Some(v) = a.new_class {
        cfg.new_class = Some(v);
    }
    if let Some(v) = a.pool_size {
        cfg.pool_size = Some(v);
    }
    if let Some(v) = a.encoder {
        cfg.encoder.variant = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Windows of every session plus the class count.
pub fn load_samples(manifest: &Path) -> Result<(Vec<CsiSample>, usize)> {
    let ds = load_dataset(manifest)?;
    let samples = windows_from_sessions(&ds.sessions, ds.manifest.shape(), ds.manifest.stride)?;
    Ok((samples, ds.manifest.classes.len()))
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let out = out_dir(cli)?;
    let cfg = scenario_config(cli, &a.scenario)?;
    let dir = RunDir::create(out)?;
    let checkpoint = dir.checkpoint();
    let resuming = a.resume && checkpoint.exists();
    if !resuming {
        RunManifest::new(out, cli.config.as_deref(), Some(cfg.seed), Some(&a.scenario.data))?.write(out)?;
        dir.write_config(&cfg)?;
    }
    let (samples, classes) = load_samples(&a.scenario.data)?;
    let data = prepare(&samples, &cfg, classes)?;
    let view = data.view();

    let (mut state, mut log) = if resuming {
        let state = TrainState::load(&checkpoint)?;
        if state.config != cfg {
            bail!(crossfi_config("resume", "checkpoint was written with a different configuration"));
        }
        let mut log = read_loss_log(&dir.loss_log())?;
        log.retain(|r| r.step <= state.comparative_steps + state.template_steps);
        log::info!("resuming at iteration {}", state.iteration);
        (state, log)
    } else {
        (TrainState::new(&cfg, view.shape)?, Vec::new())
    };

    loop {
        let until = match a.checkpoint_every {
            0 => None,
            n => Some((state.iteration / n + 1) * n),
        };
        let before = state.iteration;
        run(&mut state, &view, until, &mut log)?;
        state.save(&checkpoint)?;
        write_loss_log(&dir.loss_log(), &log)?;
        if until.is_none() || state.iteration == before || Some(state.iteration) != until {
            break;
        }
    }

    let templates = final_templates(&mut state, &view)?;
    templates.save(&dir.templates())?;
    let report = evaluate(&state.net, &state.store, view.test.labeled(), &templates, &cfg)?;
    report.write(&dir.metrics())?;
    println!("accuracy {:.4} on {} test windows", report.accuracy, report.total);
    Ok(())
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let dir = RunDir::open(&a.run)?;
    let m = RunManifest::read(&a.run)?;
    let data_path = a
        .data
        .clone()
        .or(m.data)
        .ok_or_else(|| anyhow!(crossfi_config("data", "run manifest records no dataset; pass --data")))?;
    for p in [dir.config(), dir.checkpoint(), dir.templates()] {
        if !p.exists() {
            bail!(crossfi::Error::Io {
                path: p,
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "missing run artifact"),
            });
        }
    }
    let text = fs::read_to_string(dir.config()).with_context(|| format!("reading {}", dir.config().display()))?;
    let cfg = ScenarioConfig::from_toml(&text)?;
    let state = TrainState::load(&dir.checkpoint())?;
    let templates = TemplateSet::load(&dir.templates())?;
    let (samples, classes) = load_samples(&data_path)?;
    let data = prepare(&samples, &cfg, classes)?;
    let report = evaluate(&state.net, &state.store, data.test.labeled(), &templates, &cfg)?;
    let target = cli.out.as_deref().map(|o| o.join("metrics.json")).unwrap_or_else(|| dir.metrics());
    if let Some(parent) = target.parent() {
        ensure_writable(parent)?;
    }
    report.write(&target)?;
    println!("accuracy {:.4} on {} test windows", report.accuracy, report.total);
    Ok(())
}

fn cmd_ablate(cli: &Cli, a: &AblateArgs) -> Result<()> {
    let out = out_dir(cli)?;
    let base = scenario_config(cli, &a.scenario)?;
    ensure_writable(out)?;
    RunManifest::new(out, cli.config.as_deref(), Some(base.seed), Some(&a.scenario.data))?.write(out)?;
    let (samples, classes) = load_samples(&a.scenario.data)?;

    let seeds = if a.seeds.is_empty() { vec![base.seed] } else { a.seeds.clone() };
    let shots = if a.shots.is_empty() || !base.scenario.needs_shots() {
        vec![base.k]
    } else {
        a.shots.clone()
    };
    let mut grid = Vec::new();
    for &seed in &seeds {
        if a.with_in_domain {
            let cfg = ScenarioConfig {
                scenario: Scenario::InDomain,
                seed,
                ..base.clone()
            };
            grid.push(("in-domain".to_string(), cfg));
        }
        for &k in &shots {
            let cfg = ScenarioConfig { k, seed, ..base.clone() };
            grid.extend(default_grid(&cfg));
        }
    }
    for (name, cfg) in &grid {
        cfg.validate().with_context(|| format!("grid row `{name}`"))?;
    }
    let rows = run_grid(&grid, &samples, classes);
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    write_ablation_csv(&out.join("ablation.csv"), &rows)?;
    println!("{} rows, {} failed", rows.len(), failed);
    Ok(())
}

/// One worker thread per row, bounded by the available parallelism.
fn run_grid(grid: &[(String, ScenarioConfig)], samples: &[CsiSample], classes: usize) -> Vec<AblationRow> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(grid.len().max(1));
    let chunk = grid.len().div_ceil(workers).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = grid
            .chunks(chunk)
            .map(|part| s.spawn(move || run_ablation(part, samples, classes)))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("ablation worker panicked"))
            .collect()
    })
}

fn cmd_plot(cli: &Cli, a: &PlotArgs) -> Result<()> {
    let out = out_dir(cli)?;
    ensure_writable(out)?;
    RunManifest::new(out, None, None, None)?.write(out)?;
    let mut rows = Vec::new();
    for t in &a.tables {
        rows.extend(crossfi::eval::read_ablation_csv(t)?);
    }
    let written: Vec<PathBuf> = plot::accuracy_vs_shots(&rows, &a.title, out)?;
    for p in &written {
        println!("{}", p.display());
    }
    Ok(())
}
