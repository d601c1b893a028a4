//! CSI data model, dataset files, preprocessing, scenario splits and synthesis.

pub mod manifest;
pub mod preprocess;
pub mod split;
pub mod synth;
pub mod types;
pub mod wigesture;

use std::fs;
use std::path::Path;

pub use manifest::{load_dataset, read_session, write_session, Dataset, DatasetManifest, SessionEntry};
pub use preprocess::{interpolate_missing, preprocess, AmplitudeNormalizer, NormalizerStats};
pub use split::{split_scenario, Splits};
pub use synth::{synthesize_domain, Drift, Interference, MotionProfile, SyntheticDomainSpec};
pub use types::{CsiSample, RawCsiRecord, SampleShape, Session};

use crate::error::{Error, Result};

/// Gap-fills and windows every session; `session` on each sample is its index in `sessions`.
pub fn windows_from_sessions(sessions: &[Session], shape: SampleShape, stride: usize) -> Result<Vec<CsiSample>> {
    let mut out = Vec::new();
    for (i, s) in sessions.iter().enumerate() {
        let filled = interpolate_missing(&s.records)?;
        out.extend(preprocess(&filled, shape, stride, i)?);
    }
    Ok(out)
}

/// Writes `sessions` as `session_XXX.csv` files plus `manifest.toml` under `dir`.
/// The manifest's `sessions` list is replaced by the written files.
pub fn write_dataset(dir: &Path, mut manifest: DatasetManifest, sessions: &[Session]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    manifest.sessions = Vec::with_capacity(sessions.len());
    for (i, s) in sessions.iter().enumerate() {
        let name = format!("session_{i:03}_d{}_c{}.csv", s.domain, s.label);
        write_session(&dir.join(&name), &s.records, manifest.subcarriers)?;
        manifest.sessions.push(SessionEntry {
            path: name.into(),
            domain: s.domain,
            label: s.label,
        });
    }
    manifest.validate()?;
    manifest.write(&dir.join("manifest.toml"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthesized_dataset_round_trips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticDomainSpec {
            domain: 0,
            n_paths: 3,
            static_seed: 5,
            class_motion_profiles: SyntheticDomainSpec::default_profiles(2, 100.0, 8),
            noise_std: 0.05,
            sample_rate: 100.0,
            subcarriers: 4,
            packets_per_sample: 10,
            stride: 5,
            drift: Drift::desk(),
            interference: Interference::default(),
        };
        let sessions = synthesize_domain(&spec, 6, 1).unwrap();
        let manifest = DatasetManifest {
            subcarriers: 4,
            packets_per_sample: 10,
            stride: 5,
            sample_period_ms: Some(10),
            classes: vec!["a".into(), "b".into()],
            domains: vec!["room0".into()],
            sessions: vec![],
        };
        write_dataset(dir.path(), manifest, &sessions).unwrap();
        let ds = load_dataset(&dir.path().join("manifest.toml")).unwrap();
        assert_eq!(ds.sessions, sessions);
        let w = windows_from_sessions(&ds.sessions, ds.manifest.shape(), ds.manifest.stride).unwrap();
        assert_eq!(w.len(), 12);
    }
}
