use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const RUN_MANIFEST_VERSION: u32 = 1;
pub const RUN_MANIFEST_FILE: &str = "run.json";

/// Invocation record written into every output directory before work starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    /// argv as given, program name included.
    pub command: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    /// Dataset manifest, absolute.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
}

impl RunManifest {
    pub fn new(out: &Path, config_path: Option<&Path>, seed: Option<u64>, data: Option<&Path>) -> Result<Self> {
        Ok(RunManifest {
            format_version: RUN_MANIFEST_VERSION,
            command: std::env::args().collect(),
            config_path: config_path.map(absolute).transpose()?,
            seed,
            out: out.to_path_buf(),
            data: data.map(absolute).transpose()?,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RUN_MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_MANIFEST_FILE);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let m: RunManifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if m.format_version != RUN_MANIFEST_VERSION {
            bail!(crossfi::Error::IncompatibleVersion {
                found: m.format_version,
                expected: RUN_MANIFEST_VERSION,
            });
        }
        Ok(m)
    }
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).with_context(|| format!("resolving {}", p.display()))
}
