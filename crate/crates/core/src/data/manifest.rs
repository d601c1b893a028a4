//! Dataset manifest (TOML) and session files (CSV).
//!
//! A session file starts with the header
//! `timestamp_ms,label,domain,present` followed by `re_0,im_0,...` column
//! names, one row per packet slot. Missing slots carry `present=0` and empty
//! CSI columns. Timestamp gaps larger than the sampling period are
//! materialized as missing slots on load.

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::types::{RawCsiRecord, SampleShape, Session};
use crate::error::{Error, Result};

pub const SESSION_HEADER: [&str; 4] = ["timestamp_ms", "label", "domain", "present"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionEntry {
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub domain: usize,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    /// D: complex values per packet.
    pub subcarriers: usize,
    /// t: packets per sample window.
    pub packets_per_sample: usize,
    pub stride: usize,
    /// Nominal spacing of packet slots; inferred from the smallest timestamp step when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_period_ms: Option<u64>,
    pub classes: Vec<String>,
    pub domains: Vec<String>,
    pub sessions: Vec<SessionEntry>,
}

impl DatasetManifest {
    pub fn shape(&self) -> SampleShape {
        SampleShape::new(self.packets_per_sample, self.subcarriers)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::schema("classes", "must list at least one class"));
        }
        if self.domains.is_empty() {
            return Err(Error::schema("domains", "must list at least one domain"));
        }
        if self.stride == 0 {
            return Err(Error::schema("stride", "must be at least 1"));
        }
        if self.packets_per_sample == 0 {
            return Err(Error::schema("packets_per_sample", "must be at least 1"));
        }
        if self.subcarriers == 0 {
            return Err(Error::schema("subcarriers", "must be at least 1"));
        }
        if self.sample_period_ms == Some(0) {
            return Err(Error::schema("sample_period_ms", "must be positive"));
        }
        for (i, s) in self.sessions.iter().enumerate() {
            if s.label >= self.classes.len() {
                return Err(Error::schema(
                    format!("sessions[{i}].label"),
                    format!("{} is not a class index", s.label),
                ));
            }
            if s.domain >= self.domains.len() {
                return Err(Error::schema(
                    format!("sessions[{i}].domain"),
                    format!("{} is not a domain index", s.domain),
                ));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: DatasetManifest = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = msg
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "manifest".into());
            Error::schema(field, msg)
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest is always serializable")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}

/// A manifest together with its sessions, in manifest order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub sessions: Vec<Session>,
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let sessions = manifest
        .sessions
        .iter()
        .map(|entry| {
            let path = base.join(&entry.path);
            let mut records = read_session(&path, manifest.subcarriers)?;
            records = fill_timestamp_gaps(records, manifest.sample_period_ms, entry);
            Ok(Session {
                domain: entry.domain,
                label: entry.label,
                records,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, sessions })
}

/// Reads one session file, checking every present row carries `subcarriers` values.
pub fn read_session(path: &Path, subcarriers: usize) -> Result<Vec<RawCsiRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .has_headers(true)
        .from_reader(file);
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        message: format!("line {line}: {message}"),
    };
    let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if headers.len() < 4 || headers.iter().take(4).ne(SESSION_HEADER) {
        return Err(parse_err(1, format!("header must start with {}", SESSION_HEADER.join(","))));
    }
    let mut out: Vec<RawCsiRecord> = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| parse_err(line, e.to_string()))?;
        let field = |k: usize| row.get(k).unwrap_or("").trim();
        let num = |k: usize| -> Result<u64> {
            field(k)
                .parse::<u64>()
                .map_err(|e| parse_err(line, format!("column {}: {e}", SESSION_HEADER[k])))
        };
        let timestamp_ms = num(0)?;
        let label = num(1)? as usize;
        let domain = num(2)? as usize;
        let present = match field(3) {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(parse_err(line, format!("present must be 0 or 1, got `{other}`"))),
        };
        let values: Vec<&str> = row.iter().skip(4).map(str::trim).collect();
        let csi = if present {
            if values.len() != 2 * subcarriers {
                return Err(Error::dim(format!(
                    "{} line {line}: expected {} CSI columns for D={subcarriers}, found {}",
                    path.display(),
                    2 * subcarriers,
                    values.len()
                )));
            }
            values
                .chunks(2)
                .map(|p| {
                    let re = p[0].parse::<f64>();
                    let im = p[1].parse::<f64>();
                    match (re, im) {
                        (Ok(re), Ok(im)) => Ok(Complex64::new(re, im)),
                        _ => Err(parse_err(line, format!("bad complex value `{},{}`", p[0], p[1]))),
                    }
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            if values.iter().any(|v| !v.is_empty()) {
                return Err(parse_err(line, "missing slot carries CSI values".into()));
            }
            Vec::new()
        };
        if let Some(prev) = out.last() {
            if timestamp_ms <= prev.timestamp_ms {
                return Err(parse_err(line, "timestamps must be strictly increasing".into()));
            }
        }
        out.push(RawCsiRecord {
            timestamp_ms,
            label,
            domain,
            csi,
            present,
        });
    }
    Ok(out)
}

/// Inserts `present=false` slots wherever consecutive timestamps are more than
/// one sampling period apart.
fn fill_timestamp_gaps(
    records: Vec<RawCsiRecord>,
    period: Option<u64>,
    entry: &SessionEntry,
) -> Vec<RawCsiRecord> {
    let period = period.or_else(|| {
        records
            .windows(2)
            .map(|w| w[1].timestamp_ms - w[0].timestamp_ms)
            .min()
    });
    let Some(period) = period.filter(|&p| p > 0) else {
        return records;
    };
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        if let Some(prev) = out.last().map(|p: &RawCsiRecord| p.timestamp_ms) {
            let gap = r.timestamp_ms - prev;
            // a gap of n periods (rounded) hides n - 1 slots
            let slots = (gap + period / 2) / period;
            for k in 1..slots {
                let ts = prev + k * period;
                if ts >= r.timestamp_ms {
                    break;
                }
                out.push(RawCsiRecord::missing(ts, entry.label, entry.domain));
            }
        }
        out.push(r);
    }
    out
}

/// Writes a session file in the format [`read_session`] accepts.
pub fn write_session(path: &Path, records: &[RawCsiRecord], subcarriers: usize) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::io(path, e.into()))?;
    let mut header: Vec<String> = SESSION_HEADER.iter().map(|s| s.to_string()).collect();
    for i in 0..subcarriers {
        header.push(format!("re_{i}"));
        header.push(format!("im_{i}"));
    }
    let io = |e: csv::Error| Error::io(path, e.into());
    wtr.write_record(&header).map_err(io)?;
    for r in records {
        let mut row = vec![
            r.timestamp_ms.to_string(),
            r.label.to_string(),
            r.domain.to_string(),
            if r.present { "1" } else { "0" }.to_string(),
        ];
        if r.present {
            for z in &r.csi {
                row.push(format!("{:?}", z.re));
                row.push(format!("{:?}", z.im));
            }
        }
        wtr.write_record(&row).map_err(io)?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn manifest(dir: &Path, sessions: &[(&str, usize, usize)]) -> DatasetManifest {
        let m = DatasetManifest {
            subcarriers: 3,
            packets_per_sample: 4,
            stride: 2,
            sample_period_ms: None,
            classes: vec!["a".into(), "b".into()],
            domains: vec!["d0".into()],
            sessions: sessions
                .iter()
                .map(|(p, domain, label)| SessionEntry {
                    path: p.into(),
                    domain: *domain,
                    label: *label,
                })
                .collect(),
        };
        m.write(&dir.join("manifest.toml")).unwrap();
        m
    }

    #[test]
    fn empty_classes_is_a_schema_error_naming_the_field() {
        let text = "subcarriers = 3\npackets_per_sample = 4\nstride = 1\nclasses = []\ndomains = [\"x\"]\nsessions = []\n";
        match DatasetManifest::from_toml(text) {
            Err(Error::Schema { field, .. }) => assert_eq!(field, "classes"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_field_is_named() {
        let text = "subcarriers = 3\npackets_per_sample = 4\nclasses = [\"a\"]\ndomains = [\"x\"]\nsessions = []\n";
        match DatasetManifest::from_toml(text) {
            Err(Error::Schema { field, .. }) => assert_eq!(field, "stride"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_stride_rejected() {
        let text = "subcarriers = 3\npackets_per_sample = 4\nstride = 0\nclasses = [\"a\"]\ndomains = [\"x\"]\nsessions = []\n";
        assert!(matches!(
            DatasetManifest::from_toml(text),
            Err(Error::Schema { field, .. }) if field == "stride"
        ));
    }

    #[test]
    fn wrong_column_count_is_a_dimension_error() {
        let dir = tempfile::tempdir().unwrap();
        manifest(dir.path(), &[("s.csv", 0, 0)]);
        let mut f = fs::File::create(dir.path().join("s.csv")).unwrap();
        writeln!(f, "timestamp_ms,label,domain,present,re_0,im_0").unwrap();
        writeln!(f, "0,0,0,1,1.0,2.0").unwrap();
        drop(f);
        let err = load_dataset(&dir.path().join("manifest.toml")).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)), "{err:?}");
    }

    #[test]
    fn explicit_missing_rows_and_gaps_become_missing_slots() {
        let dir = tempfile::tempdir().unwrap();
        manifest(dir.path(), &[("s.csv", 0, 1)]);
        let mut f = fs::File::create(dir.path().join("s.csv")).unwrap();
        writeln!(f, "timestamp_ms,label,domain,present").unwrap();
        writeln!(f, "0,1,0,1,1,0,1,0,1,0").unwrap();
        writeln!(f, "10,1,0,0").unwrap();
        writeln!(f, "20,1,0,1,1,0,1,0,1,0").unwrap();
        writeln!(f, "40,1,0,1,1,0,1,0,1,0").unwrap();
        drop(f);
        let ds = load_dataset(&dir.path().join("manifest.toml")).unwrap();
        let recs = &ds.sessions[0].records;
        let ts: Vec<u64> = recs.iter().map(|r| r.timestamp_ms).collect();
        assert_eq!(ts, vec![0, 10, 20, 30, 40]);
        let present: Vec<bool> = recs.iter().map(|r| r.present).collect();
        assert_eq!(present, vec![true, false, true, false, true]);
        assert_eq!(recs[3].label, 1);
    }

    #[test]
    fn non_increasing_timestamps_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        fs::write(&p, "timestamp_ms,label,domain,present\n5,0,0,0\n5,0,0,0\n").unwrap();
        assert!(read_session(&p, 1).is_err());
    }
}
