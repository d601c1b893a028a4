//! Best-effort converter for ESP32-style CSI captures such as the public
//! WiGesture release.
//!
//! Expected input: CSV files with a `data` column holding `[i0,r0,i1,r1,...]`
//! (imaginary part first, as the ESP32 driver emits it) and a timestamp column,
//! `local_timestamp` (microseconds) preferred over `timestamp`. Packets are
//! snapped onto a fixed slot grid; empty slots become missing records so the
//! regular interpolation step fills them.
//!
//! Directory layout: `<root>/<domain>/<class>/*.csv`, each file one session.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;

use super::manifest::DatasetManifest;
use super::types::{RawCsiRecord, Session};
use super::write_dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvertOptions {
    /// Slot spacing in milliseconds (100 packets/s gives 10).
    pub period_ms: u64,
    /// Keep only the first `subcarriers` complex values; `None` keeps all of the first row's.
    pub subcarriers: Option<usize>,
    /// Timestamp unit divisor to reach milliseconds (1000 for microseconds).
    pub timestamp_divisor: f64,
    pub packets_per_sample: usize,
    pub stride: usize,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        ConvertOptions {
            period_ms: 10,
            subcarriers: None,
            timestamp_divisor: 1000.0,
            packets_per_sample: crate::config::defaults::PACKETS_PER_SAMPLE,
            stride: crate::config::defaults::PACKETS_PER_SAMPLE / 2,
        }
    }
}

fn parse_pairs(cell: &str) -> Result<Vec<Complex64>> {
    let inner = cell.trim().trim_start_matches('[').trim_end_matches(']');
    let vals: Vec<f64> = inner
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| Error::Data(format!("non-numeric CSI value `{s}`"))))
        .collect::<Result<_>>()?;
    if vals.len() % 2 != 0 {
        return Err(Error::Data(format!("odd CSI value count {}", vals.len())));
    }
    Ok(vals.chunks(2).map(|p| Complex64::new(p[1], p[0])).collect())
}

/// Converts one capture file into slot-gridded records.
pub fn convert_file(path: &Path, label: usize, domain: usize, opts: &ConvertOptions) -> Result<Vec<RawCsiRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::io(path, e.into()))?;
    let headers = rdr.headers().map_err(|e| Error::io(path, e.into()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let data_col = col("data").ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        message: "no `data` column".into(),
    })?;
    let ts_col = col("local_timestamp").or_else(|| col("timestamp")).ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        message: "no `local_timestamp` or `timestamp` column".into(),
    })?;
    let mut packets: Vec<(f64, Vec<Complex64>)> = Vec::new();
    let mut width = opts.subcarriers;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::io(path, e.into()))?;
        let (Some(ts), Some(cell)) = (rec.get(ts_col), rec.get(data_col)) else {
            continue;
        };
        let ts: f64 = ts.trim().parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            message: format!("row {row}: bad timestamp `{ts}`"),
        })?;
        let mut csi = parse_pairs(cell).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: format!("row {row}: {e}"),
        })?;
        let w = *width.get_or_insert(csi.len());
        if csi.len() < w {
            log::warn!("{}: row {row} has {} subcarriers, skipping", path.display(), csi.len());
            continue;
        }
        csi.truncate(w);
        packets.push((ts / opts.timestamp_divisor, csi));
    }
    let Some(t0) = packets.iter().map(|p| p.0).reduce(f64::min) else {
        return Err(Error::EmptySession);
    };
    let mut slots: BTreeMap<u64, Vec<Complex64>> = BTreeMap::new();
    for (ts, csi) in packets {
        let slot = ((ts - t0) / opts.period_ms as f64).round() as u64;
        slots.entry(slot).or_insert(csi);
    }
    let last = *slots.keys().next_back().expect("non-empty");
    Ok((0..=last)
        .map(|s| {
            let timestamp_ms = s * opts.period_ms;
            match slots.remove(&s) {
                Some(csi) => RawCsiRecord {
                    timestamp_ms,
                    label,
                    domain,
                    csi,
                    present: true,
                },
                None => RawCsiRecord::missing(timestamp_ms, label, domain),
            }
        })
        .collect())
}

fn sorted_dirs(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

/// Converts a `<root>/<domain>/<class>/*.csv` tree into a dataset under `out`.
/// Class names are the union of class directory names across domains, sorted.
pub fn convert_tree(root: &Path, out: &Path, opts: &ConvertOptions) -> Result<DatasetManifest> {
    let domains: Vec<PathBuf> = sorted_dirs(root)?.into_iter().filter(|p| p.is_dir()).collect();
    let mut class_names: Vec<String> = Vec::new();
    for d in &domains {
        for c in sorted_dirs(d)?.into_iter().filter(|p| p.is_dir()) {
            let name = c.file_name().unwrap().to_string_lossy().into_owned();
            if !class_names.contains(&name) {
                class_names.push(name);
            }
        }
    }
    class_names.sort();
    let mut sessions = Vec::new();
    let mut width = opts.subcarriers;
    for (di, d) in domains.iter().enumerate() {
        for c in sorted_dirs(d)?.into_iter().filter(|p| p.is_dir()) {
            let name = c.file_name().unwrap().to_string_lossy().into_owned();
            let label = class_names.iter().position(|n| *n == name).expect("collected above");
            for f in sorted_dirs(&c)?
                .into_iter()
                .filter(|p| p.extension().is_some_and(|e| e == "csv"))
            {
                let o = ConvertOptions {
                    subcarriers: width,
                    ..opts.clone()
                };
                let records = convert_file(&f, label, di, &o)?;
                width.get_or_insert(records.iter().find(|r| r.present).map_or(0, |r| r.csi.len()));
                sessions.push(Session {
                    domain: di,
                    label,
                    records,
                });
            }
        }
    }
    if sessions.is_empty() {
        return Err(Error::Data(format!("no capture files under {}", root.display())));
    }
    let manifest = DatasetManifest {
        subcarriers: width.unwrap_or(0),
        packets_per_sample: opts.packets_per_sample,
        stride: opts.stride,
        sample_period_ms: Some(opts.period_ms),
        classes: class_names,
        domains: domains
            .iter()
            .map(|d| d.file_name().unwrap().to_string_lossy().into_owned())
            .collect(),
        sessions: Vec::new(),
    };
    write_dataset(out, manifest, &sessions)?;
    DatasetManifest::read(&out.join("manifest.toml"))
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = "type,seq,local_timestamp,len,data\n\
CSI_DATA,1,1000000,4,\"[1,2,3,4]\"\n\
CSI_DATA,2,1010200,4,\"[5,6,7,8]\"\n\
CSI_DATA,3,1030000,4,\"[0,1,0,1]\"\n";

    #[test]
    fn pairs_are_imaginary_first() {
        assert_eq!(
            parse_pairs("[1, 2, -3, 4]").unwrap(),
            vec![Complex64::new(2.0, 1.0), Complex64::new(4.0, -3.0)]
        );
        assert!(parse_pairs("[1,2,3]").is_err());
    }

    #[test]
    fn packets_snap_to_slots_with_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("cap.csv");
        fs::write(&f, FIXTURE).unwrap();
        let recs = convert_file(&f, 2, 1, &ConvertOptions::default()).unwrap();
        // 0 ms, 10.2 ms -> slot 1, 30 ms -> slot 3; slot 2 missing
        assert_eq!(recs.len(), 4);
        assert_eq!(recs.iter().map(|r| r.present).collect::<Vec<_>>(), vec![true, true, false, true]);
        assert_eq!(recs[1].csi, vec![Complex64::new(6.0, 5.0), Complex64::new(8.0, 7.0)]);
        assert!(recs.iter().all(|r| r.label == 2 && r.domain == 1));
    }

    #[test]
    fn tree_conversion_writes_loadable_dataset() {
        let root = tempfile::tempdir().unwrap();
        for (d, c) in [("alice", "push"), ("alice", "wave"), ("bob", "wave")] {
            let p = root.path().join(d).join(c);
            fs::create_dir_all(&p).unwrap();
            fs::write(p.join("0.csv"), FIXTURE).unwrap();
        }
        let out = tempfile::tempdir().unwrap();
        let opts = ConvertOptions {
            packets_per_sample: 2,
            stride: 1,
            ..Default::default()
        };
        let m = convert_tree(root.path(), out.path(), &opts).unwrap();
        assert_eq!(m.classes, vec!["push", "wave"]);
        assert_eq!(m.domains, vec!["alice", "bob"]);
        assert_eq!(m.sessions.len(), 3);
        let ds = crate::data::load_dataset(&out.path().join("manifest.toml")).unwrap();
        assert_eq!(ds.sessions[2].label, 1);
        assert_eq!(ds.sessions[2].domain, 1);
    }
}
