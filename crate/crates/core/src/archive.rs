//! Versioned single-file archives for checkpoints, template sets and weight imports.
//!
//! Layout: one header line `CROSSFI-ARCHIVE v<version> <kind> <sha256 of payload>`,
//! then a JSON payload. Floats use shortest round-trip formatting, so
//! save -> load -> save is byte-identical.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &str = "CROSSFI-ARCHIVE";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode<T: Serialize>(kind: &str, payload: &T) -> Result<Vec<u8>> {
    let body = serde_json::to_vec(payload).map_err(|e| Error::Corrupted(format!("serialize: {e}")))?;
    let digest = hex::encode(Sha256::digest(&body));
    let mut out = format!("{MAGIC} v{FORMAT_VERSION} {kind} {digest}\n").into_bytes();
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn decode<T: DeserializeOwned>(kind: &str, bytes: &[u8]) -> Result<T> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Corrupted("missing archive header".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Corrupted("header is not text".into()))?;
    let parts: Vec<&str> = header.split(' ').collect();
    if parts.len() != 4 || parts[0] != MAGIC {
        return Err(Error::Corrupted(format!("not an archive header: `{header}`")));
    }
    let version: u32 = parts[1]
        .strip_prefix('v')
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Corrupted(format!("bad version field `{}`", parts[1])))?;
    if version != FORMAT_VERSION {
        return Err(Error::IncompatibleVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    if parts[2] != kind {
        return Err(Error::Corrupted(format!("archive holds `{}`, expected `{kind}`", parts[2])));
    }
    let body = &bytes[nl + 1..];
    if hex::encode(Sha256::digest(body)) != parts[3] {
        return Err(Error::Corrupted("checksum mismatch".into()));
    }
    serde_json::from_slice(body).map_err(|e| Error::Corrupted(format!("payload: {e}")))
}

pub fn save<T: Serialize>(path: &Path, kind: &str, payload: &T) -> Result<()> {
    let bytes = encode(kind, payload)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(kind, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn payload() -> BTreeMap<String, Vec<f64>> {
        let mut m = BTreeMap::new();
        m.insert("w".into(), vec![0.1, 1.0 / 3.0, -2.5e-300, f64::MAX, 5e-324]);
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let a = encode("params", &payload()).unwrap();
        let back: BTreeMap<String, Vec<f64>> = decode("params", &a).unwrap();
        assert_eq!(back, payload());
        assert_eq!(encode("params", &back).unwrap(), a);
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let a = encode("params", &payload()).unwrap();
        let text = String::from_utf8(a).unwrap().replacen(" v1 ", " v9 ", 1);
        let err = decode::<BTreeMap<String, Vec<f64>>>("params", text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::IncompatibleVersion { found: 9, expected: 1 }));
    }

    #[test]
    fn corruption_detected() {
        let mut a = encode("params", &payload()).unwrap();
        let last = a.len() - 3;
        a[last] ^= 1;
        assert!(matches!(decode::<BTreeMap<String, Vec<f64>>>("params", &a), Err(Error::Corrupted(_))));
        assert!(matches!(decode::<BTreeMap<String, Vec<f64>>>("params", b"garbage"), Err(Error::Corrupted(_))));
        let ok = encode("params", &payload()).unwrap();
        assert!(matches!(decode::<BTreeMap<String, Vec<f64>>>("templates", &ok), Err(Error::Corrupted(_))));
    }
}
