//! Gap filling, amplitude / cosine-phase windowing and amplitude standardization.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::types::{CsiSample, RawCsiRecord, SampleShape};
use crate::error::{Error, Result};

/// Lower bound on per-subcarrier standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

/// Fills every missing slot by per-subcarrier linear interpolation (real and
/// imaginary parts separately, weighted by timestamp) between the nearest
/// present neighbours. Leading and trailing gaps copy the nearest present record.
pub fn interpolate_missing(session: &[RawCsiRecord]) -> Result<Vec<RawCsiRecord>> {
    let present: Vec<usize> = session
        .iter()
        .enumerate()
        .filter(|(_, r)| r.present)
        .map(|(i, _)| i)
        .collect();
    if present.is_empty() {
        return Err(Error::EmptySession);
    }
    let mut out = session.to_vec();
    let mut next = 0; // index into `present` of the first present slot at or after i
    for i in 0..session.len() {
        while next < present.len() && present[next] < i {
            next += 1;
        }
        if session[i].present {
            continue;
        }
        let before = next.checked_sub(1).map(|k| present[k]);
        let after = present.get(next).copied();
        let csi = match (before, after) {
            (Some(a), Some(b)) => {
                let (ra, rb) = (&session[a], &session[b]);
                let span = (rb.timestamp_ms - ra.timestamp_ms) as f64;
                let w = (session[i].timestamp_ms - ra.timestamp_ms) as f64 / span;
                ra.csi
                    .iter()
                    .zip(&rb.csi)
                    .map(|(x, y)| Complex64::new(x.re + w * (y.re - x.re), x.im + w * (y.im - x.im)))
                    .collect()
            }
            (Some(a), None) => session[a].csi.clone(),
            (None, Some(b)) => session[b].csi.clone(),
            (None, None) => unreachable!("at least one present record"),
        };
        out[i].csi = csi;
        out[i].present = true;
    }
    Ok(out)
}

/// Cuts a gap-filled session into `2 x t x D` windows.
///
/// Channel 0 holds `|csi|`, channel 1 holds `cos(arg(csi))`. Amplitude is left
/// unnormalized; see [`AmplitudeNormalizer`]. Windows whose records carry more
/// than one label are dropped. `session_index` is stamped on every sample.
pub fn preprocess(
    session: &[RawCsiRecord],
    shape: SampleShape,
    stride: usize,
    session_index: usize,
) -> Result<Vec<CsiSample>> {
    if stride == 0 {
        return Err(Error::config("stride", "must be at least 1"));
    }
    if let Some(r) = session.iter().find(|r| !r.present) {
        return Err(Error::Precondition(format!(
            "slot at {} ms is missing; run interpolate_missing first",
            r.timestamp_ms
        )));
    }
    if let Some(r) = session.iter().find(|r| r.csi.len() != shape.subcarriers) {
        return Err(Error::dim(format!(
            "record at {} ms has {} subcarriers, expected {}",
            r.timestamp_ms,
            r.csi.len(),
            shape.subcarriers
        )));
    }
    let (t, d) = (shape.packets, shape.subcarriers);
    let mut out = Vec::new();
    let mut start = 0;
    while start + t <= session.len() {
        let window = &session[start..start + t];
        let first = &window[0];
        if window.iter().all(|r| r.label == first.label) {
            let mut data = vec![0.0; 2 * t * d];
            for (p, r) in window.iter().enumerate() {
                for (s, z) in r.csi.iter().enumerate() {
                    data[p * d + s] = z.norm();
                    data[t * d + p * d + s] = z.arg().cos();
                }
            }
            out.push(CsiSample {
                data,
                shape,
                label: first.label,
                domain: first.domain,
                session: session_index,
                start_ms: first.timestamp_ms,
            });
        }
        start += stride;
    }
    Ok(out)
}

/// Per-subcarrier amplitude standardization fitted on one split and applied to all.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeNormalizer {
    stats: Option<NormalizerStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizerStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl AmplitudeNormalizer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn fit(samples: &[CsiSample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Precondition("cannot fit a normalizer on zero samples".into()))?;
        let d = first.shape.subcarriers;
        let mut sum = vec![0.0; d];
        let mut count = 0usize;
        for s in samples {
            if s.shape != first.shape {
                return Err(Error::dim("samples with differing shapes"));
            }
            for row in s.amplitude().chunks(d) {
                for (acc, v) in sum.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            count += s.shape.packets;
        }
        let mean: Vec<f64> = sum.iter().map(|v| v / count as f64).collect();
        let mut sq = vec![0.0; d];
        for s in samples {
            for row in s.amplitude().chunks(d) {
                for ((acc, v), m) in sq.iter_mut().zip(row).zip(&mean) {
                    *acc += (v - m) * (v - m);
                }
            }
        }
        let std = sq
            .iter()
            .map(|v| (v / count as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(AmplitudeNormalizer {
            stats: Some(NormalizerStats { mean, std }),
        })
    }

    pub fn stats(&self) -> Result<&NormalizerStats> {
        self.stats.as_ref().ok_or(Error::UninitializedNormalizer)
    }

    pub fn apply(&self, sample: &mut CsiSample) -> Result<()> {
        let stats = self.stats()?;
        let d = sample.shape.subcarriers;
        if stats.mean.len() != d {
            return Err(Error::dim(format!(
                "normalizer fitted for {} subcarriers, sample has {}",
                stats.mean.len(),
                d
            )));
        }
        for row in sample.amplitude_mut().chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&stats.mean).zip(&stats.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(())
    }

    pub fn apply_all(&self, samples: &mut [CsiSample]) -> Result<()> {
        samples.iter_mut().try_for_each(|s| self.apply(s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn rec(ts: u64, values: &[Complex64]) -> RawCsiRecord {
        RawCsiRecord {
            timestamp_ms: ts,
            label: 0,
            domain: 0,
            csi: values.to_vec(),
            present: true,
        }
    }

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn midpoint_interpolation() {
        let s = vec![rec(0, &[c(1.0, 0.0)]), RawCsiRecord::missing(10, 0, 0), rec(20, &[c(3.0, 0.0)])];
        let out = interpolate_missing(&s).unwrap();
        assert_eq!(out[1].csi, vec![c(2.0, 0.0)]);
        assert!(out.iter().all(|r| r.present));
    }

    #[test]
    fn leading_gap_holds_edge() {
        let s = vec![RawCsiRecord::missing(0, 0, 0), rec(10, &[c(5.0, 5.0)]), rec(20, &[c(5.0, 5.0)])];
        let out = interpolate_missing(&s).unwrap();
        assert_eq!(out[0].csi, vec![c(5.0, 5.0)]);
    }

    #[test]
    fn trailing_gap_holds_edge() {
        let s = vec![rec(0, &[c(1.0, 2.0)]), RawCsiRecord::missing(10, 0, 0)];
        let out = interpolate_missing(&s).unwrap();
        assert_eq!(out[1].csi, vec![c(1.0, 2.0)]);
    }

    #[test]
    fn two_slot_gap_matches_closed_form() {
        let s = vec![
            rec(0, &[c(1.0, 1.0)]),
            RawCsiRecord::missing(10, 0, 0),
            RawCsiRecord::missing(20, 0, 0),
            rec(30, &[c(4.0, 4.0)]),
        ];
        let out = interpolate_missing(&s).unwrap();
        // x(t) = 1 + 3 * t / 30 in both components
        for (i, ts) in [(1usize, 10.0), (2, 20.0)] {
            let want = 1.0 + 3.0 * ts / 30.0;
            assert!((out[i].csi[0].re - want).abs() < 1e-12);
            assert!((out[i].csi[0].im - want).abs() < 1e-12);
        }
    }

    #[test]
    fn all_missing_is_an_error() {
        let s = vec![RawCsiRecord::missing(0, 0, 0)];
        assert!(matches!(interpolate_missing(&s), Err(Error::EmptySession)));
    }

    #[test]
    fn amplitude_and_cosine_phase() {
        let shape = SampleShape::new(2, 2);
        let s = vec![
            rec(0, &[c(3.0, 4.0), Complex64::from_polar(1.0, PI)]),
            rec(10, &[c(0.0, 0.0), Complex64::from_polar(1.0, -PI)]),
        ];
        let out = preprocess(&s, shape, 1, 0).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].amplitude()[0], 5.0);
        assert!((out[0].cos_phase()[1] + 1.0).abs() < 1e-15);
        assert!((out[0].cos_phase()[3] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn window_count() {
        let s: Vec<_> = (0..300).map(|i| rec(i * 10, &[c(1.0, 0.0)])).collect();
        let out = preprocess(&s, SampleShape::new(100, 1), 50, 0).unwrap();
        assert_eq!(out.len(), 5);
        let short = preprocess(&s[..50], SampleShape::new(100, 1), 50, 0).unwrap();
        assert!(short.is_empty());
    }

    #[test]
    fn windows_spanning_label_change_are_dropped() {
        let mut s: Vec<_> = (0..6).map(|i| rec(i * 10, &[c(1.0, 0.0)])).collect();
        for r in &mut s[3..] {
            r.label = 1;
        }
        let out = preprocess(&s, SampleShape::new(2, 1), 1, 0).unwrap();
        let labels: Vec<usize> = out.iter().map(|w| w.label).collect();
        assert_eq!(labels, vec![0, 0, 1, 1]);
    }

    #[test]
    fn missing_slot_violates_precondition() {
        let s = vec![rec(0, &[c(1.0, 0.0)]), RawCsiRecord::missing(10, 0, 0)];
        assert!(matches!(
            preprocess(&s, SampleShape::new(1, 1), 1, 0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn normalizer_requires_fit() {
        let s = vec![rec(0, &[c(1.0, 0.0)])];
        let mut w = preprocess(&s, SampleShape::new(1, 1), 1, 0).unwrap();
        let n = AmplitudeNormalizer::new();
        assert!(matches!(n.apply(&mut w[0]), Err(Error::UninitializedNormalizer)));
    }

    #[test]
    fn normalizer_standardizes_training_split() {
        let s: Vec<_> = (0..40)
            .map(|i| rec(i * 10, &[c(i as f64, 0.0), c(7.0, 0.0)]))
            .collect();
        let mut w = preprocess(&s, SampleShape::new(4, 2), 4, 0).unwrap();
        let n = AmplitudeNormalizer::fit(&w).unwrap();
        n.apply_all(&mut w).unwrap();
        let vals: Vec<f64> = w.iter().flat_map(|x| x.amplitude().chunks(2).map(|r| r[0])).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);
        // constant subcarrier hits the std floor and maps to zero
        assert!(w.iter().all(|x| x.amplitude()[1] == 0.0));
    }
}
