//! Deterministic multi-domain CSI generator.
//!
//! Each packet observes `Y = H X + N` with a unit pilot `X`, so the CSI
//! estimate is `H + N`. The channel splits into a static part fixed per domain
//! and a dynamic part driven by the class's motion:
//!
//! ```text
//! H(f, t)  = g * (H_s(f) + H_d(f, t))
//! H_s(f)   = sum_p a_p * exp(j * (phi_p - 2 pi f tau_p))
//! H_d(f,t) = A_c * exp(j * (2 pi f_c t + psi - 2 pi f tau_d))
//! ```
//!
//! `g`, the path set `(a_p, phi_p, tau_p)` and the reflector delay `tau_d` come
//! from the domain's static seed; `(f_c, A_c)` is the class motion profile;
//! `psi` is a per-session phase drawn from the generation seed.
//!
//! With [`Drift`] enabled, `log g` and `log A_c` wander as Ornstein-Uhlenbeck
//! processes and the motion phase as a random walk, so windows of one class
//! are instances rather than copies.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::types::{RawCsiRecord, SampleShape, Session};
use crate::config::defaults;
use crate::error::{Error, Result};

/// Subcarrier spacing of 802.11 OFDM.
const SUBCARRIER_SPACING_HZ: f64 = 312.5e3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionProfile {
    /// Doppler-like modulation frequency in Hz.
    pub frequency: f64,
    /// Magnitude of the moving reflector relative to the line-of-sight path.
    pub amplitude: f64,
}

/// Slow within-session variation. All zero reproduces a perfectly repeating
/// motion on a fixed channel.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Drift {
    /// Stationary std of the log receiver gain.
    pub gain_std: f64,
    /// Stationary std of the log motion amplitude.
    pub amplitude_std: f64,
    /// Correlation time of both OU processes, seconds.
    pub correlation_s: f64,
    /// Std of the per-packet motion phase increment, radians.
    pub phase_step_std: f64,
}

impl Drift {
    pub fn desk() -> Self {
        Drift {
            gain_std: 0.1,
            amplitude_std: 0.1,
            correlation_s: 1.0,
            phase_step_std: 0.1,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        if !(ok(self.gain_std) && ok(self.amplitude_std) && ok(self.phase_step_std)) {
            return Err(Error::config("drift", "std values must be finite and non-negative"));
        }
        if (self.gain_std > 0.0 || self.amplitude_std > 0.0) && !(self.correlation_s > 0.0) {
            return Err(Error::config("drift.correlation_s", "must be positive"));
        }
        Ok(())
    }

    fn is_none(&self) -> bool {
        self.gain_std == 0.0 && self.amplitude_std == 0.0 && self.phase_step_std == 0.0
    }
}

/// Interference bursts: short runs of packets with strong extra noise,
/// arriving as a Poisson process.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Interference {
    /// Mean bursts per second; 0 disables.
    pub rate_hz: f64,
    /// Packets per burst.
    pub packets: usize,
    /// Std of the complex noise added inside a burst.
    pub noise_std: f64,
}

impl Interference {
    fn validate(&self) -> Result<()> {
        if !(self.rate_hz >= 0.0 && self.rate_hz.is_finite() && self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("interference", "rate and std must be finite and non-negative"));
        }
        Ok(())
    }

    /// Per-packet burst mask.
    fn mask(&self, len: usize, sample_rate: f64, rng: &mut impl Rng) -> Vec<bool> {
        let mut hit = vec![false; len];
        if self.rate_hz == 0.0 || self.packets == 0 {
            return hit;
        }
        let p = self.rate_hz / sample_rate;
        let mut i = 0;
        while i < len {
            if rng.random::<f64>() < p {
                let end = (i + self.packets).min(len);
                hit[i..end].iter_mut().for_each(|h| *h = true);
                i = end;
            } else {
                i += 1;
            }
        }
        hit
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomainSpec {
    pub domain: usize,
    pub n_paths: usize,
    pub static_seed: u64,
    pub class_motion_profiles: Vec<MotionProfile>,
    pub noise_std: f64,
    /// Packets per second.
    pub sample_rate: f64,
    pub subcarriers: usize,
    pub packets_per_sample: usize,
    pub stride: usize,
    #[serde(default)]
    pub drift: Drift,
    #[serde(default)]
    pub interference: Interference,
}

impl SyntheticDomainSpec {
    /// Desk-scale defaults: 32 packets at 100 packets/s over 16 subcarriers.
    pub fn new(domain: usize, classes: usize) -> Self {
        SyntheticDomainSpec {
            domain,
            n_paths: 4,
            static_seed: 1000 + domain as u64,
            class_motion_profiles: Self::default_profiles(classes, 100.0, 16),
            noise_std: 0.05,
            sample_rate: 100.0,
            subcarriers: 16,
            packets_per_sample: 32,
            stride: 16,
            drift: Drift::desk(),
            interference: Interference::default(),
        }
    }

    /// Motion profiles used when none are given. Class `c` oscillates at
    /// `(c + 1) * sample_rate / stride`, so every window starts at the same
    /// motion phase (like segmented gesture instances); reflector strength
    /// grows with the class index.
    pub fn default_profiles(classes: usize, sample_rate: f64, stride: usize) -> Vec<MotionProfile> {
        let base = sample_rate / stride as f64;
        (0..classes)
            .map(|c| MotionProfile {
                frequency: base * (c + 1) as f64,
                amplitude: 0.2 + 0.1 * c as f64,
            })
            .collect()
    }

    pub fn shape(&self) -> SampleShape {
        SampleShape::new(self.packets_per_sample, self.subcarriers)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0) {
            return Err(Error::config("noise_std", "must be non-negative"));
        }
        if self.class_motion_profiles.is_empty() {
            return Err(Error::config("class_motion_profiles", "need one profile per class"));
        }
        if !(self.sample_rate > 0.0) {
            return Err(Error::config("sample_rate", "must be positive"));
        }
        if self.n_paths == 0 {
            return Err(Error::config("n_paths", "need at least the line-of-sight path"));
        }
        if self.subcarriers == 0 || self.packets_per_sample == 0 || self.stride == 0 {
            return Err(Error::config("shape", "subcarriers, packets_per_sample and stride must be positive"));
        }
        self.drift.validate()?;
        self.interference.validate()
    }

    /// Packets needed for `n` windows.
    pub fn session_len(&self, n: usize) -> usize {
        self.packets_per_sample + (n - 1) * self.stride
    }
}

/// Static multipath response of a domain.
#[derive(Debug, Clone)]
pub struct StaticChannel {
    pub gain: f64,
    pub response: Vec<Complex64>,
    pub reflector_delay: f64,
}

impl StaticChannel {
    pub fn for_domain(spec: &SyntheticDomainSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.static_seed);
        let gain = rng.random_range(0.6..1.6);
        let paths: Vec<(f64, f64, f64)> = (0..spec.n_paths)
            .map(|p| {
                if p == 0 {
                    (1.0, rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..20e-9))
                } else {
                    (
                        rng.random_range(0.1..0.6),
                        rng.random_range(0.0..2.0 * PI),
                        rng.random_range(20e-9..400e-9),
                    )
                }
            })
            .collect();
        let reflector_delay = rng.random_range(20e-9..200e-9);
        let response = (0..spec.subcarriers)
            .map(|m| {
                let f = subcarrier_offset(m, spec.subcarriers);
                paths
                    .iter()
                    .map(|&(a, phi, tau)| Complex64::from_polar(a, phi - 2.0 * PI * f * tau))
                    .sum()
            })
            .collect();
        StaticChannel {
            gain,
            response,
            reflector_delay,
        }
    }
}

/// Per-packet `(log gain, log amplitude, phase)` offsets for one session.
fn drift_paths(drift: &Drift, len: usize, sample_rate: f64, rng: &mut impl Rng) -> Vec<(f64, f64, f64)> {
    if drift.is_none() {
        return vec![(0.0, 0.0, 0.0); len];
    }
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let rho = if drift.correlation_s > 0.0 {
        (-1.0 / (drift.correlation_s * sample_rate)).exp()
    } else {
        0.0
    };
    let innov = (1.0 - rho * rho).sqrt();
    let mut g = drift.gain_std * std.sample(rng);
    let mut a = drift.amplitude_std * std.sample(rng);
    let mut phi = 0.0;
    (0..len)
        .map(|_| {
            let out = (g, a, phi);
            g = rho * g + innov * drift.gain_std * std.sample(rng);
            a = rho * a + innov * drift.amplitude_std * std.sample(rng);
            phi += drift.phase_step_std * std.sample(rng);
            out
        })
        .collect()
}

fn subcarrier_offset(m: usize, d: usize) -> f64 {
    (m as f64 - (d as f64 - 1.0) / 2.0) * SUBCARRIER_SPACING_HZ
}

/// One session per class, each long enough for `n_per_class` windows.
/// Deterministic in `(spec, seed)`; 2% of packet slots are marked missing.
pub fn synthesize_domain(spec: &SyntheticDomainSpec, n_per_class: usize, seed: u64) -> Result<Vec<Session>> {
    spec.validate()?;
    if n_per_class == 0 {
        return Err(Error::Precondition("n_per_class must be at least 1".into()));
    }
    let channel = StaticChannel::for_domain(spec);
    let len = spec.session_len(n_per_class);
    let period_ms = 1000.0 / spec.sample_rate;
    let noise = Normal::new(0.0, spec.noise_std / 2f64.sqrt()).expect("validated noise_std");
    let mut sessions = Vec::with_capacity(spec.class_motion_profiles.len());
    for (label, profile) in spec.class_motion_profiles.iter().enumerate() {
        let stream = (spec.domain as u64) << 32 | label as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let psi = rng.random_range(0.0..2.0 * PI);
        let n_missing = (len as f64 * defaults::MISSING_RATE).round() as usize;
        let mut missing = vec![false; len];
        for i in sample_indices(&mut rng, len, n_missing) {
            missing[i] = true;
        }
        let mut drift_rng = ChaCha8Rng::seed_from_u64(seed);
        drift_rng.set_stream(stream | 1 << 63);
        let drift = drift_paths(&spec.drift, len, spec.sample_rate, &mut drift_rng);
        let burst = spec.interference.mask(len, spec.sample_rate, &mut drift_rng);
        let burst_noise = Normal::new(0.0, spec.interference.noise_std / 2f64.sqrt()).expect("validated interference");
        let records = (0..len)
            .map(|i| {
                let (log_g, log_a, phi) = drift[i];
                let gain = channel.gain * log_g.exp();
                let timestamp_ms = (i as f64 * period_ms).round() as u64;
                let t = i as f64 / spec.sample_rate;
                let csi: Vec<Complex64> = channel
                    .response
                    .iter()
                    .enumerate()
                    .map(|(m, hs)| {
                        let f = subcarrier_offset(m, spec.subcarriers);
                        let hd = Complex64::from_polar(
                            profile.amplitude * log_a.exp(),
                            2.0 * PI * profile.frequency * t + psi + phi - 2.0 * PI * f * channel.reflector_delay,
                        );
                        let mut n = if spec.noise_std > 0.0 {
                            Complex64::new(noise.sample(&mut rng), noise.sample(&mut rng))
                        } else {
                            Complex64::new(0.0, 0.0)
                        };
                        if burst[i] {
                            n += Complex64::new(burst_noise.sample(&mut drift_rng), burst_noise.sample(&mut drift_rng));
                        }
                        gain * (hs + hd) + n
                    })
                    .collect();
                if missing[i] {
                    RawCsiRecord::missing(timestamp_ms, label, spec.domain)
                } else {
                    RawCsiRecord {
                        timestamp_ms,
                        label,
                        domain: spec.domain,
                        csi,
                        present: true,
                    }
                }
            })
            .collect();
        sessions.push(Session {
            domain: spec.domain,
            label,
            records,
        });
    }
    Ok(sessions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::preprocess::interpolate_missing;

    fn spec(domain: usize, static_seed: u64, noise_std: f64) -> SyntheticDomainSpec {
        SyntheticDomainSpec {
            domain,
            n_paths: 4,
            static_seed,
            // on-bin frequencies for a 200-packet series at 100 Hz (0.5 Hz bins)
            class_motion_profiles: vec![
                MotionProfile { frequency: 5.0, amplitude: 0.3 },
                MotionProfile { frequency: 12.5, amplitude: 0.3 },
            ],
            noise_std,
            sample_rate: 100.0,
            subcarriers: 8,
            packets_per_sample: 20,
            stride: 10,
            drift: Drift::default(),
            interference: Interference::default(),
        }
    }

    /// Peak of the subcarrier-averaged magnitude spectrum of the amplitude
    /// series, excluding DC. Plain O(N^2) DFT, independent of any FFT library.
    fn dominant_frequency(session: &Session, sample_rate: f64) -> f64 {
        let recs = interpolate_missing(&session.records).unwrap();
        let n = recs.len();
        let d = recs[0].csi.len();
        let mut spectrum = vec![0.0; n / 2];
        for m in 0..d {
            let amp: Vec<f64> = recs.iter().map(|r| r.csi[m].norm()).collect();
            let mean = amp.iter().sum::<f64>() / n as f64;
            for (k, s) in spectrum.iter_mut().enumerate().skip(1) {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, a) in amp.iter().enumerate() {
                    let w = -2.0 * PI * (k * i) as f64 / n as f64;
                    re += (a - mean) * w.cos();
                    im += (a - mean) * w.sin();
                }
                *s += (re * re + im * im).sqrt();
            }
        }
        let k = (1..spectrum.len())
            .max_by(|&a, &b| spectrum[a].partial_cmp(&spectrum[b]).unwrap())
            .unwrap();
        k as f64 * sample_rate / n as f64
    }

    #[test]
    fn deterministic_in_spec_and_seed() {
        let a = synthesize_domain(&spec(0, 3, 0.1), 5, 42).unwrap();
        let b = synthesize_domain(&spec(0, 3, 0.1), 5, 42).unwrap();
        assert_eq!(a, b);
        let c = synthesize_domain(&spec(0, 3, 0.1), 5, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn session_lengths_and_missing_rate() {
        let s = synthesize_domain(&spec(0, 3, 0.1), 19, 1).unwrap();
        assert_eq!(s.len(), 2);
        for sess in &s {
            assert_eq!(sess.records.len(), 200);
            assert_eq!(sess.records.iter().filter(|r| !r.present).count(), 4);
            assert!(sess.records.windows(2).all(|w| w[0].timestamp_ms < w[1].timestamp_ms));
        }
    }

    #[test]
    fn dft_recovers_class_frequencies() {
        let s = synthesize_domain(&spec(0, 3, 0.0), 19, 9).unwrap();
        assert_eq!(dominant_frequency(&s[0], 100.0), 5.0);
        assert_eq!(dominant_frequency(&s[1], 100.0), 12.5);
    }

    #[test]
    fn domains_differ_in_static_response_but_share_motion() {
        let a = synthesize_domain(&spec(0, 3, 0.0), 19, 9).unwrap();
        let b = synthesize_domain(&spec(1, 77, 0.0), 19, 9).unwrap();
        let mean_amp = |s: &Session| -> Vec<f64> {
            let recs = interpolate_missing(&s.records).unwrap();
            (0..8)
                .map(|m| recs.iter().map(|r| r.csi[m].norm()).sum::<f64>() / recs.len() as f64)
                .collect()
        };
        let (ma, mb) = (mean_amp(&a[0]), mean_amp(&b[0]));
        let max_diff = ma.iter().zip(&mb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(max_diff > 0.05, "static responses should differ, max diff {max_diff}");
        for c in 0..2 {
            assert_eq!(dominant_frequency(&a[c], 100.0), dominant_frequency(&b[c], 100.0));
        }
    }

    #[test]
    fn negative_noise_rejected() {
        assert!(synthesize_domain(&spec(0, 1, -1.0), 3, 0).is_err());
        assert!(synthesize_domain(&spec(0, 1, 0.1), 0, 0).is_err());
    }

    #[test]
    fn interference_bursts_raise_local_variance() {
        let quiet = synthesize_domain(&spec(0, 3, 0.0), 19, 5).unwrap();
        let mut noisy_spec = spec(0, 3, 0.0);
        noisy_spec.interference = Interference {
            rate_hz: 2.0,
            packets: 5,
            noise_std: 1.0,
        };
        let noisy = synthesize_domain(&noisy_spec, 19, 5).unwrap();
        let (a, b) = (&quiet[0].records, &noisy[0].records);
        let changed = a
            .iter()
            .zip(b)
            .filter(|(x, y)| x.present && y.present && x.csi != y.csi)
            .count();
        // ~2 bursts/s over 2 s of 5 packets each
        assert!((5..=60).contains(&changed), "{changed} packets hit");
        let untouched = a.iter().zip(b).filter(|(x, y)| x.present && x.csi == y.csi).count();
        assert!(untouched > 100);
    }

    #[test]
    fn drift_validation() {
        let mut s = spec(0, 3, 0.1);
        s.drift = Drift {
            gain_std: -0.1,
            ..Drift::desk()
        };
        assert!(synthesize_domain(&s, 3, 0).is_err());
        s.drift = Drift {
            correlation_s: 0.0,
            ..Drift::desk()
        };
        assert!(synthesize_domain(&s, 3, 0).is_err());
        s.drift = Drift::desk();
        let a = synthesize_domain(&s, 3, 0).unwrap();
        assert_eq!(a, synthesize_domain(&s, 3, 0).unwrap());
        assert_ne!(a, synthesize_domain(&spec(0, 3, 0.1), 3, 0).unwrap());
    }
}
