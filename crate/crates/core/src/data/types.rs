use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// One packet slot of a capture session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCsiRecord {
    pub timestamp_ms: u64,
    pub label: usize,
    pub domain: usize,
    /// One complex estimate per subcarrier, all antennas flattened. Empty when `!present`.
    pub csi: Vec<Complex64>,
    pub present: bool,
}

impl RawCsiRecord {
    pub fn missing(timestamp_ms: u64, label: usize, domain: usize) -> Self {
        RawCsiRecord {
            timestamp_ms,
            label,
            domain,
            csi: Vec::new(),
            present: false,
        }
    }
}

/// A contiguous capture for one (domain, label) group.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub domain: usize,
    pub label: usize,
    pub records: Vec<RawCsiRecord>,
}

/// `(t, D)`: packets per sample and subcarriers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleShape {
    pub packets: usize,
    pub subcarriers: usize,
}

impl SampleShape {
    pub fn new(packets: usize, subcarriers: usize) -> Self {
        SampleShape {
            packets,
            subcarriers,
        }
    }

    /// Scalars in one `2 x t x D` payload.
    pub fn payload_len(&self) -> usize {
        2 * self.packets * self.subcarriers
    }

    pub fn dims(&self) -> [usize; 3] {
        [2, self.packets, self.subcarriers]
    }
}

/// A preprocessed window: channel 0 is amplitude, channel 1 is the cosine of the phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsiSample {
    pub data: Vec<f64>,
    pub shape: SampleShape,
    pub label: usize,
    pub domain: usize,
    /// Index of the session the window came from.
    pub session: usize,
    /// Timestamp of the first packet in the window.
    pub start_ms: u64,
}

impl CsiSample {
    pub fn amplitude(&self) -> &[f64] {
        &self.data[..self.shape.packets * self.shape.subcarriers]
    }

    pub fn amplitude_mut(&mut self) -> &mut [f64] {
        let n = self.shape.packets * self.shape.subcarriers;
        &mut self.data[..n]
    }

    pub fn cos_phase(&self) -> &[f64] {
        &self.data[self.shape.packets * self.shape.subcarriers..]
    }
}
