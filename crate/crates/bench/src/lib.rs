//! Shared inputs for the kernel benchmarks.

use crossfi::data::{synthesize_domain, windows_from_sessions, SyntheticDomainSpec};
use crossfi::{CsiSample, Tensor};

/// Desk-scale windows from one synthetic domain.
pub fn desk_samples(per_class: usize) -> Vec<CsiSample> {
    let spec = SyntheticDomainSpec::new(0, 4);
    let sessions = synthesize_domain(&spec, per_class, 1).expect("default spec is valid");
    windows_from_sessions(&sessions, spec.shape(), spec.stride).expect("synthetic sessions window cleanly")
}

/// Deterministic, non-degenerate fill in [-amp, amp].
pub fn filled(shape: &[usize], phase: f64, amp: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|i| amp * (i as f64 * 0.618 + phase).sin()).collect();
    Tensor::new(shape, data).expect("length matches shape")
}
