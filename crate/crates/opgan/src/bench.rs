//! Single-threaded synthesis latency measurement.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::Synthesizer;
use crate::signal::SEGMENT_SECONDS;

/// Per-segment wall-clock statistics over repeated forward passes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyReport {
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub runs: usize,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Time `n_segments` forward passes of one 5-second segment, strictly
/// sequentially, and report the median with its extremes. The first pass is
/// run once unrecorded to keep one-time setup out of the numbers.
pub fn bench_latency<S: Synthesizer>(model: &S, n_segments: usize) -> Result<LatencyReport> {
    if n_segments < 10 {
        return Err(Error::Config(format!(
            "latency needs at least 10 runs for a stable median, got {n_segments}"
        )));
    }
    let len = (SEGMENT_SECONDS * crate::signal::REFERENCE_FS).round() as usize;
    let segment: Vec<f64> = (0..len)
        .map(|i| {
            let t = i as f64 / crate::signal::REFERENCE_FS;
            (2.0 * std::f64::consts::PI * 12.0 * t).sin() * 0.8
                + (2.0 * std::f64::consts::PI * 47.0 * t).sin() * 0.3
        })
        .collect();
    model.synthesize(&segment)?;
    let mut times_ms = Vec::with_capacity(n_segments);
    for _ in 0..n_segments {
        let started = Instant::now();
        let out = model.synthesize(&segment)?;
        times_ms.push(started.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    times_ms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(LatencyReport {
        median_ms: median(&times_ms),
        min_ms: times_ms[0],
        max_ms: times_ms[n_segments - 1],
        runs: n_segments,
    })
}
