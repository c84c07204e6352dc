//! The adversarial, time-domain, and spectral loss terms, in two forms:
//! plain slice arithmetic for logging and tests, and tape-built graphs for
//! training. Both compute the same numbers; the tape form additionally
//! yields gradients.
//!
//! The discriminator is scored against label vectors — ones for real
//! segments, zeros for synthesized ones — by mean absolute error. The
//! generator objective combines the adversarial term with a time-domain MAE
//! and an MAE between magnitude spectrograms, weighted 0.5 / 0.1 / 0.1 by
//! default.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{hanning, stft};
use crate::tape::{Tape, Var};

/// Weights of the three generator loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub adversarial: f64,
    pub time: f64,
    pub spectral: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { adversarial: 0.5, time: 0.1, spectral: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("adversarial", self.adversarial),
            ("time", self.time),
            ("spectral", self.spectral),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight '{name}' must be finite and non-negative, got {w}"
                )));
            }
        }
        Ok(())
    }
}

// ── Plain forms ─────────────────────────────────────────────────────────────

fn mean_abs_deviation(values: &[f64], level: f64) -> f64 {
    values.iter().map(|v| (v - level).abs()).sum::<f64>() / values.len() as f64
}

/// `0.5 * (MAE(real, ones) + MAE(fake, zeros))` — zero for a perfect
/// discriminator, one for a perfectly fooled one.
pub fn discriminator_loss(real_scores: &[f64], fake_scores: &[f64]) -> Result<f64> {
    if real_scores.len() != fake_scores.len() || real_scores.is_empty() {
        return Err(Error::Shape(format!(
            "score vectors must be non-empty and equally long, got {} and {}",
            real_scores.len(),
            fake_scores.len()
        )));
    }
    Ok(0.5 * (mean_abs_deviation(real_scores, 1.0) + mean_abs_deviation(fake_scores, 0.0)))
}

/// `MAE(fake, ones)` — the generator pushes synthesized segments toward the
/// "real" label.
pub fn generator_adv_loss(fake_scores: &[f64]) -> Result<f64> {
    if fake_scores.is_empty() {
        return Err(Error::Shape("score vector must be non-empty".into()));
    }
    Ok(mean_abs_deviation(fake_scores, 1.0))
}

/// Mean absolute difference between a ground-truth segment and its
/// synthesized counterpart.
pub fn time_loss(gt_segment: &[f64], synth_segment: &[f64]) -> Result<f64> {
    if gt_segment.len() != synth_segment.len() || gt_segment.is_empty() {
        return Err(Error::Shape(format!(
            "segments must be non-empty and equally long, got {} and {}",
            gt_segment.len(),
            synth_segment.len()
        )));
    }
    let sum: f64 = gt_segment.iter().zip(synth_segment).map(|(a, b)| (a - b).abs()).sum();
    Ok(sum / gt_segment.len() as f64)
}

/// Mean absolute difference between the two magnitude spectrograms,
/// frame-by-frame and bin-by-bin.
pub fn stft_loss(
    gt_segment: &[f64],
    synth_segment: &[f64],
    n_fft: usize,
    hop: usize,
) -> Result<f64> {
    if gt_segment.len() != synth_segment.len() {
        return Err(Error::Shape(format!(
            "segments must be equally long, got {} and {}",
            gt_segment.len(),
            synth_segment.len()
        )));
    }
    let gt_mag = stft(gt_segment, n_fft, hop)?.magnitude();
    let synth_mag = stft(synth_segment, n_fft, hop)?.magnitude();
    let sum: f64 = gt_mag.iter().zip(&synth_mag).map(|(a, b)| (a - b).abs()).sum();
    Ok(sum / gt_mag.len() as f64)
}

/// `w_adv * adv + w_time * time + w_spectral * stft`.
pub fn total_loss(adv: f64, time: f64, stft: f64, weights: LossWeights) -> f64 {
    weights.adversarial * adv + weights.time * time + weights.spectral * stft
}

// ── Tape forms ──────────────────────────────────────────────────────────────

/// Windowed DFT-basis kernels that turn a strided convolution into a
/// short-time Fourier transform. Row `k` of the first kernel holds
/// `w[m] * cos(2 pi k m / n_fft)`; row `k` of the second holds
/// `-w[m] * sin(2 pi k m / n_fft)`, so the two convolutions produce the
/// real and imaginary parts of the one-sided spectrum. Both are laid out
/// for kernel shape `(n_fft/2 + 1, 1, n_fft)`.
pub fn dft_magnitude_kernels(n_fft: usize) -> (Vec<f64>, Vec<f64>) {
    let bins = n_fft / 2 + 1;
    let window = hanning(n_fft);
    let mut cos_k = Vec::with_capacity(bins * n_fft);
    let mut sin_k = Vec::with_capacity(bins * n_fft);
    for k in 0..bins {
        for (m, &w) in window.iter().enumerate() {
            let angle = 2.0 * std::f64::consts::PI * (k * m) as f64 / n_fft as f64;
            cos_k.push(w * angle.cos());
            sin_k.push(-w * angle.sin());
        }
    }
    (cos_k, sin_k)
}

/// Differentiable magnitude spectrogram of a `[B, 1, L]` signal: two
/// constant-kernel convolutions at stride `hop` followed by the elementwise
/// complex magnitude. Output shape is `[B, n_fft/2 + 1, frames]`.
pub fn spectral_magnitude_graph(tape: &mut Tape, x: Var, n_fft: usize, hop: usize) -> Result<Var> {
    let (batch, channels, len) = tape.shape(x);
    if channels != 1 {
        return Err(Error::Shape(format!("expected a single-channel signal, got {channels}")));
    }
    if len < n_fft {
        return Err(Error::Shape(format!(
            "signal of {len} samples is shorter than the {n_fft}-point transform"
        )));
    }
    let _ = batch;
    let bins = n_fft / 2 + 1;
    let (cos_k, sin_k) = dft_magnitude_kernels(n_fft);
    let cos_k = tape.constant(cos_k, (bins, 1, n_fft))?;
    let sin_k = tape.constant(sin_k, (bins, 1, n_fft))?;
    let re = tape.conv1d(x, cos_k, None, hop, 0)?;
    let im = tape.conv1d(x, sin_k, None, hop, 0)?;
    tape.magnitude(re, im)
}

/// Mean absolute deviation of every element of `x` from a constant label.
pub fn mae_vs_level_graph(tape: &mut Tape, x: Var, level: f64) -> Result<Var> {
    let label = tape.fill(tape.shape(x), level);
    tape.l1_loss(x, label)
}

/// Tape form of [`discriminator_loss`].
pub fn discriminator_loss_graph(tape: &mut Tape, real: Var, fake: Var) -> Result<Var> {
    let real_term = mae_vs_level_graph(tape, real, 1.0)?;
    let fake_term = mae_vs_level_graph(tape, fake, 0.0)?;
    let sum = tape.add(real_term, fake_term)?;
    Ok(tape.scale(sum, 0.5))
}

/// The generator's loss terms as tape scalars; `total` is built from the
/// other three on the tape itself, so the logged identity
/// `total == w_adv * adv + w_time * time + w_spectral * spectral` holds to
/// floating-point exactness.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorLossGraph {
    pub adversarial: Var,
    pub time: Var,
    pub spectral: Var,
    pub total: Var,
}

/// Build the full generator objective on a tape. `synth` and `target` are
/// the synthesized and ground-truth segments (equal shapes, valid samples
/// only); `fake_scores` is the discriminator's verdict on the synthesized
/// segment. The target's spectrogram runs through the same convolution path
/// as the synthesized one, so the two magnitudes are exactly comparable.
pub fn generator_loss_graph(
    tape: &mut Tape,
    fake_scores: Var,
    synth: Var,
    target: Var,
    weights: LossWeights,
    n_fft: usize,
    hop: usize,
) -> Result<GeneratorLossGraph> {
    let adversarial = mae_vs_level_graph(tape, fake_scores, 1.0)?;
    let time = tape.l1_loss(synth, target)?;
    let synth_mag = spectral_magnitude_graph(tape, synth, n_fft, hop)?;
    let target_mag = spectral_magnitude_graph(tape, target, n_fft, hop)?;
    let spectral = tape.l1_loss(synth_mag, target_mag)?;
    let weighted_adv = tape.scale(adversarial, weights.adversarial);
    let weighted_time = tape.scale(time, weights.time);
    let weighted_spectral = tape.scale(spectral, weights.spectral);
    let partial = tape.add(weighted_adv, weighted_time)?;
    let total = tape.add(partial, weighted_spectral)?;
    Ok(GeneratorLossGraph { adversarial, time, spectral, total })
}
