//! Waveform handling: file format, segmentation, resampling, normalization,
//! windowing, and short-time Fourier analysis.
//!
//! The processing chain mirrors how paired recordings are prepared for
//! training: cut each waveform into non-overlapping 5-second segments at its
//! native rate, linearly upsample the band-limited side to the 200 Hz
//! reference rate, then min-max normalize each segment into `[-1, 1]`
//! independently.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::util::atomic_write;

/// Reference sampling rate all sources are brought up to, in Hz.
pub const REFERENCE_FS: f64 = 200.0;
/// Segment duration in seconds.
pub const SEGMENT_SECONDS: f64 = 5.0;
/// Transform length of the analysis spectrogram.
pub const STFT_LEN: usize = 256;
/// Hop between spectrogram frames (50% overlap).
pub const STFT_HOP: usize = 128;

// ── Sensors ─────────────────────────────────────────────────────────────────

/// The recording devices the pipeline understands, each with a native rate
/// and the integer factor that brings it to 200 Hz.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sensor {
    /// The reference instrument; recordings are treated as ground truth.
    Episensor,
    /// Low-cost MEMS station: 50 Hz, upsampled x4.
    Csn,
    /// Phone accelerometer: 100 Hz, upsampled x2.
    Iphone,
    /// Phone accelerometer already at 200 Hz.
    Android,
}

impl Sensor {
    pub fn native_fs(self) -> f64 {
        match self {
            Sensor::Episensor | Sensor::Android => 200.0,
            Sensor::Iphone => 100.0,
            Sensor::Csn => 50.0,
        }
    }

    /// Integer upsampling factor to reach the reference rate.
    pub fn upsample_factor(self) -> usize {
        match self {
            Sensor::Episensor | Sensor::Android => 1,
            Sensor::Iphone => 2,
            Sensor::Csn => 4,
        }
    }

    /// Directory name under a dataset root.
    pub fn dir_name(self) -> &'static str {
        match self {
            Sensor::Episensor => "episensor",
            Sensor::Csn => "csn",
            Sensor::Iphone => "iphone",
            Sensor::Android => "android",
        }
    }
}

impl fmt::Display for Sensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for Sensor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "episensor" => Ok(Sensor::Episensor),
            "csn" => Ok(Sensor::Csn),
            "iphone" => Ok(Sensor::Iphone),
            "android" => Ok(Sensor::Android),
            other => Err(Error::Config(format!(
                "unknown sensor '{other}' (expected episensor, csn, iphone or android)"
            ))),
        }
    }
}

// ── Waveform files ──────────────────────────────────────────────────────────

/// A raw recording: samples plus its sampling rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub fs: f64,
}

impl Waveform {
    /// Read the one-float-per-line text format. Lines starting with `#` are
    /// metadata (`# fs=<Hz>` sets the sampling rate); blank lines are
    /// ignored. Without an `fs` line the caller-provided default applies.
    pub fn read(path: &Path, default_fs: Option<f64>) -> Result<Waveform> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut fs = default_fs;
        let mut samples = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                if let Some((key, value)) = meta.split_once('=') {
                    if key.trim() == "fs" {
                        let hz: f64 = value.trim().parse().map_err(|_| Error::Parse {
                            file: path.to_path_buf(),
                            line: idx + 1,
                            message: format!("bad sampling rate '{}'", value.trim()),
                        })?;
                        fs = Some(hz);
                    }
                }
                continue;
            }
            let v: f64 = line.parse().map_err(|_| Error::Parse {
                file: path.to_path_buf(),
                line: idx + 1,
                message: format!("not a number: '{line}'"),
            })?;
            samples.push(v);
        }
        let fs = fs.ok_or_else(|| Error::Config(format!(
            "{} declares no sampling rate and no default was given",
            path.display()
        )))?;
        if fs <= 0.0 {
            return Err(Error::Config(format!("non-positive sampling rate {fs}")));
        }
        Ok(Waveform { samples, fs })
    }

    /// Write the same format back, with an `# fs=` header, atomically.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::with_capacity(self.samples.len() * 12 + 16);
        text.push_str(&format!("# fs={}\n", self.fs));
        for s in &self.samples {
            text.push_str(&format!("{s}\n"));
        }
        atomic_write(path, text.as_bytes())
    }
}

// ── Segmentation and resampling ─────────────────────────────────────────────

/// Cut a waveform into non-overlapping segments of `SEGMENT_SECONDS` at its
/// native rate; a trailing partial segment is dropped.
pub fn segment_waveform(waveform: &Waveform) -> Result<Vec<Vec<f64>>> {
    if waveform.fs <= 0.0 {
        return Err(Error::Config(format!("non-positive sampling rate {}", waveform.fs)));
    }
    let seg_len = (SEGMENT_SECONDS * waveform.fs).round() as usize;
    if seg_len == 0 {
        return Err(Error::Config(format!("sampling rate {} gives empty segments", waveform.fs)));
    }
    Ok(waveform.samples.chunks_exact(seg_len).map(|c| c.to_vec()).collect())
}

/// Linear interpolation by an integer factor. The output keeps the first
/// sample exactly and holds the final sample across the tail positions that
/// have no right neighbor; output length is exactly `factor * len`.
pub fn resample_linear(samples: &[f64], factor: usize) -> Result<Vec<f64>> {
    if factor == 0 {
        return Err(Error::Config("resampling factor must be at least 1".into()));
    }
    if factor == 1 {
        return Ok(samples.to_vec());
    }
    let n = samples.len();
    let mut out = Vec::with_capacity(n * factor);
    for j in 0..n * factor {
        let i = j / factor;
        let frac = (j % factor) as f64 / factor as f64;
        let v = if i + 1 < n {
            (1.0 - frac) * samples[i] + frac * samples[i + 1]
        } else {
            samples[n - 1]
        };
        out.push(v);
    }
    Ok(out)
}

/// Keep every `factor`-th sample, starting with the first.
pub fn decimate(samples: &[f64], factor: usize) -> Result<Vec<f64>> {
    if factor == 0 {
        return Err(Error::Config("decimation factor must be at least 1".into()));
    }
    Ok(samples.iter().step_by(factor).copied().collect())
}

// ── Normalization ───────────────────────────────────────────────────────────

/// Per-segment min-max bounds, kept so outputs can be mapped back.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub min: f64,
    pub max: f64,
}

/// Map a segment onto `[-1, 1]`: `2 * (x - min) / (max - min) - 1`. The
/// minimum lands exactly on -1 and the maximum exactly on +1.
pub fn normalize(segment: &[f64]) -> Result<(Vec<f64>, NormStats)> {
    let min = segment.iter().copied().fold(f64::INFINITY, f64::min);
    let max = segment.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if segment.is_empty() || !(max > min) {
        return Err(Error::DegenerateSegment {
            context: format!("{} samples, min {min}, max {max}", segment.len()),
        });
    }
    let scale = max - min;
    let out = segment.iter().map(|&x| 2.0 * (x - min) / scale - 1.0).collect();
    Ok((out, NormStats { min, max }))
}

/// Invert [`normalize`] using the stored bounds.
pub fn denormalize(segment: &[f64], stats: NormStats) -> Vec<f64> {
    let scale = stats.max - stats.min;
    segment.iter().map(|&y| (y + 1.0) * 0.5 * scale + stats.min).collect()
}

// ── Windowing and Fourier analysis ──────────────────────────────────────────

/// Symmetric Hanning window: `w[m] = 0.5 * (1 - cos(2 pi m / (N - 1)))`.
/// Both endpoints are exactly zero; odd lengths peak at exactly one.
pub fn hanning(len: usize) -> Vec<f64> {
    match len {
        0 => Vec::new(),
        1 => vec![1.0],
        n => (0..n)
            .map(|m| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * m as f64 / (n - 1) as f64).cos()))
            .collect(),
    }
}

/// One-sided complex short-time Fourier transform.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    /// Frame-major complex bins: `data[frame * bins + bin]`.
    pub data: Vec<Complex64>,
    pub frames: usize,
    /// One-sided bin count: `n_fft / 2 + 1`.
    pub bins: usize,
    pub n_fft: usize,
    pub hop: usize,
}

impl Spectrogram {
    pub fn at(&self, frame: usize, bin: usize) -> Complex64 {
        self.data[frame * self.bins + bin]
    }

    /// `|X|` per bin, frame-major.
    pub fn magnitude(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }

    /// `|X|^2` per bin, frame-major.
    pub fn power(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm_sqr()).collect()
    }
}

/// Hanning-windowed STFT with `floor((L - n_fft) / hop) + 1` frames and
/// one-sided bins `0..=n_fft/2`. No normalization is applied to the sums.
pub fn stft(samples: &[f64], n_fft: usize, hop: usize) -> Result<Spectrogram> {
    if n_fft == 0 {
        return Err(Error::Config("transform length must be at least 1".into()));
    }
    if hop == 0 {
        return Err(Error::Config("hop must be at least 1".into()));
    }
    if samples.len() < n_fft {
        return Err(Error::Shape(format!(
            "signal of {} samples is shorter than the {n_fft}-point transform",
            samples.len()
        )));
    }
    let frames = (samples.len() - n_fft) / hop + 1;
    let bins = n_fft / 2 + 1;
    let window = hanning(n_fft);
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let mut data = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for f in 0..frames {
        let start = f * hop;
        for (m, slot) in buf.iter_mut().enumerate() {
            *slot = Complex64::new(samples[start + m] * window[m], 0.0);
        }
        fft.process(&mut buf);
        data.extend_from_slice(&buf[..bins]);
    }
    Ok(Spectrogram { data, frames, bins, n_fft, hop })
}

/// The analysis spectrogram used throughout: 256-point transform, 128 hop.
pub fn spectrogram(samples: &[f64]) -> Result<Spectrogram> {
    stft(samples, STFT_LEN, STFT_HOP)
}

/// One-sided magnitude spectrum of a whole segment: zero-pad to `n_fft`,
/// transform, return `|X| / n_fft` for bins `0..=n_fft/2`.
pub fn magnitude_spectrum(samples: &[f64], n_fft: usize) -> Result<Vec<f64>> {
    if n_fft == 0 {
        return Err(Error::Config("transform length must be at least 1".into()));
    }
    if samples.len() > n_fft {
        return Err(Error::Shape(format!(
            "signal of {} samples does not fit a {n_fft}-point transform",
            samples.len()
        )));
    }
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for (slot, &s) in buf.iter_mut().zip(samples) {
        *slot = Complex64::new(s, 0.0);
    }
    FftPlanner::new().plan_fft_forward(n_fft).process(&mut buf);
    Ok(buf[..n_fft / 2 + 1].iter().map(|c| c.norm() / n_fft as f64).collect())
}

/// Brick-wall low-pass: zero every Fourier bin above `cutoff_hz` (and its
/// negative-frequency mirror), then invert. Used to emulate band-limited
/// sensors when building synthetic data.
pub fn low_pass_fft(samples: &[f64], fs: f64, cutoff_hz: f64) -> Result<Vec<f64>> {
    if fs <= 0.0 {
        return Err(Error::Config(format!("non-positive sampling rate {fs}")));
    }
    let n = samples.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut planner = FftPlanner::new();
    let mut buf: Vec<Complex64> = samples.iter().map(|&s| Complex64::new(s, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, slot) in buf.iter_mut().enumerate() {
        // Bin k spins at k * fs / n Hz; indexes past n/2 alias to negative
        // frequencies fs * (k - n) / n.
        let freq = if k <= n / 2 {
            k as f64 * fs / n as f64
        } else {
            (n - k) as f64 * fs / n as f64
        };
        if freq > cutoff_hz {
            *slot = Complex64::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    Ok(buf.iter().map(|c| c.re / n as f64).collect())
}

/// Write a spectrogram's power matrix as CSV: one header row of bin center
/// frequencies in Hz, then one row per frame.
pub fn export_spectrogram_csv(spec: &Spectrogram, fs: f64, path: &Path) -> Result<()> {
    let mut text = String::new();
    let header: Vec<String> =
        (0..spec.bins).map(|k| format!("{}", k as f64 * fs / spec.n_fft as f64)).collect();
    text.push_str(&header.join(","));
    text.push('\n');
    let power = spec.power();
    for f in 0..spec.frames {
        let row: Vec<String> =
            power[f * spec.bins..(f + 1) * spec.bins].iter().map(|p| format!("{p}")).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    atomic_write(path, text.as_bytes())
}
