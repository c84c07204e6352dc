//! Three-row comparison figures: input, synthesized, and target segments,
//! each with a time trace and a one-sided magnitude spectrum, rendered as a
//! self-contained SVG whose title carries the four PSNR numbers.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{format_db, score_segment, PSNR_SPECTRUM_LEN};
use crate::signal::magnitude_spectrum;
use crate::util::atomic_write;

/// The three aligned segments of one comparison figure.
#[derive(Debug, Clone, Copy)]
pub struct Triplet<'a> {
    pub input: &'a [f64],
    pub synthesized: &'a [f64],
    pub target: &'a [f64],
    /// Sampling rate, which fixes the time and frequency axes.
    pub fs: f64,
}

const WIDTH: f64 = 1000.0;
const HEIGHT: f64 = 740.0;
const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 180.0;
const COL_X: [f64; 2] = [65.0, 555.0];
const ROW_Y: [f64; 3] = [60.0, 285.0, 510.0];

fn polyline(points: &[(f64, f64)]) -> String {
    let mut attr = String::with_capacity(points.len() * 14);
    for (x, y) in points {
        let _ = write!(attr, "{x:.2},{y:.2} ");
    }
    attr.pop();
    attr
}

/// Map samples into panel coordinates, y spanning `lo..hi` bottom-to-top.
fn trace_points(values: &[f64], px: f64, py: f64, lo: f64, hi: f64) -> Vec<(f64, f64)> {
    let n = values.len();
    let span = hi - lo;
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let x = px + PANEL_W * i as f64 / (n - 1).max(1) as f64;
            let y = py + PANEL_H * (1.0 - (v - lo) / span);
            (x, y)
        })
        .collect()
}

fn panel(
    svg: &mut String,
    px: f64,
    py: f64,
    caption: &str,
    points: &[(f64, f64)],
    x_end_label: &str,
    y_top_label: &str,
    y_bottom_label: &str,
    color: &str,
) {
    let _ = write!(
        svg,
        r##"<rect x="{px}" y="{py}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#888" stroke-width="1"/>"##
    );
    let _ = write!(
        svg,
        r##"<text x="{}" y="{}" font-size="12" text-anchor="middle" fill="#333">{caption}</text>"##,
        px + PANEL_W / 2.0,
        py - 6.0
    );
    let _ = write!(
        svg,
        r##"<text x="{}" y="{}" font-size="10" text-anchor="end" fill="#555">{y_top_label}</text>"##,
        px - 4.0,
        py + 10.0
    );
    let _ = write!(
        svg,
        r##"<text x="{}" y="{}" font-size="10" text-anchor="end" fill="#555">{y_bottom_label}</text>"##,
        px - 4.0,
        py + PANEL_H
    );
    let _ = write!(
        svg,
        r##"<text x="{}" y="{}" font-size="10" text-anchor="start" fill="#555">0</text>"##,
        px,
        py + PANEL_H + 14.0
    );
    let _ = write!(
        svg,
        r##"<text x="{}" y="{}" font-size="10" text-anchor="end" fill="#555">{x_end_label}</text>"##,
        px + PANEL_W,
        py + PANEL_H + 14.0
    );
    let _ = write!(
        svg,
        r##"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1"/>"##,
        polyline(points)
    );
}

fn fmt_num(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e6 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Render the figure as an SVG document string.
pub fn render_triplet_svg(t: &Triplet<'_>) -> Result<String> {
    let n = t.input.len();
    if n == 0 || t.synthesized.len() != n || t.target.len() != n {
        return Err(Error::Shape(format!(
            "triplet segments must be non-empty and equally long, got {}/{}/{}",
            t.input.len(),
            t.synthesized.len(),
            t.target.len()
        )));
    }
    if t.fs <= 0.0 {
        return Err(Error::Config(format!("non-positive sampling rate {}", t.fs)));
    }
    let scores = score_segment(t.input, t.synthesized, t.target)?;
    let title = format!(
        "Input PSNR: {} | Output PSNR: {} || FFT Input PSNR: {} | FFT Output PSNR: {}",
        format_db(scores.input_time.db),
        format_db(scores.output_time.db),
        format_db(scores.input_freq.db),
        format_db(scores.output_freq.db),
    );

    let rows = [("Input", t.input), ("Synthesized", t.synthesized), ("Target", t.target)];
    let spectra: Vec<Vec<f64>> = rows
        .iter()
        .map(|(_, samples)| magnitude_spectrum(samples, PSNR_SPECTRUM_LEN))
        .collect::<Result<_>>()?;

    // Shared symmetric amplitude range and shared spectrum ceiling, so the
    // three rows are visually comparable.
    let amp = rows
        .iter()
        .flat_map(|(_, s)| s.iter())
        .fold(0.0_f64, |m, &v| m.max(v.abs()))
        .max(1e-12)
        * 1.05;
    let spec_top = spectra
        .iter()
        .flatten()
        .fold(0.0_f64, |m, &v| m.max(v))
        .max(1e-12)
        * 1.05;

    let seconds = n as f64 / t.fs;
    let nyquist = t.fs / 2.0;

    let mut svg = String::with_capacity(64 * 1024);
    let _ = write!(
        svg,
        r##"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif">"##
    );
    let _ = write!(svg, r##"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"##);
    let _ = write!(
        svg,
        r##"<text x="{}" y="24" font-size="15" text-anchor="middle" fill="#111">{title}</text>"##,
        WIDTH / 2.0
    );
    for (row, ((name, samples), spectrum)) in rows.iter().zip(&spectra).enumerate() {
        let py = ROW_Y[row];
        let time_pts = trace_points(samples, COL_X[0], py, -amp, amp);
        panel(
            &mut svg,
            COL_X[0],
            py,
            &format!("{name} — time (s)"),
            &time_pts,
            &fmt_num(seconds),
            &fmt_num(amp),
            &fmt_num(-amp),
            "#1f5fa8",
        );
        let spec_pts = trace_points(spectrum, COL_X[1], py, 0.0, spec_top);
        panel(
            &mut svg,
            COL_X[1],
            py,
            &format!("{name} — magnitude spectrum (Hz)"),
            &spec_pts,
            &fmt_num(nyquist),
            &fmt_num(spec_top),
            "0",
            "#a8351f",
        );
    }
    svg.push_str("</svg>");
    Ok(svg)
}

/// Render and write atomically.
pub fn plot_triplet(t: &Triplet<'_>, path: &Path) -> Result<()> {
    atomic_write(path, render_triplet_svg(t)?.as_bytes())
}
