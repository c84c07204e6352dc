//! Peak signal-to-noise metrics in the time and frequency domains, and the
//! aggregate evaluation report.
//!
//! `PSNR = 10 * log10(max(Y)^2 / MSE(Y, GT))`, where `Y` is the signal
//! being judged (the input when scoring the raw source, the synthesized
//! output when scoring the model) and `MSE` the mean squared sample
//! difference. The frequency-domain variant applies the same formula to
//! one-sided 1024-point magnitude spectra of whole segments. Segments are
//! compared in normalized units, where `max(Y)` is 1 by construction.

use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::SegmentPair;
use crate::error::{Error, Result};
use crate::model::Synthesizer;
use crate::signal::magnitude_spectrum;
use crate::util::atomic_write;

/// Identical signals have infinite PSNR; reports use this cap instead so
/// aggregation stays total. Values are clamped to `[-CAP, CAP]`.
pub const PSNR_CAP_DB: f64 = 160.0;

/// Transform length of the frequency-domain comparison.
pub const PSNR_SPECTRUM_LEN: usize = 1024;

/// A PSNR value plus whether the cap was applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Psnr {
    pub db: f64,
    pub capped: bool,
}

/// Time-domain PSNR of `y` against `gt`. Zero MSE yields the cap with the
/// flag set rather than infinity.
pub fn psnr(y: &[f64], gt: &[f64]) -> Result<Psnr> {
    if y.len() != gt.len() || y.is_empty() {
        return Err(Error::Shape(format!(
            "segments must be non-empty and equally long, got {} and {}",
            y.len(),
            gt.len()
        )));
    }
    let peak = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mse = y.iter().zip(gt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64;
    if mse == 0.0 {
        return Ok(Psnr { db: PSNR_CAP_DB, capped: true });
    }
    let raw = 10.0 * ((peak * peak) / mse).log10();
    let db = raw.clamp(-PSNR_CAP_DB, PSNR_CAP_DB);
    Ok(Psnr { db, capped: db != raw })
}

/// Frequency-domain PSNR: [`psnr`] over one-sided 1024-point magnitude
/// spectra of the two segments.
pub fn psnr_freq(y: &[f64], gt: &[f64]) -> Result<Psnr> {
    if y.len() != gt.len() {
        return Err(Error::Shape(format!(
            "segments must be equally long, got {} and {}",
            y.len(),
            gt.len()
        )));
    }
    let y_spec = magnitude_spectrum(y, PSNR_SPECTRUM_LEN)?;
    let gt_spec = magnitude_spectrum(gt, PSNR_SPECTRUM_LEN)?;
    psnr(&y_spec, &gt_spec)
}

/// The four PSNR numbers every report and plot title carries, for one
/// segment pair.
#[derive(Debug, Clone, Copy)]
pub struct SegmentScores {
    pub input_time: Psnr,
    pub output_time: Psnr,
    pub input_freq: Psnr,
    pub output_freq: Psnr,
}

/// Score one synthesized segment against its pair.
pub fn score_segment(source: &[f64], synthesized: &[f64], target: &[f64]) -> Result<SegmentScores> {
    Ok(SegmentScores {
        input_time: psnr(source, target)?,
        output_time: psnr(synthesized, target)?,
        input_freq: psnr_freq(source, target)?,
        output_freq: psnr_freq(synthesized, target)?,
    })
}

/// One aggregate evaluation row: the four PSNRs averaged over a test set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub sensor: String,
    pub input_psnr_time: f64,
    pub output_psnr_time: f64,
    pub input_psnr_freq: f64,
    pub output_psnr_freq: f64,
    pub n_segments: usize,
    /// Segments where any of the four PSNRs hit the cap.
    pub capped_segments: usize,
}

/// Run the model over every test pair and average the four PSNRs.
pub fn evaluate<S: Synthesizer>(model: &S, pairs: &[SegmentPair], sensor: &str) -> Result<EvalRow> {
    if pairs.is_empty() {
        return Err(Error::Config("evaluation needs at least one test segment".into()));
    }
    let mut sums = [0.0_f64; 4];
    let mut capped_segments = 0;
    for pair in pairs {
        let synthesized = model.synthesize(&pair.source)?;
        let scores = score_segment(&pair.source, &synthesized, &pair.target)?;
        let four = [scores.input_time, scores.output_time, scores.input_freq, scores.output_freq];
        for (sum, psnr) in sums.iter_mut().zip(four) {
            *sum += psnr.db;
        }
        if four.iter().any(|p| p.capped) {
            capped_segments += 1;
        }
    }
    let n = pairs.len() as f64;
    Ok(EvalRow {
        sensor: sensor.to_string(),
        input_psnr_time: sums[0] / n,
        output_psnr_time: sums[1] / n,
        input_psnr_freq: sums[2] / n,
        output_psnr_freq: sums[3] / n,
        n_segments: pairs.len(),
        capped_segments,
    })
}

/// The shared two-decimal rounding every report and plot title uses.
pub fn format_db(db: f64) -> String {
    format!("{db:.2}")
}

/// Render rows as CSV: `sensor,side,psnr_time_db,psnr_freq_db,n_segments`,
/// one `input` and one `output` line per row.
pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from("sensor,side,psnr_time_db,psnr_freq_db,n_segments\n");
    for row in rows {
        let _ = writeln!(
            out,
            "{},input,{},{},{}",
            row.sensor,
            format_db(row.input_psnr_time),
            format_db(row.input_psnr_freq),
            row.n_segments
        );
        let _ = writeln!(
            out,
            "{},output,{},{},{}",
            row.sensor,
            format_db(row.output_psnr_time),
            format_db(row.output_psnr_freq),
            row.n_segments
        );
    }
    out
}

/// Write [`eval_csv`] atomically.
pub fn write_eval_csv(rows: &[EvalRow], path: &Path) -> Result<()> {
    atomic_write(path, eval_csv(rows).as_bytes())
}

/// Human-readable table of the same numbers.
pub fn eval_table(rows: &[EvalRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<12} {:<8} {:>14} {:>14} {:>10}", "sensor", "side", "psnr_time_db", "psnr_freq_db", "segments");
    for row in rows {
        let _ = writeln!(
            out,
            "{:<12} {:<8} {:>14} {:>14} {:>10}",
            row.sensor,
            "input",
            format_db(row.input_psnr_time),
            format_db(row.input_psnr_freq),
            row.n_segments
        );
        let _ = writeln!(
            out,
            "{:<12} {:<8} {:>14} {:>14} {:>10}",
            row.sensor,
            "output",
            format_db(row.output_psnr_time),
            format_db(row.output_psnr_freq),
            row.n_segments
        );
        if row.capped_segments > 0 {
            let _ = writeln!(
                out,
                "{:<12} note: {} of {} segments hit the {:.0} dB cap",
                "", row.capped_segments, row.n_segments, PSNR_CAP_DB
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::toy_dataset;

    /// Passes the input straight through.
    struct Identity;
    impl Synthesizer for Identity {
        fn synthesize(&self, segment: &[f64]) -> Result<Vec<f64>> {
            Ok(segment.to_vec())
        }
    }

    /// Always returns a fixed segment.
    struct Oracle(Vec<f64>);
    impl Synthesizer for Oracle {
        fn synthesize(&self, _segment: &[f64]) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn psnr_hand_value_is_twenty_db() {
        // max(Y) = 1, MSE = (0.1^2 + 0.1^2) / 2 = 0.01 → 20 dB.
        let p = psnr(&[1.0, 0.0], &[0.9, -0.1]).unwrap();
        assert!((p.db - 20.0).abs() <= 1e-9);
        assert!(!p.capped);
    }

    #[test]
    fn doubling_the_error_costs_six_db() {
        let y = vec![1.0, 0.2, -0.4, 0.8];
        let e = [0.05, -0.02, 0.03, -0.04];
        let gt1: Vec<f64> = y.iter().zip(&e).map(|(a, b)| a + b).collect();
        let gt2: Vec<f64> = y.iter().zip(&e).map(|(a, b)| a + 2.0 * b).collect();
        let p1 = psnr(&y, &gt1).unwrap();
        let p2 = psnr(&y, &gt2).unwrap();
        let drop = p1.db - p2.db;
        assert!((drop - 10.0 * 4.0_f64.log10()).abs() <= 1e-9, "drop {drop}");
        assert!((drop - 6.0205999132796).abs() <= 1e-9);
    }

    #[test]
    fn identical_signals_hit_the_cap() {
        let y = vec![0.3, -0.5, 0.9];
        let p = psnr(&y, &y).unwrap();
        assert_eq!(p.db, PSNR_CAP_DB);
        assert!(p.capped);
    }

    #[test]
    fn silent_output_clamps_to_the_negative_cap() {
        let p = psnr(&[0.0, 0.0], &[1.0, -1.0]).unwrap();
        assert_eq!(p.db, -PSNR_CAP_DB);
        assert!(p.capped);
    }

    #[test]
    fn psnr_freq_ignores_sign_flips() {
        let y: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.071).sin()).collect();
        let flipped: Vec<f64> = y.iter().map(|v| -v).collect();
        let p = psnr_freq(&flipped, &y).unwrap();
        assert_eq!(p.db, PSNR_CAP_DB);
        assert!(p.capped);
        let q = psnr_freq(&y, &y).unwrap();
        assert!(q.capped);
    }

    #[test]
    fn psnr_freq_matches_an_explicit_dft_route() {
        let y: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.113).sin() * 0.7).collect();
        let gt: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.127).cos() * 0.8).collect();
        let via_fn = psnr_freq(&y, &gt).unwrap();
        let y_spec = magnitude_spectrum(&y, PSNR_SPECTRUM_LEN).unwrap();
        let gt_spec = magnitude_spectrum(&gt, PSNR_SPECTRUM_LEN).unwrap();
        let via_spectra = psnr(&y_spec, &gt_spec).unwrap();
        assert!((via_fn.db - via_spectra.db).abs() <= 1e-9);
    }

    #[test]
    fn error_scaling_is_twenty_log_c() {
        // Fixed y, error scaled by c → PSNR drops by exactly 20 log10(c).
        let y = vec![0.9, -0.3, 0.6, 0.1];
        let e = [0.01, 0.02, -0.015, 0.005];
        for c in [2.0, 5.0, 10.0] {
            let gt_base: Vec<f64> = y.iter().zip(&e).map(|(a, b)| a + b).collect();
            let gt_scaled: Vec<f64> = y.iter().zip(&e).map(|(a, b)| a + c * b).collect();
            let drop = psnr(&y, &gt_base).unwrap().db - psnr(&y, &gt_scaled).unwrap().db;
            assert!((drop - 20.0 * c.log10()).abs() <= 1e-9);
        }
    }

    #[test]
    fn identity_model_reproduces_input_columns() {
        let pairs = toy_dataset(5, 2, 3).unwrap();
        let row = evaluate(&Identity, &pairs, "csn").unwrap();
        assert!((row.input_psnr_time - row.output_psnr_time).abs() <= 1e-9);
        assert!((row.input_psnr_freq - row.output_psnr_freq).abs() <= 1e-9);
        assert_eq!(row.n_segments, 6);
    }

    #[test]
    fn perfect_model_is_capped_and_flagged() {
        let pairs = toy_dataset(6, 1, 1).unwrap();
        let row = evaluate(&Oracle(pairs[0].target.clone()), &pairs, "csn").unwrap();
        assert_eq!(row.output_psnr_time, PSNR_CAP_DB);
        assert_eq!(row.output_psnr_freq, PSNR_CAP_DB);
        assert_eq!(row.capped_segments, 1);
    }

    #[test]
    fn empty_test_set_is_rejected() {
        assert!(evaluate(&Identity, &[], "csn").is_err());
        assert!(psnr(&[], &[]).is_err());
        assert!(psnr(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn csv_report_shape_and_rounding() {
        let row = EvalRow {
            sensor: "csn".into(),
            input_psnr_time: 15.504999,
            output_psnr_time: 18.08,
            input_psnr_freq: 10.2,
            output_psnr_freq: 15.349,
            n_segments: 20,
            capped_segments: 0,
        };
        let csv = eval_csv(&[row.clone()]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "sensor,side,psnr_time_db,psnr_freq_db,n_segments");
        assert_eq!(lines[1], "csn,input,15.50,10.20,20");
        assert_eq!(lines[2], "csn,output,18.08,15.35,20");
        assert_eq!(lines.len(), 3);
        let table = eval_table(&[row]);
        assert!(table.contains("18.08"));
        assert!(table.contains("input"));
    }
}
