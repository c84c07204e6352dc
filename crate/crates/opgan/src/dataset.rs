//! Paired datasets: discovering matched recordings on disk, cutting them
//! into aligned normalized segment pairs, splitting into train/test, and
//! generating a synthetic corpus for self-contained experiments.
//!
//! A dataset root holds one directory per device (`episensor/`, `csn/`,
//! `iphone/`, `android/`), each containing `<record_id>.txt` waveform files.
//! The reference recordings live under `episensor/`; a pair exists when the
//! same record id appears both there and under the chosen source device.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::signal::{
    decimate, low_pass_fft, normalize, resample_linear, segment_waveform, NormStats, Sensor,
    Waveform, REFERENCE_FS, SEGMENT_SECONDS,
};

/// One aligned training example: a band-limited source segment and its
/// full-bandwidth target, both upsampled to the reference rate and
/// independently normalized into `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentPair {
    pub record_id: String,
    pub segment_index: usize,
    pub source: Vec<f64>,
    pub target: Vec<f64>,
    pub source_stats: NormStats,
    pub target_stats: NormStats,
}

/// What [`load_dataset`] skipped and why.
#[derive(Debug, Default, Clone)]
pub struct LoadReport {
    /// Records found on both sides and paired.
    pub records_paired: usize,
    /// Record ids present under the reference directory only.
    pub missing_source: Vec<String>,
    /// Record ids present under the source directory only.
    pub missing_target: Vec<String>,
    /// Segment pairs dropped because one side was constant.
    pub degenerate_segments: usize,
}

fn record_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut map = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("txt") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                map.insert(stem.to_string(), path);
            }
        }
    }
    Ok(map)
}

fn read_at_rate(path: &Path, expected_fs: f64) -> Result<Waveform> {
    let w = Waveform::read(path, Some(expected_fs))?;
    if (w.fs - expected_fs).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "{} declares {} Hz but the device records at {} Hz",
            path.display(),
            w.fs,
            expected_fs
        )));
    }
    Ok(w)
}

/// Load every record the `sensor` directory shares with the reference
/// directory, segment both sides, upsample the source to the reference
/// rate, and normalize. Records missing a counterpart are reported and
/// skipped; malformed files abort the load; constant segments are dropped
/// pairwise and counted.
pub fn load_dataset(root: &Path, sensor: Sensor) -> Result<(Vec<SegmentPair>, LoadReport)> {
    let targets = record_files(&root.join(Sensor::Episensor.dir_name()))?;
    let sources = record_files(&root.join(sensor.dir_name()))?;
    let mut report = LoadReport::default();
    let mut pairs = Vec::new();

    for id in sources.keys() {
        if !targets.contains_key(id) {
            report.missing_target.push(id.clone());
        }
    }
    for (id, target_path) in &targets {
        let Some(source_path) = sources.get(id) else {
            report.missing_source.push(id.clone());
            continue;
        };
        let target_w = read_at_rate(target_path, REFERENCE_FS)?;
        let source_w = read_at_rate(source_path, sensor.native_fs())?;
        let target_segs = segment_waveform(&target_w)?;
        let source_segs = segment_waveform(&source_w)?;
        let n = target_segs.len().min(source_segs.len());
        report.records_paired += 1;
        for idx in 0..n {
            let upsampled = resample_linear(&source_segs[idx], sensor.upsample_factor())?;
            match (normalize(&upsampled), normalize(&target_segs[idx])) {
                (Ok((source, source_stats)), Ok((target, target_stats))) => {
                    pairs.push(SegmentPair {
                        record_id: id.clone(),
                        segment_index: idx,
                        source,
                        target,
                        source_stats,
                        target_stats,
                    });
                }
                _ => report.degenerate_segments += 1,
            }
        }
    }
    Ok((pairs, report))
}

// ── Splits ──────────────────────────────────────────────────────────────────

/// A train/test partition of segment pairs.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<SegmentPair>,
    pub test: Vec<SegmentPair>,
}

fn sorted_record_ids(pairs: &[SegmentPair]) -> Vec<String> {
    let set: BTreeSet<&str> = pairs.iter().map(|p| p.record_id.as_str()).collect();
    set.into_iter().map(str::to_string).collect()
}

fn partition_by_ids(pairs: Vec<SegmentPair>, test_ids: &BTreeSet<String>) -> Split {
    let (test, train) = pairs.into_iter().partition(|p| test_ids.contains(&p.record_id));
    Split { train, test }
}

/// Record-level 80/20 split: record ids are sorted, the first four fifths
/// train, the rest test. Whole records never straddle the boundary.
pub fn split_by_record(pairs: Vec<SegmentPair>) -> Split {
    let ids = sorted_record_ids(&pairs);
    let n = ids.len();
    let n_train = if n <= 1 { n } else { (4 * n).div_euclid(5).max(1) };
    let test_ids: BTreeSet<String> = ids[n_train..].iter().cloned().collect();
    partition_by_ids(pairs, &test_ids)
}

/// Split according to a `record_id,role` file where roles are `train` or
/// `test`; blank lines and `#` comments are skipped and unlisted records
/// default to train.
pub fn split_with_file(pairs: Vec<SegmentPair>, path: &Path) -> Result<Split> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut test_ids = BTreeSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((id, role)) = line.split_once(',') else {
            return Err(Error::Parse {
                file: path.to_path_buf(),
                line: idx + 1,
                message: format!("expected 'record_id,role', got '{line}'"),
            });
        };
        match role.trim() {
            "train" => {}
            "test" => {
                test_ids.insert(id.trim().to_string());
            }
            other => {
                return Err(Error::Parse {
                    file: path.to_path_buf(),
                    line: idx + 1,
                    message: format!("role must be 'train' or 'test', got '{other}'"),
                });
            }
        }
    }
    Ok(partition_by_ids(pairs, &test_ids))
}

/// Segment-level holdout: the last `test_per_record` segment indices of each
/// record go to test, everything earlier trains. Suited to synthetic records
/// whose structure persists across time.
pub fn split_by_segment_tail(pairs: Vec<SegmentPair>, test_per_record: usize) -> Split {
    let mut max_index: BTreeMap<String, usize> = BTreeMap::new();
    for p in &pairs {
        let slot = max_index.entry(p.record_id.clone()).or_insert(0);
        *slot = (*slot).max(p.segment_index);
    }
    let (test, train) = pairs.into_iter().partition(|p| {
        let last = max_index[&p.record_id];
        p.segment_index + test_per_record > last
    });
    Split { train, test }
}

// ── Synthetic corpus ────────────────────────────────────────────────────────

/// Band edge used when synthesizing the band-limited side, in Hz.
pub const TOY_BAND_EDGE_HZ: f64 = 25.0;

/// Generate a deterministic synthetic corpus. Each record is a continuous
/// sum of six sinusoids — three below the band edge (5–24 Hz, amplitudes
/// in `[0.5, 1]`) and three above it (26–95 Hz, amplitudes in
/// `[0.08, 0.25]`), with random phases, all fixed per record. As in real
/// ground motion, most energy sits below the band edge and the high band
/// carries the finer texture. Frequencies land on the segment-periodic
/// grid (whole cycles per segment), so every segment of a record repeats
/// the same underlying pattern and only the noise varies — which keeps
/// the restoration map consistent between training and held-out segments.
/// The target adds uniform noise at 1% of the clean peak; the source is
/// the target brick-wall low-passed at the band edge, decimated to a
/// quarter of the rate, and linearly upsampled back — emulating a slow
/// sensor observing the same motion.
pub fn toy_dataset(
    seed: u64,
    records: usize,
    segments_per_record: usize,
) -> Result<Vec<SegmentPair>> {
    if records == 0 || segments_per_record == 0 {
        return Err(Error::Config(
            "synthetic corpus needs at least one record and one segment per record".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seg_len = (SEGMENT_SECONDS * REFERENCE_FS).round() as usize;
    let mut pairs = Vec::with_capacity(records * segments_per_record);
    for r in 0..records {
        let record_id = format!("toy-{r:03}");
        let total = segments_per_record * seg_len;
        // Cycles per segment: 25..120 spans 5.0-23.8 Hz, 130..475 spans
        // 26.0-94.8 Hz at the 0.2 Hz grid spacing.
        let mut components = Vec::with_capacity(6);
        for _ in 0..3 {
            components.push((
                rng.gen_range(25u32..120) as f64 / SEGMENT_SECONDS,
                rng.gen_range(0.5..1.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
            ));
        }
        for _ in 0..3 {
            components.push((
                rng.gen_range(130u32..475) as f64 / SEGMENT_SECONDS,
                rng.gen_range(0.08..0.25),
                rng.gen_range(0.0..std::f64::consts::TAU),
            ));
        }
        let clean: Vec<f64> = (0..total)
            .map(|i| {
                let t = i as f64 / REFERENCE_FS;
                components
                    .iter()
                    .map(|&(f, a, p)| a * (std::f64::consts::TAU * f * t + p).sin())
                    .sum()
            })
            .collect();
        let peak = clean.iter().fold(0.0_f64, |m, &x| m.max(x.abs()));
        let noise_amp = 0.01 * peak;
        let target_record: Vec<f64> =
            clean.iter().map(|&c| c + rng.gen_range(-noise_amp..noise_amp)).collect();
        let band_limited = low_pass_fft(&target_record, REFERENCE_FS, TOY_BAND_EDGE_HZ)?;
        let source_record = resample_linear(&decimate(&band_limited, 4)?, 4)?;

        for s in 0..segments_per_record {
            let span = s * seg_len..(s + 1) * seg_len;
            let (source, source_stats) = normalize(&source_record[span.clone()])?;
            let (target, target_stats) = normalize(&target_record[span])?;
            pairs.push(SegmentPair {
                record_id: record_id.clone(),
                segment_index: s,
                source,
                target,
                source_stats,
                target_stats,
            });
        }
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::magnitude_spectrum;

    fn write_ramp(path: &Path, n: usize, fs: f64) {
        let w = Waveform {
            samples: (0..n).map(|i| (i as f64 * 0.01).sin() + i as f64 * 1e-4).collect(),
            fs,
        };
        w.write(path).unwrap();
    }

    #[test]
    fn toy_dataset_is_deterministic_per_seed() {
        let a = toy_dataset(7, 2, 3).unwrap();
        let b = toy_dataset(7, 2, 3).unwrap();
        let c = toy_dataset(8, 2, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 6);
    }

    #[test]
    fn toy_pairs_are_normalized_thousand_sample_segments() {
        let pairs = toy_dataset(3, 1, 2).unwrap();
        assert_eq!(pairs.len(), 2);
        for p in &pairs {
            assert_eq!(p.source.len(), 1000);
            assert_eq!(p.target.len(), 1000);
            for side in [&p.source, &p.target] {
                let min = side.iter().copied().fold(f64::INFINITY, f64::min);
                let max = side.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(min, -1.0);
                assert_eq!(max, 1.0);
            }
        }
        assert_eq!(pairs[0].record_id, "toy-000");
        assert_eq!(pairs[1].segment_index, 1);
    }

    #[test]
    fn toy_source_lacks_the_high_band_the_target_has() {
        // Individual records vary (interpolation images can rival the small
        // genuine high band), so the contrast is asserted on corpus means.
        let pairs = toy_dataset(11, 8, 1).unwrap();
        let band_energy = |samples: &[f64]| {
            let spectrum = magnitude_spectrum(samples, 1024).unwrap();
            // Bin k sits at k * 200 / 1024 Hz; 30 Hz is bin 153.6.
            let cut = (30.0 * 1024.0 / REFERENCE_FS).ceil() as usize;
            let high: f64 = spectrum[cut..].iter().map(|m| m * m).sum();
            let total: f64 = spectrum.iter().map(|m| m * m).sum();
            high / total
        };
        let n = pairs.len() as f64;
        let source_mean = pairs.iter().map(|p| band_energy(&p.source)).sum::<f64>() / n;
        let target_mean = pairs.iter().map(|p| band_energy(&p.target)).sum::<f64>() / n;
        assert!(target_mean > 0.03, "target lost its high band: {target_mean:.4}");
        assert!(
            source_mean < 0.65 * target_mean,
            "source keeps too much high band: {source_mean:.4} vs {target_mean:.4}"
        );
    }

    #[test]
    fn load_pairs_matching_records_and_reports_orphans() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::create_dir_all(root.join("episensor")).unwrap();
        std::fs::create_dir_all(root.join("csn")).unwrap();
        write_ramp(&root.join("episensor/rec1.txt"), 2000, 200.0);
        write_ramp(&root.join("csn/rec1.txt"), 500, 50.0);
        write_ramp(&root.join("episensor/rec2.txt"), 1000, 200.0);
        write_ramp(&root.join("csn/rec9.txt"), 250, 50.0);

        let (pairs, report) = load_dataset(root, Sensor::Csn).unwrap();
        assert_eq!(pairs.len(), 2);
        assert!(pairs.iter().all(|p| p.record_id == "rec1"));
        assert!(pairs.iter().all(|p| p.source.len() == 1000 && p.target.len() == 1000));
        assert_eq!(pairs[0].segment_index, 0);
        assert_eq!(pairs[1].segment_index, 1);
        assert_eq!(report.records_paired, 1);
        assert_eq!(report.missing_source, vec!["rec2".to_string()]);
        assert_eq!(report.missing_target, vec!["rec9".to_string()]);
    }

    #[test]
    fn pair_count_is_the_shorter_side() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::create_dir_all(root.join("episensor")).unwrap();
        std::fs::create_dir_all(root.join("csn")).unwrap();
        write_ramp(&root.join("episensor/rec.txt"), 3000, 200.0);
        write_ramp(&root.join("csn/rec.txt"), 500, 50.0);
        let (pairs, _) = load_dataset(root, Sensor::Csn).unwrap();
        assert_eq!(pairs.len(), 2);
    }

    #[test]
    fn constant_segments_are_dropped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::create_dir_all(root.join("episensor")).unwrap();
        std::fs::create_dir_all(root.join("csn")).unwrap();
        write_ramp(&root.join("episensor/rec.txt"), 2000, 200.0);
        let mut samples = vec![5.0; 250];
        samples.extend((0..250).map(|i| (i as f64 * 0.1).sin()));
        Waveform { samples, fs: 50.0 }.write(&root.join("csn/rec.txt")).unwrap();

        let (pairs, report) = load_dataset(root, Sensor::Csn).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].segment_index, 1);
        assert_eq!(report.degenerate_segments, 1);
    }

    #[test]
    fn mismatched_rate_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::create_dir_all(root.join("episensor")).unwrap();
        std::fs::create_dir_all(root.join("csn")).unwrap();
        write_ramp(&root.join("episensor/rec.txt"), 1000, 200.0);
        write_ramp(&root.join("csn/rec.txt"), 250, 100.0);
        assert!(matches!(load_dataset(root, Sensor::Csn), Err(Error::Config(_))));
    }

    #[test]
    fn record_split_holds_out_the_tail_fifth() {
        let mut pairs = Vec::new();
        for r in 0..5 {
            for s in 0..2 {
                let mut p = toy_dataset(1, 1, 1).unwrap().remove(0);
                p.record_id = format!("rec{r}");
                p.segment_index = s;
                pairs.push(p);
            }
        }
        let split = split_by_record(pairs);
        assert_eq!(split.train.len(), 8);
        assert_eq!(split.test.len(), 2);
        assert!(split.test.iter().all(|p| p.record_id == "rec4"));
        let train_ids = sorted_record_ids(&split.train);
        assert!(!train_ids.contains(&"rec4".to_string()));
    }

    #[test]
    fn split_file_overrides_and_rejects_bad_roles() {
        let dir = tempfile::tempdir().unwrap();
        let mut pairs = Vec::new();
        for r in 0..3 {
            let mut p = toy_dataset(1, 1, 1).unwrap().remove(0);
            p.record_id = format!("rec{r}");
            pairs.push(p);
        }
        let path = dir.path().join("split.csv");
        std::fs::write(&path, "# roles\nrec1,test\nrec0,train\n").unwrap();
        let split = split_with_file(pairs.clone(), &path).unwrap();
        assert_eq!(split.test.len(), 1);
        assert_eq!(split.test[0].record_id, "rec1");
        assert_eq!(split.train.len(), 2);

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "rec0,validate\n").unwrap();
        match split_with_file(pairs, &bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn segment_tail_split_keeps_late_segments_for_test() {
        let pairs = toy_dataset(2, 2, 5).unwrap();
        let split = split_by_segment_tail(pairs, 2);
        assert_eq!(split.train.len(), 6);
        assert_eq!(split.test.len(), 4);
        assert!(split.train.iter().all(|p| p.segment_index < 3));
        assert!(split.test.iter().all(|p| p.segment_index >= 3));
    }
}
