//! The adversarial training loop: one discriminator update on a detached
//! synthesized segment, then one generator update through the full weighted
//! objective, per iteration, with seeded shuffling, checkpointing, and an
//! append-only loss log.
//!
//! Determinism contract: everything downstream of the seed — parameter
//! initialization, epoch shuffling, and the single-threaded update order —
//! is reproducible bit-for-bit. Resuming from a checkpoint replays the
//! shuffle sequence instead of persisting generator state, so an
//! interrupted run continues on the exact trajectory of an uninterrupted
//! one.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::AdamState;
use crate::config::TrainConfig;
use crate::container::{load_checkpoint, save_checkpoint, save_generator, Checkpoint};
use crate::dataset::SegmentPair;
use crate::error::{Error, Result};
use crate::losses::{discriminator_loss_graph, generator_loss_graph};
use crate::model::{DiscriminatorModel, GeneratorModel, NETWORK_LEN, SEGMENT_LEN};
use crate::tape::{Tape, Var};

/// The loss components of one iteration, as logged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationLog {
    /// 1-based iteration number.
    pub iter: usize,
    pub adv_g: f64,
    pub adv_d: f64,
    pub time: f64,
    pub stft: f64,
    pub total: f64,
    /// Milliseconds spent on the iteration; 0 unless timing was requested,
    /// so identical runs write identical logs.
    pub wallclock_ms: f64,
}

/// Everything a finished run reports besides the model itself.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub logs: Vec<IterationLog>,
    pub loss_csv: Option<PathBuf>,
    pub model_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
}

pub const LOSS_CSV_HEADER: &str = "iter,adv_g,adv_d,time,stft,total,wallclock_ms";

fn csv_line(log: &IterationLog) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        log.iter, log.adv_g, log.adv_d, log.time, log.stft, log.total, log.wallclock_ms
    )
}

// ── Epoch scheduling ────────────────────────────────────────────────────────

/// Hands out pair indices in shuffled epoch order. The shuffle stream is
/// separate from the initialization stream so replaying draws on resume
/// cannot disturb anything else.
struct PairScheduler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    n: usize,
}

impl PairScheduler {
    fn new(n: usize, seed: u64) -> PairScheduler {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        PairScheduler { rng, order: Vec::new(), pos: 0, n }
    }

    fn next(&mut self) -> usize {
        if self.pos >= self.order.len() {
            let mut order: Vec<usize> = (0..self.n).collect();
            order.shuffle(&mut self.rng);
            self.order = order;
            self.pos = 0;
        }
        let idx = self.order[self.pos];
        self.pos += 1;
        idx
    }

    fn replay(&mut self, draws: usize) {
        for _ in 0..draws {
            self.next();
        }
    }
}

// ── Segment plumbing ────────────────────────────────────────────────────────

/// Center-pad a segment with zeros up to `target_len`, the same placement
/// the tape's crop/pad primitive uses (odd remainders pad one extra sample
/// on the right).
fn pad_centered(segment: &[f64], target_len: usize) -> Vec<f64> {
    let left = (target_len - segment.len()) / 2;
    let mut out = vec![0.0; target_len];
    out[left..left + segment.len()].copy_from_slice(segment);
    out
}

fn check_pairs(pairs: &[SegmentPair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Config("training needs at least one segment pair".into()));
    }
    for p in pairs {
        if p.source.len() != SEGMENT_LEN || p.target.len() != SEGMENT_LEN {
            return Err(Error::Shape(format!(
                "record '{}' segment {} has lengths {}/{}, expected {SEGMENT_LEN}",
                p.record_id,
                p.segment_index,
                p.source.len(),
                p.target.len()
            )));
        }
    }
    Ok(())
}

// ── The trainer ─────────────────────────────────────────────────────────────

/// Holds models, optimizer states, and the shuffle position of a run.
pub struct Trainer {
    config: TrainConfig,
    generator: GeneratorModel,
    discriminator: DiscriminatorModel,
    generator_adam: AdamState,
    discriminator_adam: AdamState,
    scheduler: PairScheduler,
    iteration: usize,
}

impl Trainer {
    /// Fresh models from the config's seed.
    pub fn new(config: TrainConfig, n_pairs: usize) -> Result<Trainer> {
        config.validate()?;
        if n_pairs == 0 {
            return Err(Error::Config("training needs at least one segment pair".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = GeneratorModel::init(config.generator, &mut rng)?;
        let discriminator = DiscriminatorModel::init(config.discriminator, &mut rng)?;
        let generator_adam = AdamState::new(&generator.params());
        let discriminator_adam = AdamState::new(&discriminator.params());
        let scheduler = PairScheduler::new(n_pairs, config.seed);
        Ok(Trainer {
            config,
            generator,
            discriminator,
            generator_adam,
            discriminator_adam,
            scheduler,
            iteration: 0,
        })
    }

    /// Rebuild a trainer mid-run: model and optimizer state come from the
    /// checkpoint, and the shuffle sequence is replayed up to the saved
    /// iteration.
    pub fn from_checkpoint(checkpoint: Checkpoint, n_pairs: usize) -> Result<Trainer> {
        checkpoint.config.validate()?;
        if n_pairs == 0 {
            return Err(Error::Config("training needs at least one segment pair".into()));
        }
        let mut scheduler = PairScheduler::new(n_pairs, checkpoint.config.seed);
        scheduler.replay(checkpoint.iteration * checkpoint.config.batch_size);
        Ok(Trainer {
            scheduler,
            iteration: checkpoint.iteration,
            generator: checkpoint.generator,
            discriminator: checkpoint.discriminator,
            generator_adam: checkpoint.generator_adam,
            discriminator_adam: checkpoint.discriminator_adam,
            config: checkpoint.config,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn generator(&self) -> &GeneratorModel {
        &self.generator
    }

    /// Snapshot the complete resumable state.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            iteration: self.iteration,
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
            generator_adam: self.generator_adam.clone(),
            discriminator_adam: self.discriminator_adam.clone(),
        }
    }

    /// The trained artifact; the discriminator is dropped here.
    pub fn into_generator(self) -> GeneratorModel {
        self.generator
    }

    /// Synthesize one segment with gradients off, keeping the full padded
    /// length so the discriminator can score it.
    fn synthesize_padded(&self, source: &[f64]) -> Result<crate::tensor::Tensor3> {
        let mut tape = Tape::new();
        let src = tape.constant(source.to_vec(), (1, 1, source.len()))?;
        let padded = tape.crop_pad(src, NETWORK_LEN)?;
        let binding = self.generator.register(&mut tape, false);
        let out = self.generator.apply(&mut tape, &binding, padded)?;
        Ok(tape.to_tensor(out))
    }

    /// Score a candidate, prefixing the source channel in conditional mode.
    fn discriminator_input(
        &self,
        tape: &mut Tape,
        source_padded: Var,
        candidate: Var,
    ) -> Result<Var> {
        if self.config.discriminator.conditional {
            tape.concat_channels(source_padded, candidate)
        } else {
            Ok(candidate)
        }
    }

    /// One discriminator update over a batch of pairs: real targets against
    /// detached synthesized segments. Returns the mean discriminator loss.
    fn discriminator_update(&mut self, batch: &[&SegmentPair]) -> Result<f64> {
        self.discriminator.zero_grads();
        let mut loss_sum = 0.0;
        for pair in batch {
            let fake_full = self.synthesize_padded(&pair.source)?;
            let mut tape = Tape::new();
            let binding = self.discriminator.register(&mut tape, true);
            let source_padded =
                tape.constant(pad_centered(&pair.source, NETWORK_LEN), (1, 1, NETWORK_LEN))?;
            let real =
                tape.constant(pad_centered(&pair.target, NETWORK_LEN), (1, 1, NETWORK_LEN))?;
            let fake = tape.leaf_as(&fake_full, false);
            let real_in = self.discriminator_input(&mut tape, source_padded, real)?;
            let fake_in = self.discriminator_input(&mut tape, source_padded, fake)?;
            let real_scores = self.discriminator.apply(&mut tape, &binding, real_in)?;
            let fake_scores = self.discriminator.apply(&mut tape, &binding, fake_in)?;
            let loss = discriminator_loss_graph(&mut tape, real_scores, fake_scores)?;
            tape.backward(loss)?;
            self.discriminator.accumulate_grads(&tape, &binding)?;
            loss_sum += tape.scalar(loss)?;
        }
        if batch.len() > 1 {
            let inv = 1.0 / batch.len() as f64;
            for p in self.discriminator.params_mut() {
                p.scale_grad(inv);
            }
        }
        self.discriminator_adam
            .step(&mut self.discriminator.params_mut(), self.config.lr_discriminator)?;
        Ok(loss_sum / batch.len() as f64)
    }

    /// One generator update over a batch of pairs through the weighted
    /// objective, with the discriminator frozen. Returns the mean
    /// (adversarial, time, spectral, total) components.
    fn generator_update(&mut self, batch: &[&SegmentPair]) -> Result<[f64; 4]> {
        self.generator.zero_grads();
        let mut sums = [0.0_f64; 4];
        for pair in batch {
            let mut tape = Tape::new();
            let g_binding = self.generator.register(&mut tape, true);
            let src = tape.constant(pair.source.clone(), (1, 1, SEGMENT_LEN))?;
            let src_padded = tape.crop_pad(src, NETWORK_LEN)?;
            let g_out = self.generator.apply(&mut tape, &g_binding, src_padded)?;
            let synth_valid = tape.crop_pad(g_out, SEGMENT_LEN)?;
            let target = tape.constant(pair.target.clone(), (1, 1, SEGMENT_LEN))?;
            let d_binding = self.discriminator.register(&mut tape, false);
            let fake_in = self.discriminator_input(&mut tape, src_padded, g_out)?;
            let fake_scores = self.discriminator.apply(&mut tape, &d_binding, fake_in)?;
            let losses = generator_loss_graph(
                &mut tape,
                fake_scores,
                synth_valid,
                target,
                self.config.weights,
                self.config.stft_len,
                self.config.stft_hop,
            )?;
            tape.backward(losses.total)?;
            self.generator.accumulate_grads(&tape, &g_binding)?;
            sums[0] += tape.scalar(losses.adversarial)?;
            sums[1] += tape.scalar(losses.time)?;
            sums[2] += tape.scalar(losses.spectral)?;
            sums[3] += tape.scalar(losses.total)?;
        }
        if batch.len() > 1 {
            let inv = 1.0 / batch.len() as f64;
            for p in self.generator.params_mut() {
                p.scale_grad(inv);
            }
        }
        self.generator_adam.step(&mut self.generator.params_mut(), self.config.lr_generator)?;
        let n = batch.len() as f64;
        Ok([sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n])
    }

    /// One full iteration: draw a batch, update the discriminator on it,
    /// then the generator. Returns the logged loss components.
    pub fn step(&mut self, pairs: &[SegmentPair]) -> Result<IterationLog> {
        if pairs.len() != self.scheduler.n {
            return Err(Error::Config(format!(
                "trainer was built for {} pairs but was given {}",
                self.scheduler.n,
                pairs.len()
            )));
        }
        let started = Instant::now();
        let batch: Vec<&SegmentPair> =
            (0..self.config.batch_size).map(|_| &pairs[self.scheduler.next()]).collect();
        let adv_d = self.discriminator_update(&batch)?;
        let [adv_g, time, stft, total] = self.generator_update(&batch)?;
        self.iteration += 1;
        let components = [adv_d, adv_g, time, stft, total];
        if components.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                iteration: self.iteration,
                detail: format!(
                    "adv_d={adv_d}, adv_g={adv_g}, time={time}, stft={stft}, total={total}"
                ),
            });
        }
        let wallclock_ms = if self.config.timing_log {
            started.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        };
        Ok(IterationLog { iter: self.iteration, adv_g, adv_d, time, stft, total, wallclock_ms })
    }
}

// ── Run drivers ─────────────────────────────────────────────────────────────

/// Disk artifacts of a run, rooted at one output directory.
struct RunSink {
    csv: std::io::BufWriter<std::fs::File>,
    csv_path: PathBuf,
    model_path: PathBuf,
    checkpoint_path: PathBuf,
}

impl RunSink {
    fn open(dir: &Path) -> Result<RunSink> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join("losses.csv");
        let existed = csv_path.exists();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&csv_path)
            .map_err(|e| Error::io(&csv_path, e))?;
        let mut csv = std::io::BufWriter::new(file);
        if !existed {
            writeln!(csv, "{LOSS_CSV_HEADER}").map_err(|e| Error::io(&csv_path, e))?;
        }
        Ok(RunSink {
            csv,
            csv_path,
            model_path: dir.join("model.opgn"),
            checkpoint_path: dir.join("checkpoint.ckpt"),
        })
    }

    fn log(&mut self, line: &IterationLog) -> Result<()> {
        writeln!(self.csv, "{}", csv_line(line)).map_err(|e| Error::io(&self.csv_path, e))?;
        self.csv.flush().map_err(|e| Error::io(&self.csv_path, e))
    }
}

/// Drive a trainer to its iteration budget, logging and checkpointing along
/// the way. The building block behind [`train`] and [`resume`].
pub fn run(
    trainer: Trainer,
    pairs: &[SegmentPair],
    out_dir: Option<&Path>,
) -> Result<(GeneratorModel, TrainReport)> {
    run_with_progress(trainer, pairs, out_dir, |_| {})
}

/// [`run`], calling `progress` after every completed iteration.
pub fn run_with_progress(
    mut trainer: Trainer,
    pairs: &[SegmentPair],
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&IterationLog),
) -> Result<(GeneratorModel, TrainReport)> {
    check_pairs(pairs)?;
    let mut sink = out_dir.map(RunSink::open).transpose()?;
    let mut report = TrainReport::default();
    let interval = trainer.config.checkpoint_interval;
    while trainer.iteration < trainer.config.max_iters {
        let log = trainer.step(pairs)?;
        if let Some(sink) = &mut sink {
            sink.log(&log)?;
            if interval > 0 && trainer.iteration % interval == 0 {
                save_checkpoint(&trainer.checkpoint(), &sink.checkpoint_path)?;
            }
        }
        progress(&log);
        report.logs.push(log);
    }
    if let Some(sink) = &sink {
        save_checkpoint(&trainer.checkpoint(), &sink.checkpoint_path)?;
        save_generator(trainer.generator(), &sink.model_path)?;
        report.loss_csv = Some(sink.csv_path.clone());
        report.model_path = Some(sink.model_path.clone());
        report.checkpoint_path = Some(sink.checkpoint_path.clone());
    }
    Ok((trainer.into_generator(), report))
}

/// Train from scratch. With an output directory, writes `losses.csv`,
/// rolling `checkpoint.ckpt`, and the final `model.opgn`.
pub fn train(
    config: &TrainConfig,
    pairs: &[SegmentPair],
    out_dir: Option<&Path>,
) -> Result<(GeneratorModel, TrainReport)> {
    check_pairs(pairs)?;
    let trainer = Trainer::new(config.clone(), pairs.len())?;
    run(trainer, pairs, out_dir)
}

/// Continue an interrupted run from its checkpoint file, against the same
/// dataset, until the configured iteration budget is spent.
pub fn resume(
    checkpoint_path: &Path,
    pairs: &[SegmentPair],
    out_dir: Option<&Path>,
) -> Result<(GeneratorModel, TrainReport)> {
    check_pairs(pairs)?;
    let checkpoint = load_checkpoint(checkpoint_path)?;
    let trainer = Trainer::from_checkpoint(checkpoint, pairs.len())?;
    run(trainer, pairs, out_dir)
}

/// Render a report's logs as the same CSV the sink writes.
pub fn report_csv(report: &TrainReport) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for log in &report.logs {
        let _ = writeln!(out, "{}", csv_line(log));
    }
    out
}
