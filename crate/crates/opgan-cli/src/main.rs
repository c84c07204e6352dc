//! `opgan` — train, run, and inspect band-extension models for low-quality
//! accelerometer recordings.
//!
//! Subcommands cover the whole workflow: `train` fits a generator against
//! reference recordings (or the built-in synthetic corpus), `synth` enhances
//! a raw recording with a trained model, `eval` scores one on held-out
//! segments, `plot` renders a comparison page, and `gradcheck`/`bench` probe
//! the differentiation machinery and inference latency.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use opgan::bench::bench_latency;
use opgan::config::TrainConfig;
use opgan::container::{load_checkpoint, load_generator};
use opgan::dataset::{
    load_dataset, split_by_record, split_by_segment_tail, split_with_file, toy_dataset, Split,
};
use opgan::gradcheck::grad_check;
use opgan::layer::{Activation, LayerBinding, LayerSpec, OperationalLayer};
use opgan::metrics::{eval_table, evaluate, write_eval_csv};
use opgan::model::{DiscriminatorArch, GeneratorArch, GeneratorModel, Synthesizer};
use opgan::plot::{plot_triplet, Triplet};
use opgan::signal::{
    denormalize, export_spectrogram_csv, normalize, resample_linear, segment_waveform,
    spectrogram, Sensor, Waveform, REFERENCE_FS, SEGMENT_SECONDS,
};
use opgan::tape::{Tape, Var};
use opgan::tensor::Tensor3;
use opgan::trainer::{self, IterationLog, Trainer};
use opgan::util::atomic_write;
use opgan::{Error, Result};

/// Train and run models that restore full-bandwidth ground motion from
/// low-quality accelerometer recordings.
#[derive(Parser)]
#[command(name = "opgan", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, writing losses.csv, checkpoint.ckpt and model.opgn
    Train(TrainArgs),
    /// Enhance a raw recording with a trained model
    Synth(SynthArgs),
    /// Score a trained model on held-out segment pairs
    Eval(EvalArgs),
    /// Render an input / output / reference comparison page (SVG)
    Plot(PlotArgs),
    /// Verify analytic gradients against central finite differences
    Gradcheck(GradcheckArgs),
    /// Measure single-segment synthesis latency
    Bench(BenchArgs),
}

/// Where training and evaluation data comes from.
#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Dataset root directory, or the literal `toy` for the built-in
    /// synthetic corpus
    #[arg(long)]
    data: String,

    /// Source device whose recordings are being enhanced
    /// (episensor | csn | iphone | android)
    #[arg(long, default_value = "csn")]
    sensor: String,

    /// Record-to-role file, one `record_id,role` line per record with role
    /// `train` or `test`; unlisted records default to train
    #[arg(long)]
    split_file: Option<PathBuf>,

    /// Records in the synthetic corpus
    #[arg(long, default_value_t = 5)]
    toy_records: usize,

    /// Segments per record in the synthetic corpus
    #[arg(long, default_value_t = 28)]
    toy_segments: usize,

    /// Trailing segments per record held out for testing (synthetic corpus
    /// without a split file)
    #[arg(long, default_value_t = 4)]
    holdout: usize,

    /// Seed for generating the synthetic corpus
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,

    /// Output directory for losses.csv, checkpoint.ckpt and model.opgn
    #[arg(long)]
    out: PathBuf,

    /// Training configuration file (JSON); flags below override its fields
    #[arg(long)]
    config: Option<PathBuf>,

    /// Seed for parameter initialization and epoch shuffling
    #[arg(long)]
    seed: Option<u64>,

    /// Iteration budget
    #[arg(long)]
    iters: Option<usize>,

    /// Polynomial order of every layer in both networks
    #[arg(long)]
    q: Option<usize>,

    /// Segment pairs per iteration
    #[arg(long)]
    batch: Option<usize>,

    /// Use the reduced-width architecture pair
    #[arg(long)]
    compact: bool,

    /// Give the discriminator the source segment as a second input channel
    #[arg(long)]
    conditional: bool,

    /// Write checkpoint.ckpt every N iterations (0 = only at the end)
    #[arg(long)]
    checkpoint_interval: Option<usize>,

    /// Record per-iteration wallclock in losses.csv (makes logs
    /// run-dependent)
    #[arg(long)]
    timing_log: bool,

    /// Continue from <OUT>/checkpoint.ckpt instead of starting fresh
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Trained model file (model.opgn)
    #[arg(long)]
    model: PathBuf,

    /// Input recording: one sample per line, optional `# fs=<Hz>` header
    #[arg(long)]
    input: PathBuf,

    /// Device that produced the recording, which fixes its sampling rate
    #[arg(long, default_value = "csn")]
    sensor: String,

    /// Output recording path; per-segment amplitude bounds go to
    /// `<OUT stem>.stats.csv` next to it
    #[arg(long)]
    out: PathBuf,

    /// Also write a time-frequency power table of the output (CSV)
    #[arg(long)]
    spectrogram_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,

    /// Trained model file (model.opgn)
    #[arg(long)]
    model: PathBuf,

    /// Also write the scores as CSV
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    #[command(flatten)]
    data: DataArgs,

    /// Trained model file (model.opgn)
    #[arg(long)]
    model: PathBuf,

    /// Which held-out segment to render (index into the test split)
    #[arg(long, default_value_t = 0)]
    segment: usize,

    /// Output SVG path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Number of randomly drawn layer configurations
    #[arg(long, default_value_t = 20)]
    cases: usize,

    /// Seed for drawing configurations, parameters and inputs
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Largest acceptable relative error between analytic and numeric
    /// gradients
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct BenchArgs {
    /// Trained model file; without it a freshly initialized default model is
    /// timed
    #[arg(long)]
    model: Option<PathBuf>,

    /// Time the reduced-width architecture instead of the default
    #[arg(long)]
    compact: bool,

    /// Polynomial order for the freshly initialized model
    #[arg(long)]
    q: Option<usize>,

    /// Timed synthesis runs (at least 10)
    #[arg(long, default_value_t = 20)]
    runs: usize,

    /// Seed for the freshly initialized model
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Plot(args) => cmd_plot(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Bench(args) => cmd_bench(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}

// ── Data loading ────────────────────────────────────────────────────────────

/// Resolve the data arguments to a train/test split plus a label for score
/// tables: either the synthetic corpus or a dataset directory.
fn load_split(args: &DataArgs) -> Result<(Split, String)> {
    if args.data == "toy" {
        let pairs = toy_dataset(args.data_seed, args.toy_records, args.toy_segments)?;
        let split = match &args.split_file {
            Some(path) => split_with_file(pairs, path)?,
            None => split_by_segment_tail(pairs, args.holdout),
        };
        return Ok((split, "toy".to_string()));
    }
    let sensor = Sensor::from_str(&args.sensor)?;
    let root = PathBuf::from(&args.data);
    let (pairs, report) = load_dataset(&root, sensor)?;
    if !report.missing_source.is_empty() {
        eprintln!(
            "note: {} record(s) lack a {} recording: {}",
            report.missing_source.len(),
            sensor,
            report.missing_source.join(", ")
        );
    }
    if !report.missing_target.is_empty() {
        eprintln!(
            "note: {} record(s) lack a reference recording: {}",
            report.missing_target.len(),
            report.missing_target.join(", ")
        );
    }
    if report.degenerate_segments > 0 {
        eprintln!("note: skipped {} constant segment pair(s)", report.degenerate_segments);
    }
    let split = match &args.split_file {
        Some(path) => split_with_file(pairs, path)?,
        None => split_by_record(pairs),
    };
    Ok((split, sensor.to_string()))
}

// ── train ───────────────────────────────────────────────────────────────────

fn build_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut config = match &args.config {
        Some(path) => TrainConfig::from_json_file(path)?,
        None => TrainConfig::default(),
    };
    if args.compact {
        config.generator = GeneratorArch::compact();
        config.discriminator = DiscriminatorArch::compact();
    }
    if let Some(q) = args.q {
        config.generator.q_order = q;
        config.discriminator.q_order = q;
    }
    if args.conditional {
        config.discriminator.conditional = true;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(iters) = args.iters {
        config.max_iters = iters;
    }
    if let Some(batch) = args.batch {
        config.batch_size = batch;
    }
    if let Some(interval) = args.checkpoint_interval {
        config.checkpoint_interval = interval;
    }
    if args.timing_log {
        config.timing_log = true;
    }
    config.validate()?;
    Ok(config)
}

fn print_final(report: &trainer::TrainReport) {
    if let Some(last) = report.logs.last() {
        println!(
            "finished at iteration {}: total {:.5} (adv {:.5}, d {:.5}, time {:.5}, stft {:.5})",
            last.iter, last.total, last.adv_g, last.adv_d, last.time, last.stft
        );
    } else {
        println!("iteration budget already spent; artifacts rewritten");
    }
    if let Some(p) = &report.model_path {
        println!("model: {}", p.display());
    }
    if let Some(p) = &report.checkpoint_path {
        println!("checkpoint: {}", p.display());
    }
    if let Some(p) = &report.loss_csv {
        println!("loss log: {}", p.display());
    }
}

fn progress_printer(budget: usize) -> impl FnMut(&IterationLog) {
    move |log: &IterationLog| {
        if log.iter == 1 || log.iter == budget || log.iter % 100 == 0 {
            eprintln!(
                "iter {:>6}/{budget}: total {:.5} (adv {:.5}, d {:.5}, time {:.5}, stft {:.5})",
                log.iter, log.total, log.adv_g, log.adv_d, log.time, log.stft
            );
        }
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let (split, _) = load_split(&args.data)?;
    let n_pairs = split.train.len();

    let trainer = if args.resume {
        let fixed: [(bool, &str); 6] = [
            (args.config.is_some(), "--config"),
            (args.seed.is_some(), "--seed"),
            (args.q.is_some(), "--q"),
            (args.batch.is_some(), "--batch"),
            (args.compact, "--compact"),
            (args.conditional, "--conditional"),
        ];
        for (set, flag) in fixed {
            if set {
                return Err(Error::Usage(format!(
                    "{flag} is fixed by the checkpoint and cannot change on --resume"
                )));
            }
        }
        let path = args.out.join("checkpoint.ckpt");
        let mut checkpoint = load_checkpoint(&path)?;
        if let Some(iters) = args.iters {
            checkpoint.config.max_iters = iters;
        }
        if let Some(interval) = args.checkpoint_interval {
            checkpoint.config.checkpoint_interval = interval;
        }
        if args.timing_log {
            checkpoint.config.timing_log = true;
        }
        eprintln!(
            "resuming at iteration {}/{} on {n_pairs} training pair(s)",
            checkpoint.iteration, checkpoint.config.max_iters
        );
        Trainer::from_checkpoint(checkpoint, n_pairs)?
    } else {
        let config = build_config(&args)?;
        eprintln!(
            "training {} iteration(s) on {n_pairs} training pair(s); generator has {} parameters",
            config.max_iters,
            config.generator.param_count()?
        );
        Trainer::new(config, n_pairs)?
    };

    let budget = trainer.config().max_iters;
    let (_model, report) =
        trainer::run_with_progress(trainer, &split.train, Some(&args.out), progress_printer(budget))?;
    print_final(&report);
    Ok(())
}

// ── synth ───────────────────────────────────────────────────────────────────

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let sensor = Sensor::from_str(&args.sensor)?;
    let native = sensor.native_fs();
    let model = load_generator(&args.model)?;
    let wave = Waveform::read(&args.input, Some(native))?;
    if (wave.fs - native).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "{} is sampled at {} Hz but {sensor} recordings run at {native} Hz",
            args.input.display(),
            wave.fs
        )));
    }
    let segments = segment_waveform(&wave)?;
    if segments.is_empty() {
        return Err(Error::Config(format!(
            "{} holds {:.2} s of signal; at least {SEGMENT_SECONDS} s are needed",
            args.input.display(),
            wave.samples.len() as f64 / native
        )));
    }
    let factor = sensor.upsample_factor();
    let mut enhanced = Vec::with_capacity(segments.len() * segments[0].len() * factor);
    let mut stats_csv = String::from("segment,min,max\n");
    for (index, segment) in segments.iter().enumerate() {
        let resampled = resample_linear(segment, factor)?;
        match normalize(&resampled) {
            Ok((normalized, stats)) => {
                let synthesized = model.synthesize(&normalized)?;
                enhanced.extend(denormalize(&synthesized, stats));
                stats_csv.push_str(&format!("{index},{},{}\n", stats.min, stats.max));
            }
            Err(Error::DegenerateSegment { .. }) => {
                eprintln!("warning: segment {index} is constant; copied through unchanged");
                let level = resampled[0];
                stats_csv.push_str(&format!("{index},{level},{level}\n"));
                enhanced.extend(resampled);
            }
            Err(e) => return Err(e),
        }
    }
    Waveform { samples: enhanced.clone(), fs: REFERENCE_FS }.write(&args.out)?;
    let stats_path = args.out.with_extension("stats.csv");
    atomic_write(&stats_path, stats_csv.as_bytes())?;
    println!(
        "wrote {} ({} segment(s) at {REFERENCE_FS} Hz); amplitude bounds in {}",
        args.out.display(),
        segments.len(),
        stats_path.display()
    );
    if let Some(spec_path) = &args.spectrogram_out {
        let spec = spectrogram(&enhanced)?;
        export_spectrogram_csv(&spec, REFERENCE_FS, spec_path)?;
        println!("spectrogram written to {}", spec_path.display());
    }
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────────────

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (split, label) = load_split(&args.data)?;
    if split.test.is_empty() {
        return Err(Error::Config("the split leaves no test segments to score".into()));
    }
    let model = load_generator(&args.model)?;
    let row = evaluate(&model, &split.test, &label)?;
    print!("{}", eval_table(std::slice::from_ref(&row)));
    if let Some(path) = &args.out {
        write_eval_csv(std::slice::from_ref(&row), path)?;
        println!("scores written to {}", path.display());
    }
    Ok(())
}

// ── plot ────────────────────────────────────────────────────────────────────

fn cmd_plot(args: PlotArgs) -> Result<()> {
    let (split, _) = load_split(&args.data)?;
    let pair = split.test.get(args.segment).ok_or_else(|| {
        Error::Config(format!(
            "test segment index {} out of range ({} available)",
            args.segment,
            split.test.len()
        ))
    })?;
    let model = load_generator(&args.model)?;
    let synthesized = model.synthesize(&pair.source)?;
    let triplet = Triplet {
        input: &pair.source,
        synthesized: &synthesized,
        target: &pair.target,
        fs: REFERENCE_FS,
    };
    plot_triplet(&triplet, &args.out)?;
    println!(
        "wrote {} (record {}, segment {})",
        args.out.display(),
        pair.record_id,
        pair.segment_index
    );
    Ok(())
}

// ── gradcheck ───────────────────────────────────────────────────────────────

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    if args.cases == 0 {
        return Err(Error::Config("gradient check needs at least one case".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut worst: f64 = 0.0;
    for case in 0..args.cases {
        let q_order = rng.gen_range(1..=3);
        let kernel_len = [1, 3, 5][rng.gen_range(0..3)];
        let stride = rng.gen_range(1..=2);
        let in_channels = rng.gen_range(1..=3);
        let out_channels = rng.gen_range(1..=3);
        let len = [8, 16, 32][rng.gen_range(0..3)];
        let pad = rng.gen_range(0..=kernel_len / 2);
        let spec = LayerSpec {
            in_channels,
            out_channels,
            kernel_len,
            stride,
            pad,
            q_order,
            activation: Activation::Tanh,
        };
        let layer = OperationalLayer::init(spec, &mut rng)?;
        let mut input = Tensor3::zeros(1, in_channels, len);
        for v in input.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let mut params: Vec<Tensor3> = layer.params().into_iter().cloned().collect();
        params.push(input);
        // Square the layer output on the tape so the scalarized loss is
        // smooth; an absolute value would put kinks at zero crossings and
        // poison the finite differences.
        let fragment = move |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
            let binding = LayerBinding { kernels: vars[..q_order].to_vec(), bias: vars[q_order] };
            let out = layer.apply(tape, &binding, vars[q_order + 1])?;
            tape.pow_int(out, 2)
        };
        let report = grad_check(&params, &fragment, args.tolerance)?;
        println!(
            "case {case:>3}: q={q_order} k={kernel_len} stride={stride} cin={in_channels} \
             cout={out_channels} len={len} pad={pad} -> max rel err {:.3e} over {} elements",
            report.max_rel_err, report.compared
        );
        worst = worst.max(report.max_rel_err);
    }
    if worst <= args.tolerance {
        println!(
            "PASS: {} case(s), worst relative error {:.3e} <= {:.1e}",
            args.cases, worst, args.tolerance
        );
        Ok(())
    } else {
        Err(Error::Config(format!(
            "gradient check failed: worst relative error {:.3e} > {:.1e}",
            worst, args.tolerance
        )))
    }
}

// ── bench ───────────────────────────────────────────────────────────────────

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let model = match &args.model {
        Some(path) => {
            if args.compact || args.q.is_some() {
                return Err(Error::Usage(
                    "--compact and --q shape a freshly initialized model; \
                     they cannot apply to a model file"
                        .into(),
                ));
            }
            load_generator(path)?
        }
        None => {
            let mut arch =
                if args.compact { GeneratorArch::compact() } else { GeneratorArch::default() };
            if let Some(q) = args.q {
                arch.q_order = q;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            GeneratorModel::init(arch, &mut rng)?
        }
    };
    let report = bench_latency(&model, args.runs)?;
    println!(
        "median {:.2} ms, min {:.2} ms, max {:.2} ms over {} run(s); {} parameters",
        report.median_ms,
        report.min_ms,
        report.max_ms,
        report.runs,
        model.param_count()
    );
    Ok(())
}
