//! Command-line driver. `run` parses arguments and maps errors to exit codes:
//! 0 success, 2 usage, 3 validation, 4 numeric failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{detect_motion_beats, evaluate, EvalReport, MetricValue, DEFAULT_DELTAS};
use crate::io::{
    load_checkpoint, read_key_file, read_motion, read_music, save_checkpoint, synth_dataset,
    write_motion, CheckpointManifest, DatasetManifest, LoadedSample, Split, SynthSpec,
};
use crate::model::{
    gradcheck_model, lambda_sweep, omega, train_new, DanceModelConfig, KeySampling, LossParams,
    Preset, SweepSettings, TrainOptions, TrainSample, TrainSchedule,
};
use crate::motion::{
    extract_key_poses, kinetic_velocity, sample_key_positions, KeyPoseSet, KeyStrategy,
};
use crate::numeric::op_suite;

/// Largest accepted relative error for a single op.
pub const OP_TOLERANCE: f64 = 1e-6;
/// Largest accepted relative error for the full network.
pub const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(
    name = "dancegen",
    version,
    about = "Key-pose conditioned dance generation from music features"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic beat-locked dataset.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus loss log.
    Train(TrainArgs),
    /// Generate motion for one music clip.
    Generate(GenerateArgs),
    /// Compute consistency, smoothness and beat metrics.
    Eval(EvalArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Print weight curves, velocity traces or λ sweeps as CSV.
    Curves(CurvesArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 240)]
    pub frames: usize,
    #[arg(long, default_value_t = 30.0)]
    pub fps: f64,
    /// Beat period in frames.
    #[arg(long, default_value_t = 30)]
    pub period: usize,
    #[arg(long, default_value_t = 4)]
    pub clips: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub amplitude: f64,
    /// Delay the motion behind the music by this many frames.
    #[arg(long, default_value_t = 0)]
    pub phase_shift: usize,
    /// Number of trailing clips assigned to the test split.
    #[arg(long, default_value_t = 0)]
    pub test_clips: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KeyMode {
    /// Each sample's own key frames from the manifest.
    Fixed,
    Uniform,
    Random,
}

/// Shared model and objective flags.
#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, default_value = "tiny")]
    pub preset: Preset,
    #[arg(long, default_value_t = 30)]
    pub seed_len: usize,
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    #[arg(long, default_value_t = 2000)]
    pub steps: u64,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    /// Base learning rate of the compressed three-stage schedule.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Use the full-length schedule (1e-4, 1e-5 at 100k, 1e-6 at 250k).
    #[arg(long)]
    pub full_schedule: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = KeyMode::Random)]
    pub key_strategy: KeyMode,
    /// Key poses per clip for uniform and random placement.
    #[arg(long, default_value_t = 3)]
    pub key_count: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory or manifest file.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 3.0)]
    pub lambda: f64,
    /// Log test-split consistency error every N steps (0 disables).
    #[arg(long, default_value_t = 0)]
    pub probe_every: u64,
    /// Checkpoint directory; `loss.csv` is written next to the weights.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub music: PathBuf,
    /// Motion file whose first frames seed the generation.
    #[arg(long)]
    pub seed_motion: PathBuf,
    /// Key-pose JSON file.
    #[arg(long)]
    pub keys: Option<PathBuf>,
    /// Accept key poses inside the seed span.
    #[arg(long)]
    pub allow_seed_keys: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Motion file to score.
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    pub motion: Option<PathBuf>,
    /// Music file supplying the beat list.
    #[arg(long, requires = "motion")]
    pub music: Option<PathBuf>,
    #[arg(long, requires = "motion")]
    pub keys: Option<PathBuf>,
    /// Score a whole dataset split instead of one file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// With `--data`: generate from this checkpoint instead of scoring ground truth.
    #[arg(long, requires = "data")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test, requires = "data")]
    pub split: SplitArg,
    /// With `--data`: key poses per clip when the manifest lists none.
    #[arg(long, default_value_t = 3)]
    pub key_count: usize,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_DELTAS.to_vec())]
    pub deltas: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Write `<out>.json` and `<out>.csv` instead of printing JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "tiny")]
    pub preset: Preset,
    /// Sampled parameter coordinates for the full-network check.
    #[arg(long, default_value_t = 200)]
    pub coords: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub eps: f64,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("curve").required(true).args(["omega", "velocity", "sweep"]))]
pub struct CurvesArgs {
    /// Weight curve ω over normalized time.
    #[arg(long)]
    pub omega: bool,
    /// Kinetic velocity and detected beats of `--motion`.
    #[arg(long)]
    pub velocity: bool,
    /// Train one model per λ on `--data` and report test metrics.
    #[arg(long)]
    pub sweep: bool,
    #[arg(long, default_value_t = 3.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    /// Key positions as fractions of the clip, e.g. 0.25,0.5,0.75.
    #[arg(long, value_delimiter = ',')]
    pub keys: Vec<f64>,
    #[arg(long, default_value_t = 240)]
    pub frames: usize,
    #[arg(long, required_if_eq("velocity", "true"))]
    pub motion: Option<PathBuf>,
    /// Marks musical beats next to the velocity trace.
    #[arg(long)]
    pub music: Option<PathBuf>,
    #[arg(long, required_if_eq("sweep", "true"))]
    pub data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 1.0, 3.0, 5.0])]
    pub lambdas: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, default_value = "tiny")]
    pub preset: Preset,
    #[arg(long, default_value_t = 30)]
    pub seed_len: usize,
    #[arg(long, default_value_t = 2000)]
    pub steps: u64,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub key_count: usize,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Normal output goes to `out`, errors to stderr.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        // output piped into a closed reader, e.g. `| head`
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a, out),
        Command::Train(a) => train(a, out),
        Command::Generate(a) => generate(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Gradcheck(a) => gradcheck(a, out),
        Command::Curves(a) => curves(a, out),
    }
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> Result<()> {
    let spec = SynthSpec {
        frames: a.frames,
        fps: a.fps,
        beat_period: a.period,
        clips: a.clips,
        seed: a.seed,
        amplitude: a.amplitude,
        phase_shift: a.phase_shift,
        test_clips: a.test_clips,
    };
    let m = synth_dataset(&spec, &a.out)?;
    writeln!(
        out,
        "wrote {} clips to {}",
        m.samples.len(),
        a.out.display()
    )?;
    Ok(())
}

/// Accepts a dataset directory or the manifest inside it.
fn open_dataset(path: &Path) -> Result<(PathBuf, DatasetManifest)> {
    let (root, file) = if path.is_dir() {
        (path.to_path_buf(), path.join("manifest.json"))
    } else {
        (
            path.parent().map(Path::to_path_buf).unwrap_or_default(),
            path.to_path_buf(),
        )
    };
    Ok((root, DatasetManifest::load(file)?))
}

/// Training samples; clips without listed key frames get `count` uniform ones.
fn to_samples(loaded: &[LoadedSample], seed_len: usize, count: usize) -> Result<Vec<TrainSample>> {
    loaded
        .iter()
        .map(|l| {
            let mut s = l.to_train_sample()?;
            if s.key_frames.is_empty() {
                s.key_frames =
                    sample_key_positions(s.len(), seed_len, count, &KeyStrategy::Uniform, 0)?;
            }
            Ok(s)
        })
        .collect()
}

fn schedule(m: &ModelArgs) -> TrainSchedule {
    if m.full_schedule {
        TrainSchedule {
            batch_size: m.batch,
            ..TrainSchedule::full_scale(m.steps)
        }
    } else {
        TrainSchedule::scaled(m.steps, m.lr, m.batch)
    }
}

fn key_sampling(m: &ModelArgs, data: &[LoadedSample]) -> Result<KeySampling> {
    Ok(match m.key_strategy {
        KeyMode::Fixed => {
            if let Some(s) = data.iter().find(|s| s.entry.key_frames.is_empty()) {
                return Err(Error::invalid(format!(
                    "sample {} lists no key frames",
                    s.entry.name
                )));
            }
            KeySampling::Fixed
        }
        KeyMode::Uniform => KeySampling::Resample {
            count: m.key_count,
            strategy: KeyStrategy::Uniform,
        },
        KeyMode::Random => KeySampling::Resample {
            count: m.key_count,
            strategy: KeyStrategy::Random,
        },
    })
}

fn model_config(m: &ModelArgs, data: &[TrainSample]) -> Result<DanceModelConfig> {
    let len = data
        .iter()
        .map(TrainSample::len)
        .max()
        .ok_or_else(|| Error::invalid("training split is empty"))?;
    DanceModelConfig::with_lengths(m.preset, m.seed_len, len)
}

fn train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let (root, manifest) = open_dataset(&a.data)?;
    let m = &a.model;
    let train_loaded = manifest.load_samples(&root, Some(Split::Train))?;
    let data = to_samples(&train_loaded, m.seed_len, m.key_count)?;
    let probe = if a.probe_every > 0 {
        to_samples(
            &manifest.load_samples(&root, Some(Split::Test))?,
            m.seed_len,
            m.key_count,
        )?
    } else {
        Vec::new()
    };
    let config = model_config(m, &data)?;
    let loss = LossParams::new(a.lambda, m.sigma)?;
    let mut opts = TrainOptions::new(loss, schedule(m), m.seed);
    opts.key_sampling = key_sampling(m, &train_loaded)?;
    opts.probe_every = a.probe_every;
    let (model, log) = train_new(config, &data, &probe, &opts)?;
    let ckpt = CheckpointManifest {
        config,
        loss_params: loss,
        train: Some(opts),
        seed: m.seed,
        step: m.steps,
    };
    save_checkpoint(&a.out, &model, &ckpt)?;
    fs::write(a.out.join("loss.csv"), log.to_csv())?;
    if let (Some(first), Some(last)) = (log.entries.first(), log.entries.last()) {
        writeln!(
            out,
            "step 0 loss {}, step {} loss {}",
            first.loss, last.step, last.loss
        )?;
    }
    writeln!(out, "checkpoint written to {}", a.out.display())?;
    Ok(())
}

fn generate(a: GenerateArgs, out: &mut dyn Write) -> Result<()> {
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    let (music, _) = read_music(&a.music)?;
    let seed_len = model.config().seed_len;
    let motion = read_motion(&a.seed_motion)?;
    if motion.len() < seed_len {
        return Err(Error::invalid(format!(
            "seed motion has {} frames, the model needs {seed_len}",
            motion.len()
        )));
    }
    let seed = motion.slice(0, seed_len)?;
    let keys = match &a.keys {
        Some(p) => read_key_file(p)?,
        None => KeyPoseSet::empty(),
    };
    let result = if a.allow_seed_keys {
        crate::model::generate(&model, &music, &seed, &keys)?
    } else {
        crate::model::generate_strict(&model, &music, &seed, &keys)?
    };
    let name = a
        .out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    write_motion(&a.out, &result, &name)?;
    writeln!(out, "wrote {} frames to {}", result.len(), a.out.display())?;
    Ok(())
}

#[derive(Serialize)]
struct ClipReport {
    name: String,
    report: EvalReport,
}

#[derive(Serialize)]
struct DatasetReport {
    clips: Vec<ClipReport>,
    /// Means over clips where the metric is defined.
    mean_consistency_error: Option<f64>,
    mean_smoothness_cv: Option<f64>,
    /// Pooled hits over pooled musical beats, per delta.
    beat_hit_rate: std::collections::BTreeMap<usize, Option<f64>>,
}

fn mean_defined(values: impl Iterator<Item = MetricValue>) -> Option<f64> {
    let v: Vec<f64> = values.filter_map(MetricValue::value).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn write_report(
    prefix: &Option<PathBuf>,
    json: String,
    csv: String,
    out: &mut dyn Write,
) -> Result<()> {
    match prefix {
        Some(p) => {
            let with = |ext: &str| {
                let mut s = p.as_os_str().to_owned();
                s.push(ext);
                PathBuf::from(s)
            };
            fs::write(with(".json"), json + "\n")?;
            fs::write(with(".csv"), csv)?;
            writeln!(
                out,
                "wrote {} and {}",
                with(".json").display(),
                with(".csv").display()
            )?;
        }
        None => writeln!(out, "{json}")?,
    }
    Ok(())
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    if a.deltas.is_empty() {
        return Err(Error::usage("--deltas needs at least one value"));
    }
    if let Some(data) = &a.data {
        return eval_dataset(&a, data, out);
    }
    let motion = read_motion(
        a.motion
            .as_ref()
            .expect("clap requires --motion without --data"),
    )?;
    let beats = match &a.music {
        Some(p) => {
            let (music, beats) = read_music(p)?;
            if music.len() != motion.len() {
                return Err(Error::invalid(format!(
                    "music has {} frames but motion has {}",
                    music.len(),
                    motion.len()
                )));
            }
            beats.beat_frames
        }
        None => Vec::new(),
    };
    let keys = match &a.keys {
        Some(p) => read_key_file(p)?,
        None => KeyPoseSet::empty(),
    };
    let report = evaluate(&motion, &keys, &beats, &a.deltas, motion.fps())?;
    write_report(&a.out, report.to_json()?, report.to_csv(), out)
}

fn eval_dataset(a: &EvalArgs, data: &Path, out: &mut dyn Write) -> Result<()> {
    let (root, manifest) = open_dataset(data)?;
    let loaded = manifest.load_samples(&root, a.split.split())?;
    if loaded.is_empty() {
        return Err(Error::invalid("no samples in the selected split"));
    }
    let model = a
        .checkpoint
        .as_ref()
        .map(load_checkpoint)
        .transpose()?
        .map(|(m, _)| m);
    let reports = crate::par::parallel_map(&loaded, a.jobs, |l| -> Result<ClipReport> {
        let report = match &model {
            Some(model) => {
                let seed_len = model.config().seed_len;
                let s = &to_samples(std::slice::from_ref(l), seed_len, a.key_count)?[0];
                let keys = s.keys()?;
                let generated = crate::model::generate(model, &s.music, &s.seed(seed_len)?, &keys)?;
                evaluate(
                    &generated,
                    &keys,
                    &l.entry.beat_frames,
                    &a.deltas,
                    l.entry.fps,
                )?
            }
            None => {
                let keys = extract_key_poses(&l.motion, &l.entry.key_frames)?;
                evaluate(
                    &l.motion,
                    &keys,
                    &l.entry.beat_frames,
                    &a.deltas,
                    l.entry.fps,
                )?
            }
        };
        Ok(ClipReport {
            name: l.entry.name.clone(),
            report,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let musical: usize = reports.iter().map(|c| c.report.num_musical_beats).sum();
    let pooled = a
        .deltas
        .iter()
        .map(|&d| {
            let hits: usize = reports.iter().map(|c| c.report.beat_hits[&d]).sum();
            (d, (musical > 0).then(|| hits as f64 / musical as f64))
        })
        .collect();
    let summary = DatasetReport {
        mean_consistency_error: mean_defined(reports.iter().map(|c| c.report.consistency_error)),
        mean_smoothness_cv: mean_defined(reports.iter().map(|c| c.report.smoothness_cv)),
        beat_hit_rate: pooled,
        clips: reports,
    };
    let mut csv = format!("clip,{}\n", EvalReport::CSV_HEADER);
    for c in &summary.clips {
        for line in c.report.to_csv().lines().skip(1) {
            let _ = writeln!(csv, "{},{line}", c.name);
        }
    }
    write_report(&a.out, serde_json::to_string_pretty(&summary)?, csv, out)
}

fn gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let mut failed = Vec::new();
    writeln!(out, "check,max_rel_error,tolerance")?;
    for (name, err) in op_suite(a.seed)? {
        writeln!(out, "{name},{err:e},{OP_TOLERANCE:e}")?;
        if !(err < OP_TOLERANCE) {
            failed.push(name.to_string());
        }
    }
    let config = DanceModelConfig::with_lengths(a.preset, 4, 16)?;
    let report = gradcheck_model(config, 2, a.seed, a.coords, a.eps)?;
    let label = format!("model_{}", a.preset);
    writeln!(
        out,
        "{label},{:e},{MODEL_TOLERANCE:e}",
        report.max_rel_error
    )?;
    if !(report.max_rel_error < MODEL_TOLERANCE) {
        failed.push(label);
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::numeric(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

fn curves(a: CurvesArgs, out: &mut dyn Write) -> Result<()> {
    if a.omega {
        curve_omega(&a, out)
    } else if a.velocity {
        curve_velocity(&a, out)
    } else {
        curve_sweep(&a, out)
    }
}

fn curve_omega(a: &CurvesArgs, out: &mut dyn Write) -> Result<()> {
    LossParams::new(a.lambda, a.sigma)?;
    if a.frames == 0 {
        return Err(Error::usage("--frames must be positive"));
    }
    if a.keys.iter().any(|k| !(0.0..=1.0).contains(k)) {
        return Err(Error::usage("--keys are fractions between 0 and 1"));
    }
    writeln!(out, "frame,tau,omega")?;
    for t in 0..a.frames {
        let tau = t as f64 / a.frames as f64;
        writeln!(out, "{t},{tau},{}", omega(tau, &a.keys, a.lambda, a.sigma))?;
    }
    Ok(())
}

fn curve_velocity(a: &CurvesArgs, out: &mut dyn Write) -> Result<()> {
    let motion = read_motion(a.motion.as_ref().expect("clap requires --motion"))?;
    let v = kinetic_velocity(&motion)?;
    let beats = detect_motion_beats(&motion)?;
    let music_beats = match &a.music {
        Some(p) => read_music(p)?.1.beat_frames,
        None => Vec::new(),
    };
    writeln!(out, "frame,velocity,motion_beat,music_beat")?;
    for (t, v) in v.iter().enumerate() {
        let flag = |b: &[usize]| u8::from(b.binary_search(&t).is_ok());
        writeln!(out, "{t},{v},{},{}", flag(&beats), flag(&music_beats))?;
    }
    Ok(())
}

fn curve_sweep(a: &CurvesArgs, out: &mut dyn Write) -> Result<()> {
    let (root, manifest) = open_dataset(a.data.as_ref().expect("clap requires --data"))?;
    let train = to_samples(
        &manifest.load_samples(&root, Some(Split::Train))?,
        a.seed_len,
        a.key_count,
    )?;
    let test = to_samples(
        &manifest.load_samples(&root, Some(Split::Test))?,
        a.seed_len,
        a.key_count,
    )?;
    if test.is_empty() {
        return Err(Error::invalid("the sweep needs clips in the test split"));
    }
    let len = train
        .iter()
        .chain(&test)
        .map(TrainSample::len)
        .max()
        .unwrap_or(0);
    let settings = SweepSettings {
        lambdas: a.lambdas.clone(),
        sigma: a.sigma,
        config: DanceModelConfig::with_lengths(a.preset, a.seed_len, len)?,
        schedule: TrainSchedule::scaled(a.steps, a.lr, a.batch),
        seed: a.seed,
        key_sampling: KeySampling::Resample {
            count: a.key_count,
            strategy: KeyStrategy::Random,
        },
    };
    let rows = lambda_sweep(&train, &test, &settings, a.jobs)?;
    writeln!(
        out,
        "lambda,consistency_error,smoothness_cv,final_train_loss"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{}",
            r.lambda, r.consistency_error, r.smoothness_cv, r.final_train_loss
        )?;
    }
    Ok(())
}
