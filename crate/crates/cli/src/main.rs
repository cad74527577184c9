//! `svoc`: mel extraction, synthesis, toy training and distillation, energy
//! tables and spike rasters.
//!
//! Exit codes: 0 success, 1 usage or configuration, 2 I/O, 3 numerical.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::{Array2, Ix2};
use serde::{Deserialize, Serialize};

use svoc_core::distill::KdWeights;
use svoc_core::dsp::mel_spectrogram;
use svoc_core::energy::{rates_from_events, report_table, EnergyConstants, EnergyTable, FiringRates, Scenario};
use svoc_core::io::{
    canonical_json, export_raster, load_checkpoint, load_tensor, parse_raster_csv, read_wav, require_sample_rate,
    save_checkpoint, save_tensor, write_wav, RasterFormat,
};
use svoc_core::model::{Generator, GeneratorConfig, Mode};
use svoc_core::train::{train_loop, MetricLog, ToyDataset, ToyDatasetConfig, TrainConfig};
use svoc_core::{Error, Precision, Real};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Core(#[from] Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e {
                Error::Io(_) | Error::UnsupportedFormat(_) | Error::SampleRateMismatch { .. } | Error::CorruptCheckpoint(_) => 2,
                Error::Numerical(_) => 3,
                _ => 1,
            },
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

#[derive(Parser, Debug)]
#[command(name = "svoc", version, about = "Spiking ConvNeXt vocoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Log-mel spectrogram of a 24 kHz mono WAV file.
    Mel(MelArgs),
    /// Waveform from a mel file and a checkpoint.
    Synth(SynthArgs),
    /// Train a generator on synthetic clips.
    Train(TrainArgs),
    /// Train a spiking student against a continuous teacher.
    Distill(DistillArgs),
    /// Energy table for the block stack.
    Energy(EnergyArgs),
    /// Spike raster CSV and SVG for one synthesis run.
    Spikes(SpikesArgs),
}

#[derive(Args, Debug)]
struct MelArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    mel: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    timesteps: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct TrainFlags {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Metric CSV path; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    timesteps: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args, Debug)]
struct DistillArgs {
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long)]
    teacher: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EnergyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fixed firing rate for the spiking row.
    #[arg(long, conflicts_with = "from_run")]
    rate: Option<f64>,
    /// Raster CSV from `svoc spikes`; rates are recounted from its events.
    #[arg(long)]
    from_run: Option<PathBuf>,
    /// Frames of the run that produced `--from-run`; defaults to `--frames`.
    #[arg(long, requires = "from_run")]
    run_frames: Option<usize>,
    /// Price every reported variant instead of a single rate.
    #[arg(long, conflicts_with_all = ["rate", "from_run"])]
    reported: bool,
    #[arg(long, default_value_t = 1000)]
    frames: usize,
    #[arg(long)]
    timesteps: Option<usize>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SpikesArgs {
    #[arg(long)]
    mel: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Output prefix; writes `<prefix>.csv` and `<prefix>.svg`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    timesteps: Option<usize>,
}

/// Contents of a `--config` file. Every section is optional.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: GeneratorConfig,
    train: TrainConfig,
    data: ToyDatasetConfig,
}

fn read_config(path: Option<&Path>) -> CliResult<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(Error::from)?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn echo_config(cfg: &impl Serialize) -> CliResult<()> {
    let v = serde_json::to_value(cfg).map_err(Error::from)?;
    eprintln!("{}", canonical_json(&v));
    Ok(())
}

fn with_extension(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn load_mel<F: Real>(path: &Path) -> CliResult<Array2<F>> {
    let t = load_tensor::<F>(path)?;
    t.into_dimensionality::<Ix2>()
        .map_err(|_| CliError::Usage(format!("{} is not a two-dimensional mel tensor", path.display())))
}

fn load_model<F: Real>(path: &Path, timesteps: Option<usize>) -> CliResult<Generator<F>> {
    let (model, _) = load_checkpoint::<F>(path)?;
    match timesteps {
        Some(t) => Ok(model.with_timesteps(t)?),
        None => Ok(model),
    }
}

fn check_mel_height<F: Real>(model: &Generator<F>, mel: &Array2<F>) -> CliResult<()> {
    if mel.nrows() != model.config.n_mels {
        return usage(format!("mel has {} rows but the checkpoint expects {}", mel.nrows(), model.config.n_mels));
    }
    Ok(())
}

fn cmd_mel<F: Real>(a: &MelArgs) -> CliResult<()> {
    let cfg = read_config(a.config.as_deref())?;
    cfg.model.validate()?;
    echo_config(&cfg.model.mel_config())?;
    let (samples, rate) = read_wav(&a.input)?;
    require_sample_rate(rate, cfg.model.stft.sample_rate)?;
    let x: Vec<F> = samples.iter().map(|&v| F::lit(v)).collect();
    let mel = mel_spectrogram(&x, &cfg.model.mel_config())?;
    save_tensor(&mel.clone().into_dyn(), &a.out)?;
    println!("mel [{}, {}] -> {}", mel.nrows(), mel.ncols(), a.out.display());
    Ok(())
}

fn print_rates(probe: &svoc_core::block::SpikeProbe) -> CliResult<FiringRates> {
    let rates = svoc_core::energy::measure_firing_rates(probe)?;
    for s in &rates.sites {
        println!("block {} plif {}: rate {:.4} ({} / {})", s.block, s.plif_index, s.rate, s.ones, s.total);
    }
    println!("mean firing rate: {:.4}", rates.mean);
    Ok(rates)
}

fn cmd_synth<F: Real>(a: &SynthArgs) -> CliResult<()> {
    let model = load_model::<F>(&a.ckpt, a.timesteps)?;
    echo_config(&model.config)?;
    let mel = load_mel::<F>(&a.mel)?;
    check_mel_height(&model, &mel)?;
    let out = model.forward(mel.view())?;
    let wav: Vec<f64> = out.waveform.iter().map(|v| v.as_f64()).collect();
    write_wav(&a.out, &wav, model.config.stft.sample_rate)?;
    println!("{} samples -> {}", wav.len(), a.out.display());
    if model.config.mode == Mode::Snn {
        print_rates(&out.probe)?;
    }
    Ok(())
}

fn effective_run_config(f: &TrainFlags) -> CliResult<RunConfig> {
    let mut cfg = read_config(f.config.as_deref())?;
    if let Some(seed) = f.seed {
        cfg.train.seed = seed;
        cfg.data.seed = seed;
    }
    if let Some(s) = f.steps {
        cfg.train.steps = s;
    }
    if let Some(lr) = f.lr {
        cfg.train.lr = lr;
    }
    if let Some(t) = f.timesteps {
        if cfg.model.mode == Mode::Ann {
            return usage("--timesteps is invalid for an ann-mode model");
        }
        cfg.model.timesteps = t;
    }
    cfg.data.sample_rate = cfg.model.stft.sample_rate;
    cfg.data.n_hop = cfg.model.stft.n_hop;
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn run_training<F: Real>(f: &TrainFlags, cfg: &RunConfig, teacher: Option<(&Generator<F>, &Path)>) -> CliResult<()> {
    echo_config(cfg)?;
    let data = ToyDataset::generate(&cfg.data)?;
    let outcome = train_loop::<F>(&cfg.model, teacher.map(|(t, _)| t), &data, &cfg.train)?;
    let log_path = f.log.clone().unwrap_or_else(|| with_extension(&f.out, "csv"));
    write_log(&outcome.log, &log_path)?;
    let last = outcome.log.last().map(|r| r.loss_mel);
    let meta = serde_json::json!({
        "train": serde_json::to_value(&cfg.train).map_err(Error::from)?,
        "data": serde_json::to_value(&cfg.data).map_err(Error::from)?,
        "teacher": teacher.map(|(_, p)| p.display().to_string()),
        "final_loss_mel": last,
    });
    save_checkpoint(&outcome.student, &meta, &f.out)?;
    if let (Some(first), Some(last)) = (outcome.log.first(), outcome.log.last()) {
        println!("loss_mel {:.6} -> {:.6} over {} steps", first.loss_mel, last.loss_mel, cfg.train.steps);
    }
    println!("checkpoint -> {}; log -> {}", f.out.display(), log_path.display());
    Ok(())
}

fn write_log(log: &MetricLog, path: &Path) -> CliResult<()> {
    log.write_csv(path)?;
    Ok(())
}

fn cmd_train<F: Real>(a: &TrainArgs) -> CliResult<()> {
    let cfg = effective_run_config(&a.flags)?;
    if cfg.train.losses.kd.is_some() {
        return usage("distillation losses are enabled; use `svoc distill --teacher`");
    }
    run_training::<F>(&a.flags, &cfg, None)
}

fn cmd_distill<F: Real>(a: &DistillArgs) -> CliResult<()> {
    let Some(teacher_path) = a.teacher.as_deref() else {
        return usage("distill requires --teacher <checkpoint>");
    };
    let mut cfg = effective_run_config(&a.flags)?;
    cfg.train.losses.kd.get_or_insert_with(KdWeights::default);
    let (teacher, _) = load_checkpoint::<F>(teacher_path)?;
    run_training::<F>(&a.flags, &cfg, Some((&teacher, teacher_path)))
}

fn read_event_rates(path: &Path, cfg: &GeneratorConfig, frames: usize) -> CliResult<FiringRates> {
    let text = std::fs::read_to_string(path).map_err(Error::from)?;
    let events = parse_raster_csv(&text)?;
    Ok(rates_from_events(&events, cfg, frames)?)
}

fn cmd_energy(a: &EnergyArgs) -> CliResult<()> {
    let mut cfg = read_config(a.config.as_deref())?.model;
    if let Some(t) = a.timesteps {
        cfg.timesteps = t;
        cfg.mode = Mode::Snn;
    }
    cfg.validate()?;
    echo_config(&cfg)?;
    let k = EnergyConstants::default();
    let table: EnergyTable = if a.reported {
        report_table(&cfg, a.frames, &Scenario::reported(), &k)?
    } else if let Some(r) = a.rate {
        let label = format!("Spiking ({}-step)", cfg.timesteps);
        report_table(&cfg, a.frames, &[Scenario::new(label, cfg.timesteps, r)], &k)?
    } else if let Some(path) = a.from_run.as_deref() {
        if cfg.mode != Mode::Snn {
            return usage("--from-run needs a spiking model configuration");
        }
        let rates = read_event_rates(path, &cfg, a.run_frames.unwrap_or(a.frames))?;
        report_table(&cfg, a.frames, &[Scenario::new("measured run", cfg.timesteps, rates.mean)], &k)?
    } else {
        return usage("give --rate, --from-run or --reported");
    };
    print!("{}", table.to_text());
    if let Some(p) = &a.csv {
        std::fs::write(p, table.to_csv()).map_err(Error::from)?;
    }
    Ok(())
}

fn cmd_spikes<F: Real>(a: &SpikesArgs) -> CliResult<()> {
    let model = load_model::<F>(&a.ckpt, a.timesteps)?;
    if model.config.mode != Mode::Snn {
        return usage("spike rasters need a spiking checkpoint");
    }
    echo_config(&model.config)?;
    let mel = load_mel::<F>(&a.mel)?;
    check_mel_height(&model, &mel)?;
    let out = model.forward(mel.view())?;
    let csv = with_extension(&a.out, "csv");
    let svg = with_extension(&a.out, "svg");
    export_raster(&out.probe, &csv, RasterFormat::Csv)?;
    export_raster(&out.probe, &svg, RasterFormat::Svg)?;
    println!("{} spikes -> {}, {}", out.probe.total_spikes(), csv.display(), svg.display());
    print_rates(&out.probe)?;
    Ok(())
}

fn dispatch<F: Real>(cmd: &Command) -> CliResult<()> {
    match cmd {
        Command::Mel(a) => cmd_mel::<F>(a),
        Command::Synth(a) => cmd_synth::<F>(a),
        Command::Train(a) => cmd_train::<F>(a),
        Command::Distill(a) => cmd_distill::<F>(a),
        Command::Energy(a) => cmd_energy(a),
        Command::Spikes(a) => cmd_spikes::<F>(a),
    }
}

fn run() -> CliResult<()> {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return usage(e.to_string().trim_start_matches("error: ").trim_end()),
    };
    match Precision::from_env().map_err(CliError::Usage)? {
        Precision::F32 => dispatch::<f32>(&cli.command),
        Precision::F64 => dispatch::<f64>(&cli.command),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
