//! The `crowdcast` command line: simulate → rasterize → train → forecast →
//! evaluate, plus `selftest`.
//!
//! Exit codes: 0 success, 1 internal or check failure, 2 usage/input error.

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::annotations::AnnotationStream;
use crate::baselines::{constvel_forecast, persistence_forecast};
use crate::density::{rasterize, read_sequence, smooth_spatiotemporal, write_sequence, DensitySequence};
use crate::gradcheck::{check_all, Primitive};
use crate::metrics::evaluate_sequence;
use crate::model::{
    output_sizes, Checkpoint, PdfnModel, DFN_LATENT, PDFN_LATENT, T_IN, T_OUT,
};
use crate::sim::{simulate, track_oracle, Scenario};
use crate::train::{make_windows, train_autoencoder, train_forecaster, TrainConfig, WINDOW_LEN};
use crate::Error;

#[derive(Debug, Parser)]
#[command(name = "crowdcast", version, about = "Patch-based crowd density forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic annotations from a scenario file or preset.
    Simulate {
        /// Scenario JSON file or preset name (two-groups, static, edge-in, crowd).
        #[arg(long)]
        scenario: String,
        /// Override the scenario's frame count.
        #[arg(long)]
        frames: Option<usize>,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rasterize an annotation CSV into a density sequence.
    Rasterize {
        #[arg(long)]
        ann: PathBuf,
        #[arg(long, default_value_t = 80)]
        width: usize,
        #[arg(long, default_value_t = 80)]
        height: usize,
        /// Number of frames (default: last annotated frame + 1, at least 1).
        #[arg(long)]
        frames: Option<usize>,
        /// Spatiotemporal Gaussian smoothing applied after rasterizing.
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the autoencoder.
    TrainAe {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, value_enum, default_value_t = ModelKind::Pdfn)]
        model: ModelKind,
    },
    /// Train the latent forecaster on a frozen autoencoder.
    TrainForecaster {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        ae: PathBuf,
    },
    /// Forecast the 12 frames following window input frames k..k+7.
    Forecast {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        fc: PathBuf,
        #[arg(long)]
        window_start: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forecast with a reference predictor.
    Baseline {
        #[arg(long, value_enum)]
        method: BaselineMethod,
        #[arg(long)]
        ann: PathBuf,
        #[arg(long)]
        window_start: usize,
        #[arg(long, default_value_t = 3.0)]
        sigma: f64,
        #[arg(long, default_value_t = 80)]
        width: usize,
        #[arg(long, default_value_t = 80)]
        height: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a forecast against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Score against ground-truth frames starting here instead of
        /// requiring equally long files.
        #[arg(long)]
        gt_start: Option<usize>,
        #[arg(long, default_value_t = 3.0)]
        sigma: f64,
        /// Multiply every divergence by 1/(W·H).
        #[arg(long)]
        prefactor: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gradient and shape checks.
    Selftest {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one primitive's gradient to confirm the check fails.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub iters: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f32,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Also write the per-iteration losses as CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Pdfn,
    Dfn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BaselineMethod {
    Constvel,
    Persistence,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or input files (exit 2).
    Input(String),
    /// Internal or check failure (exit 1).
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Failure(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) | CliError::Failure(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFiniteLoss { .. } => CliError::Failure(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failure(e.to_string())
    }
}

type CliResult = std::result::Result<(), CliError>;

fn input(msg: impl Into<String>) -> CliError {
    CliError::Input(msg.into())
}

/// Output sizes of every traced layer, `W × H × C × T` (forecaster rows
/// `W × H × T × C`), for one sequence.
pub const EXPECTED_OUTPUT_SIZES: [(&str, [usize; 4]); 16] = [
    ("input", [80, 80, 1, 8]),
    ("encoder.0", [40, 40, 32, 8]),
    ("encoder.1", [20, 20, 64, 8]),
    ("encoder.2", [10, 10, 64, 8]),
    ("encoder.3", [10, 10, 16, 8]),
    ("transpose_in", [10, 10, 8, 16]),
    ("forecaster.0", [10, 10, 4, 64]),
    ("forecaster.1", [10, 10, 2, 128]),
    ("forecaster.2", [10, 10, 1, 256]),
    ("forecaster.3", [10, 10, 3, 128]),
    ("forecaster.4", [10, 10, 6, 64]),
    ("forecaster.5", [10, 10, 12, 16]),
    ("transpose_out", [10, 10, 16, 12]),
    ("decoder.0", [20, 20, 32, 12]),
    ("decoder.1", [40, 40, 32, 12]),
    ("decoder.2", [80, 80, 1, 12]),
];

/// Compares the traced pipeline against [`EXPECTED_OUTPUT_SIZES`].
pub fn check_shapes(batch: usize) -> std::result::Result<(), String> {
    let model = PdfnModel::pdfn(PDFN_LATENT, 0);
    let trace = model.shape_trace(batch).map_err(|e| e.to_string())?;
    let rows = output_sizes(&trace);
    let expected = &EXPECTED_OUTPUT_SIZES;
    if rows.len() != expected.len() {
        return Err(format!("{} traced layers, expected {}", rows.len(), expected.len()));
    }
    for ((label, got, b), (want_label, want)) in rows.iter().zip(expected) {
        if label != want_label || got != want || *b != batch {
            return Err(format!(
                "{label}: {got:?} x batch {b}, expected {want_label}: {want:?} x batch {batch}"
            ));
        }
    }
    Ok(())
}

fn load_scenario(spec: &str) -> std::result::Result<Scenario, CliError> {
    if let Some(s) = Scenario::preset(spec) {
        return Ok(s);
    }
    let path = std::path::Path::new(spec);
    if path.exists() {
        return Ok(Scenario::read(path)?);
    }
    Err(input(format!(
        "unknown scenario {spec:?}: not a file and not one of {}",
        Scenario::preset_names().join(", ")
    )))
}

fn train_config(a: &TrainArgs) -> std::result::Result<TrainConfig, CliError> {
    if a.iters == 0 {
        return Err(input("--iters must be at least 1"));
    }
    if a.batch == 0 {
        return Err(input("--batch must be at least 1"));
    }
    if a.stride == 0 {
        return Err(input("--stride must be at least 1"));
    }
    Ok(TrainConfig {
        batch_size: a.batch,
        iterations: a.iters,
        learning_rate: a.lr,
        seed: a.seed,
        ..TrainConfig::default()
    })
}

fn window_input(seq: &DensitySequence, start: usize) -> std::result::Result<DensitySequence, CliError> {
    if start.checked_add(WINDOW_LEN).map_or(true, |end| end > seq.len()) {
        return Err(input(format!(
            "window [{start}, {start}+{}] outside the {}-frame sequence",
            WINDOW_LEN - 1,
            seq.len()
        )));
    }
    Ok(seq.window(start, T_IN)?)
}

/// Runs one parsed command, writing progress and reports to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult {
    match cli.command {
        Command::Simulate {
            scenario,
            frames,
            seed,
            out: path,
        } => {
            let mut sc = load_scenario(&scenario)?;
            if let Some(f) = frames {
                sc.n_frames = f;
            }
            if let Some(s) = seed {
                sc.seed = s;
            }
            if sc.n_frames == 0 {
                return Err(input("--frames must be at least 1"));
            }
            let ann = simulate(&sc)?;
            ann.write_csv(&path)?;
            writeln!(out, "wrote {} annotations over {} frames to {}", ann.records().len(), sc.n_frames, path.display())?;
        }
        Command::Rasterize {
            ann,
            width,
            height,
            frames,
            sigma,
            out: path,
        } => {
            let stream = AnnotationStream::read_csv(&ann)?;
            let n = frames.unwrap_or_else(|| stream.frame_count().max(1));
            let mut seq = rasterize(&stream, width, height, n)?;
            if let Some(s) = sigma {
                seq = smooth_spatiotemporal(&seq, s)?;
            }
            write_sequence(&seq, &path)?;
            writeln!(out, "wrote {}x{}x{} density sequence to {}", width, height, n, path.display())?;
        }
        Command::TrainAe { train, model } => {
            let cfg = train_config(&train)?;
            let data = make_windows(&read_sequence(&train.data)?, train.stride)?;
            let mut m = match model {
                ModelKind::Pdfn => PdfnModel::pdfn(PDFN_LATENT, train.seed),
                ModelKind::Dfn => PdfnModel::dfn(DFN_LATENT, train.seed),
            };
            let mut progress = |it: usize, loss: f64| {
                let _ = writeln!(out, "iter={it} loss={loss}");
            };
            let trace = train_autoencoder(&mut m, &data, &cfg, Some(&mut progress))?;
            m.autoencoder_checkpoint().write(&train.out)?;
            if let Some(p) = &train.trace {
                trace.write_csv(p)?;
            }
        }
        Command::TrainForecaster { train, ae } => {
            let cfg = train_config(&train)?;
            let data = make_windows(&read_sequence(&train.data)?, train.stride)?;
            let mut m = PdfnModel::from_autoencoder_checkpoint(&Checkpoint::read(&ae)?)?;
            m.reinit_forecaster(train.seed);
            let mut progress = |it: usize, loss: f64| {
                let _ = writeln!(out, "iter={it} loss={loss}");
            };
            let trace = train_forecaster(&mut m, &data, &cfg, Some(&mut progress))?;
            m.forecaster_checkpoint().write(&train.out)?;
            if let Some(p) = &train.trace {
                trace.write_csv(p)?;
            }
        }
        Command::Forecast {
            data,
            ae,
            fc,
            window_start,
            out: path,
        } => {
            let seq = read_sequence(&data)?;
            let c_in = window_input(&seq, window_start)?;
            let mut m = PdfnModel::from_autoencoder_checkpoint(&Checkpoint::read(&ae)?)?;
            m.load_forecaster(&Checkpoint::read(&fc)?)?;
            let pred = m.forecast(&c_in)?;
            write_sequence(&pred, &path)?;
            writeln!(out, "wrote {}-frame forecast to {}", pred.len(), path.display())?;
        }
        Command::Baseline {
            method,
            ann,
            window_start,
            sigma,
            width,
            height,
            out: path,
        } => {
            let stream = AnnotationStream::read_csv(&ann)?;
            let n = stream.frame_count().max(1);
            let gt = rasterize(&stream, width, height, n)?;
            // validates the window against the annotated length
            window_input(&gt, window_start)?;
            let pred = match method {
                BaselineMethod::Constvel => {
                    let last = (window_start + T_IN - 1) as u32;
                    constvel_forecast(&track_oracle(&stream), last, T_OUT, width, height, sigma)?
                }
                BaselineMethod::Persistence => {
                    let smoothed = if sigma > 0.0 { smooth_spatiotemporal(&gt, sigma)? } else { gt };
                    persistence_forecast(&smoothed.window(window_start, T_IN)?)?
                }
            };
            write_sequence(&pred, &path)?;
            writeln!(out, "wrote {}-frame forecast to {}", pred.len(), path.display())?;
        }
        Command::Evaluate {
            pred,
            gt,
            gt_start,
            sigma,
            prefactor,
            out: path,
        } => {
            let pred = read_sequence(&pred)?;
            let mut gt = read_sequence(&gt)?;
            if let Some(k) = gt_start {
                if k.checked_add(pred.len()).map_or(true, |end| end > gt.len()) {
                    return Err(input(format!(
                        "ground truth has {} frames, cannot take {} from frame {k}",
                        gt.len(),
                        pred.len()
                    )));
                }
                gt = gt.window(k, pred.len())?;
            }
            let report = evaluate_sequence(&pred, &gt, sigma, prefactor)?;
            report.write_csv(&path)?;
            write!(out, "{}", report.to_csv_string())?;
        }
        Command::Selftest {
            instances,
            seed,
            inject_fault,
        } => {
            let faulty = match inject_fault.as_deref() {
                None => None,
                Some(name) => Some(
                    Primitive::from_name(name)
                        .ok_or_else(|| input(format!("unknown primitive {name:?}")))?,
                ),
            };
            let mut failures = 0;
            for r in check_all(instances, seed, faulty)? {
                failures += usize::from(!r.passed);
                writeln!(out, "{r}")?;
            }
            for batch in [1, 16] {
                match check_shapes(batch) {
                    Ok(()) => writeln!(out, "PASS shapes batch {batch}")?,
                    Err(e) => {
                        failures += 1;
                        writeln!(out, "FAIL shapes batch {batch}: {e}")?;
                    }
                }
            }
            if failures > 0 {
                return Err(CliError::Failure(format!("{failures} self-test check(s) failed")));
            }
            writeln!(out, "all self-test checks passed")?;
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if e.use_stderr() {
                write!(err, "{e}")
            } else {
                write!(out, "{e}")
            };
            return code;
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
