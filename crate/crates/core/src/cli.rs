//! Command-line front end. Exit codes: 0 success, 1 usage, 2 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::bench::{
    self, e_xy, export_sequence, gen_gru_set, gen_residual_set, gen_synthetic, make_report, parse_annotations,
    write_report, GruSetConfig, ResidualSetConfig, SyntheticScenario,
};
use crate::error::Error;
use crate::pipeline::{
    baseline_lk_track, parse_pose_csv, pose_csv, servo_sim, track_sequence, PoseOutput, ServoConfig, TrackerConfig,
    TrackerWeights,
};
use crate::predict::{load_trajectory_csv, train_gru, GruTrainConfig};
use crate::residual::{train_residual, ResidualTrainConfig};

#[derive(Debug, Parser)]
#[command(name = "servotrack", version, about = "Occlusion-robust visual tracker")]
pub struct Cli {
    /// Increase log detail on stderr (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Track a numbered frame sequence and write the pose stream CSV.
    Track(TrackArgs),
    /// Render a synthetic sequence with ground truth.
    Synth(SynthArgs),
    /// Score a pose stream against annotations and write report files.
    Eval(EvalArgs),
    /// Train the GRU motion predictor.
    TrainGru(TrainGruArgs),
    /// Train the residual pose regressor.
    TrainResidual(TrainResidualArgs),
    /// Run the closed-loop servo simulation.
    ServoSim(ServoArgs),
    /// Track with intensity-only Lucas-Kanade for comparison.
    BaselineLk(TrackArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Tracker config JSON; unknown keys are rejected.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `align.max_iterations=30` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    /// Directory holding frame_00000.png, frame_00001.png, ...
    #[arg(long, value_name = "DIR")]
    pub frames: PathBuf,
    /// Initial target center `x,y`; defaults to the first row of the directory's annotations.csv.
    #[arg(long, value_name = "X,Y", value_parser = parse_point)]
    pub center: Option<[f64; 2]>,
    /// Pose stream output path.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Write zero timings so reruns produce identical bytes.
    #[arg(long)]
    pub deterministic: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory for frames, annotations and ground truth.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Scenario JSON; the built-in default scenario when absent.
    #[arg(long, value_name = "FILE")]
    pub scenario: Option<PathBuf>,
    /// Base seed; target, background, noise and occluder seeds are derived from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Additive pixel noise sigma.
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Pose stream CSV from `track` or `baseline-lk`.
    #[arg(long, value_name = "FILE")]
    pub poses: PathBuf,
    /// Annotation CSV `frame_index,cx,cy[,occ]`.
    #[arg(long, value_name = "FILE")]
    pub truth: PathBuf,
    /// Directory for report.json, cdf.csv, error_over_time.csv and scatter.csv.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainGruArgs {
    /// Output weight file.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Trajectory CSV files `t_x,t_y`; synthetic trajectories when none are given.
    #[arg(long = "trajectory", value_name = "FILE")]
    pub trajectories: Vec<PathBuf>,
    /// Number of synthetic trajectories.
    #[arg(long, default_value_t = GruSetConfig::default().count)]
    pub count: usize,
    #[arg(long, default_value_t = GruTrainConfig::default().epochs)]
    /// Training epochs.
    pub epochs: usize,
    /// Seed for data generation and training.
    #[arg(long, default_value_t = GruTrainConfig::default().seed)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainResidualArgs {
    /// Output weight file.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Number of generated training samples.
    #[arg(long, default_value_t = ResidualSetConfig::default().count)]
    pub count: usize,
    /// Training epochs.
    #[arg(long, default_value_t = ResidualTrainConfig::default().epochs)]
    pub epochs: usize,
    /// Seed for data generation and training.
    #[arg(long, default_value_t = ResidualTrainConfig::default().seed)]
    pub seed: u64,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct ServoArgs {
    /// Trajectory log CSV output path.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Servo config JSON; unknown keys are rejected.
    #[arg(long, value_name = "FILE")]
    pub servo_config: Option<PathBuf>,
    /// Control gain.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Number of control steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// First step of a 90% occlusion window.
    #[arg(long)]
    pub occlusion_start: Option<usize>,
    /// Length of the occlusion window in steps.
    #[arg(long)]
    pub occlusion_steps: Option<usize>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

fn parse_point(s: &str) -> Result<[f64; 2], String> {
    let (x, y) = s.split_once(',').ok_or("expected X,Y")?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Ok([p(x)?, p(y)?])
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

fn tracker_config(args: &ConfigArgs) -> Result<TrackerConfig, CliError> {
    let mut cfg = match &args.config {
        Some(p) if !p.is_file() => return Err(CliError::Usage(format!("config file {} not found", p.display()))),
        Some(p) => TrackerConfig::load(p).map_err(|e| CliError::Usage(e.to_string()))?,
        None => TrackerConfig::default(),
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override `{kv}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(cfg)
}

fn initial_center(args: &TrackArgs) -> Result<[f64; 2], CliError> {
    if let Some(c) = args.center {
        return Ok(c);
    }
    let path = args.frames.join("annotations.csv");
    if !path.is_file() {
        return Err(CliError::Usage(format!(
            "--center is required when {} does not exist",
            path.display()
        )));
    }
    let gt = parse_annotations(&std::fs::read_to_string(&path).map_err(Error::from)?)?;
    gt.entries
        .first()
        .map(|e| e.center)
        .ok_or_else(|| CliError::Usage(format!("{} has no rows", path.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::from)?;
    }
    std::fs::write(path, contents).map_err(Error::from)?;
    Ok(())
}

fn cmd_track(args: &TrackArgs, baseline: bool) -> Result<(), CliError> {
    let cfg = tracker_config(&args.config)?;
    let center = initial_center(args)?;
    let frames = bench::load_frame_dir(&args.frames)?;
    let poses = if baseline {
        baseline_lk_track(&frames, center, &cfg)?
    } else {
        track_sequence(&frames, center, &cfg, Arc::new(TrackerWeights::load(&cfg)?))?
    };
    write_file(&args.out, pose_csv(&poses, args.deterministic))?;
    let aligned = poses
        .iter()
        .filter(|p| p.source == crate::pipeline::PoseSource::Aligned)
        .count();
    println!(
        "tracked {} frames ({aligned} aligned) -> {}",
        poses.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<(), CliError> {
    let mut scn = match &args.scenario {
        Some(p) if !p.is_file() => return Err(CliError::Usage(format!("scenario file {} not found", p.display()))),
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p).map_err(Error::from)?)
            .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
        None => SyntheticScenario::default(),
    };
    if let Some(s) = args.seed {
        scn.target_seed = s;
        scn.background_seed = s.wrapping_add(1);
        scn.noise_seed = s.wrapping_add(2);
        if let Some(o) = scn.occluder.as_mut() {
            o.seed = s.wrapping_add(3);
        }
    }
    if let Some(n) = args.noise {
        scn.noise_sigma = n;
    }
    let seq = gen_synthetic(&scn)?;
    export_sequence(&seq, &scn, &args.out)?;
    println!("wrote {} frames -> {}", seq.frames.len(), args.out.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let poses: Vec<PoseOutput> = parse_pose_csv(&std::fs::read_to_string(&args.poses).map_err(Error::from)?)?;
    let gt = parse_annotations(&std::fs::read_to_string(&args.truth).map_err(Error::from)?)?;
    if poses.len() != gt.len() {
        let first = poses.len().min(gt.len());
        return Err(Error::InvalidInput(format!(
            "pose stream has {} rows, annotations have {}; frame {first} has no match",
            poses.len(),
            gt.len()
        ))
        .into());
    }
    if let Some((i, p)) = poses.iter().enumerate().find(|(i, p)| p.frame_index != *i as u64) {
        return Err(Error::Ingestion {
            row: i + 2,
            reason: format!("pose row for frame {} where frame {i} was expected", p.frame_index),
        }
        .into());
    }
    let est: Vec<[f64; 2]> = poses.iter().map(PoseOutput::center).collect();
    let errors = e_xy(&est, &gt)?;
    let timings: Vec<f64> = poses.iter().map(|p| p.elapsed_ms).collect();
    let report = make_report(&errors, &gt.occlusion(), Some(&timings))?;
    write_report(&report, &args.out)?;
    println!(
        "success@2px {:.4}  mean e_xy {:.4}  max e_xy {:.4}  mean elapsed_ms {:.3}",
        report.success_at_2px,
        report.mean_error,
        report.max_error,
        report.mean_elapsed_ms.unwrap_or(0.0)
    );
    Ok(())
}

fn cmd_train_gru(args: &TrainGruArgs) -> Result<(), CliError> {
    let trajectories = if args.trajectories.is_empty() {
        gen_gru_set(&GruSetConfig {
            count: args.count,
            seed: args.seed,
            ..GruSetConfig::default()
        })
    } else {
        args.trajectories
            .iter()
            .map(|p| load_trajectory_csv(p))
            .collect::<crate::Result<Vec<_>>>()?
    };
    let cfg = GruTrainConfig {
        epochs: args.epochs,
        seed: args.seed,
        ..GruTrainConfig::default()
    };
    let (store, report) = train_gru(&trajectories, &cfg)?;
    store.save(&args.out)?;
    println!(
        "validation mse {:.5} px^2 (last-position baseline {:.5}) -> {}",
        report.validation_mse,
        report.baseline_mse,
        args.out.display()
    );
    Ok(())
}

fn cmd_train_residual(args: &TrainResidualArgs) -> Result<(), CliError> {
    let cfg = tracker_config(&args.config)?;
    let weights = TrackerWeights::load(&TrackerConfig {
        use_residual: false,
        ..cfg.clone()
    })?;
    let samples = gen_residual_set(
        &weights.extractor,
        &ResidualSetConfig {
            count: args.count,
            patch_size: cfg.patch_width,
            seed: args.seed,
            ..ResidualSetConfig::default()
        },
    )?;
    let (store, report) = train_residual(
        &samples,
        &ResidualTrainConfig {
            epochs: args.epochs,
            seed: args.seed,
            patch_half_width: cfg.patch_width as f64 / 2.0,
            ..ResidualTrainConfig::default()
        },
    )?;
    store.save(&args.out)?;
    println!("final loss {:.6} -> {}", report.final_loss, args.out.display());
    Ok(())
}

fn cmd_servo(args: &ServoArgs) -> Result<(), CliError> {
    let cfg = tracker_config(&args.config)?;
    let mut servo: ServoConfig = match &args.servo_config {
        Some(p) if !p.is_file() => return Err(CliError::Usage(format!("servo config {} not found", p.display()))),
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p).map_err(Error::from)?)
            .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
        None => ServoConfig::default(),
    };
    if let Some(l) = args.lambda {
        servo.lambda = l;
    }
    if let Some(s) = args.steps {
        servo.steps = s;
    }
    if args.occlusion_start.is_some() {
        servo.occlusion_start = args.occlusion_start;
    }
    if let Some(n) = args.occlusion_steps {
        servo.occlusion_steps = n;
    }
    let log = servo_sim(&servo, &cfg, Arc::new(TrackerWeights::load(&cfg)?))?;
    write_file(&args.out, log.to_csv())?;
    println!(
        "{} steps, final error norm {:.4}{} -> {}",
        log.steps.len(),
        log.final_norm,
        if log.diverged { " (diverged)" } else { "" },
        args.out.display()
    );
    if log.diverged {
        return Err(Error::Numerical("servo loop diverged".into()).into());
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Track(a) => cmd_track(a, false),
        Command::BaselineLk(a) => cmd_track(a, true),
        Command::Synth(a) => cmd_synth(a),
        Command::Eval(a) => cmd_eval(a),
        Command::TrainGru(a) => cmd_train_gru(a),
        Command::TrainResidual(a) => cmd_train_residual(a),
        Command::ServoSim(a) => cmd_servo(a),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .target(env_logger::Target::Stderr)
        .try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn every_flag_is_documented_in_help() {
        let mut root = Cli::command();
        root.build();
        let names: Vec<&str> = root
            .get_subcommands()
            .map(|s| s.get_name())
            .filter(|n| *n != "help")
            .collect();
        assert_eq!(
            names,
            [
                "track",
                "synth",
                "eval",
                "train-gru",
                "train-residual",
                "servo-sim",
                "baseline-lk"
            ]
        );
        for sub in root.get_subcommands_mut() {
            let name = sub.get_name().to_string();
            if name == "help" {
                continue;
            }
            let help = sub.render_long_help().to_string();
            for arg in sub.get_arguments() {
                if arg.is_hide_set() {
                    continue;
                }
                let has_doc = arg.get_help().is_some() || arg.get_long_help().is_some();
                assert!(has_doc, "{name}: --{:?} has no help", arg.get_id());
                if let Some(long) = arg.get_long() {
                    assert!(
                        help.contains(&format!("--{long}")),
                        "{name}: --{long} missing from help"
                    );
                }
            }
        }
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["servotrack", "bogus"]), 1);
        assert_eq!(run(["servotrack", "track", "--frames", "x"]), 1);
        assert_eq!(
            run([
                "servotrack",
                "track",
                "--frames",
                "/nonexistent",
                "--out",
                "/tmp/x.csv",
                "--config",
                "/nonexistent.json"
            ]),
            1
        );
        assert_eq!(run(["servotrack", "--help"]), 0);
    }

    #[test]
    fn point_parser() {
        assert_eq!(parse_point("1.5, -2").unwrap(), [1.5, -2.0]);
        assert!(parse_point("1.5").is_err());
        assert!(parse_point("a,b").is_err());
    }

    #[test]
    fn overrides_reject_unknown_keys() {
        let args = ConfigArgs {
            config: None,
            overrides: vec!["nope=1".into()],
        };
        assert!(matches!(tracker_config(&args), Err(CliError::Usage(_))));
        let args = ConfigArgs {
            config: None,
            overrides: vec!["tau_pix=25".into()],
        };
        assert_eq!(tracker_config(&args).unwrap().tau_pix, 25.0);
    }
}
