use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;
use trc_core::config::{ConfigError, ExperimentConfig};
use trc_core::diffnet::checkpoint::Checkpoint;
use trc_core::tabular::ensemble::{run_ensemble, EnsembleConfig};
use trc_core::trainer::report::score;
use trc_core::trainer::{self, ConstraintMode, LambdaPreset, OutputPaths, Trainer};

#[derive(Debug, Parser)]
#[command(name = "trc", version, about = "CVaR-constrained trust-region policy optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a policy. Any config key can be overridden with `--section.key value`.
    Train {
        /// Config file; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_mode)]
        constraint_mode: Option<ConstraintMode>,
        /// GAE preset: td, gae or mc.
        #[arg(long, value_parser = parse_preset)]
        preset: Option<LambdaPreset>,
        /// Output directory, overriding `output.dir`.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate the mean-action policy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config describing the environment; defaults to the navigation task.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-episode results.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Check the tabular bounds on a random ensemble.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        size: usize,
        #[arg(long, hide = true, default_value_t = 1.0)]
        corrupt_rhs_scale: f64,
    },
    /// Split a training CSV into one `epoch value` file per metric.
    ExportPlotData {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_mode(s: &str) -> Result<ConstraintMode, String> {
    s.parse()
}

fn parse_preset(s: &str) -> Result<LambdaPreset, String> {
    s.parse()
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Runtime(#[from] trc_core::Error),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Verification(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Runtime(_) | CliError::Io { .. } => 2,
            CliError::Verification(_) => 3,
        }
    }
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

type Overrides = Vec<(String, String)>;

/// Pulls `--section.key value` and `--section.key=value` pairs out of the
/// argument list; everything else is left for clap.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides), CliError> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut iter = args.into_iter();
    while let Some(arg) = iter.next() {
        let Some(flag) = arg.strip_prefix("--").filter(|f| f.contains('.')) else {
            rest.push(arg);
            continue;
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let value = iter
                    .next()
                    .ok_or_else(|| CliError::Usage(format!("missing value for --{flag}")))?;
                (flag.to_string(), value)
            }
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, CliError> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_err(format!("reading {}", p.display())))?;
            Ok(ExperimentConfig::parse(&text)?)
        }
        None => Ok(ExperimentConfig::default()),
    }
}

fn init_logging(level: &str) {
    let env = env_logger::Env::default().default_filter_or(level);
    let _ = env_logger::Builder::from_env(env).format_target(false).try_init();
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config_path: Option<&Path>,
    overrides: &[(String, String)],
    constraint_mode: Option<ConstraintMode>,
    preset: Option<LambdaPreset>,
    output: Option<PathBuf>,
    resume: Option<&Path>,
) -> Result<(), CliError> {
    let mut config = load_config(config_path)?;
    for (key, value) in overrides {
        config.set(key, value)?;
    }
    if let Some(mode) = constraint_mode {
        config.train.constraint_mode = mode;
    }
    if let Some(preset) = preset {
        config.set("train.lambda", &preset.lambda().to_string())?;
    }
    if let Some(dir) = output {
        config.output_dir = dir;
    }
    config.apply_seed_override(std::env::var("TRC_SEED").ok().as_deref())?;
    config.validate()?;
    init_logging(&config.log_level);

    let dir = config.output_dir.clone();
    fs::create_dir_all(&dir).map_err(io_err(format!("creating {}", dir.display())))?;
    fs::write(dir.join("config.txt"), config.to_text())
        .map_err(io_err("writing the config snapshot"))?;

    let envs = config.build_envs().map_err(trc_core::Error::from)?;
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).map_err(trc_core::Error::from)?;
            Trainer::from_checkpoint(config.train.clone(), envs, &ckpt)?
        }
        None => Trainer::new(config.train.clone(), envs)?,
    };
    log::info!(
        "training {} epochs into {} ({} mode, lambda {})",
        config.train.epochs,
        dir.display(),
        config.train.constraint_mode.as_str(),
        config.train.lambda,
    );
    let reports = trainer::train(&mut trainer, Some(OutputPaths { dir: &dir }))?;
    if let Some(last) = reports.last() {
        println!(
            "finished {} epochs: return {:.3}, cv rate {:.4}, cvar {:.4}, score {:.3}",
            reports.len(),
            last.metrics.mean_return,
            last.metrics.mean_cv_rate,
            last.metrics.cvar_cv_rate,
            last.metrics.score,
        );
    }
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    config_path: Option<&Path>,
    overrides: &[(String, String)],
    episodes: usize,
    seed: u64,
    csv: Option<&Path>,
) -> Result<(), CliError> {
    if episodes == 0 {
        return Err(CliError::Usage("--episodes must be at least 1".into()));
    }
    let mut config = load_config(config_path)?;
    for (key, value) in overrides {
        config.set(key, value)?;
    }
    init_logging(&config.log_level);
    let ckpt = Checkpoint::load(checkpoint).map_err(trc_core::Error::from)?;
    let mut env = config.build_env().map_err(trc_core::Error::from)?;
    let (metrics, trajs) = trainer::evaluate(
        &ckpt,
        env.as_mut(),
        episodes,
        config.train.horizon,
        seed,
        config.train.risk.alpha,
    )?;
    println!("episodes       {}", metrics.episodes);
    println!("mean return    {:.6}", metrics.mean_return);
    println!("mean cv rate   {:.6}", metrics.mean_cv_rate);
    println!("cvar cv rate   {:.6}", metrics.cvar_cv_rate);
    println!("score          {:.6}", metrics.score);
    if let Some(path) = csv {
        let mut out = String::from("episode,return,cv_count,cv_rate,score\n");
        for (i, t) in trajs.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                i,
                t.total_reward(),
                t.violation_count(),
                t.cv_rate(),
                score(t.total_reward(), t.violation_count())
            ));
        }
        fs::write(path, out).map_err(io_err(format!("writing {}", path.display())))?;
    }
    Ok(())
}

fn cmd_verify(seed: u64, size: usize, rhs_scale: f64) -> Result<(), CliError> {
    if size == 0 {
        return Err(CliError::Usage("--size must be at least 1".into()));
    }
    init_logging("info");
    let config = EnsembleConfig {
        seed,
        size,
        rhs_scale,
        ..EnsembleConfig::default()
    };
    let report = run_ensemble(&config).map_err(trc_core::Error::from)?;
    print!("{report}");
    if report.passed() {
        println!("PASS");
        Ok(())
    } else {
        Err(CliError::Verification("bound verification failed".into()))
    }
}

fn cmd_export(csv: &Path, out: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(csv).map_err(io_err(format!("reading {}", csv.display())))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| CliError::Usage(format!("{} is empty", csv.display())))?
        .split(',')
        .collect();
    let epoch_col = header
        .iter()
        .position(|&h| h == "epoch")
        .ok_or_else(|| CliError::Usage("CSV has no `epoch` column".into()))?;
    let mut series: Vec<String> = vec![String::new(); header.len()];
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(CliError::Usage(format!(
                "row {} has {} fields, expected {}",
                n + 2,
                fields.len(),
                header.len()
            )));
        }
        for (col, value) in fields.iter().enumerate() {
            series[col].push_str(&format!("{} {}\n", fields[epoch_col], value));
        }
    }
    fs::create_dir_all(out).map_err(io_err(format!("creating {}", out.display())))?;
    for (col, name) in header.iter().enumerate() {
        if col == epoch_col {
            continue;
        }
        let path = out.join(format!("{name}.dat"));
        let mut f = fs::File::create(&path).map_err(io_err(format!("creating {}", path.display())))?;
        writeln!(f, "# epoch {name}").map_err(io_err("writing series"))?;
        f.write_all(series[col].as_bytes()).map_err(io_err("writing series"))?;
    }
    println!("wrote {} series to {}", header.len() - 1, out.display());
    Ok(())
}

fn run(args: Vec<String>) -> Result<(), CliError> {
    let (args, overrides) = split_overrides(args)?;
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            return Err(CliError::Usage(e.to_string()));
        }
    };
    let takes_overrides = matches!(cli.command, Command::Train { .. } | Command::Eval { .. });
    if !overrides.is_empty() && !takes_overrides {
        return Err(CliError::Usage("config overrides only apply to train and eval".into()));
    }
    match cli.command {
        Command::Train {
            config,
            constraint_mode,
            preset,
            output,
            resume,
        } => cmd_train(
            config.as_deref(),
            &overrides,
            constraint_mode,
            preset,
            output,
            resume.as_deref(),
        ),
        Command::Eval {
            checkpoint,
            config,
            episodes,
            seed,
            csv,
        } => cmd_eval(&checkpoint, config.as_deref(), &overrides, episodes, seed, csv.as_deref()),
        Command::Verify {
            seed,
            size,
            corrupt_rhs_scale,
        } => cmd_verify(seed, size, corrupt_rhs_scale),
        Command::ExportPlotData { csv, out } => cmd_export(&csv, &out),
    }
}

fn main() -> ExitCode {
    match run(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
