//! `dgrpo` command line.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use super::config::{ConfigError, ExperimentConfig};
use super::metrics::honest_mean;
use super::{run_to_dir, RunError};
use crate::analysis::{self, GaussianParam, GaussianStudy};
use crate::swarm::{RunOptions, SwarmError};

pub const EXIT_OK: u8 = 0;
pub const EXIT_OTHER: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_MALFORMED: u8 = 3;
pub const EXIT_INVALID: u8 = 4;
pub const EXIT_IO: u8 = 5;

pub const ENV_OUT_DIR: &str = "DGRPO_OUT_DIR";
pub const ENV_THREADS: &str = "DGRPO_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "dgrpo",
    version,
    about = "Completion poisoning in decentralized GRPO"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment.
    Run(RunArgs),
    /// Run the cartesian product of config axes.
    Sweep(SweepArgs),
    /// Advantage amplification curves as CSV.
    Analyze {
        #[command(subcommand)]
        what: Analyze,
    },
    /// Parse and check a config without running it.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (falls back to $DGRPO_OUT_DIR, then ./out).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Worker threads (falls back to $DGRPO_THREADS).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Record per-round wall time (breaks byte-identical output).
    #[arg(long)]
    pub wall_time: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// `section.key=v1,v2,...`; repeatable.
    #[arg(long = "axis", required = true)]
    pub axes: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ParamArg {
    Std,
    Var,
}

#[derive(Debug, Subcommand)]
pub enum Analyze {
    /// Zero-honest-reward curve at every feasible c.
    Amplification {
        #[arg(long = "G", value_delimiter = ',', default_values_t = vec![12, 16, 24, 32])]
        group_sizes: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo curve with Gaussian honest rewards.
    Gaussian {
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.2, 0.3, 0.4])]
        mu: Vec<f64>,
        #[arg(long = "c", value_delimiter = ',')]
        counts: Option<Vec<usize>>,
        #[arg(long = "G", default_value_t = 12)]
        group_size: usize,
        #[arg(long, default_value_t = 0.25)]
        spread: f64,
        #[arg(long, value_enum, default_value_t = ParamArg::Std)]
        param: ParamArg,
        #[arg(long)]
        no_clamp: bool,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        let code = match e {
            ConfigError::Io { .. } => EXIT_IO,
            ConfigError::Malformed(_) => EXIT_MALFORMED,
            ConfigError::Invalid(_) => EXIT_INVALID,
        };
        Self::new(code, e.to_string())
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Swarm(SwarmError::Config(c)) => c.into(),
            RunError::Io { .. } | RunError::Metrics(_) => Self::new(EXIT_IO, e.to_string()),
            other => Self::new(EXIT_OTHER, other.to_string()),
        }
    }
}

impl From<analysis::AnalysisError> for Failure {
    fn from(e: analysis::AnalysisError) -> Self {
        let code = match e {
            analysis::AnalysisError::Io(_) => EXIT_IO,
            analysis::AnalysisError::Csv(_) => EXIT_IO,
            _ => EXIT_INVALID,
        };
        Self::new(code, e.to_string())
    }
}

fn load_checked(path: &Path) -> Result<ExperimentConfig, Failure> {
    let cfg = ExperimentConfig::load(path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn env_threads() -> Result<Option<usize>, Failure> {
    match std::env::var(ENV_THREADS) {
        Ok(v) => v
            .parse()
            .map(Some)
            .map_err(|_| Failure::new(EXIT_USAGE, format!("{ENV_THREADS}={v} is not a count"))),
        Err(_) => Ok(None),
    }
}

fn out_dir(arg: &Option<PathBuf>) -> PathBuf {
    arg.clone()
        .or_else(|| std::env::var_os(ENV_OUT_DIR).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn prepare(args: &RunArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.training.seed = seed;
    }
    if let Some(rounds) = args.rounds {
        cfg.training.rounds = rounds;
    }
    if let Some(t) = args.threads.or(env_threads()?) {
        cfg.swarm.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: &RunArgs) -> Result<(), Failure> {
    let cfg = prepare(args)?;
    let out = out_dir(&args.out);
    let options = RunOptions {
        record_wall_time: args.wall_time,
    };
    let records = run_to_dir(&cfg, &out, options)?;
    if let Some(last) = records.last().map(|r| r.round) {
        let asr = honest_mean(&records, last, |r| r.asr);
        let reward = honest_mean(&records, last, |r| r.mean_reward);
        println!(
            "rounds={} final_asr={} final_mean_reward={}",
            last + 1,
            fmt_opt(asr),
            fmt_opt(reward)
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".into(), |x| format!("{x:.4}"))
}

/// Parses one axis value the way TOML would: integer, float, bool, else string.
fn axis_value(raw: &str) -> toml::Value {
    if let Ok(i) = raw.parse::<i64>() {
        toml::Value::Integer(i)
    } else if let Ok(f) = raw.parse::<f64>() {
        toml::Value::Float(f)
    } else if let Ok(b) = raw.parse::<bool>() {
        toml::Value::Boolean(b)
    } else {
        toml::Value::String(raw.to_string())
    }
}

pub fn parse_axis(spec: &str) -> Result<(Vec<String>, Vec<String>), String> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| format!("axis `{spec}` is not key=v1,v2"))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.len() != 2 || path.iter().any(String::is_empty) {
        return Err(format!("axis key `{key}` must be section.key"));
    }
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
    if values.iter().any(String::is_empty) {
        return Err(format!("axis `{spec}` has an empty value"));
    }
    Ok((path, values))
}

/// Copy of `cfg` with `section.key` set to `raw`.
pub fn with_override(
    cfg: &ExperimentConfig,
    path: &[String],
    raw: &str,
) -> Result<ExperimentConfig, ConfigError> {
    let mut table: toml::Table = cfg
        .to_toml()
        .parse()
        .map_err(|e: toml::de::Error| ConfigError::Malformed(e.to_string()))?;
    let section = table
        .entry(path[0].clone())
        .or_insert_with(|| toml::Value::Table(Default::default()));
    let section = section
        .as_table_mut()
        .ok_or_else(|| ConfigError::Malformed(format!("`{}` is not a section", path[0])))?;
    section.insert(path[1].clone(), axis_value(raw));
    ExperimentConfig::from_toml(&toml::to_string(&table).expect("table serializes"))
}

fn sweep(args: &SweepArgs) -> Result<(), Failure> {
    let base = prepare(&args.run)?;
    let axes: Vec<(Vec<String>, Vec<String>)> = args
        .axes
        .iter()
        .map(|a| parse_axis(a))
        .collect::<Result<_, _>>()
        .map_err(|m| Failure::new(EXIT_USAGE, m))?;
    let mut cells: Vec<Vec<usize>> = vec![vec![]];
    for (_, values) in &axes {
        cells = cells
            .into_iter()
            .flat_map(|prefix| {
                (0..values.len()).map(move |i| {
                    let mut p = prefix.clone();
                    p.push(i);
                    p
                })
            })
            .collect();
    }
    let mut configs = Vec::with_capacity(cells.len());
    for choice in &cells {
        let mut cfg = base.clone();
        for ((path, values), &i) in axes.iter().zip(choice) {
            cfg = with_override(&cfg, path, &values[i])?;
        }
        cfg.validate()?;
        configs.push(cfg);
    }
    let out = out_dir(&args.run.out);
    std::fs::create_dir_all(&out)
        .map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", out.display())))?;
    let summary_path = out.join("summary.csv");
    let mut summary = csv::Writer::from_path(&summary_path)
        .map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", summary_path.display())))?;
    let mut header = vec!["cell".to_string()];
    header.extend(axes.iter().map(|(p, _)| p.join(".")));
    header.extend(["rounds", "final_asr", "max_asr", "final_mean_reward"].map(String::from));
    let csv_err = |e: csv::Error| Failure::new(EXIT_IO, e.to_string());
    summary.write_record(&header).map_err(csv_err)?;
    for (i, (cfg, choice)) in configs.iter().zip(&cells).enumerate() {
        let cell = format!("cell_{i:03}");
        let records = run_to_dir(
            cfg,
            &out.join(&cell),
            RunOptions {
                record_wall_time: args.run.wall_time,
            },
        )?;
        let rounds = cfg.training.rounds;
        let last = rounds.checked_sub(1);
        let final_asr = last.and_then(|r| honest_mean(&records, r, |x| x.asr));
        let max_asr = (0..rounds)
            .filter_map(|r| honest_mean(&records, r, |x| x.asr))
            .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
        let reward = last.and_then(|r| honest_mean(&records, r, |x| x.mean_reward));
        let mut row = vec![cell];
        row.extend(axes.iter().zip(choice).map(|((_, v), &j)| v[j].clone()));
        row.push(rounds.to_string());
        row.extend(
            [final_asr, max_asr, reward].map(|v| v.map_or(String::new(), |x| x.to_string())),
        );
        summary.write_record(&row).map_err(csv_err)?;
        summary
            .flush()
            .map_err(|e| Failure::new(EXIT_IO, e.to_string()))?;
        println!("{}", row.join(","));
    }
    println!("wrote {}", summary_path.display());
    Ok(())
}

fn write_points(
    points: &[analysis::AmplificationPoint],
    out: &Option<PathBuf>,
) -> Result<(), Failure> {
    match out {
        Some(path) => {
            let file = std::fs::File::create(path)
                .map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", path.display())))?;
            analysis::write_csv(points, file)?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            analysis::write_csv(points, &mut lock)?;
            lock.flush()
                .map_err(|e| Failure::new(EXIT_IO, e.to_string()))?;
        }
    }
    Ok(())
}

fn analyze(what: &Analyze) -> Result<(), Failure> {
    match what {
        Analyze::Amplification { group_sizes, out } => {
            let points = analysis::amplification_curve(group_sizes)?;
            write_points(&points, out)
        }
        Analyze::Gaussian {
            mu,
            counts,
            group_size,
            spread,
            param,
            no_clamp,
            trials,
            seed,
            out,
        } => {
            let study = GaussianStudy {
                group_size: *group_size,
                spread: *spread,
                param: match param {
                    ParamArg::Std => GaussianParam::Std,
                    ParamArg::Var => GaussianParam::Var,
                },
                clamp: !no_clamp,
                trials: *trials,
                seed: *seed,
            };
            let counts = counts.clone().unwrap_or_else(|| (1..*group_size).collect());
            let points = analysis::gaussian_honest_curve(mu, &counts, &study)?;
            write_points(&points, out)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Run(args) => run(args),
        Command::Sweep(args) => sweep(args),
        Command::Analyze { what } => analyze(what),
        Command::ValidateConfig { config } => {
            load_checked(config)?;
            println!("ok");
            Ok(())
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_cli<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK });
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
