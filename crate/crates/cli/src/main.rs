mod commands;
mod config;
mod output;

use clap::{Parser, Subcommand};
use config::{ConfigError, ExperimentConfig};
use output::{OutputDir, ResultRecord, Table};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_ASSERTION: u8 = 4;

/// Overrides the output directory when `--out` is not given.
const OUT_DIR_ENV: &str = "GRADGEOM_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "gradgeom", version, about = "Gradient-geometry experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `section.key=value` override, applied after the file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for Monte-Carlo loops (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Loss-gradient width, featurizer width and the width bound.
    Width,
    /// Rademacher complexity of the gradient set and the Khintchine sweep.
    Nerc,
    /// Widths of canonical sets against their closed forms.
    Canonical,
    /// Initialization, layer, Jacobian and concentration checks.
    VerifyLemmas,
    /// GD-ratio traces for teacher-student runs.
    GdRatio,
    /// Sorted gradient coordinates and featurizer norms.
    Profile,
    /// Sample-reuse scaling of the gradient deviation.
    Reuse,
    /// Convergence of the population gradient under GD.
    Converge,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Width => "width",
            Command::Nerc => "nerc",
            Command::Canonical => "canonical",
            Command::VerifyLemmas => "verify-lemmas",
            Command::GdRatio => "gd-ratio",
            Command::Profile => "profile",
            Command::Reuse => "reuse",
            Command::Converge => "converge",
        }
    }

    fn run(self, cfg: &ExperimentConfig, rec: &mut ResultRecord) -> anyhow::Result<Vec<Table>> {
        match self {
            Command::Width => commands::width(cfg, rec),
            Command::Nerc => commands::nerc(cfg, rec),
            Command::Canonical => commands::canonical(cfg, rec),
            Command::VerifyLemmas => commands::verify_lemmas(cfg, rec),
            Command::GdRatio => commands::gd_ratio(cfg, rec),
            Command::Profile => commands::profile(cfg, rec),
            Command::Reuse => commands::reuse(cfg, rec),
            Command::Converge => commands::converge(cfg, rec),
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, ConfigError> {
    let text = match &cli.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?,
        None => include_str!("../../../configs/default.toml").to_string(),
    };
    config::load(&text, &cli.overrides)
}

fn output_dir(cli: &Cli, cfg: &ExperimentConfig) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(cli.command.name()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(EXIT_CONFIG);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    }
    let out = match OutputDir::create(output_dir(&cli, &cfg), cfg.format) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    };

    if let Err(e) = std::fs::write(out.dir.join("config.toml"), cfg.to_toml()) {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_RUNTIME);
    }

    let started = Instant::now();
    let mut rec = ResultRecord::new(cli.command.name(), &cfg);
    let outcome = cli.command.run(&cfg, &mut rec).and_then(|tables| {
        tables
            .iter()
            .map(|t| out.write_table(t))
            .collect::<anyhow::Result<Vec<_>>>()
    });
    rec.wall_clock_seconds = started.elapsed().as_secs_f64();
    let code = match outcome {
        Ok(files) => {
            rec.tables = files;
            if rec.failures.is_empty() {
                0
            } else {
                rec.status = "assertion_failed";
                for f in &rec.failures {
                    eprintln!("check failed: {f}");
                }
                EXIT_ASSERTION
            }
        }
        Err(e) => {
            // Missing sections surface here, after the config itself parsed.
            let config_error = e.downcast_ref::<ConfigError>().is_some();
            eprintln!("error: {e:#}");
            rec.status = "error";
            rec.error = Some(format!("{e:#}"));
            if config_error {
                EXIT_CONFIG
            } else {
                EXIT_RUNTIME
            }
        }
    };
    if let Err(e) = out.write_record(&rec) {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_RUNTIME);
    }
    println!("{}", out.dir.join("result.json").display());
    ExitCode::from(code)
}
