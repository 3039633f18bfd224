use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use mixttt_cli::commands::{self, CorruptArgs, Outputs};
use mixttt_cli::config::RunConfig;
use mixttt_core::Error;

#[derive(Parser)]
#[command(
    name = "mixttt",
    version,
    about = "Test-time training with train/test mixing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the `out_dir` key.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Joint main/rotation training; writes a checkpoint and per-epoch metrics.
    Pretrain(Common),
    /// Writes corrupted copies of a dataset.
    Corrupt {
        #[command(flatten)]
        common: Common,
        /// Dataset to corrupt (default: `test_path`).
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// A single corruption kind (default: the `corruptions` list).
        #[arg(long)]
        kind: Option<String>,
        /// Severity 1..=5 (default: the `severity` key).
        #[arg(long)]
        severity: Option<u8>,
    },
    /// Baseline, plain and mixed test-time training over the corruption suite.
    Ttt(Common),
    /// Property checks; exits non-zero if any enabled check fails.
    Verify(Common),
    /// Generates the synthetic train/test splits.
    Synth(Common),
}

fn now() -> String {
    let t = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .unwrap_or_default();
    format!("{}.{:03}", t.as_secs(), t.subsec_millis())
}

fn init_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("MIXTTT_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|n| *n > 0).ok_or_else(|| {
        Error::Config(format!("MIXTTT_THREADS = {v:?} is not a positive integer"))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run(
    name: &str,
    common: &Common,
    body: impl FnOnce(&RunConfig, &Outputs) -> Result<bool, Error>,
) -> Result<bool, Error> {
    init_threads()?;
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.set("seed", s.to_string());
    }
    let dir = match &common.out {
        Some(d) => d.clone(),
        None => cfg.path("out_dir").expect("out_dir has a default"),
    };
    if let Some(d) = &common.out {
        cfg.set("out_dir", d.display().to_string());
    }
    let out = Outputs::new(&cfg, dir)?;
    let log_path = out.path(&format!("{name}.log"));
    let started = now();
    let result = body(&cfg, &out);
    let status = match &result {
        Ok(true) => "ok".to_string(),
        Ok(false) => "checks failed".to_string(),
        Err(e) => format!("error: {e}"),
    };
    let lines = [
        format!(
            "{started} start {name} config={} hash={}",
            common.config.display(),
            out.hash()
        ),
        format!("{} end {name} {status}", now()),
    ];
    if let Err(e) = commands::sidecar_log(&log_path, &lines) {
        log::warn!("cannot write {}: {e}", log_path.display());
    }
    result
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Pretrain(c) => run("pretrain", c, |cfg, out| {
            commands::cmd_pretrain(cfg, out).map(|_| true)
        }),
        Command::Corrupt {
            common,
            input,
            kind,
            severity,
        } => {
            let args = CorruptArgs {
                input: input.clone(),
                kind: kind.clone(),
                severity: *severity,
            };
            run("corrupt", common, |cfg, out| {
                commands::cmd_corrupt(cfg, out, &args).map(|_| true)
            })
        }
        Command::Ttt(c) => run("ttt", c, |cfg, out| {
            commands::cmd_ttt(cfg, out).map(|_| true)
        }),
        Command::Verify(c) => run("verify", c, commands::cmd_verify),
        Command::Synth(c) => run("synth", c, |cfg, out| {
            commands::cmd_synth(cfg, out).map(|_| true)
        }),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("one or more verification checks failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("mixttt: {e}");
            ExitCode::from(commands::exit_code(&e) as u8)
        }
    }
}
