use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use log::info;
use nanbu_cli::config::ExperimentSpec;
use nanbu_cli::experiments::{plain_run, run_experiment, ExperimentName, Status};
use nanbu_cli::manifest::{now_ms, RunManifest};
use nanbu_cli::parse_config;
use nanbu_cli::report::emit_report;

#[derive(Parser)]
#[command(
    name = "nanbu",
    version,
    about = "Particle simulation of the homogeneous Boltzmann equation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configuration, or one of its named experiments.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the `[experiment]` section of the configuration.
        #[arg(long)]
        experiment: Option<ExperimentName>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        replicas: Option<usize>,
        /// Output directory; defaults to `output.dir` of the configuration.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and validate a configuration, then print its hash.
    CheckConfig { path: PathBuf },
    /// Summarize a manifest written by `run`.
    Report {
        manifest: PathBuf,
        /// Print the JSON summary instead of the table.
        #[arg(long)]
        json: bool,
    },
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("NANBU_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("NANBU_THREADS={v} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn run(
    config: &Path,
    experiment: Option<ExperimentName>,
    seed: Option<u64>,
    replicas: Option<usize>,
    out: Option<PathBuf>,
) -> anyhow::Result<Status> {
    let mut cfg = parse_config(config)?;
    if let Some(s) = seed {
        cfg.sim.seed = s;
    }
    let base_dir = config.parent().map(Path::to_path_buf).unwrap_or_default();
    let out = out.unwrap_or_else(|| {
        if cfg.output.dir.is_relative() {
            base_dir.join(&cfg.output.dir)
        } else {
            cfg.output.dir.clone()
        }
    });
    let spec = match (experiment, &cfg.experiment) {
        (Some(name), Some(s)) if s.name == name => Some(s.clone()),
        (Some(name), _) => Some(ExperimentSpec::new(name)),
        (None, s) => s.clone(),
    };
    let started = now_ms();
    let hash = cfg.hash();
    let (label, outcome) = match spec {
        Some(mut s) => {
            if let Some(r) = replicas {
                s.replicas = r;
            }
            info!(
                "running experiment {} with {} replicas into {}",
                s.name,
                s.replicas,
                out.display()
            );
            (
                s.name.to_string(),
                run_experiment(&cfg, &s, &out, &base_dir)?,
            )
        }
        None => {
            info!(
                "running {} replicas into {}",
                replicas.unwrap_or(1),
                out.display()
            );
            (
                "run".to_string(),
                plain_run(&cfg, replicas.unwrap_or(1), &out, &base_dir)?,
            )
        }
    };
    let manifest = RunManifest::new(&label, hash, started, vec![outcome]);
    let path = manifest.write(&out)?;
    let (_, table) = emit_report(&manifest);
    print!("{table}");
    println!("manifest: {}", path.display());
    Ok(manifest.summaries[0].status)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match cli.command {
        Command::Run {
            config,
            experiment,
            seed,
            replicas,
            out,
        } => run(&config, experiment, seed, replicas, out),
        Command::CheckConfig { path } => {
            let cfg = parse_config(&path)?;
            cfg.sim_config()?;
            println!("ok {}", cfg.hash());
            Ok(Status::Noop)
        }
        Command::Report { manifest, json } => {
            let m = RunManifest::read(&manifest)?;
            let (j, table) = emit_report(&m);
            if json {
                println!("{j}");
            } else {
                print!("{table}");
            }
            Ok(nanbu_cli::report::build_report(&m).status)
        }
    });
    match result {
        Ok(Status::Fail) => ExitCode::from(1),
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
