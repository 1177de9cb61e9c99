//! Command line front end for the multiscale fracture pipeline.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 on numerical or
//! I/O failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use periscale::config::PipelineConfig;
use periscale::pipeline;
use periscale::Error;

#[derive(Parser)]
#[command(name = "periscale", version, about = "Multiscale bond-based peridynamic fracture toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// configuration file (TOML)
    #[arg(long)]
    config: PathBuf,
    /// output directory for artifacts
    #[arg(long)]
    out: PathBuf,
    /// override the number of samples
    #[arg(long)]
    samples: Option<usize>,
    /// override the base random seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full chain: generate, correct, fracture, homogenize, fit,
    /// macro simulation. Re-runs skip completed samples.
    Pipeline {
        #[command(flatten)]
        common: CommonArgs,
        /// worker threads for the sample sweep
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// stop after the named stage (generate-rve, correct, rve-fracture,
        /// homogenize, fit, macro-sim)
        #[arg(long)]
        stage: Option<String>,
    },
    /// Generate the random cell geometries.
    GenerateRve {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Correct the bond micromoduli of generated cells.
    Correct {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Fracture each cell along every axis and extract critical stretches.
    RveFracture {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Solve the cell problems and homogenize each sample.
    Homogenize {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Aggregate the samples and fit the equivalent micromodulus.
    Fit {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Simulate the homogenized macro structure.
    MacroSim {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Write a configuration template with the reference parameters.
    InitConfig {
        /// destination path
        #[arg(default_value = "periscale.toml")]
        path: PathBuf,
    },
}

fn load_config(common: &CommonArgs) -> Result<PipelineConfig, Error> {
    let mut cfg = PipelineConfig::load(&common.config)?;
    if let Some(m) = common.samples {
        cfg.samples.count = m;
    }
    if let Some(s) = common.seed {
        cfg.samples.base_seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn for_each_sample(
    common: &CommonArgs,
    f: impl Fn(&PipelineConfig, &std::path::Path, usize) -> Result<PathBuf, Error>,
) -> Result<(), Error> {
    let cfg = load_config(common)?;
    for m in 0..cfg.samples.count {
        let path = f(&cfg, &common.out, m)?;
        println!("sample {m}: wrote {}", path.display());
    }
    Ok(())
}

fn run() -> Result<(), Error> {
    match Cli::parse().command {
        Command::Pipeline {
            common,
            jobs,
            stage,
        } => {
            let cfg = load_config(&common)?;
            let manifest = pipeline::cmd_pipeline(&cfg, &common.out, jobs, stage.as_deref())?;
            println!(
                "pipeline complete: {} samples, manifest at {}",
                manifest.samples.len(),
                pipeline::RunManifest::path(&common.out).display()
            );
            Ok(())
        }
        Command::GenerateRve { common } => {
            for_each_sample(&common, pipeline::stage_generate_rve)
        }
        Command::Correct { common } => for_each_sample(&common, pipeline::stage_correct),
        Command::RveFracture { common } => {
            for_each_sample(&common, pipeline::stage_rve_fracture)
        }
        Command::Homogenize { common } => for_each_sample(&common, pipeline::stage_homogenize),
        Command::Fit { common } => {
            let cfg = load_config(&common)?;
            let path = pipeline::stage_fit(&cfg, &common.out)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::MacroSim { common } => {
            let cfg = load_config(&common)?;
            let (curve, snaps) = pipeline::stage_macro_sim(&cfg, &common.out)?;
            println!("wrote {} and {} snapshots", curve.display(), snaps.len());
            Ok(())
        }
        Command::InitConfig { path } => {
            let cfg = PipelineConfig::template_2d();
            std::fs::write(&path, cfg.to_toml()).map_err(|source| Error::Io {
                path: path.display().to_string(),
                source,
            })?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            match e {
                Error::Config { .. } => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
