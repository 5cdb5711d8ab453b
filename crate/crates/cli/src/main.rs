use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use poincare_upo::SystemParams;
use upo_cli::output::Artifacts;
use upo_cli::pipeline::{cmd_analyze, cmd_lagrange, cmd_propagate};
use upo_cli::{run_through, Experiment, PipelineConfig, Stage, DEFAULT_OUT_DIR, OUT_DIR_ENV};

#[derive(Parser)]
#[command(name = "upo", version, about = "Data-driven Poincare maps and impulsive stabilization of CR3BP periodic orbits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat TOML experiment file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Periodic-orbit catalog CSV (overrides the config).
    #[arg(long, global = true)]
    catalog: Option<PathBuf>,
    /// Output directory (overrides the config and the environment).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for the bootstrap ensemble (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Lagrange points and their Jacobi constants.
    Lagrange,
    /// Propagate the target orbit and report Jacobi drift.
    Propagate,
    /// Monodromy spectrum and manifold directions at each section.
    Analyze,
    /// Build the augmented crossing dataset.
    Sample,
    /// Fit the sparse return map and validate it against the monodromy.
    Discover,
    /// Solve the gain LMI for every configured radius.
    Synthesize,
    /// Run the controlled map for every feasible gain.
    Stabilize,
    /// All stages plus the delta-v error sweep.
    Pipeline,
}

fn load(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(c) = &cli.catalog {
        cfg.catalog = c.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: &PipelineConfig) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.out.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = load(cli)?;
    let mut art = Artifacts::new(out_dir(cli, &cfg))?;
    if let Command::Lagrange = cli.command {
        for l in cmd_lagrange(&SystemParams::earth_moon(), &mut art)? {
            println!("{} x={:.6} y={:.6} C={:.6}", l.label, l.position[0], l.position[1], l.jacobi);
        }
        return Ok(());
    }
    let ex = Experiment::new(cfg)?;
    match cli.command {
        Command::Lagrange => unreachable!(),
        Command::Propagate => {
            let r = cmd_propagate(&ex, &mut art)?;
            println!(
                "{}: {} steps, max Jacobi drift {:.3e}, periodicity residual {:.3e}",
                r.target, r.steps, r.max_jacobi_drift, r.periodicity_residual
            );
        }
        Command::Analyze => {
            for a in cmd_analyze(&ex, &mut art)? {
                println!(
                    "{}: lambda_u={:.6} lambda_s={:.6e} |M|={:.4e}",
                    a.section, a.lambda_u, a.lambda_s, a.spectral_norm
                );
            }
        }
        Command::Sample => {
            run_through(&ex, Stage::Sample, &mut art)?;
        }
        Command::Discover => {
            run_through(&ex, Stage::Discover, &mut art)?;
        }
        Command::Synthesize => {
            run_through(&ex, Stage::Synthesize, &mut art)?;
        }
        Command::Stabilize | Command::Pipeline => {
            let stage = if let Command::Pipeline = cli.command { Stage::Pipeline } else { Stage::Stabilize };
            if let Some(r) = run_through(&ex, stage, &mut art)? {
                println!(
                    "{} at {}: {} pairs, total eigenvalue error {:.4e}, det {:.4}",
                    r.target, r.section, r.n_pairs, r.validation.total_error, r.validation.det
                );
                for run in &r.runs {
                    let dv = run.summary.delta_v_ranges.first().map_or(f64::NAN, |d| d.delta_v_si);
                    println!(
                        "  {} R={:.3e}: {} periods, dv={:.4e} m/s, theta={:.3} deg",
                        run.label,
                        run.radius,
                        run.summary.periods_completed,
                        dv,
                        run.summary.theta_deg.unwrap_or(f64::NAN)
                    );
                }
            }
        }
    }
    for p in art.written() {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
