use std::path::{Path, PathBuf};
use std::process::ExitCode;

use atomchain::scenario::{
    run_bands, run_scenario, run_sweep, thread_pool, Analysis, BandsConfig, ScenarioConfig, SweepSpec,
};
use atomchain::{Error, Result};
use clap::{Args, Parser, Subcommand};

/// Single-excitation dynamics of V-type atomic arrays.
#[derive(Parser, Debug)]
#[command(name = "atomchain", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Band structure at each constant field of a bands config.
    Bands(Common),
    /// Evolve a wavepacket and write its observables.
    Evolve(Common),
    /// Sweep initial conditions and tabulate the figure of merit.
    Sweep(Common),
    /// Evolve and project the momentum spectrum onto the Bloch bands.
    Project(Common),
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Overrides the integrator's maximum step (1/gamma0).
    #[arg(long)]
    dt_max: Option<f64>,
    /// Overrides the lattice-sum cutoff.
    #[arg(long)]
    sum_cutoff: Option<usize>,
}

impl Common {
    fn apply(&self, config: &mut ScenarioConfig) {
        if let Some(dt) = self.dt_max {
            config.integrator.dt_max_gamma0inv = dt;
            config.integrator.min_step_gamma0inv = config.integrator.min_step_gamma0inv.min(dt);
        }
        if let Some(m) = self.sum_cutoff {
            config.model.sum_cutoff = m;
        }
    }

    fn out(&self) -> Option<&Path> {
        self.out.as_deref()
    }
}

fn load_scenario(args: &Common) -> Result<ScenarioConfig> {
    let mut config = ScenarioConfig::from_path(&args.config)?;
    args.apply(&mut config);
    config.validate()?;
    Ok(config)
}

fn evolve(args: &Common, project: bool) -> Result<()> {
    let mut config = load_scenario(args)?;
    if project && !config.analyses.contains(&Analysis::Spectrum) {
        config.analyses.push(Analysis::Spectrum);
    }
    let outcome = run_scenario(&config, args.out())?;
    let last = outcome.trajectory.samples.last().expect("at least one sample");
    println!(
        "{}: {} samples, P_t({}) = {:e}",
        outcome.name,
        outcome.trajectory.samples.len(),
        last.t,
        last.p_total
    );
    if !outcome.reversal_times.is_empty() {
        println!("reversals: {}", outcome.reversal_times.len());
    }
    for p in &outcome.plateaus {
        println!("plateau [{:.3}, {:.3}] level {:.4}", p.start, p.end, p.level);
    }
    for f in &outcome.decay_fits {
        println!(
            "decay rate on [{}, {}]: {:e} ({:?}{})",
            f.window.0,
            f.window.1,
            f.rate,
            f.method,
            if f.at_floor { ", at floor" } else { "" }
        );
    }
    for p in &outcome.files {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn sweep(args: &Common) -> Result<()> {
    let mut spec = SweepSpec::from_path(&args.config)?;
    args.apply(&mut spec.base);
    spec.validate()?;
    let outcome = run_sweep(&spec, args.workers, args.out())?;
    let failed = outcome.points.iter().filter(|p| p.error.is_some()).count();
    println!("{}: {} points, {} failed", spec.name, outcome.points.len(), failed);
    if let Some(best) = outcome.best {
        let p = &outcome.points[best];
        let axes: Vec<String> = spec
            .axes
            .iter()
            .map(|a| format!("{} = {}", a.parameter.column(), p.parameters[&a.parameter]))
            .collect();
        println!("best {}: {:e} at {}", outcome.figure_of_merit, p.value, axes.join(", "));
    }
    for p in &outcome.files {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn bands(args: &Common) -> Result<()> {
    let mut config = BandsConfig::from_path(&args.config)?;
    if let Some(m) = args.sum_cutoff {
        config.model.sum_cutoff = m;
    }
    config.validate()?;
    let tables = thread_pool(args.workers)?.install(|| run_bands(&config, args.out()))?;
    for t in &tables {
        let min_gap = t.gaps().into_iter().fold(f64::INFINITY, f64::min);
        println!("b_c = {}: min gap {:e}", t.constant_field, min_gap);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Bands(a) => bands(a),
        Command::Evolve(a) => evolve(a, false),
        Command::Project(a) => evolve(a, true),
        Command::Sweep(a) => sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}
