use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use mrmm::cli::{cmd_compare, cmd_equilibrium, cmd_simulate, cmd_solve, exit_code};
use mrmm::config::{PolicyKind, RunConfig, SolverKind};

#[derive(Parser)]
#[command(name = "mrmm", version, about = "Optimal quoting under a mean-reverting reference price")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, default_value = "mrmm.toml")]
    config: PathBuf,
    /// Output directory; overrides `output_dir` from the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Compare surfaces even when their config hashes differ.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Fd,
    Splitstep,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Fd,
    Splitstep,
    Constant,
    Zhang,
    Linear,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the HJB equation and write surfaces, policies and diagnostics.
    Solve {
        #[arg(long, value_enum)]
        solver: Option<SolverArg>,
    },
    /// Trade a policy in simulated markets.
    Simulate {
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "dt-sim")]
        dt_sim: Option<f64>,
        #[arg(long, value_enum)]
        policy: Option<PolicyArg>,
    },
    /// Ground-state analysis of the long-time limit of a solved surface.
    Equilibrium {
        /// Surface file; defaults to the final surface of the configured solver.
        #[arg(long)]
        surface: Option<PathBuf>,
    },
    /// Compare surface files with each other and with the closed-form baselines.
    Compare {
        /// Surface files; defaults to the final surfaces of both solvers.
        files: Vec<PathBuf>,
    },
}

fn default_surfaces(out: &Path) -> Vec<PathBuf> {
    ["fd", "splitstep"]
        .iter()
        .map(|s| out.join(s).join("surface_final.bin"))
        .filter(|p| p.exists())
        .collect()
}

fn run(cli: Cli, cfg: RunConfig) -> anyhow::Result<()> {
    let mut cfg = cfg;
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    match cli.command {
        Command::Solve { solver } => {
            if let Some(s) = solver {
                cfg.solver = match s {
                    SolverArg::Fd => SolverKind::Fd,
                    SolverArg::Splitstep => SolverKind::Splitstep,
                };
                cfg.validate()?;
            }
            let report = cmd_solve(&cfg, &out)?;
            let last = report.snapshots.last().expect("a solve reports its final surface");
            println!(
                "{} solve done: {} steps, final tau {} (s-metric {:.3e}, q-metric {:.3e}), outputs in {}",
                report.solver.name(),
                report.stats.steps,
                last.tau_market,
                last.s_metric,
                last.q_metric,
                out.join(report.solver.name()).display()
            );
        }
        Command::Simulate { paths, seed, dt_sim, policy } => {
            let sim = &mut cfg.simulation;
            if let Some(n) = paths {
                sim.paths = n;
            }
            if let Some(s) = seed {
                sim.seed = s;
            }
            if let Some(dt) = dt_sim {
                sim.dt = dt;
            }
            if let Some(p) = policy {
                sim.policy = match p {
                    PolicyArg::Fd => PolicyKind::Fd,
                    PolicyArg::Splitstep => PolicyKind::Splitstep,
                    PolicyArg::Constant => PolicyKind::Constant,
                    PolicyArg::Zhang => PolicyKind::Zhang,
                    PolicyArg::Linear => PolicyKind::Linear,
                };
            }
            cfg.validate()?;
            let report = cmd_simulate(&cfg, &out)?;
            let s = &report.summary;
            println!(
                "{} paths: terminal wealth {:.6} +- {:.6}, utility {:.6}, fills ask {:.3} bid {:.3}",
                s.paths,
                s.terminal_wealth.mean,
                s.terminal_wealth.std_error,
                s.utility.mean,
                s.ask_fills.mean,
                s.bid_fills.mean
            );
        }
        Command::Equilibrium { surface } => {
            let surface = surface.unwrap_or_else(|| out.join(cfg.solver.name()).join("surface_final.bin"));
            let report = cmd_equilibrium(&cfg, &surface, &out)
                .with_context(|| format!("equilibrium analysis of {}", surface.display()))?;
            println!(
                "C_hat = {:.12e}, C = {:.6e}, max |theta - v_sdep| = {:.3e}, max |theta| = {:.3e}",
                report.c_hat, report.c, report.max_abs_error, report.max_abs_theta
            );
        }
        Command::Compare { files } => {
            let files = if files.is_empty() { default_surfaces(&out) } else { files };
            let report = cmd_compare(&cfg, &files, &out, cli.force)?;
            for d in &report.deviations {
                println!("{} vs {}: max abs {:.3e}", d.file, d.baseline, d.max_abs);
            }
            for d in &report.pairwise {
                println!("{} vs {}: max abs {:.3e}", d.a, d.b, d.max_abs);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match RunConfig::load(&cli.config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e) as u8);
        }
    };
    let hash = cfg.hash();
    match run(cli, cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error (config {hash}): {e:#}");
            let code = e.downcast_ref::<mrmm::Error>().map_or(1, exit_code);
            ExitCode::from(code as u8)
        }
    }
}
