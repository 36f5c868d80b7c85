use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cellfree::output;
use cellfree::rates::ModeAssignment;
use cellfree::runner::{self, SweepSpec};
use cellfree::{Error, Result, SystemConfig};

#[derive(Parser, Debug)]
#[command(name = "cellfree", version, about = "Cell-free massive MIMO downlink with hybrid CJT/NCJT serving")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat `key = value` file with SystemConfig fields; defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw one scenario and write its geometry and link tables.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Also estimate and dump the precoding statistics.
        #[arg(long)]
        stats: bool,
    },
    /// Run the SCA once and write its convergence trace and solution.
    Converge {
        #[command(flatten)]
        common: Common,
        /// Mode per UE, `1` = CJT and `0` = NCJT; defaults to `0101...`.
        #[arg(long)]
        modes: Option<String>,
        #[arg(long)]
        cmax: Option<f64>,
        #[arg(long = "serving-set")]
        serving_set: Option<usize>,
    },
    /// Sweep the CJT probability and write per-run rows and averages.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long = "p-grid", value_delimiter = ',')]
        p_grid: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        cmax: Option<Vec<f64>>,
        #[arg(long = "serving-set", value_delimiter = ',')]
        serving_set: Option<Vec<usize>>,
        /// Topology draws per grid point.
        #[arg(long, default_value_t = 10)]
        draws: usize,
        /// Mode draws per topology.
        #[arg(long = "mode-draws", default_value_t = 5)]
        mode_draws: usize,
    },
}

fn load_config(common: &Common) -> Result<SystemConfig> {
    let mut cfg = match &common.config {
        Some(path) => SystemConfig::load(path)?,
        None => SystemConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(common: &Common) -> Result<&Path> {
    std::fs::create_dir_all(&common.out).map_err(|e| Error::Config(format!("cannot create {}: {e}", common.out.display())))?;
    Ok(&common.out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common, stats } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&common)?;
            let (scenario, statistics) = if stats {
                let (sc, st) = runner::prepare(&cfg, cfg.seed)?;
                (sc, Some(st))
            } else {
                (cellfree::netgen::Scenario::generate(&cfg, cfg.seed)?, None)
            };
            output::write_positions(dir, &scenario.topology)?;
            output::write_links(&dir.join(output::LINKS_CSV), &scenario.topology, &scenario.pilots)?;
            if let Some(st) = statistics {
                output::write_stats(&dir.join(output::STATS_CSV), &st)?;
            }
        }
        Command::Converge { common, modes, cmax, serving_set } => {
            let mut cfg = load_config(&common)?;
            if let Some(c) = cmax {
                cfg.fronthaul_cap_bps_hz = c;
            }
            if let Some(s) = serving_set {
                cfg.serving_set_size = s;
            }
            cfg.validate()?;
            let modes = match modes {
                Some(bits) => ModeAssignment::from_bits(&bits)?,
                None => ModeAssignment::alternating(cfg.num_ues),
            };
            let dir = out_dir(&common)?;
            let run = runner::run_single(&cfg, &modes, cfg.seed)?;
            let out = &run.outcome;
            output::write_convergence(&dir.join(output::CONVERGENCE_CSV), &out.trace)?;
            output::write_power(&dir.join(output::POWER_CSV), &out.power, &run.scenario.topology)?;
            output::write_rates(&dir.join(output::RATES_CSV), &out.report)?;
            output::write_fronthaul(&dir.join(output::FRONTHAUL_CSV), &run.operating_fronthaul(), cfg.fronthaul_cap_bps_hz)?;
            println!(
                "modes {modes}: objective {:.4} bit/s/Hz, recomputed {:.4} bit/s/Hz, {} iterations{}",
                out.objective(),
                out.report.sum_rate_bps_hz,
                out.iterations(),
                if out.stop_rule_met { "" } else { " (iteration cap)" }
            );
            if let Some(reason) = &out.aborted {
                eprintln!("stopped early: {reason}");
            }
        }
        Command::Sweep { common, p_grid, cmax, serving_set, draws, mode_draws } => {
            let cfg = load_config(&common)?;
            let mut spec = SweepSpec::new(cfg);
            if let Some(g) = p_grid {
                spec.p_grid = g;
            }
            if let Some(c) = cmax {
                spec.cmax_values = c;
            }
            if let Some(s) = serving_set {
                spec.serving_set_sizes = s;
            }
            spec.topology_draws = draws;
            spec.mode_draws = mode_draws;
            spec.validate()?;
            let dir = out_dir(&common)?;
            let total = spec.p_grid.len() * spec.cmax_values.len() * spec.serving_set_sizes.len() * draws * mode_draws;
            let mut done = 0;
            let result = runner::sweep_p_with(&spec, |_| {
                done += 1;
                if done % 50 == 0 || done == total {
                    eprintln!("{done}/{total} runs");
                }
            })?;
            output::write_sweep(&dir.join(output::SWEEP_CSV), &result.rows)?;
            output::write_summary(&dir.join(output::SUMMARY_CSV), &result.summary)?;
            for (c, s, p) in result.argmax_p() {
                println!("cmax {c} serving_set_size {s}: best p = {p}");
            }
            if result.failed_runs() > 0 {
                eprintln!("{} runs failed and were left out of the averages", result.failed_runs());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
