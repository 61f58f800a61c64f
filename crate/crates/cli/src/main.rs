use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use tidac_core::anneal::NeighborWindow;
use tidac_core::experiment::{self, parse_config, ExperimentConfig, ThresholdCheck};
use tidac_core::spectral::DacConfig;

#[derive(Parser, Debug)]
#[command(name = "tidac", version, about = "Twofold time-interleaved DAC calibration experiments")]
struct Cli {
    /// TOML experiment file; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the seed list.
    #[arg(long, global = true, num_args = 1..)]
    seed: Vec<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Disable measurement noise.
    #[arg(long, global = true)]
    noise_off: bool,
    #[arg(long, global = true, value_enum)]
    neighbor_mode: Option<NeighborMode>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Anneal the default plant once per seed.
    Calibrate,
    /// Compare pre-calibration, annealing and grid search across the sweep tones.
    Sweep,
    /// Write the analytic spur level curves.
    Contours,
    /// Print the effective configuration as TOML.
    DumpConfig,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NeighborMode {
    Window,
    Full,
}

fn load(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => parse_config(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default_for(DacConfig::new(50e9, 10)?),
    };
    if !cli.seed.is_empty() {
        cfg.seeds = cli.seed.clone();
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if cli.noise_off {
        cfg.capture.noise_floor_dbc = f64::NEG_INFINITY;
    }
    match cli.neighbor_mode {
        Some(NeighborMode::Full) => cfg.anneal.neighbor_window = NeighborWindow::FullRange,
        Some(NeighborMode::Window) if cfg.anneal.neighbor_window == NeighborWindow::FullRange => {
            cfg.anneal.neighbor_window = NeighborWindow::default()
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report(checks: &[ThresholdCheck]) -> bool {
    for c in checks {
        println!(
            "{:<32} {:>12.4} limit {:>10.4}  {}",
            c.name,
            c.value,
            c.limit,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    checks.iter().all(|c| c.passed)
}

fn run(cli: &Cli) -> anyhow::Result<bool> {
    let cfg = load(cli)?;
    let passed = match cli.command {
        Command::DumpConfig => {
            print!("{}", cfg.to_toml()?);
            true
        }
        Command::Calibrate => {
            let r = experiment::run_calibrate(&cfg)?;
            for run in &r.runs {
                println!(
                    "seed {:>4}  pre {:>8.2} dBc  post {:>8.2} dBc  measurements {}",
                    run.seed, run.pre_cal_spur_dbc, run.post_cal_spur_dbc, run.measurement_count
                );
            }
            report(&r.checks)
        }
        Command::Sweep => {
            let r = experiment::run_sweep(&cfg)?;
            println!("{:>10} {:>9} {:>9} {:>9} {:>6}", "f_out GHz", "pre", "SA", "grid", "pass");
            for row in &r.rows {
                println!(
                    "{:>10.3} {:>9.2} {:>9.2} {:>9.2} {:>6.2}",
                    row.f_out_hz / 1e9,
                    row.pre_cal_spur_dbc,
                    row.sa_mean_spur_dbc,
                    row.grid_mean_spur_dbc,
                    row.sa_pass_fraction
                );
            }
            report(&r.checks)
        }
        Command::Contours => {
            let r = experiment::run_contours(&cfg)?;
            for c in &r.curves {
                println!(
                    "{:>8.3} GHz  max gain {:.3}%  max duty {:.3}%  -> {}",
                    c.f_out_hz / 1e9,
                    c.max_gain_error_pct,
                    c.max_duty_error_pct,
                    c.file
                );
            }
            report(&r.checks)
        }
    };
    Ok(passed)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
