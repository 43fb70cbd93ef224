use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use vppsim_core::plot::write_svg;
use vppsim_core::scenario::Scenario;
use vppsim_core::sim::{run_scenario, SimError, SimOptions};
use vppsim_core::trace::{compare_runs, run_metrics, SimTrace};

const DEFAULT_TRACKING_TOL_MW: f64 = 1.0;

#[derive(Parser)]
#[command(name = "vppsim", version, about = "Grid co-simulation with virtual power plants")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its trace.
    Run {
        script: PathBuf,
        /// Overrides the script's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Trace destination; defaults to the script's output.csv or <name>.csv.
        #[arg(long)]
        csv_out: Option<PathBuf>,
        /// Also write a four-panel SVG chart.
        #[arg(long)]
        svg: Option<PathBuf>,
        /// Directory for one text dump per MPC solve.
        #[arg(long)]
        debug_dumps: Option<PathBuf>,
    },
    /// Check a scenario and its network without running it.
    Validate { script: PathBuf },
    /// Compare two traces sampled on the same grid.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 60.0)]
        nominal_hz: f64,
        #[arg(long, default_value_t = DEFAULT_TRACKING_TOL_MW)]
        tracking_tol_mw: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let unstable = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<SimError>(), Some(SimError::Unstable { .. })));
            ExitCode::from(if unstable { 2 } else { 1 })
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run {
            script,
            seed,
            csv_out,
            svg,
            debug_dumps,
        } => run(&script, seed, csv_out, svg, debug_dumps),
        Command::Validate { script } => {
            let s = Scenario::load(&script)?;
            println!(
                "{}: ok ({} buses, {} generators, {} VPPs, {} events)",
                s.script.name,
                s.grid.buses.len(),
                s.grid.generators.len(),
                s.grid.vpps.len(),
                s.script.events.len()
            );
            Ok(())
        }
        Command::Compare {
            a,
            b,
            nominal_hz,
            tracking_tol_mw,
        } => {
            let ta = SimTrace::load_csv(&a)?;
            let tb = SimTrace::load_csv(&b)?;
            let report = compare_runs(&ta, &tb, nominal_hz, tracking_tol_mw)?;
            println!("a = {}\nb = {}", a.display(), b.display());
            println!("{report}");
            Ok(())
        }
    }
}

fn run(
    script: &Path,
    seed: Option<u64>,
    csv_out: Option<PathBuf>,
    svg: Option<PathBuf>,
    debug_dumps: Option<PathBuf>,
) -> Result<()> {
    let scenario = Scenario::load(script)?;
    let options = SimOptions { seed, debug_dumps };
    let started = std::time::Instant::now();
    let out = run_scenario(&scenario, &options).with_context(|| format!("running {}", script.display()))?;
    let elapsed = started.elapsed();

    let s = &scenario.script;
    let csv_path = csv_out
        .or_else(|| s.output.csv.clone())
        .unwrap_or_else(|| PathBuf::from(format!("{}.csv", s.name)));
    out.trace.save_csv(&csv_path)?;
    if let Some(svg) = svg.or_else(|| s.output.svg.clone()) {
        write_svg(&out.trace, &svg, &s.name, &out.battery_ids)?;
        eprintln!("chart: {}", svg.display());
    }

    for d in &out.diagnostics {
        eprintln!("{d}");
    }
    let tol = s.output.tracking_tol_mw.unwrap_or(DEFAULT_TRACKING_TOL_MW);
    let m = run_metrics(&out.trace, s.dynamics.nominal_hz, tol);
    eprintln!(
        "{}: {} samples in {:.2} s -> {}",
        s.name,
        out.trace.len(),
        elapsed.as_secs_f64(),
        csv_path.display()
    );
    for v in &m.vpps {
        let sat = v
            .saturation_time_s
            .map_or("none".to_string(), |t| format!("{:.1} min", t / 60.0));
        eprintln!(
            "  vpp{}: saturation {sat}, service {:.1} min",
            v.id,
            v.service_duration_s / 60.0
        );
    }
    eprintln!(
        "  peak |df| {:.5} Hz, ACE RMS {:.3} MW",
        m.peak_freq_dev_hz, m.ace_rms_mw
    );
    Ok(())
}
