use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use smpdelay::absde::{solve_adjoint, solve_p_equation, RegressionConfig};
use smpdelay::config::{ExampleId, ExperimentConfig};
use smpdelay::experiments::{
    configured_model, example2_model, run_delay_sweep, run_example1, run_example2, Example2Run,
};
use smpdelay::export::{self, CsvMeta};
use smpdelay::filtering::{filter_ensemble, solve_riccati, MarketSpec, RICCATI_SUBSTEPS};
use smpdelay::forward_sim::simulate_seeded;
use smpdelay::model::{validate_model, ControlProcess};
use smpdelay::time_grid::{sample_ensemble_noise, JumpMeasure};
use smpdelay::variational::{simulate_x1, simulate_z1_gamma, Direction};

/// Partially observed delay control: simulation, adjoints, filtering and
/// maximum-principle checks.
#[derive(Parser)]
#[command(name = "smpdelay", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides as `--key value` or `--key=value`
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of the configured model's derivatives
    ValidateModel(Common),
    /// Simulate the configured example under its baseline control
    Simulate(Common),
    /// Solve the adjoint and auxiliary equations of the configured example
    SolveAdjoint(Common),
    /// Riccati and Kalman-Bucy filter of the investment example
    Filter(Common),
    /// Maximum-principle residual of the configured example
    CheckSmp(Common),
    Example1(Common),
    Example2(Common),
    /// Investment example over the configured delta list
    DelaySweep(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_file(path).with_context(|| format!("reading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    let mut it = common.overrides.iter();
    while let Some(flag) = it.next() {
        let Some(key) = flag.strip_prefix("--") else { bail!("unexpected argument '{flag}'") };
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().with_context(|| format!("--{key} needs a value"))?;
                (key.to_string(), v.clone())
            }
        };
        cfg.set(&key.replace('-', "_"), &value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn meta(cfg: &ExperimentConfig) -> CsvMeta {
    CsvMeta { config_hash: cfg.hash(), master_seed: cfg.master_seed }
}

fn baseline(cfg: &ExperimentConfig, grid: &smpdelay::Grid) -> ControlProcess<f64> {
    match cfg.example {
        ExampleId::One => ControlProcess::constant(grid, 0.0),
        ExampleId::Two => {
            let m = example2_model(cfg, cfg.delta);
            ControlProcess::from_fn(grid, |t| m.target(t))
        }
    }
}

fn write_example2(cfg: &ExperimentConfig, run: &Example2Run) -> Result<()> {
    let (dir, m) = (&cfg.output_dir, meta(cfg));
    export::to_file(dir, "filter.csv", |w| export::write_filter(w, &m, &run.grid, &run.filter, cfg.export_paths))?;
    export::to_file(dir, "adjoint.csv", |w| {
        export::write_adjoint(w, &m, &run.grid, &run.adjoint, &run.p_solution, cfg.export_paths)
    })?;
    export::to_file(dir, "residual.csv", |w| export::write_residual(w, &m, &run.residual))?;
    export::to_file(dir, "table.csv", |w| export::write_table(w, &m, std::slice::from_ref(&run.row)))?;
    Ok(())
}

/// Returns whether every assertion of the command held.
fn run(command: Command) -> Result<bool> {
    match command {
        Command::ValidateModel(c) => {
            let cfg = load(&c)?;
            let model = configured_model(&cfg)?;
            match validate_model(model.as_ref(), 500) {
                Ok(report) => {
                    println!("{}: ok, worst relative mismatch {:.3e}", model.name(), report.worst_mismatch);
                    for (name, l) in &report.lipschitz {
                        println!("  lipschitz {name}: {l:.4}");
                    }
                    Ok(true)
                }
                Err(e) => {
                    println!("{}: {e}", model.name());
                    Ok(false)
                }
            }
        }
        Command::Simulate(c) => {
            let cfg = load(&c)?;
            let grid = cfg.grid(cfg.delta)?;
            let model = configured_model(&cfg)?;
            let ens = simulate_seeded(model.as_ref(), &baseline(&cfg, &grid), &grid, cfg.master_seed, cfg.n_paths)?;
            let unit = Direction::from_fn("unit", &grid, |_| 1.0);
            let x1 = simulate_x1(model.as_ref(), &ens, &unit)?;
            let (_, gamma) = simulate_z1_gamma(model.as_ref(), &ens, &x1);
            let path = export::to_file(&cfg.output_dir, "ensemble.csv", |w| {
                export::write_ensemble(w, &meta(&cfg), &ens, Some(&gamma), cfg.export_paths)
            })?;
            println!("x(T) mean {:.6}, wrote {}", ens.x.column_mean(grid.steps()), path.display());
            Ok(true)
        }
        Command::SolveAdjoint(c) => {
            let cfg = load(&c)?;
            let grid = cfg.grid(cfg.delta)?;
            let model = configured_model(&cfg)?;
            let ens = simulate_seeded(model.as_ref(), &baseline(&cfg, &grid), &grid, cfg.master_seed, cfg.n_paths)?;
            let reg = match cfg.example {
                ExampleId::One => RegressionConfig::default(),
                ExampleId::Two => RegressionConfig::intercept(),
            };
            let p = solve_p_equation(model.as_ref(), &ens, &reg)?;
            let adj = solve_adjoint(model.as_ref(), &ens, &p, &reg)?;
            let path = export::to_file(&cfg.output_dir, "adjoint.csv", |w| {
                export::write_adjoint(w, &meta(&cfg), &grid, &adj, &p, cfg.export_paths)
            })?;
            println!("q(0) = {}, wrote {}", adj.q0, path.display());
            Ok(true)
        }
        Command::Filter(c) => {
            let cfg = load(&c)?;
            let grid = cfg.grid(cfg.delta)?;
            let m = example2_model(&cfg, cfg.delta);
            let ric = solve_riccati(cfg.alpha, cfg.beta, |t| m.volatility(t), cfg.riccati_gamma0, &grid, RICCATI_SUBSTEPS)?;
            let noise = sample_ensemble_noise(&grid, cfg.master_seed, cfg.n_paths, &JumpMeasure::none())?;
            let spec =
                MarketSpec { alpha: cfg.alpha, beta: cfg.beta, prior_mean: cfg.mu_hat0, prior_variance: cfg.riccati_gamma0 };
            let fe = filter_ensemble(&spec, ric, &grid, &noise, cfg.master_seed)?;
            let path = export::to_file(&cfg.output_dir, "filter.csv", |w| {
                export::write_filter(w, &meta(&cfg), &grid, &fe, cfg.export_paths)
            })?;
            println!("empirical/Riccati variance ratio {:.4}, wrote {}", fe.variance_tracking_ratio(), path.display());
            Ok(true)
        }
        Command::CheckSmp(c) => {
            let cfg = load(&c)?;
            let grid = cfg.grid(cfg.delta)?;
            let report = match cfg.example {
                ExampleId::One => run_example1(&cfg)?.residual,
                ExampleId::Two => run_example2(&cfg)?.residual,
            };
            export::to_file(&cfg.output_dir, "residual.csv", |w| export::write_residual(w, &meta(&cfg), &report))?;
            let slack = cfg.smp_tolerance * grid.dt();
            let ok = report.within(slack, 4.0);
            println!(
                "{:?} residual: max |r| {:.3e}, rms {:.3e}, max SE {:.3e}, bound {slack:.3e} + 4 SE: {}",
                report.mode,
                report.max_abs(),
                report.rms(),
                report.max_std_error(),
                if ok { "pass" } else { "FAIL" }
            );
            Ok(ok)
        }
        Command::Example1(c) => {
            let cfg = load(&c)?;
            let run = run_example1(&cfg)?;
            let (dir, m) = (&cfg.output_dir, meta(&cfg));
            export::to_file(dir, "ensemble.csv", |w| export::write_ensemble(w, &m, &run.ensemble, None, cfg.export_paths))?;
            export::to_file(dir, "adjoint.csv", |w| {
                export::write_adjoint(w, &m, &run.ensemble.grid, &run.adjoint, &run.p_solution, cfg.export_paths)
            })?;
            export::to_file(dir, "residual.csv", |w| export::write_residual(w, &m, &run.residual))?;
            export::to_file(dir, "variational.csv", |w| export::write_variational(w, &m, &run.gateaux))?;
            println!("J(u) = {}", run.cost);
            println!("residual ({:?}): max |r| {:.3e}", run.residual.mode, run.residual.max_abs());
            let mut ok = run.terminal_error == 0.0;
            for p in &run.probes {
                let local = p.is_local_max(4.0);
                ok &= local;
                println!("probe {:<14} gain {}  {}", p.direction, p.gain, if local { "ok" } else { "FAIL" });
            }
            Ok(ok)
        }
        Command::Example2(c) => {
            let cfg = load(&c)?;
            let run = run_example2(&cfg)?;
            write_example2(&cfg, &run)?;
            let r = &run.row;
            println!(
                "delta {}: cost term {}, E[x(T)] {}, J_half {}, J_sum {}",
                r.delta, r.cost_term, r.mean_terminal, r.j_half, r.j_sum
            );
            println!("q(0) = {}", run.adjoint.q0);
            Ok(true)
        }
        Command::DelaySweep(c) => {
            let cfg = load(&c)?;
            let report = run_delay_sweep(&cfg)?;
            let path = export::to_file(&cfg.output_dir, "table.csv", |w| export::write_table(w, &meta(&cfg), &report.rows))?;
            for r in &report.rows {
                println!("delta {:.2}: cost {} E[x(T)] {} J_half {} J_sum {}", r.delta, r.cost_term, r.mean_terminal, r.j_half, r.j_sum);
            }
            for (i, g) in report.gaps.iter().enumerate() {
                println!("gap {i}: {g}");
            }
            let ok = !cfg.assert_monotone || report.ordering_holds();
            println!(
                "monotone {}, {} of {} gaps above 2 SE, wrote {}",
                report.monotone,
                report.significant_gaps,
                report.gaps.len(),
                path.display()
            );
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let start = Instant::now();
    let result = run(cli.command);
    info!("finished in {:.2?}", start.elapsed());
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
