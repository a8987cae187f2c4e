//! Configuration-driven pipelines: the nonlinear filtering example solved by
//! a fixed point on the observation-projected adjoint, the investment
//! example with Kalman–Bucy filtering, and the delay sweep.

use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};

use crate::absde::{solve_adjoint, solve_p_equation, AdjointSolution, PSolution, RegressionConfig};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::filtering::{filter_ensemble, solve_riccati, FilterEnsemble, MarketSpec, RiccatiSolution, RICCATI_SUBSTEPS};
use crate::forward_sim::{cost_samples, resimulate, simulate_ensemble, trapezoid_weight, ForwardEnsemble, Paths};
use crate::model::{ControlProcess, ControlSet, DelayModel, FeedbackLaw, ObservationView};
use crate::models::{Example1, Example2};
use crate::regression::{Basis, Feature, WeightedProjector};
use crate::scalar::Estimate;
use crate::smp::{hamiltonian_u_residual, ResidualConfig, ResidualReport};
use crate::time_grid::{sample_ensemble_noise, JumpMeasure, NoisePath, TimeGrid};
use crate::variational::{direction_family, gateaux_check, GateauxCheck};

/// Bump amplitude of the local-optimality probes.
pub const PROBE_AMPLITUDE: f64 = 0.1;

/// `J(u + bump) − J(u)` on common noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub direction: String,
    pub gain: Estimate<f64>,
}

impl Probe {
    pub fn is_local_max(&self, k: f64) -> bool {
        self.gain.mean <= k * self.gain.std_error
    }
}

fn paired(a: &[f64], b: &[f64]) -> Estimate<f64> {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    Estimate::from_samples(&d).expect("non-empty ensemble")
}

fn estimate(v: &[f64]) -> Result<Estimate<f64>> {
    Estimate::from_samples(v).ok_or_else(|| Error::domain("empty ensemble"))
}

/// `v = argmax_U (b q̂ v + c v²)` with `q̂ ≈ Ē[q | 𝒢]` fitted per node by
/// `Z`-weighted least squares on observation features.
#[derive(Debug, Clone)]
pub struct ProjectedAdjointLaw {
    pub basis: Basis,
    /// Per node `0..=n`.
    pub coefficients: Vec<Vec<f64>>,
    pub b: f64,
    pub cost_sign: f64,
    pub controls: ControlSet<f64>,
}

impl ProjectedAdjointLaw {
    pub fn fit(basis: &Basis, ens: &ForwardEnsemble<f64>, adjoint: &AdjointSolution<f64>, model: &Example1<f64>) -> Result<Self> {
        let coefficients = (0..ens.grid.nodes())
            .map(|k| Ok(WeightedProjector::at_node(basis, ens, k, &ens.z.column(k))?.coefficients(&adjoint.q.column(k))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { basis: basis.clone(), coefficients, b: model.b, cost_sign: model.cost_sign, controls: model.controls })
    }

    pub fn projected_adjoint(&self, view: &ObservationView<'_, f64>) -> f64 {
        self.basis.evaluate_view(&self.coefficients[view.k], view).unwrap_or(0.0)
    }
}

impl FeedbackLaw<f64> for ProjectedAdjointLaw {
    fn control(&self, view: &ObservationView<'_, f64>) -> f64 {
        let slope = self.b * self.projected_adjoint(view);
        let c = self.cost_sign;
        if c < 0.0 {
            self.controls.project(-slope / (2.0 * c))
        } else {
            let value = |v: f64| slope * v + c * v * v;
            let (lo, hi) = (self.controls.lo, self.controls.hi);
            if value(hi) > value(lo) {
                hi
            } else {
                lo
            }
        }
    }
}

/// Observation basis of the configured lags and degree.
pub fn observation_basis(config: &ExperimentConfig) -> Basis {
    Basis::observation(&config.lags, config.degree)
}

pub fn example1_model(config: &ExperimentConfig, delta: f64) -> Result<Example1<f64>> {
    let mut m = Example1::new(delta)?;
    m.a = config.a;
    m.b = config.b;
    m.sigma0 = config.sigma0;
    m.theta = config.theta;
    m.jump_gamma = config.jump_gamma;
    m.jumps = config.jumps();
    m.cost_sign = config.ex1_cost_sign;
    m.x0 = config.x0;
    m.controls = ControlSet::interval(config.v_lo, config.v_hi)?;
    Ok(m)
}

pub struct Example1Run {
    pub model: Example1<f64>,
    pub control: ControlProcess<f64>,
    pub ensemble: ForwardEnsemble<f64>,
    pub p_solution: PSolution<f64>,
    pub adjoint: AdjointSolution<f64>,
    pub cost: Estimate<f64>,
    pub residual: ResidualReport<f64>,
    pub probes: Vec<Probe>,
    pub gateaux: Vec<GateauxCheck<f64>>,
    /// `max_p |q_n − 1|`.
    pub terminal_error: f64,
    /// Sup-norm change of the control between the last two iterates.
    pub last_update: f64,
}

pub fn run_example1(config: &ExperimentConfig) -> Result<Example1Run> {
    let start = Instant::now();
    let grid = config.grid(config.delta)?;
    let model = example1_model(config, config.delta)?;
    let noise = Arc::new(sample_ensemble_noise(&grid, config.master_seed, config.n_paths, &model.jumps)?);
    let reg = RegressionConfig { basis: Basis::new(vec![Feature::State, Feature::DelayedState, Feature::Observation], config.degree) };
    let obs = observation_basis(config);

    let mut control = ControlProcess::constant(&grid, 0.0);
    let mut ens = simulate_ensemble(&model, &control, &grid, Arc::clone(&noise), None)?;
    let mut last_update = f64::INFINITY;
    for it in 0..config.ex1_iterations {
        let p = solve_p_equation(&model, &ens, &reg)?;
        let adj = solve_adjoint(&model, &ens, &p, &reg)?;
        let law = ProjectedAdjointLaw::fit(&obs, &ens, &adj, &model)?;
        control = ControlProcess::feedback(law);
        let next = resimulate(&model, &control, &ens)?;
        last_update = sup_diff(&next.v, &ens.v);
        info!("example1 iteration {it}: control update {last_update:.3e} ({:.2?})", start.elapsed());
        ens = next;
    }
    let p_solution = solve_p_equation(&model, &ens, &reg)?;
    let adjoint = solve_adjoint(&model, &ens, &p_solution, &reg)?;
    let c0 = cost_samples(&model, &ens);
    let cost = estimate(&c0)?;
    let residual = hamiltonian_u_residual(
        &model,
        &ens,
        &adjoint,
        &p_solution,
        &ResidualConfig { basis: obs.clone(), vi_grid_points: config.v_grid, single_term: false },
    )?;
    let family = direction_family(&grid);
    let mut probes = Vec::new();
    for dir in &family {
        let bumped = resimulate(&model, &control.perturbed(&dir.values, PROBE_AMPLITUDE), &ens)?;
        probes.push(Probe { direction: dir.id.clone(), gain: paired(&cost_samples(&model, &bumped), &c0) });
    }
    let interior = (0..ens.paths()).all(|p| (0..grid.nodes()).all(|k| model.controls.is_interior(ens.v.get(p, k))));
    let mut gateaux = Vec::new();
    if interior {
        for dir in &family {
            gateaux.push(gateaux_check(&model, &control, &ens, dir, config.epsilon, true)?);
        }
    } else {
        warn!("example1: control touches the boundary of U; skipping Gateaux checks");
    }
    let n = grid.steps();
    let terminal_error = (0..ens.paths()).map(|p| (adjoint.q.get(p, n) - 1.0).abs()).fold(0.0, f64::max);
    info!("example1 done: J = {cost} ({:.2?})", start.elapsed());
    Ok(Example1Run {
        model,
        control,
        ensemble: ens,
        p_solution,
        adjoint,
        cost,
        residual,
        probes,
        gateaux,
        terminal_error,
        last_update,
    })
}

fn sup_diff(a: &Paths<f64>, b: &Paths<f64>) -> f64 {
    let mut worst = 0.0f64;
    for p in 0..a.rows() {
        for k in 0..a.cols() {
            worst = worst.max((a.get(p, k) - b.get(p, k)).abs());
        }
    }
    worst
}

/// One row of the delay table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub delta: f64,
    /// `E[−∫(v − a)² dt]`.
    pub cost_term: Estimate<f64>,
    /// `E[x(T)]`.
    pub mean_terminal: Estimate<f64>,
    pub j_half: Estimate<f64>,
    pub j_sum: Estimate<f64>,
}

/// `v = a + ((μ̂ − r₀) q + σ r̄)/2s` with node values of a deterministic adjoint.
#[derive(Debug, Clone)]
pub struct InvestmentLaw {
    pub model: Example2<f64>,
    pub q: Vec<f64>,
    pub r_bar: Vec<f64>,
}

impl FeedbackLaw<f64> for InvestmentLaw {
    fn control(&self, view: &ObservationView<'_, f64>) -> f64 {
        self.model.optimal_control(view.t, view.factor, self.q[view.k], self.r_bar[view.k])
    }
}

pub struct Example2Run {
    pub grid: TimeGrid<f64>,
    pub model: Example2<f64>,
    pub riccati: RiccatiSolution<f64>,
    pub filter: FilterEnsemble<f64>,
    pub ensemble: ForwardEnsemble<f64>,
    pub p_solution: PSolution<f64>,
    pub adjoint: AdjointSolution<f64>,
    pub residual: ResidualReport<f64>,
    pub row: TableRow,
    /// Per-path `(−∫(v − a)², x(T))`.
    pub samples: Vec<(f64, f64)>,
}

impl Example2Run {
    /// Per-path objective under the configured convention.
    pub fn objective_samples(&self) -> Vec<f64> {
        let s: f64 = self.model.convention.scale();
        self.samples.iter().map(|(c, x)| s * (c + x)).collect()
    }
}

pub fn example2_model(config: &ExperimentConfig, delta: f64) -> Example2<f64> {
    let mut m = Example2::new(delta);
    m.r0 = config.r0;
    m.x0 = config.x0;
    m.convention = config.cost_convention;
    m
}

pub fn run_example2(config: &ExperimentConfig) -> Result<Example2Run> {
    run_example2_at(config, config.delta, 0.0)
}

/// Investment example at `delta`; `shift` is added to the control at every node.
pub fn run_example2_at(config: &ExperimentConfig, delta: f64, shift: f64) -> Result<Example2Run> {
    let start = Instant::now();
    let grid = config.grid(delta)?;
    let model = example2_model(config, delta);
    let riccati = solve_riccati(config.alpha, config.beta, |t| model.volatility(t), config.riccati_gamma0, &grid, RICCATI_SUBSTEPS)?;
    let market_noise = sample_ensemble_noise(&grid, config.master_seed, config.n_paths, &JumpMeasure::none())?;
    let spec = MarketSpec { alpha: config.alpha, beta: config.beta, prior_mean: config.mu_hat0, prior_variance: config.riccati_gamma0 };
    let filter = filter_ensemble(&spec, riccati.clone(), &grid, &market_noise, config.master_seed)?;
    drop(market_noise);
    info!("example2 delta={delta}: filter done ({:.2?})", start.elapsed());

    let reduced: Vec<NoisePath<f64>> = (0..config.n_paths)
        .map(|p| NoisePath::from_parts(&grid, vec![0.0; grid.steps()], filter.innovations.row(p).to_vec(), Vec::new()))
        .collect::<Result<_>>()?;
    let reduced = Arc::new(reduced);
    let reg = RegressionConfig::intercept();

    let target = ControlProcess::from_fn(&grid, |t| model.target(t));
    let pilot = simulate_ensemble(&model, &target, &grid, Arc::clone(&reduced), Some(&filter.mu_hat))?;
    let p0 = solve_p_equation(&model, &pilot, &reg)?;
    let a0 = solve_adjoint(&model, &pilot, &p0, &reg)?;
    drop(pilot);
    let law = InvestmentLaw {
        model: model.clone(),
        q: (0..grid.nodes()).map(|k| a0.q.column_mean(k)).collect(),
        r_bar: (0..grid.nodes()).map(|k| a0.r_bar.column_mean(k)).collect(),
    };
    let mut control = ControlProcess::feedback(law);
    if shift != 0.0 {
        control = control.perturbed(&vec![1.0; grid.nodes()], shift);
    }
    let ensemble = simulate_ensemble(&model, &control, &grid, reduced, Some(&filter.mu_hat))?;
    let p_solution = solve_p_equation(&model, &ensemble, &reg)?;
    let adjoint = solve_adjoint(&model, &ensemble, &p_solution, &reg)?;
    let residual = hamiltonian_u_residual(
        &model,
        &ensemble,
        &adjoint,
        &p_solution,
        &ResidualConfig {
            basis: observation_basis(config).with_feature(Feature::Factor),
            vi_grid_points: config.v_grid,
            single_term: false,
        },
    )?;

    let n = grid.steps();
    let samples: Vec<(f64, f64)> = (0..ensemble.paths())
        .map(|p| {
            let c: f64 = (0..=n)
                .map(|k| -trapezoid_weight(&grid, k) * (ensemble.v.get(p, k) - model.target(grid.time(k))).powi(2))
                .sum();
            (c, ensemble.x.get(p, n))
        })
        .collect();
    let col = |f: &dyn Fn(&(f64, f64)) -> f64| estimate(&samples.iter().map(f).collect::<Vec<_>>());
    let row = TableRow {
        delta,
        cost_term: col(&|s| s.0)?,
        mean_terminal: col(&|s| s.1)?,
        j_half: col(&|s| 0.5 * (s.0 + s.1))?,
        j_sum: col(&|s| s.0 + s.1)?,
    };
    info!(
        "example2 delta={delta}: cost {} E[x(T)] {} J_half {} J_sum {} ({:.2?})",
        row.cost_term,
        row.mean_terminal,
        row.j_half,
        row.j_sum,
        start.elapsed()
    );
    Ok(Example2Run { grid, model, riccati, filter, ensemble, p_solution, adjoint, residual, row, samples })
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub rows: Vec<TableRow>,
    pub skipped: Vec<f64>,
    /// `J(δ_i) − J(δ_{i+1})` under the configured convention, paired when the
    /// grids share their step count.
    pub gaps: Vec<Estimate<f64>>,
    pub monotone: bool,
    pub significant_gaps: usize,
}

impl SweepReport {
    /// Decreasing with at least three quarters of the gaps above `2·SE`.
    pub fn ordering_holds(&self) -> bool {
        if self.gaps.is_empty() {
            return true;
        }
        let need = (3 * self.gaps.len()).div_ceil(4);
        self.monotone && self.significant_gaps >= need
    }
}

pub fn run_delay_sweep(config: &ExperimentConfig) -> Result<SweepReport> {
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    let mut kept: Vec<(usize, Vec<f64>)> = Vec::new();
    for &delta in &config.delta_list {
        if let Err(e) = config.grid(delta) {
            warn!("delay sweep: skipping delta={delta}: {e}");
            skipped.push(delta);
            continue;
        }
        let run = run_example2_at(config, delta, 0.0)?;
        kept.push((run.grid.steps(), run.objective_samples()));
        rows.push(run.row);
    }
    let gaps: Vec<Estimate<f64>> = kept
        .windows(2)
        .map(|w| {
            let ((na, a), (nb, b)) = (&w[0], &w[1]);
            if na == nb {
                paired(a, b)
            } else {
                let (ea, eb) = (Estimate::from_samples(a).unwrap(), Estimate::from_samples(b).unwrap());
                Estimate { mean: ea.mean - eb.mean, std_error: ea.std_error.hypot(eb.std_error) }
            }
        })
        .collect();
    let monotone = gaps.iter().all(|g| g.mean > 0.0);
    let significant_gaps = gaps.iter().filter(|g| g.mean > 2.0 * g.std_error).count();
    info!("delay sweep: {} rows, {significant_gaps} significant gaps ({:.2?})", rows.len(), start.elapsed());
    Ok(SweepReport { rows, skipped, gaps, monotone, significant_gaps })
}

/// Model named by the config, boxed for the generic commands.
pub fn configured_model(config: &ExperimentConfig) -> Result<Box<dyn DelayModel<f64>>> {
    Ok(match config.example {
        crate::config::ExampleId::One => Box::new(example1_model(config, config.delta)?),
        crate::config::ExampleId::Two => Box::new(example2_model(config, config.delta)),
    })
}
