//! Euler–Maruyama simulation of the substituted state equation under the
//! reference measure, the observation path, the Girsanov density and the
//! ratio process Γ.
//!
//! Under the reference measure `(B, Y)` are independent Brownian motions and
//! a path's second driver `dw` is the observation increment `dY`. Expectations
//! under the physical measure are `Z`-weighted averages.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{tilde_b, ControlProcess, DelayModel, ObservationView, Point};
use crate::scalar::{Estimate, Real};
use crate::time_grid::{sample_ensemble_noise, JumpMeasure, Lagged, NoisePath, TimeGrid};

/// Row-major `paths × columns` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Paths<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Real> Paths<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![F::zero(); rows * cols] }
    }

    pub fn from_rows(rows: Vec<Vec<F>>) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::domain("ragged path matrix"));
        }
        let n = rows.len();
        Ok(Self { rows: n, cols, data: rows.into_iter().flatten().collect() })
    }

    #[inline]
    pub fn get(&self, path: usize, k: usize) -> F {
        self.data[path * self.cols + k]
    }

    #[inline]
    pub fn set(&mut self, path: usize, k: usize, value: F) {
        self.data[path * self.cols + k] = value;
    }

    pub fn row(&self, path: usize) -> &[F] {
        &self.data[path * self.cols..(path + 1) * self.cols]
    }

    pub fn row_mut(&mut self, path: usize) -> &mut [F] {
        &mut self.data[path * self.cols..(path + 1) * self.cols]
    }

    pub fn column(&self, k: usize) -> Vec<F> {
        (0..self.rows).map(|p| self.get(p, k)).collect()
    }

    pub fn set_column(&mut self, k: usize, values: &[F]) {
        for (p, &v) in values.iter().enumerate() {
            self.set(p, k, v);
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn column_mean(&self, k: usize) -> F {
        self.column(k).iter().copied().sum::<F>() / F::from_usize_lossy(self.rows.max(1))
    }

    pub fn max_abs(&self) -> F {
        self.data.iter().fold(F::zero(), |m, v| m.max(v.abs()))
    }
}

/// One simulated path.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<F> {
    pub x: Vec<F>,
    pub v: Vec<F>,
    pub y: Vec<F>,
    pub z: Vec<F>,
}

/// Simulated ensemble on shared immutable noise.
#[derive(Debug, Clone)]
pub struct ForwardEnsemble<F> {
    pub grid: TimeGrid<F>,
    pub x: Paths<F>,
    pub y: Paths<F>,
    pub z: Paths<F>,
    /// Applied (projected) control values at nodes `0..=n`.
    pub v: Paths<F>,
    pub factor: Paths<F>,
    /// `ξ` and `η` at segment nodes `j = 0..=m`, time `(j − m)·dt`.
    pub segment_x: Vec<F>,
    pub segment_v: Vec<F>,
    pub noise: Arc<Vec<NoisePath<F>>>,
    pub jumps: JumpMeasure<F>,
}

impl<F: Real> ForwardEnsemble<F> {
    pub fn paths(&self) -> usize {
        self.x.rows()
    }

    pub fn x_lag(&self, path: usize, k: usize) -> F {
        match self.grid.lagged(k) {
            Lagged::Segment(j) => self.segment_x[j],
            Lagged::Node(j) => self.x.get(path, j),
        }
    }

    pub fn v_lag(&self, path: usize, k: usize) -> F {
        match self.grid.lagged(k) {
            Lagged::Segment(j) => self.segment_v[j],
            Lagged::Node(j) => self.v.get(path, j),
        }
    }

    pub fn point(&self, path: usize, k: usize) -> Point<F> {
        Point {
            t: self.grid.time(k),
            x: self.x.get(path, k),
            x_lag: self.x_lag(path, k),
            v: self.v.get(path, k),
            v_lag: self.v_lag(path, k),
            factor: self.factor.get(path, k),
        }
    }

    /// Compensated jump increment `Σζ − λE[ζ]·dt` of step `k`.
    #[inline]
    pub fn compensated_jump(&self, path: usize, k: usize) -> F {
        self.noise[path].mark_sum(k) - self.jumps.compensator() * self.grid.dt()
    }

    /// `max_k mean_p |x_k|^power`.
    pub fn sup_moment(&self, power: i32) -> F {
        (0..self.grid.nodes())
            .map(|k| self.x.column(k).iter().map(|v| v.abs().powi(power)).sum::<F>() / F::from_usize_lossy(self.paths()))
            .fold(F::zero(), F::max)
    }
}

fn segment_values<F: Real>(grid: &TimeGrid<F>, f: impl Fn(F) -> F) -> Vec<F> {
    (0..=grid.delay_shift()).map(|j| f(grid.segment_time(j))).collect()
}

/// Observation path `Y` from the noise alone (`Y_0 = 0`).
pub fn observation_path<F: Real>(noise: &NoisePath<F>) -> Vec<F> {
    let mut y = Vec::with_capacity(noise.steps() + 1);
    let mut acc = F::zero();
    y.push(acc);
    for &d in &noise.dw {
        acc += d;
        y.push(acc);
    }
    y
}

/// Euler recursion of the substituted state equation; returns `(x, v)` on nodes `0..=n`.
pub fn simulate_state<F: Real, M: DelayModel<F> + ?Sized>(
    model: &M,
    control: &ControlProcess<F>,
    grid: &TimeGrid<F>,
    noise: &NoisePath<F>,
) -> Result<(Vec<F>, Vec<F>)> {
    let y = observation_path(noise);
    simulate_state_with_factor(model, control, grid, noise, &y, None, 0)
}

fn simulate_state_with_factor<F: Real, M: DelayModel<F> + ?Sized>(
    model: &M,
    control: &ControlProcess<F>,
    grid: &TimeGrid<F>,
    noise: &NoisePath<F>,
    y: &[F],
    factor: Option<&[F]>,
    path: usize,
) -> Result<(Vec<F>, Vec<F>)> {
    let n = grid.steps();
    let m = grid.delay_shift();
    if noise.steps() != n {
        return Err(Error::domain(format!("noise has {} steps, grid has {n}", noise.steps())));
    }
    let dt = grid.dt();
    let set = model.control_set();
    let jumps = model.jump_measure();
    let comp = jumps.compensator() * dt;
    let fac = |k: usize| factor.map_or(F::zero(), |f| f[k]);
    let control_at = |k: usize| {
        let view = ObservationView { k, t: grid.time(k), y: &y[..=k], factor: fac(k) };
        set.project(control.value(&view))
    };
    let xi = segment_values(grid, |t| model.initial_state(t));
    let eta = segment_values(grid, |t| model.initial_control(t));

    let mut x = Vec::with_capacity(n + 1);
    let mut v = Vec::with_capacity(n + 1);
    x.push(xi[m]);
    for k in 0..n {
        v.push(control_at(k));
        let (x_lag, v_lag) = if k < m { (xi[k], eta[k]) } else { (x[k - m], v[k - m]) };
        let p = Point { t: grid.time(k), x: x[k], x_lag, v: v[k], v_lag, factor: fac(k) };
        let mut next = x[k] + tilde_b(model, &p) * dt
            + model.diffusion(&p).value * noise.db[k]
            + model.observation_coupling(&p).value * noise.dw[k];
        if jumps.is_active() {
            next += model.jump_coefficient(&p).value * (noise.mark_sum(k) - comp);
        }
        if !next.is_finite() {
            return Err(Error::Simulation { path, step: k, what: format!("state became {next}") });
        }
        x.push(next);
    }
    v.push(control_at(n));
    Ok((x, v))
}

/// `Y` and the log-Euler density `Z_{k+1} = Z_k·exp(h_k dY_k − ½h_k² dt)`.
pub fn simulate_observation_and_density<F: Real, M: DelayModel<F> + ?Sized>(
    model: &M,
    x: &[F],
    grid: &TimeGrid<F>,
    noise: &NoisePath<F>,
) -> Result<(Vec<F>, Vec<F>)> {
    let n = grid.steps();
    if x.len() != n + 1 || noise.steps() != n {
        return Err(Error::domain("state path and noise must match the grid"));
    }
    let dt = grid.dt();
    let y = observation_path(noise);
    let mut z = Vec::with_capacity(n + 1);
    let mut log_z = F::zero();
    z.push(F::one());
    for k in 0..n {
        let h = model.observation(grid.time(k), x[k]).value;
        log_z += h * noise.dw[k] - F::half() * h * h * dt;
        let zk = log_z.exp();
        if !(zk.is_finite() && zk > F::zero()) {
            return Err(Error::Simulation { path: 0, step: k, what: format!("density became {zk}") });
        }
        z.push(zk);
    }
    Ok((y, z))
}

/// Simulate every path on the given noise; `factor` rows are per-path node values.
pub fn simulate_ensemble<F: Real, M: DelayModel<F> + ?Sized>(
    model: &M,
    control: &ControlProcess<F>,
    grid: &TimeGrid<F>,
    noise: Arc<Vec<NoisePath<F>>>,
    factor: Option<&Paths<F>>,
) -> Result<ForwardEnsemble<F>> {
    if noise.is_empty() {
        return Err(Error::domain("ensemble needs at least one path"));
    }
    control.check(grid, &model.control_set())?;
    if let Some(f) = factor {
        if f.rows() != noise.len() || f.cols() != grid.nodes() {
            return Err(Error::domain("factor matrix must be paths × nodes"));
        }
    }
    let trajectories: Vec<Trajectory<F>> = noise
        .par_iter()
        .enumerate()
        .map(|(p, path_noise)| {
            let y = observation_path(path_noise);
            let (x, v) =
                simulate_state_with_factor(model, control, grid, path_noise, &y, factor.map(|f| f.row(p)), p)?;
            let (_, z) = simulate_observation_and_density(model, &x, grid, path_noise).map_err(|e| match e {
                Error::Simulation { step, what, .. } => Error::Simulation { path: p, step, what },
                other => other,
            })?;
            Ok(Trajectory { x, v, y, z })
        })
        .collect::<Result<_>>()?;

    let rows = |f: fn(&Trajectory<F>) -> &Vec<F>| Paths::from_rows(trajectories.iter().map(|t| f(t).clone()).collect());
    Ok(ForwardEnsemble {
        grid: grid.clone(),
        x: rows(|t| &t.x)?,
        y: rows(|t| &t.y)?,
        z: rows(|t| &t.z)?,
        v: rows(|t| &t.v)?,
        factor: factor.cloned().unwrap_or_else(|| Paths::zeros(noise.len(), grid.nodes())),
        segment_x: segment_values(grid, |t| model.initial_state(t)),
        segment_v: segment_values(grid, |t| model.initial_control(t)),
        jumps: model.jump_measure(),
        noise,
    })
}

/// Sample fresh noise from `master_seed` and simulate.
pub fn simulate_seeded<F: Real, M: DelayModel<F> + ?Sized>(
    model: &M,
    control: &ControlProcess<F>,
    grid: &TimeGrid<F>,
    master_seed: u64,
    n_paths: usize,
) -> Result<ForwardEnsemble<F>> {
    let noise = sample_ensemble_noise(grid, master_seed, n_paths, &model.jump_measure())?;
    simulate_ensemble(model, control, grid, Arc::new(noise), None)
}

/// The same noise and factors with another control.
pub fn resimulate<F: Real, M: DelayModel<F> + ?Sized>(
    model: &M,
    control: &ControlProcess<F>,
    base: &ForwardEnsemble<F>,
) -> Result<ForwardEnsemble<F>> {
    simulate_ensemble(model, control, &base.grid, Arc::clone(&base.noise), Some(&base.factor))
}

/// `Γ_{k+1} = Γ_k + h_x(t_k, x_k)·x¹_k·(dY_k − h_k dt)`, `Γ_0 = 0`.
pub fn simulate_gamma<F: Real, M: DelayModel<F> + ?Sized>(
    model: &M,
    ens: &ForwardEnsemble<F>,
    x1: &Paths<F>,
) -> Paths<F> {
    let grid = &ens.grid;
    let dt = grid.dt();
    let rows: Vec<Vec<F>> = (0..ens.paths())
        .into_par_iter()
        .map(|p| {
            let mut g = Vec::with_capacity(grid.nodes());
            let mut acc = F::zero();
            g.push(acc);
            for k in 0..grid.steps() {
                let h = model.observation(grid.time(k), ens.x.get(p, k));
                acc += h.dx * x1.get(p, k) * (ens.noise[p].dw[k] - h.value * dt);
                g.push(acc);
            }
            g
        })
        .collect();
    Paths::from_rows(rows).expect("rectangular")
}

/// Trapezoid weights `dt·(½, 1, …, 1, ½)`.
pub fn trapezoid_weight<F: Real>(grid: &TimeGrid<F>, k: usize) -> F {
    if k == 0 || k == grid.steps() {
        F::half() * grid.dt()
    } else {
        grid.dt()
    }
}

/// Per-path `∫ Z ℓ dt + Z_T φ(x_T)`.
pub fn cost_samples<F: Real, M: DelayModel<F> + ?Sized>(model: &M, ens: &ForwardEnsemble<F>) -> Vec<F> {
    let grid = &ens.grid;
    let n = grid.steps();
    (0..ens.paths())
        .into_par_iter()
        .map(|p| {
            let running: F = (0..=n)
                .map(|k| trapezoid_weight(grid, k) * ens.z.get(p, k) * model.running_cost(&ens.point(p, k)).value)
                .sum();
            running + ens.z.get(p, n) * model.terminal_cost(ens.x.get(p, n)).value
        })
        .collect()
}

/// Monte Carlo estimate of the performance functional.
pub fn estimate_cost<F: Real, M: DelayModel<F> + ?Sized>(model: &M, ens: &ForwardEnsemble<F>) -> Result<Estimate<F>> {
    Estimate::from_samples(&cost_samples(model, ens)).ok_or_else(|| Error::domain("empty ensemble"))
}
