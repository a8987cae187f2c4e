//! First and second variational equations of the state along a control
//! direction, the density sensitivities `Z¹`, `Γ`, `Γ¹`, and Monte Carlo
//! estimators of the Gateaux derivatives `J₁`, `J₂` with finite-difference
//! checks on common random numbers.
//!
//! `x¹` and `x²` are the first and half the second `ε`-derivative of the
//! Euler state with the observation path held fixed, so `J₁`, `J₂` are exact
//! Taylor coefficients of the discretised functional.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward_sim::{cost_samples, resimulate, trapezoid_weight, ForwardEnsemble, Paths};
use crate::model::{tilde_b_jet, ControlProcess, DelayModel, DerivativeOrder, Jet};
use crate::scalar::{Estimate, Real};
use crate::time_grid::TimeGrid;

/// Deterministic perturbation `v` on nodes `0..=n` (zero on the initial segment).
#[derive(Debug, Clone, PartialEq)]
pub struct Direction<F> {
    pub id: String,
    pub values: Vec<F>,
}

impl<F: Real> Direction<F> {
    pub fn from_fn(id: impl Into<String>, grid: &TimeGrid<F>, f: impl Fn(F) -> F) -> Self {
        Self { id: id.into(), values: (0..grid.nodes()).map(|k| f(grid.time(k))).collect() }
    }

    pub fn zero(grid: &TimeGrid<F>) -> Self {
        Self::from_fn("zero", grid, |_| F::zero())
    }

    pub fn scaled(&self, c: F) -> Self {
        Self { id: format!("{}*{c}", self.id), values: self.values.iter().map(|&v| c * v).collect() }
    }

    /// `v(t − δ)` at node `k`.
    pub fn lagged(&self, grid: &TimeGrid<F>, k: usize) -> F {
        let m = grid.delay_shift();
        if k < m {
            F::zero()
        } else {
            self.values[k - m]
        }
    }
}

/// Indicator bumps on `[0, T/2)`, `[T/2, T]`, the four quarters, then
/// `sin(πt/T)` and `t/T`.
pub fn direction_family<F: Real>(grid: &TimeGrid<F>) -> Vec<Direction<F>> {
    let t_end = grid.horizon();
    let n = grid.steps();
    let bump = |id: &str, lo: usize, hi: usize| Direction {
        id: id.to_string(),
        values: (0..=n).map(|k| if k * 4 >= lo * n && (k * 4 < hi * n || (hi == 4 && k == n)) { F::one() } else { F::zero() }).collect(),
    };
    vec![
        bump("step_0_1/2", 0, 2),
        bump("step_1/2_1", 2, 4),
        bump("step_0_1/4", 0, 1),
        bump("step_1/4_1/2", 1, 2),
        bump("step_1/2_3/4", 2, 3),
        bump("step_3/4_1", 3, 4),
        Direction::from_fn("sin", grid, |t| (F::lit(std::f64::consts::PI) * t / t_end).sin()),
        Direction::from_fn("linear", grid, |t| t / t_end),
    ]
}

/// Variational companions of a forward ensemble.
#[derive(Debug, Clone)]
pub struct VariationalPaths<F> {
    pub x1: Paths<F>,
    pub z1: Paths<F>,
    pub gamma: Paths<F>,
    pub x2: Option<Paths<F>>,
    pub gamma1: Option<Paths<F>>,
}

fn check_direction<F: Real>(ens: &ForwardEnsemble<F>, direction: &Direction<F>) -> Result<()> {
    if direction.values.len() != ens.grid.nodes() {
        return Err(Error::domain(format!(
            "direction needs {} node values, got {}",
            ens.grid.nodes(),
            direction.values.len()
        )));
    }
    Ok(())
}

/// Coefficient jets at `(path, k)`: `b̃`, `σ`, `θ`, `γ`.
fn coefficient_jets<F: Real, M: DelayModel<F> + ?Sized>(model: &M, ens: &ForwardEnsemble<F>, p: usize, k: usize) -> [Jet<F>; 4] {
    let pt = ens.point(p, k);
    [tilde_b_jet(model, &pt), model.diffusion(&pt), model.observation_coupling(&pt), model.jump_coefficient(&pt)]
}

/// `d_k = (x¹_k, x¹_{k−m}, v_k, v_{k−m})`, zero lags on the segment.
fn first_order_offsets<F: Real>(grid: &TimeGrid<F>, x1: &[F], dir: &Direction<F>, k: usize) -> [F; 4] {
    let m = grid.delay_shift();
    let x1_lag = if k < m { F::zero() } else { x1[k - m] };
    [x1[k], x1_lag, dir.values[k], dir.lagged(grid, k)]
}

/// Euler recursion of the first variational equation.
pub fn simulate_x1<F: Real, M: DelayModel<F> + ?Sized>(
    model: &M,
    ens: &ForwardEnsemble<F>,
    direction: &Direction<F>,
) -> Result<Paths<F>> {
    check_direction(ens, direction)?;
    let grid = &ens.grid;
    let dt = grid.dt();
    let jumps = ens.jumps.is_active();
    let rows: Vec<Vec<F>> = (0..ens.paths())
        .into_par_iter()
        .map(|p| {
            let mut x1 = vec![F::zero(); grid.nodes()];
            for k in 0..grid.steps() {
                let d = first_order_offsets(grid, &x1, direction, k);
                let [b, s, th, g] = coefficient_jets(model, ens, p, k);
                let nz = &ens.noise[p];
                let mut next = x1[k] + b.directional(&d) * dt + s.directional(&d) * nz.db[k] + th.directional(&d) * nz.dw[k];
                if jumps {
                    next += g.directional(&d) * ens.compensated_jump(p, k);
                }
                x1[k + 1] = next;
            }
            x1
        })
        .collect();
    Paths::from_rows(rows)
}

/// `Z¹` by Euler of `dZ¹ = (Z¹h + Z h_x x¹) dY`, and `Γ` from `forward_sim`.
pub fn simulate_z1_gamma<F: Real, M: DelayModel<F> + ?Sized>(
    model: &M,
    ens: &ForwardEnsemble<F>,
    x1: &Paths<F>,
) -> (Paths<F>, Paths<F>) {
    let grid = &ens.grid;
    let rows: Vec<Vec<F>> = (0..ens.paths())
        .into_par_iter()
        .map(|p| {
            let mut z1 = vec![F::zero(); grid.nodes()];
            for k in 0..grid.steps() {
                let h = model.observation(grid.time(k), ens.x.get(p, k));
                z1[k + 1] = z1[k] + (z1[k] * h.value + ens.z.get(p, k) * h.dx * x1.get(p, k)) * ens.noise[p].dw[k];
            }
            z1
        })
        .collect();
    let gamma = crate::forward_sim::simulate_gamma(model, ens, x1);
    (Paths::from_rows(rows).expect("rectangular"), gamma)
}

/// `max |Γ − Z¹/Z|` over paths and nodes.
pub fn gamma_consistency<F: Real>(ens: &ForwardEnsemble<F>, z1: &Paths<F>, gamma: &Paths<F>) -> F {
    let mut worst = F::zero();
    for p in 0..ens.paths() {
        for k in 0..ens.grid.nodes() {
            worst = worst.max((gamma.get(p, k) - z1.get(p, k) / ens.z.get(p, k)).abs());
        }
    }
    worst
}

fn require_second_order<F: Real, M: DelayModel<F> + ?Sized>(model: &M) -> Result<()> {
    if model.order() == DerivativeOrder::First {
        return Err(Error::Capability(format!("model '{}' provides first derivatives only", model.name())));
    }
    Ok(())
}

/// Euler recursion of the second variational equation (half the second derivative).
pub fn simulate_x2<F: Real, M: DelayModel<F> + ?Sized>(
    model: &M,
    ens: &ForwardEnsemble<F>,
    direction: &Direction<F>,
    x1: &Paths<F>,
) -> Result<Paths<F>> {
    require_second_order(model)?;
    check_direction(ens, direction)?;
    let grid = &ens.grid;
    let (dt, m) = (grid.dt(), grid.delay_shift());
    let jumps = ens.jumps.is_active();
    let half = F::half();
    let rows: Vec<Vec<F>> = (0..ens.paths())
        .into_par_iter()
        .map(|p| {
            let x1row = x1.row(p);
            let mut x2 = vec![F::zero(); grid.nodes()];
            for k in 0..grid.steps() {
                let d = first_order_offsets(grid, x1row, direction, k);
                let e = [x2[k], if k < m { F::zero() } else { x2[k - m] }, F::zero(), F::zero()];
                let [b, s, th, g] = coefficient_jets(model, ens, p, k);
                let second = |j: &Jet<F>| j.directional(&e) + half * j.quadratic(&d);
                let nz = &ens.noise[p];
                let mut next = x2[k] + second(&b) * dt + second(&s) * nz.db[k] + second(&th) * nz.dw[k];
                if jumps {
                    next += second(&g) * ens.compensated_jump(p, k);
                }
                x2[k + 1] = next;
            }
            x2
        })
        .collect();
    Paths::from_rows(rows)
}

/// `Γ¹ = M + ½Γ²` with
/// `M_{k+1} = M_k + (h_x x² + ½h_xx (x¹)²)(dY − h dt) − ½(h_x x¹)² dt`.
pub fn simulate_gamma1<F: Real, M: DelayModel<F> + ?Sized>(
    model: &M,
    ens: &ForwardEnsemble<F>,
    x1: &Paths<F>,
    x2: &Paths<F>,
    gamma: &Paths<F>,
) -> Paths<F> {
    let grid = &ens.grid;
    let dt = grid.dt();
    let half = F::half();
    let rows: Vec<Vec<F>> = (0..ens.paths())
        .into_par_iter()
        .map(|p| {
            let mut out = vec![F::zero(); grid.nodes()];
            let mut acc = F::zero();
            for k in 0..grid.steps() {
                let h = model.observation(grid.time(k), ens.x.get(p, k));
                let (a, b) = (x1.get(p, k), x2.get(p, k));
                let dw = ens.noise[p].dw[k] - h.value * dt;
                acc += (h.dx * b + half * h.dxx * a * a) * dw - half * (h.dx * a).powi(2) * dt;
                let g = gamma.get(p, k + 1);
                out[k + 1] = acc + half * g * g;
            }
            out
        })
        .collect();
    Paths::from_rows(rows).expect("rectangular")
}

/// All variational paths along `direction`; second order on request.
pub fn variations<F: Real, M: DelayModel<F> + ?Sized>(
    model: &M,
    ens: &ForwardEnsemble<F>,
    direction: &Direction<F>,
    second_order: bool,
) -> Result<VariationalPaths<F>> {
    let x1 = simulate_x1(model, ens, direction)?;
    let (z1, gamma) = simulate_z1_gamma(model, ens, &x1);
    let (x2, gamma1) = if second_order {
        let x2 = simulate_x2(model, ens, direction, &x1)?;
        let g1 = simulate_gamma1(model, ens, &x1, &x2, &gamma);
        (Some(x2), Some(g1))
    } else {
        (None, None)
    };
    Ok(VariationalPaths { x1, z1, gamma, x2, gamma1 })
}

/// Per-path `J₁` integrands.
pub fn j1_samples<F: Real, M: DelayModel<F> + ?Sized>(
    model: &M,
    ens: &ForwardEnsemble<F>,
    direction: &Direction<F>,
    var: &VariationalPaths<F>,
) -> Vec<F> {
    let grid = &ens.grid;
    let n = grid.steps();
    (0..ens.paths())
        .into_par_iter()
        .map(|p| {
            let x1 = var.x1.row(p);
            let mut acc = F::zero();
            for k in 0..=n {
                let ell = model.running_cost(&ens.point(p, k));
                let d = first_order_offsets(grid, x1, direction, k);
                acc += trapezoid_weight(grid, k) * ens.z.get(p, k) * (var.gamma.get(p, k) * ell.value + ell.directional(&d));
            }
            let phi = model.terminal_cost(ens.x.get(p, n));
            acc + ens.z.get(p, n) * (var.gamma.get(p, n) * phi.value + phi.dx * x1[n])
        })
        .collect()
}

/// Per-path `J₂` integrands.
pub fn j2_samples<F: Real, M: DelayModel<F> + ?Sized>(
    model: &M,
    ens: &ForwardEnsemble<F>,
    direction: &Direction<F>,
    var: &VariationalPaths<F>,
) -> Result<Vec<F>> {
    require_second_order(model)?;
    let (x2, gamma1) = match (&var.x2, &var.gamma1) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Capability("second-order variational paths were not simulated".into())),
    };
    let grid = &ens.grid;
    let (n, m) = (grid.steps(), grid.delay_shift());
    let half = F::half();
    Ok((0..ens.paths())
        .into_par_iter()
        .map(|p| {
            let (x1, x2r) = (var.x1.row(p), x2.row(p));
            let mut acc = F::zero();
            for k in 0..=n {
                let ell = model.running_cost(&ens.point(p, k));
                let d = first_order_offsets(grid, x1, direction, k);
                let e = [x2r[k], if k < m { F::zero() } else { x2r[k - m] }, F::zero(), F::zero()];
                let ell1 = ell.directional(&d);
                let ell2 = ell.directional(&e) + half * ell.quadratic(&d);
                acc += trapezoid_weight(grid, k)
                    * ens.z.get(p, k)
                    * (gamma1.get(p, k) * ell.value + var.gamma.get(p, k) * ell1 + ell2);
            }
            let phi = model.terminal_cost(ens.x.get(p, n));
            let (a, b) = (x1[n], x2r[n]);
            let terminal = phi.dx * b
                + half * phi.dxx * a * a
                + var.gamma.get(p, n) * phi.dx * a
                + gamma1.get(p, n) * phi.value;
            acc + ens.z.get(p, n) * terminal
        })
        .collect())
}

pub fn estimate_j1<F: Real, M: DelayModel<F> + ?Sized>(
    model: &M,
    ens: &ForwardEnsemble<F>,
    direction: &Direction<F>,
    var: &VariationalPaths<F>,
) -> Result<Estimate<F>> {
    Estimate::from_samples(&j1_samples(model, ens, direction, var)).ok_or_else(|| Error::domain("empty ensemble"))
}

pub fn estimate_j2<F: Real, M: DelayModel<F> + ?Sized>(
    model: &M,
    ens: &ForwardEnsemble<F>,
    direction: &Direction<F>,
    var: &VariationalPaths<F>,
) -> Result<Estimate<F>> {
    Estimate::from_samples(&j2_samples(model, ens, direction, var)?).ok_or_else(|| Error::domain("empty ensemble"))
}

/// Finite differences against the variational estimators for one direction.
#[derive(Debug, Clone, PartialEq)]
pub struct GateauxCheck<F> {
    pub direction: String,
    pub epsilon: F,
    pub j1: Estimate<F>,
    pub fd_j1: Estimate<F>,
    /// Paired `(J(u+εv) − J(u))/ε − J₁`.
    pub gap1: Estimate<F>,
    pub j2: Option<Estimate<F>>,
    pub fd_j2: Option<Estimate<F>>,
    /// Paired `(J(u+εv) − 2J(u) + J(u−εv))/ε² − 2J₂`.
    pub gap2: Option<Estimate<F>>,
}

impl<F: Real> GateauxCheck<F> {
    /// `|gap| ≤ C·ε + 4·SE` for each computed order.
    pub fn passes(&self, c: F) -> bool {
        let ok = |g: &Estimate<F>| g.mean.abs() <= c * self.epsilon + F::lit(4.0) * g.std_error;
        ok(&self.gap1) && self.gap2.as_ref().is_none_or(ok)
    }
}

fn paired<F: Real>(f: impl Fn(usize) -> F, n: usize) -> Estimate<F> {
    let v: Vec<F> = (0..n).map(f).collect();
    Estimate::from_samples(&v).expect("non-empty ensemble")
}

/// Compare `J₁` (and `J₂`) with finite differences on the base ensemble's noise.
pub fn gateaux_check<F: Real, M: DelayModel<F> + ?Sized>(
    model: &M,
    control: &ControlProcess<F>,
    base: &ForwardEnsemble<F>,
    direction: &Direction<F>,
    epsilon: F,
    second_order: bool,
) -> Result<GateauxCheck<F>> {
    if !(epsilon > F::zero()) {
        return Err(Error::domain("finite-difference step must be positive"));
    }
    let n = base.paths();
    let var = variations(model, base, direction, second_order)?;
    let j1 = j1_samples(model, base, direction, &var);
    let c0 = cost_samples(model, base);
    let plus = resimulate(model, &control.perturbed(&direction.values, epsilon), base)?;
    let cp = cost_samples(model, &plus);
    let fd1 = |p: usize| (cp[p] - c0[p]) / epsilon;
    let mut out = GateauxCheck {
        direction: direction.id.clone(),
        epsilon,
        j1: paired(|p| j1[p], n),
        fd_j1: paired(fd1, n),
        gap1: paired(|p| fd1(p) - j1[p], n),
        j2: None,
        fd_j2: None,
        gap2: None,
    };
    if second_order {
        let j2 = j2_samples(model, base, direction, &var)?;
        let minus = resimulate(model, &control.perturbed(&direction.values, -epsilon), base)?;
        let cm = cost_samples(model, &minus);
        let fd2 = |p: usize| (cp[p] - F::two() * c0[p] + cm[p]) / (epsilon * epsilon);
        out.j2 = Some(paired(|p| j2[p], n));
        out.fd_j2 = Some(paired(fd2, n));
        out.gap2 = Some(paired(|p| fd2(p) - F::two() * j2[p], n));
    }
    Ok(out)
}

/// Sampled-direction verdict of the second-order sufficient condition:
/// every `|J₁| ≤ k·SE` and every `J₂ ≤ k·SE`.
pub fn sufficiency_verdict<F: Real>(checks: &[GateauxCheck<F>], k: F) -> bool {
    checks.iter().all(|c| {
        c.j1.mean.abs() <= k * c.j1.std_error
            && c.j2.as_ref().is_some_and(|j2| j2.mean <= k * j2.std_error)
    })
}

/// `sup_k E|(x^{u+εv} − x^u)/ε − x¹|^power` on the base ensemble's noise.
pub fn remainder_moment<F: Real, M: DelayModel<F> + ?Sized>(
    model: &M,
    control: &ControlProcess<F>,
    base: &ForwardEnsemble<F>,
    direction: &Direction<F>,
    x1: &Paths<F>,
    epsilon: F,
    power: i32,
) -> Result<F> {
    let plus = resimulate(model, &control.perturbed(&direction.values, epsilon), base)?;
    let n = F::from_usize_lossy(base.paths());
    Ok((0..base.grid.nodes())
        .map(|k| {
            (0..base.paths())
                .map(|p| ((plus.x.get(p, k) - base.x.get(p, k)) / epsilon - x1.get(p, k)).abs().powi(power))
                .sum::<F>()
                / n
        })
        .fold(F::zero(), F::max))
}

/// `sup_k E|x^{u+εv} − x^u|^power / ε^power`.
pub fn perturbation_moment<F: Real, M: DelayModel<F> + ?Sized>(
    model: &M,
    control: &ControlProcess<F>,
    base: &ForwardEnsemble<F>,
    direction: &Direction<F>,
    epsilon: F,
    power: i32,
) -> Result<F> {
    let plus = resimulate(model, &control.perturbed(&direction.values, epsilon), base)?;
    let n = F::from_usize_lossy(base.paths());
    Ok((0..base.grid.nodes())
        .map(|k| {
            (0..base.paths()).map(|p| ((plus.x.get(p, k) - base.x.get(p, k)) / epsilon).abs().powi(power)).sum::<F>() / n
        })
        .fold(F::zero(), F::max))
}
