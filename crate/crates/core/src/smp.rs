//! Hamiltonian evaluation and residuals of the maximum-principle conditions:
//! `Ē[ℋ_v(t) + ℋ_{v′}(t+δ) | 𝒢_t] = 0` while `t + δ ≤ T`, and
//! `Ē[ℋ_v(t) | 𝒢_t] = 0` on the terminal window. Boundary controls switch
//! to the variational inequality `Ē[⟨∂ℋ, w − u⟩ | 𝒢_t] ≤ 0`.

use rayon::prelude::*;

use crate::absde::{AdjointSolution, AdjointValues, PSolution};
use crate::error::{Error, Result};
use crate::forward_sim::ForwardEnsemble;
use crate::model::{DelayModel, Point, V, V_LAG};
use crate::regression::{Basis, Feature, WeightedProjector};
use crate::scalar::{Estimate, Real};

/// Arguments of `ℋ(t, x, x′, v, v′, q, r, r̄, α)` plus `Q̃`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HamiltonianInputs<F> {
    pub t: F,
    pub x: F,
    pub x_lag: F,
    pub v: F,
    pub v_lag: F,
    pub factor: F,
    pub q: F,
    pub r: F,
    pub r_bar: F,
    pub alpha: F,
    pub q_tilde: F,
}

impl<F: Real> HamiltonianInputs<F> {
    pub fn new(point: Point<F>, adjoint: AdjointValues<F>, q_tilde: F) -> Self {
        Self {
            t: point.t,
            x: point.x,
            x_lag: point.x_lag,
            v: point.v,
            v_lag: point.v_lag,
            factor: point.factor,
            q: adjoint.q,
            r: adjoint.r,
            r_bar: adjoint.r_bar,
            alpha: adjoint.alpha,
            q_tilde,
        }
    }

    pub fn point(&self) -> Point<F> {
        Point::new(self.t, self.x, self.x_lag, self.v, self.v_lag).with_factor(self.factor)
    }

    pub fn with_control(mut self, v: F) -> Self {
        self.v = v;
        self
    }

    fn is_finite(&self) -> bool {
        [self.t, self.x, self.x_lag, self.v, self.v_lag, self.factor, self.q, self.r, self.r_bar, self.alpha, self.q_tilde]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `ℋ = b q + σ r + θ r̄ + ℓ + h Q̃ + ∫γ α ν(dζ)`.
pub fn hamiltonian<F: Real, M: DelayModel<F> + ?Sized>(model: &M, inp: &HamiltonianInputs<F>) -> F {
    debug_assert!(inp.is_finite());
    let p = inp.point();
    let nu = model.jump_measure().quadratic_rate();
    model.drift(&p).value * inp.q
        + model.diffusion(&p).value * inp.r
        + model.observation_coupling(&p).value * inp.r_bar
        + model.running_cost(&p).value
        + model.observation(p.t, p.x).value * inp.q_tilde
        + model.jump_coefficient(&p).value * inp.alpha * nu
}

/// Gradient of `ℋ` in `(x, x′, v, v′)`.
pub fn hamiltonian_gradient<F: Real, M: DelayModel<F> + ?Sized>(model: &M, inp: &HamiltonianInputs<F>) -> [F; 4] {
    let p = inp.point();
    let nu = model.jump_measure().quadratic_rate();
    let (b, s, th, g, l) = (
        model.drift(&p),
        model.diffusion(&p),
        model.observation_coupling(&p),
        model.jump_coefficient(&p),
        model.running_cost(&p),
    );
    let h = model.observation(p.t, p.x);
    let mut out = [F::zero(); 4];
    for (i, o) in out.iter_mut().enumerate() {
        *o = b.grad[i] * inp.q + s.grad[i] * inp.r + th.grad[i] * inp.r_bar + g.grad[i] * inp.alpha * nu + l.grad[i];
    }
    out[0] += h.dx * inp.q_tilde;
    out
}

/// Which form of the condition applies at a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowFlag {
    /// `k + m ≤ n`: both `ℋ_v(t)` and `ℋ_{v′}(t + δ)` enter.
    DelayCoupled,
    /// `k + m > n`: the advanced term is zero.
    Terminal,
}

impl WindowFlag {
    pub fn as_str(&self) -> &'static str {
        match self {
            WindowFlag::DelayCoupled => "delay_coupled",
            WindowFlag::Terminal => "terminal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualMode {
    /// Interior controls: conditional expectation of the gradient.
    Stationarity,
    /// Some control on the boundary of `U`: positive part of the
    /// variational inequality over sampled feasible `w`.
    VariationalInequality,
}

#[derive(Debug, Clone)]
pub struct ResidualConfig {
    /// Observation-measurable regression basis for `𝒢_t`.
    pub basis: Basis,
    /// Sampled feasible controls per node in the inequality form.
    pub vi_grid_points: usize,
    /// Drop the advanced term everywhere (diagnostic).
    pub single_term: bool,
}

impl Default for ResidualConfig {
    fn default() -> Self {
        Self { basis: Basis::observation(&[], 2).with_feature(Feature::Factor), vi_grid_points: 41, single_term: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualRow<F> {
    pub k: usize,
    pub t: F,
    /// `Ē` of the conditional residual (signed), or mean positive violation.
    pub residual: F,
    pub std_error: F,
    /// `max_p |Ê_G[...]|` over paths.
    pub max_conditional: F,
    pub window: WindowFlag,
}

#[derive(Debug, Clone)]
pub struct ResidualReport<F> {
    pub mode: ResidualMode,
    pub rows: Vec<ResidualRow<F>>,
}

impl<F: Real> ResidualReport<F> {
    pub fn max_abs(&self) -> F {
        self.rows.iter().fold(F::zero(), |a, r| a.max(r.residual.abs()))
    }

    pub fn mean(&self) -> F {
        self.rows.iter().map(|r| r.residual).sum::<F>() / F::from_usize_lossy(self.rows.len().max(1))
    }

    pub fn rms(&self) -> F {
        (self.rows.iter().map(|r| r.residual * r.residual).sum::<F>() / F::from_usize_lossy(self.rows.len().max(1)))
            .sqrt()
    }

    pub fn max_std_error(&self) -> F {
        self.rows.iter().fold(F::zero(), |a, r| a.max(r.std_error))
    }

    /// Every node satisfies `|residual| ≤ slack + k·SE`.
    pub fn within(&self, slack: F, k: F) -> bool {
        self.rows.iter().all(|r| r.residual.abs() <= slack + k * r.std_error)
    }
}

fn window<F: Real>(ens: &ForwardEnsemble<F>, k: usize) -> WindowFlag {
    if k + ens.grid.delay_shift() <= ens.grid.steps() {
        WindowFlag::DelayCoupled
    } else {
        WindowFlag::Terminal
    }
}

fn inputs_at<F: Real>(
    ens: &ForwardEnsemble<F>,
    adjoint: &AdjointSolution<F>,
    p_solution: &PSolution<F>,
    p: usize,
    k: usize,
) -> HamiltonianInputs<F> {
    HamiltonianInputs::new(ens.point(p, k), adjoint.at(p, k), p_solution.q_tilde.get(p, k))
}

/// Per-node residual of the first-order condition along the simulated control.
/// `Ē[· | 𝒢_t]` is a `Z_k`-weighted regression on observation features.
pub fn hamiltonian_u_residual<F: Real, M: DelayModel<F> + ?Sized>(
    model: &M,
    ens: &ForwardEnsemble<F>,
    adjoint: &AdjointSolution<F>,
    p_solution: &PSolution<F>,
    config: &ResidualConfig,
) -> Result<ResidualReport<F>> {
    if !config.basis.is_observable() {
        return Err(Error::domain("residual basis must use observation features only"));
    }
    let grid = &ens.grid;
    let (n, m, paths) = (grid.steps(), grid.delay_shift(), ens.paths());
    if adjoint.q.cols() != grid.nodes() || adjoint.q.rows() != paths {
        return Err(Error::domain("adjoint does not match the ensemble"));
    }
    let set = model.control_set();
    let boundary = set.is_bounded()
        && (0..paths).any(|p| (0..=n).any(|k| !set.is_interior(ens.v.get(p, k))));
    let mode = if boundary { ResidualMode::VariationalInequality } else { ResidualMode::Stationarity };
    let feasible = if boundary { set.grid(config.vi_grid_points.max(2))? } else { Vec::new() };

    let rows = (0..=n)
        .into_par_iter()
        .map(|k| -> Result<ResidualRow<F>> {
            let flag = window(ens, k);
            let target: Vec<F> = (0..paths)
                .map(|p| {
                    let here = hamiltonian_gradient(model, &inputs_at(ens, adjoint, p_solution, p, k))[V];
                    let mut acc = ens.z.get(p, k) * here;
                    if flag == WindowFlag::DelayCoupled && !config.single_term {
                        let j = k + m;
                        let ahead = hamiltonian_gradient(model, &inputs_at(ens, adjoint, p_solution, p, j))[V_LAG];
                        acc += ens.z.get(p, j) * ahead;
                    }
                    acc
                })
                .collect();
            let z = ens.z.column(k);
            let ratio: Vec<F> = target.iter().zip(&z).map(|(&a, &b)| a / b).collect();
            let design = config.basis.design(ens, k);
            let cond = WeightedProjector::at_node(&config.basis, ens, k, &z)?.fit(&design, &ratio);
            let z_mean = z.iter().copied().sum::<F>() / F::from_usize_lossy(paths);
            let (residual, std_error, max_conditional) = match mode {
                ResidualMode::Stationarity => {
                    let mean = target.iter().copied().sum::<F>() / F::from_usize_lossy(paths) / z_mean;
                    let centred: Vec<F> = (0..paths).map(|p| (target[p] - mean * z[p]) / z_mean).collect();
                    let se = Estimate::from_samples(&centred).map(|e| e.std_error).unwrap_or(F::zero());
                    (mean, se, cond.iter().fold(F::zero(), |a, c| a.max(c.abs())))
                }
                ResidualMode::VariationalInequality => {
                    let viol: Vec<F> = (0..paths)
                        .map(|p| {
                            let u = ens.v.get(p, k);
                            feasible.iter().fold(F::zero(), |a, &w| a.max(cond[p] * (w - u)))
                        })
                        .collect();
                    let est = Estimate::from_samples(&viol).expect("non-empty ensemble");
                    (est.mean, est.std_error, viol.iter().fold(F::zero(), |a, &c| a.max(c)))
                }
            };
            Ok(ResidualRow { k, t: grid.time(k), residual, std_error, max_conditional, window: flag })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ResidualReport { mode, rows })
}

/// Grid search of `ℋ` over `v` with the other arguments fixed; ties go to
/// the smallest `v`.
pub fn pointwise_h_maximize<F: Real, M: DelayModel<F> + ?Sized>(
    model: &M,
    inputs: &HamiltonianInputs<F>,
    v_grid: &[F],
) -> Result<F> {
    if v_grid.is_empty() {
        return Err(Error::domain("empty control grid"));
    }
    let set = model.control_set();
    if let Some(bad) = v_grid.iter().find(|&&v| !set.contains(v)) {
        return Err(Error::domain(format!("grid point {bad} outside U")));
    }
    let mut best: Option<(F, F)> = None;
    for &v in v_grid {
        let h = hamiltonian(model, &inputs.with_control(v));
        best = match best {
            Some((bv, bh)) if h < bh || (h == bh && v >= bv) => Some((bv, bh)),
            _ => Some((v, h)),
        };
    }
    Ok(best.expect("non-empty grid").0)
}

/// `(ℋ(v+s) − ℋ(v−s)) / 2s`.
pub fn h_central_difference<F: Real, M: DelayModel<F> + ?Sized>(model: &M, inputs: &HamiltonianInputs<F>, s: F) -> F {
    (hamiltonian(model, &inputs.with_control(inputs.v + s)) - hamiltonian(model, &inputs.with_control(inputs.v - s)))
        / (F::two() * s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::absde::{solve_adjoint, solve_p_equation, RegressionConfig};
    use crate::forward_sim::simulate_seeded;
    use crate::model::{ControlProcess, ControlSet, Jet, Jet1};
    use crate::time_grid::TimeGrid;

    /// dx = (κ x′ + β v) dt + s dB, ℓ = −c(v − v*)², φ = x.
    struct Lq {
        kappa: f64,
        beta: f64,
        c: f64,
        target: f64,
        set: ControlSet<f64>,
    }

    impl DelayModel<f64> for Lq {
        fn name(&self) -> &str {
            "lq"
        }
        fn delay(&self) -> f64 {
            0.25
        }
        fn drift(&self, p: &Point<f64>) -> Jet<f64> {
            Jet::affine(self.kappa * p.x_lag + self.beta * p.v, [0.0, self.kappa, self.beta, 0.0])
        }
        fn diffusion(&self, _p: &Point<f64>) -> Jet<f64> {
            Jet::constant(0.3)
        }
        fn observation_coupling(&self, _p: &Point<f64>) -> Jet<f64> {
            Jet::zero()
        }
        fn observation(&self, _t: f64, _x: f64) -> Jet1<f64> {
            Jet1::constant(0.0)
        }
        fn running_cost(&self, p: &Point<f64>) -> Jet<f64> {
            let d = p.v - self.target;
            let mut j = Jet::affine(-self.c * d * d, [0.0, 0.0, -2.0 * self.c * d, 0.0]);
            j.hess[V][V] = -2.0 * self.c;
            j
        }
        fn terminal_cost(&self, x: f64) -> Jet1<f64> {
            Jet1::new(self.c * x, self.c, 0.0)
        }
        fn initial_state(&self, _t: f64) -> f64 {
            1.0
        }
        fn initial_control(&self, _t: f64) -> f64 {
            0.0
        }
        fn control_set(&self) -> ControlSet<f64> {
            self.set
        }
    }

    fn lq() -> Lq {
        Lq { kappa: 0.5, beta: 1.0, c: 1.0, target: 0.0, set: ControlSet::interval(-3.0, 3.0).unwrap() }
    }

    fn inputs(v: f64, q: f64) -> HamiltonianInputs<f64> {
        HamiltonianInputs::new(
            Point::new(0.3, 1.0, 0.5, v, 0.0),
            AdjointValues { q, r: 0.2, r_bar: 0.0, alpha: 0.0 },
            0.0,
        )
    }

    #[test]
    fn trivial_hamiltonian_is_zero() {
        let mut m = lq();
        m.c = 0.0;
        let inp = HamiltonianInputs::new(Point::new(0.0, 1.0, 1.0, 1.0, 1.0), AdjointValues::default(), 0.0);
        assert_eq!(hamiltonian(&m, &inp), 0.0);
    }

    #[test]
    fn affine_in_q() {
        let m = lq();
        let d = hamiltonian(&m, &inputs(0.7, 2.0)) - hamiltonian(&m, &inputs(0.7, 0.0));
        let b = m.drift(&inputs(0.7, 0.0).point()).value;
        assert!((d - 2.0 * b).abs() < 1e-14);
    }

    #[test]
    fn maximizer_finds_vertex_and_boundary() {
        let m = lq();
        let grid = m.set.grid(601).unwrap();
        // ℋ_v = βq − 2c v → vertex at q/2
        let v = pointwise_h_maximize(&m, &inputs(0.0, 1.2), &grid).unwrap();
        assert!((v - 0.6).abs() <= 0.01);
        assert!(h_central_difference(&m, &inputs(v, 1.2), 0.01).abs() < 0.02);
        let mut lin = lq();
        lin.c = 0.0;
        assert_eq!(pointwise_h_maximize(&lin, &inputs(0.0, 1.0), &grid).unwrap(), 3.0);
        assert!(pointwise_h_maximize(&m, &inputs(0.0, 1.0), &[]).is_err());
    }

    #[test]
    fn ties_go_to_smallest() {
        let mut flat = lq();
        flat.c = 0.0;
        let v = pointwise_h_maximize(&flat, &inputs(0.0, 0.0), &[1.0, -1.0, 0.0]).unwrap();
        assert_eq!(v, -1.0);
    }

    #[test]
    fn argmax_is_scale_invariant() {
        let grid = lq().set.grid(301).unwrap();
        for q in [-1.0, 0.3, 2.0] {
            let a = pointwise_h_maximize(&lq(), &inputs(0.0, q), &grid).unwrap();
            let mut scaled = lq();
            scaled.c = 3.0;
            // scaling ℓ and φ by c scales the adjoint by c as well
            let b = pointwise_h_maximize(&scaled, &inputs(0.0, 3.0 * q), &grid).unwrap();
            assert_eq!(a, b);
        }
    }

    fn solved(m: &Lq, u: &ControlProcess<f64>) -> (ForwardEnsemble<f64>, AdjointSolution<f64>, PSolution<f64>) {
        let grid = TimeGrid::new(1.0, 0.25, 5).unwrap();
        let ens = simulate_seeded(m, u, &grid, 11, 2000).unwrap();
        let cfg = RegressionConfig::intercept();
        let p = solve_p_equation(m, &ens, &cfg).unwrap();
        let adj = solve_adjoint(m, &ens, &p, &cfg).unwrap();
        (ens, adj, p)
    }

    #[test]
    fn optimal_open_loop_control_has_small_residual_and_perturbation_shows() {
        // q deterministic: q(t) = 1 + κ ∫ q(s+δ) ds; v* = βq/2
        let m = lq();
        let grid = TimeGrid::new(1.0, 0.25, 5).unwrap();
        let (_, adj0, _) = solved(&m, &ControlProcess::constant(&grid, 0.0));
        let opt: Vec<f64> = (0..grid.nodes()).map(|k| m.beta * adj0.q.get(0, k) / 2.0).collect();
        let (ens, adj, p) = solved(&m, &ControlProcess::OpenLoop(opt.clone()));
        let cfg = ResidualConfig::default();
        let rep = hamiltonian_u_residual(&m, &ens, &adj, &p, &cfg).unwrap();
        assert_eq!(rep.mode, ResidualMode::Stationarity);
        assert!(rep.max_abs() < 1e-10, "{}", rep.max_abs());
        let bumped: Vec<f64> = opt.iter().map(|v| v + 0.1).collect();
        let (ens, adj, p) = solved(&m, &ControlProcess::OpenLoop(bumped));
        let rep = hamiltonian_u_residual(&m, &ens, &adj, &p, &cfg).unwrap();
        assert!(rep.rows.iter().all(|r| (r.residual + 0.2).abs() < 1e-10));
    }

    #[test]
    fn terminal_window_forms_agree() {
        let mut m = lq();
        m.set = ControlSet::unbounded();
        let grid = TimeGrid::new(1.0, 0.25, 5).unwrap();
        let (ens, adj, p) = solved(&m, &ControlProcess::from_fn(&grid, |t| t.sin()));
        let both = hamiltonian_u_residual(&m, &ens, &adj, &p, &ResidualConfig::default()).unwrap();
        let single =
            hamiltonian_u_residual(&m, &ens, &adj, &p, &ResidualConfig { single_term: true, ..Default::default() }).unwrap();
        for (a, b) in both.rows.iter().zip(&single.rows) {
            if a.window == WindowFlag::Terminal {
                assert_eq!(a.residual, b.residual);
            }
        }
        assert_eq!(both.rows.iter().filter(|r| r.window == WindowFlag::Terminal).count(), grid.delay_shift());
    }

    #[test]
    fn boundary_control_switches_to_inequality() {
        let m = lq();
        let grid = TimeGrid::new(1.0, 0.25, 5).unwrap();
        // ℋ_v = q − 2v > 0 at v = −3: pushing up improves, violation positive
        let (ens, adj, p) = solved(&m, &ControlProcess::constant(&grid, -3.0));
        let rep = hamiltonian_u_residual(&m, &ens, &adj, &p, &ResidualConfig::default()).unwrap();
        assert_eq!(rep.mode, ResidualMode::VariationalInequality);
        assert!(rep.rows.iter().all(|r| r.residual > 1.0));
        // at v = 3 with small q the upper bound is not optimal either
        let (ens, adj, p) = solved(&m, &ControlProcess::constant(&grid, 3.0));
        let rep = hamiltonian_u_residual(&m, &ens, &adj, &p, &ResidualConfig::default()).unwrap();
        assert!(rep.rows.iter().all(|r| r.residual > 0.0));
    }
}
