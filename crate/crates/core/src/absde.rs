//! Backward Euler with least-squares conditional expectations for the
//! anticipated adjoint `(q, r, r̄, α)` and the auxiliary equation `(P, Q, Q̃)`.
//!
//! The recursions run in reference-measure form: with `dW = dY − h dt` the
//! `dW`-loading of a backward equation adds `h·r̄` to its driver. Martingale
//! loadings are regressions of centred increments,
//! `r_k = Ê_k[(q_{k+1} − Ê_k q_{k+1}) ΔB_k] / dt`. The anticipated term reads the
//! stored node `k + m`, reweighted by `Z_{k+m}/Z_k`, and is zero past `T`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward_sim::{ForwardEnsemble, Paths};
use crate::model::{DelayModel, Jet, X, X_LAG, V, V_LAG};
use crate::regression::{Basis, Projector};
use crate::scalar::{Estimate, Real};

/// Regression basis of the backward sweeps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegressionConfig {
    pub basis: Basis,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self { basis: Basis::adjoint_default() }
    }
}

impl RegressionConfig {
    pub fn intercept() -> Self {
        Self { basis: Basis::intercept() }
    }

    pub fn with_basis(basis: Basis) -> Self {
        Self { basis }
    }
}

/// `(P, Q, Q̃)` on nodes `0..=n`; the loadings are zero at node `n`.
#[derive(Debug, Clone)]
pub struct PSolution<F> {
    pub p: Paths<F>,
    pub q: Paths<F>,
    pub q_tilde: Paths<F>,
}

/// `(q, r, r̄, α)` on nodes `0..=n`, with `α` the coefficient of the mark in
/// the jump integrand `α(t, ζ) = α_t·ζ`.
#[derive(Debug, Clone)]
pub struct AdjointSolution<F> {
    pub q: Paths<F>,
    pub r: Paths<F>,
    pub r_bar: Paths<F>,
    pub alpha: Paths<F>,
    /// Per step `k < n`: was the design at node `k` rank deficient.
    pub rank_deficient: Vec<bool>,
    /// Node-0 value with the standard error of its regression target.
    pub q0: Estimate<F>,
}

/// Adjoint values at one node.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AdjointValues<F> {
    pub q: F,
    pub r: F,
    pub r_bar: F,
    pub alpha: F,
}

impl<F: Real> AdjointSolution<F> {
    /// Values at node `j`, zero beyond the last node.
    pub fn at(&self, path: usize, j: usize) -> AdjointValues<F> {
        if j >= self.q.cols() {
            return AdjointValues { q: F::zero(), r: F::zero(), r_bar: F::zero(), alpha: F::zero() };
        }
        AdjointValues {
            q: self.q.get(path, j),
            r: self.r.get(path, j),
            r_bar: self.r_bar.get(path, j),
            alpha: self.alpha.get(path, j),
        }
    }
}

fn check_ensemble<F: Real>(ens: &ForwardEnsemble<F>) -> Result<()> {
    if ens.noise.iter().any(|nz| nz.dw.len() != ens.grid.steps() || nz.db.len() != ens.grid.steps()) {
        return Err(Error::domain("backward solvers need both driver increments on every step"));
    }
    Ok(())
}

fn mul<F: Real>(a: &[F], b: impl Fn(usize) -> F) -> Vec<F> {
    a.iter().enumerate().map(|(p, &x)| x * b(p)).collect()
}

/// Backward recursion `P_k = Ê_k P_{k+1} + dt·(ℓ_k + h_k Q̃_k)`, `P_n = φ(x_n)`.
pub fn solve_p_equation<F: Real, M: DelayModel<F> + ?Sized>(
    model: &M,
    ens: &ForwardEnsemble<F>,
    config: &RegressionConfig,
) -> Result<PSolution<F>> {
    check_ensemble(ens)?;
    let grid = &ens.grid;
    let (n, dt, paths) = (grid.steps(), grid.dt(), ens.paths());
    let mut p_sol = Paths::zeros(paths, n + 1);
    let mut q_sol = Paths::zeros(paths, n + 1);
    let mut qt_sol = Paths::zeros(paths, n + 1);
    let terminal: Vec<F> = (0..paths).map(|p| model.terminal_cost(ens.x.get(p, n)).value).collect();
    p_sol.set_column(n, &terminal);
    for k in (0..n).rev() {
        let proj = Projector::at_node(&config.basis, ens, k)?;
        let next = p_sol.column(k + 1);
        let cp = proj.fit(&next);
        let centred: Vec<F> = next.iter().zip(&cp).map(|(a, b)| *a - *b).collect();
        let q_tilde: Vec<F> = proj.fit(&mul(&centred, |p| ens.noise[p].dw[k])).into_iter().map(|v| v / dt).collect();
        let q: Vec<F> = proj.fit(&mul(&centred, |p| ens.noise[p].db[k])).into_iter().map(|v| v / dt).collect();
        let t = grid.time(k);
        let current: Vec<F> = (0..paths)
            .into_par_iter()
            .map(|p| {
                let pt = ens.point(p, k);
                let ell = model.running_cost(&pt).value;
                let h = model.observation(t, pt.x).value;
                cp[p] + dt * (ell + h * q_tilde[p])
            })
            .collect();
        p_sol.set_column(k, &current);
        q_sol.set_column(k, &q);
        qt_sol.set_column(k, &q_tilde);
    }
    Ok(PSolution { p: p_sol, q: q_sol, q_tilde: qt_sol })
}

/// Coefficient jets the adjoint driver needs at one point.
struct Jets<F> {
    b: Jet<F>,
    sigma: Jet<F>,
    theta: Jet<F>,
    gamma: Jet<F>,
    h: F,
    h_x: F,
    ell_x: F,
}

fn jets<F: Real, M: DelayModel<F> + ?Sized>(model: &M, ens: &ForwardEnsemble<F>, p: usize, k: usize) -> Jets<F> {
    let pt = ens.point(p, k);
    let h = model.observation(pt.t, pt.x);
    Jets {
        b: model.drift(&pt),
        sigma: model.diffusion(&pt),
        theta: model.observation_coupling(&pt),
        gamma: model.jump_coefficient(&pt),
        h: h.value,
        h_x: h.dx,
        ell_x: model.running_cost(&pt).grad[X],
    }
}

/// Explicit backward Euler for the anticipated adjoint.
pub fn solve_adjoint<F: Real, M: DelayModel<F> + ?Sized>(
    model: &M,
    ens: &ForwardEnsemble<F>,
    p_solution: &PSolution<F>,
    config: &RegressionConfig,
) -> Result<AdjointSolution<F>> {
    check_ensemble(ens)?;
    let grid = &ens.grid;
    let (n, dt, paths) = (grid.steps(), grid.dt(), ens.paths());
    if p_solution.p.cols() != n + 1 || p_solution.p.rows() != paths {
        return Err(Error::domain("P-equation solution does not match the ensemble"));
    }
    let jump_rate = ens.jumps.quadratic_rate();
    let jumps_on = ens.jumps.is_active() && jump_rate > F::zero();

    let mut q = Paths::zeros(paths, n + 1);
    let mut r = Paths::zeros(paths, n + 1);
    let mut r_bar = Paths::zeros(paths, n + 1);
    let mut alpha = Paths::zeros(paths, n + 1);
    let terminal: Vec<F> = (0..paths).map(|p| model.terminal_cost(ens.x.get(p, n)).dx).collect();
    q.set_column(n, &terminal);
    let mut rank_deficient = vec![false; n];
    let mut q0 = Estimate { mean: terminal[0], std_error: F::zero() };

    for k in (0..n).rev() {
        let proj = Projector::at_node(&config.basis, ens, k)?;
        rank_deficient[k] = proj.is_rank_deficient();
        let next = q.column(k + 1);
        let cq = proj.fit(&next);
        let centred: Vec<F> = next.iter().zip(&cq).map(|(a, b)| *a - *b).collect();
        let scale = |v: Vec<F>, s: F| -> Vec<F> { v.into_iter().map(|x| x / s).collect() };
        let rk = scale(proj.fit(&mul(&centred, |p| ens.noise[p].db[k])), dt);
        let rbk = scale(proj.fit(&mul(&centred, |p| ens.noise[p].dw[k])), dt);
        let ak = if jumps_on {
            scale(proj.fit(&mul(&centred, |p| ens.compensated_jump(p, k))), jump_rate * dt)
        } else {
            vec![F::zero(); paths]
        };

        let anticipated = match grid.advanced(k) {
            Some(j) => {
                let target: Vec<F> = (0..paths)
                    .into_par_iter()
                    .map(|p| {
                        let c = jets(model, ens, p, j);
                        let g = c.b.grad[X_LAG] * q.get(p, j)
                            + c.sigma.grad[X_LAG] * r.get(p, j)
                            + c.theta.grad[X_LAG] * r_bar.get(p, j)
                            + c.gamma.grad[X_LAG] * alpha.get(p, j) * jump_rate;
                        ens.z.get(p, j) / ens.z.get(p, k) * g
                    })
                    .collect();
                proj.fit(&target)
            }
            None => vec![F::zero(); paths],
        };

        let qt = p_solution.q_tilde.column(k);
        let targets: Vec<(F, F)> = (0..paths)
            .into_par_iter()
            .map(|p| {
                let c = jets(model, ens, p, k);
                let driver = (c.b.grad[X] - c.theta.value * c.h_x) * cq[p]
                    + c.sigma.grad[X] * rk[p]
                    + c.theta.grad[X] * rbk[p]
                    + c.gamma.grad[X] * ak[p] * jump_rate
                    + c.ell_x
                    + c.h_x * qt[p]
                    + anticipated[p]
                    + c.h * rbk[p];
                // unprojected counterpart, for the node-0 standard error
                let raw_driver = driver - cq[p] * (c.b.grad[X] - c.theta.value * c.h_x)
                    + next[p] * (c.b.grad[X] - c.theta.value * c.h_x);
                (cq[p] + dt * driver, next[p] + dt * raw_driver)
            })
            .collect();
        let values: Vec<F> = targets.iter().map(|t| t.0).collect();
        if k == 0 {
            let raw: Vec<F> = targets.iter().map(|t| t.1).collect();
            let se = Estimate::from_samples(&raw).map_or(F::zero(), |e| e.std_error);
            let mean = values.iter().copied().sum::<F>() / F::from_usize_lossy(paths);
            q0 = Estimate { mean, std_error: se };
        }
        q.set_column(k, &values);
        r.set_column(k, &rk);
        r_bar.set_column(k, &rbk);
        alpha.set_column(k, &ak);
    }
    if n == 0 {
        q0 = Estimate::from_samples(&q.column(0)).unwrap_or(q0);
    }
    Ok(AdjointSolution { q, r, r_bar, alpha, rank_deficient, q0 })
}

/// Per-path `x¹(T)q(T) − Σ_k dt·[−(ℓ_x + Q̃ h_x)x¹ + ⟨∇_{v,v′}(b, σ, θ, γ), (v, v′)⟩·(q, r, r̄, α·λE[ζ²])]_k`,
/// all `Z`-weighted; `direction` gives the perturbation at nodes `0..=n`.
pub fn duality_check<F: Real, M: DelayModel<F> + ?Sized>(
    model: &M,
    ens: &ForwardEnsemble<F>,
    x1: &Paths<F>,
    direction: &[F],
    adjoint: &AdjointSolution<F>,
    p_solution: &PSolution<F>,
) -> Result<Estimate<F>> {
    let grid = &ens.grid;
    let (n, m, dt) = (grid.steps(), grid.delay_shift(), grid.dt());
    if direction.len() != n + 1 || x1.cols() != n + 1 || x1.rows() != ens.paths() {
        return Err(Error::domain("duality inputs do not match the ensemble"));
    }
    let jump_rate = ens.jumps.quadratic_rate();
    let samples: Vec<F> = (0..ens.paths())
        .into_par_iter()
        .map(|p| {
            let lhs = ens.z.get(p, n) * x1.get(p, n) * adjoint.q.get(p, n);
            let mut rhs = F::zero();
            for k in 0..n {
                let c = jets(model, ens, p, k);
                let (v, vl) = (direction[k], if k < m { F::zero() } else { direction[k - m] });
                let a = adjoint.at(p, k);
                let dv = |j: &Jet<F>| j.grad[V] * v + j.grad[V_LAG] * vl;
                let term = -(c.ell_x + p_solution.q_tilde.get(p, k) * c.h_x) * x1.get(p, k)
                    + dv(&c.b) * a.q
                    + dv(&c.sigma) * a.r
                    + dv(&c.theta) * a.r_bar
                    + dv(&c.gamma) * a.alpha * jump_rate;
                rhs += ens.z.get(p, k) * term * dt;
            }
            lhs - rhs
        })
        .collect();
    Estimate::from_samples(&samples).ok_or_else(|| Error::domain("empty ensemble"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward_sim::simulate_seeded;
    use crate::model::{ControlProcess, Jet1, Point};
    use crate::time_grid::TimeGrid;

    /// dx = θ dY + c·x′ dt, ℓ and φ configurable.
    struct Lin {
        theta: f64,
        c: f64,
        ell: f64,
        phi: fn(f64) -> Jet1<f64>,
    }

    impl DelayModel<f64> for Lin {
        fn name(&self) -> &str {
            "lin"
        }
        fn delay(&self) -> f64 {
            0.4
        }
        fn drift(&self, p: &Point<f64>) -> Jet<f64> {
            Jet::affine(self.c * p.x_lag, [0.0, self.c, 0.0, 0.0])
        }
        fn diffusion(&self, _p: &Point<f64>) -> Jet<f64> {
            Jet::zero()
        }
        fn observation_coupling(&self, _p: &Point<f64>) -> Jet<f64> {
            Jet::constant(self.theta)
        }
        fn observation(&self, _t: f64, _x: f64) -> Jet1<f64> {
            Jet1::constant(0.0)
        }
        fn running_cost(&self, _p: &Point<f64>) -> Jet<f64> {
            Jet::constant(self.ell)
        }
        fn terminal_cost(&self, x: f64) -> Jet1<f64> {
            (self.phi)(x)
        }
        fn initial_state(&self, _t: f64) -> f64 {
            0.0
        }
        fn initial_control(&self, _t: f64) -> f64 {
            0.0
        }
    }

    fn grid() -> TimeGrid<f64> {
        TimeGrid::new(1.0, 0.4, 8).unwrap()
    }

    fn run(model: &Lin, paths: usize, config: &RegressionConfig) -> (ForwardEnsemble<f64>, PSolution<f64>, AdjointSolution<f64>) {
        let g = grid();
        let ens = simulate_seeded(model, &ControlProcess::constant(&g, 0.0), &g, 21, paths).unwrap();
        let ps = solve_p_equation(model, &ens, config).unwrap();
        let adj = solve_adjoint(model, &ens, &ps, config).unwrap();
        (ens, ps, adj)
    }

    #[test]
    fn constant_terminal() {
        let model = Lin { theta: 1.0, c: 0.0, ell: 0.0, phi: |_| Jet1::constant(2.0) };
        let (_, ps, _) = run(&model, 400, &RegressionConfig::default());
        assert!(ps.p.max_abs() - 2.0 < 1e-12 && ps.q_tilde.max_abs() < 1e-12 && ps.q.max_abs() < 1e-12);
    }

    #[test]
    fn unit_running_cost() {
        let model = Lin { theta: 1.0, c: 0.0, ell: 1.0, phi: |_| Jet1::constant(0.0) };
        let (ens, ps, _) = run(&model, 400, &RegressionConfig::default());
        for k in 0..ens.grid.nodes() {
            let want = 1.0 - ens.grid.time(k);
            assert!((0..400).all(|p| (ps.p.get(p, k) - want).abs() < 1e-12));
        }
        assert!(ps.q_tilde.max_abs() < 1e-12);
    }

    #[test]
    fn identity_terminal_has_unit_loading() {
        let model = Lin { theta: 1.0, c: 0.0, ell: 0.0, phi: |x| Jet1::new(x, 1.0, 0.0) };
        let (ens, ps, _) = run(&model, 4000, &RegressionConfig::default());
        let mut avg = 0.0;
        for k in 0..ens.grid.steps() {
            let e = Estimate::from_samples(&ps.q_tilde.column(k)).unwrap();
            avg += e.mean / ens.grid.steps() as f64;
            assert!((e.mean - 1.0).abs() < 0.12, "node {k}: {e}");
            let rms = ((0..4000).map(|p| (ps.p.get(p, k) - ens.x.get(p, k)).powi(2)).sum::<f64>() / 4000.0).sqrt();
            assert!(rms < 0.02, "node {k}: {rms}");
        }
        assert!((avg - 1.0).abs() < 0.03, "average loading {avg}");
    }

    #[test]
    fn trivial_driver() {
        let model = Lin { theta: 1.0, c: 0.0, ell: 0.0, phi: |x| Jet1::new(x, 1.0, 0.0) };
        let (_, _, adj) = run(&model, 400, &RegressionConfig::default());
        assert!(adj.q.row(3).iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(adj.r.max_abs() < 1e-12 && adj.r_bar.max_abs() < 1e-12);
    }

    #[test]
    fn zero_extension() {
        let model = Lin { theta: 1.0, c: 0.5, ell: 0.0, phi: |x| Jet1::new(x, 1.0, 0.0) };
        let (ens, _, adj) = run(&model, 400, &RegressionConfig::default());
        let n = ens.grid.steps();
        assert_eq!(adj.at(0, n + 1), AdjointValues::default());
        assert_eq!(adj.at(0, n + ens.grid.delay_shift()), AdjointValues::default());
        assert_eq!(adj.q.get(7, n), 1.0);
    }

    #[test]
    fn anticipated_term_by_method_of_steps() {
        // q_k = q_{k+1} + dt·c·q_{k+m}, q_n = 1
        let model = Lin { theta: 0.0, c: 0.5, ell: 0.0, phi: |x| Jet1::new(x, 1.0, 0.0) };
        let (ens, _, adj) = run(&model, 200, &RegressionConfig::intercept());
        let g = &ens.grid;
        let (n, m, dt) = (g.steps(), g.delay_shift(), g.dt());
        let mut oracle = vec![0.0; n + 1];
        oracle[n] = 1.0;
        for k in (0..n).rev() {
            let ahead = if k + m <= n { oracle[k + m] } else { 0.0 };
            oracle[k] = oracle[k + 1] + dt * 0.5 * ahead;
        }
        for k in 0..=n {
            assert!((adj.q.get(0, k) - oracle[k]).abs() < 1e-12, "node {k}");
        }
    }
}
