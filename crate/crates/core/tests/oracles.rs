//! Independent oracles for the simulation, variational and backward layers.

use smpdelay::absde::{duality_check, solve_adjoint, solve_p_equation, RegressionConfig};
use smpdelay::forward_sim::{cost_samples, resimulate, simulate_seeded, simulate_state};
use smpdelay::model::{ControlProcess, DelayModel, Jet, Jet1, Point, V, X};
use smpdelay::models::{Example2, LinearDelay, NonlinearBounded};
use smpdelay::time_grid::{sample_noise, JumpMeasure, SeedSpec, TimeGrid};
use smpdelay::variational::{
    direction_family, estimate_j1, gamma_consistency, j1_samples, j2_samples, perturbation_moment, simulate_x1,
    simulate_z1_gamma, variations, Direction,
};
use smpdelay::Estimate;

fn nonlinear_setup(m: usize, paths: usize) -> (NonlinearBounded<f64>, ControlProcess<f64>, smpdelay::Ensemble) {
    let model = NonlinearBounded::new(0.2);
    let grid = TimeGrid::new(1.0, 0.2, m).unwrap();
    let u = ControlProcess::constant(&grid, 0.2);
    let ens = simulate_seeded(&model, &u, &grid, 5, paths).unwrap();
    (model, u, ens)
}

fn sin_direction(grid: &TimeGrid<f64>) -> Direction<f64> {
    direction_family(grid).into_iter().find(|d| d.id == "sin").unwrap()
}

#[test]
fn eighth_moment_is_stable_under_refinement() {
    let (_, _, coarse) = nonlinear_setup(10, 4000);
    let (_, _, fine) = nonlinear_setup(20, 4000);
    let ratio = fine.sup_moment(8) / coarse.sup_moment(8);
    assert!((0.5..=2.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn perturbation_is_lipschitz_in_epsilon() {
    let (model, u, ens) = nonlinear_setup(10, 2000);
    let dir = sin_direction(&ens.grid);
    let m: Vec<f64> =
        [0.1, 0.05, 0.025].iter().map(|&e| perturbation_moment(&model, &u, &ens, &dir, e, 2).unwrap()).collect();
    let (lo, hi) = m.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
    assert!(lo > 0.0 && hi / lo <= 4.0, "{m:?}");
}

#[test]
fn gamma_matches_density_ratio_and_improves_with_dt() {
    let errs: Vec<f64> = [10, 40, 160]
        .iter()
        .map(|&m| {
            let (model, _, ens) = nonlinear_setup(m, 200);
            let x1 = simulate_x1(&model, &ens, &sin_direction(&ens.grid)).unwrap();
            let (z1, gamma) = simulate_z1_gamma(&model, &ens, &x1);
            gamma_consistency(&ens, &z1, &gamma)
        })
        .collect();
    assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
}

#[test]
fn gamma_is_centred_under_the_physical_measure() {
    let (model, _, ens) = nonlinear_setup(10, 20_000);
    let n = ens.grid.steps();
    let x1 = simulate_x1(&model, &ens, &sin_direction(&ens.grid)).unwrap();
    let (_, gamma) = simulate_z1_gamma(&model, &ens, &x1);
    let weighted: Vec<f64> = (0..ens.paths()).map(|p| ens.z.get(p, n) * gamma.get(p, n)).collect();
    let e = Estimate::from_samples(&weighted).unwrap();
    assert!(e.mean.abs() <= 4.0 * e.std_error, "{e}");
}

#[test]
fn second_order_taylor_residual_shrinks() {
    let (model, u, ens) = nonlinear_setup(10, 4000);
    let dir = sin_direction(&ens.grid);
    let var = variations(&model, &ens, &dir, true).unwrap();
    let j1 = j1_samples(&model, &ens, &dir, &var);
    let j2 = j2_samples(&model, &ens, &dir, &var).unwrap();
    let base = cost_samples(&model, &ens);
    let residual = |eps: f64| {
        let plus = resimulate(&model, &u.perturbed(&dir.values, eps), &ens).unwrap();
        let c = cost_samples(&model, &plus);
        let r: f64 = (0..ens.paths()).map(|p| c[p] - base[p] - eps * j1[p] - eps * eps * j2[p]).sum::<f64>()
            / ens.paths() as f64;
        let first: f64 = (0..ens.paths()).map(|p| c[p] - base[p] - eps * j1[p]).sum::<f64>() / ens.paths() as f64;
        (r.abs(), first.abs())
    };
    let r: Vec<(f64, f64)> = [0.4, 0.2, 0.1].iter().map(|&e| residual(e)).collect();
    assert!(r[0].0 > r[1].0 && r[1].0 > r[2].0, "{r:?}");
    assert!(r.iter().all(|(second, first)| second < first), "{r:?}");
}

#[test]
fn linear_model_has_no_second_variation() {
    let model = LinearDelay::new(0.25);
    let grid = TimeGrid::new(1.0, 0.25, 5).unwrap();
    let ens = simulate_seeded(&model, &ControlProcess::constant(&grid, 0.3), &grid, 1, 200).unwrap();
    for dir in direction_family(&grid) {
        let var = variations(&model, &ens, &dir, true).unwrap();
        assert!(var.x2.unwrap().max_abs() < 1e-14, "{}", dir.id);
    }
}

#[test]
fn constant_observation_drift_leaves_density_insensitive() {
    let mut model = NonlinearBounded::new(0.2);
    model.h_amplitude = 0.0;
    let grid = TimeGrid::new(1.0, 0.2, 10).unwrap();
    let ens = simulate_seeded(&model, &ControlProcess::constant(&grid, 0.2), &grid, 2, 200).unwrap();
    let x1 = simulate_x1(&model, &ens, &sin_direction(&grid)).unwrap();
    let (z1, gamma) = simulate_z1_gamma(&model, &ens, &x1);
    assert_eq!(z1.max_abs(), 0.0);
    assert_eq!(gamma.max_abs(), 0.0);
}

#[test]
fn zero_investment_wealth_follows_method_of_steps() {
    // x(t) = 1 + r t + r²(t − δ)²/2 + r³(t − 2δ)³/6 for T = 1, δ = 0.4
    let mut model = Example2::new(0.4);
    model.r0 = 0.5;
    let r: f64 = model.r0;
    let exact = 1.0 + r + r * r * 0.36 / 2.0 + r.powi(3) * 0.008 / 6.0;
    let errs: Vec<f64> = [20, 40, 80]
        .iter()
        .map(|&m| {
            let grid = TimeGrid::new(1.0, 0.4, m).unwrap();
            let noise = sample_noise(&grid, SeedSpec::new(3, 0), &JumpMeasure::none()).unwrap();
            let (x, _) = simulate_state(&model, &ControlProcess::constant(&grid, 0.0), &grid, &noise).unwrap();
            (x[grid.steps()] - exact).abs()
        })
        .collect();
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.6..=2.4).contains(&ratio), "{errs:?}");
    }
}

/// `dx = (κx + v) dt + (s₀ + s₁x) dB + θ dW`, `h = h₀ + h₁x`, `ℓ = c x² − ½v²`, `φ = x²/2`.
struct DelayFree {
    kappa: f64,
    s0: f64,
    s1: f64,
    theta: f64,
    h0: f64,
    h1: f64,
    c: f64,
}

impl DelayModel<f64> for DelayFree {
    fn name(&self) -> &str {
        "delay-free"
    }
    fn delay(&self) -> f64 {
        0.25
    }
    fn drift(&self, p: &Point<f64>) -> Jet<f64> {
        Jet::affine(self.kappa * p.x + p.v, [self.kappa, 0.0, 1.0, 0.0])
    }
    fn diffusion(&self, p: &Point<f64>) -> Jet<f64> {
        Jet::affine(self.s0 + self.s1 * p.x, [self.s1, 0.0, 0.0, 0.0])
    }
    fn observation_coupling(&self, _p: &Point<f64>) -> Jet<f64> {
        Jet::constant(self.theta)
    }
    fn observation(&self, _t: f64, x: f64) -> Jet1<f64> {
        Jet1::new(self.h0 + self.h1 * x, self.h1, 0.0)
    }
    fn running_cost(&self, p: &Point<f64>) -> Jet<f64> {
        let mut j = Jet::affine(self.c * p.x * p.x - 0.5 * p.v * p.v, [2.0 * self.c * p.x, 0.0, -p.v, 0.0]);
        j.hess[X][X] = 2.0 * self.c;
        j.hess[V][V] = -1.0;
        j
    }
    fn terminal_cost(&self, x: f64) -> Jet1<f64> {
        Jet1::new(0.5 * x * x, x, 1.0)
    }
    fn initial_state(&self, _t: f64) -> f64 {
        1.0
    }
    fn initial_control(&self, _t: f64) -> f64 {
        0.0
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn delay_free_adjoint_matches_plain_backward_recursion() {
    let model = DelayFree { kappa: -0.3, s0: 0.2, s1: 0.1, theta: 0.15, h0: 0.2, h1: 0.4, c: 0.1 };
    let grid = TimeGrid::new(1.0, 0.25, 5).unwrap();
    let ens = simulate_seeded(&model, &ControlProcess::constant(&grid, 0.1), &grid, 9, 500).unwrap();
    let cfg = RegressionConfig::intercept();
    let p_sol = solve_p_equation(&model, &ens, &cfg).unwrap();
    let adj = solve_adjoint(&model, &ens, &p_sol, &cfg).unwrap();

    // with only an intercept every conditional expectation is a plain mean
    let (n, dt, paths) = (grid.steps(), grid.dt(), ens.paths());
    let x = |p: usize, k: usize| ens.x.get(p, k);
    let mut p_next: Vec<f64> = (0..paths).map(|p| 0.5 * x(p, n) * x(p, n)).collect();
    let mut q_next: Vec<f64> = (0..paths).map(|p| x(p, n)).collect();
    for k in (0..n).rev() {
        let loading = |next: &[f64], inc: &dyn Fn(usize) -> f64| {
            let c = mean(next);
            let v: Vec<f64> = (0..paths).map(|p| (next[p] - c) * inc(p)).collect();
            mean(&v) / dt
        };
        let db = |p: usize| ens.noise[p].db[k];
        let dw = |p: usize| ens.noise[p].dw[k];
        let q_tilde = loading(&p_next, &dw);
        let r = loading(&q_next, &db);
        let r_bar = loading(&q_next, &dw);
        let (cp, cq) = (mean(&p_next), mean(&q_next));
        let mut p_now = vec![0.0; paths];
        let mut q_now = vec![0.0; paths];
        for p in 0..paths {
            let (xk, v) = (x(p, k), ens.v.get(p, k));
            let h = model.h0 + model.h1 * xk;
            p_now[p] = cp + dt * (model.c * xk * xk - 0.5 * v * v + h * q_tilde);
            let driver = (model.kappa - model.theta * model.h1) * cq
                + model.s1 * r
                + 2.0 * model.c * xk
                + model.h1 * q_tilde
                + h * r_bar;
            q_now[p] = cq + dt * driver;
            assert!((adj.r.get(p, k) - r).abs() < 1e-12);
            assert!((adj.r_bar.get(p, k) - r_bar).abs() < 1e-12);
            assert!((p_sol.q_tilde.get(p, k) - q_tilde).abs() < 1e-12);
        }
        for p in 0..paths {
            assert!((adj.q.get(p, k) - q_now[p]).abs() < 1e-12, "k={k}");
            assert!((p_sol.p.get(p, k) - p_now[p]).abs() < 1e-12, "k={k}");
        }
        p_next = p_now;
        q_next = q_now;
    }
}

#[test]
fn deterministic_dynamics_have_vanishing_loadings() {
    let mut model = LinearDelay::new(0.25);
    model.s0 = 0.0;
    model.s1 = 0.0;
    model.theta = 0.0;
    model.h0 = 0.0;
    let grid = TimeGrid::new(1.0, 0.25, 5).unwrap();
    let ens = simulate_seeded(&model, &ControlProcess::constant(&grid, 0.3), &grid, 1, 300).unwrap();
    let cfg = RegressionConfig::default();
    let p = solve_p_equation(&model, &ens, &cfg).unwrap();
    let adj = solve_adjoint(&model, &ens, &p, &cfg).unwrap();
    assert!(adj.r.max_abs() < 1e-10 && adj.r_bar.max_abs() < 1e-10);
}

#[test]
fn duality_is_trivial_for_zero_direction() {
    let model = LinearDelay::new(0.25);
    let grid = TimeGrid::new(1.0, 0.25, 5).unwrap();
    let ens = simulate_seeded(&model, &ControlProcess::constant(&grid, 0.3), &grid, 1, 300).unwrap();
    let cfg = RegressionConfig::default();
    let p = solve_p_equation(&model, &ens, &cfg).unwrap();
    let adj = solve_adjoint(&model, &ens, &p, &cfg).unwrap();
    let zero = Direction::zero(&grid);
    let x1 = simulate_x1(&model, &ens, &zero).unwrap();
    let e = duality_check(&model, &ens, &x1, &zero.values, &adj, &p).unwrap();
    assert_eq!(e.mean, 0.0);
}

#[test]
fn duality_bias_shrinks_with_state_dependent_observation() {
    let mut model = LinearDelay::new(0.2);
    model.h1 = 0.4;
    let gaps: Vec<f64> = [5, 20]
        .iter()
        .map(|&m| {
            let grid = TimeGrid::new(1.0, 0.2, m).unwrap();
            let ens = simulate_seeded(&model, &ControlProcess::constant(&grid, 0.3), &grid, 4, 20_000).unwrap();
            let cfg = RegressionConfig::default();
            let p = solve_p_equation(&model, &ens, &cfg).unwrap();
            let adj = solve_adjoint(&model, &ens, &p, &cfg).unwrap();
            let dir = sin_direction(&grid);
            let x1 = simulate_x1(&model, &ens, &dir).unwrap();
            let e = duality_check(&model, &ens, &x1, &dir.values, &adj, &p).unwrap();
            assert!(e.mean.abs() <= 4.0 * e.std_error + grid.dt(), "m={m}: {e}");
            e.mean.abs()
        })
        .collect();
    assert!(gaps[1] < gaps[0], "{gaps:?}");
}

#[test]
fn investment_optimum_is_stationary() {
    let mut cfg = smpdelay::Config::default();
    cfg.n_paths = 4000;
    let run = smpdelay::experiments::run_example2(&cfg).unwrap();
    for dir in direction_family(&run.grid) {
        let var = variations(&run.model, &run.ensemble, &dir, false).unwrap();
        let j1 = estimate_j1(&run.model, &run.ensemble, &dir, &var).unwrap();
        assert!(j1.mean.abs() <= 4.0 * j1.std_error + run.grid.dt(), "{}: {j1}", dir.id);
    }
}
