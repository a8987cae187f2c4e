//! Kalman–Bucy filtering of an unobserved Ornstein–Uhlenbeck drift from a
//! log-price observation, the Riccati variance equation, and regression
//! estimates of conditional expectations given the observation filtration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward_sim::Paths;
use crate::regression::{regress, RegressionFit};
use crate::scalar::{Estimate, Real};
use crate::time_grid::{NoisePath, TimeGrid};

/// RK4 substeps per grid step.
pub const RICCATI_SUBSTEPS: usize = 16;

/// Filter variance `γ` on the grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution<F> {
    pub gamma: Vec<F>,
    pub sigma: Vec<F>,
    pub alpha: F,
    pub beta: F,
    pub substeps: usize,
}

/// `γ′ = 2αγ − γ²/σ² + β²`.
#[inline]
fn riccati_rhs<F: Real>(alpha: F, beta: F, sigma: F, gamma: F) -> F {
    F::two() * alpha * gamma - gamma * gamma / (sigma * sigma) + beta * beta
}

impl<F: Real> RiccatiSolution<F> {
    /// Largest `|γ′ − rhs|` at step midpoints, `γ′` by central difference of nodes
    /// and `γ` at the midpoint by averaging.
    pub fn midpoint_residual(&self, grid: &TimeGrid<F>, sigma_fn: impl Fn(F) -> F) -> F {
        let dt = grid.dt();
        (0..grid.steps())
            .map(|k| {
                let slope = (self.gamma[k + 1] - self.gamma[k]) / dt;
                let mid = F::half() * (self.gamma[k] + self.gamma[k + 1]);
                let t = grid.time(k) + F::half() * dt;
                (slope - riccati_rhs(self.alpha, self.beta, sigma_fn(t), mid)).abs()
            })
            .fold(F::zero(), F::max)
    }
}

/// RK4 integration of the Riccati equation with `substeps` stages per grid step.
pub fn solve_riccati<F: Real>(
    alpha: F,
    beta: F,
    sigma_fn: impl Fn(F) -> F,
    gamma0: F,
    grid: &TimeGrid<F>,
    substeps: usize,
) -> Result<RiccatiSolution<F>> {
    if gamma0 < F::zero() || !gamma0.is_finite() {
        return Err(Error::domain(format!("initial filter variance must be non-negative, got {gamma0}")));
    }
    if substeps == 0 {
        return Err(Error::domain("Riccati integration needs at least one substep"));
    }
    let sigma: Vec<F> = (0..grid.nodes()).map(|k| sigma_fn(grid.time(k))).collect();
    if let Some((k, s)) = sigma.iter().enumerate().find(|(_, &s)| !(s > F::zero())) {
        return Err(Error::domain(format!("volatility {s} not positive at node {k}")));
    }
    let h = grid.dt() / F::from_usize_lossy(substeps);
    let mut gamma = Vec::with_capacity(grid.nodes());
    let mut g = gamma0;
    gamma.push(g);
    for k in 0..grid.steps() {
        for s in 0..substeps {
            let t = grid.time(k) + F::from_usize_lossy(s) * h;
            let (s0, s1, s2) = (sigma_fn(t), sigma_fn(t + F::half() * h), sigma_fn(t + h));
            if !(s1 > F::zero() && s2 > F::zero()) {
                return Err(Error::domain(format!("volatility not positive near t = {t}")));
            }
            let k1 = riccati_rhs(alpha, beta, s0, g);
            let k2 = riccati_rhs(alpha, beta, s1, g + F::half() * h * k1);
            let k3 = riccati_rhs(alpha, beta, s1, g + F::half() * h * k2);
            let k4 = riccati_rhs(alpha, beta, s2, g + h * k3);
            g += h / F::lit(6.0) * (k1 + F::two() * (k2 + k3) + k4);
        }
        gamma.push(g.max(F::zero()));
    }
    Ok(RiccatiSolution { gamma, sigma, alpha, beta, substeps })
}

/// Filtered mean and innovation increments of one path.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState<F> {
    pub mu_hat: Vec<F>,
    /// `dν_k`, one per step.
    pub innovations: Vec<F>,
}

/// Euler recursion `μ̂_{k+1} = μ̂_k + αμ̂_k dt + (γ_k/σ_k)·dν_k` with
/// `dν_k = (Δ log S_k − (μ̂_k − ½σ_k²) dt)/σ_k`.
pub fn run_kalman_bucy<F: Real>(
    riccati: &RiccatiSolution<F>,
    dlog_s: &[F],
    mu_hat0: F,
    grid: &TimeGrid<F>,
) -> Result<FilterState<F>> {
    let n = grid.steps();
    if dlog_s.len() != n || riccati.gamma.len() != n + 1 {
        return Err(Error::domain("observation increments and Riccati solution must match the grid"));
    }
    let dt = grid.dt();
    let mut mu_hat = Vec::with_capacity(n + 1);
    let mut innovations = Vec::with_capacity(n);
    let mut m = mu_hat0;
    mu_hat.push(m);
    for k in 0..n {
        let s = riccati.sigma[k];
        let dnu = (dlog_s[k] - (m - F::half() * s * s) * dt) / s;
        m += riccati.alpha * m * dt + riccati.gamma[k] / s * dnu;
        innovations.push(dnu);
        mu_hat.push(m);
    }
    Ok(FilterState { mu_hat, innovations })
}

/// Drift dynamics `dμ = αμ dt + β dW̄` with Gaussian prior, observed through
/// `d log S = (μ − ½σ²) dt + σ dW`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarketSpec<F> {
    pub alpha: F,
    pub beta: F,
    pub prior_mean: F,
    pub prior_variance: F,
}

/// One path of the hidden drift and its log-price increments.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketPath<F> {
    pub mu: Vec<F>,
    pub dlog_s: Vec<F>,
}

/// Prior draw for path `path_index`, from a stream disjoint from the noise streams.
pub fn prior_draw<F: Real>(master_seed: u64, path_index: u64) -> F {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(path_index | (1 << 63));
    F::standard_normal(&mut rng)
}

/// Simulate the hidden drift (driven by `noise.db`) and the observation (driven by `noise.dw`).
pub fn simulate_market<F: Real>(
    spec: &MarketSpec<F>,
    sigma: &[F],
    grid: &TimeGrid<F>,
    noise: &NoisePath<F>,
    prior_normal: F,
) -> MarketPath<F> {
    let dt = grid.dt();
    let mut mu = Vec::with_capacity(grid.nodes());
    let mut dlog_s = Vec::with_capacity(grid.steps());
    let mut m = spec.prior_mean + spec.prior_variance.sqrt() * prior_normal;
    mu.push(m);
    for k in 0..grid.steps() {
        let s = sigma[k];
        dlog_s.push((m - F::half() * s * s) * dt + s * noise.dw[k]);
        m += spec.alpha * m * dt + spec.beta * noise.db[k];
        mu.push(m);
    }
    MarketPath { mu, dlog_s }
}

/// Hidden drift, filter and innovations for a whole ensemble.
#[derive(Debug, Clone)]
pub struct FilterEnsemble<F> {
    pub riccati: RiccatiSolution<F>,
    pub mu: Paths<F>,
    pub mu_hat: Paths<F>,
    /// `paths × n`.
    pub innovations: Paths<F>,
    pub dlog_s: Paths<F>,
}

pub fn filter_ensemble<F: Real>(
    spec: &MarketSpec<F>,
    riccati: RiccatiSolution<F>,
    grid: &TimeGrid<F>,
    noise: &[NoisePath<F>],
    master_seed: u64,
) -> Result<FilterEnsemble<F>> {
    let out: Vec<(MarketPath<F>, FilterState<F>)> = noise
        .par_iter()
        .enumerate()
        .map(|(p, nz)| {
            let market = simulate_market(spec, &riccati.sigma, grid, nz, prior_draw(master_seed, p as u64));
            let state = run_kalman_bucy(&riccati, &market.dlog_s, spec.prior_mean, grid)?;
            Ok((market, state))
        })
        .collect::<Result<_>>()?;
    Ok(FilterEnsemble {
        mu: Paths::from_rows(out.iter().map(|(m, _)| m.mu.clone()).collect())?,
        mu_hat: Paths::from_rows(out.iter().map(|(_, s)| s.mu_hat.clone()).collect())?,
        innovations: Paths::from_rows(out.iter().map(|(_, s)| s.innovations.clone()).collect())?,
        dlog_s: Paths::from_rows(out.iter().map(|(m, _)| m.dlog_s.clone()).collect())?,
        riccati,
    })
}

impl<F: Real> FilterEnsemble<F> {
    /// `mean_k E[(μ − μ̂)²] / mean_k γ`.
    pub fn variance_tracking_ratio(&self) -> F {
        let nodes = self.mu.cols();
        let paths = F::from_usize_lossy(self.mu.rows());
        let mut mse = F::zero();
        let mut gam = F::zero();
        for k in 0..nodes {
            let e: F = (0..self.mu.rows()).map(|p| (self.mu.get(p, k) - self.mu_hat.get(p, k)).powi(2)).sum();
            mse += e / paths;
            gam += self.riccati.gamma[k];
        }
        mse / gam
    }

    /// Largest per-step mismatch of `σ·dν + (μ̂ − ½σ²)dt` against `Δ log S`.
    pub fn innovation_reconstruction_error(&self, grid: &TimeGrid<F>) -> F {
        let dt = grid.dt();
        let mut worst = F::zero();
        for p in 0..self.mu.rows() {
            for k in 0..grid.steps() {
                let s = self.riccati.sigma[k];
                let back = s * self.innovations.get(p, k) + (self.mu_hat.get(p, k) - F::half() * s * s) * dt;
                worst = worst.max((back - self.dlog_s.get(p, k)).abs());
            }
        }
        worst
    }

    /// Estimate of `E_ref[Z(T)²]` for the linear observation drift
    /// `h = (μ − ½σ²)/σ`: for physically sampled paths this is `E[Z(T)]`.
    pub fn density_second_moment(&self, grid: &TimeGrid<F>) -> Estimate<F> {
        let dt = grid.dt();
        let samples: Vec<F> = (0..self.mu.rows())
            .map(|p| {
                let mut log_z = F::zero();
                for k in 0..grid.steps() {
                    let s = self.riccati.sigma[k];
                    let h = (self.mu.get(p, k) - F::half() * s * s) / s;
                    let dy = self.dlog_s.get(p, k) / s;
                    log_z += h * dy - F::half() * h * h * dt;
                }
                log_z.exp()
            })
            .collect();
        Estimate::from_samples(&samples).expect("non-empty ensemble")
    }
}

/// Regression estimate of `E[values | features]` on monomials up to `degree`.
pub fn conditional_expectation_g<F: Real>(
    values: &[F],
    features: &[Vec<F>],
    degree: usize,
) -> Result<RegressionFit<F>> {
    regress(values, features, degree)
}

/// `σ(t) = 0.3 sin 2t + 0.1`.
pub fn market_volatility<F: Real>(t: F) -> F {
    F::lit(0.3) * (F::two() * t).sin() + F::lit(0.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time_grid::{sample_ensemble_noise, JumpMeasure};

    fn grid() -> TimeGrid<f64> {
        TimeGrid::new(1.0, 0.4, 20).unwrap()
    }

    #[test]
    fn zero_forcing_stays_at_zero() {
        let r = solve_riccati(0.3, 0.0, |_| 0.2, 0.0, &grid(), 4).unwrap();
        assert!(r.gamma.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn tanh_closed_form() {
        let (beta, sigma) = (0.2, 0.3);
        let g = grid();
        let r = solve_riccati(0.0, beta, |_| sigma, 0.0, &g, RICCATI_SUBSTEPS).unwrap();
        let exact = sigma * beta * (beta * 1.0 / sigma).tanh();
        assert!((r.gamma[g.steps()] - exact).abs() / exact < 1e-6);
    }

    #[test]
    fn nonpositive_volatility_is_rejected() {
        assert!(solve_riccati(0.1, 0.2, |t| t - 0.5, 0.05, &grid(), 4).is_err());
        assert!(solve_riccati(0.1, 0.2, |_| 0.3, -1.0, &grid(), 4).is_err());
    }

    #[test]
    fn comparison_in_beta() {
        let g = grid();
        let lo = solve_riccati(0.1, 0.1, market_volatility, 0.05, &g, 8).unwrap();
        let hi = solve_riccati(0.1, 0.3, market_volatility, 0.05, &g, 8).unwrap();
        assert!(lo.gamma.iter().zip(&hi.gamma).skip(1).all(|(a, b)| a < b));
    }

    #[test]
    fn midpoint_residual_is_small() {
        let g = grid();
        let r = solve_riccati(0.1, 0.2, market_volatility, 0.05, &g, 8).unwrap();
        assert!(r.midpoint_residual(&g, market_volatility) < 5.0 * g.dt());
    }

    #[test]
    fn zero_gain_is_deterministic_growth() {
        let g = grid();
        let r = solve_riccati(0.5, 0.0, |_| 0.2, 0.0, &g, 4).unwrap();
        let a = run_kalman_bucy(&r, &vec![0.3; g.steps()], 0.15, &g).unwrap();
        let b = run_kalman_bucy(&r, &vec![-7.0; g.steps()], 0.15, &g).unwrap();
        assert_eq!(a.mu_hat, b.mu_hat);
        let exact = 0.15 * (0.5f64).exp();
        assert!((a.mu_hat[g.steps()] - exact).abs() / exact < 0.5 * g.dt());
    }

    #[test]
    fn filter_is_affine_in_observations() {
        let g = grid();
        let r = solve_riccati(0.1, 0.2, market_volatility, 0.05, &g, 8).unwrap();
        let a: Vec<f64> = (0..g.steps()).map(|k| 0.01 * (k as f64).sin()).collect();
        let b: Vec<f64> = (0..g.steps()).map(|k| 0.02 * (k as f64 * 0.3).cos()).collect();
        let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let zero = vec![0.0; g.steps()];
        let run = |obs: &[f64]| run_kalman_bucy(&r, obs, 0.15, &g).unwrap().mu_hat;
        let (fa, fb, fab, f0) = (run(&a), run(&b), run(&ab), run(&zero));
        for k in 0..g.nodes() {
            assert!((fab[k] - (fa[k] + fb[k] - f0[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn filter_variance_tracks_riccati() {
        let g = grid();
        let spec = MarketSpec { alpha: 0.1, beta: 0.2, prior_mean: 0.15, prior_variance: 0.05 };
        let r = solve_riccati(spec.alpha, spec.beta, market_volatility, spec.prior_variance, &g, RICCATI_SUBSTEPS).unwrap();
        let noise = sample_ensemble_noise(&g, 11, 10_000, &JumpMeasure::none()).unwrap();
        let fe = filter_ensemble(&spec, r, &g, &noise, 11).unwrap();
        let ratio = fe.variance_tracking_ratio();
        assert!((ratio - 1.0).abs() < 0.1, "ratio {ratio}");
        assert!(fe.innovation_reconstruction_error(&g) < 1e-12);
    }

    #[test]
    fn exact_filter_without_drift_noise() {
        let g = grid();
        let spec = MarketSpec { alpha: 0.1, beta: 0.0, prior_mean: 0.15, prior_variance: 0.0 };
        let r = solve_riccati(spec.alpha, spec.beta, market_volatility, 0.0, &g, 4).unwrap();
        let noise = sample_ensemble_noise(&g, 12, 50, &JumpMeasure::none()).unwrap();
        let fe = filter_ensemble(&spec, r, &g, &noise, 12).unwrap();
        for p in 0..50 {
            assert!(fe.mu.row(p).iter().zip(fe.mu_hat.row(p)).all(|(a, b)| (a - b).abs() < 1e-14));
        }
    }
}
