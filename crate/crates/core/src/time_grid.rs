//! Uniform time grid aligned to the delay, per-path driving noise and the
//! seeded randomness contract.
//!
//! Node `k` sits at time `k·dt`, computed from the integer index on demand.
//! The delay is exactly `m` steps, so the node holding `t − δ` for node `k`
//! is `k − m`; negative indices address the initial segment on `[−δ, 0]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid<F> {
    horizon: F,
    delay: F,
    steps_per_delay: usize,
    steps: usize,
    dt: F,
}

/// Where a delayed argument `t_k − δ` lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lagged {
    /// Index into the initial segment (`0..=m`, time `(j − m)·dt`).
    Segment(usize),
    /// Evolution node index.
    Node(usize),
}

impl<F: Real> TimeGrid<F> {
    /// Build the grid `dt = delta / m`, `n = horizon / dt`.
    pub fn new(horizon: F, delta: F, m: usize) -> Result<Self> {
        if !(horizon > F::zero()) || !horizon.is_finite() {
            return Err(Error::domain(format!("horizon must be positive, got {horizon}")));
        }
        if !(delta > F::zero()) || !delta.is_finite() {
            return Err(Error::domain(format!("delay must be positive, got {delta}")));
        }
        if m == 0 {
            return Err(Error::domain("steps per delay must be at least 1"));
        }
        let dt = delta / F::from_usize_lossy(m);
        let ratio = horizon / dt;
        let steps = ratio.round();
        let tol = F::lit(1e-12).max(F::lit(16.0) * F::epsilon()) * F::one().max(ratio);
        if (ratio - steps).abs() > tol {
            return Err(Error::Alignment {
                horizon: horizon.to_f64_lossy(),
                dt: dt.to_f64_lossy(),
                ratio: ratio.to_f64_lossy(),
            });
        }
        let steps = steps.to_usize().ok_or_else(|| Error::domain("step count overflow"))?;
        if steps < m {
            return Err(Error::domain(format!(
                "horizon {horizon} shorter than delay {delta}: need n ≥ m ({steps} < {m})"
            )));
        }
        Ok(Self { horizon, delay: delta, steps_per_delay: m, steps, dt })
    }

    /// Grid with a fixed step: `m = delta / dt` must be integral.
    pub fn with_step(horizon: F, delta: F, dt: F) -> Result<Self> {
        if !(dt > F::zero()) {
            return Err(Error::domain(format!("step must be positive, got {dt}")));
        }
        let ratio = delta / dt;
        let m = ratio.round();
        let tol = F::lit(1e-9).max(F::lit(16.0) * F::epsilon()) * F::one().max(ratio);
        if (ratio - m).abs() > tol || m < F::one() {
            return Err(Error::Alignment {
                horizon: delta.to_f64_lossy(),
                dt: dt.to_f64_lossy(),
                ratio: ratio.to_f64_lossy(),
            });
        }
        Self::new(horizon, delta, m.to_usize().unwrap_or(0))
    }

    /// Same horizon and delay with `factor` times as many steps.
    pub fn refined(&self, factor: usize) -> Result<Self> {
        Self::new(self.horizon, self.delay, self.steps_per_delay * factor)
    }

    #[inline]
    pub fn horizon(&self) -> F {
        self.horizon
    }

    #[inline]
    pub fn delay(&self) -> F {
        self.delay
    }

    /// `m`: steps per delay, also the index shift of `t − δ`.
    #[inline]
    pub fn delay_shift(&self) -> usize {
        self.steps_per_delay
    }

    /// `n`: number of evolution steps; nodes are `0..=n`.
    #[inline]
    pub fn steps(&self) -> usize {
        self.steps
    }

    #[inline]
    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    #[inline]
    pub fn dt(&self) -> F {
        self.dt
    }

    #[inline]
    pub fn time(&self, k: usize) -> F {
        F::from_usize_lossy(k) * self.dt
    }

    /// Time of a segment node `j ∈ 0..=m`, i.e. `(j − m)·dt ∈ [−δ, 0]`.
    #[inline]
    pub fn segment_time(&self, j: usize) -> F {
        -(F::from_usize_lossy(self.steps_per_delay - j) * self.dt)
    }

    /// Location of `t_k − δ`.
    #[inline]
    pub fn lagged(&self, k: usize) -> Lagged {
        if k >= self.steps_per_delay {
            Lagged::Node(k - self.steps_per_delay)
        } else {
            Lagged::Segment(k)
        }
    }

    /// Node index of `t_k + δ`, `None` beyond the horizon.
    #[inline]
    pub fn advanced(&self, k: usize) -> Option<usize> {
        let j = k + self.steps_per_delay;
        (j <= self.steps).then_some(j)
    }

    /// Step `k` such that `t_k < tau ≤ t_{k+1}`.
    pub fn step_containing(&self, tau: F) -> usize {
        let raw = (tau / self.dt).ceil().to_usize().unwrap_or(0);
        raw.saturating_sub(1).min(self.steps - 1)
    }
}

/// Mark distribution `ν₀` of the finite-activity jump measure `λ·ν₀(dζ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MarkDistribution<F> {
    /// Unit mass at the given mark value.
    Constant(F),
    /// Uniform on `[−1, 1]`.
    UniformSymmetric,
}

impl<F: Real> MarkDistribution<F> {
    pub fn mean(&self) -> F {
        match *self {
            MarkDistribution::Constant(c) => c,
            MarkDistribution::UniformSymmetric => F::zero(),
        }
    }

    pub fn second_moment(&self) -> F {
        match *self {
            MarkDistribution::Constant(c) => c * c,
            MarkDistribution::UniformSymmetric => F::one() / F::lit(3.0),
        }
    }

    fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> F {
        match *self {
            MarkDistribution::Constant(c) => c,
            MarkDistribution::UniformSymmetric => F::two() * F::unit_uniform(rng) - F::one(),
        }
    }
}

/// Jump measure `ν(dζ) = λ·ν₀(dζ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpMeasure<F> {
    pub intensity: F,
    pub marks: MarkDistribution<F>,
}

impl<F: Real> JumpMeasure<F> {
    pub fn none() -> Self {
        Self { intensity: F::zero(), marks: MarkDistribution::Constant(F::one()) }
    }

    /// `∫ ζ ν(dζ)`, the compensator rate of a mark-linear jump coefficient.
    pub fn compensator(&self) -> F {
        self.intensity * self.marks.mean()
    }

    /// `∫ ζ² ν(dζ)`.
    pub fn quadratic_rate(&self) -> F {
        self.intensity * self.marks.second_moment()
    }

    pub fn is_active(&self) -> bool {
        self.intensity > F::zero()
    }
}

/// `(master_seed, path_index)`; the per-path stream depends on nothing else.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedSpec {
    pub master_seed: u64,
    pub path_index: u64,
}

impl SeedSpec {
    pub fn new(master_seed: u64, path_index: u64) -> Self {
        Self { master_seed, path_index }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.path_index);
        rng
    }
}

/// Driving noise of one path.
///
/// `db` drives the state diffusion, `dw` is the second driver: under the
/// reference measure it is the observation increment `dY`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath<F> {
    pub db: Vec<F>,
    pub dw: Vec<F>,
    /// `(time, mark)` pairs, times strictly increasing in `(0, T]`.
    pub jumps: Vec<(F, F)>,
    mark_sums: Vec<F>,
}

impl<F: Real> NoisePath<F> {
    /// Assemble a path from explicit increments; jump marks are binned per step.
    pub fn from_parts(grid: &TimeGrid<F>, db: Vec<F>, dw: Vec<F>, jumps: Vec<(F, F)>) -> Result<Self> {
        let n = grid.steps();
        if db.len() != n || dw.len() != n {
            return Err(Error::domain(format!(
                "noise increments must have length {n}, got dB={} dW={}",
                db.len(),
                dw.len()
            )));
        }
        let mut mark_sums = vec![F::zero(); n];
        let mut last = F::zero();
        for &(tau, mark) in &jumps {
            if !(tau > last) || tau > grid.horizon() {
                return Err(Error::domain(format!("jump time {tau} out of order or outside (0, T]")));
            }
            last = tau;
            mark_sums[grid.step_containing(tau)] += mark;
        }
        Ok(Self { db, dw, jumps, mark_sums })
    }

    /// Sum of marks of the jumps falling in step `k`, i.e. `∫ζ N(dζ, (t_k, t_{k+1}])`.
    #[inline]
    pub fn mark_sum(&self, k: usize) -> F {
        self.mark_sums[k]
    }

    pub fn steps(&self) -> usize {
        self.db.len()
    }
}

/// Draw one noise path. Order of draws: all `dB`, all `dW`, then jumps.
pub fn sample_noise<F: Real>(grid: &TimeGrid<F>, seed: SeedSpec, jumps: &JumpMeasure<F>) -> Result<NoisePath<F>> {
    if jumps.intensity < F::zero() || !jumps.intensity.is_finite() {
        return Err(Error::domain(format!("jump intensity must be non-negative, got {}", jumps.intensity)));
    }
    let mut rng = seed.rng();
    let n = grid.steps();
    let sd = grid.dt().sqrt();
    let db: Vec<F> = (0..n).map(|_| sd * F::standard_normal(&mut rng)).collect();
    let dw: Vec<F> = (0..n).map(|_| sd * F::standard_normal(&mut rng)).collect();
    let mut events = Vec::new();
    if jumps.is_active() {
        let mut tau = F::zero();
        loop {
            let u = F::unit_uniform(&mut rng);
            let gap = -(F::one() - u).ln() / jumps.intensity;
            if !(gap > F::zero()) {
                continue;
            }
            tau += gap;
            if tau > grid.horizon() {
                break;
            }
            events.push((tau, jumps.marks.sample(&mut rng)));
        }
    }
    NoisePath::from_parts(grid, db, dw, events)
}

/// Noise for paths `0..n_paths`, sampled in parallel; output ordered by path index.
pub fn sample_ensemble_noise<F: Real>(
    grid: &TimeGrid<F>,
    master_seed: u64,
    n_paths: usize,
    jumps: &JumpMeasure<F>,
) -> Result<Vec<NoisePath<F>>> {
    use rayon::prelude::*;
    (0..n_paths)
        .into_par_iter()
        .map(|p| sample_noise(grid, SeedSpec::new(master_seed, p as u64), jumps))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grid_examples() {
        let g = TimeGrid::new(1.0_f64, 0.5, 5).unwrap();
        assert!((g.dt() - 0.1).abs() < 1e-15);
        assert_eq!(g.steps(), 10);
        assert_eq!(g.delay_shift(), 5);

        let g = TimeGrid::new(1.0_f64, 0.4, 4).unwrap();
        assert!((g.dt() - 0.1).abs() < 1e-15);
        assert_eq!(g.steps(), 10);
        assert_eq!(g.delay_shift(), 4);

        assert!(matches!(TimeGrid::new(1.0_f64, 0.3, 4), Err(Error::Alignment { .. })));
    }

    #[test]
    fn grid_domain_errors() {
        assert!(matches!(TimeGrid::new(0.0_f64, 0.5, 5), Err(Error::Domain(_))));
        assert!(matches!(TimeGrid::new(1.0_f64, -0.5, 5), Err(Error::Domain(_))));
        assert!(matches!(TimeGrid::new(1.0_f64, 0.5, 0), Err(Error::Domain(_))));
        assert!(matches!(TimeGrid::new(0.2_f64, 0.5, 5), Err(Error::Domain(_))));
    }

    #[test]
    fn fixed_step_grid() {
        let g = TimeGrid::with_step(1.0_f64, 0.38, 0.02).unwrap();
        assert_eq!(g.delay_shift(), 19);
        assert_eq!(g.steps(), 50);
        assert!(TimeGrid::with_step(1.0_f64, 0.39, 0.02).is_err());
    }

    #[test]
    fn segment_and_lag_lookup() {
        let g = TimeGrid::new(1.0_f64, 0.5, 5).unwrap();
        assert_eq!(g.lagged(3), Lagged::Segment(3));
        assert_eq!(g.lagged(5), Lagged::Node(0));
        assert_eq!(g.lagged(10), Lagged::Node(5));
        assert!((g.segment_time(0) + 0.5).abs() < 1e-15);
        assert_eq!(g.segment_time(5), 0.0);
        assert_eq!(g.advanced(5), Some(10));
        assert_eq!(g.advanced(6), None);
        assert_eq!(g.step_containing(0.1), 0);
        assert_eq!(g.step_containing(0.1000001), 1);
        assert_eq!(g.step_containing(1.0), 9);
    }

    #[test]
    fn zero_intensity_has_no_jumps() {
        let g = TimeGrid::new(1.0_f64, 0.5, 5).unwrap();
        let p = sample_noise(&g, SeedSpec::new(1, 0), &JumpMeasure::none()).unwrap();
        assert!(p.jumps.is_empty());
        assert!((0..g.steps()).all(|k| p.mark_sum(k) == 0.0));
    }

    #[test]
    fn negative_intensity_rejected() {
        let g = TimeGrid::new(1.0_f64, 0.5, 5).unwrap();
        let jm = JumpMeasure { intensity: -1.0, marks: MarkDistribution::Constant(1.0) };
        assert!(sample_noise(&g, SeedSpec::new(1, 0), &jm).is_err());
    }

    #[test]
    fn same_seed_same_path() {
        let g = TimeGrid::new(1.0_f64, 0.25, 5).unwrap();
        let jm = JumpMeasure { intensity: 3.0, marks: MarkDistribution::UniformSymmetric };
        let a = sample_noise(&g, SeedSpec::new(42, 7), &jm).unwrap();
        let b = sample_noise(&g, SeedSpec::new(42, 7), &jm).unwrap();
        assert_eq!(a, b);
        let c = sample_noise(&g, SeedSpec::new(42, 8), &jm).unwrap();
        assert_ne!(a.db, c.db);
    }

    #[test]
    fn parallel_ensemble_matches_sequential() {
        let g = TimeGrid::new(1.0_f64, 0.25, 5).unwrap();
        let jm = JumpMeasure { intensity: 2.0, marks: MarkDistribution::Constant(1.0) };
        let par = sample_ensemble_noise(&g, 9, 64, &jm).unwrap();
        for (p, path) in par.iter().enumerate() {
            assert_eq!(path, &sample_noise(&g, SeedSpec::new(9, p as u64), &jm).unwrap());
        }
    }

    #[test]
    fn jumps_ordered_and_binned() {
        let g = TimeGrid::new(2.0_f64, 0.5, 10).unwrap();
        let jm = JumpMeasure { intensity: 5.0, marks: MarkDistribution::UniformSymmetric };
        let mut total = 0usize;
        for i in 0..200 {
            let p = sample_noise(&g, SeedSpec::new(3, i), &jm).unwrap();
            for w in p.jumps.windows(2) {
                assert!(w[0].0 < w[1].0);
            }
            for &(tau, mark) in &p.jumps {
                assert!(tau > 0.0 && tau <= 2.0);
                assert!((-1.0..=1.0).contains(&mark));
            }
            let binned: f64 = (0..g.steps()).map(|k| p.mark_sum(k)).sum();
            let direct: f64 = p.jumps.iter().map(|j| j.1).sum();
            assert!((binned - direct).abs() < 1e-12);
            total += p.jumps.len();
        }
        // Poisson(10) per path, 200 paths: mean count within 4 SE of 10.
        let mean = total as f64 / 200.0;
        assert!((mean - 10.0).abs() < 4.0 * (10.0_f64 / 200.0).sqrt(), "mean jumps {mean}");
    }

    #[test]
    fn brownian_increment_statistics() {
        // Sum of dB over [0, T] is N(0, T); mean over N paths within 4·sqrt(T/N).
        let g = TimeGrid::new(1.0_f64, 0.5, 5).unwrap();
        let n_paths = 100_000;
        let paths = sample_ensemble_noise(&g, 2024, n_paths, &JumpMeasure::none()).unwrap();
        let mean_total: f64 = paths.iter().map(|p| p.db.iter().sum::<f64>()).sum::<f64>() / n_paths as f64;
        assert!(mean_total.abs() < 4.0 * (1.0 / n_paths as f64).sqrt(), "mean {mean_total}");

        // Empirical variance of individual increments within 5% of dt.
        let entries: Vec<f64> = paths.iter().take(10_000).flat_map(|p| p.db.iter().chain(&p.dw).copied()).collect();
        let var = entries.iter().map(|e| e * e).sum::<f64>() / entries.len() as f64;
        assert!((var / g.dt() - 1.0).abs() < 0.05, "var {var}");
    }

    proptest! {
        #[test]
        fn lag_shift_is_exact(m in 1usize..40, mult in 1usize..6, k_frac in 0.0f64..1.0) {
            let delta = 0.37;
            let n = m * mult;
            let g = TimeGrid::new(delta * mult as f64, delta, m).unwrap();
            prop_assert_eq!(g.steps(), n);
            let k = ((n as f64) * k_frac) as usize;
            match g.lagged(k) {
                Lagged::Node(j) => prop_assert_eq!(j + m, k),
                Lagged::Segment(j) => {
                    prop_assert!(k < m);
                    prop_assert_eq!(j, k);
                }
            }
            // time of node k − m equals t_k − δ up to rounding of k·dt.
            let lagged_time = g.time(k) - delta;
            let expected = if k >= m { g.time(k - m) } else { g.segment_time(k) };
            prop_assert!((lagged_time - expected).abs() < 1e-12);
        }
    }
}
