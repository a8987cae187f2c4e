//! Controlled delay system: coefficients with their first and second
//! partials, costs, observation drift, initial segments and admissible controls.
//!
//! Coefficients are evaluated at a [`Point`] and return a [`Jet`]: value,
//! gradient and Hessian in the four arguments `(x, x′, v, v′)`.

use std::fmt;
use std::sync::Arc;


use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::time_grid::{JumpMeasure, SeedSpec, TimeGrid};

/// Argument slots of a [`Jet`].
pub const X: usize = 0;
pub const X_LAG: usize = 1;
pub const V: usize = 2;
pub const V_LAG: usize = 3;
pub const ARG_NAMES: [&str; 4] = ["x", "x'", "v", "v'"];

/// Evaluation point `(t, x(t), x(t−δ), v(t), v(t−δ))`.
///
/// `factor` carries an exogenous observation-adapted statistic (for instance a
/// filtered mean); coefficients may read it but it is never differentiated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point<F> {
    pub t: F,
    pub x: F,
    pub x_lag: F,
    pub v: F,
    pub v_lag: F,
    pub factor: F,
}

impl<F: Real> Point<F> {
    pub fn new(t: F, x: F, x_lag: F, v: F, v_lag: F) -> Self {
        Self { t, x, x_lag, v, v_lag, factor: F::zero() }
    }

    pub fn with_factor(mut self, factor: F) -> Self {
        self.factor = factor;
        self
    }

    pub fn arg(&self, i: usize) -> F {
        match i {
            X => self.x,
            X_LAG => self.x_lag,
            V => self.v,
            V_LAG => self.v_lag,
            _ => panic!("argument slot {i} out of range"),
        }
    }

    pub fn with_arg(mut self, i: usize, value: F) -> Self {
        match i {
            X => self.x = value,
            X_LAG => self.x_lag = value,
            V => self.v = value,
            V_LAG => self.v_lag = value,
            _ => panic!("argument slot {i} out of range"),
        }
        self
    }
}

/// Second-order jet in `(x, x′, v, v′)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet<F> {
    pub value: F,
    pub grad: [F; 4],
    pub hess: [[F; 4]; 4],
}

impl<F: Real> Jet<F> {
    pub fn zero() -> Self {
        Self::constant(F::zero())
    }

    pub fn constant(value: F) -> Self {
        Self { value, grad: [F::zero(); 4], hess: [[F::zero(); 4]; 4] }
    }

    /// Affine jet `value + Σ grad_i·(arg_i − p_i)` evaluated at the base point.
    pub fn affine(value: F, grad: [F; 4]) -> Self {
        Self { value, grad, hess: [[F::zero(); 4]; 4] }
    }

    /// Lift a univariate jet in `x` (slot 0).
    pub fn from_state(j: Jet1<F>) -> Self {
        let mut out = Self::constant(j.value);
        out.grad[X] = j.dx;
        out.hess[X][X] = j.dxx;
        out
    }

    pub fn add(&self, o: &Self) -> Self {
        let mut out = *self;
        out.value += o.value;
        for i in 0..4 {
            out.grad[i] += o.grad[i];
            for j in 0..4 {
                out.hess[i][j] += o.hess[i][j];
            }
        }
        out
    }

    pub fn scale(&self, c: F) -> Self {
        let mut out = *self;
        out.value *= c;
        for i in 0..4 {
            out.grad[i] *= c;
            for j in 0..4 {
                out.hess[i][j] *= c;
            }
        }
        out
    }

    pub fn sub(&self, o: &Self) -> Self {
        self.add(&o.scale(-F::one()))
    }

    /// Product rule up to second order.
    pub fn mul(&self, o: &Self) -> Self {
        let mut out = Self::constant(self.value * o.value);
        for i in 0..4 {
            out.grad[i] = self.grad[i] * o.value + self.value * o.grad[i];
            for j in 0..4 {
                out.hess[i][j] = self.hess[i][j] * o.value
                    + self.grad[i] * o.grad[j]
                    + self.grad[j] * o.grad[i]
                    + self.value * o.hess[i][j];
            }
        }
        out
    }

    /// First-order variation `∇f·d`.
    #[inline]
    pub fn directional(&self, d: &[F; 4]) -> F {
        (0..4).map(|i| self.grad[i] * d[i]).sum()
    }

    /// Quadratic form `dᵀ ∇²f d`.
    #[inline]
    pub fn quadratic(&self, d: &[F; 4]) -> F {
        let mut acc = F::zero();
        for i in 0..4 {
            for j in 0..4 {
                acc += self.hess[i][j] * d[i] * d[j];
            }
        }
        acc
    }
}

/// Second-order jet of a function of the state alone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet1<F> {
    pub value: F,
    pub dx: F,
    pub dxx: F,
}

impl<F: Real> Jet1<F> {
    pub fn new(value: F, dx: F, dxx: F) -> Self {
        Self { value, dx, dxx }
    }

    pub fn constant(value: F) -> Self {
        Self { value, dx: F::zero(), dxx: F::zero() }
    }
}

/// Convex control set `U = [lo, hi]`; either end may be infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlSet<F> {
    pub lo: F,
    pub hi: F,
}

impl<F: Real> ControlSet<F> {
    pub fn unbounded() -> Self {
        Self { lo: F::neg_infinity(), hi: F::infinity() }
    }

    pub fn interval(lo: F, hi: F) -> Result<Self> {
        if !(lo < hi) {
            return Err(Error::domain(format!("empty control set [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn is_bounded(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite()
    }

    pub fn contains(&self, v: F) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn project(&self, v: F) -> F {
        v.max(self.lo).min(self.hi)
    }

    pub fn is_interior(&self, v: F) -> bool {
        v > self.lo && v < self.hi
    }

    /// `points` equally spaced values covering `[lo, hi]`.
    pub fn grid(&self, points: usize) -> Result<Vec<F>> {
        if !self.is_bounded() {
            return Err(Error::domain("control grid requires a bounded control set"));
        }
        if points < 2 {
            return Err(Error::domain("control grid needs at least two points"));
        }
        let step = (self.hi - self.lo) / F::from_usize_lossy(points - 1);
        Ok((0..points).map(|i| self.lo + F::from_usize_lossy(i) * step).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivativeOrder {
    First,
    Second,
}

/// Controlled scalar delay jump-diffusion
///
/// ```text
/// dx = b dt + σ dB + θ dW + ∫ γ Ñ(dζ, dt),   dY = h(t, x) dt + dW,
/// J(v) = Ē[∫ ℓ(t, x, v, v′) dt + φ(x(T))]
/// ```
///
/// The jump coefficient is mark-linear: `γ(·, ζ) = jump_coefficient(·)·ζ`.
pub trait DelayModel<F: Real>: Send + Sync {
    fn name(&self) -> &str;

    fn delay(&self) -> F;

    /// `b`
    fn drift(&self, p: &Point<F>) -> Jet<F>;

    /// `σ`, loading on `dB`.
    fn diffusion(&self, p: &Point<F>) -> Jet<F>;

    /// `θ`, loading on the observation noise.
    fn observation_coupling(&self, p: &Point<F>) -> Jet<F>;

    /// `γ₀` in `γ = γ₀·ζ`.
    fn jump_coefficient(&self, _p: &Point<F>) -> Jet<F> {
        Jet::zero()
    }

    fn jump_measure(&self) -> JumpMeasure<F> {
        JumpMeasure::none()
    }

    /// `h(t, x)`.
    fn observation(&self, t: F, x: F) -> Jet1<F>;

    /// `ℓ(t, x, v, v′)`; the `x′` slot of the returned jet must be zero.
    fn running_cost(&self, p: &Point<F>) -> Jet<F>;

    /// `φ(x)`.
    fn terminal_cost(&self, x: F) -> Jet1<F>;

    /// `ξ(t)` on `[−δ, 0]`.
    fn initial_state(&self, t: F) -> F;

    /// `η(t)` on `[−δ, 0]`.
    fn initial_control(&self, t: F) -> F;

    fn control_set(&self) -> ControlSet<F> {
        ControlSet::unbounded()
    }

    fn order(&self) -> DerivativeOrder {
        DerivativeOrder::Second
    }

    /// Declared bound `|h| ≤ C`; `None` declares the moment-condition regime.
    fn observation_bound(&self) -> Option<F> {
        None
    }
}

/// Drift of the substituted state equation, `b̃ = b − θh`, as a jet.
pub fn tilde_b_jet<F: Real, M: DelayModel<F> + ?Sized>(model: &M, p: &Point<F>) -> Jet<F> {
    let h = Jet::from_state(model.observation(p.t, p.x));
    model.drift(p).sub(&model.observation_coupling(p).mul(&h))
}

/// `b̃(t, x, x′, v, v′) = b − θ·h(t, x)`.
pub fn tilde_b<F: Real, M: DelayModel<F> + ?Sized>(model: &M, p: &Point<F>) -> F {
    model.drift(p).value - model.observation_coupling(p).value * model.observation(p.t, p.x).value
}

/// What the controller sees at node `k`: the observation path up to `k` and
/// an observation-adapted statistic.
#[derive(Debug, Clone, Copy)]
pub struct ObservationView<'a, F> {
    pub k: usize,
    pub t: F,
    /// `Y_0..=Y_k`.
    pub y: &'a [F],
    pub factor: F,
}

/// Feedback map of observation-adapted quantities.
pub trait FeedbackLaw<F>: Send + Sync {
    fn control(&self, view: &ObservationView<'_, F>) -> F;
}

/// Admissible control: deterministic, or a feedback of observed statistics,
/// optionally shifted by a deterministic perturbation. Anything else would not
/// be adapted to the observation filtration and cannot be expressed.
#[derive(Clone)]
pub enum ControlProcess<F> {
    /// Values at nodes `0..=n`.
    OpenLoop(Vec<F>),
    Feedback(Arc<dyn FeedbackLaw<F>>),
    Shifted { base: Box<ControlProcess<F>>, shift: Vec<F> },
}

impl<F: Real> fmt::Debug for ControlProcess<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlProcess::OpenLoop(v) => f.debug_tuple("OpenLoop").field(&v.len()).finish(),
            ControlProcess::Feedback(_) => f.write_str("Feedback(..)"),
            ControlProcess::Shifted { base, .. } => f.debug_struct("Shifted").field("base", base).finish(),
        }
    }
}

impl<F: Real> ControlProcess<F> {
    pub fn constant(grid: &TimeGrid<F>, value: F) -> Self {
        ControlProcess::OpenLoop(vec![value; grid.nodes()])
    }

    pub fn from_fn(grid: &TimeGrid<F>, f: impl Fn(F) -> F) -> Self {
        ControlProcess::OpenLoop((0..grid.nodes()).map(|k| f(grid.time(k))).collect())
    }

    pub fn feedback(law: impl FeedbackLaw<F> + 'static) -> Self {
        ControlProcess::Feedback(Arc::new(law))
    }

    /// `u + eps·direction`, direction given at nodes `0..=n`.
    pub fn perturbed(&self, direction: &[F], eps: F) -> Self {
        ControlProcess::Shifted { base: Box::new(self.clone()), shift: direction.iter().map(|&d| eps * d).collect() }
    }

    /// Raw (unprojected) control value at the viewed node.
    pub fn value(&self, view: &ObservationView<'_, F>) -> F {
        match self {
            ControlProcess::OpenLoop(v) => v[view.k],
            ControlProcess::Feedback(law) => law.control(view),
            ControlProcess::Shifted { base, shift } => base.value(view) + shift[view.k],
        }
    }

    /// Shape and range checks that do not require a simulation.
    pub fn check(&self, grid: &TimeGrid<F>, set: &ControlSet<F>) -> Result<()> {
        match self {
            ControlProcess::OpenLoop(v) => {
                if v.len() != grid.nodes() {
                    return Err(Error::domain(format!(
                        "open-loop control needs {} node values, got {}",
                        grid.nodes(),
                        v.len()
                    )));
                }
                if let Some((k, &bad)) = v.iter().enumerate().find(|(_, &x)| !set.contains(x)) {
                    return Err(Error::domain(format!("control value {bad} at node {k} outside U")));
                }
                Ok(())
            }
            ControlProcess::Feedback(_) => Ok(()),
            ControlProcess::Shifted { base, shift } => {
                if shift.len() != grid.nodes() {
                    return Err(Error::domain(format!(
                        "control shift needs {} node values, got {}",
                        grid.nodes(),
                        shift.len()
                    )));
                }
                base.check(grid, &ControlSet::unbounded())
            }
        }
    }
}

/// Which observation regime the model declares.
#[derive(Debug, Clone, PartialEq)]
pub enum ObservationRegime {
    /// `|h| ≤ declared` required; `observed_max` over the samples.
    Bounded { declared: f64, observed_max: f64 },
    /// No bound declared: the density-moment condition must be checked empirically.
    MomentCondition { observed_max: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub samples: usize,
    /// Largest relative mismatch per partial, e.g. `("b_x", 3e-11)`.
    pub mismatches: Vec<(String, f64)>,
    pub worst_mismatch: f64,
    /// Largest `|f(p₁) − f(p₂)| / (|Δt|^{1/2} + Σ|Δarg|)` over random pairs.
    pub lipschitz: Vec<(String, f64)>,
    pub observation: ObservationRegime,
    pub tolerance: f64,
}

impl ValidationReport {
    pub fn offenders(&self) -> Vec<String> {
        let mut out: Vec<String> =
            self.mismatches.iter().filter(|(_, m)| *m > self.tolerance).map(|(n, _)| n.clone()).collect();
        if let ObservationRegime::Bounded { declared, observed_max } = self.observation {
            if observed_max > declared {
                out.push("h (bound)".into());
            }
        }
        out
    }
}

/// Default relative tolerance between analytic partials and central differences.
pub const DERIVATIVE_TOLERANCE: f64 = 1e-5;

/// Compare analytic partials with central differences at `sample_count`
/// seeded random points; reports Lipschitz ratios and the `h` regime.
///
/// Fails with [`Error::Validation`] naming every offending partial.
pub fn validate_model<F: Real, M: DelayModel<F> + ?Sized>(model: &M, sample_count: usize) -> Result<ValidationReport> {
    let report = inspect_model(model, sample_count, DERIVATIVE_TOLERANCE)?;
    let offenders = report.offenders();
    if offenders.is_empty() {
        Ok(report)
    } else {
        Err(Error::Validation { offenders, max_mismatch: report.worst_mismatch })
    }
}

type CoefFn<'a, F> = Box<dyn Fn(&Point<F>) -> Jet<F> + 'a>;

/// The report behind [`validate_model`] without the pass/fail decision.
pub fn inspect_model<F: Real, M: DelayModel<F> + ?Sized>(
    model: &M,
    sample_count: usize,
    tolerance: f64,
) -> Result<ValidationReport> {
    if sample_count == 0 {
        return Err(Error::domain("validation needs at least one sample"));
    }
    let mut rng = SeedSpec::new(0x005e_ed0f_u64, 0).rng();
    let set = model.control_set();
    let span = F::two();
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> F { span * (F::two() * F::unit_uniform(rng) - F::one()) };
    let draw_v = |rng: &mut rand_chacha::ChaCha8Rng| -> F {
        if set.is_bounded() {
            let u = F::unit_uniform(rng);
            // stay strictly inside so central differences do not leave U
            let pad = (set.hi - set.lo) * F::lit(0.01);
            set.lo + pad + u * (set.hi - set.lo - pad - pad)
        } else {
            span * (F::two() * F::unit_uniform(rng) - F::one())
        }
    };
    let points: Vec<Point<F>> = (0..sample_count * 2)
        .map(|_| {
            let t = F::unit_uniform(&mut rng);
            Point::new(t, draw(&mut rng), draw(&mut rng), draw_v(&mut rng), draw_v(&mut rng))
        })
        .collect();

    let second = model.order() == DerivativeOrder::Second;
    let eps = F::epsilon().cbrt();
    let rel = |analytic: F, numeric: F| -> f64 {
        ((analytic - numeric).abs() / F::one().max(numeric.abs())).to_f64_lossy()
    };

    let coefficients: Vec<(&str, CoefFn<'_, F>)> = vec![
        ("b", Box::new(|p| model.drift(p))),
        ("sigma", Box::new(|p| model.diffusion(p))),
        ("theta", Box::new(|p| model.observation_coupling(p))),
        ("gamma", Box::new(|p| model.jump_coefficient(p))),
        ("ell", Box::new(|p| model.running_cost(p))),
    ];

    let mut mismatches = Vec::new();
    let mut lipschitz = Vec::new();
    for (name, f) in &coefficients {
        let mut grad_err = [0.0_f64; 4];
        let mut hess_err = [[0.0_f64; 4]; 4];
        let mut lip = 0.0_f64;
        for p in points.iter().take(sample_count) {
            let jet = f(p);
            for i in 0..4 {
                let h = eps * F::one().max(p.arg(i).abs());
                let up = f(&p.with_arg(i, p.arg(i) + h));
                let dn = f(&p.with_arg(i, p.arg(i) - h));
                let fd = (up.value - dn.value) / (h + h);
                grad_err[i] = grad_err[i].max(rel(jet.grad[i], fd));
                if second {
                    for j in 0..4 {
                        let fd2 = (up.grad[j] - dn.grad[j]) / (h + h);
                        hess_err[i][j] = hess_err[i][j].max(rel(jet.hess[i][j], fd2));
                    }
                }
            }
        }
        for pair in points.chunks(2).take(sample_count) {
            let (a, b) = (&pair[0], &pair[1]);
            let dist = (a.t - b.t).abs().sqrt() + (0..4).map(|i| (a.arg(i) - b.arg(i)).abs()).sum::<F>();
            if dist > F::zero() {
                lip = lip.max(((f(a).value - f(b).value).abs() / dist).to_f64_lossy());
            }
        }
        for i in 0..4 {
            mismatches.push((format!("{name}_{}", ARG_NAMES[i]), grad_err[i]));
        }
        if second {
            for i in 0..4 {
                for j in i..4 {
                    mismatches.push((format!("{name}_{}{}", ARG_NAMES[i], ARG_NAMES[j]), hess_err[i][j].max(hess_err[j][i])));
                }
            }
        }
        if *name != "ell" {
            lipschitz.push((name.to_string(), lip));
        }
    }

    // Univariate h and φ.
    let mut h_err = (0.0_f64, 0.0_f64);
    let mut phi_err = (0.0_f64, 0.0_f64);
    let mut h_max = 0.0_f64;
    for p in points.iter().take(sample_count) {
        let hx = eps * F::one().max(p.x.abs());
        let jet = model.observation(p.t, p.x);
        let up = model.observation(p.t, p.x + hx);
        let dn = model.observation(p.t, p.x - hx);
        h_err.0 = h_err.0.max(rel(jet.dx, (up.value - dn.value) / (hx + hx)));
        h_err.1 = h_err.1.max(rel(jet.dxx, (up.dx - dn.dx) / (hx + hx)));
        h_max = h_max.max(jet.value.abs().to_f64_lossy());

        let jet = model.terminal_cost(p.x);
        let up = model.terminal_cost(p.x + hx);
        let dn = model.terminal_cost(p.x - hx);
        phi_err.0 = phi_err.0.max(rel(jet.dx, (up.value - dn.value) / (hx + hx)));
        phi_err.1 = phi_err.1.max(rel(jet.dxx, (up.dx - dn.dx) / (hx + hx)));
    }
    mismatches.push(("h_x".into(), h_err.0));
    mismatches.push(("phi_x".into(), phi_err.0));
    if second {
        mismatches.push(("h_xx".into(), h_err.1));
        mismatches.push(("phi_xx".into(), phi_err.1));
    }

    let worst_mismatch = mismatches.iter().map(|m| m.1).fold(0.0, f64::max);
    let observation = match model.observation_bound() {
        Some(c) => ObservationRegime::Bounded { declared: c.to_f64_lossy(), observed_max: h_max },
        None => ObservationRegime::MomentCondition { observed_max: h_max },
    };
    Ok(ValidationReport { samples: sample_count, mismatches, worst_mismatch, lipschitz, observation, tolerance })
}
