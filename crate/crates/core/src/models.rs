//! Concrete models: the two worked examples and the small test models the
//! acceptance suite and benches share.

use crate::error::Result;
use crate::filtering::market_volatility;
use crate::model::{ControlSet, DelayModel, DerivativeOrder, Jet, Jet1, Point, V, X, X_LAG};
use crate::scalar::Real;
use crate::time_grid::JumpMeasure;

/// Nonlinear delay state with jumps observed through `cos x`:
///
/// ```text
/// dx = (sin x + a x′ + b v) dt + σ₀ x dB + θ dW + γ ∫ ζ Ñ(dζ, dt)
/// dY = cos x dt + dW,   ℓ = c v²,   φ = x
/// ```
///
/// `c = −1` makes the `v`-problem concave; `c = +1` is the literal
/// objective, whose maximiser sits on the boundary of `U`.
#[derive(Debug, Clone)]
pub struct Example1<F> {
    pub a: F,
    pub b: F,
    pub sigma0: F,
    pub theta: F,
    pub jump_gamma: F,
    pub jumps: JumpMeasure<F>,
    pub cost_sign: F,
    pub delay: F,
    pub x0: F,
    pub controls: ControlSet<F>,
}

impl<F: Real> Example1<F> {
    pub fn new(delay: F) -> Result<Self> {
        Ok(Self {
            a: F::half(),
            b: F::one(),
            sigma0: F::lit(0.2),
            theta: F::lit(0.3),
            jump_gamma: F::lit(0.1),
            jumps: JumpMeasure::none(),
            cost_sign: -F::one(),
            delay,
            x0: F::one(),
            controls: ControlSet::interval(F::lit(-2.0), F::two())?,
        })
    }
}

impl<F: Real> DelayModel<F> for Example1<F> {
    fn name(&self) -> &str {
        "example1"
    }

    fn delay(&self) -> F {
        self.delay
    }

    fn drift(&self, p: &Point<F>) -> Jet<F> {
        let mut j = Jet::affine(p.x.sin() + self.a * p.x_lag + self.b * p.v, [p.x.cos(), self.a, self.b, F::zero()]);
        j.hess[X][X] = -p.x.sin();
        j
    }

    fn diffusion(&self, p: &Point<F>) -> Jet<F> {
        Jet::affine(self.sigma0 * p.x, [self.sigma0, F::zero(), F::zero(), F::zero()])
    }

    fn observation_coupling(&self, _p: &Point<F>) -> Jet<F> {
        Jet::constant(self.theta)
    }

    fn jump_coefficient(&self, _p: &Point<F>) -> Jet<F> {
        Jet::constant(self.jump_gamma)
    }

    fn jump_measure(&self) -> JumpMeasure<F> {
        self.jumps
    }

    fn observation(&self, _t: F, x: F) -> Jet1<F> {
        Jet1::new(x.cos(), -x.sin(), -x.cos())
    }

    fn running_cost(&self, p: &Point<F>) -> Jet<F> {
        let c = self.cost_sign;
        let mut j = Jet::affine(c * p.v * p.v, [F::zero(), F::zero(), F::two() * c * p.v, F::zero()]);
        j.hess[V][V] = F::two() * c;
        j
    }

    fn terminal_cost(&self, x: F) -> Jet1<F> {
        Jet1::new(x, F::one(), F::zero())
    }

    fn initial_state(&self, _t: F) -> F {
        self.x0
    }

    fn initial_control(&self, _t: F) -> F {
        F::zero()
    }

    fn control_set(&self) -> ControlSet<F> {
        self.controls
    }

    fn observation_bound(&self) -> Option<F> {
        Some(F::one())
    }
}

/// Scale of the investment objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostConvention {
    /// `½E[∫ −(v − a)² dt + x(T)]`
    Half,
    /// `E[∫ −(v − a)² dt + x(T)]`
    Sum,
}

impl CostConvention {
    pub fn scale<F: Real>(&self) -> F {
        match self {
            CostConvention::Half => F::half(),
            CostConvention::Sum => F::one(),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            CostConvention::Half => "half",
            CostConvention::Sum => "sum",
        }
    }
}

/// Wealth with delayed bond credit, after the separation principle: the
/// filtered drift `μ̂` is the ensemble factor and the innovation drives the
/// observation slot with `h = 0`.
///
/// ```text
/// dx = (r₀ (x′ − v) + μ̂ v) dt + σ(t) v dν,   ℓ = −s (v − a(t))²,   φ = s x
/// ```
#[derive(Debug, Clone)]
pub struct Example2<F> {
    pub r0: F,
    pub delay: F,
    pub x0: F,
    /// `a(t) = a_slope·t`.
    pub a_slope: F,
    pub convention: CostConvention,
}

impl<F: Real> Example2<F> {
    pub fn new(delay: F) -> Self {
        Self { r0: F::lit(0.05), delay, x0: F::one(), a_slope: F::lit(0.1), convention: CostConvention::Half }
    }

    pub fn target(&self, t: F) -> F {
        self.a_slope * t
    }

    pub fn volatility(&self, t: F) -> F {
        market_volatility(t)
    }

    fn s(&self) -> F {
        self.convention.scale()
    }

    /// Pointwise maximiser of the Hamiltonian:
    /// `v = a + ((μ̂ − r₀) q + σ r̄) / 2s`.
    pub fn optimal_control(&self, t: F, mu_hat: F, q: F, r_bar: F) -> F {
        self.target(t) + ((mu_hat - self.r0) * q + self.volatility(t) * r_bar) / (F::two() * self.s())
    }
}

impl<F: Real> DelayModel<F> for Example2<F> {
    fn name(&self) -> &str {
        "example2"
    }

    fn delay(&self) -> F {
        self.delay
    }

    fn drift(&self, p: &Point<F>) -> Jet<F> {
        Jet::affine(
            self.r0 * (p.x_lag - p.v) + p.factor * p.v,
            [F::zero(), self.r0, p.factor - self.r0, F::zero()],
        )
    }

    fn diffusion(&self, _p: &Point<F>) -> Jet<F> {
        Jet::zero()
    }

    fn observation_coupling(&self, p: &Point<F>) -> Jet<F> {
        let s = self.volatility(p.t);
        Jet::affine(s * p.v, [F::zero(), F::zero(), s, F::zero()])
    }

    fn observation(&self, _t: F, _x: F) -> Jet1<F> {
        Jet1::constant(F::zero())
    }

    fn running_cost(&self, p: &Point<F>) -> Jet<F> {
        let s = self.s();
        let d = p.v - self.target(p.t);
        let mut j = Jet::affine(-s * d * d, [F::zero(), F::zero(), -F::two() * s * d, F::zero()]);
        j.hess[V][V] = -F::two() * s;
        j
    }

    fn terminal_cost(&self, x: F) -> Jet1<F> {
        Jet1::new(self.s() * x, self.s(), F::zero())
    }

    fn initial_state(&self, _t: F) -> F {
        self.x0
    }

    fn initial_control(&self, _t: F) -> F {
        F::zero()
    }

    fn observation_bound(&self) -> Option<F> {
        Some(F::zero())
    }
}

/// `dx = x(t − δ) dt`, `ξ ≡ 1`, no noise, no cost.
#[derive(Debug, Clone, Copy)]
pub struct DelayOde<F> {
    pub delay: F,
}

impl<F: Real> DelayModel<F> for DelayOde<F> {
    fn name(&self) -> &str {
        "delay-ode"
    }
    fn delay(&self) -> F {
        self.delay
    }
    fn drift(&self, p: &Point<F>) -> Jet<F> {
        Jet::affine(p.x_lag, [F::zero(), F::one(), F::zero(), F::zero()])
    }
    fn diffusion(&self, _p: &Point<F>) -> Jet<F> {
        Jet::zero()
    }
    fn observation_coupling(&self, _p: &Point<F>) -> Jet<F> {
        Jet::zero()
    }
    fn observation(&self, _t: F, _x: F) -> Jet1<F> {
        Jet1::constant(F::zero())
    }
    fn running_cost(&self, _p: &Point<F>) -> Jet<F> {
        Jet::zero()
    }
    fn terminal_cost(&self, x: F) -> Jet1<F> {
        Jet1::new(x, F::one(), F::zero())
    }
    fn initial_state(&self, _t: F) -> F {
        F::one()
    }
    fn initial_control(&self, _t: F) -> F {
        F::zero()
    }
    fn observation_bound(&self) -> Option<F> {
        Some(F::zero())
    }
}

/// Smooth bounded-coefficient model, nonlinear in every argument:
///
/// ```text
/// b = sin(x + v) + ½cos x′ − ¼v′,  σ = 0.2 + 0.1 sin x,  θ = 0.2 cos x
/// h = amp·sin x,  ℓ = 0.1 cos x − ½v²,  φ = sin x
/// ```
#[derive(Debug, Clone)]
pub struct NonlinearBounded<F> {
    pub delay: F,
    pub h_amplitude: F,
    pub jump_gamma: F,
    pub jumps: JumpMeasure<F>,
}

impl<F: Real> NonlinearBounded<F> {
    pub fn new(delay: F) -> Self {
        Self { delay, h_amplitude: F::half(), jump_gamma: F::zero(), jumps: JumpMeasure::none() }
    }

    pub fn with_jumps(mut self, gamma: F, jumps: JumpMeasure<F>) -> Self {
        self.jump_gamma = gamma;
        self.jumps = jumps;
        self
    }
}

impl<F: Real> DelayModel<F> for NonlinearBounded<F> {
    fn name(&self) -> &str {
        "nonlinear-bounded"
    }
    fn delay(&self) -> F {
        self.delay
    }
    fn drift(&self, p: &Point<F>) -> Jet<F> {
        let (s, c) = (p.x + p.v).sin_cos();
        let q = F::lit(0.25);
        let mut j = Jet::affine(
            s + F::half() * p.x_lag.cos() - q * p.v_lag,
            [c, -F::half() * p.x_lag.sin(), c, -q],
        );
        j.hess[X][X] = -s;
        j.hess[X][V] = -s;
        j.hess[V][X] = -s;
        j.hess[V][V] = -s;
        j.hess[X_LAG][X_LAG] = -F::half() * p.x_lag.cos();
        j
    }
    fn diffusion(&self, p: &Point<F>) -> Jet<F> {
        let a = F::lit(0.1);
        let mut j = Jet::affine(F::lit(0.2) + a * p.x.sin(), [a * p.x.cos(), F::zero(), F::zero(), F::zero()]);
        j.hess[X][X] = -a * p.x.sin();
        j
    }
    fn observation_coupling(&self, p: &Point<F>) -> Jet<F> {
        let a = F::lit(0.2);
        let mut j = Jet::affine(a * p.x.cos(), [-a * p.x.sin(), F::zero(), F::zero(), F::zero()]);
        j.hess[X][X] = -a * p.x.cos();
        j
    }
    fn jump_coefficient(&self, p: &Point<F>) -> Jet<F> {
        let g = self.jump_gamma;
        let mut j = Jet::affine(g * p.x.cos(), [-g * p.x.sin(), F::zero(), F::zero(), F::zero()]);
        j.hess[X][X] = -g * p.x.cos();
        j
    }
    fn jump_measure(&self) -> JumpMeasure<F> {
        self.jumps
    }
    fn observation(&self, _t: F, x: F) -> Jet1<F> {
        let a = self.h_amplitude;
        Jet1::new(a * x.sin(), a * x.cos(), -a * x.sin())
    }
    fn running_cost(&self, p: &Point<F>) -> Jet<F> {
        let a = F::lit(0.1);
        let mut j = Jet::affine(a * p.x.cos() - F::half() * p.v * p.v, [-a * p.x.sin(), F::zero(), -p.v, F::zero()]);
        j.hess[X][X] = -a * p.x.cos();
        j.hess[V][V] = -F::one();
        j
    }
    fn terminal_cost(&self, x: F) -> Jet1<F> {
        Jet1::new(x.sin(), x.cos(), -x.sin())
    }
    fn initial_state(&self, t: F) -> F {
        F::half() + F::lit(0.1) * t
    }
    fn initial_control(&self, _t: F) -> F {
        F::zero()
    }
    fn observation_bound(&self) -> Option<F> {
        Some(self.h_amplitude.abs())
    }
}

/// Constant-coefficient linear delay model:
///
/// ```text
/// b = κ x + κ′ x′ + β v + β′ v′,  σ = s₀ + s₁ x,  θ = θ₀,  h = h₀ + h₁ x
/// ℓ = c x − ½v²,  φ = x
/// ```
#[derive(Debug, Clone, Copy)]
pub struct LinearDelay<F> {
    pub delay: F,
    pub kappa: F,
    pub kappa_lag: F,
    pub beta: F,
    pub beta_lag: F,
    pub s0: F,
    pub s1: F,
    pub theta: F,
    pub h0: F,
    pub h1: F,
    pub c: F,
}

impl<F: Real> LinearDelay<F> {
    pub fn new(delay: F) -> Self {
        Self {
            delay,
            kappa: F::lit(-0.5),
            kappa_lag: F::lit(0.4),
            beta: F::one(),
            beta_lag: F::lit(0.3),
            s0: F::lit(0.2),
            s1: F::lit(0.1),
            theta: F::lit(0.2),
            h0: F::lit(0.3),
            h1: F::zero(),
            c: F::lit(0.2),
        }
    }
}

impl<F: Real> DelayModel<F> for LinearDelay<F> {
    fn name(&self) -> &str {
        "linear-delay"
    }
    fn delay(&self) -> F {
        self.delay
    }
    fn drift(&self, p: &Point<F>) -> Jet<F> {
        let g = [self.kappa, self.kappa_lag, self.beta, self.beta_lag];
        Jet::affine(g[0] * p.x + g[1] * p.x_lag + g[2] * p.v + g[3] * p.v_lag, g)
    }
    fn diffusion(&self, p: &Point<F>) -> Jet<F> {
        Jet::affine(self.s0 + self.s1 * p.x, [self.s1, F::zero(), F::zero(), F::zero()])
    }
    fn observation_coupling(&self, _p: &Point<F>) -> Jet<F> {
        Jet::constant(self.theta)
    }
    fn observation(&self, _t: F, x: F) -> Jet1<F> {
        Jet1::new(self.h0 + self.h1 * x, self.h1, F::zero())
    }
    fn running_cost(&self, p: &Point<F>) -> Jet<F> {
        let mut j = Jet::affine(self.c * p.x - F::half() * p.v * p.v, [self.c, F::zero(), -p.v, F::zero()]);
        j.hess[V][V] = -F::one();
        j
    }
    fn terminal_cost(&self, x: F) -> Jet1<F> {
        Jet1::new(x, F::one(), F::zero())
    }
    fn initial_state(&self, _t: F) -> F {
        F::one()
    }
    fn initial_control(&self, _t: F) -> F {
        F::zero()
    }
    fn order(&self) -> DerivativeOrder {
        DerivativeOrder::Second
    }
    fn observation_bound(&self) -> Option<F> {
        if self.h1 == F::zero() {
            Some(self.h0.abs())
        } else {
            None
        }
    }
}
