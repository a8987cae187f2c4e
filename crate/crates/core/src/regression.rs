//! Least-squares Monte Carlo projections: monomial bases of per-path
//! features, an orthonormalised design reused across targets, and the
//! feature vocabulary shared by the backward solvers and the residual checks.

use crate::error::{Error, Result};
use crate::forward_sim::ForwardEnsemble;
use crate::model::ObservationView;
use crate::scalar::Real;

/// Per-path statistic evaluated at a grid node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Feature {
    /// `x(t_k)`
    State,
    /// `x(t_k − δ)`, read from the initial segment before `δ`.
    DelayedState,
    /// `Y(t_k)`
    Observation,
    /// `Y(t_{k−j})`, clamped to `Y(0)` before the start.
    ObservationLag(usize),
    /// The ensemble's exogenous observation-adapted factor.
    Factor,
}

impl Feature {
    /// Measurable with respect to the observation filtration.
    pub fn is_observable(&self) -> bool {
        matches!(self, Feature::Observation | Feature::ObservationLag(_) | Feature::Factor)
    }

    pub fn evaluate<F: Real>(&self, ens: &ForwardEnsemble<F>, path: usize, k: usize) -> F {
        match *self {
            Feature::State => ens.x.get(path, k),
            Feature::DelayedState => ens.x_lag(path, k),
            Feature::Observation => ens.y.get(path, k),
            Feature::ObservationLag(j) => ens.y.get(path, k.saturating_sub(j)),
            Feature::Factor => ens.factor.get(path, k),
        }
    }

    /// `None` for features the controller cannot see.
    pub fn from_view<F: Real>(&self, view: &ObservationView<'_, F>) -> Option<F> {
        match *self {
            Feature::Observation => Some(view.y[view.k]),
            Feature::ObservationLag(j) => Some(view.y[view.k.saturating_sub(j)]),
            Feature::Factor => Some(view.factor),
            Feature::State | Feature::DelayedState => None,
        }
    }
}

/// Monomials of total degree `≤ degree` in the listed features.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Basis {
    features: Vec<Feature>,
    degree: usize,
    exponents: Vec<Vec<u32>>,
}

impl Basis {
    pub fn new(features: Vec<Feature>, degree: usize) -> Self {
        let exponents = monomial_exponents(features.len(), degree);
        Self { features, degree, exponents }
    }

    /// Constant only: projections reduce to the sample mean.
    pub fn intercept() -> Self {
        Self::new(Vec::new(), 0)
    }

    /// `(x_k, x_{k−m}, Y_k)` to degree 2.
    pub fn adjoint_default() -> Self {
        Self::new(vec![Feature::State, Feature::DelayedState, Feature::Observation], 2)
    }

    /// `Y_k` and `Y_{k−j}` for the given node lags.
    pub fn observation(lags: &[usize], degree: usize) -> Self {
        let mut features = vec![Feature::Observation];
        features.extend(lags.iter().filter(|&&j| j > 0).map(|&j| Feature::ObservationLag(j)));
        Self::new(features, degree)
    }

    pub fn with_feature(mut self, f: Feature) -> Self {
        self.features.push(f);
        Self::new(self.features, self.degree)
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn terms(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_observable(&self) -> bool {
        self.features.iter().all(Feature::is_observable)
    }

    /// Basis row for one vector of feature values.
    pub fn row<F: Real>(&self, values: &[F]) -> Vec<F> {
        self.exponents
            .iter()
            .map(|e| e.iter().zip(values).fold(F::one(), |acc, (&p, &v)| acc * v.powi(p as i32)))
            .collect()
    }

    /// Design columns at node `k` of an ensemble.
    pub fn design<F: Real>(&self, ens: &ForwardEnsemble<F>, k: usize) -> Vec<Vec<F>> {
        let feats: Vec<Vec<F>> =
            self.features.iter().map(|f| (0..ens.paths()).map(|p| f.evaluate(ens, p, k)).collect()).collect();
        self.design_from_columns(&feats, ens.paths())
    }

    /// Design columns from raw feature columns.
    pub fn design_from_columns<F: Real>(&self, feature_columns: &[Vec<F>], rows: usize) -> Vec<Vec<F>> {
        self.exponents
            .iter()
            .map(|e| {
                (0..rows)
                    .map(|i| {
                        e.iter()
                            .zip(feature_columns)
                            .fold(F::one(), |acc, (&p, col)| if p == 0 { acc } else { acc * col[i].powi(p as i32) })
                    })
                    .collect()
            })
            .collect()
    }

    /// Evaluate a fitted polynomial at what the controller sees.
    pub fn evaluate_view<F: Real>(&self, coefficients: &[F], view: &ObservationView<'_, F>) -> Result<F> {
        let values = self
            .features
            .iter()
            .map(|f| f.from_view(view).ok_or_else(|| Error::domain(format!("{f:?} is not observable"))))
            .collect::<Result<Vec<F>>>()?;
        Ok(self.row(&values).iter().zip(coefficients).map(|(&b, &c)| b * c).sum())
    }
}

/// Exponent tuples in graded order: constant first, then degree 1, ...
fn monomial_exponents(dim: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for total in 0..=degree {
        let mut current = vec![0u32; dim];
        push_compositions(&mut out, &mut current, 0, total as u32);
    }
    out
}

fn push_compositions(out: &mut Vec<Vec<u32>>, current: &mut Vec<u32>, slot: usize, remaining: u32) {
    if slot == current.len() {
        if remaining == 0 {
            out.push(current.clone());
        }
        return;
    }
    if slot + 1 == current.len() {
        current[slot] = remaining;
        out.push(current.clone());
        current[slot] = 0;
        return;
    }
    for p in (0..=remaining).rev() {
        current[slot] = p;
        push_compositions(out, current, slot + 1, remaining - p);
    }
    current[slot] = 0;
}

#[inline]
fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Orthogonal projector onto the span of a design, by modified Gram–Schmidt
/// with one reorthogonalisation pass. Columns that are numerically dependent
/// on earlier ones are dropped and flagged.
#[derive(Debug, Clone)]
pub struct Projector<F> {
    rows: usize,
    columns: usize,
    q: Vec<Vec<F>>,
    kept: Vec<usize>,
    r: Vec<Vec<F>>,
    rank_deficient: bool,
}

impl<F: Real> Projector<F> {
    pub fn new(design: Vec<Vec<F>>) -> Result<Self> {
        let columns = design.len();
        if columns == 0 {
            return Err(Error::Regression("empty basis".into()));
        }
        let rows = design[0].len();
        if rows == 0 || design.iter().any(|c| c.len() != rows) {
            return Err(Error::Regression("design columns must be non-empty and equally long".into()));
        }
        let cutoff = F::epsilon().sqrt();
        let mut q: Vec<Vec<F>> = Vec::with_capacity(columns);
        let mut kept = Vec::with_capacity(columns);
        let mut r: Vec<Vec<F>> = Vec::with_capacity(columns);
        let mut rank_deficient = false;
        for (j, mut v) in design.into_iter().enumerate() {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Regression(format!("non-finite value in design column {j}")));
            }
            let norm0 = dot(&v, &v).sqrt();
            let mut coeffs = vec![F::zero(); q.len()];
            for _ in 0..2 {
                for (i, qi) in q.iter().enumerate() {
                    let c = dot(qi, &v);
                    coeffs[i] += c;
                    for (vv, &qq) in v.iter_mut().zip(qi) {
                        *vv -= c * qq;
                    }
                }
            }
            let nv = dot(&v, &v).sqrt();
            if !(norm0 > F::zero()) || nv <= cutoff * norm0 {
                rank_deficient = true;
                continue;
            }
            let inv = F::one() / nv;
            v.iter_mut().for_each(|x| *x *= inv);
            coeffs.push(nv);
            q.push(v);
            r.push(coeffs);
            kept.push(j);
        }
        Ok(Self { rows, columns, q, kept, r, rank_deficient })
    }

    /// Projector at node `k` of an ensemble, checking the sample-size rule.
    pub fn at_node(basis: &Basis, ens: &ForwardEnsemble<F>, k: usize) -> Result<Self> {
        check_sample_size(ens.paths(), basis.terms())?;
        Self::new(basis.design(ens, k))
    }

    pub fn rank(&self) -> usize {
        self.q.len()
    }

    pub fn is_rank_deficient(&self) -> bool {
        self.rank_deficient
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Fitted values `Π y`.
    pub fn fit(&self, y: &[F]) -> Vec<F> {
        assert_eq!(y.len(), self.rows, "target length must match design rows");
        let mut out = vec![F::zero(); self.rows];
        for qi in &self.q {
            let c = dot(qi, y);
            for (o, &qq) in out.iter_mut().zip(qi) {
                *o += c * qq;
            }
        }
        out
    }

    /// Least-squares coefficients in the original basis; dropped columns get 0.
    pub fn coefficients(&self, y: &[F]) -> Vec<F> {
        assert_eq!(y.len(), self.rows, "target length must match design rows");
        let c: Vec<F> = self.q.iter().map(|qi| dot(qi, y)).collect();
        let rank = self.q.len();
        let mut beta = vec![F::zero(); rank];
        for i in (0..rank).rev() {
            let mut acc = c[i];
            for j in i + 1..rank {
                acc -= self.r[j][i] * beta[j];
            }
            beta[i] = acc / self.r[i][i];
        }
        let mut out = vec![F::zero(); self.columns];
        for (slot, &col) in self.kept.iter().enumerate() {
            out[col] = beta[slot];
        }
        out
    }
}

/// Weighted least squares `min Σ w (y − Φβ)²`, i.e. the projection under
/// the measure `w·P`. With `w = Z` this estimates `Ē[y | features]`.
#[derive(Debug, Clone)]
pub struct WeightedProjector<F> {
    inner: Projector<F>,
    sqrt_w: Vec<F>,
}

impl<F: Real> WeightedProjector<F> {
    pub fn new(design: Vec<Vec<F>>, weights: &[F]) -> Result<Self> {
        if weights.iter().any(|w| !(*w >= F::zero()) || !w.is_finite()) {
            return Err(Error::Regression("weights must be finite and non-negative".into()));
        }
        let sqrt_w: Vec<F> = weights.iter().map(|w| w.sqrt()).collect();
        let scaled = design
            .into_iter()
            .map(|col| {
                if col.len() != sqrt_w.len() {
                    return Err(Error::Regression("weights must match design rows".into()));
                }
                Ok(col.iter().zip(&sqrt_w).map(|(&c, &w)| c * w).collect())
            })
            .collect::<Result<Vec<Vec<F>>>>()?;
        Ok(Self { inner: Projector::new(scaled)?, sqrt_w })
    }

    pub fn at_node(basis: &Basis, ens: &ForwardEnsemble<F>, k: usize, weights: &[F]) -> Result<Self> {
        check_sample_size(ens.paths(), basis.terms())?;
        Self::new(basis.design(ens, k), weights)
    }

    fn scaled(&self, y: &[F]) -> Vec<F> {
        y.iter().zip(&self.sqrt_w).map(|(&a, &w)| a * w).collect()
    }

    pub fn coefficients(&self, y: &[F]) -> Vec<F> {
        self.inner.coefficients(&self.scaled(y))
    }

    /// Fitted polynomial evaluated on every row, including zero-weight rows.
    pub fn fit(&self, basis_design: &[Vec<F>], y: &[F]) -> Vec<F> {
        let beta = self.coefficients(y);
        (0..y.len()).map(|i| basis_design.iter().zip(&beta).map(|(col, &b)| col[i] * b).sum()).collect()
    }

    pub fn is_rank_deficient(&self) -> bool {
        self.inner.is_rank_deficient()
    }
}

/// Projections need at least ten samples per basis function.
pub fn check_sample_size(rows: usize, terms: usize) -> Result<()> {
    if rows < 10 * terms {
        return Err(Error::Regression(format!("{rows} paths for {terms} basis functions; need at least {}", 10 * terms)));
    }
    Ok(())
}

/// Result of a single regression.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionFit<F> {
    pub fitted: Vec<F>,
    pub coefficients: Vec<F>,
    pub rank_deficient: bool,
}

/// Regress `values` on monomials of `features` (one column per feature).
pub fn regress<F: Real>(values: &[F], features: &[Vec<F>], degree: usize) -> Result<RegressionFit<F>> {
    let rows = values.len();
    if features.iter().any(|c| c.len() != rows) {
        return Err(Error::Regression("feature columns must match the number of values".into()));
    }
    let basis = Basis::new(vec![Feature::Observation; features.len()], degree);
    check_sample_size(rows, basis.terms())?;
    let projector = Projector::new(basis.design_from_columns(features, rows))?;
    if projector.is_rank_deficient() {
        log::debug!("regression design rank {} of {}", projector.rank(), basis.terms());
    }
    Ok(RegressionFit {
        fitted: projector.fit(values),
        coefficients: projector.coefficients(values),
        rank_deficient: projector.is_rank_deficient(),
    })
}
