//! Forward stochastic Volterra integral equations
//!
//! `X(t) = X0 + ∫_0^t b(t,s,λ_s,u_s,X_s) ds + ∫_0^t ∫ κ(t,s,z,λ_s,u_s,X_s) μ(ds dz)`
//!
//! solved on the grid with left-endpoint integrands: a direct O(M²) solver
//! that re-evaluates the kernel row for every output time, Picard iteration
//! over an ensemble, and the differential form obtained from the
//! transformation rule.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;

use crate::ensemble::{Ensemble, PathView};
use crate::error::{Error, Result};
use crate::grid::MarkSet;
use crate::timechange::Rates;

/// States beyond this magnitude abort the path.
pub const BLOWUP_LIMIT: f64 = 1e12;

/// Where `∂_t b` and `∂_t κ` come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeDerivatives {
    Analytic,
    /// Central differences with step `Δt / 10`.
    FiniteDifference,
    Unsupported,
}

/// Coefficients of a controlled Volterra equation.
///
/// `z = 0` selects the Gaussian channel in [`VolterraModel::noise`]. The
/// optional derivative hooks return `None` when the model does not supply
/// them.
pub trait VolterraModel: Sync {
    fn initial_value(&self) -> f64;

    fn drift(&self, t: f64, s: f64, rates: Rates, u: f64, x: f64) -> f64;

    fn noise(&self, t: f64, s: f64, z: f64, rates: Rates, u: f64, x: f64) -> f64;

    /// Kernels do not depend on their first time argument.
    fn convolution_free(&self) -> bool {
        false
    }

    /// `κ` does not depend on its first time argument (`∂_t κ ≡ 0`), even
    /// if `b` does.
    fn noise_time_free(&self) -> bool {
        self.convolution_free()
    }

    fn time_derivatives(&self) -> TimeDerivatives {
        TimeDerivatives::FiniteDifference
    }

    fn drift_dt(&self, _t: f64, _s: f64, _rates: Rates, _u: f64, _x: f64) -> Option<f64> {
        None
    }

    fn noise_dt(&self, _t: f64, _s: f64, _z: f64, _rates: Rates, _u: f64, _x: f64) -> Option<f64> {
        None
    }

    fn drift_dx(&self, _t: f64, _s: f64, _rates: Rates, _u: f64, _x: f64) -> Option<f64> {
        None
    }

    fn drift_du(&self, _t: f64, _s: f64, _rates: Rates, _u: f64, _x: f64) -> Option<f64> {
        None
    }

    fn noise_dx(&self, _t: f64, _s: f64, _z: f64, _rates: Rates, _u: f64, _x: f64) -> Option<f64> {
        None
    }

    fn noise_du(&self, _t: f64, _s: f64, _z: f64, _rates: Rates, _u: f64, _x: f64) -> Option<f64> {
        None
    }
}

/// `∂_t b(t,s,·)`: exactly 0 for convolution-free models, otherwise analytic
/// or a central difference with step `h`.
pub fn drift_dt<M: VolterraModel + ?Sized>(
    model: &M,
    h: f64,
    t: f64,
    s: f64,
    rates: Rates,
    u: f64,
    x: f64,
) -> Result<f64> {
    if model.convolution_free() {
        return Ok(0.0);
    }
    match model.time_derivatives() {
        TimeDerivatives::Analytic => model
            .drift_dt(t, s, rates, u, x)
            .ok_or_else(|| Error::UnsupportedModel("analytic ∂_t b declared but not supplied".into())),
        TimeDerivatives::FiniteDifference => {
            Ok((model.drift(t + h, s, rates, u, x) - model.drift(t - h, s, rates, u, x)) / (2.0 * h))
        }
        TimeDerivatives::Unsupported => Err(Error::UnsupportedModel("model has no ∂_t b".into())),
    }
}

/// `∂_t κ(t,s,z,·)`, same conventions as [`drift_dt`].
#[allow(clippy::too_many_arguments)]
pub fn noise_dt<M: VolterraModel + ?Sized>(
    model: &M,
    h: f64,
    t: f64,
    s: f64,
    z: f64,
    rates: Rates,
    u: f64,
    x: f64,
) -> Result<f64> {
    if model.noise_time_free() {
        return Ok(0.0);
    }
    match model.time_derivatives() {
        TimeDerivatives::Analytic => model
            .noise_dt(t, s, z, rates, u, x)
            .ok_or_else(|| Error::UnsupportedModel("analytic ∂_t κ declared but not supplied".into())),
        TimeDerivatives::FiniteDifference => Ok((model.noise(t + h, s, z, rates, u, x)
            - model.noise(t - h, s, z, rates, u, x))
            / (2.0 * h)),
        TimeDerivatives::Unsupported => Err(Error::UnsupportedModel("model has no ∂_t κ".into())),
    }
}

pub type DeterministicRule = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type FeedbackRule = Arc<dyn Fn(f64, f64, Rates) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum ControlKind {
    Constant(f64),
    Deterministic(DeterministicRule),
    /// One value per grid point.
    OnGrid(Vec<f64>),
    /// `u(t) = rule(t, X(t−), λ_t)`.
    Feedback(FeedbackRule),
}

impl fmt::Debug for ControlKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlKind::Constant(c) => write!(f, "Constant({c})"),
            ControlKind::Deterministic(_) => write!(f, "Deterministic(..)"),
            ControlKind::OnGrid(v) => write!(f, "OnGrid({} values)", v.len()),
            ControlKind::Feedback(_) => write!(f, "Feedback(..)"),
        }
    }
}

/// Amplitude of a bump perturbation.
#[derive(Debug, Clone, PartialEq)]
pub enum Amplitude {
    Constant(f64),
    PerPath(Vec<f64>),
}

/// `β(s) = α 1_{[start, start + width)}(s)`, evaluated at grid points.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub start: f64,
    pub width: f64,
    pub amplitude: Amplitude,
}

impl Perturbation {
    pub fn zero() -> Self {
        Self { start: 0.0, width: 0.0, amplitude: Amplitude::Constant(0.0) }
    }

    pub fn value(&self, path: usize, t: f64) -> f64 {
        let eps = 1e-12 * self.width.abs().max(1.0);
        if t + eps < self.start || t + eps >= self.start + self.width {
            return 0.0;
        }
        match &self.amplitude {
            Amplitude::Constant(a) => *a,
            Amplitude::PerPath(a) => a[path],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ControlPolicy {
    pub kind: ControlKind,
    pub lower: f64,
    pub upper: f64,
    /// `u + ε β` on top of the base rule.
    pub perturbation: Option<(Perturbation, f64)>,
}

impl ControlPolicy {
    pub fn new(kind: ControlKind, lower: f64, upper: f64) -> Result<Self> {
        if !(lower <= upper) {
            return Err(Error::invalid(format!("control range [{lower}, {upper}] is empty")));
        }
        Ok(Self { kind, lower, upper, perturbation: None })
    }

    pub fn constant(value: f64) -> Self {
        Self {
            kind: ControlKind::Constant(value),
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
            perturbation: None,
        }
    }

    pub fn perturbed(&self, beta: Perturbation, eps: f64) -> Self {
        Self { perturbation: Some((beta, eps)), ..self.clone() }
    }

    pub fn is_feedback(&self) -> bool {
        matches!(self.kind, ControlKind::Feedback(_))
    }

    pub fn clamp(&self, u: f64) -> f64 {
        u.clamp(self.lower, self.upper)
    }

    /// Control at grid index `i` given the state `x = X(t_i−)`.
    pub fn value(&self, path: usize, i: usize, t: f64, x: f64, rates: Rates) -> f64 {
        let base = match &self.kind {
            ControlKind::Constant(c) => *c,
            ControlKind::Deterministic(f) => f(t),
            ControlKind::OnGrid(v) => v[i],
            ControlKind::Feedback(f) => f(t, x, rates),
        };
        let bumped = match &self.perturbation {
            Some((beta, eps)) => self.clamp(base) + eps * beta.value(path, t),
            None => base,
        };
        self.clamp(bumped)
    }
}

/// `X` and `u` on the grid points of one path.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePath {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
}

fn guard(x: f64, path: usize, index: usize) -> Result<f64> {
    if x.is_finite() && x.abs() <= BLOWUP_LIMIT {
        Ok(x)
    } else {
        Err(Error::NumericalBlowup { path, index })
    }
}

fn slots(n_bins: usize) -> impl Iterator<Item = MarkSet> {
    std::iter::once(MarkSet::Gauss).chain((0..n_bins).map(MarkSet::Bin))
}

fn mark_value(view: &PathView<'_>, slot: MarkSet) -> f64 {
    match slot {
        MarkSet::Gauss => 0.0,
        MarkSet::Bin(j) => view.marks.z(j),
    }
}

/// Shared direct sweep: `y_m = y0 + Σ_{i<m} a(m,i,c_i,y_i) Δt_i + Σ_{i<m,slot} k(m,i,slot,c_i,y_i) dμ_i`
/// with `c_i = control(i, y_i)`.
fn direct_sweep(
    view: &PathView<'_>,
    y0: f64,
    mut control: impl FnMut(usize, f64) -> f64,
    drift: impl Fn(usize, usize, f64, f64) -> f64,
    kernel: impl Fn(usize, usize, MarkSet, f64, f64) -> f64,
) -> Result<StatePath> {
    let m_steps = view.grid.n_steps();
    let n_bins = view.marks.len();
    let mut x = Vec::with_capacity(m_steps + 1);
    let mut u = Vec::with_capacity(m_steps + 1);
    x.push(y0);
    for m in 1..=m_steps {
        u.push(control(m - 1, x[m - 1]));
        let mut acc = y0;
        for i in 0..m {
            acc += drift(m, i, u[i], x[i]) * view.grid.dt(i);
            for slot in slots(n_bins) {
                let inc = view.noise.increment(i, slot);
                if inc != 0.0 {
                    acc += kernel(m, i, slot, u[i], x[i]) * inc;
                }
            }
        }
        x.push(guard(acc, view.index, m)?);
    }
    u.push(control(m_steps, x[m_steps]));
    Ok(StatePath { x, u })
}

pub fn solve_direct<M: VolterraModel + ?Sized>(
    model: &M,
    policy: &ControlPolicy,
    view: &PathView<'_>,
) -> Result<StatePath> {
    let g = view.grid;
    let control = |i: usize, x: f64| policy.value(view.index, i, g.t(i), x, view.rate.rates(i));
    let drift = |m: usize, i: usize, u: f64, x: f64| model.drift(g.t(m), g.t(i), view.rate.rates(i), u, x);
    let kernel = |m: usize, i: usize, slot: MarkSet, u: f64, x: f64| {
        model.noise(g.t(m), g.t(i), mark_value(view, slot), view.rate.rates(i), u, x)
    };
    direct_sweep(view, model.initial_value(), control, drift, kernel)
}

pub fn solve_direct_ensemble<M: VolterraModel + ?Sized>(
    model: &M,
    policy: &ControlPolicy,
    ens: &Ensemble,
) -> Result<Vec<StatePath>> {
    (0..ens.n_paths())
        .into_par_iter()
        .map(|p| solve_direct(model, policy, &ens.path(p)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PicardReport {
    /// `‖X^n − X^{n−1}‖` for `n = 1, 2, ...` as the ensemble root mean of
    /// the squared sup-grid distance.
    pub differences: Vec<f64>,
    pub converged: bool,
}

/// Picard iteration started from `X^0 ≡ X0`, run in lock-step over the
/// ensemble. Returns the last iterate.
pub fn solve_picard<M: VolterraModel + ?Sized>(
    model: &M,
    policy: &ControlPolicy,
    ens: &Ensemble,
    n_iter: usize,
    tol: f64,
) -> Result<(Vec<StatePath>, PicardReport)> {
    if n_iter == 0 {
        return Err(Error::invalid("picard iteration needs at least one iterate"));
    }
    let m_steps = ens.grid.n_steps();
    let x0 = model.initial_value();
    let mut current: Vec<StatePath> = (0..ens.n_paths())
        .map(|_| StatePath { x: vec![x0; m_steps + 1], u: Vec::new() })
        .collect();
    let mut differences = Vec::new();
    let mut converged = false;
    for _ in 0..n_iter {
        let next: Vec<StatePath> = current
            .par_iter()
            .enumerate()
            .map(|(p, prev)| picard_step(model, policy, &ens.path(p), &prev.x))
            .collect::<Result<_>>()?;
        let sq: f64 = next
            .iter()
            .zip(&current)
            .map(|(a, b)| {
                let d = a.x.iter().zip(&b.x).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                d * d
            })
            .sum();
        let diff = (sq / ens.n_paths() as f64).sqrt();
        differences.push(diff);
        current = next;
        if diff < tol {
            converged = true;
            break;
        }
    }
    Ok((current, PicardReport { differences, converged }))
}

fn picard_step<M: VolterraModel + ?Sized>(
    model: &M,
    policy: &ControlPolicy,
    view: &PathView<'_>,
    prev: &[f64],
) -> Result<StatePath> {
    let g = view.grid;
    let n_bins = view.marks.len();
    let u: Vec<f64> = (0..=g.n_steps())
        .map(|i| policy.value(view.index, i, g.t(i), prev[i], view.rate.rates(i)))
        .collect();
    let mut x = Vec::with_capacity(prev.len());
    x.push(model.initial_value());
    for m in 1..=g.n_steps() {
        let tm = g.t(m);
        let mut acc = model.initial_value();
        for i in 0..m {
            let r = view.rate.rates(i);
            acc += model.drift(tm, g.t(i), r, u[i], prev[i]) * g.dt(i);
            for slot in slots(n_bins) {
                let inc = view.noise.increment(i, slot);
                if inc != 0.0 {
                    acc += model.noise(tm, g.t(i), mark_value(view, slot), r, u[i], prev[i]) * inc;
                }
            }
        }
        x.push(guard(acc, view.index, m)?);
    }
    Ok(StatePath { x, u })
}

/// Output of the differential solver, with the transformation-rule
/// accumulators `A_b(t_m) = ∫_0^{t_m} ∂_t b ds` and
/// `A_κ(t_m) = ∫_0^{t_m} ∫ ∂_t κ dμ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferentialPath {
    pub state: StatePath,
    pub a_b: Vec<f64>,
    pub a_kappa: Vec<f64>,
}

/// Single forward sweep of
/// `dX = (b(t,t,·) + A_b(t) + A_κ(t)) dt + ∫ κ(t,t,z,·) μ(dt dz)`,
/// with the accumulators re-evaluated exactly at every step.
pub fn solve_differential<M: VolterraModel + ?Sized>(
    model: &M,
    policy: &ControlPolicy,
    view: &PathView<'_>,
) -> Result<DifferentialPath> {
    if !model.convolution_free() && model.time_derivatives() == TimeDerivatives::Unsupported {
        return Err(Error::UnsupportedModel(
            "the differential solver needs ∂_t b and ∂_t κ".into(),
        ));
    }
    let g = view.grid;
    let h = g.step() / 10.0;
    let n_bins = view.marks.len();
    let m_steps = g.n_steps();
    let mut x = Vec::with_capacity(m_steps + 1);
    let mut u = Vec::with_capacity(m_steps + 1);
    let mut a_b = Vec::with_capacity(m_steps + 1);
    let mut a_kappa = Vec::with_capacity(m_steps + 1);
    x.push(model.initial_value());
    for m in 0..m_steps {
        let tm = g.t(m);
        let rm = view.rate.rates(m);
        u.push(policy.value(view.index, m, tm, x[m], rm));
        let (mut ab, mut ak) = (0.0, 0.0);
        if !model.convolution_free() {
            for i in 0..m {
                let r = view.rate.rates(i);
                ab += drift_dt(model, h, tm, g.t(i), r, u[i], x[i])? * g.dt(i);
                for slot in slots(n_bins) {
                    let inc = view.noise.increment(i, slot);
                    if inc != 0.0 {
                        ak += noise_dt(model, h, tm, g.t(i), mark_value(view, slot), r, u[i], x[i])? * inc;
                    }
                }
            }
        }
        a_b.push(ab);
        a_kappa.push(ak);
        let mut next = x[m];
        next += model.drift(tm, tm, rm, u[m], x[m]) * g.dt(m);
        for slot in slots(n_bins) {
            let inc = view.noise.increment(m, slot);
            if inc != 0.0 {
                next += model.noise(tm, tm, mark_value(view, slot), rm, u[m], x[m]) * inc;
            }
        }
        if ab != 0.0 || ak != 0.0 {
            next += (ab + ak) * g.dt(m);
        }
        x.push(guard(next, view.index, m + 1)?);
    }
    u.push(policy.value(view.index, m_steps, g.horizon(), x[m_steps], view.rate.rates(m_steps)));
    Ok(DifferentialPath { state: StatePath { x, u }, a_b, a_kappa })
}

pub fn solve_differential_ensemble<M: VolterraModel + ?Sized>(
    model: &M,
    policy: &ControlPolicy,
    ens: &Ensemble,
) -> Result<Vec<StatePath>> {
    (0..ens.n_paths())
        .into_par_iter()
        .map(|p| solve_differential(model, policy, &ens.path(p)).map(|d| d.state))
        .collect()
}

/// First variation `χ = ∂_ε X^{u+εβ}` along the solution `base` of `u`:
///
/// `χ(t) = ∫ (∂_x b χ + ∂_u b β) ds + ∫∫ (∂_x κ χ + ∂_u κ β) μ(ds dz)`.
///
/// The control is treated as open loop; feedback rules are rejected.
pub fn first_variation<M: VolterraModel + ?Sized>(
    model: &M,
    policy: &ControlPolicy,
    beta: &Perturbation,
    view: &PathView<'_>,
    base: &StatePath,
) -> Result<StatePath> {
    if policy.is_feedback() {
        return Err(Error::UnsupportedModel(
            "first variation is defined for open-loop controls".into(),
        ));
    }
    let g = view.grid;
    let probe = (0.0, 0.0, Rates::default(), 0.0, 0.0);
    if model.drift_dx(probe.0, probe.1, probe.2, probe.3, probe.4).is_none()
        || model.drift_du(probe.0, probe.1, probe.2, probe.3, probe.4).is_none()
        || model.noise_dx(probe.0, probe.1, 0.0, probe.2, probe.3, probe.4).is_none()
        || model.noise_du(probe.0, probe.1, 0.0, probe.2, probe.3, probe.4).is_none()
    {
        return Err(Error::UnsupportedModel(
            "first variation needs ∂_x and ∂_u of both kernels".into(),
        ));
    }
    let beta_at = |i: usize| beta.value(view.index, g.t(i));
    let control = |i: usize, _chi: f64| beta_at(i);
    let drift = |m: usize, i: usize, b: f64, chi: f64| {
        let (t, s, r, u, x) = (g.t(m), g.t(i), view.rate.rates(i), base.u[i], base.x[i]);
        model.drift_dx(t, s, r, u, x).unwrap_or(0.0) * chi + model.drift_du(t, s, r, u, x).unwrap_or(0.0) * b
    };
    let kernel = |m: usize, i: usize, slot: MarkSet, b: f64, chi: f64| {
        let (t, s, r, u, x) = (g.t(m), g.t(i), view.rate.rates(i), base.u[i], base.x[i]);
        let z = mark_value(view, slot);
        model.noise_dx(t, s, z, r, u, x).unwrap_or(0.0) * chi + model.noise_du(t, s, z, r, u, x).unwrap_or(0.0) * b
    };
    direct_sweep(view, 0.0, control, drift, kernel)
}

/// CSV with columns `path_id,t,x,u`.
pub fn write_states_csv<W: Write>(ens: &Ensemble, states: &[StatePath], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["path_id", "t", "x", "u"])?;
    for (p, s) in states.iter().enumerate() {
        for (i, t) in ens.grid.points().iter().enumerate() {
            w.write_record([p.to_string(), t.to_string(), s.x[i].to_string(), s.u[i].to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Closure-backed model, convenient for tests and small experiments.
pub mod models {
    use super::*;

    /// `b = drift_coef · x`, `κ(·, 0) = noise_coef · x`, `κ(·, z) = 0`.
    #[derive(Debug, Clone, Copy)]
    pub struct LinearModel {
        pub x0: f64,
        pub drift_coef: f64,
        pub noise_coef: f64,
    }

    impl VolterraModel for LinearModel {
        fn initial_value(&self) -> f64 {
            self.x0
        }
        fn drift(&self, _t: f64, _s: f64, _r: Rates, _u: f64, x: f64) -> f64 {
            self.drift_coef * x
        }
        fn noise(&self, _t: f64, _s: f64, z: f64, _r: Rates, _u: f64, x: f64) -> f64 {
            if z == 0.0 {
                self.noise_coef * x
            } else {
                0.0
            }
        }
        fn convolution_free(&self) -> bool {
            true
        }
        fn drift_dx(&self, _t: f64, _s: f64, _r: Rates, _u: f64, _x: f64) -> Option<f64> {
            Some(self.drift_coef)
        }
        fn drift_du(&self, _t: f64, _s: f64, _r: Rates, _u: f64, _x: f64) -> Option<f64> {
            Some(0.0)
        }
        fn noise_dx(&self, _t: f64, _s: f64, z: f64, _r: Rates, _u: f64, _x: f64) -> Option<f64> {
            Some(if z == 0.0 { self.noise_coef } else { 0.0 })
        }
        fn noise_du(&self, _t: f64, _s: f64, _z: f64, _r: Rates, _u: f64, _x: f64) -> Option<f64> {
            Some(0.0)
        }
    }

    /// `b(t,s,x) = e^{−rate (t−s)} x`, `κ ≡ 0`.
    #[derive(Debug, Clone, Copy)]
    pub struct ExponentialKernel {
        pub x0: f64,
        pub rate: f64,
    }

    impl VolterraModel for ExponentialKernel {
        fn initial_value(&self) -> f64 {
            self.x0
        }
        fn drift(&self, t: f64, s: f64, _r: Rates, _u: f64, x: f64) -> f64 {
            (-self.rate * (t - s)).exp() * x
        }
        fn noise(&self, _t: f64, _s: f64, _z: f64, _r: Rates, _u: f64, _x: f64) -> f64 {
            0.0
        }
        fn time_derivatives(&self) -> TimeDerivatives {
            TimeDerivatives::Analytic
        }
        fn drift_dt(&self, t: f64, s: f64, _r: Rates, _u: f64, x: f64) -> Option<f64> {
            Some(-self.rate * (-self.rate * (t - s)).exp() * x)
        }
        fn noise_dt(&self, _t: f64, _s: f64, _z: f64, _r: Rates, _u: f64, _x: f64) -> Option<f64> {
            Some(0.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::models::*;
    use super::*;
    use crate::grid::{MarkGrid, TimeGrid};
    use crate::rng::EnsembleHandle;
    use crate::timechange::RateSpec;

    fn ensemble(n: usize, steps: usize, marks: MarkGrid, seed: u64) -> Ensemble {
        let g = TimeGrid::uniform(1.0, steps).unwrap();
        Ensemble::simulate(g, marks, &RateSpec::constant(1.0, 1.0), EnsembleHandle::new(n, seed).unwrap()).unwrap()
    }

    struct Additive;
    impl VolterraModel for Additive {
        fn initial_value(&self) -> f64 {
            0.5
        }
        fn drift(&self, _t: f64, _s: f64, _r: Rates, _u: f64, _x: f64) -> f64 {
            0.0
        }
        fn noise(&self, _t: f64, _s: f64, _z: f64, _r: Rates, _u: f64, _x: f64) -> f64 {
            1.0
        }
        fn convolution_free(&self) -> bool {
            true
        }
    }

    /// `κ(t,s,z) = z (t − s)` on the jump channel only.
    struct RampJump;
    impl VolterraModel for RampJump {
        fn initial_value(&self) -> f64 {
            0.0
        }
        fn drift(&self, _t: f64, _s: f64, _r: Rates, _u: f64, _x: f64) -> f64 {
            0.0
        }
        fn noise(&self, t: f64, s: f64, z: f64, _r: Rates, _u: f64, _x: f64) -> f64 {
            z * (t - s)
        }
        fn time_derivatives(&self) -> TimeDerivatives {
            TimeDerivatives::Analytic
        }
        fn drift_dt(&self, _t: f64, _s: f64, _r: Rates, _u: f64, _x: f64) -> Option<f64> {
            Some(0.0)
        }
        fn noise_dt(&self, _t: f64, _s: f64, z: f64, _r: Rates, _u: f64, _x: f64) -> Option<f64> {
            Some(z)
        }
    }

    #[test]
    fn exponential_growth_oracle() {
        let ens = ensemble(1, 1000, MarkGrid::empty(), 1);
        let model = LinearModel { x0: 1.0, drift_coef: 0.5, noise_coef: 0.0 };
        let s = solve_direct(&model, &ControlPolicy::constant(0.0), &ens.path(0)).unwrap();
        let err = (s.x[1000] - 0.5f64.exp()).abs();
        // Euler error ≈ X0 r² T e^{rT} Δt / 2
        assert!(err < 0.5 * 0.25 * 0.5f64.exp() * 1e-3 * 1.1, "err {err}");
        assert!(err > 0.0);
    }

    #[test]
    fn additive_unrolls_to_mu() {
        let marks = MarkGrid::new(vec![0.4, -1.0], vec![0.5, 0.5]).unwrap();
        let ens = ensemble(2, 16, marks, 3);
        let s = solve_direct(&Additive, &ControlPolicy::constant(0.0), &ens.path(1)).unwrap();
        let n = &ens.noise[1];
        for m in 0..=16 {
            let mut mu = n.b_running(m);
            for i in 0..m {
                mu += (0..2).map(|j| n.centered(i, j)).sum::<f64>();
            }
            assert!((s.x[m] - 0.5 - mu).abs() < 1e-13);
        }
    }

    #[test]
    fn zero_is_fixed_point() {
        let ens = ensemble(1, 20, MarkGrid::empty(), 4);
        let model = LinearModel { x0: 0.0, drift_coef: 1.3, noise_coef: 0.7 };
        let s = solve_direct(&model, &ControlPolicy::constant(0.0), &ens.path(0)).unwrap();
        assert!(s.x.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn blowup_is_reported() {
        let ens = ensemble(1, 50, MarkGrid::empty(), 4);
        let model = LinearModel { x0: 1.0, drift_coef: 2000.0, noise_coef: 0.0 };
        let err = solve_direct(&model, &ControlPolicy::constant(0.0), &ens.path(0)).unwrap_err();
        assert!(matches!(err, Error::NumericalBlowup { path: 0, .. }));
    }

    #[test]
    fn picard_additive_is_immediate() {
        let ens = ensemble(4, 16, MarkGrid::empty(), 5);
        let (states, rep) = solve_picard(&Additive, &ControlPolicy::constant(0.0), &ens, 10, 1e-14).unwrap();
        assert_eq!(rep.differences.len(), 2);
        assert_eq!(rep.differences[1], 0.0);
        assert!(rep.converged);
        let direct = solve_direct(&Additive, &ControlPolicy::constant(0.0), &ens.path(2)).unwrap();
        assert_eq!(states[2].x, direct.x);
    }

    #[test]
    fn picard_single_iterate() {
        let ens = ensemble(2, 8, MarkGrid::empty(), 5);
        let model = LinearModel { x0: 1.0, drift_coef: 0.5, noise_coef: 0.0 };
        let (states, rep) = solve_picard(&model, &ControlPolicy::constant(0.0), &ens, 1, 0.0).unwrap();
        assert_eq!(rep.differences.len(), 1);
        // X¹(t) = 1 + 0.5 t
        assert!((states[0].x[8] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn picard_decay_is_super_geometric() {
        let ens = ensemble(1, 200, MarkGrid::empty(), 6);
        let model = LinearModel { x0: 1.0, drift_coef: 0.5, noise_coef: 0.0 };
        let (states, rep) = solve_picard(&model, &ControlPolicy::constant(0.0), &ens, 8, 0.0).unwrap();
        let d = &rep.differences;
        for n in 1..d.len() {
            assert!(d[n] < d[n - 1]);
        }
        for n in 2..d.len() {
            assert!(d[n] / d[n - 1] < d[n - 1] / d[n - 2] + 1e-12);
        }
        let direct = solve_direct(&model, &ControlPolicy::constant(0.0), &ens.path(0)).unwrap();
        assert!((states[0].x[200] - direct.x[200]).abs() < 1e-6);
    }

    #[test]
    fn differential_matches_direct_when_convolution_free() {
        let marks = MarkGrid::new(vec![0.3], vec![1.0]).unwrap();
        let ens = ensemble(3, 64, marks, 7);
        let model = LinearModel { x0: 1.0, drift_coef: 0.3, noise_coef: 0.4 };
        let pol = ControlPolicy::constant(0.0);
        let a = solve_direct(&model, &pol, &ens.path(2)).unwrap();
        let b = solve_differential(&model, &pol, &ens.path(2)).unwrap();
        for (x, y) in a.x.iter().zip(&b.state.x) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn ramp_kernel_accumulator() {
        let marks = MarkGrid::new(vec![0.5, -0.25], vec![2.0, 1.0]).unwrap();
        let ens = ensemble(1, 40, marks.clone(), 8);
        let out = solve_differential(&RampJump, &ControlPolicy::constant(0.0), &ens.path(0)).unwrap();
        let n = &ens.noise[0];
        for m in 0..40 {
            let mut direct = 0.0;
            for i in 0..m {
                for j in 0..2 {
                    direct += marks.z(j) * n.centered(i, j);
                }
            }
            assert!((out.a_kappa[m] - direct).abs() <= 1e-10 * direct.abs().max(1e-300));
        }
    }

    #[test]
    fn finite_difference_fallback() {
        struct Fd(ExponentialKernel);
        impl VolterraModel for Fd {
            fn initial_value(&self) -> f64 {
                self.0.x0
            }
            fn drift(&self, t: f64, s: f64, r: Rates, u: f64, x: f64) -> f64 {
                self.0.drift(t, s, r, u, x)
            }
            fn noise(&self, _t: f64, _s: f64, _z: f64, _r: Rates, _u: f64, _x: f64) -> f64 {
                0.0
            }
        }
        let ens = ensemble(1, 32, MarkGrid::empty(), 9);
        let exact = ExponentialKernel { x0: 1.0, rate: 1.0 };
        let pol = ControlPolicy::constant(0.0);
        let a = solve_differential(&exact, &pol, &ens.path(0)).unwrap();
        let b = solve_differential(&Fd(exact), &pol, &ens.path(0)).unwrap();
        assert!((a.state.x[32] - b.state.x[32]).abs() < 1e-5);
    }

    #[test]
    fn unsupported_derivatives() {
        struct NoDt;
        impl VolterraModel for NoDt {
            fn initial_value(&self) -> f64 {
                1.0
            }
            fn drift(&self, t: f64, _s: f64, _r: Rates, _u: f64, x: f64) -> f64 {
                t * x
            }
            fn noise(&self, _t: f64, _s: f64, _z: f64, _r: Rates, _u: f64, _x: f64) -> f64 {
                0.0
            }
            fn time_derivatives(&self) -> TimeDerivatives {
                TimeDerivatives::Unsupported
            }
        }
        let ens = ensemble(1, 4, MarkGrid::empty(), 1);
        let r = solve_differential(&NoDt, &ControlPolicy::constant(0.0), &ens.path(0));
        assert!(matches!(r, Err(Error::UnsupportedModel(_))));
    }

    #[test]
    fn convolution_free_dt_is_exact_zero() {
        let model = LinearModel { x0: 1.0, drift_coef: 1.0, noise_coef: 1.0 };
        let r = Rates { b: 1.0, h: 1.0 };
        assert_eq!(noise_dt(&model, 1e-3, 0.5, 0.1, 0.0, r, 0.0, 2.0).unwrap(), 0.0);
        assert_eq!(drift_dt(&model, 1e-3, 0.5, 0.1, r, 0.0, 2.0).unwrap(), 0.0);
    }

    struct ControlledDrift;
    impl VolterraModel for ControlledDrift {
        fn initial_value(&self) -> f64 {
            0.0
        }
        fn drift(&self, _t: f64, _s: f64, _r: Rates, u: f64, _x: f64) -> f64 {
            u
        }
        fn noise(&self, _t: f64, _s: f64, _z: f64, _r: Rates, _u: f64, _x: f64) -> f64 {
            0.0
        }
        fn convolution_free(&self) -> bool {
            true
        }
        fn drift_dx(&self, _t: f64, _s: f64, _r: Rates, _u: f64, _x: f64) -> Option<f64> {
            Some(0.0)
        }
        fn drift_du(&self, _t: f64, _s: f64, _r: Rates, _u: f64, _x: f64) -> Option<f64> {
            Some(1.0)
        }
        fn noise_dx(&self, _t: f64, _s: f64, _z: f64, _r: Rates, _u: f64, _x: f64) -> Option<f64> {
            Some(0.0)
        }
        fn noise_du(&self, _t: f64, _s: f64, _z: f64, _r: Rates, _u: f64, _x: f64) -> Option<f64> {
            Some(0.0)
        }
    }

    #[test]
    fn first_variation_of_bump() {
        let ens = ensemble(1, 20, MarkGrid::empty(), 2);
        let pol = ControlPolicy::constant(0.3);
        let base = solve_direct(&ControlledDrift, &pol, &ens.path(0)).unwrap();
        let beta = Perturbation { start: 0.25, width: 0.4, amplitude: Amplitude::Constant(1.0) };
        let chi = first_variation(&ControlledDrift, &pol, &beta, &ens.path(0), &base).unwrap();
        for (m, t) in ens.grid.points().iter().enumerate() {
            let want = (t - 0.25).clamp(0.0, 0.4);
            assert!((chi.x[m] - want).abs() < 1e-12, "t={t}: {} vs {want}", chi.x[m]);
        }
        let zero = first_variation(&ControlledDrift, &pol, &Perturbation::zero(), &ens.path(0), &base).unwrap();
        assert!(zero.x.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn first_variation_matches_central_difference() {
        let ens = ensemble(1, 50, MarkGrid::empty(), 12);
        let model = LinearModel { x0: 1.0, drift_coef: 0.3, noise_coef: 0.2 };
        struct Mixed(LinearModel);
        impl VolterraModel for Mixed {
            fn initial_value(&self) -> f64 {
                self.0.x0
            }
            fn drift(&self, t: f64, s: f64, r: Rates, u: f64, x: f64) -> f64 {
                self.0.drift(t, s, r, u, x) - u * x
            }
            fn noise(&self, t: f64, s: f64, z: f64, r: Rates, u: f64, x: f64) -> f64 {
                self.0.noise(t, s, z, r, u, x)
            }
            fn drift_dx(&self, _t: f64, _s: f64, _r: Rates, u: f64, _x: f64) -> Option<f64> {
                Some(self.0.drift_coef - u)
            }
            fn drift_du(&self, _t: f64, _s: f64, _r: Rates, _u: f64, x: f64) -> Option<f64> {
                Some(-x)
            }
            fn noise_dx(&self, t: f64, s: f64, z: f64, r: Rates, u: f64, x: f64) -> Option<f64> {
                self.0.noise_dx(t, s, z, r, u, x)
            }
            fn noise_du(&self, _t: f64, _s: f64, _z: f64, _r: Rates, _u: f64, _x: f64) -> Option<f64> {
                Some(0.0)
            }
        }
        let m = Mixed(model);
        let pol = ControlPolicy::constant(0.5);
        let beta = Perturbation { start: 0.2, width: 0.3, amplitude: Amplitude::Constant(1.0) };
        let view = ens.path(0);
        let base = solve_direct(&m, &pol, &view).unwrap();
        let chi = first_variation(&m, &pol, &beta, &view, &base).unwrap();
        let eps = 1e-4;
        let up = solve_direct(&m, &pol.perturbed(beta.clone(), eps), &view).unwrap();
        let dn = solve_direct(&m, &pol.perturbed(beta, -eps), &view).unwrap();
        for k in 0..=50 {
            let fd = (up.x[k] - dn.x[k]) / (2.0 * eps);
            assert!((fd - chi.x[k]).abs() < 1e-7, "k={k}");
        }
    }

    #[test]
    fn policy_clamps_and_feedback() {
        let pol = ControlPolicy::new(ControlKind::Feedback(Arc::new(|_, x, _| 2.0 * x)), 0.0, 1.0).unwrap();
        assert_eq!(pol.value(0, 0, 0.0, 3.0, Rates::default()), 1.0);
        assert_eq!(pol.value(0, 0, 0.0, -3.0, Rates::default()), 0.0);
        assert!(ControlPolicy::new(ControlKind::Constant(0.0), 1.0, 0.0).is_err());
        let grid = ControlPolicy::new(ControlKind::OnGrid(vec![0.1, 0.2]), 0.0, 1.0).unwrap();
        assert_eq!(grid.value(0, 1, 0.5, 0.0, Rates::default()), 0.2);
    }

    #[test]
    fn states_csv_layout() {
        let ens = ensemble(1, 2, MarkGrid::empty(), 1);
        let s = solve_direct(&Additive, &ControlPolicy::constant(0.0), &ens.path(0)).unwrap();
        let mut buf = Vec::new();
        write_states_csv(&ens, &[s], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("path_id,t,x,u\n0,0,0.5,0\n"));
    }
}
