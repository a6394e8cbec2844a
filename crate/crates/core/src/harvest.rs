//! Optimal harvesting under Volterra growth.
//!
//! `X(t) = X₀ + ∫_0^t (r(t,s) − K u(s)) X(s) ds + ∫_0^t σ(s) X(s) dB(s)` with
//! reward `J(u) = E[∫ e^{−δ(T−t)} X(t) u(t) dt]`. The adjoint solves
//! `dp = −(e^{−δ(T−t)} u + (r̃ − K u) p + σ q λ^B) dt + q dB`, `p(T) = 0`,
//! with `r̃(t) = r(t,t) + ∫_0^t ∂_t r(t,s) ds`. Under `dℚ = M(T) dP` this gives
//! `p(t) = E[(M(T)/M(t)) ∫_t^T e^{∫_t^s (r̃ − K u)} e^{−δ(T−s)} u(s) ds | 𝓖_t]`.
//!
//! The fixed-point construction of the candidate in [`solve_candidate`] is
//! ours; the optimality condition only characterizes it.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::{girsanov_density, solve_backward, BsdeSolution, BsdeSpec, DriverArgs, DriverInput};
use crate::condexp::{Feature, FeatureMap, Flow};
use crate::control::Objective;
use crate::ensemble::{Ensemble, PathView};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::stats::Estimate;
use crate::timechange::Rates;
use crate::volterra::{ControlKind, ControlPolicy, StatePath, TimeDerivatives, VolterraModel, BLOWUP_LIMIT};

/// `r(t,s) = base + memory · e^{−decay (t − s)}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowthKernel {
    pub base: f64,
    #[serde(default)]
    pub memory: f64,
    #[serde(default)]
    pub decay: f64,
}

impl GrowthKernel {
    pub fn constant(c: f64) -> Self {
        Self { base: c, memory: 0.0, decay: 0.0 }
    }

    pub fn r(&self, t: f64, s: f64) -> f64 {
        self.base + self.memory * (-self.decay * (t - s)).exp()
    }

    pub fn dt(&self, t: f64, s: f64) -> f64 {
        -self.decay * self.memory * (-self.decay * (t - s)).exp()
    }

    pub fn has_memory(&self) -> bool {
        self.memory != 0.0 && self.decay != 0.0
    }
}

/// `σ(t) = level + slope · t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Volatility {
    pub level: f64,
    #[serde(default)]
    pub slope: f64,
}

impl Volatility {
    pub fn at(&self, t: f64) -> f64 {
        self.level + self.slope * t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarvestModel {
    pub growth: GrowthKernel,
    pub volatility: Volatility,
    pub catchability: f64,
    pub x0: f64,
    pub discount: f64,
    #[serde(default = "default_u_max")]
    pub u_max: f64,
}

fn default_u_max() -> f64 {
    1.0
}

impl HarvestModel {
    /// Checks `K > 0`, `X₀ > 0`, `δ > 0`, `u_max > 0` and `σ > −1` on the grid.
    pub fn validate(&self, grid: &TimeGrid) -> Result<()> {
        let positive = [
            ("catchability", self.catchability),
            ("x0", self.x0),
            ("discount", self.discount),
            ("u_max", self.u_max),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        let g = &self.growth;
        if ![g.base, g.memory, g.decay, self.volatility.level, self.volatility.slope].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("growth and volatility parameters must be finite"));
        }
        if let Some(t) = grid.points().iter().find(|&&t| self.volatility.at(t) <= -1.0) {
            return Err(Error::invalid(format!("volatility must stay above -1, σ({t}) = {}", self.volatility.at(*t))));
        }
        Ok(())
    }

    pub fn sigma(&self, t: f64) -> f64 {
        self.volatility.at(t)
    }

    pub fn target(&self, t: f64, horizon: f64) -> f64 {
        (-self.discount * (horizon - t)).exp() / self.catchability
    }

    pub fn objective(&self, horizon: f64) -> HarvestObjective {
        HarvestObjective { discount: self.discount, horizon }
    }

    /// Admissible controls `[0, u_max]`.
    pub fn policy(&self, kind: ControlKind) -> ControlPolicy {
        ControlPolicy { kind, lower: 0.0, upper: self.u_max, perturbation: None }
    }
}

impl VolterraModel for HarvestModel {
    fn initial_value(&self) -> f64 {
        self.x0
    }
    fn drift(&self, t: f64, s: f64, _r: Rates, u: f64, x: f64) -> f64 {
        (self.growth.r(t, s) - self.catchability * u) * x
    }
    fn noise(&self, _t: f64, s: f64, z: f64, _r: Rates, _u: f64, x: f64) -> f64 {
        if z == 0.0 {
            self.sigma(s) * x
        } else {
            0.0
        }
    }
    fn convolution_free(&self) -> bool {
        !self.growth.has_memory()
    }
    fn noise_time_free(&self) -> bool {
        true
    }
    fn time_derivatives(&self) -> TimeDerivatives {
        TimeDerivatives::Analytic
    }
    fn drift_dt(&self, t: f64, s: f64, _r: Rates, _u: f64, x: f64) -> Option<f64> {
        Some(self.growth.dt(t, s) * x)
    }
    fn noise_dt(&self, _t: f64, _s: f64, _z: f64, _r: Rates, _u: f64, _x: f64) -> Option<f64> {
        Some(0.0)
    }
    fn drift_dx(&self, t: f64, s: f64, _r: Rates, u: f64, _x: f64) -> Option<f64> {
        Some(self.growth.r(t, s) - self.catchability * u)
    }
    fn drift_du(&self, _t: f64, _s: f64, _r: Rates, _u: f64, x: f64) -> Option<f64> {
        Some(-self.catchability * x)
    }
    fn noise_dx(&self, _t: f64, s: f64, z: f64, _r: Rates, _u: f64, _x: f64) -> Option<f64> {
        Some(if z == 0.0 { self.sigma(s) } else { 0.0 })
    }
    fn noise_du(&self, _t: f64, _s: f64, _z: f64, _r: Rates, _u: f64, _x: f64) -> Option<f64> {
        Some(0.0)
    }
}

/// `F = e^{−δ(T−t)} u x`, `G = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarvestObjective {
    pub discount: f64,
    pub horizon: f64,
}

impl HarvestObjective {
    pub fn weight(&self, t: f64) -> f64 {
        (-self.discount * (self.horizon - t)).exp()
    }
}

impl Objective for HarvestObjective {
    fn running(&self, t: f64, _r: Rates, u: f64, x: f64) -> f64 {
        self.weight(t) * u * x
    }
    fn terminal(&self, _x: f64) -> f64 {
        0.0
    }
    fn running_dx(&self, t: f64, _r: Rates, u: f64, _x: f64) -> f64 {
        self.weight(t) * u
    }
    fn running_du(&self, t: f64, _r: Rates, _u: f64, x: f64) -> f64 {
        self.weight(t) * x
    }
    fn terminal_dx(&self, _x: f64) -> f64 {
        0.0
    }
}

const TILDE_R_PANELS: usize = 256;

/// `r̃(t) = r(t,t) + ∫_0^t ∂_t r(t,s) ds`, composite Simpson on a fixed panel count.
pub fn tilde_r(model: &HarvestModel, t: f64) -> f64 {
    let g = &model.growth;
    if t <= 0.0 || !g.has_memory() {
        return g.r(t, t);
    }
    let n = TILDE_R_PANELS;
    let h = t / n as f64;
    let mut acc = g.dt(t, 0.0) + g.dt(t, t);
    for k in 1..n {
        acc += if k % 2 == 1 { 4.0 } else { 2.0 } * g.dt(t, k as f64 * h);
    }
    g.r(t, t) + acc * h / 3.0
}

/// Log-Euler step on the differential form:
/// `X_{m+1} = X_m exp((r(t_m,t_m) − K u_m + A_m / X_m) Δt − ½ σ² ΔΛ^B + σ dB)` with
/// `A_m = Σ_{i<m} ∂_t r(t_m, t_i) X_i Δt_i`. A path that reaches 0 stays there.
pub fn forward(model: &HarvestModel, policy: &ControlPolicy, view: &PathView<'_>) -> Result<StatePath> {
    let g = view.grid;
    let m_steps = g.n_steps();
    let memory = model.growth.has_memory();
    let mut x = Vec::with_capacity(m_steps + 1);
    let mut u = Vec::with_capacity(m_steps + 1);
    x.push(model.x0);
    for m in 0..m_steps {
        let t = g.t(m);
        let rates = view.rate.rates(m);
        let xm = x[m];
        u.push(policy.value(view.index, m, t, xm, rates));
        if xm <= 0.0 {
            x.push(0.0);
            continue;
        }
        let a = if memory {
            (0..m).map(|i| model.growth.dt(t, g.t(i)) * x[i] * g.dt(i)).sum::<f64>()
        } else {
            0.0
        };
        let s = model.sigma(t);
        let expo = (model.growth.r(t, t) - model.catchability * u[m] + a / xm) * g.dt(m)
            - 0.5 * s * s * view.rate.step_mass_b(m)
            + s * view.noise.d_b[m];
        let next = xm * expo.exp();
        if !next.is_finite() || next > BLOWUP_LIMIT {
            return Err(Error::NumericalBlowup { path: view.index, index: m + 1 });
        }
        x.push(next);
    }
    u.push(policy.value(view.index, m_steps, g.t(m_steps), x[m_steps], view.rate.rates(m_steps)));
    Ok(StatePath { x, u })
}

pub fn forward_ensemble(model: &HarvestModel, policy: &ControlPolicy, ens: &Ensemble) -> Result<Vec<StatePath>> {
    (0..ens.n_paths()).into_par_iter().map(|k| forward(model, policy, &ens.path(k))).collect()
}

/// First grid index with `X ≤ 0`, or `M` when the path stays positive.
pub fn stopping_index(state: &StatePath) -> usize {
    state.x.iter().position(|&x| x <= 0.0).unwrap_or(state.x.len() - 1)
}

/// `Σ_i e^{−δ(T−t_i)} X_i u_i Δt_i` for one path.
pub fn path_reward(model: &HarvestModel, grid: &TimeGrid, state: &StatePath) -> f64 {
    let obj = model.objective(grid.horizon());
    (0..grid.n_steps()).map(|i| obj.weight(grid.t(i)) * state.x[i] * state.u[i] * grid.dt(i)).sum()
}

pub fn rewards(model: &HarvestModel, policy: &ControlPolicy, ens: &Ensemble) -> Result<Vec<f64>> {
    forward_ensemble(model, policy, ens).map(|states| states.iter().map(|s| path_reward(model, &ens.grid, s)).collect())
}

pub fn evaluate_j(model: &HarvestModel, policy: &ControlPolicy, ens: &Ensemble) -> Result<Estimate> {
    rewards(model, policy, ens).map(|r| Estimate::from_samples(&r))
}

/// Default regression features for both adjoint routes.
pub fn default_features(degree: u32) -> FeatureMap {
    FeatureMap::new(Flow::F, degree, vec![Feature::State, Feature::RateB, Feature::CumB, Feature::BrownianRunning])
}

/// Pathwise formula targets `(M(T)/M(t_i)) Σ_{l≥i} e^{Σ_{i≤v<l} ã_v Δt} e^{−δ(T−t_l)} u_l Δt`
/// with `ã = r̃ − K u`; `targets[i][path]` for `i = 0..=M`.
pub fn formula_targets(model: &HarvestModel, ens: &Ensemble, states: &[StatePath]) -> Vec<Vec<f64>> {
    let g = &ens.grid;
    let m = g.n_steps();
    let obj = model.objective(g.horizon());
    let rt: Vec<f64> = (0..m).map(|i| tilde_r(model, g.t(i))).collect();
    let density = girsanov_density(|t| model.sigma(t), ens);
    let per_path: Vec<Vec<f64>> = states
        .par_iter()
        .zip(density.par_iter())
        .map(|(s, dens)| {
            // backward recursion: I_i = e^{−δ(T−t_i)} u_i Δt + e^{ã_i Δt} I_{i+1}
            let mut inner = vec![0.0; m + 1];
            for i in (0..m).rev() {
                let a = rt[i] - model.catchability * s.u[i];
                inner[i] = obj.weight(g.t(i)) * s.u[i] * g.dt(i) + (a * g.dt(i)).exp() * inner[i + 1];
            }
            (0..=m).map(|i| dens[m] / dens[i] * inner[i]).collect()
        })
        .collect();
    (0..=m).map(|i| per_path.iter().map(|v| v[i]).collect()).collect()
}

/// `Ê[p(t_i)|𝓕_{t_i}]` per slice and path by `𝔽` regression of `targets`.
pub fn project_f(targets: &[Vec<f64>], map: &FeatureMap, ens: &Ensemble, states: &[StatePath]) -> Result<Vec<Vec<f64>>> {
    let map = map.with_flow(Flow::F);
    targets
        .iter()
        .enumerate()
        .map(|(i, y)| {
            if y.iter().all(|&v| v == 0.0) {
                return Ok(y.clone());
            }
            let d = map.design(ens, Some(states), i).map_err(|e| e.in_context(format!("slice {i}")))?;
            d.fit(y).map(|f| f.predictions)
        })
        .collect()
}

/// Formula route: projected pathwise targets.
pub fn adjoint_formula(
    model: &HarvestModel,
    ens: &Ensemble,
    states: &[StatePath],
    map: &FeatureMap,
) -> Result<Vec<Vec<f64>>> {
    project_f(&formula_targets(model, ens, states), map, ens, states)
}

/// Backward-solver route on the adjoint equation under `𝔾`.
pub fn adjoint_bsde(
    model: &HarvestModel,
    ens: &Ensemble,
    states: &[StatePath],
    map: &FeatureMap,
    input: DriverInput,
) -> Result<BsdeSolution> {
    let g = &ens.grid;
    let obj = model.objective(g.horizon());
    let rt: Vec<f64> = (0..g.n_steps()).map(|i| tilde_r(model, g.t(i))).collect();
    let driver = |a: &DriverArgs<'_>| {
        let u = states[a.path].u[a.i];
        obj.weight(a.t) * u + (rt[a.i] - model.catchability * u) * a.p + model.sigma(a.t) * a.q0 * a.rates.b
    };
    let spec = BsdeSpec {
        terminal: vec![0.0; ens.n_paths()],
        driver: &driver,
        features: map.with_flow(Flow::G),
        driver_input: input,
    };
    solve_backward(&spec, ens, Some(states))
}

/// `‖a − b‖ / ‖b‖` over all slices and paths.
pub fn relative_discrepancy(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (ra, rb) in a.iter().zip(b) {
        for (x, y) in ra.iter().zip(rb) {
            num += (x - y).powi(2);
            den += y * y;
        }
    }
    if den == 0.0 {
        return if num == 0.0 { 0.0 } else { f64::INFINITY };
    }
    (num / den).sqrt()
}

fn slice_means(v: &[Vec<f64>]) -> Vec<f64> {
    v.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateOptions {
    pub damping: f64,
    pub max_iter: usize,
    /// Residual tolerance relative to `sup_t K⁻¹ e^{−δ(T−t)}`.
    pub rel_tol: f64,
    pub degree: u32,
}

impl Default for CandidateOptions {
    fn default() -> Self {
        Self { damping: 0.5, max_iter: 50, rel_tol: 0.02, degree: 2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarvestSolution {
    pub times: Vec<f64>,
    /// Deterministic candidate on the grid.
    pub u_hat: Vec<f64>,
    pub target: Vec<f64>,
    /// Slice means of the projected formula route.
    pub p_formula: Vec<f64>,
    /// Slice means of the projected backward-solver route.
    pub p_bsde: Vec<f64>,
    pub residual: Vec<f64>,
    pub sup_residual: f64,
    pub target_sup: f64,
    /// Per-path discrete stopping index.
    pub tau: Vec<usize>,
    pub iterations: usize,
    /// Largest control change in the last iteration.
    pub last_update: f64,
    /// `sup_residual ≤ rel_tol · target_sup`.
    pub converged: bool,
    /// Ensemble L² relative gap between the two projected routes.
    pub route_gap: f64,
}

impl HarvestSolution {
    /// Plot data: `t,u_hat,target,p_formula,p_bsde,residual`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "u_hat", "target", "p_formula", "p_bsde", "residual"])?;
        for i in 0..self.times.len() {
            w.write_record([
                self.times[i].to_string(),
                self.u_hat[i].to_string(),
                self.target[i].to_string(),
                self.p_formula[i].to_string(),
                self.p_bsde[i].to_string(),
                self.residual[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn policy(&self, model: &HarvestModel) -> ControlPolicy {
        model.policy(ControlKind::OnGrid(self.u_hat.clone()))
    }
}

/// Damped fixed-point search over deterministic grid controls:
/// `u ← (1 − γ) u + γ · argmax_{[0, u_max]} (e^{−δ(T−t)} − K p̂(t)) u`,
/// where `p̂(t_i)` leaves out the reward of step `i` itself.
///
/// For a deterministic control `ã` and `u` are deterministic, so `p` is too and
/// `Ê[p|𝓕_t]` is estimated during the iterations by the ensemble mean of the
/// formula targets. Controls after the earliest discrete stopping time are
/// frozen. Both projected routes are computed once at the end.
pub fn solve_candidate(model: &HarvestModel, ens: &Ensemble, opts: &CandidateOptions) -> Result<HarvestSolution> {
    model.validate(&ens.grid)?;
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::invalid(format!("damping must lie in (0, 1], got {}", opts.damping)));
    }
    let g = &ens.grid;
    let m = g.n_steps();
    let horizon = g.horizon();
    let times: Vec<f64> = g.points().to_vec();
    let target: Vec<f64> = times.iter().map(|&t| model.target(t, horizon)).collect();
    let target_sup = target.iter().copied().fold(0.0, f64::max);
    let tol = opts.rel_tol * target_sup;
    let obj = model.objective(horizon);

    let mut u = vec![model.u_max; m + 1];
    let mut iterations = 0;
    let mut last_update = f64::INFINITY;
    let mut states;
    let mut p_hat;
    loop {
        states = forward_ensemble(model, &model.policy(ControlKind::OnGrid(u.clone())), ens)?;
        p_hat = slice_means(&formula_targets(model, ens, &states));
        let residual = p_hat.iter().zip(&target).map(|(p, t)| (p - t).abs()).fold(0.0, f64::max);
        if residual <= tol || iterations >= opts.max_iter || last_update <= 1e-12 {
            break;
        }
        let tau = states.iter().map(stopping_index).min().unwrap_or(m);
        let mut change: f64 = 0.0;
        for i in 0..=tau.min(m) {
            // u_i only moves X after t_i, so its marginal value uses the adjoint
            // without the own-step reward e^{−δ(T−t_i)} u_i Δt
            let own = if i < m { obj.weight(times[i]) * u[i] * g.dt(i) } else { 0.0 };
            let slope = obj.weight(times[i]) - model.catchability * (p_hat[i] - own);
            let best = if slope > 0.0 {
                model.u_max
            } else if slope < 0.0 {
                0.0
            } else {
                u[i]
            };
            let next = (1.0 - opts.damping) * u[i] + opts.damping * best;
            change = change.max((next - u[i]).abs());
            u[i] = next;
        }
        last_update = change;
        iterations += 1;
    }

    let map = default_features(opts.degree);
    let formula = adjoint_formula(model, ens, &states, &map)?;
    let bsde = adjoint_bsde(model, ens, &states, &map, DriverInput::Smoothed)?;
    let bsde_f = project_f(&bsde.p, &map, ens, &states)?;
    let p_formula = slice_means(&formula);
    let residual: Vec<f64> = p_formula.iter().zip(&target).map(|(p, t)| (p - t).abs()).collect();
    let sup_residual = residual.iter().copied().fold(0.0, f64::max);
    Ok(HarvestSolution {
        times,
        u_hat: u,
        target,
        p_bsde: slice_means(&bsde_f),
        route_gap: relative_discrepancy(&bsde_f[..m], &formula[..m]),
        p_formula,
        residual,
        sup_residual,
        target_sup,
        tau: states.iter().map(stopping_index).collect(),
        iterations,
        last_update,
        converged: sup_residual <= tol,
    })
}

/// `(u, Ĵ(u))` for `n` equispaced constant controls on `[0, u_max]`, paired
/// against `reference` on the same noise: `(u, J(u), J(reference) − J(u))`.
pub fn constant_scan(
    model: &HarvestModel,
    reference: &ControlPolicy,
    ens: &Ensemble,
    n: usize,
) -> Result<Vec<(f64, Estimate, Estimate)>> {
    let base = rewards(model, reference, ens)?;
    (0..n)
        .map(|k| {
            let c = model.u_max * k as f64 / (n.max(2) - 1) as f64;
            let r = rewards(model, &model.policy(ControlKind::Constant(c)), ens)?;
            let diff: Vec<f64> = base.iter().zip(&r).map(|(a, b)| a - b).collect();
            Ok((c, Estimate::from_samples(&r), Estimate::from_samples(&diff)))
        })
        .collect()
}

/// Scan results as CSV: `u,J,se,gap,gap_se`.
pub fn write_scan_csv<W: Write>(scan: &[(f64, Estimate, Estimate)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["u", "J", "se", "gap", "gap_se"])?;
    for (u, j, d) in scan {
        w.write_record([u.to_string(), j.mean.to_string(), j.se.to_string(), d.mean.to_string(), d.se.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Closed form of `J` for `σ ≡ 0`, constant `r = c` and constant `u₀`:
/// `u₀ X₀ e^{−δT} (e^{aT} − 1)/a` with `a = δ + c − K u₀`.
pub fn deterministic_j(c: f64, catchability: f64, x0: f64, discount: f64, u0: f64, horizon: f64) -> f64 {
    let a = discount + c - catchability * u0;
    let integral = if a.abs() < 1e-12 { horizon } else { ((a * horizon).exp() - 1.0) / a };
    u0 * x0 * (-discount * horizon).exp() * integral
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::MarkGrid;
    use crate::rng::EnsembleHandle;
    use crate::timechange::{RateModel, RateSpec};
    use crate::volterra::{solve_direct, solve_differential};

    fn model(sigma: f64) -> HarvestModel {
        HarvestModel {
            growth: GrowthKernel::constant(0.9),
            volatility: Volatility { level: sigma, slope: 0.0 },
            catchability: 1.0,
            x0: 1.0,
            discount: 0.2,
            u_max: 1.0,
        }
    }

    fn ens(n: usize, steps: usize, horizon: f64, stochastic: bool) -> Ensemble {
        let spec = if stochastic {
            RateSpec {
                gauss: RateModel::MeanRevertingSqrt { initial: 1.0, speed: 1.0, mean: 1.0, vol: 0.5 },
                ..RateSpec::constant(1.0, 0.0)
            }
        } else {
            RateSpec::constant(1.0, 0.0)
        };
        Ensemble::simulate(
            TimeGrid::uniform(horizon, steps).unwrap(),
            MarkGrid::empty(),
            &spec,
            EnsembleHandle::new(n, 5).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn tilde_r_cases() {
        let mut m = model(0.0);
        m.growth = GrowthKernel::constant(0.7);
        assert_eq!(tilde_r(&m, 0.8), 0.7);
        m.growth = GrowthKernel { base: 0.0, memory: 1.0, decay: 1.0 };
        assert_eq!(tilde_r(&m, 0.0), 1.0);
        for t in [0.1, 0.5, 1.3] {
            // r(t,t) + (e^{−t} − 1)
            assert!((tilde_r(&m, t) - (-t as f64).exp()).abs() < 1e-10);
        }
    }

    #[test]
    fn validation() {
        let g = TimeGrid::uniform(1.0, 10).unwrap();
        assert!(model(0.2).validate(&g).is_ok());
        let mut m = model(0.2);
        m.catchability = -1.0;
        assert!(m.validate(&g).unwrap_err().to_string().contains("catchability"));
        let mut m = model(0.2);
        m.volatility = Volatility { level: -0.5, slope: -1.0 };
        assert!(m.validate(&g).is_err());
    }

    #[test]
    fn zero_control_gives_zero() {
        let e = ens(50, 20, 1.0, true);
        let m = model(0.3);
        let pol = m.policy(ControlKind::Constant(0.0));
        assert_eq!(evaluate_j(&m, &pol, &e).unwrap().mean, 0.0);
        let states = forward_ensemble(&m, &pol, &e).unwrap();
        assert!(formula_targets(&m, &e, &states).iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_j_matches_closed_form() {
        let m = model(0.0);
        for steps in [100, 400] {
            let e = ens(4, steps, 2.0, false);
            for u0 in [0.0, 0.3, 1.0] {
                let j = evaluate_j(&m, &m.policy(ControlKind::Constant(u0)), &e).unwrap();
                let exact = deterministic_j(0.9, 1.0, 1.0, 0.2, u0, 2.0);
                let a = 0.2 + 0.9 - u0;
                let sup_f = u0 * (a.abs() * 2.0).exp() * (0.2f64 * 2.0).exp().max(1.0);
                let bound = 1e-8 + 0.5 * (2.0 / steps as f64) * 2.0 * a.abs() * sup_f;
                assert!((j.mean - exact).abs() <= bound, "{steps} {u0} {} {exact}", j.mean);
                assert_eq!(j.se, 0.0);
            }
        }
    }

    #[test]
    fn log_euler_tracks_direct_solver() {
        let mut m = model(0.0);
        m.growth = GrowthKernel { base: 0.3, memory: 0.4, decay: 2.0 };
        let pol = m.policy(ControlKind::Constant(0.5));
        let gap = |steps: usize| {
            let e = ens(1, steps, 1.0, false);
            let a = forward(&m, &pol, &e.path(0)).unwrap();
            let b = solve_differential(&m, &pol, &e.path(0)).unwrap().state;
            let c = solve_direct(&m, &pol, &e.path(0)).unwrap();
            let ab = a.x.iter().zip(&b.x).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            let ac = a.x.iter().zip(&c.x).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            (ab, ac)
        };
        let (g1, _) = gap(100);
        let (g2, d2) = gap(200);
        assert!(g1 < 1e-2 && g2 < g1 * 0.7, "{g1} {g2}");
        assert!(d2 < 1e-2);
    }

    #[test]
    fn positivity() {
        let mut m = model(0.9);
        m.catchability = 5.0;
        let e = ens(500, 50, 1.0, true);
        let states = forward_ensemble(&m, &m.policy(ControlKind::Constant(1.0)), &e).unwrap();
        assert!(states.iter().all(|s| s.x.iter().all(|&x| x > 0.0)));
        assert!(states.iter().all(|s| stopping_index(s) == 50));
    }

    #[test]
    fn formula_matches_closed_form_when_deterministic() {
        let m = model(0.0);
        let e = ens(20, 400, 2.0, false);
        let u0 = 0.4;
        let states = forward_ensemble(&m, &m.policy(ControlKind::Constant(u0)), &e).unwrap();
        let p = formula_targets(&m, &e, &states);
        for i in [0, 100, 300] {
            let t = e.grid.t(i);
            // u₀ ∫_t^T e^{(c − K u₀)(s − t)} e^{−δ(T − s)} ds
            let a = 0.9 - u0 + 0.2;
            let exact = u0 * (-0.2 * (2.0 - t)).exp() * ((a * (2.0 - t)).exp() - 1.0) / a;
            assert!((p[i][3] - exact).abs() < 0.02 * exact, "{i} {} {exact}", p[i][3]);
        }
    }

    #[test]
    fn routes_agree_for_feedback_control() {
        let m = model(0.3);
        let e = ens(4000, 40, 1.0, true);
        let pol = m.policy(ControlKind::Feedback(std::sync::Arc::new(|_t: f64, x: f64, _r: Rates| 0.5 * x)));
        let states = forward_ensemble(&m, &pol, &e).unwrap();
        let map = default_features(2);
        let a = adjoint_formula(&m, &e, &states, &map).unwrap();
        let sol = adjoint_bsde(&m, &e, &states, &map, DriverInput::Smoothed).unwrap();
        let b = project_f(&sol.p, &map, &e, &states).unwrap();
        let gap = relative_discrepancy(&b[..40], &a[..40]);
        assert!(gap < 0.05, "{gap}");
    }

    #[test]
    fn candidate_is_bang_bang_with_interior_switch() {
        let m = model(0.2);
        let e = ens(2000, 50, 2.0, true);
        let sol = solve_candidate(&m, &e, &CandidateOptions::default()).unwrap();
        // switch length ln(1 + a)/a with a = r − K u_max + δ
        let a: f64 = 0.1;
        let switch = 2.0 - (1.0 + a).ln() / a;
        for (t, u) in sol.times.iter().zip(&sol.u_hat) {
            if (t - switch).abs() > 0.1 {
                let expected = if *t < switch { 0.0 } else { 1.0 };
                assert!((u - expected).abs() < 1e-9, "t = {t}, u = {u}");
            }
        }
        assert!(sol.route_gap < 0.05, "{}", sol.route_gap);
        // p(T) = 0 while the target at T is 1/K
        assert!((sol.residual[50] - 1.0).abs() < 1e-12);
        assert!(!sol.converged);
    }
}
