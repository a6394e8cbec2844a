//! Hamiltonians under `𝔾` and `𝔽`, sufficient maximum-principle checks,
//! and the gradient identity for bump perturbations.
//!
//! `𝓗 = H₀ + H₁` with
//! `H₀ = F + b(t,t) p + κ(t,t,0) q(0) λ^B + Σ_j κ(t,t,z_j) q(z_j) λ^H ν_j` and
//! `H₁ = ∫_0^t ∂_t b(t,s) ds p + ∫_0^t ∫ ∂_t κ(t,s,z) 𝒟_{s,z} p(t) Λ(ds dz)`.
//! `H₁` depends on the past of `(u, X)` only, so it is evaluated once per
//! `(t, path)` and the control enters through `H₀`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::{solve_backward, BsdeSolution, BsdeSpec, DriverArgs, DriverInput};
use crate::condexp::{FeatureMap, Flow};
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::grid::MarkSet;
use crate::naderiv::NaEstimator;
use crate::stats::Estimate;
use crate::timechange::Rates;
use crate::volterra::{drift_dt, first_variation, noise_dt, solve_direct, ControlPolicy, Perturbation, StatePath, VolterraModel};

/// Running reward `F` and terminal reward `G` with their derivatives.
pub trait Objective: Sync {
    fn running(&self, t: f64, rates: Rates, u: f64, x: f64) -> f64;
    fn terminal(&self, x: f64) -> f64;
    fn running_dx(&self, t: f64, rates: Rates, u: f64, x: f64) -> f64;
    fn running_du(&self, t: f64, rates: Rates, u: f64, x: f64) -> f64;
    fn terminal_dx(&self, x: f64) -> f64;
}

/// Adjoint values per slice and path, either the `𝔾` solution or its
/// `𝔽` projection.
#[derive(Debug, Clone)]
pub struct Adjoint {
    pub flow: Flow,
    /// `p[i][path]` for `i = 0..=M`.
    pub p: Vec<Vec<f64>>,
    /// `q0[i][path]` for `i < M`.
    pub q0: Vec<Vec<f64>>,
    /// `qz[i][j][path]` for `i < M`.
    pub qz: Vec<Vec<Vec<f64>>>,
    /// `∫_0^t ∫ ∂_t κ 𝒟p(t) dΛ` per slice and path, when `∂_t κ ≠ 0`.
    pub kappa_memory: Option<Vec<Vec<f64>>>,
    /// Set when `kappa_memory` comes from the experimental derivative estimate.
    pub approximate: bool,
}

impl Adjoint {
    /// The `p` entering the Hamiltonian at `t_i` is `Ê[p(t_{i+1}) | 𝓖_{t_i}]`,
    /// which pairs with the explicit forward step; it differs from `p(t_i)`
    /// by the driver increment `g Δt`.
    pub fn from_bsde(sol: &BsdeSolution) -> Self {
        let mut p = sol.p_next.clone();
        p.push(sol.p[sol.p.len() - 1].clone());
        Self {
            flow: Flow::G,
            p,
            q0: sol.q0.clone(),
            qz: sol.qz.clone(),
            kappa_memory: None,
            approximate: false,
        }
    }

    /// Replace every `𝔾` quantity by its regression on `𝔽` features.
    pub fn project(&self, map: &FeatureMap, ens: &Ensemble, states: Option<&[StatePath]>) -> Result<Self> {
        let map = map.with_flow(Flow::F);
        let m = ens.grid.n_steps();
        let mut p = Vec::with_capacity(m + 1);
        let mut q0 = Vec::with_capacity(m);
        let mut qz = Vec::with_capacity(m);
        let mut kappa = self.kappa_memory.as_ref().map(|_| Vec::with_capacity(m + 1));
        for i in 0..=m {
            let d = map.design(ens, states, i).map_err(|e| e.in_context(format!("slice {i}")))?;
            p.push(d.fit(&self.p[i])?.predictions);
            if i < m {
                q0.push(d.fit(&self.q0[i])?.predictions);
                qz.push(self.qz[i].iter().map(|q| d.fit(q).map(|f| f.predictions)).collect::<Result<_>>()?);
            }
            if let (Some(out), Some(src)) = (kappa.as_mut(), self.kappa_memory.as_ref()) {
                out.push(d.fit(&src[i])?.predictions);
            }
        }
        Ok(Self { flow: Flow::F, p, q0, qz, kappa_memory: kappa, approximate: self.approximate })
    }

    /// Experimental: estimate `∫_0^t ∫ ∂_t κ 𝒟_{s,z} p(t) Λ(ds dz)` by
    /// applying the NA-derivative estimator to every slice of `p`.
    pub fn with_derivative_term<M: VolterraModel + ?Sized>(
        mut self,
        model: &M,
        ens: &Ensemble,
        states: &[StatePath],
        estimator: &mut NaEstimator<'_>,
        level: u32,
    ) -> Result<Self> {
        let m = ens.grid.n_steps();
        let h = ens.grid.step() / 10.0;
        let mut memory = Vec::with_capacity(m + 1);
        for i in 0..=m {
            let field = estimator.estimate(&self.p[i], level)?;
            let ti = ens.grid.t(i);
            let row: Vec<f64> = (0..ens.n_paths())
                .map(|k| {
                    let (r, s) = (&ens.rates[k], &states[k]);
                    let mut acc = 0.0;
                    for l in 0..i {
                        let tl = ens.grid.t(l);
                        let rl = r.rates(l);
                        acc += noise_dt(model, h, ti, tl, 0.0, rl, s.u[l], s.x[l])?
                            * field.at(k, l, MarkSet::Gauss)
                            * r.step_mass_b(l);
                        for j in 0..ens.marks.len() {
                            acc += noise_dt(model, h, ti, tl, ens.marks.z(j), rl, s.u[l], s.x[l])?
                                * field.at(k, l, MarkSet::Bin(j))
                                * r.step_mass_h(l)
                                * ens.marks.weight(j);
                        }
                    }
                    Ok(acc)
                })
                .collect::<Result<_>>()?;
            memory.push(row);
        }
        self.kappa_memory = Some(memory);
        self.approximate = true;
        Ok(self)
    }
}

/// Everything needed to evaluate the Hamiltonian along one controlled ensemble.
pub struct Hamiltonian<'a, M: ?Sized, O: ?Sized> {
    pub model: &'a M,
    pub objective: &'a O,
    pub ens: &'a Ensemble,
    pub states: &'a [StatePath],
    pub adjoint: &'a Adjoint,
    /// `∫_0^{t_i} ∂_t b(t_i, s) ds` per slice and path.
    drift_memory: Vec<Vec<f64>>,
}

impl<'a, M: VolterraModel + ?Sized, O: Objective + ?Sized> Hamiltonian<'a, M, O> {
    pub fn new(
        model: &'a M,
        objective: &'a O,
        ens: &'a Ensemble,
        states: &'a [StatePath],
        adjoint: &'a Adjoint,
    ) -> Result<Self> {
        if !model.noise_time_free() && adjoint.kappa_memory.is_none() {
            return Err(Error::UnsupportedModel(
                "∂_t κ ≠ 0 needs the NA-derivative of p (experimental derivative term)".into(),
            ));
        }
        let m = ens.grid.n_steps();
        let h = ens.grid.step() / 10.0;
        let drift_memory = if model.convolution_free() {
            vec![vec![0.0; ens.n_paths()]; m + 1]
        } else {
            (0..=m)
                .map(|i| {
                    (0..ens.n_paths())
                        .into_par_iter()
                        .map(|k| {
                            let (r, s) = (&ens.rates[k], &states[k]);
                            (0..i).try_fold(0.0, |acc, l| {
                                let d = drift_dt(model, h, ens.grid.t(i), ens.grid.t(l), r.rates(l), s.u[l], s.x[l])?;
                                Ok(acc + d * ens.grid.dt(l))
                            })
                        })
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<_>>()?
        };
        Ok(Self { model, objective, ens, states, adjoint, drift_memory })
    }

    pub fn flow(&self) -> Flow {
        self.adjoint.flow
    }

    fn q_slice(&self, i: usize) -> usize {
        i.min(self.ens.grid.n_steps() - 1)
    }

    /// `H₀(t_i, u, x)` on path `k`; at `t = T` the last `q` slice is reused.
    pub fn h0(&self, i: usize, k: usize, u: f64, x: f64) -> f64 {
        let t = self.ens.grid.t(i);
        let r = self.ens.rates[k].rates(i);
        let qi = self.q_slice(i);
        let mut h = self.objective.running(t, r, u, x)
            + self.model.drift(t, t, r, u, x) * self.adjoint.p[i][k]
            + self.model.noise(t, t, 0.0, r, u, x) * self.adjoint.q0[qi][k] * r.b;
        for j in 0..self.ens.marks.len() {
            h += self.model.noise(t, t, self.ens.marks.z(j), r, u, x)
                * self.adjoint.qz[qi][j][k]
                * r.h
                * self.ens.marks.weight(j);
        }
        h
    }

    /// `H₁(t_i)` on path `k`.
    pub fn h1(&self, i: usize, k: usize) -> f64 {
        let kappa = self.adjoint.kappa_memory.as_ref().map_or(0.0, |m| m[i][k]);
        self.drift_memory[i][k] * self.adjoint.p[i][k] + kappa
    }

    pub fn value(&self, i: usize, k: usize, u: f64, x: f64) -> f64 {
        self.h0(i, k, u, x) + self.h1(i, k)
    }

    /// Value along the solved state and control.
    pub fn along_path(&self, i: usize, k: usize) -> f64 {
        self.value(i, k, self.states[k].u[i], self.states[k].x[i])
    }

    /// `∂_u 𝓗` at `(t_i, u, x)`: analytic when the model supplies `∂_u b`
    /// and `∂_u κ`, else a central difference with step `fd_step`.
    pub fn du(&self, i: usize, k: usize, u: f64, x: f64, fd_step: f64) -> f64 {
        let t = self.ens.grid.t(i);
        let r = self.ens.rates[k].rates(i);
        let qi = self.q_slice(i);
        let analytic = (|| {
            let mut d = self.objective.running_du(t, r, u, x)
                + self.model.drift_du(t, t, r, u, x)? * self.adjoint.p[i][k]
                + self.model.noise_du(t, t, 0.0, r, u, x)? * self.adjoint.q0[qi][k] * r.b;
            for j in 0..self.ens.marks.len() {
                d += self.model.noise_du(t, t, self.ens.marks.z(j), r, u, x)?
                    * self.adjoint.qz[qi][j][k]
                    * r.h
                    * self.ens.marks.weight(j);
            }
            Some(d)
        })();
        analytic.unwrap_or_else(|| (self.h0(i, k, u + fd_step, x) - self.h0(i, k, u - fd_step, x)) / (2.0 * fd_step))
    }
}

/// Adjoint BSDE `dp = −∂_x 𝓗 dt + ∫ q dμ`, `p(T) = ∂_x G(X(T))` for a
/// convolution-free model, where
/// `∂_x 𝓗 = ∂_x F + ∂_x b p + ∂_x κ(·,0) q(0) λ^B + Σ_j ∂_x κ(·,z_j) q(z_j) λ^H ν_j`.
/// Kernels with memory lead to a backward Volterra equation, which is not
/// handled here.
pub fn solve_adjoint<M: VolterraModel + ?Sized, O: Objective + ?Sized>(
    model: &M,
    objective: &O,
    ens: &Ensemble,
    states: &[StatePath],
    features: FeatureMap,
    input: DriverInput,
) -> Result<BsdeSolution> {
    if !model.convolution_free() {
        return Err(Error::UnsupportedModel("the generic adjoint needs a convolution-free model".into()));
    }
    let missing = || Error::UnsupportedModel("the adjoint needs ∂_x b and ∂_x κ".into());
    let r0 = ens.rates[0].rates(0);
    let s0 = &states[0];
    model.drift_dx(0.0, 0.0, r0, s0.u[0], s0.x[0]).ok_or_else(missing)?;
    model.noise_dx(0.0, 0.0, 0.0, r0, s0.u[0], s0.x[0]).ok_or_else(missing)?;
    let marks = &ens.marks;
    let driver = |a: &DriverArgs<'_>| {
        let (u, x) = (states[a.path].u[a.i], states[a.path].x[a.i]);
        let (t, r) = (a.t, a.rates);
        let mut g = objective.running_dx(t, r, u, x)
            + model.drift_dx(t, t, r, u, x).unwrap_or(0.0) * a.p
            + model.noise_dx(t, t, 0.0, r, u, x).unwrap_or(0.0) * a.q0 * r.b;
        for j in 0..marks.len() {
            g += model.noise_dx(t, t, marks.z(j), r, u, x).unwrap_or(0.0) * a.qz[j] * r.h * marks.weight(j);
        }
        g
    };
    let terminal = states.iter().map(|s| objective.terminal_dx(s.x[s.x.len() - 1])).collect();
    let spec = BsdeSpec { terminal, driver: &driver, features: features.with_flow(Flow::G), driver_input: input };
    solve_backward(&spec, ens, Some(states))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationarityRow {
    pub t: f64,
    /// Ensemble mean of the candidate control.
    pub u: f64,
    pub mean_du: f64,
    pub se_du: f64,
    pub interior: bool,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NecessaryReport {
    pub rows: Vec<StationarityRow>,
    pub interior_points: usize,
    pub interior_ok: bool,
    pub boundary_ok: bool,
}

impl NecessaryReport {
    /// CSV with columns `t,u,mean_du,se_du,interior,ok`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "u", "mean_du", "se_du", "interior", "ok"])?;
        for r in &self.rows {
            w.write_record([
                r.t.to_string(),
                r.u.to_string(),
                r.mean_du.to_string(),
                r.se_du.to_string(),
                r.interior.to_string(),
                r.ok.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// First-order conditions of the `𝔽` Hamiltonian at the candidate for
/// `t_i < T`: `|Ê[∂_u 𝓗^𝔽]| ≤ n_se · SE` where the candidate is interior to
/// `[lower, upper]`, and the sign conditions `Ê[∂_u 𝓗^𝔽] ≤ n_se · SE` at the
/// lower bound, `≥ −n_se · SE` at the upper bound.
pub fn necessary_conditions<M: VolterraModel + ?Sized, O: Objective + ?Sized>(
    ham: &Hamiltonian<'_, M, O>,
    lower: f64,
    upper: f64,
    n_se: f64,
) -> NecessaryReport {
    let ens = ham.ens;
    let n = ens.n_paths();
    let margin = 1e-9 * (upper - lower).abs().max(1.0);
    let fd = 1e-6 * (upper - lower).abs().max(1e-3);
    let rows: Vec<StationarityRow> = (0..ens.grid.n_steps())
        .into_par_iter()
        .map(|i| {
            let dus: Vec<f64> = (0..n)
                .map(|k| ham.du(i, k, ham.states[k].u[i], ham.states[k].x[i], fd))
                .collect();
            let est = Estimate::from_samples(&dus);
            let u = (0..n).map(|k| ham.states[k].u[i]).sum::<f64>() / n as f64;
            let at_lower = u <= lower + margin;
            let at_upper = u >= upper - margin;
            let interior = !at_lower && !at_upper;
            let bound = n_se * est.se;
            let ok = if interior {
                est.mean.abs() <= bound
            } else if at_lower {
                est.mean <= bound
            } else {
                est.mean >= -bound
            };
            StationarityRow { t: ens.grid.t(i), u, mean_du: est.mean, se_du: est.se, interior, ok }
        })
        .collect();
    NecessaryReport {
        interior_points: rows.iter().filter(|r| r.interior).count(),
        interior_ok: rows.iter().filter(|r| r.interior).all(|r| r.ok),
        boundary_ok: rows.iter().filter(|r| !r.interior).all(|r| r.ok),
        rows,
    }
}

/// Uniform control grid over `𝒰 = [lower, upper]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlGrid {
    pub lower: f64,
    pub upper: f64,
    pub points: usize,
}

impl ControlGrid {
    pub fn values(&self) -> Vec<f64> {
        if self.points <= 1 {
            return vec![self.lower];
        }
        let h = (self.upper - self.lower) / (self.points - 1) as f64;
        (0..self.points).map(|k| self.lower + k as f64 * h).collect()
    }

    pub fn spacing(&self) -> f64 {
        (self.upper - self.lower) / (self.points.max(2) - 1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpOptions {
    pub controls: ControlGrid,
    pub tol_max: f64,
    pub tol_conc: f64,
    /// Relative half-width of the `x` probe set around the candidate state.
    pub probe_spread: f64,
    /// Paths probed per slice (the first ones of the ensemble).
    pub max_paths: usize,
}

impl Default for MpOptions {
    fn default() -> Self {
        Self {
            controls: ControlGrid { lower: 0.0, upper: 1.0, points: 101 },
            tol_max: 1e-6,
            tol_conc: 1e-8,
            probe_spread: 0.5,
            max_paths: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMp {
    pub t: f64,
    pub max_gap: f64,
    pub mean_gap: f64,
    pub mean_argmax: f64,
    pub mean_du: f64,
    pub se_du: f64,
    pub concavity_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpReport {
    pub flow: Flow,
    pub slices: Vec<SliceMp>,
    pub max_gap: f64,
    pub terminal_concave: bool,
    pub hamiltonian_concave: bool,
    pub maximal: bool,
    pub verdict: bool,
}

impl MpReport {
    /// CSV with columns `t,max_gap,mean_gap,mean_argmax,mean_du,se_du,concavity_violations`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "max_gap", "mean_gap", "mean_argmax", "mean_du", "se_du", "concavity_violations"])?;
        for s in &self.slices {
            w.write_record([
                s.t.to_string(),
                s.max_gap.to_string(),
                s.mean_gap.to_string(),
                s.mean_argmax.to_string(),
                s.mean_du.to_string(),
                s.se_du.to_string(),
                s.concavity_violations.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn probes(x: f64, spread: f64) -> [f64; 5] {
    let h = spread * x.abs().max(1.0);
    [x - h, x - 0.5 * h, x, x + 0.5 * h, x + h]
}

/// Midpoint test on five equispaced values; returns whether each interior
/// point satisfies `f(mid) ≥ (f(left) + f(right)) / 2 − tol`.
fn midpoint_ok(v: &[f64; 5], tol: f64) -> bool {
    (1..4).all(|k| v[k] >= 0.5 * (v[k - 1] + v[k + 1]) - tol) && v[2] >= 0.5 * (v[0] + v[4]) - tol
}

/// Maximality gap of the candidate on the control grid (ties go to the
/// smallest control), concavity probes of `G` and of `x ↦ max_u 𝓗(u, x)`.
pub fn check_sufficient<M: VolterraModel + ?Sized, O: Objective + ?Sized>(
    ham: &Hamiltonian<'_, M, O>,
    opts: &MpOptions,
) -> MpReport {
    let ens = ham.ens;
    let m = ens.grid.n_steps();
    let us = opts.controls.values();
    let n = ens.n_paths().min(opts.max_paths);
    let fd = opts.controls.spacing();
    let sup_over = |i: usize, k: usize, x: f64| -> (f64, f64) {
        let mut best = (f64::NEG_INFINITY, us[0]);
        for &u in &us {
            let v = ham.h0(i, k, u, x);
            if v > best.0 {
                best = (v, u);
            }
        }
        (best.0 + ham.h1(i, k), best.1)
    };
    let slices: Vec<SliceMp> = (0..m)
        .into_par_iter()
        .map(|i| {
            let rows: Vec<(f64, f64, f64, bool)> = (0..n)
                .map(|k| {
                    let (x, u) = (ham.states[k].x[i], ham.states[k].u[i]);
                    let (sup, arg) = sup_over(i, k, x);
                    let gap = sup - ham.value(i, k, u, x);
                    let du = ham.du(i, k, u, x, fd);
                    let xs = probes(x, opts.probe_spread);
                    let vals = xs.map(|xp| sup_over(i, k, xp).0);
                    (gap, arg, du, midpoint_ok(&vals, opts.tol_conc))
                })
                .collect();
            let gaps: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let dus: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let du = Estimate::from_samples(&dus);
            SliceMp {
                t: ens.grid.t(i),
                max_gap: gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                mean_gap: gaps.iter().sum::<f64>() / n as f64,
                mean_argmax: rows.iter().map(|r| r.1).sum::<f64>() / n as f64,
                mean_du: du.mean,
                se_du: du.se,
                concavity_violations: rows.iter().filter(|r| !r.3).count(),
            }
        })
        .collect();
    let terminal_concave = (0..n).all(|k| {
        let xs = probes(ham.states[k].x[m], opts.probe_spread);
        midpoint_ok(&xs.map(|x| ham.objective.terminal(x)), opts.tol_conc)
    });
    let max_gap = slices.iter().map(|s| s.max_gap).fold(f64::NEG_INFINITY, f64::max);
    let hamiltonian_concave = slices.iter().all(|s| s.concavity_violations == 0);
    let maximal = max_gap <= opts.tol_max;
    MpReport {
        flow: ham.flow(),
        slices,
        max_gap,
        terminal_concave,
        hamiltonian_concave,
        maximal,
        verdict: maximal && terminal_concave && hamiltonian_concave,
    }
}

/// Per-path performance `∫ F dt + G(X(T))`, left-endpoint quadrature.
pub fn path_reward<O: Objective + ?Sized>(objective: &O, ens: &Ensemble, k: usize, state: &StatePath) -> f64 {
    let g = &ens.grid;
    let running: f64 = (0..g.n_steps())
        .map(|i| objective.running(g.t(i), ens.rates[k].rates(i), state.u[i], state.x[i]) * g.dt(i))
        .sum();
    running + objective.terminal(state.x[g.n_steps()])
}

pub fn evaluate_j<M: VolterraModel + ?Sized, O: Objective + ?Sized>(
    model: &M,
    objective: &O,
    policy: &ControlPolicy,
    ens: &Ensemble,
) -> Result<Estimate> {
    let rewards: Vec<f64> = (0..ens.n_paths())
        .into_par_iter()
        .map(|k| solve_direct(model, policy, &ens.path(k)).map(|s| path_reward(objective, ens, k, &s)))
        .collect::<Result<_>>()?;
    Ok(Estimate::from_samples(&rewards))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientReport {
    /// `(J(u+εβ) − J(u−εβ)) / 2ε` on common noise.
    pub finite_difference: Estimate,
    /// `E[∫(∂_x F χ + ∂_u F β) dt + ∂_x G(X(T)) χ(T)]`.
    pub variation: Estimate,
    /// `E[∫ ∂_u 𝓗^𝔽 β dt]`.
    pub hamiltonian: Estimate,
    /// Paired differences: (fd − variation), (fd − hamiltonian), (variation − hamiltonian).
    pub differences: [Estimate; 3],
}

impl GradientReport {
    /// Whether every pairwise difference is within `n_se` standard errors
    /// plus an absolute rounding floor.
    pub fn agree(&self, n_se: f64, floor: f64) -> bool {
        self.differences.iter().all(|d| d.mean.abs() <= n_se * d.se + floor)
    }
}

/// Three routes to `∂_ε J(u + εβ)` at `ε = 0`. `ham` must be built on the
/// solution of `policy` with an `𝔽`-projected adjoint.
pub fn perturbation_gradient<M: VolterraModel + ?Sized, O: Objective + ?Sized>(
    ham: &Hamiltonian<'_, M, O>,
    policy: &ControlPolicy,
    beta: &Perturbation,
    eps: f64,
) -> Result<GradientReport> {
    let ens = ham.ens;
    let g = &ens.grid;
    let m = g.n_steps();
    let up = policy.perturbed(beta.clone(), eps);
    let down = policy.perturbed(beta.clone(), -eps);
    let fd_step = 1e-6;
    let rows: Vec<(f64, f64, f64)> = (0..ens.n_paths())
        .into_par_iter()
        .map(|k| {
            let view = ens.path(k);
            let base = &ham.states[k];
            let chi = first_variation(ham.model, policy, beta, &view, base)?;
            let ju = path_reward(ham.objective, ens, k, &solve_direct(ham.model, &up, &view)?);
            let jd = path_reward(ham.objective, ens, k, &solve_direct(ham.model, &down, &view)?);
            let mut var = 0.0;
            let mut hamil = 0.0;
            for i in 0..m {
                let (t, r) = (g.t(i), ens.rates[k].rates(i));
                let b = beta.value(k, t);
                var += (ham.objective.running_dx(t, r, base.u[i], base.x[i]) * chi.x[i]
                    + ham.objective.running_du(t, r, base.u[i], base.x[i]) * b)
                    * g.dt(i);
                if b != 0.0 {
                    hamil += ham.du(i, k, base.u[i], base.x[i], fd_step) * b * g.dt(i);
                }
            }
            var += ham.objective.terminal_dx(base.x[m]) * chi.x[m];
            Ok(((ju - jd) / (2.0 * eps), var, hamil))
        })
        .collect::<Result<_>>()?;
    let col = |f: fn(&(f64, f64, f64)) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
    let (fd, var, hamil) = (col(|r| r.0), col(|r| r.1), col(|r| r.2));
    let diff = |a: &[f64], b: &[f64]| Estimate::from_samples(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>());
    Ok(GradientReport {
        finite_difference: Estimate::from_samples(&fd),
        variation: Estimate::from_samples(&var),
        hamiltonian: Estimate::from_samples(&hamil),
        differences: [diff(&fd, &var), diff(&fd, &hamil), diff(&var, &hamil)],
    })
}

/// Linear-quadratic test problems.
pub mod lq {
    use super::*;

    /// `b = u`, `κ(·,0) = vol · x`, no jump loading.
    #[derive(Debug, Clone, Copy)]
    pub struct LqDynamics {
        pub x0: f64,
        pub vol: f64,
    }

    impl VolterraModel for LqDynamics {
        fn initial_value(&self) -> f64 {
            self.x0
        }
        fn drift(&self, _t: f64, _s: f64, _r: Rates, u: f64, _x: f64) -> f64 {
            u
        }
        fn noise(&self, _t: f64, _s: f64, z: f64, _r: Rates, _u: f64, x: f64) -> f64 {
            if z == 0.0 {
                self.vol * x
            } else {
                0.0
            }
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
        fn noise_dx(&self, _t: f64, _s: f64, z: f64, _r: Rates, _u: f64, _x: f64) -> Option<f64> {
            Some(if z == 0.0 { self.vol } else { 0.0 })
        }
        fn noise_du(&self, _t: f64, _s: f64, _z: f64, _r: Rates, _u: f64, _x: f64) -> Option<f64> {
            Some(0.0)
        }
    }

    /// `F = −u² − cost · x²`, `G = x`.
    #[derive(Debug, Clone, Copy)]
    pub struct LqObjective {
        pub cost: f64,
    }

    impl Objective for LqObjective {
        fn running(&self, _t: f64, _r: Rates, u: f64, x: f64) -> f64 {
            -u * u - self.cost * x * x
        }
        fn terminal(&self, x: f64) -> f64 {
            x
        }
        fn running_dx(&self, _t: f64, _r: Rates, _u: f64, x: f64) -> f64 {
            -2.0 * self.cost * x
        }
        fn running_du(&self, _t: f64, _r: Rates, u: f64, _x: f64) -> f64 {
            -2.0 * u
        }
        fn terminal_dx(&self, _x: f64) -> f64 {
            1.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::lq::*;
    use super::*;
    use crate::condexp::Feature;
    use crate::grid::{MarkGrid, TimeGrid};
    use crate::rng::EnsembleHandle;
    use crate::timechange::RateSpec;
    use crate::volterra::{solve_direct_ensemble, Amplitude};

    struct Null;
    impl VolterraModel for Null {
        fn initial_value(&self) -> f64 {
            1.0
        }
        fn drift(&self, _t: f64, _s: f64, _r: Rates, _u: f64, _x: f64) -> f64 {
            0.0
        }
        fn noise(&self, _t: f64, _s: f64, _z: f64, _r: Rates, _u: f64, _x: f64) -> f64 {
            0.0
        }
        fn convolution_free(&self) -> bool {
            true
        }
    }
    struct Zero;
    impl Objective for Zero {
        fn running(&self, _t: f64, _r: Rates, _u: f64, _x: f64) -> f64 {
            0.0
        }
        fn terminal(&self, _x: f64) -> f64 {
            0.0
        }
        fn running_dx(&self, _t: f64, _r: Rates, _u: f64, _x: f64) -> f64 {
            0.0
        }
        fn running_du(&self, _t: f64, _r: Rates, _u: f64, _x: f64) -> f64 {
            0.0
        }
        fn terminal_dx(&self, _x: f64) -> f64 {
            0.0
        }
    }

    fn ens(n: usize, steps: usize) -> Ensemble {
        Ensemble::simulate(
            TimeGrid::uniform(1.0, steps).unwrap(),
            MarkGrid::empty(),
            &RateSpec::constant(1.0, 0.0),
            EnsembleHandle::new(n, 17).unwrap(),
        )
        .unwrap()
    }

    fn lq_adjoint(dynamics: &LqDynamics, objective: &LqObjective, e: &Ensemble, states: &[StatePath]) -> Adjoint {
        let features = FeatureMap::new(Flow::G, 2, vec![Feature::State, Feature::BrownianRunning]);
        Adjoint::from_bsde(&solve_adjoint(dynamics, objective, e, states, features, DriverInput::Smoothed).unwrap())
    }

    #[test]
    fn null_hamiltonian() {
        let e = ens(200, 4);
        let states = solve_direct_ensemble(&Null, &ControlPolicy::constant(0.3), &e).unwrap();
        let adj = Adjoint {
            flow: Flow::G,
            p: vec![vec![2.0; 200]; 5],
            q0: vec![vec![1.0; 200]; 4],
            qz: vec![Vec::new(); 4],
            kappa_memory: None,
            approximate: false,
        };
        let h = Hamiltonian::new(&Null, &Zero, &e, &states, &adj).unwrap();
        for i in 0..=4 {
            assert_eq!(h.along_path(i, 3), 0.0);
        }
    }

    #[test]
    fn missing_derivative_term_is_rejected() {
        struct Ramp;
        impl VolterraModel for Ramp {
            fn initial_value(&self) -> f64 {
                0.0
            }
            fn drift(&self, _t: f64, _s: f64, _r: Rates, _u: f64, _x: f64) -> f64 {
                0.0
            }
            fn noise(&self, t: f64, s: f64, _z: f64, _r: Rates, _u: f64, _x: f64) -> f64 {
                t - s
            }
        }
        let e = ens(100, 4);
        let states = solve_direct_ensemble(&Ramp, &ControlPolicy::constant(0.0), &e).unwrap();
        let adj = Adjoint {
            flow: Flow::G,
            p: vec![vec![0.0; 100]; 5],
            q0: vec![vec![0.0; 100]; 4],
            qz: vec![Vec::new(); 4],
            kappa_memory: None,
            approximate: false,
        };
        assert!(matches!(Hamiltonian::new(&Ramp, &Zero, &e, &states, &adj), Err(Error::UnsupportedModel(_))));
    }

    #[test]
    fn lq_optimum_passes_sufficient_check() {
        let e = ens(300, 20);
        let dynamics = LqDynamics { x0: 1.0, vol: 0.0 };
        let objective = LqObjective { cost: 0.0 };
        let policy = ControlPolicy::constant(0.5);
        let states = solve_direct_ensemble(&dynamics, &policy, &e).unwrap();
        let adj = lq_adjoint(&dynamics, &objective, &e, &states);
        let features = FeatureMap::new(Flow::F, 2, vec![Feature::State]);
        let adj_f = adj.project(&features, &e, Some(&states)).unwrap();
        let h = Hamiltonian::new(&dynamics, &objective, &e, &states, &adj_f).unwrap();
        let rep = check_sufficient(&h, &MpOptions::default());
        assert!(rep.max_gap <= 1e-6, "{}", rep.max_gap);
        assert!(rep.verdict);
        assert!(rep.slices.iter().all(|s| (s.mean_argmax - 0.5).abs() < 1e-12));

        let off = ControlPolicy::constant(0.2);
        let states = solve_direct_ensemble(&dynamics, &off, &e).unwrap();
        let adj = lq_adjoint(&dynamics, &objective, &e, &states);
        let h = Hamiltonian::new(&dynamics, &objective, &e, &states, &adj).unwrap();
        let rep = check_sufficient(&h, &MpOptions::default());
        assert!(!rep.maximal);
        assert!((rep.max_gap - 0.09).abs() < 1e-9);
    }

    #[test]
    fn lq_gradient_routes_agree() {
        let e = ens(300, 20);
        let dynamics = LqDynamics { x0: 1.0, vol: 0.0 };
        let objective = LqObjective { cost: 0.0 };
        let policy = ControlPolicy::constant(0.2);
        let states = solve_direct_ensemble(&dynamics, &policy, &e).unwrap();
        let adj = lq_adjoint(&dynamics, &objective, &e, &states)
            .project(&FeatureMap::new(Flow::F, 2, vec![Feature::State]), &e, Some(&states))
            .unwrap();
        let h = Hamiltonian::new(&dynamics, &objective, &e, &states, &adj).unwrap();
        let beta = Perturbation { start: 0.2, width: 0.3, amplitude: Amplitude::Constant(1.0) };
        let rep = perturbation_gradient(&h, &policy, &beta, 1e-4).unwrap();
        // analytic: ∫(1 − 2u)β dt = 0.6 · 0.3
        for est in [rep.finite_difference, rep.variation, rep.hamiltonian] {
            assert!((est.mean - 0.18).abs() < 1e-9, "{est:?}");
        }
        assert!(rep.agree(3.0, 1e-9));
        let zero = perturbation_gradient(&h, &policy, &Perturbation::zero(), 1e-4).unwrap();
        assert_eq!(zero.variation.mean, 0.0);
        assert_eq!(zero.hamiltonian.mean, 0.0);
    }

    #[test]
    fn stochastic_lq_gradient_routes_agree() {
        let e = ens(4000, 20);
        let dynamics = LqDynamics { x0: 1.0, vol: 0.4 };
        let objective = LqObjective { cost: 0.5 };
        let policy = ControlPolicy::constant(0.2);
        let states = solve_direct_ensemble(&dynamics, &policy, &e).unwrap();
        let adj = lq_adjoint(&dynamics, &objective, &e, &states)
            .project(&FeatureMap::new(Flow::F, 2, vec![Feature::State, Feature::BrownianRunning]), &e, Some(&states))
            .unwrap();
        let h = Hamiltonian::new(&dynamics, &objective, &e, &states, &adj).unwrap();
        let beta = Perturbation { start: 0.25, width: 0.25, amplitude: Amplitude::Constant(1.0) };
        let rep = perturbation_gradient(&h, &policy, &beta, 1e-4).unwrap();
        assert!(rep.agree(3.0, 1e-9), "{rep:?}");
    }

    #[test]
    fn control_grid_values() {
        let g = ControlGrid { lower: 0.0, upper: 1.0, points: 101 };
        let v = g.values();
        assert_eq!(v.len(), 101);
        assert_eq!(v[50], 0.5);
        assert!((g.spacing() - 0.01).abs() < 1e-15);
    }
}
