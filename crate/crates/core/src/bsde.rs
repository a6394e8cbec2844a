//! Backward SDEs under `𝔾`
//!
//! `p(t) = ξ + ∫_t^T g(s, λ_s, p(s−), q(s,·)) ds − ∫_t^T ∫ q(s,z) μ(ds dz)`
//!
//! by least-squares backward induction, plus the Girsanov density and the
//! drift-adjusted Gaussian increments used to move between `P` and `Q`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::condexp::{FeatureMap, Flow};
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::stats::Estimate;
use crate::timechange::Rates;
use crate::volterra::StatePath;

/// Per-path denominators below this are treated as zero.
pub const INCREMENT_FLOOR: f64 = 1e-12;

/// Arguments handed to a driver at slice `i` of path `path`.
#[derive(Debug, Clone, Copy)]
pub struct DriverArgs<'a> {
    pub i: usize,
    pub t: f64,
    pub path: usize,
    pub rates: Rates,
    pub p: f64,
    pub q0: f64,
    pub qz: &'a [f64],
}

pub type Driver<'a> = dyn Fn(&DriverArgs<'_>) -> f64 + Sync + 'a;

/// Which value of `p(t_{i+1})` enters the driver at slice `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriverInput {
    /// `Ê[p(t_{i+1}) | 𝓖_{t_i}]`.
    #[default]
    Smoothed,
    /// The per-path value `p(t_{i+1})`.
    Raw,
}

pub struct BsdeSpec<'a> {
    pub terminal: Vec<f64>,
    pub driver: &'a Driver<'a>,
    pub features: FeatureMap,
    pub driver_input: DriverInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceDiagnostics {
    pub r2: f64,
    pub condition: f64,
    pub floor_hits: usize,
    /// `Ê[q(t,0)² ΔΛ^B + Σ_j q(t,z_j)² ν_j ΔΛ^H]`.
    pub q_energy: f64,
    /// Normalized residual of `p(t_{i+1}) + gΔt − p(t_i)` against the basis.
    pub orthogonality: f64,
}

#[derive(Debug, Clone)]
pub struct BsdeSolution {
    /// `p[i][path]`, regression-predicted; `p[M]` is the terminal value.
    pub p: Vec<Vec<f64>>,
    /// `p_raw[i][path] = p(t_{i+1}) + g Δt` before projection.
    pub p_raw: Vec<Vec<f64>>,
    /// `p_next[i][path] = Ê[p(t_{i+1}) | 𝓖_{t_i}]` for `i < M`.
    pub p_next: Vec<Vec<f64>>,
    /// `q0[i][path]` for `i < M`.
    pub q0: Vec<Vec<f64>>,
    /// `qz[i][j][path]` for `i < M`.
    pub qz: Vec<Vec<Vec<f64>>>,
    pub diagnostics: Vec<SliceDiagnostics>,
}

impl BsdeSolution {
    pub fn floor_hits(&self) -> usize {
        self.diagnostics.iter().map(|d| d.floor_hits).sum()
    }

    /// CSV with columns `t,mean_p,sd_p,mean_q0,mean_q<j>...,r2,condition,floor_hits,q_energy`.
    pub fn write_csv<W: Write>(&self, ens: &Ensemble, out: W) -> Result<()> {
        let n_bins = ens.marks.len();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string(), "mean_p".into(), "sd_p".into(), "mean_q0".into()];
        header.extend((0..n_bins).map(|j| format!("mean_q{}", j + 1)));
        header.extend(["r2", "condition", "floor_hits", "q_energy"].map(String::from));
        w.write_record(&header)?;
        let m = ens.grid.n_steps();
        for i in 0..=m {
            let p = Estimate::from_samples(&self.p[i]);
            let sd = p.se * (p.n as f64).sqrt();
            let mut rec = vec![ens.grid.t(i).to_string(), p.mean.to_string(), sd.to_string()];
            if i < m {
                rec.push(mean(&self.q0[i]).to_string());
                rec.extend(self.qz[i].iter().map(|q| mean(q).to_string()));
                let d = &self.diagnostics[i];
                rec.extend([d.r2, d.condition].map(|v| v.to_string()));
                rec.push(d.floor_hits.to_string());
                rec.push(d.q_energy.to_string());
            } else {
                rec.extend(std::iter::repeat_n(String::new(), 1 + n_bins + 4));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Explicit backward induction. At slice `i`, with `c = p(t_{i+1}) − Ê[p(t_{i+1})|𝓖_{t_i}]`:
/// `q(t_i,0) = Ê[c dB_i / ΔΛ^B_i]`, `q(t_i,z_j) = Ê[c H̃_ij / (ΔΛ^H_i ν_j)]`,
/// `p(t_i) = Ê[p(t_{i+1}) + g Δt_i]`, all conditional on `𝓖_{t_i}`.
pub fn solve_backward(spec: &BsdeSpec<'_>, ens: &Ensemble, states: Option<&[StatePath]>) -> Result<BsdeSolution> {
    let n = ens.n_paths();
    if spec.terminal.len() != n {
        return Err(Error::invalid("one terminal value per path is required"));
    }
    if spec.terminal.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("terminal values must be finite"));
    }
    let map = spec.features.with_flow(Flow::G);
    let m = ens.grid.n_steps();
    let n_bins = ens.marks.len();
    let mut p = vec![Vec::new(); m + 1];
    let mut p_raw = vec![Vec::new(); m];
    let mut p_next = vec![Vec::new(); m];
    let mut q0 = vec![Vec::new(); m];
    let mut qz = vec![Vec::new(); m];
    let mut diagnostics = Vec::with_capacity(m);
    p[m] = spec.terminal.clone();
    for i in (0..m).rev() {
        let design = map.design(ens, states, i).map_err(|e| e.in_context(format!("slice {i}")))?;
        let next = &p[i + 1];
        let smooth = design.fit(next)?.predictions;
        let mut floor_hits = 0;
        let gauss: Vec<f64> = (0..n)
            .map(|k| {
                let d = ens.rates[k].step_mass_b(i);
                if d >= INCREMENT_FLOOR {
                    (next[k] - smooth[k]) * ens.noise[k].d_b[i] / d
                } else {
                    0.0
                }
            })
            .collect();
        floor_hits += (0..n).filter(|&k| ens.rates[k].step_mass_b(i) < INCREMENT_FLOOR).count();
        let q_gauss = design.fit(&gauss)?.predictions;
        let mut q_jump = Vec::with_capacity(n_bins);
        for j in 0..n_bins {
            let nu = ens.marks.weight(j);
            let target: Vec<f64> = (0..n)
                .map(|k| {
                    let d = ens.rates[k].step_mass_h(i) * nu;
                    if d >= INCREMENT_FLOOR {
                        (next[k] - smooth[k]) * ens.noise[k].centered(i, j) / d
                    } else {
                        0.0
                    }
                })
                .collect();
            floor_hits += (0..n).filter(|&k| ens.rates[k].step_mass_h(i) * nu < INCREMENT_FLOOR).count();
            q_jump.push(design.fit(&target)?.predictions);
        }
        let t = ens.grid.t(i);
        let dt = ens.grid.dt(i);
        let raw: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|k| {
                let qk: Vec<f64> = q_jump.iter().map(|q| q[k]).collect();
                let args = DriverArgs {
                    i,
                    t,
                    path: k,
                    rates: ens.rates[k].rates(i),
                    p: match spec.driver_input {
                        DriverInput::Smoothed => smooth[k],
                        DriverInput::Raw => next[k],
                    },
                    q0: q_gauss[k],
                    qz: &qk,
                };
                next[k] + (spec.driver)(&args) * dt
            })
            .collect();
        let fit = design.fit(&raw).map_err(|e| e.in_context(format!("slice {i}")))?;
        let q_energy = (0..n)
            .map(|k| {
                let r = &ens.rates[k];
                q_gauss[k].powi(2) * r.step_mass_b(i)
                    + (0..n_bins)
                        .map(|j| q_jump[j][k].powi(2) * ens.marks.weight(j) * r.step_mass_h(i))
                        .sum::<f64>()
            })
            .sum::<f64>()
            / n as f64;
        diagnostics.push(SliceDiagnostics {
            r2: fit.r2,
            condition: fit.condition,
            floor_hits,
            q_energy,
            orthogonality: design.orthogonality(&raw, &fit),
        });
        p[i] = fit.predictions;
        p_raw[i] = raw;
        p_next[i] = smooth;
        q0[i] = q_gauss;
        qz[i] = q_jump;
    }
    diagnostics.reverse();
    Ok(BsdeSolution { p, p_raw, p_next, q0, qz, diagnostics })
}

/// `M(t_m) = exp(Σ_{i<m} σ(t_i) dB_i − ½ Σ_{i<m} σ(t_i)² ΔΛ^B_i)` per path.
pub fn girsanov_density(sigma: impl Fn(f64) -> f64 + Sync, ens: &Ensemble) -> Vec<Vec<f64>> {
    let m = ens.grid.n_steps();
    (0..ens.n_paths())
        .into_par_iter()
        .map(|k| {
            let mut log_m = 0.0;
            let mut out = Vec::with_capacity(m + 1);
            out.push(1.0);
            for i in 0..m {
                let s = sigma(ens.grid.t(i));
                log_m += s * ens.noise[k].d_b[i] - 0.5 * s * s * ens.rates[k].step_mass_b(i);
                out.push(log_m.exp());
            }
            out
        })
        .collect()
}

/// `dB^σ_i = dB_i − σ(t_i) ΔΛ^B_i` per path and step.
pub fn drift_adjusted_increments(sigma: impl Fn(f64) -> f64 + Sync, ens: &Ensemble) -> Vec<Vec<f64>> {
    let m = ens.grid.n_steps();
    (0..ens.n_paths())
        .into_par_iter()
        .map(|k| {
            (0..m)
                .map(|i| ens.noise[k].d_b[i] - sigma(ens.grid.t(i)) * ens.rates[k].step_mass_b(i))
                .collect()
        })
        .collect()
}

/// `Ê_Q[Y] = Ê[M(T) Y]` with its standard error.
pub fn weighted_mean(weights: &[f64], values: &[f64]) -> Estimate {
    let prod: Vec<f64> = weights.iter().zip(values).map(|(w, v)| w * v).collect();
    Estimate::from_samples(&prod)
}
