//! Non-anticipating derivative on a dyadic partition, the integral
//! representation it yields, duality with the Itô integral and the
//! martingale representation.
//!
//! On a cell `Δ = (s,u] × B` the level-`n` field is
//! `E[ξ μ(Δ) | 𝓖_s] / Λ(Δ)`. Under `𝔾` the measure `Λ(Δ)` is known at time
//! zero, so the pathwise value replaces its conditional expectation; this
//! shortcut is specific to the noise built here.
//!
//! Targets are centered by `Ê[ξ | 𝓖_s]` before multiplying by `μ(Δ)`;
//! since `E[μ(Δ) | 𝓖_s] = 0` this leaves the conditional expectation
//! unchanged and removes most of the sampling noise.

use std::collections::HashMap;
use std::io::Write;

use rayon::prelude::*;

use crate::condexp::{Design, FeatureMap, Flow};
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::grid::{MarkSet, PartitionScheme};
use crate::noise::mu_of_cells;
use crate::stats::{rms, Estimate};
use crate::timechange::measure_of_cell;

/// Cells with `Λ(Δ)` below this get a zero field value.
pub const LAMBDA_FLOOR: f64 = 1e-12;

/// Piecewise-constant field `φ_n`, one value per (cell, path).
#[derive(Debug, Clone, PartialEq)]
pub struct NaDerivativeField {
    pub partition: PartitionScheme,
    /// `values[k][p]`: cell `k`, path `p`.
    pub values: Vec<Vec<f64>>,
    /// Cells per path whose `Λ(Δ)` fell below the floor.
    pub floor_hits: usize,
}

impl NaDerivativeField {
    pub fn level(&self) -> u32 {
        self.partition.level()
    }

    /// Field value at grid step `i` on `marks` for path `p`.
    pub fn at(&self, p: usize, i: usize, marks: MarkSet) -> f64 {
        self.values[self.partition.cell_of_step(i, marks)][p]
    }

    /// CSV with columns `cell_id,s,u,mark_set,mean,sd`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["cell_id", "s", "u", "mark_set", "mean", "sd"])?;
        for (k, cell) in self.partition.cells().iter().enumerate() {
            let est = Estimate::from_samples(&self.values[k]);
            let sd = est.se * (est.n as f64).sqrt();
            w.write_record([
                k.to_string(),
                cell.start.to_string(),
                cell.end.to_string(),
                cell.marks.id().to_string(),
                est.mean.to_string(),
                sd.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Estimator bound to one ensemble; designs are cached per start index.
pub struct NaEstimator<'a> {
    ens: &'a Ensemble,
    map: FeatureMap,
    designs: HashMap<usize, Design>,
}

impl<'a> NaEstimator<'a> {
    /// `map` is used with the `𝔾` flow regardless of its declared flow.
    pub fn new(ens: &'a Ensemble, map: FeatureMap) -> Result<Self> {
        if map.needs_state() {
            return Err(Error::invalid("derivative features must be functionals of the noise and rates"));
        }
        Ok(Self { ens, map: map.with_flow(Flow::G), designs: HashMap::new() })
    }

    fn design(&mut self, i: usize) -> Result<&Design> {
        if !self.designs.contains_key(&i) {
            let d = self.map.design(self.ens, None, i)?;
            self.designs.insert(i, d);
        }
        Ok(&self.designs[&i])
    }

    pub fn partition(&self, level: u32) -> Result<PartitionScheme> {
        PartitionScheme::build(&self.ens.grid, &self.ens.marks, level)
    }

    pub fn estimate(&mut self, xi: &[f64], level: u32) -> Result<NaDerivativeField> {
        let ens = self.ens;
        if xi.len() != ens.n_paths() {
            return Err(Error::invalid("one value of ξ per path is required"));
        }
        if xi.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("ξ has non-finite values"));
        }
        let partition = self.partition(level)?;
        let mu: Vec<Vec<f64>> = ens
            .noise
            .par_iter()
            .map(|n| mu_of_cells(n, &partition).map(|m| m.values))
            .collect::<Result<_>>()?;
        let mut values = Vec::with_capacity(partition.cells().len());
        let mut floor_hits = 0;
        let mut centered: HashMap<usize, Vec<f64>> = HashMap::new();
        for (k, cell) in partition.cells().iter().enumerate() {
            if !centered.contains_key(&cell.start_index) {
                let mean = self.design(cell.start_index)?.fit(xi)?.predictions;
                centered.insert(cell.start_index, xi.iter().zip(&mean).map(|(x, m)| x - m).collect());
            }
            let xc = &centered[&cell.start_index];
            let lam: Vec<f64> = ens
                .rates
                .iter()
                .map(|r| measure_of_cell(r, &ens.marks, cell))
                .collect::<Result<_>>()?;
            let live: Vec<bool> = lam.iter().map(|l| *l >= LAMBDA_FLOOR).collect();
            floor_hits += live.iter().filter(|l| !**l).count();
            if !live.iter().any(|l| *l) {
                values.push(vec![0.0; xi.len()]);
                continue;
            }
            let target: Vec<f64> = (0..xi.len())
                .map(|p| if live[p] { xc[p] * mu[p][k] / lam[p] } else { 0.0 })
                .collect();
            let fit = self.design(cell.start_index)?.fit(&target).map_err(|e| e.in_context(format!("cell {k}")))?;
            values.push(
                fit.predictions
                    .iter()
                    .zip(&live)
                    .map(|(v, l)| if *l { *v } else { 0.0 })
                    .collect(),
            );
        }
        Ok(NaDerivativeField { partition, values, floor_hits })
    }

    /// `Ê[ξ | 𝓕^Λ]` by regression on the rate summary at time 0.
    pub fn lambda_mean(&mut self, xi: &[f64]) -> Result<Vec<f64>> {
        Ok(self.design(0)?.fit(xi)?.predictions)
    }

    /// `ξ̂ = Ê[ξ|𝓕^Λ] + ∬ φ_n dμ` per path.
    pub fn reconstruct(&mut self, xi: &[f64], field: &NaDerivativeField) -> Result<Vec<f64>> {
        let base = self.lambda_mean(xi)?;
        let ens = self.ens;
        (0..ens.n_paths())
            .into_par_iter()
            .map(|p| {
                let mu = mu_of_cells(&ens.noise[p], &field.partition)?;
                Ok(base[p] + (0..mu.values.len()).map(|k| field.values[k][p] * mu.values[k]).sum::<f64>())
            })
            .collect()
    }

    /// Running representation `Ê[ξ|𝓕^Λ] + ∫_0^{t_i} ∫ φ_n dμ` next to the
    /// direct `𝔾` regression of `ξ` at every grid time.
    pub fn martingale_representation(&mut self, xi: &[f64], level: u32) -> Result<MartingaleReport> {
        let field = self.estimate(xi, level)?;
        let base = self.lambda_mean(xi)?;
        let ens = self.ens;
        let m_steps = ens.grid.n_steps();
        let n_bins = ens.marks.len();
        let running: Vec<Vec<f64>> = (0..ens.n_paths())
            .into_par_iter()
            .map(|p| {
                let mut acc = base[p];
                let mut out = Vec::with_capacity(m_steps + 1);
                out.push(acc);
                for i in 0..m_steps {
                    acc += field.at(p, i, MarkSet::Gauss) * ens.noise[p].d_b[i];
                    for j in 0..n_bins {
                        acc += field.at(p, i, MarkSet::Bin(j)) * ens.noise[p].centered(i, j);
                    }
                    out.push(acc);
                }
                out
            })
            .collect();
        let mut direct = Vec::with_capacity(m_steps + 1);
        let mut z = Vec::with_capacity(m_steps + 1);
        let mut rms_gap = Vec::with_capacity(m_steps + 1);
        for i in 0..=m_steps {
            let pred = self.design(i)?.fit(xi)?.predictions;
            let gap: Vec<f64> = (0..xi.len()).map(|p| running[p][i] - pred[p]).collect();
            z.push(Estimate::from_samples(&gap).z());
            rms_gap.push(rms(gap.iter().copied()));
            direct.push(pred);
        }
        Ok(MartingaleReport { field, running, direct, z, rms_gap })
    }
}

#[derive(Debug, Clone)]
pub struct MartingaleReport {
    pub field: NaDerivativeField,
    /// `running[p][i]`.
    pub running: Vec<Vec<f64>>,
    /// `direct[i][p]`.
    pub direct: Vec<Vec<f64>>,
    /// z-score of the mean gap per grid time.
    pub z: Vec<f64>,
    pub rms_gap: Vec<f64>,
}

/// `rms(estimate − exact) / sd(exact)`, or the plain RMS gap when `exact`
/// is constant.
pub fn relative_l2_error(estimate: &[f64], exact: &[f64]) -> f64 {
    let gap = rms(estimate.iter().zip(exact).map(|(a, b)| a - b));
    let n = exact.len() as f64;
    let mean = exact.iter().sum::<f64>() / n;
    let spread = rms(exact.iter().map(|v| v - mean));
    if spread > 0.0 {
        gap / spread
    } else {
        gap
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualityReport {
    /// `Ê[ξ ∬ φ dμ]`.
    pub lhs: f64,
    /// `Ê[∬ φ 𝒟ξ dΛ]`.
    pub rhs: f64,
    /// Standard error of the paired difference.
    pub se: f64,
    pub z: f64,
}

/// Compare both sides of the duality for a deterministic test field `φ(i, slot)`.
pub fn duality_check(
    xi: &[f64],
    phi: impl Fn(usize, MarkSet) -> f64 + Sync,
    field: &NaDerivativeField,
    ens: &Ensemble,
) -> DualityReport {
    let m_steps = ens.grid.n_steps();
    let n_bins = ens.marks.len();
    let sides: Vec<(f64, f64)> = (0..ens.n_paths())
        .into_par_iter()
        .map(|p| {
            let noise = &ens.noise[p];
            let rate = &ens.rates[p];
            let integral = crate::noise::ito_integral(noise, &phi);
            let mut dual = 0.0;
            for i in 0..m_steps {
                dual += phi(i, MarkSet::Gauss) * field.at(p, i, MarkSet::Gauss) * rate.step_mass_b(i);
                for j in 0..n_bins {
                    let slot = MarkSet::Bin(j);
                    dual += phi(i, slot) * field.at(p, i, slot) * rate.step_mass_h(i) * ens.marks.weight(j);
                }
            }
            (xi[p] * integral, dual)
        })
        .collect();
    let n = sides.len() as f64;
    let lhs = sides.iter().map(|s| s.0).sum::<f64>() / n;
    let rhs = sides.iter().map(|s| s.1).sum::<f64>() / n;
    let diff: Vec<f64> = sides.iter().map(|s| s.0 - s.1).collect();
    let est = Estimate::from_samples(&diff);
    DualityReport { lhs, rhs, se: est.se, z: est.z() }
}
