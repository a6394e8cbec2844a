//! Conditional Gaussian measure `B`, conditional centered Poisson measure
//! `H̃` and the composite field `μ = B + H̃`, sampled given a rate path.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{MarkGrid, MarkSet, PartitionScheme, TimeGrid};
use crate::rng::{streams, EnsembleHandle};
use crate::stats::{z_score, Estimate};
use crate::timechange::{measure_of_cell, RatePath};

/// Per-step noise increments of one path.
///
/// Jump arrays are step-major: entry `i * n_bins + j` is step `i`, bin `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePath {
    pub d_b: Vec<f64>,
    pub counts: Vec<u32>,
    pub compensator: Vec<f64>,
    n_bins: usize,
    /// `B_t = B((0,t] × {0})` on the grid.
    b_running: Vec<f64>,
    /// `η_t = ∫∫ z H̃(ds dz)` on the grid.
    eta_running: Vec<f64>,
}

impl NoisePath {
    pub fn new(d_b: Vec<f64>, counts: Vec<u32>, compensator: Vec<f64>, marks: &MarkGrid) -> Result<Self> {
        let n_bins = marks.len();
        if counts.len() != d_b.len() * n_bins || compensator.len() != counts.len() {
            return Err(Error::invalid("jump arrays must hold one entry per step and mark bin"));
        }
        let mut b_running = Vec::with_capacity(d_b.len() + 1);
        let mut eta_running = Vec::with_capacity(d_b.len() + 1);
        let (mut b, mut eta) = (0.0, 0.0);
        b_running.push(b);
        eta_running.push(eta);
        for i in 0..d_b.len() {
            b += d_b[i];
            for j in 0..n_bins {
                let k = i * n_bins + j;
                eta += marks.z(j) * (f64::from(counts[k]) - compensator[k]);
            }
            b_running.push(b);
            eta_running.push(eta);
        }
        Ok(Self { d_b, counts, compensator, n_bins, b_running, eta_running })
    }

    pub fn n_steps(&self) -> usize {
        self.d_b.len()
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    /// `H̃` of step `i`, bin `j`.
    pub fn centered(&self, i: usize, j: usize) -> f64 {
        let k = i * self.n_bins + j;
        f64::from(self.counts[k]) - self.compensator[k]
    }

    /// `μ` increment of step `i` on the given mark set.
    pub fn increment(&self, i: usize, marks: MarkSet) -> f64 {
        match marks {
            MarkSet::Gauss => self.d_b[i],
            MarkSet::Bin(j) => self.centered(i, j),
        }
    }

    pub fn b_running(&self, i: usize) -> f64 {
        self.b_running[i]
    }

    pub fn eta_running(&self, i: usize) -> f64 {
        self.eta_running[i]
    }

    /// Realized jump marks of step `i` (each atom repeated by its count).
    pub fn jump_marks(&self, i: usize, marks: &MarkGrid) -> Vec<f64> {
        (0..self.n_bins)
            .flat_map(|j| std::iter::repeat_n(marks.z(j), self.counts[i * self.n_bins + j] as usize))
            .collect()
    }
}

pub fn sample_noise(
    rates: &[RatePath],
    marks: &MarkGrid,
    grid: &TimeGrid,
    ens: &EnsembleHandle,
) -> Result<Vec<NoisePath>> {
    if rates.len() != ens.n_paths {
        return Err(Error::invalid("one rate path per ensemble path is required"));
    }
    if rates.iter().any(|r| r.n_steps() != grid.n_steps()) {
        return Err(Error::invalid("rate paths must live on the noise grid"));
    }
    rates
        .par_iter()
        .enumerate()
        .map(|(p, rate)| sample_path(rate, marks, ens, p))
        .collect()
}

fn sample_path(rate: &RatePath, marks: &MarkGrid, ens: &EnsembleHandle, path: usize) -> Result<NoisePath> {
    let m = rate.n_steps();
    let mut gauss = ens.substream(path, streams::NOISE_GAUSS);
    let d_b = (0..m)
        .map(|i| {
            let z: f64 = gauss.sample(StandardNormal);
            rate.step_mass_b(i).sqrt() * z
        })
        .collect();
    let mut jump = ens.substream(path, streams::NOISE_JUMP);
    let n_bins = marks.len();
    let mut counts = Vec::with_capacity(m * n_bins);
    let mut compensator = Vec::with_capacity(m * n_bins);
    for i in 0..m {
        for j in 0..n_bins {
            let c = rate.step_mass_h(i) * marks.weight(j);
            let k = if c > 0.0 {
                let law = Poisson::new(c).map_err(|e| Error::invalid(format!("poisson mean {c}: {e}")))?;
                law.sample(&mut jump) as u32
            } else {
                0
            };
            counts.push(k);
            compensator.push(c);
        }
    }
    NoisePath::new(d_b, counts, compensator, marks)
}

/// Values `μ(Δ)` on every cell of a partition, in cell order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuIncrements {
    pub values: Vec<f64>,
}

pub fn mu_of_cells(noise: &NoisePath, partition: &PartitionScheme) -> Result<MuIncrements> {
    if partition.n_steps() != noise.n_steps() || partition.n_bins() != noise.n_bins() {
        return Err(Error::invalid(format!(
            "partition ({} steps, {} bins) not aligned with noise ({} steps, {} bins)",
            partition.n_steps(),
            partition.n_bins(),
            noise.n_steps(),
            noise.n_bins()
        )));
    }
    let values = partition
        .cells()
        .iter()
        .map(|c| c.steps().map(|i| noise.increment(i, c.marks)).sum())
        .collect();
    Ok(MuIncrements { values })
}

/// `∬ φ dμ` for an integrand evaluated at left endpoints `(t_i, slot)`.
pub fn ito_integral(noise: &NoisePath, integrand: impl Fn(usize, MarkSet) -> f64) -> f64 {
    let mut acc = 0.0;
    for i in 0..noise.n_steps() {
        acc += integrand(i, MarkSet::Gauss) * noise.d_b[i];
        for j in 0..noise.n_bins() {
            acc += integrand(i, MarkSet::Bin(j)) * noise.centered(i, j);
        }
    }
    acc
}

/// `∬ ψ dΛ` with left-endpoint evaluation.
pub fn lambda_integral(rate: &RatePath, marks: &MarkGrid, integrand: impl Fn(usize, MarkSet) -> f64) -> f64 {
    let mut acc = 0.0;
    for i in 0..rate.n_steps() {
        acc += integrand(i, MarkSet::Gauss) * rate.step_mass_b(i);
        let mh = rate.step_mass_h(i);
        for j in 0..marks.len() {
            acc += integrand(i, MarkSet::Bin(j)) * mh * marks.weight(j);
        }
    }
    acc
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMoments {
    pub cell_id: usize,
    pub mean: f64,
    pub var: f64,
    pub lambda_mean: f64,
    /// Largest `|z|` of `E[μ(Δ) | stratum] = 0` across Λ-strata.
    pub z_mean: f64,
    /// Largest `|z|` of `E[μ(Δ)² − Λ(Δ) | stratum] = 0` across Λ-strata.
    pub z_second: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMoments {
    pub first: usize,
    pub second: usize,
    pub mean: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub n_paths: usize,
    pub insufficient_sample: bool,
    pub cells: Vec<CellMoments>,
    pub pairs: Vec<PairMoments>,
}

/// Minimum ensemble size for a meaningful moment report.
pub const MIN_MOMENT_PATHS: usize = 1000;

impl MomentReport {
    pub fn max_abs_z(&self) -> f64 {
        self.cells
            .iter()
            .flat_map(|c| [c.z_mean.abs(), c.z_second.abs()])
            .chain(self.pairs.iter().map(|p| p.z.abs()))
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["cell_id", "mean", "var", "lambda_mean", "z_mean", "z_second"])?;
        for c in &self.cells {
            w.write_record([
                c.cell_id.to_string(),
                c.mean.to_string(),
                c.var.to_string(),
                c.lambda_mean.to_string(),
                c.z_mean.to_string(),
                c.z_second.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Stratified conditional-moment diagnostics of `μ` over a partition.
pub fn check_conditional_moments(
    rates: &[RatePath],
    noise: &[NoisePath],
    marks: &MarkGrid,
    partition: &PartitionScheme,
    n_strata: usize,
) -> Result<MomentReport> {
    let n = noise.len();
    let n_cells = partition.cells().len();
    let mut mu = vec![vec![0.0; n]; n_cells];
    let mut lam = vec![vec![0.0; n]; n_cells];
    for p in 0..n {
        let inc = mu_of_cells(&noise[p], partition)?;
        for (k, cell) in partition.cells().iter().enumerate() {
            mu[k][p] = inc.values[k];
            lam[k][p] = measure_of_cell(&rates[p], marks, cell)?;
        }
    }
    let cells = (0..n_cells)
        .map(|k| {
            let est = Estimate::from_samples(&mu[k]);
            let lambda_mean = lam[k].iter().sum::<f64>() / n as f64;
            let mut z_mean: f64 = 0.0;
            let mut z_second: f64 = 0.0;
            for stratum in strata(&lam[k], n_strata) {
                let first: Vec<f64> = stratum.iter().map(|&p| mu[k][p]).collect();
                let second: Vec<f64> = stratum.iter().map(|&p| mu[k][p] * mu[k][p] - lam[k][p]).collect();
                z_mean = max_abs(z_mean, Estimate::from_samples(&first).z());
                z_second = max_abs(z_second, Estimate::from_samples(&second).z());
            }
            CellMoments {
                cell_id: k,
                mean: est.mean,
                var: est.se * est.se * n as f64,
                lambda_mean,
                z_mean,
                z_second,
            }
        })
        .collect();
    let mut pairs = Vec::new();
    for a in 0..n_cells {
        for b in (a + 1)..n_cells {
            let prod: Vec<f64> = (0..n).map(|p| mu[a][p] * mu[b][p]).collect();
            let est = Estimate::from_samples(&prod);
            pairs.push(PairMoments { first: a, second: b, mean: est.mean, z: z_score(est.mean, est.se) });
        }
    }
    Ok(MomentReport { n_paths: n, insufficient_sample: n < MIN_MOMENT_PATHS, cells, pairs })
}

fn max_abs(acc: f64, z: f64) -> f64 {
    if z.is_nan() || acc.is_nan() {
        f64::NAN
    } else {
        acc.max(z.abs())
    }
}

/// Split path indices into quantile strata of `key`; one stratum if `key` is constant.
fn strata(key: &[f64], n_strata: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..key.len()).collect();
    let lo = key.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = key.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if n_strata <= 1 || !(hi > lo) {
        return vec![order];
    }
    order.sort_by(|a, b| key[*a].total_cmp(&key[*b]).then(a.cmp(b)));
    let size = order.len().div_ceil(n_strata);
    order.chunks(size.max(1)).map(<[usize]>::to_vec).collect()
}
