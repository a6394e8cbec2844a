//! Least-squares Monte Carlo estimates of `E[· | 𝓕_t]` and `E[· | 𝓖_t]`.
//!
//! A [`FeatureMap`] turns the path record up to grid index `i` into raw
//! features; a [`Basis`] standardizes them and expands them into
//! polynomials; a [`Design`] holds the expanded matrix of one time slice
//! together with its factorized normal equations, so several targets can
//! be regressed on the same slice cheaply.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{Ensemble, PathView};
use crate::error::{Error, Result};
use crate::volterra::StatePath;

/// Information flow a regression conditions on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Flow {
    /// Observed information: the noise and the rates up to `t`.
    F,
    /// `F` enlarged with the whole rate path.
    G,
}

/// Path functionals known at time `t_i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    State,
    RateB,
    RateH,
    CumB,
    CumH,
    /// `B((0, t] × {0})`.
    BrownianRunning,
    /// `∫∫ z H̃(ds dz)` over `(0, t]`.
    JumpRunning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub flow: Flow,
    pub degree: u32,
    pub features: Vec<Feature>,
    /// Equispaced rate samples per component in the `G` summary.
    pub lambda_samples: usize,
}

/// Minimum paths per basis function.
pub const PATHS_PER_BASIS: usize = 10;
const RIDGE: f64 = 1e-8;
const CHUNK: usize = 2048;

impl FeatureMap {
    pub fn new(flow: Flow, degree: u32, features: Vec<Feature>) -> Self {
        Self { flow, degree, features, lambda_samples: 8 }
    }

    pub fn with_lambda_samples(mut self, k: usize) -> Self {
        self.lambda_samples = k;
        self
    }

    pub fn with_flow(&self, flow: Flow) -> Self {
        Self { flow, ..self.clone() }
    }

    pub fn needs_state(&self) -> bool {
        self.features.contains(&Feature::State)
    }

    /// Number of leading raw features that are `F`-measurable at `t_i`.
    pub fn n_core(&self) -> usize {
        self.features.len()
    }

    fn summary_indices(&self, n_steps: usize) -> Vec<usize> {
        let k = self.lambda_samples;
        (1..=k).map(|j| ((j * n_steps) as f64 / k as f64).round() as usize).collect()
    }

    /// Raw features of one path at grid index `i`: the core features, then
    /// (for `G`) `Λ_T^B`, `Λ_T^H` and the rate samples.
    pub fn raw_row(&self, view: &PathView<'_>, state: Option<&StatePath>, i: usize) -> Result<Vec<f64>> {
        let mut row = Vec::with_capacity(self.features.len() + 2 + 2 * self.lambda_samples);
        for f in &self.features {
            row.push(match f {
                Feature::State => match state {
                    Some(s) => s.x[i],
                    None => return Err(Error::invalid("state feature requested without a state path")),
                },
                Feature::RateB => view.rate.lambda_b[i],
                Feature::RateH => view.rate.lambda_h[i],
                Feature::CumB => view.rate.cum_b[i],
                Feature::CumH => view.rate.cum_h[i],
                Feature::BrownianRunning => view.noise.b_running(i),
                Feature::JumpRunning => view.noise.eta_running(i),
            });
        }
        if self.flow == Flow::G {
            let m = view.grid.n_steps();
            row.push(view.rate.cum_b[m]);
            row.push(view.rate.cum_h[m]);
            for k in self.summary_indices(m) {
                row.push(view.rate.lambda_b[k]);
                row.push(view.rate.lambda_h[k]);
            }
        }
        Ok(row)
    }

    pub fn raw_matrix(&self, ens: &Ensemble, states: Option<&[StatePath]>, i: usize) -> Result<Vec<Vec<f64>>> {
        if self.needs_state() && states.is_none() {
            return Err(Error::invalid("state feature requested without state paths"));
        }
        (0..ens.n_paths())
            .into_par_iter()
            .map(|p| self.raw_row(&ens.path(p), states.map(|s| &s[p]), i))
            .collect()
    }

    pub fn design(&self, ens: &Ensemble, states: Option<&[StatePath]>, i: usize) -> Result<Design> {
        let raw = self.raw_matrix(ens, states, i)?;
        Design::new(&raw, self.n_core(), self.degree)
    }
}

/// Standardization plus polynomial expansion of raw features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Basis {
    means: Vec<f64>,
    scales: Vec<f64>,
    /// Each basis function is a product of `(raw index, power)` factors;
    /// the empty product is the constant.
    terms: Vec<Vec<(usize, u32)>>,
    pub dropped: Vec<usize>,
}

impl Basis {
    /// Core features (the first `n_core`) get all monomials up to `degree`;
    /// the remaining summary features get their own powers and, from
    /// degree 2, products with each core feature.
    pub fn fit(raw: &[Vec<f64>], n_core: usize, degree: u32) -> Self {
        let n = raw.len().max(1) as f64;
        let width = raw.first().map_or(0, Vec::len);
        let mut means = vec![0.0; width];
        let mut scales = vec![1.0; width];
        let mut dropped = Vec::new();
        let mut live_core = Vec::new();
        let mut live_summary = Vec::new();
        for f in 0..width {
            let m = raw.iter().map(|r| r[f]).sum::<f64>() / n;
            let v = raw.iter().map(|r| (r[f] - m) * (r[f] - m)).sum::<f64>() / n;
            means[f] = m;
            if v.sqrt() <= 1e-12 * (1.0 + m.abs()) {
                dropped.push(f);
                continue;
            }
            scales[f] = v.sqrt();
            if f < n_core {
                live_core.push(f);
            } else {
                live_summary.push(f);
            }
        }
        let mut terms = Vec::new();
        monomials(&live_core, degree, &mut Vec::new(), 0, &mut terms);
        for &s in &live_summary {
            for p in 1..=degree {
                terms.push(vec![(s, p)]);
            }
            if degree >= 2 {
                for &c in &live_core {
                    terms.push(vec![(c, 1), (s, 1)]);
                }
            }
        }
        Self { means, scales, terms, dropped }
    }

    pub fn dim(&self) -> usize {
        self.terms.len()
    }

    pub fn expand_into(&self, raw: &[f64], out: &mut [f64]) {
        for (k, term) in self.terms.iter().enumerate() {
            out[k] = term
                .iter()
                .map(|&(f, p)| ((raw[f] - self.means[f]) / self.scales[f]).powi(p as i32))
                .product();
        }
    }

    pub fn expand(&self, raw: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.expand_into(raw, &mut out);
        out
    }
}

/// Monomials in `vars` with total degree ≤ `degree`, in graded order.
fn monomials(vars: &[usize], degree: u32, current: &mut Vec<(usize, u32)>, from: usize, out: &mut Vec<Vec<(usize, u32)>>) {
    let used: u32 = current.iter().map(|(_, p)| p).sum();
    out.push(current.clone());
    if used == degree {
        return;
    }
    for k in from..vars.len() {
        for p in 1..=(degree - used) {
            current.push((vars[k], p));
            monomials(vars, degree, current, k + 1, out);
            current.pop();
        }
    }
}

/// Expanded design matrix of one slice with factorized normal equations.
#[derive(Debug, Clone)]
pub struct Design {
    pub basis: Basis,
    n: usize,
    rows: Vec<f64>,
    gram: DMatrix<f64>,
    factor: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    pub condition: f64,
    pub ridge: f64,
}

impl Design {
    pub fn new(raw: &[Vec<f64>], n_core: usize, degree: u32) -> Result<Self> {
        let basis = Basis::fit(raw, n_core, degree);
        let n = raw.len();
        let dim = basis.dim();
        if n < PATHS_PER_BASIS * dim {
            return Err(Error::invalid(format!(
                "{n} paths is too few for a {dim}-function basis (need {})",
                PATHS_PER_BASIS * dim
            )));
        }
        let mut rows = vec![0.0; n * dim];
        rows.par_chunks_mut(dim)
            .zip(raw.par_iter())
            .for_each(|(out, r)| basis.expand_into(r, out));
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularRegression { context: "non-finite features".into(), condition: f64::INFINITY });
        }
        let gram = chunked_gram(&rows, dim);
        let trace = gram.trace();
        let ridge = RIDGE * trace / dim as f64;
        let eig = gram.clone().symmetric_eigenvalues();
        let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        let mut damped = gram.clone();
        for k in 0..dim {
            damped[(k, k)] += ridge;
        }
        let factor = damped
            .cholesky()
            .ok_or(Error::SingularRegression { context: "normal equations".into(), condition })?;
        Ok(Self { basis, n, rows, gram, factor, condition, ridge })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    pub fn row(&self, p: usize) -> &[f64] {
        let d = self.dim();
        &self.rows[p * d..(p + 1) * d]
    }

    /// Least-squares fit of `targets`, one per path.
    pub fn fit(&self, targets: &[f64]) -> Result<RegressionFit> {
        if targets.len() != self.n {
            return Err(Error::invalid("one regression target per path is required"));
        }
        if targets.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularRegression { context: "non-finite targets".into(), condition: self.condition });
        }
        let dim = self.dim();
        let rhs = chunked_moment(&self.rows, dim, targets);
        let mut beta = self.factor.solve(&rhs);
        // iterative refinement toward the undamped normal equations
        let scale = rhs.norm().max(f64::MIN_POSITIVE);
        for _ in 0..3 {
            let resid = &rhs - &self.gram * &beta;
            if resid.norm() <= 1e-12 * scale {
                break;
            }
            beta += self.factor.solve(&resid);
        }
        let coefficients: Vec<f64> = beta.iter().copied().collect();
        let predictions: Vec<f64> = (0..self.n)
            .into_par_iter()
            .map(|p| dot(self.row(p), &coefficients))
            .collect();
        let mean = targets.iter().sum::<f64>() / self.n as f64;
        let sst: f64 = targets.iter().map(|y| (y - mean) * (y - mean)).sum();
        let ssr: f64 = targets.iter().zip(&predictions).map(|(y, f)| (y - f) * (y - f)).sum();
        let r2 = if sst <= 1e-300 { 1.0 } else { 1.0 - ssr / sst };
        Ok(RegressionFit {
            basis: self.basis.clone(),
            coefficients,
            predictions,
            r2,
            condition: self.condition,
            mse: ssr / self.n as f64,
        })
    }

    /// Largest normalized inner product of the residual with a basis column.
    pub fn orthogonality(&self, targets: &[f64], fit: &RegressionFit) -> f64 {
        let dim = self.dim();
        let resid: Vec<f64> = targets.iter().zip(&fit.predictions).map(|(y, f)| y - f).collect();
        let cross = chunked_moment(&self.rows, dim, &resid);
        let y_norm = targets.iter().map(|y| y * y).sum::<f64>().sqrt();
        (0..dim)
            .map(|k| {
                let col = self.gram[(k, k)].sqrt();
                if col * y_norm > 0.0 {
                    cross[k].abs() / (col * y_norm)
                } else {
                    0.0
                }
            })
            .fold(0.0, f64::max)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `XᵀX` reduced chunk by chunk in a fixed order, so the result does not
/// depend on the number of worker threads.
fn chunked_gram(rows: &[f64], dim: usize) -> DMatrix<f64> {
    let partials: Vec<Vec<f64>> = rows
        .par_chunks(CHUNK * dim)
        .map(|chunk| {
            let mut g = vec![0.0; dim * dim];
            for r in chunk.chunks(dim) {
                for a in 0..dim {
                    let ra = r[a];
                    if ra == 0.0 {
                        continue;
                    }
                    let line = &mut g[a * dim..a * dim + a + 1];
                    for (b, slot) in line.iter_mut().enumerate() {
                        *slot += ra * r[b];
                    }
                }
            }
            g
        })
        .collect();
    let mut gram = DMatrix::zeros(dim, dim);
    for g in &partials {
        for a in 0..dim {
            for b in 0..=a {
                gram[(a, b)] += g[a * dim + b];
            }
        }
    }
    for a in 0..dim {
        for b in 0..a {
            gram[(b, a)] = gram[(a, b)];
        }
    }
    gram
}

fn chunked_moment(rows: &[f64], dim: usize, y: &[f64]) -> DVector<f64> {
    let partials: Vec<Vec<f64>> = rows
        .par_chunks(CHUNK * dim)
        .zip(y.par_chunks(CHUNK))
        .map(|(chunk, ys)| {
            let mut m = vec![0.0; dim];
            for (r, yv) in chunk.chunks(dim).zip(ys) {
                for k in 0..dim {
                    m[k] += r[k] * yv;
                }
            }
            m
        })
        .collect();
    let mut out = DVector::zeros(dim);
    for m in &partials {
        for k in 0..dim {
            out[k] += m[k];
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionFit {
    pub basis: Basis,
    pub coefficients: Vec<f64>,
    /// In-sample predictions, one per path.
    pub predictions: Vec<f64>,
    pub r2: f64,
    pub condition: f64,
    pub mse: f64,
}

impl RegressionFit {
    /// Prediction for a raw feature row.
    pub fn predict(&self, raw: &[f64]) -> f64 {
        dot(&self.basis.expand(raw), &self.coefficients)
    }
}

/// Regress `targets` on the features of slice `i`.
pub fn fit_conditional(
    targets: &[f64],
    map: &FeatureMap,
    ens: &Ensemble,
    states: Option<&[StatePath]>,
    i: usize,
) -> Result<RegressionFit> {
    map.design(ens, states, i)?.fit(targets)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TowerReport {
    /// Ensemble L² distance between `Ê[Ê[ξ|t2]|t1]` and `Ê[ξ|t1]`.
    pub distance: f64,
    /// `distance` relative to the L² norm of `Ê[ξ|t1]` (absolute if that is 0).
    pub relative: f64,
    /// `sqrt(dim / n)` times the residual RMS at `t1`, a scale for regression noise.
    pub noise_scale: f64,
}

pub fn tower_check(
    targets: &[f64],
    t1: usize,
    t2: usize,
    map: &FeatureMap,
    ens: &Ensemble,
    states: Option<&[StatePath]>,
) -> Result<TowerReport> {
    if t1 > t2 {
        return Err(Error::invalid("tower check needs t1 <= t2"));
    }
    let d1 = map.design(ens, states, t1)?;
    let direct = d1.fit(targets)?;
    let composed = if t1 == t2 {
        direct.clone()
    } else {
        let inner = map.design(ens, states, t2)?.fit(targets)?;
        d1.fit(&inner.predictions)?
    };
    let n = targets.len() as f64;
    let distance = (composed
        .predictions
        .iter()
        .zip(&direct.predictions)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
        .sqrt();
    let norm = (direct.predictions.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    let relative = if norm > 0.0 { distance / norm } else { distance };
    let noise_scale = (d1.dim() as f64 / n).sqrt() * direct.mse.sqrt();
    Ok(TowerReport { distance, relative, noise_scale })
}
