//! Time-change rates `λ = (λ^B, λ^H)` and the random measure `Λ`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Cell, MarkGrid, MarkSet, TimeGrid};
use crate::rng::{streams, EnsembleHandle};

/// Law of one rate component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RateModel {
    Constant {
        level: f64,
    },
    /// `levels[k]` on `[breaks[k-1], breaks[k])`, right-continuous.
    PiecewiseConstant {
        breaks: Vec<f64>,
        levels: Vec<f64>,
    },
    /// Square-root (CIR-type) rate with full truncation.
    MeanRevertingSqrt {
        initial: f64,
        speed: f64,
        mean: f64,
        vol: f64,
    },
}

impl RateModel {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("rate parameter {name} must be finite and >= 0, got {v}")))
            }
        };
        match self {
            RateModel::Constant { level } => finite_nonneg("level", *level),
            RateModel::PiecewiseConstant { breaks, levels } => {
                if levels.len() != breaks.len() + 1 {
                    return Err(Error::invalid("piecewise rate needs one more level than breaks"));
                }
                if breaks.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(Error::invalid("piecewise rate breaks must be increasing"));
                }
                levels.iter().try_for_each(|l| finite_nonneg("level", *l))
            }
            RateModel::MeanRevertingSqrt { initial, speed, mean, vol } => {
                finite_nonneg("initial", *initial)?;
                finite_nonneg("speed", *speed)?;
                finite_nonneg("mean", *mean)?;
                finite_nonneg("vol", *vol)
            }
        }
    }

    pub fn is_deterministic(&self) -> bool {
        match self {
            RateModel::MeanRevertingSqrt { vol, .. } => *vol == 0.0,
            _ => true,
        }
    }

    /// Values on the grid and their cumulative integral. `normals` supplies
    /// one standard normal per step for the stochastic kind.
    fn realize(&self, grid: &TimeGrid, normals: &mut dyn FnMut() -> f64) -> (Vec<f64>, Vec<f64>) {
        match self {
            RateModel::Constant { level } => {
                let values = vec![*level; grid.points().len()];
                let cum = grid.points().iter().map(|t| level * t).collect();
                (values, cum)
            }
            RateModel::PiecewiseConstant { breaks, levels } => {
                let at = |t: f64| levels[breaks.iter().take_while(|b| **b <= t).count()];
                let values = grid.points().iter().map(|&t| at(t)).collect();
                let cum = grid.points().iter().map(|&t| piecewise_integral(breaks, levels, t)).collect();
                (values, cum)
            }
            RateModel::MeanRevertingSqrt { initial, speed, mean, vol } => {
                let mut v = *initial;
                let mut values = Vec::with_capacity(grid.points().len());
                values.push(v.max(0.0));
                for i in 0..grid.n_steps() {
                    let dt = grid.dt(i);
                    let decay = (-speed * dt).exp();
                    // exact conditional mean of the drift part; diffusion on the truncated level
                    let spread = if *speed > 0.0 {
                        ((1.0 - decay * decay) / (2.0 * speed)).sqrt()
                    } else {
                        dt.sqrt()
                    };
                    let z = if *vol > 0.0 { normals() } else { 0.0 };
                    v = mean + (v.max(0.0) - mean) * decay + vol * v.max(0.0).sqrt() * spread * z;
                    values.push(v.max(0.0));
                }
                let cum = trapezoid_cumulative(grid, &values);
                (values, cum)
            }
        }
    }
}

fn piecewise_integral(breaks: &[f64], levels: &[f64], t: f64) -> f64 {
    let mut acc = 0.0;
    let mut left = 0.0;
    for (k, level) in levels.iter().enumerate() {
        let right = breaks.get(k).copied().unwrap_or(f64::INFINITY).min(t);
        if right > left {
            acc += level * (right - left);
            left = right;
        }
        if left >= t {
            break;
        }
    }
    acc
}

pub(crate) fn trapezoid_cumulative(grid: &TimeGrid, values: &[f64]) -> Vec<f64> {
    let mut cum = Vec::with_capacity(values.len());
    cum.push(0.0);
    let mut acc = 0.0;
    for i in 0..grid.n_steps() {
        acc += 0.5 * (values[i] + values[i + 1]) * grid.dt(i);
        cum.push(acc);
    }
    cum
}

/// How the two rate components share randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    #[default]
    Independent,
    /// Both components are driven by the same normal draws.
    CommonFactor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSpec {
    pub gauss: RateModel,
    pub jump: RateModel,
    #[serde(default)]
    pub coupling: Coupling,
}

impl RateSpec {
    pub fn constant(level_b: f64, level_h: f64) -> Self {
        Self {
            gauss: RateModel::Constant { level: level_b },
            jump: RateModel::Constant { level: level_h },
            coupling: Coupling::Independent,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gauss.validate()?;
        self.jump.validate()
    }

    pub fn is_deterministic(&self) -> bool {
        self.gauss.is_deterministic() && self.jump.is_deterministic()
    }
}

/// One realization of `λ` on the grid together with `Λ_t = ∫_0^t λ_s ds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatePath {
    pub lambda_b: Vec<f64>,
    pub lambda_h: Vec<f64>,
    pub cum_b: Vec<f64>,
    pub cum_h: Vec<f64>,
}

/// Rate values at one time point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Rates {
    pub b: f64,
    pub h: f64,
}

impl RatePath {
    /// Path from grid values; cumulative integrals by the trapezoid rule.
    pub fn from_values(grid: &TimeGrid, lambda_b: Vec<f64>, lambda_h: Vec<f64>) -> Result<Self> {
        let n = grid.points().len();
        if lambda_b.len() != n || lambda_h.len() != n {
            return Err(Error::invalid("rate values must match the grid"));
        }
        if lambda_b.iter().chain(&lambda_h).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("rate values must be finite and nonnegative"));
        }
        let cum_b = trapezoid_cumulative(grid, &lambda_b);
        let cum_h = trapezoid_cumulative(grid, &lambda_h);
        Ok(Self { lambda_b, lambda_h, cum_b, cum_h })
    }

    pub fn rates(&self, i: usize) -> Rates {
        Rates { b: self.lambda_b[i], h: self.lambda_h[i] }
    }

    /// `Λ^B` mass of grid step `i`.
    pub fn step_mass_b(&self, i: usize) -> f64 {
        self.cum_b[i + 1] - self.cum_b[i]
    }

    /// `Λ^H` time mass of grid step `i` (before multiplying by `ν`).
    pub fn step_mass_h(&self, i: usize) -> f64 {
        self.cum_h[i + 1] - self.cum_h[i]
    }

    pub fn n_steps(&self) -> usize {
        self.lambda_b.len() - 1
    }
}

pub fn sample_rate_paths(spec: &RateSpec, grid: &TimeGrid, ens: &EnsembleHandle) -> Result<Vec<RatePath>> {
    spec.validate()?;
    let paths = (0..ens.n_paths)
        .map(|p| sample_one(spec, grid, ens, p))
        .collect();
    Ok(paths)
}

fn sample_one(spec: &RateSpec, grid: &TimeGrid, ens: &EnsembleHandle, path: usize) -> RatePath {
    let (lambda_b, cum_b, lambda_h, cum_h) = match spec.coupling {
        Coupling::Independent => {
            let mut rb = ens.substream(path, streams::RATE_GAUSS);
            let mut rh = ens.substream(path, streams::RATE_JUMP);
            let (lb, cb) = spec.gauss.realize(grid, &mut || rb.sample(StandardNormal));
            let (lh, ch) = spec.jump.realize(grid, &mut || rh.sample(StandardNormal));
            (lb, cb, lh, ch)
        }
        Coupling::CommonFactor => {
            let mut draws = Vec::with_capacity(grid.n_steps());
            let mut rc = ens.substream(path, streams::RATE_COMMON);
            for _ in 0..grid.n_steps() {
                draws.push(rc.sample::<f64, _>(StandardNormal));
            }
            let mut it = draws.iter().copied();
            let (lb, cb) = spec.gauss.realize(grid, &mut || it.next().unwrap_or(0.0));
            let mut it = draws.iter().copied();
            let (lh, ch) = spec.jump.realize(grid, &mut || it.next().unwrap_or(0.0));
            (lb, cb, lh, ch)
        }
    };
    RatePath { lambda_b, lambda_h, cum_b, cum_h }
}

/// `Λ(Δ)` for a grid-aligned cell.
pub fn measure_of_cell(path: &RatePath, marks: &MarkGrid, cell: &Cell) -> Result<f64> {
    let last = path.cum_b.len() - 1;
    if cell.start_index > cell.end_index || cell.end_index > last {
        return Err(Error::invalid(format!(
            "cell steps {}..{} outside the grid of {last} steps",
            cell.start_index, cell.end_index
        )));
    }
    let (a, b) = (cell.start_index, cell.end_index);
    match cell.marks {
        MarkSet::Gauss => Ok(path.cum_b[b] - path.cum_b[a]),
        MarkSet::Bin(j) if j < marks.len() => Ok((path.cum_h[b] - path.cum_h[a]) * marks.weight(j)),
        MarkSet::Bin(j) => Err(Error::invalid(format!("mark bin {j} outside the mark grid"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn whole(grid: &TimeGrid, marks: MarkSet) -> Cell {
        Cell {
            start_index: 0,
            end_index: grid.n_steps(),
            start: 0.0,
            end: grid.horizon(),
            marks,
        }
    }

    #[test]
    fn constant_rate_integrates_exactly() {
        let g = TimeGrid::uniform(1.0, 10).unwrap();
        let ens = EnsembleHandle::new(3, 1).unwrap();
        let paths = sample_rate_paths(&RateSpec::constant(1.0, 1.0), &g, &ens).unwrap();
        assert_eq!(*paths[0].cum_b.last().unwrap(), 1.0);
    }

    #[test]
    fn piecewise_rectangle() {
        let g = TimeGrid::uniform(1.0, 4).unwrap();
        let spec = RateSpec {
            gauss: RateModel::PiecewiseConstant { breaks: vec![0.5], levels: vec![2.0, 0.0] },
            jump: RateModel::Constant { level: 0.0 },
            coupling: Coupling::Independent,
        };
        let ens = EnsembleHandle::new(1, 1).unwrap();
        let p = &sample_rate_paths(&spec, &g, &ens).unwrap()[0];
        assert!((p.cum_b[4] - 1.0).abs() < 1e-15);
        assert_eq!(p.lambda_b[2], 0.0);
        assert_eq!(p.lambda_b[1], 2.0);
    }

    #[test]
    fn sqrt_model_stays_nonnegative() {
        let g = TimeGrid::uniform(1.0, 50).unwrap();
        let spec = RateSpec {
            gauss: RateModel::MeanRevertingSqrt { initial: 0.05, speed: 1.0, mean: 0.05, vol: 1.5 },
            jump: RateModel::MeanRevertingSqrt { initial: 0.1, speed: 0.5, mean: 0.1, vol: 2.0 },
            coupling: Coupling::Independent,
        };
        let ens = EnsembleHandle::new(500, 9).unwrap();
        let paths = sample_rate_paths(&spec, &g, &ens).unwrap();
        for p in &paths {
            assert!(p.lambda_b.iter().chain(&p.lambda_h).all(|v| *v >= 0.0));
            assert!(p.cum_b.windows(2).all(|w| w[1] >= w[0]));
            assert_eq!(p.cum_b[0], 0.0);
        }
    }

    #[test]
    fn common_factor_shares_draws() {
        let g = TimeGrid::uniform(1.0, 20).unwrap();
        let model = RateModel::MeanRevertingSqrt { initial: 1.0, speed: 1.0, mean: 1.0, vol: 0.4 };
        let spec = RateSpec { gauss: model.clone(), jump: model, coupling: Coupling::CommonFactor };
        let ens = EnsembleHandle::new(2, 4).unwrap();
        let p = &sample_rate_paths(&spec, &g, &ens).unwrap()[1];
        assert_eq!(p.lambda_b, p.lambda_h);
    }

    #[test]
    fn invalid_parameters() {
        let spec = RateSpec {
            gauss: RateModel::MeanRevertingSqrt { initial: -1.0, speed: 1.0, mean: 1.0, vol: 0.1 },
            jump: RateModel::Constant { level: 1.0 },
            coupling: Coupling::Independent,
        };
        let g = TimeGrid::uniform(1.0, 4).unwrap();
        let ens = EnsembleHandle::new(1, 1).unwrap();
        assert!(sample_rate_paths(&spec, &g, &ens).is_err());
    }

    #[test]
    fn cell_measures() {
        let g = TimeGrid::uniform(1.0, 8).unwrap();
        let marks = MarkGrid::new(vec![1.0], vec![0.5]).unwrap();
        let unit = RatePath::from_values(&g, vec![1.0; 9], vec![2.0; 9]).unwrap();
        assert_eq!(measure_of_cell(&unit, &marks, &whole(&g, MarkSet::Gauss)).unwrap(), 1.0);
        assert_eq!(measure_of_cell(&unit, &marks, &whole(&g, MarkSet::Bin(0))).unwrap(), 1.0);
        // λ^B(t) = t: trapezoid is exact for linear rates, oracle t²/2
        let lin = RatePath::from_values(&g, g.points().to_vec(), vec![0.0; 9]).unwrap();
        let m = measure_of_cell(&lin, &marks, &whole(&g, MarkSet::Gauss)).unwrap();
        assert!((m - 0.5).abs() < 1e-15);
        let outside = Cell { end_index: 9, ..whole(&g, MarkSet::Gauss) };
        assert!(measure_of_cell(&unit, &marks, &outside).is_err());
        assert!(measure_of_cell(&unit, &marks, &whole(&g, MarkSet::Bin(1))).is_err());
    }

    #[test]
    fn additivity_on_aligned_cells() {
        let g = TimeGrid::uniform(1.0, 8).unwrap();
        let marks = MarkGrid::empty();
        let vals: Vec<f64> = g.points().iter().map(|t| 1.0 + t * t).collect();
        let p = RatePath::from_values(&g, vals, vec![0.0; 9]).unwrap();
        let cell = |a: usize, b: usize| Cell {
            start_index: a,
            end_index: b,
            start: g.t(a),
            end: g.t(b),
            marks: MarkSet::Gauss,
        };
        let left = measure_of_cell(&p, &marks, &cell(0, 3)).unwrap();
        let right = measure_of_cell(&p, &marks, &cell(3, 8)).unwrap();
        let all = measure_of_cell(&p, &marks, &cell(0, 8)).unwrap();
        assert!((left + right - all).abs() < 1e-14);
    }

    #[test]
    fn trapezoid_is_second_order_on_smooth_rates() {
        // deterministic square-root rate: λ(t) = m + (λ0 - m) e^{-κt}
        let (l0, m, k) = (2.0, 0.5, 3.0);
        let exact = (m * 1.0) + (l0 - m) * (1.0 - (-k * 1.0f64).exp()) / k;
        let err = |steps: usize| {
            let g = TimeGrid::uniform(1.0, steps).unwrap();
            let spec = RateSpec {
                gauss: RateModel::MeanRevertingSqrt { initial: l0, speed: k, mean: m, vol: 0.0 },
                jump: RateModel::Constant { level: 0.0 },
                coupling: Coupling::Independent,
            };
            let ens = EnsembleHandle::new(1, 0).unwrap();
            let p = &sample_rate_paths(&spec, &g, &ens).unwrap()[0];
            (p.cum_b[steps] - exact).abs()
        };
        for steps in [8, 16, 32] {
            let ratio = err(steps) / err(2 * steps);
            assert!((3.0..=5.0).contains(&ratio), "ratio {ratio} at {steps} steps");
        }
    }
}
