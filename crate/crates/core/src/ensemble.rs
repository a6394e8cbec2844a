//! A simulated ensemble: rate paths plus the noise drawn on top of them.

use crate::error::Result;
use crate::grid::{MarkGrid, TimeGrid};
use crate::noise::{sample_noise, NoisePath};
use crate::rng::EnsembleHandle;
use crate::timechange::{sample_rate_paths, RatePath, RateSpec};

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub grid: TimeGrid,
    pub marks: MarkGrid,
    pub handle: EnsembleHandle,
    pub rates: Vec<RatePath>,
    pub noise: Vec<NoisePath>,
}

/// Borrowed view of one path of an ensemble.
#[derive(Debug, Clone, Copy)]
pub struct PathView<'a> {
    pub grid: &'a TimeGrid,
    pub marks: &'a MarkGrid,
    pub rate: &'a RatePath,
    pub noise: &'a NoisePath,
    pub index: usize,
}

impl Ensemble {
    pub fn simulate(grid: TimeGrid, marks: MarkGrid, spec: &RateSpec, handle: EnsembleHandle) -> Result<Self> {
        let rates = sample_rate_paths(spec, &grid, &handle)?;
        let noise = sample_noise(&rates, &marks, &grid, &handle)?;
        Ok(Self { grid, marks, handle, rates, noise })
    }

    pub fn n_paths(&self) -> usize {
        self.noise.len()
    }

    pub fn path(&self, index: usize) -> PathView<'_> {
        PathView {
            grid: &self.grid,
            marks: &self.marks,
            rate: &self.rates[index],
            noise: &self.noise[index],
            index,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_handle_same_ensemble() {
        let g = TimeGrid::uniform(1.0, 8).unwrap();
        let marks = MarkGrid::new(vec![0.5], vec![1.0]).unwrap();
        let spec = RateSpec::constant(1.0, 2.0);
        let a = Ensemble::simulate(g.clone(), marks.clone(), &spec, EnsembleHandle::new(16, 5).unwrap()).unwrap();
        let b = Ensemble::simulate(g, marks, &spec, EnsembleHandle::new(16, 5).unwrap()).unwrap();
        assert_eq!(a.noise, b.noise);
        assert_eq!(a.rates, b.rates);
    }
}
