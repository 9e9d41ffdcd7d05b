//! Spatial sensor layouts for field observations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::kl::Grid2d;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SensorSet {
    pub locations: Vec<[f64; 2]>,
    /// Observation instants over the whole horizon, increasing.
    pub times: Vec<f64>,
    pub noise_sigma: f64,
    pub rng_seed: u64,
}

impl SensorSet {
    /// Uniformly placed sensors over the open domain square, observing at a
    /// fixed cadence: `cadence, 2*cadence, ..., horizon`.
    pub fn random_uniform(
        count: usize,
        grid: &Grid2d,
        cadence: f64,
        horizon: f64,
        noise_sigma: f64,
        rng_seed: u64,
    ) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidArgument("need at least one sensor".into()));
        }
        if !(cadence > 0.0) || !(horizon >= cadence) {
            return Err(Error::InvalidArgument(
                "need 0 < cadence <= horizon".into(),
            ));
        }
        if noise_sigma <= 0.0 {
            return Err(Error::InvalidNoiseModel {
                index: 0,
                sigma: noise_sigma,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let locations: Vec<[f64; 2]> = (0..count)
            .map(|_| {
                [
                    rng.gen_range(grid.lower()..grid.upper()),
                    rng.gen_range(grid.lower()..grid.upper()),
                ]
            })
            .collect();
        let steps = (horizon / cadence).round() as usize;
        let times: Vec<f64> = (1..=steps).map(|j| j as f64 * cadence).collect();
        Ok(Self {
            locations,
            times,
            noise_sigma,
            rng_seed,
        })
    }

    pub fn validate(&self, grid: &Grid2d) -> Result<()> {
        for (idx, loc) in self.locations.iter().enumerate() {
            if loc.iter().any(|c| !c.is_finite() || *c < grid.lower() || *c > grid.upper()) {
                return Err(Error::InvalidSensor { index: idx });
            }
        }
        if self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(
                "sensor observation times must be increasing".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placement_is_inside_the_domain_and_deterministic() {
        let grid = Grid2d::new(64, -2.0, 2.0).unwrap();
        let a = SensorSet::random_uniform(500, &grid, 0.05, 3.0, 0.05, 11).unwrap();
        let b = SensorSet::random_uniform(500, &grid, 0.05, 3.0, 0.05, 11).unwrap();
        assert_eq!(a.locations, b.locations);
        a.validate(&grid).unwrap();
        assert_eq!(a.times.len(), 60);
        assert!((a.times[0] - 0.05).abs() < 1e-12);
        assert!((a.times[59] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_domain_sensor_is_rejected() {
        let grid = Grid2d::new(8, -2.0, 2.0).unwrap();
        let set = SensorSet {
            locations: vec![[0.0, 0.0], [2.5, 0.0]],
            times: vec![0.1],
            noise_sigma: 0.1,
            rng_seed: 0,
        };
        assert!(matches!(
            set.validate(&grid),
            Err(Error::InvalidSensor { index: 1 })
        ));
    }
}
