//! Affine toy model: sensor j reads `(A lambda + b)_j` exactly.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::sequential::{DataPacket, Simulator};

#[derive(Clone, Debug)]
pub struct LinearModel {
    sensor_matrix: DMatrix<f64>,
    offset: DVector<f64>,
}

impl LinearModel {
    pub fn new(sensor_matrix: DMatrix<f64>, offset: DVector<f64>) -> Result<Self> {
        if sensor_matrix.nrows() == 0 || sensor_matrix.ncols() == 0 {
            return Err(Error::InvalidArgument(
                "linear model needs a nonempty sensor matrix".into(),
            ));
        }
        if offset.len() != sensor_matrix.nrows() {
            return Err(Error::DimensionMismatch {
                context: "linear model offset length",
                expected: sensor_matrix.nrows(),
                found: offset.len(),
            });
        }
        Ok(Self {
            sensor_matrix,
            offset,
        })
    }

    pub fn sensor_matrix(&self) -> &DMatrix<f64> {
        &self.sensor_matrix
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    pub fn measurement_count(&self) -> usize {
        self.sensor_matrix.nrows()
    }

    pub fn param_dim(&self) -> usize {
        self.sensor_matrix.ncols()
    }

    pub fn measure(&self, lambda: &DVector<f64>) -> DVector<f64> {
        &self.sensor_matrix * lambda + &self.offset
    }

    /// Noisy truth packets: every window re-observes all sensors.
    pub fn truth_packets(
        &self,
        lambda_true: &DVector<f64>,
        sigma: f64,
        windows: usize,
        seed: u64,
    ) -> Result<Vec<DataPacket>> {
        if sigma <= 0.0 {
            return Err(Error::InvalidNoiseModel { index: 0, sigma });
        }
        if lambda_true.len() != self.param_dim() {
            return Err(Error::DimensionMismatch {
                context: "linear truth parameter length",
                expected: self.param_dim(),
                found: lambda_true.len(),
            });
        }
        let clean = self.measure(lambda_true);
        let n = self.measurement_count();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut packets = Vec::with_capacity(windows);
        for m in 1..=windows {
            let values: Vec<f64> = clean
                .iter()
                .map(|v| {
                    let xi: f64 = StandardNormal.sample(&mut rng);
                    v + sigma * xi
                })
                .collect();
            packets.push(DataPacket {
                window_index: m,
                times: vec![m as f64; n],
                values,
                sigmas: vec![sigma; n],
                sensor_ids: (0..n).map(|j| format!("m{j}")).collect(),
            });
        }
        Ok(packets)
    }
}

impl Simulator for LinearModel {
    fn simulate(&self, samples: &DMatrix<f64>, packet: &DataPacket) -> Result<DMatrix<f64>> {
        if samples.ncols() != self.param_dim() {
            return Err(Error::DimensionMismatch {
                context: "linear model parameter dimension",
                expected: self.param_dim(),
                found: samples.ncols(),
            });
        }
        if packet.len() != self.measurement_count() {
            return Err(Error::DimensionMismatch {
                context: "linear model packet size",
                expected: self.measurement_count(),
                found: packet.len(),
            });
        }
        let mut out = samples * self.sensor_matrix.transpose();
        for j in 0..self.offset.len() {
            let mut col = out.column_mut(j);
            col.add_scalar_mut(self.offset[j]);
        }
        Ok(out)
    }
}
