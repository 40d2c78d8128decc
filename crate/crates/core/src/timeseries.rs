//! Uniformly sampled trajectories, batch windowing and forward differences.

use alloc::vec::Vec;
use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// A uniformly sampled multivariate time series.
///
/// Rows are time samples, columns are state components.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    values: DMatrix<f64>,
    dt: f64,
    t0: f64,
}

impl Trajectory {
    pub fn new(values: DMatrix<f64>, dt: f64, t0: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidTimeStep(dt));
        }
        if values.nrows() < 2 {
            return Err(Error::TooFewSamples(values.nrows()));
        }
        for col in 0..values.ncols() {
            for row in 0..values.nrows() {
                if !values[(row, col)].is_finite() {
                    return Err(Error::NonFinite { row, col });
                }
            }
        }
        Ok(Self { values, dt, t0 })
    }

    /// Builds a trajectory from per-sample state rows.
    pub fn from_rows(rows: &[Vec<f64>], dt: f64, t0: f64) -> Result<Self> {
        let p = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != p) {
            return Err(Error::DimensionMismatch {
                context: "trajectory row",
                expected: p,
                found: r.len(),
            });
        }
        let values = DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]);
        Self::new(values, dt, t0)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    /// State dimension `p`.
    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn time(&self, sample: usize) -> f64 {
        self.t0 + sample as f64 * self.dt
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 * self.dt
    }

    pub fn sample(&self, m: usize) -> Vec<f64> {
        self.values.row(m).iter().copied().collect()
    }

    /// Contiguous sub-trajectory `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() {
            return Err(Error::DimensionMismatch {
                context: "trajectory window end",
                expected: self.len(),
                found: start + len,
            });
        }
        Self::new(self.values.rows(start, len).into_owned(), self.dt, self.time(start))
    }

    /// Keeps only the listed components, in the given order.
    pub fn select_columns(&self, columns: &[usize]) -> Result<Self> {
        if let Some(&bad) = columns.iter().find(|&&c| c >= self.dim()) {
            return Err(Error::DimensionMismatch {
                context: "column selection",
                expected: self.dim(),
                found: bad + 1,
            });
        }
        let values = self.values.select_columns(columns.iter());
        Self::new(values, self.dt, self.t0)
    }
}

/// One contiguous window `[t_Bk, t_Bk + M·dt)` of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub data: Trajectory,
    /// 1-based position in the stream.
    pub index: usize,
    /// Forward-difference steps that enter the CEM and the regression;
    /// every step when `None`.
    pub step_mask: Option<Vec<bool>>,
}

impl Batch {
    pub fn new(data: Trajectory, index: usize) -> Self {
        Self {
            data,
            index,
            step_mask: None,
        }
    }

    pub fn sample_count(&self) -> usize {
        self.data.len()
    }

    pub fn start_time(&self) -> f64 {
        self.data.t0()
    }

    pub fn end_time(&self) -> f64 {
        self.data.t0() + self.data.duration()
    }
}

/// Number of samples per batch for a given batch length.
pub fn samples_per_batch(batch_length: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidTimeStep(dt));
    }
    if !(batch_length >= 2.0 * dt) {
        return Err(Error::BatchTooShort { batch_length, dt });
    }
    Ok(libm::round(batch_length / dt) as usize)
}

/// Splits a trajectory into contiguous batches of `round(batch_length/dt)`
/// samples. A trailing remainder shorter than one batch is discarded.
pub fn make_batches(traj: &Trajectory, batch_length: f64) -> Result<Vec<Batch>> {
    let m = samples_per_batch(batch_length, traj.dt())?;
    let count = traj.len() / m;
    (0..count)
        .map(|k| Ok(Batch::new(traj.window(k * m, m)?, k + 1)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DifferenceScheme {
    Forward,
}

/// Time-derivative estimates aligned with the first `M - 1` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeSeries {
    pub values: DMatrix<f64>,
    pub scheme: DifferenceScheme,
}

/// Row `m` is `(x[m+1] - x[m]) / dt` for `m = 0..M-1`; it is paired with
/// state row `m` in every downstream regression.
pub fn forward_difference(traj: &Trajectory) -> DerivativeSeries {
    let n = traj.len() - 1;
    let x = traj.values();
    let inv_dt = 1.0 / traj.dt();
    let values = DMatrix::from_fn(n, traj.dim(), |m, j| (x[(m + 1, j)] - x[(m, j)]) * inv_dt);
    DerivativeSeries {
        values,
        scheme: DifferenceScheme::Forward,
    }
}
