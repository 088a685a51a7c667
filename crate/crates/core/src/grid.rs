//! Spatial and spectral sampling grids plus the field tensor they index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modal::RoomSpec;

/// Points per axis of the reconstruction grid.
pub const FINE_N: usize = 32;
/// Number of frequency bins.
pub const N_FREQ: usize = 40;
/// Points per axis of the candidate microphone grid.
pub const COARSE_N: usize = 8;
/// Fine-grid stride between neighbouring coarse points.
pub const UPSAMPLE: usize = 4;

/// 1/12-octave frequencies starting at 30 Hz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyGrid {
    pub frequencies: Vec<f64>,
}

impl FrequencyGrid {
    pub const F_START: f64 = 30.0;

    /// The 40-point grid `30 * 2^(k/12)`, k = 0..39.
    pub fn standard() -> Self {
        Self::twelfth_octave(Self::F_START, N_FREQ)
    }

    pub fn twelfth_octave(f_start: f64, count: usize) -> Self {
        let frequencies = (0..count)
            .map(|k| f_start * 2f64.powf(k as f64 / 12.0))
            .collect();
        Self { frequencies }
    }

    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }

    pub fn angular(&self, k: usize) -> f64 {
        2.0 * std::f64::consts::PI * self.frequencies[k]
    }
}

impl Default for FrequencyGrid {
    fn default() -> Self {
        Self::standard()
    }
}

/// Coarse microphone grid `I x J` embedded in an `IL x JP` fine grid.
///
/// Fine points include both walls, so the spacing along x is `l_x / (fine_n - 1)`
/// and coarse point `(i, j)` sits on fine index `(L*i, P*j)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub coarse_i: usize,
    pub coarse_j: usize,
    pub upsample_l: usize,
    pub upsample_p: usize,
    pub fine_n: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            coarse_i: COARSE_N,
            coarse_j: COARSE_N,
            upsample_l: UPSAMPLE,
            upsample_p: UPSAMPLE,
            fine_n: FINE_N,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.coarse_i == 0 || self.coarse_j == 0 || self.upsample_l == 0 || self.upsample_p == 0
        {
            return Err(Error::InvalidArgument("grid counts must be positive".into()));
        }
        if self.coarse_i * self.upsample_l != self.fine_n
            || self.coarse_j * self.upsample_p != self.fine_n
        {
            return Err(Error::InvalidArgument(format!(
                "coarse grid {}x{} with upsampling {}x{} does not tile {} fine points",
                self.coarse_i, self.coarse_j, self.upsample_l, self.upsample_p, self.fine_n
            )));
        }
        Ok(())
    }

    /// x coordinate in meters of fine column `i`.
    pub fn x_position(&self, room: &RoomSpec, i: usize) -> f64 {
        i as f64 * room.l_x / (self.fine_n - 1) as f64
    }

    pub fn y_position(&self, room: &RoomSpec, j: usize) -> f64 {
        j as f64 * room.l_y / (self.fine_n - 1) as f64
    }

    /// Fine-grid index of a coarse point.
    pub fn fine_index(&self, coarse: (usize, usize)) -> (usize, usize) {
        (coarse.0 * self.upsample_l, coarse.1 * self.upsample_p)
    }

    pub fn n_coarse(&self) -> usize {
        self.coarse_i * self.coarse_j
    }
}

/// Magnitude field sampled on the fine grid for every frequency bin.
///
/// Storage is frequency-major: `values[(k * n + j) * n + i]` with `i` along x
/// and `j` along y, the same order as the on-disk `.f32` files.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldTensor {
    n: usize,
    n_freq: usize,
    values: Vec<f32>,
    pub room: RoomSpec,
}

impl FieldTensor {
    pub fn new(n: usize, n_freq: usize, values: Vec<f32>, room: RoomSpec) -> Result<Self> {
        if values.len() != n * n * n_freq {
            return Err(Error::Shape(format!(
                "field needs {} values, got {}",
                n * n * n_freq,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::NonFinite(format!("field entry {v}")));
        }
        Ok(Self {
            n,
            n_freq,
            values,
            room,
        })
    }

    pub fn zeros(n: usize, n_freq: usize, room: RoomSpec) -> Self {
        Self {
            n,
            n_freq,
            values: vec![0.0; n * n * n_freq],
            room,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_freq(&self) -> usize {
        self.n_freq
    }

    #[inline]
    pub fn get(&self, j: usize, i: usize, k: usize) -> f32 {
        self.values[(k * self.n + j) * self.n + i]
    }

    #[inline]
    pub fn set(&mut self, j: usize, i: usize, k: usize, v: f32) {
        self.values[(k * self.n + j) * self.n + i] = v;
    }

    /// Row-major `n x n` plane of bin `k` (rows are y, columns x).
    pub fn slice(&self, k: usize) -> &[f32] {
        let plane = self.n * self.n;
        &self.values[k * plane..(k + 1) * plane]
    }

    pub fn slice_mut(&mut self, k: usize) -> &mut [f32] {
        let plane = self.n * self.n;
        &mut self.values[k * plane..(k + 1) * plane]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }
}
