//! Rigid-wall rectangular room, modal expansion of the Green's function.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FieldTensor, FrequencyGrid, GridSpec};

pub const SPEED_OF_SOUND: f64 = 343.0;
pub const DEFAULT_T60: f64 = 0.6;
/// Modes resonating at or above this frequency are dropped.
pub const DEFAULT_MODE_CUTOFF_HZ: f64 = 400.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub l_x: f64,
    pub l_y: f64,
    pub l_z: f64,
    pub t60: f64,
    pub c: f64,
    /// Source `(x_o, y_o)` on the floor plane, in meters.
    pub source: (f64, f64),
}

impl RoomSpec {
    pub fn new(l_x: f64, l_y: f64, l_z: f64, source: (f64, f64)) -> Result<Self> {
        let room = Self {
            l_x,
            l_y,
            l_z,
            t60: DEFAULT_T60,
            c: SPEED_OF_SOUND,
            source,
        };
        room.validate()?;
        Ok(room)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.l_x, self.l_y, self.l_z, self.t60, self.c];
        if dims.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::InvalidRoom(format!(
                "dimensions, t60 and c must be positive: {self:?}"
            )));
        }
        let (x, y) = self.source;
        if !(x > 0.0 && x < self.l_x && y > 0.0 && y < self.l_y) {
            return Err(Error::InvalidRoom(format!(
                "source ({x}, {y}) outside open floor ({}, {})",
                self.l_x, self.l_y
            )));
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.l_x * self.l_y * self.l_z
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModeIndex {
    pub n_x: u32,
    pub n_y: u32,
    pub n_z: u32,
}

impl ModeIndex {
    pub const fn new(n_x: u32, n_y: u32, n_z: u32) -> Self {
        Self { n_x, n_y, n_z }
    }

    /// `sqrt(eps_nx * eps_ny * eps_nz)` with `eps_0 = 1`, `eps_n = 2` otherwise.
    pub fn normalization(&self) -> f64 {
        let eps = |n: u32| if n == 0 { 1.0_f64 } else { 2.0 };
        (eps(self.n_x) * eps(self.n_y) * eps(self.n_z)).sqrt()
    }
}

/// How the modal damping enters the denominator of the expansion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Damping {
    /// `(w/c)^2 - (w_N/c)^2 - j w / (tau c^2)`: every term in 1/m^2, lightly damped modes.
    #[default]
    Dimensional,
    /// `(w/c)^2 - (w_N/c)^2 - j w / tau`, literally as usually typeset.
    /// The imaginary term dwarfs the real part below 300 Hz, so resonances vanish.
    AsPrinted,
}

impl std::str::FromStr for Damping {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "dimensional" => Ok(Damping::Dimensional),
            "as-printed" => Ok(Damping::AsPrinted),
            other => Err(format!(
                "unknown damping '{other}' (expected dimensional|as-printed)"
            )),
        }
    }
}

/// Settings of the truncated modal expansion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalModel {
    pub f_max: f64,
    pub include_height: bool,
    pub damping: Damping,
}

impl Default for ModalModel {
    fn default() -> Self {
        Self {
            f_max: DEFAULT_MODE_CUTOFF_HZ,
            include_height: false,
            damping: Damping::Dimensional,
        }
    }
}

/// Rigid-wall resonance `f_N = c/2 * sqrt(sum (n_i / l_i)^2)` in Hz.
pub fn resonance_frequency(mode: ModeIndex, room: &RoomSpec) -> f64 {
    let a = mode.n_x as f64 / room.l_x;
    let b = mode.n_y as f64 / room.l_y;
    let d = mode.n_z as f64 / room.l_z;
    0.5 * room.c * (a * a + b * b + d * d).sqrt()
}

pub fn mode_shape(mode: ModeIndex, room: &RoomSpec, point: (f64, f64, f64)) -> f64 {
    let (x, y, z) = point;
    mode.normalization()
        * (mode.n_x as f64 * PI * x / room.l_x).cos()
        * (mode.n_y as f64 * PI * y / room.l_y).cos()
        * (mode.n_z as f64 * PI * z / room.l_z).cos()
}

/// Every mode resonating strictly below `f_max`, sorted by frequency, ties by index.
pub fn enumerate_modes(room: &RoomSpec, f_max: f64, include_height: bool) -> Vec<ModeIndex> {
    let bound = |l: f64| (2.0 * f_max * l / room.c).floor() as u32;
    let nz_max = if include_height { bound(room.l_z) } else { 0 };
    let mut modes: Vec<(f64, ModeIndex)> = Vec::new();
    for n_x in 0..=bound(room.l_x) {
        for n_y in 0..=bound(room.l_y) {
            for n_z in 0..=nz_max {
                let mode = ModeIndex::new(n_x, n_y, n_z);
                let f = resonance_frequency(mode, room);
                if f < f_max {
                    modes.push((f, mode));
                }
            }
        }
    }
    modes.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    modes.into_iter().map(|(_, m)| m).collect()
}

/// Uniform modal time constant for a 60 dB energy decay over `t60`.
pub fn time_constant(room: &RoomSpec) -> f64 {
    room.t60 / (3.0 * std::f64::consts::LN_10)
}

impl ModalModel {
    #[inline]
    fn denominator(&self, room: &RoomSpec, omega: f64, omega_n: f64, tau: f64) -> Complex64 {
        let c = room.c;
        let re = (omega / c).powi(2) - (omega_n / c).powi(2);
        let im = match self.damping {
            Damping::Dimensional => omega / (tau * c * c),
            Damping::AsPrinted => omega / tau,
        };
        Complex64::new(re, -im)
    }

    /// Green's function between `receiver` and the room's source, both on the `z = 0` plane.
    pub fn greens_function(
        &self,
        room: &RoomSpec,
        receiver: (f64, f64),
        omega: f64,
        modes: &[ModeIndex],
    ) -> Result<Complex64> {
        if modes.is_empty() {
            return Err(Error::EmptyModes);
        }
        let tau = time_constant(room);
        let (sx, sy) = room.source;
        let mut acc = Complex64::new(0.0, 0.0);
        for &mode in modes {
            let num = mode_shape(mode, room, (receiver.0, receiver.1, 0.0))
                * mode_shape(mode, room, (sx, sy, 0.0));
            let omega_n = 2.0 * PI * resonance_frequency(mode, room);
            acc += num / self.denominator(room, omega, omega_n, tau);
        }
        Ok(-acc / room.volume())
    }

    /// `|G|` on the fine grid for every bin of `freqs`.
    ///
    /// The mode sum is factored through per-axis cosine tables, which turns the
    /// per-frequency work into two small complex matrix products.
    pub fn magnitude_field(
        &self,
        room: &RoomSpec,
        grid: &GridSpec,
        freqs: &FrequencyGrid,
    ) -> Result<FieldTensor> {
        room.validate()?;
        grid.validate()?;
        let modes = enumerate_modes(room, self.f_max, self.include_height);
        if modes.is_empty() {
            return Err(Error::EmptyModes);
        }
        let n = grid.fine_n;
        let nx_max = modes.iter().map(|m| m.n_x).max().unwrap_or(0) as usize;
        let ny_max = modes.iter().map(|m| m.n_y).max().unwrap_or(0) as usize;

        // cos(n pi x_i / l) with x_i = i l / (n - 1) does not depend on l.
        let cos_table = |n_max: usize| -> Vec<f64> {
            let mut t = vec![0.0; (n_max + 1) * n];
            for m in 0..=n_max {
                for i in 0..n {
                    t[m * n + i] = (m as f64 * PI * i as f64 / (n - 1) as f64).cos();
                }
            }
            t
        };
        let cx = cos_table(nx_max);
        let cy = cos_table(ny_max);

        let tau = time_constant(room);
        let (sx, sy) = room.source;
        let source_shape: Vec<f64> = modes
            .iter()
            .map(|&m| mode_shape(m, room, (sx, sy, 0.0)) * m.normalization())
            .collect();
        let omega_modes: Vec<f64> = modes
            .iter()
            .map(|&m| 2.0 * PI * resonance_frequency(m, room))
            .collect();

        let mut field = FieldTensor::zeros(n, freqs.len(), *room);
        let nxs = nx_max + 1;
        let nys = ny_max + 1;
        let mut coef = vec![Complex64::new(0.0, 0.0); nxs * nys];
        let mut partial = vec![Complex64::new(0.0, 0.0); nxs * n];
        let scale = -1.0 / room.volume();
        for k in 0..freqs.len() {
            let omega = freqs.angular(k);
            coef.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            for (idx, mode) in modes.iter().enumerate() {
                let d = self.denominator(room, omega, omega_modes[idx], tau);
                coef[mode.n_x as usize * nys + mode.n_y as usize] += source_shape[idx] / d;
            }
            // partial[nx][j] = sum_ny coef[nx][ny] * cy[ny][j]
            for a in 0..nxs {
                for j in 0..n {
                    let mut s = Complex64::new(0.0, 0.0);
                    for b in 0..nys {
                        s += coef[a * nys + b] * cy[b * n + j];
                    }
                    partial[a * n + j] = s;
                }
            }
            let plane = field.slice_mut(k);
            for j in 0..n {
                for i in 0..n {
                    let mut s = Complex64::new(0.0, 0.0);
                    for a in 0..nxs {
                        s += partial[a * n + j] * cx[a * n + i];
                    }
                    let mag = (s * scale).norm();
                    if !mag.is_finite() {
                        return Err(Error::NonFinite(format!(
                            "field at ({i}, {j}) bin {k}"
                        )));
                    }
                    plane[j * n + i] = mag as f32;
                }
            }
        }
        Ok(field)
    }
}

/// [`ModalModel::greens_function`] with the default model.
pub fn greens_function(
    room: &RoomSpec,
    receiver: (f64, f64),
    omega: f64,
    modes: &[ModeIndex],
) -> Result<Complex64> {
    ModalModel::default().greens_function(room, receiver, omega, modes)
}

/// [`ModalModel::magnitude_field`] with the default model.
pub fn magnitude_field(
    room: &RoomSpec,
    grid: &GridSpec,
    freqs: &FrequencyGrid,
) -> Result<FieldTensor> {
    ModalModel::default().magnitude_field(room, grid, freqs)
}
