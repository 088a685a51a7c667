//! Restoring network output to physical scale, and the NMSE / MSSIM metrics.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{FieldTensor, UPSAMPLE};
use crate::preprocess::Observations;

/// Per-bin affine map `s = a * s_p + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionCoeffs {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// Least-squares fit of the observed magnitudes against the scaled prediction
/// at the microphone positions, one `(a, b)` per bin.
///
/// `pred_scaled` is `[k][j][i]` on an `n x n` grid. If the prediction is
/// constant over the microphones the slope is 0 and `b` is the mean observation.
pub fn fit_regression(pred_scaled: &[f64], n: usize, observed: &Observations) -> Result<RegressionCoeffs> {
    let n_freq = observed.n_freq;
    if pred_scaled.len() != n * n * n_freq {
        return Err(Error::Shape(format!(
            "prediction has {} values, expected {}",
            pred_scaled.len(),
            n * n * n_freq
        )));
    }
    let mics = observed.arrangement.points();
    let count = mics.len() as f64;
    let mut coeffs = RegressionCoeffs {
        a: Vec::with_capacity(n_freq),
        b: Vec::with_capacity(n_freq),
    };
    for k in 0..n_freq {
        let xs: Vec<f64> = mics
            .iter()
            .map(|&(i, j)| pred_scaled[(k * n + j * UPSAMPLE) * n + i * UPSAMPLE])
            .collect();
        let ys: Vec<f64> = observed.bin(k).collect();
        let mx = xs.iter().sum::<f64>() / count;
        let my = ys.iter().sum::<f64>() / count;
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let scale = xs.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
        let (a, b) = if sxx <= scale * 1e-14 {
            (0.0, my)
        } else {
            let a = sxy / sxx;
            (a, my - a * mx)
        };
        coeffs.a.push(a);
        coeffs.b.push(b);
    }
    Ok(coeffs)
}

/// Applies [`fit_regression`] to the whole grid; negative magnitudes clamp to 0.
pub fn rescale(
    pred_scaled: &[f64],
    observed: &Observations,
    template: &FieldTensor,
) -> Result<(FieldTensor, RegressionCoeffs)> {
    let n = template.n();
    let coeffs = fit_regression(pred_scaled, n, observed)?;
    let mut out = FieldTensor::zeros(n, observed.n_freq, template.room);
    let plane = n * n;
    for k in 0..observed.n_freq {
        let (a, b) = (coeffs.a[k], coeffs.b[k]);
        let src = &pred_scaled[k * plane..(k + 1) * plane];
        for (dst, p) in out.slice_mut(k).iter_mut().zip(src) {
            let v = a * p + b;
            if !v.is_finite() {
                return Err(Error::NonFinite("rescaled prediction".into()));
            }
            *dst = v.max(0.0) as f32;
        }
    }
    Ok((out, coeffs))
}

/// dB value reported for an exactly zero error.
pub const DB_FLOOR: f64 = -300.0;

pub fn to_db(linear: f64) -> f64 {
    if linear <= 0.0 {
        DB_FLOOR
    } else {
        (10.0 * linear.log10()).max(DB_FLOOR)
    }
}

/// Per-bin NMSE; `None` where the true slice is identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NmseCurve {
    pub linear: Vec<Option<f64>>,
    pub db: Vec<Option<f64>>,
}

pub fn nmse(truth: &FieldTensor, pred: &FieldTensor) -> Result<NmseCurve> {
    if truth.n() != pred.n() || truth.n_freq() != pred.n_freq() {
        return Err(Error::Shape("truth and prediction differ in shape".into()));
    }
    let mut linear = Vec::with_capacity(truth.n_freq());
    for k in 0..truth.n_freq() {
        let (mut err, mut energy) = (0.0, 0.0);
        for (s, p) in truth.slice(k).iter().zip(pred.slice(k)) {
            let (s, p) = (*s as f64, *p as f64);
            err += (s - p) * (s - p);
            energy += s * s;
        }
        linear.push((energy > 0.0).then(|| err / energy));
    }
    let db = linear.iter().map(|v| v.map(to_db)).collect();
    Ok(NmseCurve { linear, db })
}

pub const SSIM_H1: f64 = 0.01;
pub const SSIM_H2: f64 = 0.03;
pub const SSIM_WINDOW: usize = 7;

/// SSIM of two equally sized sets of entries with dynamic range `range`.
///
/// Means are plain averages; variances and covariance are sample estimates
/// (divisor `len - 1`, or `len` for a single entry).
pub fn ssim(a: &[f64], b: &[f64], range: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "ssim inputs differ in size");
    let len = a.len() as f64;
    let mu_a = a.iter().sum::<f64>() / len;
    let mu_b = b.iter().sum::<f64>() / len;
    let dof = if a.len() > 1 { len - 1.0 } else { 1.0 };
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - mu_a, y - mu_b);
        va += dx * dx;
        vb += dy * dy;
        cov += dx * dy;
    }
    ssim_from_stats(mu_a, mu_b, va / dof, vb / dof, cov / dof, range)
}

fn ssim_from_stats(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64, range: f64) -> f64 {
    let c1 = (SSIM_H1 * range).powi(2);
    let c2 = (SSIM_H2 * range).powi(2);
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
        / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mssim {
    pub value: f64,
    /// The true slice was constant, so the range fell back to 1.
    pub degenerate_range: bool,
    /// Number of windows averaged.
    pub windows: usize,
}

/// Mean SSIM over every fully contained `window x window` patch (stride 1) of two
/// row-major `n x n` slices. The dynamic range is that of `truth`.
pub fn mssim_window(truth: &[f32], pred: &[f32], n: usize, window: usize) -> Mssim {
    assert_eq!(truth.len(), n * n);
    assert_eq!(pred.len(), n * n);
    assert!(window <= n, "window larger than slice");
    let (lo, hi) = truth
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v as f64), hi.max(v as f64))
        });
    let degenerate_range = !(hi > lo);
    let range = if degenerate_range { 1.0 } else { hi - lo };
    let positions = n - window + 1;
    let mut a = vec![0.0; window * window];
    let mut b = vec![0.0; window * window];
    let mut total = 0.0;
    for y0 in 0..positions {
        for x0 in 0..positions {
            for dy in 0..window {
                let row = (y0 + dy) * n + x0;
                for dx in 0..window {
                    a[dy * window + dx] = truth[row + dx] as f64;
                    b[dy * window + dx] = pred[row + dx] as f64;
                }
            }
            total += ssim(&a, &b, range);
        }
    }
    Mssim {
        value: total / (positions * positions) as f64,
        degenerate_range,
        windows: positions * positions,
    }
}

/// [`mssim_window`] with the 7x7 window.
pub fn mssim(truth: &[f32], pred: &[f32], n: usize) -> Mssim {
    mssim_window(truth, pred, n, SSIM_WINDOW)
}

/// NMSE and MSSIM for every frequency bin of one reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldMetrics {
    pub nmse: NmseCurve,
    pub mssim: Vec<f64>,
}

pub fn field_metrics(truth: &FieldTensor, pred: &FieldTensor) -> Result<FieldMetrics> {
    let nmse = nmse(truth, pred)?;
    let mssim = (0..truth.n_freq())
        .map(|k| mssim(truth.slice(k), pred.slice(k), truth.n()).value)
        .collect();
    Ok(FieldMetrics { nmse, mssim })
}

/// Writes `frequency_hz,nmse_db,mssim`, one row per bin. Missing NMSE is an empty cell.
pub fn write_metric_csv(path: &Path, frequencies: &[f64], metrics: &FieldMetrics) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["frequency_hz", "nmse_db", "mssim"])?;
    for (k, f) in frequencies.iter().enumerate() {
        w.write_record([
            f.to_string(),
            metrics.nmse.db[k].map(|v| v.to_string()).unwrap_or_default(),
            metrics.mssim[k].to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
