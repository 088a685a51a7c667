//! Microphone observations to fixed-size network input:
//! completion, per-bin min/max scaling, upsampling onto the fine grid, mask.

use rand::seq::index;

use crate::error::{Error, Result};
use crate::grid::{FieldTensor, COARSE_N, FINE_N, UPSAMPLE};
use crate::rng::Rng;

/// Occupied coarse-grid points `(i, j)`, kept sorted.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MicArrangement {
    points: Vec<(usize, usize)>,
}

impl MicArrangement {
    pub fn new(mut points: Vec<(usize, usize)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("empty microphone arrangement".into()));
        }
        if let Some(p) = points.iter().find(|p| p.0 >= COARSE_N || p.1 >= COARSE_N) {
            return Err(Error::InvalidArgument(format!(
                "coarse point {p:?} outside the {COARSE_N}x{COARSE_N} grid"
            )));
        }
        points.sort_unstable();
        let before = points.len();
        points.dedup();
        if points.len() != before {
            return Err(Error::InvalidArgument("duplicate microphone position".into()));
        }
        Ok(Self { points })
    }

    /// All 64 coarse points.
    pub fn full() -> Self {
        let points = (0..COARSE_N)
            .flat_map(|i| (0..COARSE_N).map(move |j| (i, j)))
            .collect();
        Self { points }
    }

    pub fn points(&self) -> &[(usize, usize)] {
        &self.points
    }

    pub fn n_mic(&self) -> usize {
        self.points.len()
    }

    pub fn contains(&self, p: (usize, usize)) -> bool {
        self.points.binary_search(&p).is_ok()
    }
}

/// Uniform subset of the coarse grid, drawn without replacement.
pub fn sample_arrangement(rng: &mut Rng, n_mic: usize) -> Result<MicArrangement> {
    let total = COARSE_N * COARSE_N;
    if n_mic == 0 || n_mic > total {
        return Err(Error::InvalidArgument(format!(
            "n_mic must be in 1..={total}, got {n_mic}"
        )));
    }
    let points = index::sample(rng, total, n_mic)
        .into_iter()
        .map(|p| (p % COARSE_N, p / COARSE_N))
        .collect();
    MicArrangement::new(points)
}

/// Per-bin magnitudes measured at each microphone, in arrangement order.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    pub arrangement: MicArrangement,
    pub n_freq: usize,
    /// `values[m * n_freq + k]` for microphone `m`.
    pub values: Vec<f64>,
}

impl Observations {
    pub fn new(arrangement: MicArrangement, n_freq: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != arrangement.n_mic() * n_freq {
            return Err(Error::Shape(format!(
                "{} microphones x {n_freq} bins needs {} values, got {}",
                arrangement.n_mic(),
                arrangement.n_mic() * n_freq,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observations".into()));
        }
        Ok(Self {
            arrangement,
            n_freq,
            values,
        })
    }

    /// Samples `field` at the fine-grid positions of the arrangement.
    pub fn from_field(field: &FieldTensor, arrangement: &MicArrangement) -> Self {
        let n_freq = field.n_freq();
        let mut values = Vec::with_capacity(arrangement.n_mic() * n_freq);
        for &(i, j) in arrangement.points() {
            for k in 0..n_freq {
                values.push(field.get(j * UPSAMPLE, i * UPSAMPLE, k) as f64);
            }
        }
        Self {
            arrangement: arrangement.clone(),
            n_freq,
            values,
        }
    }

    pub fn at(&self, mic: usize, k: usize) -> f64 {
        self.values[mic * self.n_freq + k]
    }

    pub fn bin(&self, k: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.arrangement.n_mic()).map(move |m| self.at(m, k))
    }
}

/// Values on the coarse grid, `data[(k * 8 + j) * 8 + i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseField {
    pub n_freq: usize,
    pub data: Vec<f64>,
}

impl CoarseField {
    pub fn get(&self, j: usize, i: usize, k: usize) -> f64 {
        self.data[(k * COARSE_N + j) * COARSE_N + i]
    }

    fn set(&mut self, j: usize, i: usize, k: usize, v: f64) {
        self.data[(k * COARSE_N + j) * COARSE_N + i] = v;
    }
}

/// Fills unobserved coarse cells with the per-bin maximum of the observations.
pub fn complete(observed: &Observations) -> Result<CoarseField> {
    let n_freq = observed.n_freq;
    let mut out = CoarseField {
        n_freq,
        data: vec![0.0; COARSE_N * COARSE_N * n_freq],
    };
    for k in 0..n_freq {
        let fill = observed
            .bin(k)
            .fold(f64::NEG_INFINITY, f64::max);
        if !fill.is_finite() {
            return Err(Error::InvalidArgument("no observations to complete from".into()));
        }
        out.data[k * COARSE_N * COARSE_N..(k + 1) * COARSE_N * COARSE_N].fill(fill);
        for (m, &(i, j)) in observed.arrangement.points().iter().enumerate() {
            out.set(j, i, k, observed.at(m, k));
        }
    }
    Ok(out)
}

/// Per-bin `(min, max)` of the observed values.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleParams {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Bins where every observation was equal; these scale to 0.5.
    pub degenerate: Vec<bool>,
}

pub const DEGENERATE_SCALED_VALUE: f64 = 0.5;

/// Min-max scaling per bin with statistics taken over the microphone positions.
pub fn scale(completed: &CoarseField, arrangement: &MicArrangement) -> (CoarseField, ScaleParams) {
    let n_freq = completed.n_freq;
    let mut params = ScaleParams {
        min: Vec::with_capacity(n_freq),
        max: Vec::with_capacity(n_freq),
        degenerate: Vec::with_capacity(n_freq),
    };
    let mut out = completed.clone();
    for k in 0..n_freq {
        let (lo, hi) = arrangement
            .points()
            .iter()
            .map(|&(i, j)| completed.get(j, i, k))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            });
        let degenerate = !(hi > lo);
        for j in 0..COARSE_N {
            for i in 0..COARSE_N {
                let v = if degenerate {
                    DEGENERATE_SCALED_VALUE
                } else {
                    (completed.get(j, i, k) - lo) / (hi - lo)
                };
                out.set(j, i, k, v);
            }
        }
        params.min.push(lo);
        params.max.push(hi);
        params.degenerate.push(degenerate);
    }
    (out, params)
}

/// Binary microphone mask on the fine grid, shared by every frequency bin.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTensor {
    plane: Vec<bool>,
    n_freq: usize,
}

impl MaskTensor {
    pub fn from_arrangement(arrangement: &MicArrangement, n_freq: usize) -> Self {
        let mut plane = vec![false; FINE_N * FINE_N];
        for &(i, j) in arrangement.points() {
            plane[j * UPSAMPLE * FINE_N + i * UPSAMPLE] = true;
        }
        Self { plane, n_freq }
    }

    #[inline]
    pub fn get(&self, j: usize, i: usize, _k: usize) -> bool {
        self.plane[j * FINE_N + i]
    }

    /// Row-major `32 x 32` spatial plane.
    pub fn plane(&self) -> &[bool] {
        &self.plane
    }

    pub fn n_freq(&self) -> usize {
        self.n_freq
    }

    /// Ones in one frequency slice.
    pub fn count(&self) -> usize {
        self.plane.iter().filter(|&&m| m).count()
    }

    /// Dense `[k][j][i]` 0/1 tensor.
    pub fn to_tensor(&self) -> Vec<f32> {
        let plane: Vec<f32> = self.plane.iter().map(|&m| m as u8 as f32).collect();
        plane.repeat(self.n_freq)
    }
}

/// Everything the network consumes for one arrangement.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkInput {
    /// `[k][j][i]` on the fine grid.
    pub s_irr: Vec<f32>,
    pub mask: MaskTensor,
    pub scale: ScaleParams,
}

pub const UNOBSERVED_FILL: f32 = 1.0;

/// Places the scaled values of the microphones on fine indices `(4i, 4j)`;
/// every other fine cell is 1. The mask is set only at microphone positions.
pub fn upsample_and_mask(
    scaled: &CoarseField,
    scale: ScaleParams,
    arrangement: &MicArrangement,
) -> NetworkInput {
    let n_freq = scaled.n_freq;
    let mut s_irr = vec![UNOBSERVED_FILL; FINE_N * FINE_N * n_freq];
    for k in 0..n_freq {
        for &(i, j) in arrangement.points() {
            s_irr[(k * FINE_N + j * UPSAMPLE) * FINE_N + i * UPSAMPLE] = scaled.get(j, i, k) as f32;
        }
    }
    NetworkInput {
        s_irr,
        mask: MaskTensor::from_arrangement(arrangement, n_freq),
        scale,
    }
}

/// complete -> scale -> upsample_and_mask.
pub fn prepare(observed: &Observations) -> Result<NetworkInput> {
    let completed = complete(observed)?;
    let (scaled, params) = scale(&completed, &observed.arrangement);
    Ok(upsample_and_mask(&scaled, params, &observed.arrangement))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::FieldTensor;
    use crate::modal::RoomSpec;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn obs(points: Vec<(usize, usize)>, n_freq: usize, values: Vec<f64>) -> Observations {
        Observations::new(MicArrangement::new(points).unwrap(), n_freq, values).unwrap()
    }

    #[test]
    fn arrangement_validation() {
        assert!(MicArrangement::new(vec![]).is_err());
        assert!(MicArrangement::new(vec![(8, 0)]).is_err());
        assert!(MicArrangement::new(vec![(1, 1), (1, 1)]).is_err());
        assert_eq!(MicArrangement::full().n_mic(), 64);
    }

    #[test]
    fn sampled_arrangements() {
        let mut rng = stream(1, 1);
        assert_eq!(sample_arrangement(&mut rng, 64).unwrap(), MicArrangement::full());
        for _ in 0..1000 {
            let a = sample_arrangement(&mut rng, 5).unwrap();
            let mut p = a.points().to_vec();
            p.dedup();
            assert_eq!(p.len(), 5);
        }
        assert!(sample_arrangement(&mut rng, 0).is_err());
        assert!(sample_arrangement(&mut rng, 65).is_err());
    }

    #[test]
    fn single_microphone_draws_are_uniform() {
        let mut rng = stream(2, 3);
        let mut counts = [0usize; 64];
        let draws = 100_000;
        for _ in 0..draws {
            let (i, j) = sample_arrangement(&mut rng, 1).unwrap().points()[0];
            counts[j * 8 + i] += 1;
        }
        for c in counts {
            assert!((c as f64 / draws as f64 - 1.0 / 64.0).abs() < 0.005);
        }
    }

    #[test]
    fn completion_fills_with_bin_max() {
        let o = obs(vec![(0, 0), (3, 5)], 2, vec![1.0, 7.0, 3.0, 2.0]);
        let c = complete(&o).unwrap();
        assert_eq!(c.get(0, 0, 0), 1.0);
        assert_eq!(c.get(5, 3, 0), 3.0);
        assert_eq!(c.get(7, 7, 0), 3.0);
        assert_eq!(c.get(7, 7, 1), 7.0);
        assert_eq!(c.get(5, 3, 1), 2.0);
    }

    #[test]
    fn full_arrangement_completion_is_identity() {
        let full = MicArrangement::full();
        let values: Vec<f64> = (0..64).map(|v| v as f64 * 0.5).collect();
        let o = Observations::new(full.clone(), 1, values.clone()).unwrap();
        let c = complete(&o).unwrap();
        for (m, &(i, j)) in full.points().iter().enumerate() {
            assert_eq!(c.get(j, i, 0), values[m]);
        }
    }

    #[test]
    fn scaling_examples() {
        let o = obs(vec![(0, 0), (1, 0), (2, 0)], 1, vec![2.0, 4.0, 6.0]);
        let (s, p) = scale(&complete(&o).unwrap(), &o.arrangement);
        assert_eq!((s.get(0, 0, 0), s.get(0, 1, 0), s.get(0, 2, 0)), (0.0, 0.5, 1.0));
        assert_eq!(s.get(4, 4, 0), 1.0);
        assert_eq!((p.min[0], p.max[0], p.degenerate[0]), (2.0, 6.0, false));

        let flat = obs(vec![(0, 0), (5, 5)], 1, vec![3.0, 3.0]);
        let (s, p) = scale(&complete(&flat).unwrap(), &flat.arrangement);
        assert!(p.degenerate[0]);
        assert!(s.data.iter().all(|&v| v == DEGENERATE_SCALED_VALUE));
    }

    #[test]
    fn network_input_layout() {
        let o = obs(vec![(1, 2), (7, 0)], 2, vec![1.0, 5.0, 3.0, 5.0]);
        let inp = prepare(&o).unwrap();
        assert_eq!(inp.mask.count(), 2);
        assert!(inp.mask.get(8, 4, 0) && inp.mask.get(0, 28, 1));
        assert_eq!(inp.s_irr[(0 * 32 + 8) * 32 + 4], 0.0);
        assert_eq!(inp.s_irr[(0 * 32) * 32 + 28], 1.0);
        // second bin is constant across microphones
        assert_eq!(inp.s_irr[(32 + 8) * 32 + 4], 0.5);
        for (idx, v) in inp.s_irr.iter().enumerate() {
            let plane = idx % 1024;
            if !inp.mask.plane()[plane] {
                assert_eq!(*v, UNOBSERVED_FILL);
            }
        }
        let full = MaskTensor::from_arrangement(&MicArrangement::full(), 3);
        assert_eq!(full.count(), 64);
        assert!(full.get(28, 28, 2) && !full.get(1, 0, 0));
    }

    fn random_field(seed: u64) -> FieldTensor {
        let room = RoomSpec::new(5.0, 4.0, 2.5, (1.0, 1.0)).unwrap();
        let mut rng = stream(seed, 0);
        let values = (0..32 * 32 * 40).map(|_| rand::Rng::random::<f32>(&mut rng) * 3.0).collect();
        FieldTensor::new(32, 40, values, room).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn observed_entries_are_scaled_ground_truth(seed in 0u64..10_000, n_mic in 2usize..=64) {
            let field = random_field(seed);
            let arr = sample_arrangement(&mut stream(seed, 1), n_mic).unwrap();
            let o = Observations::from_field(&field, &arr);
            let inp = prepare(&o).unwrap();
            let mask = inp.mask.to_tensor();
            for k in 0..40 {
                let vals: Vec<f64> = arr.points().iter().map(|&(i, j)| field.get(4 * j, 4 * i, k) as f64).collect();
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                for (&(i, j), v) in arr.points().iter().zip(&vals) {
                    let idx = (k * 32 + 4 * j) * 32 + 4 * i;
                    let expected = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
                    prop_assert_eq!(inp.s_irr[idx], expected as f32);
                    prop_assert!((0.0..=1.0).contains(&inp.s_irr[idx]));
                    prop_assert_eq!(mask[idx], 1.0);
                }
                prop_assert_eq!(&mask[k * 1024..(k + 1) * 1024], &mask[..1024]);
                prop_assert_eq!(mask[k * 1024..(k + 1) * 1024].iter().sum::<f32>() as usize, n_mic);
            }
        }

        #[test]
        fn scaling_is_idempotent_on_unit_data(seed in 0u64..10_000) {
            let arr = sample_arrangement(&mut stream(seed, 2), 10).unwrap();
            let mut rng = stream(seed, 3);
            let mut values: Vec<f64> = (0..10).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
            values[0] = 0.0;
            values[1] = 1.0;
            let o = Observations::new(arr.clone(), 1, values.clone()).unwrap();
            let (s, _) = scale(&complete(&o).unwrap(), &arr);
            for (m, &(i, j)) in arr.points().iter().enumerate() {
                prop_assert_eq!(s.get(j, i, 0), values[m]);
            }
        }
    }
}
