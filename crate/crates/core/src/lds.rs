//! Label distribution smoothing and the reweighted squared-error objective.

use routecast_tensor::{Real, Tape, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::grid::LabelGrid;

const DENSITY_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LdsConfig {
    pub bin_width: f64,
    /// Kernel extent in bins (odd).
    pub kernel_size: usize,
    /// Kernel standard deviation in bins.
    pub sigma: f64,
}

impl Default for LdsConfig {
    fn default() -> Self {
        Self {
            bin_width: 0.001,
            kernel_size: 5,
            sigma: 2.0,
        }
    }
}

impl LdsConfig {
    pub fn n_bins(&self) -> usize {
        (1.0 / self.bin_width).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bin_width > 0.0 && self.bin_width <= 1.0) {
            return Err(Error::Config(format!(
                "bin_width must be in (0, 1], got {}",
                self.bin_width
            )));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.sigma.is_nan() || self.sigma <= 0.0 {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Bin of `v` in `[0, 1]` split into `n` bins: `k/n <= v < (k+1)/n`, with
/// `1.0` in the last bin.
pub fn bin_index(v: f64, n: usize) -> usize {
    let nf = n as f64;
    let mut k = ((v * nf).floor().max(0.0) as usize).min(n - 1);
    if k > 0 && v < k as f64 / nf {
        k -= 1;
    } else if k + 1 < n && v >= (k + 1) as f64 / nf {
        k += 1;
    }
    k
}

/// Raw bin counts of every label value.
pub fn bin_counts<'a>(labels: impl IntoIterator<Item = &'a LabelGrid>, n_bins: usize) -> Vec<u64> {
    let mut counts = vec![0u64; n_bins];
    for grid in labels {
        for &v in &grid.values {
            counts[bin_index(v as f64, n_bins)] += 1;
        }
    }
    counts
}

/// Empirical density per bin, normalized so that `Σ p·bin_width = 1`.
pub fn build_histogram<'a>(labels: impl IntoIterator<Item = &'a LabelGrid>, bin_width: f64) -> Result<Vec<f64>> {
    let n_bins = (1.0 / bin_width).round() as usize;
    let counts = bin_counts(labels, n_bins);
    density_from_counts(&counts, bin_width)
}

fn density_from_counts(counts: &[u64], bin_width: f64) -> Result<Vec<f64>> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Data("no label values to build a histogram from".into()));
    }
    let scale = 1.0 / (total as f64 * bin_width);
    Ok(counts.iter().map(|&c| c as f64 * scale).collect())
}

/// Normalized, truncated Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Mirror an out-of-range index about the half-sample boundary.
fn reflect(mut j: isize, n: isize) -> usize {
    loop {
        if j < 0 {
            j = -j - 1;
        } else if j >= n {
            j = 2 * n - j - 1;
        } else {
            return j as usize;
        }
    }
}

/// Convolve a density with a Gaussian kernel. Each bin spreads its mass over
/// its neighbours; mass leaving the range is mirrored back, so the total is
/// conserved and a flat density stays flat.
pub fn smooth_density(p: &[f64], kernel_size: usize, sigma: f64) -> Vec<f64> {
    let taps = gaussian_kernel(kernel_size, sigma);
    let (n, r) = (p.len() as isize, (kernel_size / 2) as isize);
    let mut out = vec![0.0; p.len()];
    for (i, &mass) in p.iter().enumerate() {
        if mass == 0.0 {
            continue;
        }
        for (t, &k) in taps.iter().enumerate() {
            out[reflect(i as isize + t as isize - r, n)] += k * mass;
        }
    }
    out
}

/// Per-bin loss weights derived from a training label distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdsTable {
    pub config: LdsConfig,
    pub density: Vec<f64>,
    pub smoothed: Vec<f64>,
    /// `1/√p̃` before mean normalization; zero for unobserved bins.
    pub raw_weights: Vec<f64>,
    pub weights: Vec<f64>,
}

impl LdsTable {
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a LabelGrid>, config: &LdsConfig) -> Result<Self> {
        config.validate()?;
        let counts = bin_counts(labels, config.n_bins());
        Self::from_counts(&counts, config)
    }

    pub fn from_counts(counts: &[u64], config: &LdsConfig) -> Result<Self> {
        config.validate()?;
        let density = density_from_counts(counts, config.bin_width)?;
        let smoothed = smooth_density(&density, config.kernel_size, config.sigma);
        let observed: Vec<usize> = (0..counts.len()).filter(|&i| counts[i] > 0).collect();
        let mut raw_weights = vec![0.0; counts.len()];
        for &i in &observed {
            raw_weights[i] = 1.0 / smoothed[i].max(DENSITY_FLOOR).sqrt();
        }
        let mean = observed.iter().map(|&i| raw_weights[i]).sum::<f64>() / observed.len() as f64;
        let mut weights = vec![0.0; counts.len()];
        // unobserved bins copy the nearest observed bin, lower index on ties
        let mut next = 0;
        for (i, w) in weights.iter_mut().enumerate() {
            while next + 1 < observed.len() && observed[next + 1] <= i {
                next += 1;
            }
            let mut src = observed[next];
            if src < i {
                if let Some(&up) = observed.get(next + 1) {
                    if up - i < i - src {
                        src = up;
                    }
                }
            }
            *w = raw_weights[src] / mean;
        }
        Ok(Self {
            config: config.clone(),
            density,
            smoothed,
            raw_weights,
            weights,
        })
    }

    pub fn weight_of(&self, v: f64) -> f64 {
        self.weights[bin_index(v, self.weights.len())]
    }

    /// Per-cell weights for one label grid.
    pub fn weights_for<T: Real>(&self, label: &LabelGrid) -> Vec<T> {
        label.values.iter().map(|&v| T::of(self.weight_of(v as f64))).collect()
    }
}

fn label_tensor<T: Real>(tape: &Tape<T>, pred: Var, label: &LabelGrid) -> Result<Tensor<T>> {
    let shape = tape.value(pred).shape();
    if shape != [label.height, label.width] {
        return Err(Error::Tensor(TensorError::Contract(format!(
            "prediction {shape:?} does not match label {}x{}",
            label.height, label.width
        ))));
    }
    let data = label.values.iter().map(|&v| T::of(v as f64)).collect();
    Ok(Tensor::new(&[label.height, label.width], data)?)
}

/// Mean of squared errors, optionally reweighted per label bin.
pub fn weighted_mse<T: Real>(
    tape: &mut Tape<T>,
    pred: Var,
    label: &LabelGrid,
    table: Option<&LdsTable>,
) -> Result<Var> {
    let y = label_tensor(tape, pred, label)?;
    let shape = y.shape().to_vec();
    let y = tape.constant(y);
    let diff = tape.sub(pred, y)?;
    let sq = tape.mul(diff, diff)?;
    let terms = match table {
        Some(t) => {
            let w = tape.constant(Tensor::new(&shape, t.weights_for(label))?);
            tape.mul(sq, w)?
        }
        None => sq,
    };
    Ok(tape.mean(terms)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bin_boundaries() {
        assert_eq!(bin_index(0.0, 1000), 0);
        assert_eq!(bin_index(0.5, 1000), 500);
        assert_eq!(bin_index(1.0, 1000), 999);
        assert_eq!(bin_index(0.001, 1000), 1);
        assert_eq!(bin_index(0.0009999, 1000), 0);
        // 0.3 * 1000 rounds below 300 in binary but 0.3 >= 300/1000
        for k in 0..1000 {
            let v = k as f64 / 1000.0;
            assert_eq!(bin_index(v, 1000), k, "{v}");
        }
    }

    #[test]
    fn constant_labels_fill_one_bin() {
        let g = LabelGrid::new(2, 2, vec![0.5; 4]).unwrap();
        let p = build_histogram([&g], 0.001).unwrap();
        let nz: Vec<usize> = (0..p.len()).filter(|&i| p[i] > 0.0).collect();
        assert_eq!(nz, vec![500]);
        assert!((p.iter().sum::<f64>() * 0.001 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_stream_is_error() {
        assert!(build_histogram(std::iter::empty(), 0.001).is_err());
    }

    #[test]
    fn delta_spreads_to_kernel() {
        let mut p = vec![0.0; 20];
        p[10] = 1.0;
        let s = smooth_density(&p, 5, 2.0);
        let k = gaussian_kernel(5, 2.0);
        assert_eq!(&s[8..13], k.as_slice());
        assert_eq!(s.iter().filter(|&&v| v != 0.0).count(), 5);
    }

    #[test]
    fn flat_density_unchanged() {
        let p = vec![1.0; 50];
        let s = smooth_density(&p, 5, 2.0);
        assert!(s.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn unobserved_bins_copy_nearest() {
        let mut counts = vec![0u64; 10];
        counts[2] = 9;
        counts[7] = 1;
        let cfg = LdsConfig {
            bin_width: 0.1,
            kernel_size: 1,
            sigma: 1.0,
        };
        let t = LdsTable::from_counts(&counts, &cfg).unwrap();
        assert_eq!(t.weights[0], t.weights[2]);
        assert_eq!(t.weights[4], t.weights[2]);
        assert_eq!(t.weights[5], t.weights[7]);
        assert_eq!(t.weights[9], t.weights[7]);
        assert!((t.raw_weights[7] / t.raw_weights[2] - 3.0).abs() < 1e-12);
        assert!(((t.weights[2] + t.weights[7]) / 2.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_cell_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let pred = tape.leaf(Tensor::new(&[1, 1], vec![0.5]).unwrap(), true);
        let label = LabelGrid::new(1, 1, vec![0.0]).unwrap();
        let l = weighted_mse(&mut tape, pred, &label, None).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.25);
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let mut tape = Tape::<f64>::new();
        let pred = tape.leaf(Tensor::zeros(&[2, 2]), true);
        let label = LabelGrid::zeros(3, 2);
        assert!(matches!(
            weighted_mse(&mut tape, pred, &label, None),
            Err(Error::Tensor(TensorError::Contract(_)))
        ));
    }
}
