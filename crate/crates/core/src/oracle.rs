//! Brute-force reference implementations.
//!
//! Everything here is O(n^2) and exact in `f64`. The mean-field oracle reuses
//! the staging in [`crate::crf`] but swaps the lattice for explicit kernel
//! matrices, so comparisons isolate the filtering approximation.

use crate::crf::{self, CrfKernels, CrfParams, FeatureSpaces, MeanFieldTape, MessageKernel};
use crate::error::{Error, Result};
use crate::lattice::FeatureMatrix;
use crate::volume::Volume;

/// Largest point count the oracle accepts.
pub const MAX_ORACLE_POINTS: usize = 4096;

/// Explicit Gaussian kernel `K_ij = exp(-|f_i - f_j|^2 / 2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseKernel {
    n: usize,
    values: Vec<f64>,
}

impl DenseKernel {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    fn off_diagonal_sums(&self) -> Result<Vec<f64>> {
        (0..self.n)
            .map(|i| {
                let row = &self.values[i * self.n..(i + 1) * self.n];
                let sum: f64 = row
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, k)| k)
                    .sum();
                if sum < 1e-300 {
                    Err(Error::DegenerateKernel(format!(
                        "point {i} has no neighbors (row sum {sum:e})"
                    )))
                } else {
                    Ok(sum)
                }
            })
            .collect()
    }
}

pub fn brute_kernel(f: &FeatureMatrix) -> Result<DenseKernel> {
    let n = f.len();
    if n > MAX_ORACLE_POINTS {
        return Err(Error::Size(format!(
            "{n} points exceeds the oracle limit of {MAX_ORACLE_POINTS}"
        )));
    }
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in i + 1..n {
            let d2: f64 = f
                .point(i)
                .iter()
                .zip(f.point(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let k = (-0.5 * d2).exp();
            values[i * n + j] = k;
            values[j * n + i] = k;
        }
    }
    Ok(DenseKernel { n, values })
}

/// `M_i = sum_{j != i} K_ij q_j / sum_{j != i} K_ij`.
pub fn brute_message(kernel: &DenseKernel, q: &[f64], channels: usize) -> Result<Vec<f64>> {
    let n = kernel.n;
    if channels == 0 || q.len() != n * channels {
        return Err(Error::Shape(format!(
            "field has {} values, kernel expects {n} x {channels}",
            q.len()
        )));
    }
    let sums = kernel.off_diagonal_sums()?;
    let mut out = vec![0.0; q.len()];
    for i in 0..n {
        let dst = &mut out[i * channels..(i + 1) * channels];
        for j in (0..n).filter(|&j| j != i) {
            let k = kernel.get(i, j);
            for (x, v) in dst.iter_mut().zip(&q[j * channels..(j + 1) * channels]) {
                *x += k * v;
            }
        }
        dst.iter_mut().for_each(|x| *x /= sums[i]);
    }
    Ok(out)
}

impl MessageKernel for DenseKernel {
    fn n_points(&self) -> usize {
        self.n
    }

    fn message(&self, q: &[f64], channels: usize) -> Result<Vec<f64>> {
        brute_message(self, q, channels)
    }

    fn message_adjoint(&self, grad: &[f64], channels: usize) -> Result<Vec<f64>> {
        let n = self.n;
        if grad.len() != n * channels {
            return Err(Error::Shape("adjoint input size mismatch".into()));
        }
        let sums = self.off_diagonal_sums()?;
        let mut out = vec![0.0; grad.len()];
        for i in 0..n {
            for j in (0..n).filter(|&j| j != i) {
                let a = self.get(i, j) / sums[i];
                for ch in 0..channels {
                    out[j * channels + ch] += a * grad[i * channels + ch];
                }
            }
        }
        Ok(out)
    }
}

pub fn dense_kernels(feats: &FeatureSpaces) -> Result<CrfKernels<DenseKernel>> {
    Ok(CrfKernels {
        appearance: feats.appearance.as_ref().map(brute_kernel).transpose()?,
        smoothness: brute_kernel(&feats.smoothness)?,
    })
}

/// Exact mean-field inference with the same staging as the lattice engine.
pub fn brute_meanfield(unary: &Volume, feats: &FeatureSpaces, params: &CrfParams) -> Result<Volume> {
    Ok(brute_meanfield_with_tape(unary, feats, params)?.0)
}

pub fn brute_meanfield_with_tape(
    unary: &Volume,
    feats: &FeatureSpaces,
    params: &CrfParams,
) -> Result<(Volume, MeanFieldTape<DenseKernel>)> {
    crf::meanfield_with_kernels(unary, dense_kernels(feats)?, params)
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe)?;
        probe[i] = x[i] - h;
        let minus = f(&probe)?;
        probe[i] = x[i];
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}
