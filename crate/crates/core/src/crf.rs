//! Fully connected CRF with Potts compatibility and two Gaussian kernels:
//! an appearance kernel over positions plus a reference map (image
//! intensities or class posteriors) and a smoothness kernel over positions
//! only.
//!
//! Inference is a fixed number of unrolled mean-field iterations. Each
//! iteration runs four stages: message passing, weighted sum of the
//! kernels, Potts compatibility transform, and a local softmax. The forward
//! pass records every stage on a [`MeanFieldTape`] so the backward pass can
//! return exact gradients with respect to the unaries and kernel weights.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::lattice::{self, FeatureMatrix, LatticeKernel};
use crate::volume::{softmax_in_place, DType, Volume};

/// Smallest admissible kernel bandwidth.
pub const THETA_MIN: f64 = 1e-3;
pub const DEFAULT_ITERATIONS: usize = 5;
/// Probability floor used when turning posteriors into unaries.
pub const DEFAULT_EPS: f64 = 1e-8;

const DISTRIBUTION_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrfParams {
    /// Appearance kernel weight.
    pub w_app: f64,
    /// Smoothness kernel weight.
    pub w_smooth: f64,
    /// Spatial bandwidth of the appearance kernel, in voxels.
    pub theta_alpha: f64,
    /// Reference-map bandwidth of the appearance kernel.
    pub theta_beta: f64,
    /// Spatial bandwidth of the smoothness kernel, in voxels.
    pub theta_gamma: f64,
    pub iterations: usize,
}

impl Default for CrfParams {
    fn default() -> Self {
        CrfParams {
            w_app: 1.0,
            w_smooth: 1.0,
            theta_alpha: 3.0,
            theta_beta: 0.5,
            theta_gamma: 3.0,
            iterations: DEFAULT_ITERATIONS,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        if !self.w_app.is_finite() || !self.w_smooth.is_finite() {
            return Err(Error::Parameter(format!(
                "kernel weights must be finite (w_app={}, w_smooth={})",
                self.w_app, self.w_smooth
            )));
        }
        for (name, theta) in self.thetas_named() {
            if !(theta >= THETA_MIN) || !theta.is_finite() {
                return Err(Error::Parameter(format!(
                    "{name}={theta} is below the minimum bandwidth {THETA_MIN}"
                )));
            }
        }
        Ok(())
    }

    pub fn thetas(&self) -> [f64; 3] {
        [self.theta_alpha, self.theta_beta, self.theta_gamma]
    }

    fn thetas_named(&self) -> [(&'static str, f64); 3] {
        [
            ("theta_alpha", self.theta_alpha),
            ("theta_beta", self.theta_beta),
            ("theta_gamma", self.theta_gamma),
        ]
    }

    pub fn set_theta(&mut self, which: usize, value: f64) {
        match which {
            0 => self.theta_alpha = value,
            1 => self.theta_beta = value,
            2 => self.theta_gamma = value,
            _ => panic!("theta index {which} out of range"),
        }
    }

    pub fn clamp_thetas(&mut self) {
        self.theta_alpha = self.theta_alpha.max(THETA_MIN);
        self.theta_beta = self.theta_beta.max(THETA_MIN);
        self.theta_gamma = self.theta_gamma.max(THETA_MIN);
    }

    /// The five trainable scalars in the order `w_app, w_smooth, alpha, beta, gamma`.
    pub fn trainables(&self) -> [f64; 5] {
        [
            self.w_app,
            self.w_smooth,
            self.theta_alpha,
            self.theta_beta,
            self.theta_gamma,
        ]
    }

    pub fn set_trainables(&mut self, values: [f64; 5]) {
        [
            self.w_app,
            self.w_smooth,
            self.theta_alpha,
            self.theta_beta,
            self.theta_gamma,
        ] = values;
    }
}

/// Which reference map feeds the appearance kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CrfMode {
    /// Image intensities.
    Intensity,
    /// No appearance kernel; positions only.
    Spatial,
    /// The network's class posteriors.
    Posterior,
}

impl CrfMode {
    pub const ALL: [CrfMode; 3] = [CrfMode::Intensity, CrfMode::Spatial, CrfMode::Posterior];

    pub fn name(self) -> &'static str {
        match self {
            CrfMode::Intensity => "intensity",
            CrfMode::Spatial => "spatial",
            CrfMode::Posterior => "posterior",
        }
    }

    pub fn has_appearance(self) -> bool {
        self != CrfMode::Spatial
    }
}

impl fmt::Display for CrfMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CrfMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intensity" | "intensity-crf" => Ok(CrfMode::Intensity),
            "spatial" | "spatial-crf" => Ok(CrfMode::Spatial),
            "posterior" | "posterior-crf" => Ok(CrfMode::Posterior),
            other => Err(Error::Usage(format!("unknown CRF mode '{other}'"))),
        }
    }
}

/// A normalized message-passing operator:
/// `M_i = sum_{j != i} k_ij q_j / sum_{j != i} k_ij`.
pub trait MessageKernel {
    fn n_points(&self) -> usize;

    fn message(&self, q: &[f64], channels: usize) -> Result<Vec<f64>>;

    /// Transpose of [`MessageKernel::message`] applied to `grad`.
    fn message_adjoint(&self, grad: &[f64], channels: usize) -> Result<Vec<f64>>;
}

impl MessageKernel for LatticeKernel {
    fn n_points(&self) -> usize {
        self.lattice().n_points()
    }

    fn message(&self, q: &[f64], channels: usize) -> Result<Vec<f64>> {
        lattice::normalized_message(self.lattice(), q, channels, self.ones_response())
    }

    fn message_adjoint(&self, grad: &[f64], channels: usize) -> Result<Vec<f64>> {
        lattice::normalized_message_adjoint(self.lattice(), grad, channels, self.ones_response())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSpaces {
    pub appearance: Option<FeatureMatrix>,
    pub smoothness: FeatureMatrix,
}

#[derive(Debug, Clone)]
pub struct CrfKernels<K> {
    pub appearance: Option<K>,
    pub smoothness: K,
}

impl CrfKernels<LatticeKernel> {
    pub fn from_features(feats: &FeatureSpaces) -> Result<Self> {
        Ok(CrfKernels {
            appearance: feats.appearance.as_ref().map(LatticeKernel::new).transpose()?,
            smoothness: LatticeKernel::new(&feats.smoothness)?,
        })
    }
}

/// `U_i(l) = -ln(max(p_i(l), eps))`.
pub fn unary_from_probabilities(p: &Volume, eps: f64) -> Result<Volume> {
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
    }
    if p.channels() < 2 {
        return Err(Error::Shape("unaries need at least two classes".into()));
    }
    let mut data = Vec::with_capacity(p.data().len());
    for &v in p.data() {
        if v.is_nan() {
            return Err(Error::Numeric("NaN probability".into()));
        }
        data.push(-v.max(eps).ln());
    }
    Volume::from_vec(p.dims(), p.channels(), DType::F64, data)
}

fn check_distribution(v: &Volume, what: &str) -> Result<()> {
    for (i, row) in v.data().chunks_exact(v.channels()).enumerate() {
        let sum: f64 = row.iter().sum();
        if !((sum - 1.0).abs() <= DISTRIBUTION_TOLERANCE) {
            return Err(Error::Numeric(format!(
                "{what} at voxel {i} sums to {sum}, not 1"
            )));
        }
    }
    Ok(())
}

/// Builds bandwidth-scaled feature matrices for both kernels.
///
/// Positions are voxel indices. The appearance features concatenate
/// `position / theta_alpha` with the reference map divided by `theta_beta`.
pub fn build_feature_spaces(
    mode: CrfMode,
    intensity: &Volume,
    posterior: &Volume,
    params: &CrfParams,
) -> Result<FeatureSpaces> {
    params.validate()?;
    if !intensity.same_grid(posterior) {
        return Err(Error::Shape(format!(
            "intensity grid {:?} differs from posterior grid {:?}",
            intensity.dims(),
            posterior.dims()
        )));
    }
    check_distribution(posterior, "posterior")?;

    let n = posterior.n_voxels();
    let mut smooth = Vec::with_capacity(n * 3);
    for i in 0..n {
        let p = posterior.voxel_coords(i);
        smooth.extend(p.iter().map(|&c| c as f64 / params.theta_gamma));
    }
    let smoothness = FeatureMatrix::new(3, n, smooth)?;

    let reference = match mode {
        CrfMode::Spatial => None,
        CrfMode::Intensity => Some(intensity),
        CrfMode::Posterior => Some(posterior),
    };
    let appearance = reference
        .map(|r| {
            let c = r.channels();
            let mut values = Vec::with_capacity(n * (3 + c));
            for i in 0..n {
                let p = r.voxel_coords(i);
                values.extend(p.iter().map(|&x| x as f64 / params.theta_alpha));
                values.extend(r.voxel(i).iter().map(|&x| x / params.theta_beta));
            }
            FeatureMatrix::new(3 + c, n, values)
        })
        .transpose()?;

    Ok(FeatureSpaces {
        appearance,
        smoothness,
    })
}

/// Stage outputs of one mean-field iteration.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub q_in: Vec<f64>,
    pub message_appearance: Option<Vec<f64>>,
    pub message_smoothness: Vec<f64>,
    pub weighted: Vec<f64>,
    pub pairwise: Vec<f64>,
    pub q_out: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MeanFieldTape<K = LatticeKernel> {
    dims: [usize; 3],
    channels: usize,
    params: CrfParams,
    kernels: CrfKernels<K>,
    q0: Vec<f64>,
    records: Vec<IterationRecord>,
}

impl<K> MeanFieldTape<K> {
    pub fn records(&self) -> &[IterationRecord] {
        &self.records
    }

    /// Initial field `softmax(-U)`.
    pub fn initial(&self) -> &[f64] {
        &self.q0
    }

    pub fn kernels(&self) -> &CrfKernels<K> {
        &self.kernels
    }

    pub fn params(&self) -> &CrfParams {
        &self.params
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Every softmax output on the tape, starting with the initial field.
    pub fn distributions(&self) -> impl Iterator<Item = &[f64]> {
        std::iter::once(self.q0.as_slice()).chain(self.records.iter().map(|r| r.q_out.as_slice()))
    }

    /// Worst deviation of any recorded field from a distribution, see
    /// [`distribution_error`].
    pub fn distribution_error(&self) -> f64 {
        self.distributions()
            .map(|q| distribution_error(q, self.channels))
            .fold(0.0, f64::max)
    }
}

/// `max |sum - 1|` over rows, or infinity if any entry is below `-1e-12`
/// or not finite.
pub fn distribution_error(q: &[f64], channels: usize) -> f64 {
    if q.iter().any(|&v| !(v >= -1e-12) || !v.is_finite()) {
        return f64::INFINITY;
    }
    q.chunks_exact(channels)
        .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub struct CrfGradients {
    pub unary: Volume,
    pub w_app: f64,
    pub w_smooth: f64,
}

/// Mean-field inference on lattice kernels built once from `feats`.
pub fn meanfield_forward(
    unary: &Volume,
    feats: &FeatureSpaces,
    params: &CrfParams,
) -> Result<(Volume, MeanFieldTape)> {
    let kernels = CrfKernels::from_features(feats)?;
    meanfield_with_kernels(unary, kernels, params)
}

/// Mean-field inference with arbitrary message kernels. Omitting the
/// appearance kernel drops its term from the weighted sum.
pub fn meanfield_with_kernels<K: MessageKernel>(
    unary: &Volume,
    kernels: CrfKernels<K>,
    params: &CrfParams,
) -> Result<(Volume, MeanFieldTape<K>)> {
    params.validate()?;
    let c = unary.channels();
    let n = unary.n_voxels();
    if c < 2 {
        return Err(Error::Shape("mean-field needs at least two classes".into()));
    }
    let sizes_ok = kernels.smoothness.n_points() == n
        && kernels.appearance.as_ref().is_none_or(|k| k.n_points() == n);
    if !sizes_ok {
        return Err(Error::Shape(format!(
            "kernels do not cover the {n} voxels of the unary volume"
        )));
    }
    if unary.data().iter().any(|u| !u.is_finite()) {
        return Err(Error::Numeric("unary potentials must be finite".into()));
    }

    let mut q0: Vec<f64> = unary.data().iter().map(|u| -u).collect();
    q0.chunks_exact_mut(c).for_each(softmax_in_place);

    let mut records: Vec<IterationRecord> = Vec::with_capacity(params.iterations);
    for _ in 0..params.iterations {
        let q_in = records.last().map_or(&q0, |r| &r.q_out).clone();

        let message_appearance = kernels
            .appearance
            .as_ref()
            .map(|k| k.message(&q_in, c))
            .transpose()?;
        let message_smoothness = kernels.smoothness.message(&q_in, c)?;

        let weighted: Vec<f64> = match &message_appearance {
            Some(app) => app
                .iter()
                .zip(&message_smoothness)
                .map(|(a, s)| params.w_app * a + params.w_smooth * s)
                .collect(),
            None => message_smoothness.iter().map(|s| params.w_smooth * s).collect(),
        };

        let pairwise = potts_transform(&weighted, c);

        let mut q_out: Vec<f64> = unary
            .data()
            .iter()
            .zip(&pairwise)
            .map(|(u, p)| -u - p)
            .collect();
        q_out.chunks_exact_mut(c).for_each(softmax_in_place);

        records.push(IterationRecord {
            q_in,
            message_appearance,
            message_smoothness,
            weighted,
            pairwise,
            q_out,
        });
    }

    let q_final = records.last().map_or(&q0, |r| &r.q_out).clone();
    let out = Volume::from_vec(unary.dims(), c, DType::F64, q_final)?;
    let tape = MeanFieldTape {
        dims: unary.dims(),
        channels: c,
        params: *params,
        kernels,
        q0,
        records,
    };
    Ok((out, tape))
}

/// Potts compatibility: `P_i(l) = sum_{l' != l} M_i(l')`.
pub fn potts_transform(messages: &[f64], channels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(messages.len());
    for row in messages.chunks_exact(channels) {
        let total: f64 = row.iter().sum();
        out.extend(row.iter().map(|m| total - m));
    }
    out
}

/// Vector-Jacobian product of a row-wise softmax given its output.
fn softmax_backward(q: &[f64], grad: &[f64], channels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(q.len());
    for (qr, gr) in q.chunks_exact(channels).zip(grad.chunks_exact(channels)) {
        let dot: f64 = qr.iter().zip(gr).map(|(a, b)| a * b).sum();
        out.extend(qr.iter().zip(gr).map(|(qv, gv)| qv * (gv - dot)));
    }
    out
}

/// Reverse-mode pass through every recorded iteration.
pub fn meanfield_backward<K: MessageKernel>(
    tape: &MeanFieldTape<K>,
    grad_q: &Volume,
) -> Result<CrfGradients> {
    let c = tape.channels;
    if grad_q.dims() != tape.dims || grad_q.channels() != c {
        return Err(Error::Shape(format!(
            "gradient volume {:?}x{} does not match tape {:?}x{c}",
            grad_q.dims(),
            grad_q.channels(),
            tape.dims
        )));
    }
    let params = &tape.params;
    let mut grad = grad_q.data().to_vec();
    let mut grad_unary = vec![0.0; grad.len()];
    let mut grad_w_app = 0.0;
    let mut grad_w_smooth = 0.0;

    for record in tape.records.iter().rev() {
        let dz = softmax_backward(&record.q_out, &grad, c);
        for (gu, d) in grad_unary.iter_mut().zip(&dz) {
            *gu -= d;
        }
        // z = -U - P, and the Potts matrix (1 - I) is symmetric.
        let d_pairwise: Vec<f64> = dz.iter().map(|d| -d).collect();
        let d_weighted = potts_transform(&d_pairwise, c);

        let mut d_q = vec![0.0; grad.len()];
        if let (Some(kernel), Some(msg)) =
            (&tape.kernels.appearance, &record.message_appearance)
        {
            grad_w_app += dot(&d_weighted, msg);
            if params.w_app != 0.0 {
                let scaled: Vec<f64> = d_weighted.iter().map(|g| params.w_app * g).collect();
                add_assign(&mut d_q, &kernel.message_adjoint(&scaled, c)?);
            }
        }
        grad_w_smooth += dot(&d_weighted, &record.message_smoothness);
        if params.w_smooth != 0.0 {
            let scaled: Vec<f64> = d_weighted.iter().map(|g| params.w_smooth * g).collect();
            add_assign(&mut d_q, &tape.kernels.smoothness.message_adjoint(&scaled, c)?);
        }
        grad = d_q;
    }

    let dz0 = softmax_backward(&tape.q0, &grad, c);
    for (gu, d) in grad_unary.iter_mut().zip(&dz0) {
        *gu -= d;
    }

    Ok(CrfGradients {
        unary: Volume::from_vec(tape.dims, c, DType::F64, grad_unary)?,
        w_app: grad_w_app,
        w_smooth: grad_w_smooth,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_assign(acc: &mut [f64], other: &[f64]) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a += b;
    }
}

/// Central-difference gradients of `loss` with respect to the three
/// bandwidths. Perturbed values are clamped at [`THETA_MIN`] and the quotient
/// uses the actual span. In spatial mode the appearance bandwidths have no
/// effect and their gradients are zero without evaluating `loss`.
pub fn theta_gradients_fd<F>(
    mode: CrfMode,
    params: &CrfParams,
    h: f64,
    mut loss: F,
) -> Result<[f64; 3]>
where
    F: FnMut(&CrfParams) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("step must be positive, got {h}")));
    }
    let mut grads = [0.0; 3];
    for (which, g) in grads.iter_mut().enumerate() {
        if mode == CrfMode::Spatial && which < 2 {
            continue;
        }
        let theta = params.thetas()[which];
        let hi = theta + h;
        let lo = (theta - h).max(THETA_MIN);
        let mut plus = *params;
        plus.set_theta(which, hi);
        let mut minus = *params;
        minus.set_theta(which, lo);
        *g = (loss(&plus)? - loss(&minus)?) / (hi - lo);
    }
    Ok(grads)
}

/// Post-processing entry point: unaries from `probs`, features for `mode`,
/// mean-field inference; returns the refined posteriors.
pub fn crf_apply(mode: CrfMode, intensity: &Volume, probs: &Volume, params: &CrfParams) -> Result<Volume> {
    let unary = unary_from_probabilities(probs, DEFAULT_EPS)?;
    let feats = build_feature_spaces(mode, intensity, probs, params)?;
    Ok(meanfield_forward(&unary, &feats, params)?.0)
}
