//! Two-layer 3D convolutional unary network and the end-to-end trainer.
//!
//! Layer one is a zero-padded 3x3x3 convolution followed by ReLU, layer two
//! a 1x1x1 convolution producing per-class logits. Forward and backward are
//! written out by hand. Training either fits the network alone or chains it
//! through the CRF, in which case the CRF weights and bandwidths are
//! optimized jointly with the network weights.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::crf::{
    self, build_feature_spaces, meanfield_backward, meanfield_forward, unary_from_probabilities,
    CrfKernels, CrfMode, CrfParams,
};
use crate::error::{Error, Result};
use crate::lattice::LatticeKernel;
use crate::volume::npy::{self, DType, NpyArray};
use crate::volume::{softmax_channels, Axis, Volume};

pub const DEFAULT_HIDDEN: usize = 16;
const TAPS: usize = 27;
const CHECKPOINT_FORMAT: &str = "pcrf-checkpoint-1";
const MANIFEST: &str = "manifest.txt";

/// Network weights. `w1` is laid out `[hidden][in][tap]` with
/// `tap = 9 (dx+1) + 3 (dy+1) + (dz+1)`; `w2` is `[class][hidden]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    in_channels: usize,
    hidden: usize,
    classes: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl ToyNet {
    /// All-zero network.
    pub fn zeros(in_channels: usize, hidden: usize, classes: usize) -> Result<Self> {
        if in_channels == 0 || hidden == 0 || classes < 2 {
            return Err(Error::Shape(format!(
                "invalid network shape in={in_channels} hidden={hidden} classes={classes}"
            )));
        }
        Ok(ToyNet {
            in_channels,
            hidden,
            classes,
            w1: vec![0.0; hidden * in_channels * TAPS],
            b1: vec![0.0; hidden],
            w2: vec![0.0; classes * hidden],
            b2: vec![0.0; classes],
        })
    }

    /// Fan-in scaled uniform weights in `±sqrt(6 / fan_in)`, zero biases.
    pub fn init(in_channels: usize, hidden: usize, classes: usize, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(in_channels, hidden, classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound1 = (6.0 / (in_channels * TAPS) as f64).sqrt();
        net.w1.iter_mut().for_each(|w| *w = rng.random_range(-bound1..bound1));
        let bound2 = (6.0 / hidden as f64).sqrt();
        net.w2.iter_mut().for_each(|w| *w = rng.random_range(-bound2..bound2));
        Ok(net)
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn w1_mut(&mut self) -> &mut [f64] {
        &mut self.w1
    }

    pub fn b1_mut(&mut self) -> &mut [f64] {
        &mut self.b1
    }

    pub fn w2_mut(&mut self) -> &mut [f64] {
        &mut self.w2
    }

    pub fn b2_mut(&mut self) -> &mut [f64] {
        &mut self.b2
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Parameters in the order `w1, b1, w2, b2`.
    pub fn flat_params(&self) -> Vec<f64> {
        [&self.w1[..], &self.b1, &self.w2, &self.b2].concat()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.n_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                values.len()
            )));
        }
        let mut rest = values;
        for dst in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }
}

/// Activations retained by [`net_forward`].
#[derive(Debug, Clone)]
pub struct NetCache {
    dims: [usize; 3],
    input: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub input: Vec<f64>,
}

impl NetGrads {
    /// Weight gradients in [`ToyNet::flat_params`] order.
    pub fn flat(&self) -> Vec<f64> {
        [&self.w1[..], &self.b1, &self.w2, &self.b2].concat()
    }
}

/// Neighbor voxel index for tap `t`, or `None` outside the volume.
#[inline]
fn tap_neighbor(dims: [usize; 3], x: usize, y: usize, z: usize, t: usize) -> Option<usize> {
    let nx = (x + t / 9).checked_sub(1)?;
    let ny = (y + (t / 3) % 3).checked_sub(1)?;
    let nz = (z + t % 3).checked_sub(1)?;
    (nx < dims[0] && ny < dims[1] && nz < dims[2]).then(|| (nx * dims[1] + ny) * dims[2] + nz)
}

pub fn net_forward(x: &Volume, net: &ToyNet) -> Result<(Volume, NetCache)> {
    let dims = x.dims();
    if dims.iter().any(|&d| d < 3) {
        return Err(Error::Shape(format!("network input needs every axis >= 3, got {dims:?}")));
    }
    if x.channels() != net.in_channels {
        return Err(Error::Shape(format!(
            "network expects {} input channels, got {}",
            net.in_channels,
            x.channels()
        )));
    }
    let (ci, h, c) = (net.in_channels, net.hidden, net.classes);
    let input = x.data();
    let n = x.n_voxels();

    let mut pre = vec![0.0; n * h];
    pre.par_chunks_mut(h).enumerate().for_each(|(v, out)| {
        let z = v % dims[2];
        let y = (v / dims[2]) % dims[1];
        let xi = v / (dims[1] * dims[2]);
        out.copy_from_slice(&net.b1);
        for t in 0..TAPS {
            let Some(nb) = tap_neighbor(dims, xi, y, z, t) else {
                continue;
            };
            let src = &input[nb * ci..(nb + 1) * ci];
            for (k, o) in out.iter_mut().enumerate() {
                let w = &net.w1[k * ci * TAPS..(k + 1) * ci * TAPS];
                for (j, s) in src.iter().enumerate() {
                    *o += w[j * TAPS + t] * s;
                }
            }
        }
    });
    let act: Vec<f64> = pre.iter().map(|&p| p.max(0.0)).collect();

    let mut logits = vec![0.0; n * c];
    logits
        .par_chunks_mut(c)
        .zip(act.par_chunks(h))
        .for_each(|(out, a)| {
            for (k, o) in out.iter_mut().enumerate() {
                let w = &net.w2[k * h..(k + 1) * h];
                *o = net.b2[k] + w.iter().zip(a).map(|(w, a)| w * a).sum::<f64>();
            }
        });

    let cache = NetCache {
        dims,
        input: input.to_vec(),
        pre,
        act,
    };
    Ok((Volume::from_vec(dims, c, DType::F64, logits)?, cache))
}

pub fn net_backward(net: &ToyNet, cache: &NetCache, grad_logits: &Volume) -> Result<NetGrads> {
    let (ci, h, c) = (net.in_channels, net.hidden, net.classes);
    let dims = cache.dims;
    let n: usize = dims.iter().product();
    if grad_logits.dims() != dims || grad_logits.channels() != c {
        return Err(Error::Shape(format!(
            "logit gradient {:?}x{} does not match cache {dims:?}x{c}",
            grad_logits.dims(),
            grad_logits.channels()
        )));
    }
    let g = grad_logits.data();

    let mut w2 = vec![0.0; c * h];
    let mut b2 = vec![0.0; c];
    let mut d_pre = vec![0.0; n * h];
    for v in 0..n {
        let gv = &g[v * c..(v + 1) * c];
        let a = &cache.act[v * h..(v + 1) * h];
        for (k, &gk) in gv.iter().enumerate() {
            b2[k] += gk;
            for (w, av) in w2[k * h..(k + 1) * h].iter_mut().zip(a) {
                *w += gk * av;
            }
        }
        for j in 0..h {
            if cache.pre[v * h + j] > 0.0 {
                d_pre[v * h + j] = (0..c).map(|k| net.w2[k * h + j] * gv[k]).sum();
            }
        }
    }

    let mut w1 = vec![0.0; h * ci * TAPS];
    let mut b1 = vec![0.0; h];
    let mut input = vec![0.0; n * ci];
    for v in 0..n {
        let dp = &d_pre[v * h..(v + 1) * h];
        if dp.iter().all(|&d| d == 0.0) {
            continue;
        }
        for (b, d) in b1.iter_mut().zip(dp) {
            *b += d;
        }
        let z = v % dims[2];
        let y = (v / dims[2]) % dims[1];
        let xi = v / (dims[1] * dims[2]);
        for t in 0..TAPS {
            let Some(nb) = tap_neighbor(dims, xi, y, z, t) else {
                continue;
            };
            for (k, &d) in dp.iter().enumerate() {
                for j in 0..ci {
                    let widx = (k * ci + j) * TAPS + t;
                    w1[widx] += d * cache.input[nb * ci + j];
                    input[nb * ci + j] += d * net.w1[widx];
                }
            }
        }
    }
    Ok(NetGrads { w1, b1, w2, b2, input })
}

/// Per-class loss weights proportional to inverse class frequency,
/// normalized to mean 1 over the classes that occur.
pub fn inverse_frequency_weights(labels: &[&[u8]], classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    for l in labels.iter().flat_map(|s| s.iter()) {
        if (*l as usize) < classes {
            counts[*l as usize] += 1;
        }
    }
    let present = counts.iter().filter(|&&k| k > 0).count().max(1);
    let raw: Vec<f64> = counts
        .iter()
        .map(|&k| if k == 0 { 0.0 } else { 1.0 / k as f64 })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|r| r * present as f64 / total).collect()
}

/// Mean (optionally class-weighted) negative log-likelihood of the labels
/// and its gradient with respect to the probabilities.
pub fn cross_entropy(
    probs: &Volume,
    labels: &Volume,
    class_weights: Option<&[f64]>,
    eps: f64,
) -> Result<(f64, Volume)> {
    let c = probs.channels();
    if probs.dims() != labels.dims() || labels.channels() != 1 {
        return Err(Error::Shape(format!(
            "labels {:?}x{} do not match probabilities {:?}",
            labels.dims(),
            labels.channels(),
            probs.dims()
        )));
    }
    if let Some(w) = class_weights {
        if w.len() != c {
            return Err(Error::Shape(format!("{} class weights for {c} classes", w.len())));
        }
    }
    let labels = labels.labels(c)?;
    let weight = |y: usize| class_weights.map_or(1.0, |w| w[y]);
    let total: f64 = labels.iter().map(|&y| weight(y as usize)).sum();
    if !(total > 0.0) {
        return Err(Error::Numeric("class weights sum to zero over the labels".into()));
    }

    let mut loss = 0.0;
    let mut grad = vec![0.0; probs.data().len()];
    for (i, &y) in labels.iter().enumerate() {
        let y = y as usize;
        let p = probs.data()[i * c + y];
        let w = weight(y) / total;
        loss -= w * p.max(eps).ln();
        if p > eps {
            grad[i * c + y] = -w / p;
        }
    }
    Ok((loss, Volume::from_vec(probs.dims(), c, DType::F64, grad)?))
}

/// Adam moments for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(lr: f64, n: usize) -> Self {
        Adam {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Non-finite gradients reject the step and leave both the
    /// parameters and the moments untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, got {} values and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient at parameter {i}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - Self::BETA1.powi(t);
        let c2 = 1.0 - Self::BETA2.powi(t);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            if g != 0.0 || *m != 0.0 {
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Unet,
    Crf(CrfMode),
}

impl TrainMode {
    pub fn crf_mode(self) -> Option<CrfMode> {
        match self {
            TrainMode::Unet => None,
            TrainMode::Crf(m) => Some(m),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainMode::Unet => f.write_str("unet"),
            TrainMode::Crf(m) => write!(f, "{}-crf", m.name()),
        }
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unet" => Ok(TrainMode::Unet),
            other => other
                .parse::<CrfMode>()
                .map(TrainMode::Crf)
                .map_err(|_| Error::Usage(format!("unknown training mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Adam step size of the five CRF scalars.
    pub crf_lr: f64,
    pub seed: u64,
    pub hidden: usize,
    pub classes: usize,
    pub crf: CrfParams,
    pub class_weights: bool,
    pub flip_augment: bool,
    pub eps: f64,
    pub theta_fd_step: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            lr: 0.01,
            crf_lr: 1e-3,
            seed: 0,
            hidden: DEFAULT_HIDDEN,
            classes: 3,
            crf: CrfParams::default(),
            class_weights: false,
            flip_augment: false,
            eps: crf::DEFAULT_EPS,
            theta_fd_step: 1e-2,
        }
    }
}

/// One training volume with its voxel labels.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Volume,
    pub labels: Volume,
}

impl Sample {
    fn flipped(&self, axis: Axis) -> Sample {
        Sample {
            image: self.image.flipped(axis),
            labels: self.labels.flipped(axis),
        }
    }
}

/// A trained (or freshly initialized) network plus optional CRF layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub net: ToyNet,
    pub mode: TrainMode,
    pub crf: Option<CrfParams>,
    pub seed: u64,
}

impl Model {
    pub fn init(mode: TrainMode, in_channels: usize, classes: usize, cfg: &TrainConfig) -> Result<Self> {
        let net = ToyNet::init(in_channels, cfg.hidden, classes, cfg.seed)?;
        let crf = mode.crf_mode().map(|_| cfg.crf);
        if let Some(p) = &crf {
            p.validate()?;
        }
        Ok(Model {
            net,
            mode,
            crf,
            seed: cfg.seed,
        })
    }

    /// Network posteriors, passed through the CRF in CRF modes.
    pub fn predict(&self, image: &Volume) -> Result<Volume> {
        let (logits, _) = net_forward(image, &self.net)?;
        let probs = softmax_channels(&logits)?;
        match (self.mode.crf_mode(), &self.crf) {
            (Some(mode), Some(params)) => crf::crf_apply(mode, image, &probs, params),
            _ => Ok(probs),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (ci, h, c) = (self.net.in_channels, self.net.hidden, self.net.classes);
        let tensors: [(&str, Vec<usize>, &[f64]); 4] = [
            ("w1", vec![h, ci, 3, 3, 3], &self.net.w1),
            ("b1", vec![h], &self.net.b1),
            ("w2", vec![c, h], &self.net.w2),
            ("b2", vec![c], &self.net.b2),
        ];
        let mut manifest = String::new();
        manifest.push_str(&format!("format = {CHECKPOINT_FORMAT}\n"));
        manifest.push_str(&format!("mode = {}\n", self.mode));
        manifest.push_str(&format!("seed = {}\n", self.seed));
        manifest.push_str(&format!("in_channels = {ci}\nhidden = {h}\nclasses = {c}\n"));
        for (name, shape, data) in tensors {
            let file = format!("{name}.npy");
            let array = NpyArray::new(shape.clone(), DType::F64, data.to_vec())?;
            npy::write(&array, &dir.join(&file))?;
            let dims: Vec<String> = shape.iter().map(|s| s.to_string()).collect();
            manifest.push_str(&format!("tensor.{name} = {file} {}\n", dims.join("x")));
        }
        if let Some(p) = &self.crf {
            manifest.push_str(&format!(
                "crf.w_app = {}\ncrf.w_smooth = {}\ncrf.theta_alpha = {}\ncrf.theta_beta = {}\ncrf.theta_gamma = {}\ncrf.iterations = {}\n",
                p.w_app, p.w_smooth, p.theta_alpha, p.theta_beta, p.theta_gamma, p.iterations
            ));
        }
        npy::write_atomic(&dir.join(MANIFEST), manifest.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let kv = parse_key_values(&text)?;
        let get = |k: &str| {
            kv.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Format(format!("checkpoint manifest lacks '{k}'")))
        };
        if get("format")? != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("unknown checkpoint format '{}'", get("format")?)));
        }
        let mode: TrainMode = get("mode")?.parse()?;
        let seed = parse_num::<u64>(get("seed")?, "seed")?;
        let ci = parse_num::<usize>(get("in_channels")?, "in_channels")?;
        let h = parse_num::<usize>(get("hidden")?, "hidden")?;
        let c = parse_num::<usize>(get("classes")?, "classes")?;
        let mut net = ToyNet::zeros(ci, h, c)?;
        for (name, dst) in [
            ("w1", &mut net.w1),
            ("b1", &mut net.b1),
            ("w2", &mut net.w2),
            ("b2", &mut net.b2),
        ] {
            let file = get(&format!("tensor.{name}"))?
                .split_whitespace()
                .next()
                .unwrap_or_default();
            let array = npy::read(&dir.join(file))?;
            if array.data.len() != dst.len() {
                return Err(Error::Shape(format!(
                    "tensor {name} has {} values, expected {}",
                    array.data.len(),
                    dst.len()
                )));
            }
            dst.copy_from_slice(&array.data);
        }
        let crf = match mode {
            TrainMode::Unet => None,
            TrainMode::Crf(_) => {
                let f = |k: &str| parse_num::<f64>(get(k)?, k);
                let params = CrfParams {
                    w_app: f("crf.w_app")?,
                    w_smooth: f("crf.w_smooth")?,
                    theta_alpha: f("crf.theta_alpha")?,
                    theta_beta: f("crf.theta_beta")?,
                    theta_gamma: f("crf.theta_gamma")?,
                    iterations: parse_num::<usize>(get("crf.iterations")?, "crf.iterations")?,
                };
                params.validate()?;
                Some(params)
            }
        };
        Ok(Model { net, mode, crf, seed })
    }
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected 'key = value'", no + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn parse_num<T: FromStr>(s: &str, key: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Format(format!("bad value '{s}' for '{key}'")))
}

/// Loss and gradients of one sample through the full chain.
#[derive(Debug, Clone)]
pub struct ChainGrads {
    pub loss: f64,
    pub net: NetGrads,
    /// `[w_app, w_smooth, theta_alpha, theta_beta, theta_gamma]`.
    pub crf: [f64; 5],
    /// Largest distribution violation among all mean-field fields.
    pub distribution_error: f64,
}

/// Chain options beyond the model itself.
#[derive(Debug, Clone, Copy)]
pub struct ChainOptions<'a> {
    pub class_weights: Option<&'a [f64]>,
    pub eps: f64,
    /// Step for the bandwidth finite differences; `None` skips them.
    pub theta_fd_step: Option<f64>,
    /// Reference map for posterior-mode features. Defaults to the network's
    /// own posteriors; either way it is treated as a constant.
    pub reference: Option<&'a Volume>,
}

impl Default for ChainOptions<'_> {
    fn default() -> Self {
        ChainOptions {
            class_weights: None,
            eps: crf::DEFAULT_EPS,
            theta_fd_step: None,
            reference: None,
        }
    }
}

/// Forward loss only.
pub fn chain_loss(model: &Model, sample: &Sample, opts: &ChainOptions) -> Result<f64> {
    let (logits, _) = net_forward(&sample.image, &model.net)?;
    let probs = softmax_channels(&logits)?;
    match (model.mode.crf_mode(), &model.crf) {
        (Some(mode), Some(params)) => {
            let reference = opts.reference.unwrap_or(&probs);
            let unary = unary_from_probabilities(&probs, opts.eps)?;
            let feats = build_feature_spaces(mode, &sample.image, reference, params)?;
            let (q, _) = meanfield_forward(&unary, &feats, params)?;
            Ok(cross_entropy(&q, &sample.labels, opts.class_weights, opts.eps)?.0)
        }
        _ => Ok(cross_entropy(&probs, &sample.labels, opts.class_weights, opts.eps)?.0),
    }
}

/// Loss plus exact gradients for the network and kernel weights, with
/// bandwidth gradients by central differences when requested.
pub fn chain_grads(model: &Model, sample: &Sample, opts: &ChainOptions) -> Result<ChainGrads> {
    let (logits, cache) = net_forward(&sample.image, &model.net)?;
    let probs = softmax_channels(&logits)?;
    let c = probs.channels();

    let mut distribution_error = crf::distribution_error(probs.data(), c);
    let (loss, d_probs, crf_grads) = match (model.mode.crf_mode(), &model.crf) {
        (Some(mode), Some(params)) => {
            let reference = opts.reference.unwrap_or(&probs);
            let unary = unary_from_probabilities(&probs, opts.eps)?;
            let feats = build_feature_spaces(mode, &sample.image, reference, params)?;
            let (q, tape) = meanfield_forward(&unary, &feats, params)?;
            let (loss, d_q) = cross_entropy(&q, &sample.labels, opts.class_weights, opts.eps)?;
            let g = meanfield_backward(&tape, &d_q)?;
            distribution_error = distribution_error.max(tape.distribution_error());

            let mut crf_grads = [g.w_app, g.w_smooth, 0.0, 0.0, 0.0];
            if let Some(h) = opts.theta_fd_step {
                let kernels = tape.kernels();
                let thetas = crf::theta_gradients_fd(mode, params, h, |p| {
                    let f = build_feature_spaces(mode, &sample.image, reference, p)?;
                    // Only the kernel whose bandwidth moved needs a new lattice.
                    let appearance_moved = p.theta_alpha != params.theta_alpha
                        || p.theta_beta != params.theta_beta;
                    let smoothness = if p.theta_gamma != params.theta_gamma {
                        LatticeKernel::new(&f.smoothness)?
                    } else {
                        kernels.smoothness.clone()
                    };
                    let appearance = match (&f.appearance, appearance_moved) {
                        (Some(a), true) => Some(LatticeKernel::new(a)?),
                        _ => kernels.appearance.clone(),
                    };
                    let ks = CrfKernels { appearance, smoothness };
                    let (q, _) = crf::meanfield_with_kernels(&unary, ks, p)?;
                    Ok(cross_entropy(&q, &sample.labels, opts.class_weights, opts.eps)?.0)
                })?;
                crf_grads[2..].copy_from_slice(&thetas);
            }

            // dU -> dp through U = -ln(max(p, eps)).
            let d_unary = g.unary.data();
            let d_probs: Vec<f64> = probs
                .data()
                .iter()
                .zip(d_unary)
                .map(|(&p, &du)| if p > opts.eps { -du / p } else { 0.0 })
                .collect();
            (loss, d_probs, crf_grads)
        }
        _ => {
            let (loss, d_p) = cross_entropy(&probs, &sample.labels, opts.class_weights, opts.eps)?;
            (loss, d_p.into_data(), [0.0; 5])
        }
    };
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss}")));
    }

    let mut d_logits = Vec::with_capacity(d_probs.len());
    for (p, g) in probs.data().chunks_exact(c).zip(d_probs.chunks_exact(c)) {
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        d_logits.extend(p.iter().zip(g).map(|(pv, gv)| pv * (gv - dot)));
    }
    let d_logits = Volume::from_vec(probs.dims(), c, DType::F64, d_logits)?;
    let net = net_backward(&model.net, &cache, &d_logits)?;
    Ok(ChainGrads {
        loss,
        net,
        crf: crf_grads,
        distribution_error,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    /// Mean sample loss of each epoch, measured before each sample's update.
    pub epoch_losses: Vec<f64>,
    pub initial_crf: Option<CrfParams>,
    /// CRF parameters at the end of each epoch.
    pub crf_history: Vec<CrfParams>,
    /// Largest distribution violation seen in any forward pass.
    pub distribution_error: f64,
}

/// Trains `mode` on `samples` and returns the final model with its log.
pub fn train(samples: &[Sample], mode: TrainMode, cfg: &TrainConfig) -> Result<(Model, TrainLog)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Usage("training set is empty".into()))?;
    for lr in [cfg.lr, cfg.crf_lr] {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::Parameter(format!("learning rate must be >= 0, got {lr}")));
        }
    }
    let classes = cfg.classes;
    for s in samples {
        if s.labels.channels() != 1 || !s.image.same_grid(&s.labels) {
            return Err(Error::Shape("each sample needs a one-channel label volume on the image grid".into()));
        }
    }
    let mut model = Model::init(mode, first.image.channels(), classes, cfg)?;

    let label_sets: Vec<Vec<u8>> = samples
        .iter()
        .map(|s| s.labels.labels(classes))
        .collect::<Result<_>>()?;
    let weights = cfg.class_weights.then(|| {
        let refs: Vec<&[u8]> = label_sets.iter().map(Vec::as_slice).collect();
        inverse_frequency_weights(&refs, classes)
    });
    let opts = ChainOptions {
        class_weights: weights.as_deref(),
        eps: cfg.eps,
        theta_fd_step: Some(cfg.theta_fd_step),
        reference: None,
    };

    let mut adam = Adam::new(cfg.lr, model.net.n_params());
    let mut crf_adam = Adam::new(cfg.crf_lr, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = TrainLog {
        epoch_losses: Vec::with_capacity(cfg.epochs),
        initial_crf: model.crf,
        crf_history: Vec::new(),
        distribution_error: 0.0,
    };

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let augmented;
            let sample = if cfg.flip_augment {
                let mut s = samples[i].clone();
                for axis in [Axis::X, Axis::Y, Axis::Z] {
                    if rng.random_bool(0.5) {
                        s = s.flipped(axis);
                    }
                }
                augmented = s;
                &augmented
            } else {
                &samples[i]
            };
            let grads = chain_grads(&model, sample, &opts)?;
            total += grads.loss;
            log.distribution_error = log.distribution_error.max(grads.distribution_error);

            let mut params = model.net.flat_params();
            adam.step(&mut params, &grads.net.flat())?;
            model.net.set_flat_params(&params)?;
            if let Some(p) = &mut model.crf {
                let mut t = p.trainables();
                crf_adam.step(&mut t, &grads.crf)?;
                p.set_trainables(t);
                p.clamp_thetas();
            }
        }
        log.epoch_losses.push(total / samples.len() as f64);
        log.crf_history.extend(model.crf);
    }
    Ok((model, log))
}

/// Writes `epoch,loss` lines.
pub fn loss_csv(log: &TrainLog) -> String {
    let mut out = String::from("epoch,loss\n");
    for (i, l) in log.epoch_losses.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, l));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::numeric_gradient;
    use crate::crf::THETA_MIN;

    fn random_volume(rng: &mut ChaCha8Rng, dims: [usize; 3], c: usize, lo: f64, hi: f64) -> Volume {
        let n = dims.iter().product::<usize>() * c;
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Volume::from_vec(dims, c, DType::F64, data).unwrap()
    }

    fn random_labels(rng: &mut ChaCha8Rng, dims: [usize; 3], c: usize) -> Volume {
        let n: usize = dims.iter().product();
        let l: Vec<u8> = (0..n).map(|_| rng.random_range(0..c as u8)).collect();
        Volume::from_labels(dims, &l).unwrap()
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let net = ToyNet::zeros(2, 4, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_volume(&mut rng, [3, 4, 3], 2, -1.0, 1.0);
        let (logits, _) = net_forward(&x, &net).unwrap();
        assert_eq!(logits.channels(), 3);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_network_reproduces_positive_input() {
        let (ci, c) = (2, 2);
        let mut net = ToyNet::zeros(ci, ci, c).unwrap();
        for k in 0..ci {
            net.w1[(k * ci + k) * TAPS + 13] = 1.0;
            net.w2[k * ci + k] = 1.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_volume(&mut rng, [3, 3, 4], ci, 0.1, 2.0);
        let (logits, _) = net_forward(&x, &net).unwrap();
        assert_eq!(logits.data(), x.data());
    }

    #[test]
    fn small_input_is_rejected() {
        let net = ToyNet::zeros(1, 2, 2).unwrap();
        let x = Volume::new([3, 2, 3], 1, 0.0).unwrap();
        assert!(matches!(net_forward(&x, &net), Err(Error::Shape(_))));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = ToyNet::init(1, 8, 3, 5).unwrap();
        let b = ToyNet::init(1, 8, 3, 5).unwrap();
        assert_eq!(a, b);
        let bound = (6.0f64 / 27.0).sqrt();
        assert!(a.w1.iter().all(|w| w.abs() <= bound));
        assert!(a.b1.iter().chain(&a.b2).all(|&b| b == 0.0));
        assert_ne!(a, ToyNet::init(1, 8, 3, 6).unwrap());
    }

    fn net_loss(net: &ToyNet, x: &Volume, g: &Volume) -> f64 {
        let (logits, _) = net_forward(x, net).unwrap();
        logits.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = [5, 5, 5];
        let net = ToyNet::init(2, 4, 3, 9).unwrap();
        let mut net = net;
        net.b1.iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3));
        let x = random_volume(&mut rng, dims, 2, -1.0, 1.0);
        let g = random_volume(&mut rng, dims, 3, -1.0, 1.0);
        let (_, cache) = net_forward(&x, &net).unwrap();
        let grads = net_backward(&net, &cache, &g).unwrap();

        let base = net.flat_params();
        let numeric = numeric_gradient(
            |p| {
                let mut n = net.clone();
                n.set_flat_params(p).unwrap();
                Ok(net_loss(&n, &x, &g))
            },
            &base,
            1e-4,
        )
        .unwrap();
        let analytic = grads.flat();
        let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() <= 1e-3 * scale.max(1e-12), "{a} vs {n}");
        }

        let numeric_x = numeric_gradient(
            |v| {
                let xv = Volume::from_vec(dims, 2, DType::F64, v.to_vec()).unwrap();
                Ok(net_loss(&net, &xv, &g))
            },
            x.data(),
            1e-4,
        )
        .unwrap();
        let scale = grads.input.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, n) in grads.input.iter().zip(&numeric_x) {
            assert!((a - n).abs() <= 1e-3 * scale);
        }
    }

    #[test]
    fn zero_logit_gradient_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = ToyNet::init(1, 4, 2, 1).unwrap();
        let x = random_volume(&mut rng, [3, 3, 3], 1, -1.0, 1.0);
        let (_, cache) = net_forward(&x, &net).unwrap();
        let g = Volume::new([3, 3, 3], 2, 0.0).unwrap();
        let grads = net_backward(&net, &cache, &g).unwrap();
        assert!(grads.flat().iter().chain(&grads.input).all(|&v| v == 0.0));
    }

    #[test]
    fn linear_regime_matches_linear_network() {
        // With every pre-activation positive the net is affine, so the
        // gradient of sum(g * logits) with respect to b1 is W2^T summed g.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = ToyNet::init(1, 3, 2, 2).unwrap();
        net.w1.iter_mut().for_each(|w| *w = w.abs() * 0.1);
        net.b1.iter_mut().for_each(|b| *b = 1.0);
        let x = random_volume(&mut rng, [4, 3, 3], 1, 0.0, 1.0);
        let g = random_volume(&mut rng, [4, 3, 3], 2, -1.0, 1.0);
        let (_, cache) = net_forward(&x, &net).unwrap();
        assert!(cache.pre.iter().all(|&p| p > 0.0));
        let grads = net_backward(&net, &cache, &g).unwrap();
        let mut gsum = [0.0; 2];
        for row in g.data().chunks_exact(2) {
            gsum[0] += row[0];
            gsum[1] += row[1];
        }
        for j in 0..3 {
            let expected = net.w2[j] * gsum[0] + net.w2[3 + j] * gsum[1];
            assert!((grads.b1[j] - expected).abs() < 1e-12);
        }
        assert_eq!(grads.b2, gsum.to_vec());
    }

    #[test]
    fn cross_entropy_examples() {
        let dims = [3, 1, 1];
        let labels = Volume::from_labels(dims, &[0, 2, 1]).unwrap();
        let onehot = Volume::from_vec(
            dims,
            3,
            DType::F64,
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0],
        )
        .unwrap();
        let (loss, _) = cross_entropy(&onehot, &labels, None, 1e-8).unwrap();
        assert!(loss.abs() < 1e-12);

        let uniform = Volume::new(dims, 3, 1.0 / 3.0).unwrap();
        let (loss, _) = cross_entropy(&uniform, &labels, None, 1e-8).unwrap();
        assert!((loss - 1.0986).abs() < 1e-4);

        let bad = Volume::from_labels(dims, &[0, 3, 1]).unwrap();
        assert!(matches!(cross_entropy(&uniform, &bad, None, 1e-8), Err(Error::Label(_))));
    }

    #[test]
    fn cross_entropy_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dims = [3, 3, 2];
        let logits = random_volume(&mut rng, dims, 3, -1.0, 1.0);
        let p = softmax_channels(&logits).unwrap();
        let labels = random_labels(&mut rng, dims, 3);
        for weights in [None, Some(&[0.2, 1.0, 3.0][..])] {
            let (_, g) = cross_entropy(&p, &labels, weights, 1e-8).unwrap();
            let numeric = numeric_gradient(
                |v| {
                    let pv = Volume::from_vec(dims, 3, DType::F64, v.to_vec()).unwrap();
                    Ok(cross_entropy(&pv, &labels, weights, 1e-8)?.0)
                },
                p.data(),
                1e-6,
            )
            .unwrap();
            for (a, n) in g.data().iter().zip(&numeric) {
                assert!((a - n).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn adam_examples() {
        let mut adam = Adam::new(0.1, 1);
        let mut p = [2.0];
        adam.step(&mut p, &[0.0]).unwrap();
        assert_eq!(p, [2.0]);
        assert_eq!(adam.steps(), 1);

        let mut adam = Adam::new(0.1, 1);
        let mut p = [2.0];
        adam.step(&mut p, &[1.0]).unwrap();
        assert!((p[0] - 1.9).abs() < 1e-6);

        assert!(matches!(adam.step(&mut p, &[f64::NAN]), Err(Error::Numeric(_))));
        assert!((p[0] - 1.9).abs() < 1e-6);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn theta_clamped_after_step() {
        let mut params = CrfParams {
            theta_beta: 0.002,
            ..CrfParams::default()
        };
        let mut adam = Adam::new(0.1, 5);
        let mut t = params.trainables();
        adam.step(&mut t, &[0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        params.set_trainables(t);
        params.clamp_thetas();
        assert_eq!(params.theta_beta, THETA_MIN);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in ["unet", "intensity-crf", "spatial-crf", "posterior-crf"] {
            assert_eq!(m.parse::<TrainMode>().unwrap().to_string(), m);
        }
        assert!("dense".parse::<TrainMode>().is_err());
    }

    fn tiny_samples(seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..2)
            .map(|_| {
                let dims = [4, 4, 4];
                let labels = random_labels(&mut rng, dims, 3);
                let image = Volume::from_vec(
                    dims,
                    1,
                    DType::F32,
                    labels.data().iter().map(|&l| l * 0.5 + rng.random_range(-0.2..0.2)).collect(),
                )
                .unwrap();
                Sample { image, labels }
            })
            .collect()
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let samples = tiny_samples(7);
        let cfg = TrainConfig {
            epochs: 3,
            lr: 0.0,
            crf_lr: 0.0,
            crf: CrfParams {
                iterations: 2,
                ..CrfParams::default()
            },
            ..TrainConfig::default()
        };
        for mode in ["unet", "posterior-crf"] {
            let (model, log) = train(&samples, mode.parse().unwrap(), &cfg).unwrap();
            for l in &log.epoch_losses {
                assert!((l - log.epoch_losses[0]).abs() <= 1e-12);
            }
            assert_eq!(model.crf, log.initial_crf);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let samples = tiny_samples(8);
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        for mode in ["unet", "intensity-crf"] {
            let (model, _) = train(&samples, mode.parse().unwrap(), &cfg).unwrap();
            let path = dir.path().join(mode);
            model.save(&path).unwrap();
            let back = Model::load(&path).unwrap();
            assert_eq!(back, model);
            let a = model.predict(&samples[0].image).unwrap();
            let b = back.predict(&samples[0].image).unwrap();
            assert_eq!(a.data(), b.data());
            let manifest = fs::read_to_string(path.join(MANIFEST)).unwrap();
            assert_eq!(manifest.contains("crf."), mode != "unet");
        }
    }
}
