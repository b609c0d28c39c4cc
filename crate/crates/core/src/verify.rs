//! Oracle comparisons: lattice messages and mean-field inference against the
//! brute-force reference, analytic gradients against central differences,
//! and the bandwidth difference harness against closed forms.
//!
//! Instances are drawn from seeded families so a check run is reproducible
//! and `seed` selects a different but equally distributed set.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::crf::{
    self, build_feature_spaces, meanfield_backward, meanfield_forward, meanfield_with_kernels,
    theta_gradients_fd, unary_from_probabilities, CrfKernels, CrfMode, CrfParams, THETA_MIN,
};
use crate::error::Result;
use crate::lattice::{normalized_message, FeatureMatrix, LatticeKernel};
use crate::oracle::{brute_kernel, brute_meanfield, brute_message, numeric_gradient};
use crate::unary_net::{chain_grads, chain_loss, ChainOptions, Model, Sample, ToyNet, TrainMode};
use crate::volume::{softmax_channels, DType, Volume};

pub const FILTER_TOLERANCE: f64 = 5e-2;
pub const MEANFIELD_TOLERANCE: f64 = 1e-2;
pub const GRADIENT_TOLERANCE: f64 = 2e-3;
pub const THETA_HARNESS_TOLERANCE: f64 = 1e-6;
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-4;
pub const FILTER_INSTANCES: usize = 20;

#[derive(Debug, Clone, Copy, Default)]
pub struct CheckOptions {
    pub seed: u64,
    /// Negates every analytic gradient before comparison.
    pub inject_sign_fault: bool,
}

/// Outcome of one check: the worst observed error against its tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub instances: usize,
}

impl CheckLine {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

impl fmt::Display for CheckLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: max error {:.3e} vs tolerance {:.0e} over {} instances",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_error,
            self.tolerance,
            self.instances
        )
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `max |a - b| / max |b|`.
pub fn relative_linf(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = b.iter().fold(0.0f64, |m, y| m.max(y.abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

pub fn random_probabilities(rng: &mut ChaCha8Rng, dims: [usize; 3], c: usize) -> Volume {
    let logits: Vec<f64> = (0..dims.iter().product::<usize>() * c)
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    softmax_channels(&Volume::from_vec(dims, c, DType::F64, logits).unwrap()).unwrap()
}

pub fn random_intensity(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Volume {
    let data = (0..dims.iter().product::<usize>()).map(|_| rng.random::<f64>()).collect();
    Volume::from_vec(dims, 1, DType::F64, data).unwrap()
}

/// One filtering instance: grid positions over `theta_p in [2, 3]` plus
/// `d - 3` uniform reference channels over `theta_f in [0.5, 1]`.
pub fn filter_instance(rng: &mut ChaCha8Rng) -> (FeatureMatrix, Vec<f64>, usize) {
    let side = rng.random_range(4..=6usize);
    let d = rng.random_range(3..=6usize);
    let theta_p = rng.random_range(2.0..3.0);
    let theta_f = rng.random_range(0.5..1.0);
    let n = side * side * side;
    let mut values = Vec::with_capacity(n * d);
    for i in 0..n {
        let p = [i / (side * side), (i / side) % side, i % side];
        values.extend(p.iter().map(|&x| x as f64 / theta_p));
        values.extend((3..d).map(|_| rng.random::<f64>() / theta_f));
    }
    let c = 3;
    let q = random_probabilities(rng, [side, side, side], c).into_data();
    (FeatureMatrix::new(d, n, values).unwrap(), q, c)
}

/// Lattice messages against brute-force messages, relative L-infinity.
pub fn filter_check(opts: &CheckOptions) -> Result<CheckLine> {
    let mut rng = rng_for(opts.seed, 1);
    let mut worst = 0.0f64;
    for _ in 0..FILTER_INSTANCES {
        let (f, q, c) = filter_instance(&mut rng);
        let kernel = LatticeKernel::new(&f)?;
        let approx = normalized_message(kernel.lattice(), &q, c, kernel.ones_response())?;
        let exact = brute_message(&brute_kernel(&f)?, &q, c)?;
        worst = worst.max(relative_linf(&approx, &exact));
    }
    Ok(CheckLine {
        name: "lattice message vs brute force (4^3-6^3, d=3-6)".into(),
        max_error: worst,
        tolerance: FILTER_TOLERANCE,
        instances: FILTER_INSTANCES,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanfieldRecord {
    pub mode: CrfMode,
    pub iterations: usize,
    pub classes: usize,
    pub error: f64,
    pub distribution_error: f64,
}

/// Mean-field against the brute-force oracle on 3^3 volumes for every mode,
/// `T in {1, 3, 5}` and `C in {2, 3}`, default kernel parameters.
pub fn meanfield_records(opts: &CheckOptions) -> Result<Vec<MeanfieldRecord>> {
    let mut rng = rng_for(opts.seed, 2);
    let dims = [3, 3, 3];
    let mut out = Vec::new();
    for mode in CrfMode::ALL {
        for iterations in [1, 3, 5] {
            for classes in [2, 3] {
                let intensity = random_intensity(&mut rng, dims);
                let probs = random_probabilities(&mut rng, dims, classes);
                let params = CrfParams {
                    iterations,
                    ..CrfParams::default()
                };
                let unary = unary_from_probabilities(&probs, crf::DEFAULT_EPS)?;
                let feats = build_feature_spaces(mode, &intensity, &probs, &params)?;
                let (q, tape) = meanfield_forward(&unary, &feats, &params)?;
                let exact = brute_meanfield(&unary, &feats, &params)?;
                out.push(MeanfieldRecord {
                    mode,
                    iterations,
                    classes,
                    error: linf(q.data(), exact.data()),
                    distribution_error: tape.distribution_error(),
                });
            }
        }
    }
    Ok(out)
}

pub fn meanfield_check(opts: &CheckOptions) -> Result<(CheckLine, Vec<MeanfieldRecord>)> {
    let records = meanfield_records(opts)?;
    let line = CheckLine {
        name: "mean-field vs brute force (3^3, all modes, T=1/3/5, C=2/3)".into(),
        max_error: records.iter().map(|r| r.error).fold(0.0, f64::max),
        tolerance: MEANFIELD_TOLERANCE,
        instances: records.len(),
    };
    Ok((line, records))
}

fn maybe_flip(values: &mut [f64], opts: &CheckOptions) {
    if opts.inject_sign_fault {
        values.iter_mut().for_each(|v| *v = -*v);
    }
}

/// Worst relative error of the mean-field backward pass (unary group and
/// weight group, each as a vector) on random 3^3-4^3 instances.
pub fn meanfield_gradient_check(opts: &CheckOptions) -> Result<(CheckLine, f64)> {
    let mut rng = rng_for(opts.seed, 3);
    let mut worst = 0.0f64;
    let mut worst_distribution = 0.0f64;
    let mut count = 0;
    for side in [3, 4] {
        for classes in [2, 3] {
            for iterations in [1, 2, 3] {
                for mode in CrfMode::ALL {
                    let dims = [side; 3];
                    let intensity = random_intensity(&mut rng, dims);
                    let probs = random_probabilities(&mut rng, dims, classes);
                    let params = CrfParams {
                        w_app: rng.random_range(0.5..1.5),
                        w_smooth: rng.random_range(0.5..1.5),
                        iterations,
                        ..CrfParams::default()
                    };
                    let unary = unary_from_probabilities(&probs, crf::DEFAULT_EPS)?;
                    let feats = build_feature_spaces(mode, &intensity, &probs, &params)?;
                    let kernels = CrfKernels::<LatticeKernel>::from_features(&feats)?;
                    let g: Vec<f64> = (0..unary.data().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let gv = Volume::from_vec(dims, classes, DType::F64, g.clone())?;

                    let (_, tape) = meanfield_with_kernels(&unary, kernels.clone(), &params)?;
                    worst_distribution = worst_distribution.max(tape.distribution_error());
                    let grads = meanfield_backward(&tape, &gv)?;

                    let loss = |u: &Volume, p: &CrfParams| -> Result<f64> {
                        let (q, _) = meanfield_with_kernels(u, kernels.clone(), p)?;
                        Ok(q.data().iter().zip(&g).map(|(a, b)| a * b).sum())
                    };
                    let numeric_u = numeric_gradient(
                        |x| loss(&Volume::from_vec(dims, classes, DType::F64, x.to_vec())?, &params),
                        unary.data(),
                        FD_STEP,
                    )?;
                    let numeric_w = numeric_gradient(
                        |w| {
                            let p = CrfParams {
                                w_app: w[0],
                                w_smooth: w[1],
                                ..params
                            };
                            loss(&unary, &p)
                        },
                        &[params.w_app, params.w_smooth],
                        FD_STEP,
                    )?;
                    let mut analytic_u = grads.unary.data().to_vec();
                    let mut analytic_w = vec![grads.w_app, grads.w_smooth];
                    maybe_flip(&mut analytic_u, opts);
                    maybe_flip(&mut analytic_w, opts);
                    worst = worst
                        .max(relative_linf(&analytic_u, &numeric_u))
                        .max(relative_linf(&analytic_w, &numeric_w));
                    count += 1;
                }
            }
        }
    }
    Ok((
        CheckLine {
            name: "mean-field backward vs central differences (unary, w_app, w_smooth)".into(),
            max_error: worst,
            tolerance: GRADIENT_TOLERANCE,
            instances: count,
        },
        worst_distribution,
    ))
}

/// A random 4^3 sample whose image loosely follows its labels.
pub fn random_sample(rng: &mut ChaCha8Rng, dims: [usize; 3], classes: usize) -> Sample {
    let n: usize = dims.iter().product();
    let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..classes as u8)).collect();
    let image: Vec<f64> = labels
        .iter()
        .map(|&l| 0.5 * l as f64 + rng.random_range(-0.3..0.3))
        .collect();
    Sample {
        image: Volume::from_vec(dims, 1, DType::F64, image).unwrap(),
        labels: Volume::from_labels(dims, &labels).unwrap(),
    }
}

/// Network plus CRF loss gradients against central differences on 4^3
/// instances, for every training mode. Posterior-mode features are held at
/// the unperturbed network posteriors, as in training.
pub fn chain_gradient_check(opts: &CheckOptions) -> Result<CheckLine> {
    let mut rng = rng_for(opts.seed, 4);
    let dims = [4, 4, 4];
    let classes = 3;
    let modes = [
        TrainMode::Unet,
        TrainMode::Crf(CrfMode::Intensity),
        TrainMode::Crf(CrfMode::Spatial),
        TrainMode::Crf(CrfMode::Posterior),
    ];
    let mut worst = 0.0f64;
    for mode in modes {
        let sample = random_sample(&mut rng, dims, classes);
        let mut net = ToyNet::init(1, 4, classes, rng.random())?;
        net.b1_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.2));
        net.b2_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.2));
        let crf = mode.crf_mode().map(|_| CrfParams {
            w_app: rng.random_range(0.5..1.5),
            w_smooth: rng.random_range(0.5..1.5),
            iterations: 3,
            ..CrfParams::default()
        });
        let model = Model {
            net,
            mode,
            crf,
            seed: 0,
        };
        let (logits, _) = crate::unary_net::net_forward(&sample.image, &model.net)?;
        let reference = softmax_channels(&logits)?;
        let chain_opts = ChainOptions {
            reference: Some(&reference),
            ..ChainOptions::default()
        };
        let grads = chain_grads(&model, &sample, &chain_opts)?;

        let base = model.net.flat_params();
        let numeric_net = numeric_gradient(
            |x| {
                let mut m = model.clone();
                m.net.set_flat_params(x)?;
                chain_loss(&m, &sample, &chain_opts)
            },
            &base,
            FD_STEP,
        )?;
        let mut analytic_net = grads.net.flat();
        maybe_flip(&mut analytic_net, opts);
        worst = worst.max(relative_linf(&analytic_net, &numeric_net));

        if let Some(p) = model.crf {
            let numeric_w = numeric_gradient(
                |w| {
                    let mut m = model.clone();
                    m.crf = Some(CrfParams {
                        w_app: w[0],
                        w_smooth: w[1],
                        ..p
                    });
                    chain_loss(&m, &sample, &chain_opts)
                },
                &[p.w_app, p.w_smooth],
                FD_STEP,
            )?;
            let mut analytic_w = grads.crf[..2].to_vec();
            maybe_flip(&mut analytic_w, opts);
            worst = worst.max(relative_linf(&analytic_w, &numeric_w));
        }
    }
    Ok(CheckLine {
        name: "network + CRF chain vs central differences (4^3, all modes)".into(),
        max_error: worst,
        tolerance: GRADIENT_TOLERANCE,
        instances: modes.len(),
    })
}

/// Bandwidth difference harness on losses with known derivatives.
pub fn theta_harness_check(opts: &CheckOptions) -> Result<CheckLine> {
    let params = CrfParams::default();
    let h = 1e-3;
    let mut worst = 0.0f64;
    let flip = |mut g: [f64; 3]| {
        maybe_flip(&mut g, opts);
        g
    };

    let g = flip(theta_gradients_fd(CrfMode::Posterior, &params, h, |p| Ok(p.theta_alpha * p.theta_alpha))?);
    worst = worst.max((g[0] - 2.0 * params.theta_alpha).abs());
    worst = worst.max(g[1].abs()).max(g[2].abs());

    let g = flip(theta_gradients_fd(CrfMode::Intensity, &params, h, |p| {
        Ok(p.theta_beta.powi(3) + 2.0 * p.theta_alpha)
    })?);
    worst = worst.max((g[0] - 2.0).abs());
    // Central difference of a cubic carries an h^2 term.
    worst = worst.max((g[1] - 3.0 * params.theta_beta.powi(2) - h * h).abs());
    worst = worst.max(g[2].abs());

    let mut evaluated = Vec::new();
    let g = flip(theta_gradients_fd(CrfMode::Spatial, &params, h, |p| {
        evaluated.push(*p);
        Ok(p.theta_gamma.exp())
    })?);
    worst = worst.max(g[0].abs()).max(g[1].abs());
    worst = worst.max((g[2] - params.theta_gamma.exp()).abs() / params.theta_gamma.exp());
    if evaluated.len() != 2 {
        worst = f64::INFINITY;
    }

    let near_floor = CrfParams {
        theta_beta: THETA_MIN + 2e-4,
        ..params
    };
    let g = flip(theta_gradients_fd(CrfMode::Posterior, &near_floor, h, |p| Ok(5.0 * p.theta_beta))?);
    worst = worst.max((g[1] - 5.0).abs());

    Ok(CheckLine {
        name: "bandwidth difference harness vs closed forms".into(),
        max_error: worst,
        tolerance: THETA_HARNESS_TOLERANCE,
        instances: 4,
    })
}

/// Every check, in a fixed order.
pub fn run_all(opts: &CheckOptions) -> Result<Vec<CheckLine>> {
    let mut lines = vec![filter_check(opts)?];
    let (mf, records) = meanfield_check(opts)?;
    lines.push(mf);
    let (grad, dist) = meanfield_gradient_check(opts)?;
    lines.push(grad);
    lines.push(chain_gradient_check(opts)?);
    lines.push(theta_harness_check(opts)?);
    let dist = records.iter().map(|r| r.distribution_error).fold(dist, f64::max);
    lines.push(CheckLine {
        name: "mean-field fields are distributions".into(),
        max_error: dist,
        tolerance: DISTRIBUTION_TOLERANCE,
        instances: records.len(),
    });
    Ok(lines)
}
