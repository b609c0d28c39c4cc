mod config;

use std::fs;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand};

use pcrf::crf::{self, CrfMode, CrfParams};
use pcrf::metrics::{self, MetricsRow};
use pcrf::synth::{self, Dataset, Split, SynthConfig};
use pcrf::unary_net::{self, Model, Sample, TrainConfig, TrainMode};
use pcrf::verify::{self, CheckOptions};
use pcrf::volume::{self, Axis, DType, Volume};

#[derive(Debug, Parser)]
#[command(name = "pcrf", version, about = "3D fully connected CRF segmentation toolkit")]
struct Cli {
    /// Worker threads for filtering and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// File of `key = value` lines supplying defaults for any flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train the unary network, alone or end to end with a CRF.
    Train(TrainArgs),
    /// Predict probabilities and labels for a dataset split.
    Infer(InferArgs),
    /// Grid-search post-processing CRF parameters on the training split.
    Gridsearch(GridArgs),
    /// Compute lesion metrics of one or more prediction directories.
    Eval(EvalArgs),
    /// Run the oracle verification suite.
    Check(CheckArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 6)]
    train: usize,
    #[arg(long, default_value_t = 2)]
    val: usize,
    #[arg(long, default_value_t = 2)]
    test: usize,
    /// Edge length of the cubic volumes.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    /// Lesion radius range in voxels, `MIN-MAX` or a single value.
    #[arg(long, default_value = "3-5", value_parser = parse_range)]
    lesion_radius: RangeInclusive<usize>,
    #[arg(long, default_value = "3-5", value_parser = parse_range)]
    distractor_radius: RangeInclusive<usize>,
}

fn parse_range(text: &str) -> Result<RangeInclusive<usize>, String> {
    let (lo, hi) = text.split_once('-').unwrap_or((text, text));
    let lo: usize = lo.trim().parse().map_err(|_| format!("bad range '{text}'"))?;
    let hi: usize = hi.trim().parse().map_err(|_| format!("bad range '{text}'"))?;
    if lo > hi {
        return Err(format!("empty range '{text}'"));
    }
    Ok(lo..=hi)
}

#[derive(Debug, Clone, Args)]
struct CrfArgs {
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    w_app: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    w_smooth: f64,
    #[arg(long, default_value_t = 3.0)]
    theta_alpha: f64,
    #[arg(long, default_value_t = 0.5)]
    theta_beta: f64,
    #[arg(long, default_value_t = 3.0)]
    theta_gamma: f64,
    /// Mean-field iterations.
    #[arg(long, default_value_t = crf::DEFAULT_ITERATIONS)]
    iterations: usize,
}

impl CrfArgs {
    fn params(&self) -> CrfParams {
        CrfParams {
            w_app: self.w_app,
            w_smooth: self.w_smooth,
            theta_alpha: self.theta_alpha,
            theta_beta: self.theta_beta,
            theta_gamma: self.theta_gamma,
            iterations: self.iterations,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// unet, intensity-crf, spatial-crf or posterior-crf.
    #[arg(long)]
    mode: TrainMode,
    /// Checkpoint directory; also receives loss.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Step size of the CRF scalars.
    #[arg(long, default_value_t = 1e-3)]
    crf_lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = unary_net::DEFAULT_HIDDEN)]
    hidden: usize,
    #[command(flatten)]
    crf: CrfArgs,
    /// Weight the loss by inverse class frequency.
    #[arg(long)]
    class_weights: bool,
    /// Random axis flips of each training volume.
    #[arg(long)]
    flip_augment: bool,
    #[arg(long, default_value_t = 1e-2)]
    theta_fd_step: f64,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Apply a post-processing CRF to a unet checkpoint's output.
    #[arg(long)]
    post_crf: bool,
    /// Feature mode of the post-processing CRF.
    #[arg(long, default_value = "intensity")]
    crf_mode: CrfMode,
    #[command(flatten)]
    crf: CrfArgs,
    /// Also write a PGM of one slice, e.g. `z:16`.
    #[arg(long)]
    slice: Option<String>,
    /// Probability channel shown in the slice image.
    #[arg(long, default_value_t = 1)]
    slice_channel: usize,
}

#[derive(Debug, Args)]
struct GridArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Receives grid.csv and best_params.txt.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "intensity")]
    crf_mode: CrfMode,
    /// Comma-separated candidate values.
    #[arg(long, default_value = "1", allow_hyphen_values = true)]
    w_app: String,
    #[arg(long, default_value = "1", allow_hyphen_values = true)]
    w_smooth: String,
    #[arg(long, default_value = "3")]
    theta_alpha: String,
    #[arg(long, default_value = "0.5")]
    theta_beta: String,
    #[arg(long, default_value = "3")]
    theta_gamma: String,
    #[arg(long, default_value_t = crf::DEFAULT_ITERATIONS)]
    iterations: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Prediction directory, optionally named as `NAME=DIR`. Repeatable.
    #[arg(long, required = true)]
    pred: Vec<String>,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Directory for per-method metric CSVs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Voxel edge length in millimeters.
    #[arg(long, default_value_t = 1.0)]
    spacing: f64,
}

#[derive(Debug, Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let argv = match config::merge_config(&Cli::command(), argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<pcrf::Error>(), Some(pcrf::Error::Usage(_))));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    if cli.threads == 0 {
        return Err(pcrf::Error::Usage("--threads must be at least 1".into()).into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .context("configuring the thread pool")?;
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Gridsearch(a) => cmd_gridsearch(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Check(a) => cmd_check(a),
    }
}

fn cmd_gen(a: GenArgs) -> Result<ExitCode> {
    let cfg = SynthConfig {
        shape: [a.size; 3],
        noise_sigma: a.noise,
        lesion_radius: a.lesion_radius,
        distractor_radius: a.distractor_radius,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let manifest = synth::generate_dataset(&cfg, a.train, a.val, a.test, &a.out)?;
    println!("{}", manifest.display());
    Ok(ExitCode::SUCCESS)
}

fn load_samples(ds: &Dataset, split: Split) -> Result<Vec<(String, Sample)>> {
    ds.ids(split)
        .into_iter()
        .map(|id| {
            let (image, labels) = ds.load_case(id).with_context(|| format!("loading case {id}"))?;
            Ok((id.to_string(), Sample { image, labels }))
        })
        .collect()
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let ds = Dataset::load(&a.data)?;
    let samples: Vec<Sample> = load_samples(&ds, Split::Train)?.into_iter().map(|(_, s)| s).collect();
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        crf_lr: a.crf_lr,
        seed: a.seed,
        hidden: a.hidden,
        classes: synth::CLASSES,
        crf: a.crf.params(),
        class_weights: a.class_weights,
        flip_augment: a.flip_augment,
        eps: crf::DEFAULT_EPS,
        theta_fd_step: a.theta_fd_step,
    };
    let (model, log) = unary_net::train(&samples, a.mode, &cfg)?;
    model.save(&a.out)?;
    let csv = a.out.join("loss.csv");
    fs::write(&csv, unary_net::loss_csv(&log)).with_context(|| format!("writing {}", csv.display()))?;
    for (i, l) in log.epoch_losses.iter().enumerate() {
        println!("epoch {:>3}  loss {l:.6}", i + 1);
    }
    if let Some(p) = &model.crf {
        println!(
            "crf w_app={} w_smooth={} theta_alpha={} theta_beta={} theta_gamma={}",
            p.w_app, p.w_smooth, p.theta_alpha, p.theta_beta, p.theta_gamma
        );
    }
    println!("checkpoint {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn parse_slice(spec: &str) -> Result<(Axis, usize)> {
    let usage = || pcrf::Error::Usage(format!("--slice expects AXIS:INDEX such as z:16, got '{spec}'"));
    let (axis, index) = spec.split_once(':').ok_or_else(usage)?;
    let axis = match axis {
        "x" => Axis::X,
        "y" => Axis::Y,
        "z" => Axis::Z,
        _ => return Err(usage().into()),
    };
    Ok((axis, index.parse().map_err(|_| usage())?))
}

fn cmd_infer(a: InferArgs) -> Result<ExitCode> {
    let model = Model::load(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    if a.post_crf && model.mode != TrainMode::Unet {
        return Err(pcrf::Error::Usage("--post-crf needs a unet checkpoint".into()).into());
    }
    let params = a.crf.params();
    if a.post_crf {
        params.validate()?;
    }
    let slice = a.slice.as_deref().map(parse_slice).transpose()?;
    let ds = Dataset::load(&a.data)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (id, sample) in load_samples(&ds, a.split)? {
        let mut probs = model
            .predict(&sample.image)
            .with_context(|| format!("case {id} does not fit checkpoint {}", a.checkpoint.display()))?;
        if a.post_crf {
            probs = crf::crf_apply(a.crf_mode, &sample.image, &probs, &params)?;
        }
        let labels = probs.argmax();
        volume::write_array_file(&probs, &a.out.join(format!("case_{id}_prob.npy")))?;
        volume::write_array_file(&labels, &a.out.join(format!("case_{id}_pred.npy")))?;
        if let Some((axis, index)) = slice {
            let path = a.out.join(format!("case_{id}_slice.pgm"));
            volume::slice_to_image(&probs, axis, index, a.slice_channel, &path)?;
        }
        println!("case {id}");
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_list(name: &str, text: &str) -> Result<Vec<f64>> {
    let values: Vec<f64> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| pcrf::Error::Usage(format!("--{name}: '{s}' is not a number")))
        })
        .collect::<Result<_, _>>()?;
    if values.is_empty() {
        return Err(pcrf::Error::Usage(format!("--{name}: empty grid")).into());
    }
    Ok(values)
}

fn mean_dice(cases: &[(Volume, Volume, Volume)], mode: CrfMode, params: &CrfParams) -> Result<f64> {
    let mut total = 0.0;
    for (image, probs, labels) in cases {
        let refined = crf::crf_apply(mode, image, probs, params)?;
        let (a, b) = metrics::binarize_wmh(&refined.argmax(), labels)?;
        total += metrics::dice(&a, &b)?;
    }
    Ok(total / cases.len() as f64)
}

fn cmd_gridsearch(a: GridArgs) -> Result<ExitCode> {
    let axes = [
        parse_list("w-app", &a.w_app)?,
        parse_list("w-smooth", &a.w_smooth)?,
        parse_list("theta-alpha", &a.theta_alpha)?,
        parse_list("theta-beta", &a.theta_beta)?,
        parse_list("theta-gamma", &a.theta_gamma)?,
    ];
    let model = Model::load(&a.checkpoint)?;
    if model.mode != TrainMode::Unet {
        return Err(pcrf::Error::Usage("grid search needs a unet checkpoint".into()).into());
    }
    let ds = Dataset::load(&a.data)?;
    let cases: Vec<(Volume, Volume, Volume)> = load_samples(&ds, Split::Train)?
        .into_iter()
        .map(|(_, s)| {
            let probs = model.predict(&s.image)?;
            Ok((s.image, probs, s.labels))
        })
        .collect::<Result<_>>()?;
    if cases.is_empty() {
        bail!("the training split is empty");
    }

    let mut rows: Vec<([f64; 5], f64)> = Vec::new();
    for &w_app in &axes[0] {
        for &w_smooth in &axes[1] {
            for &theta_alpha in &axes[2] {
                for &theta_beta in &axes[3] {
                    for &theta_gamma in &axes[4] {
                        let params = CrfParams {
                            w_app,
                            w_smooth,
                            theta_alpha,
                            theta_beta,
                            theta_gamma,
                            iterations: a.iterations,
                        };
                        let score = mean_dice(&cases, a.crf_mode, &params)?;
                        println!("{:?} dice {score:.6}", params.trainables());
                        rows.push((params.trainables(), score));
                    }
                }
            }
        }
    }
    // First maximum in enumeration order wins ties.
    let best = rows
        .iter()
        .enumerate()
        .fold(0, |b, (i, r)| if r.1 > rows[b].1 { i } else { b });

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut csv = String::from("w_app,w_smooth,theta_alpha,theta_beta,theta_gamma,mean_dice,best\n");
    for (i, (p, score)) in rows.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{},{},{},{score},{}\n",
            p[0],
            p[1],
            p[2],
            p[3],
            p[4],
            u8::from(i == best)
        ));
    }
    fs::write(a.out.join("grid.csv"), csv)?;
    let p = rows[best].0;
    let best_text = format!(
        "# best mean training Dice {}\ncrf-mode = {}\nw-app = {}\nw-smooth = {}\ntheta-alpha = {}\ntheta-beta = {}\ntheta-gamma = {}\niterations = {}\n",
        rows[best].1, a.crf_mode, p[0], p[1], p[2], p[3], p[4], a.iterations
    );
    fs::write(a.out.join("best_params.txt"), &best_text)?;
    print!("{best_text}");
    Ok(ExitCode::SUCCESS)
}

fn method_of(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((name, dir)) => (name.to_string(), PathBuf::from(dir)),
        None => {
            let dir = PathBuf::from(spec);
            let name = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| spec.to_string());
            (name, dir)
        }
    }
}

fn evaluate_dir(ds: &Dataset, split: Split, dir: &Path, spacing: f64) -> Result<Vec<MetricsRow>> {
    let ids = ds.ids(split);
    let missing: Vec<&str> = ids
        .iter()
        .copied()
        .filter(|id| !dir.join(format!("case_{id}_pred.npy")).is_file())
        .collect();
    if !missing.is_empty() {
        bail!("{} lacks predictions for case(s): {}", dir.display(), missing.join(", "));
    }
    ids.into_iter()
        .map(|id| {
            let (_, truth) = ds.load_case(id)?;
            let pred = volume::read_array_file(&dir.join(format!("case_{id}_pred.npy")))?;
            if pred.dtype() != DType::U8 && pred.data().iter().any(|v| v.fract() != 0.0) {
                bail!("case {id}: predictions are not labels");
            }
            Ok(metrics::evaluate_case(id, &pred, &truth, spacing)?)
        })
        .collect()
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    let ds = Dataset::load(&a.data)?;
    let mut summaries = Vec::new();
    for spec in &a.pred {
        let (name, dir) = method_of(spec);
        let rows = evaluate_dir(&ds, a.split, &dir, a.spacing)?;
        if let Some(out) = &a.out {
            fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            fs::write(out.join(format!("metrics_{name}.csv")), metrics::to_csv(&rows))?;
        }
        summaries.push((name, metrics::evaluate_set(&rows)?));
    }
    print!("{}", metrics::render_table(&summaries));
    Ok(ExitCode::SUCCESS)
}

fn cmd_check(a: CheckArgs) -> Result<ExitCode> {
    let opts = CheckOptions {
        seed: a.seed,
        inject_sign_fault: a.inject_fault,
    };
    let lines = verify::run_all(&opts)?;
    for line in &lines {
        println!("{line}");
    }
    Ok(if lines.iter().all(|l| l.passed()) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
