//! Seeded synthetic volumes with three classes: background, lesions and
//! distractors. Lesions and distractors are axis-aligned ellipsoids whose
//! intensity distributions overlap, so intensity alone cannot tell them
//! apart.
//!
//! Every case draws from a ChaCha8 stream keyed by the dataset seed, with
//! the case seed selecting the stream, so cases are independent and
//! reproducible on any platform.

use std::fmt;
use std::fs;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{read_array_file, write_array_file, DType, Volume};

pub const CLASSES: usize = 3;
pub const BACKGROUND: u8 = 0;
pub const LESION: u8 = 1;
pub const DISTRACTOR: u8 = 2;
pub const MANIFEST: &str = "dataset.txt";
pub const RNG_NAME: &str = "ChaCha8 (rand_chacha), seed_from_u64(seed), stream = case id";

const MAX_PLACEMENT_TRIES: usize = 1000;

/// Intensity distribution of one object class: each object draws a level
/// from `N(mean, sigma)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intensity {
    pub mean: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub shape: [usize; 3],
    pub lesion_count: RangeInclusive<usize>,
    pub lesion_radius: RangeInclusive<usize>,
    pub distractor_count: RangeInclusive<usize>,
    pub distractor_radius: RangeInclusive<usize>,
    pub lesion: Intensity,
    pub distractor: Intensity,
    pub background: Intensity,
    /// Per-voxel additive Gaussian noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            shape: [32, 32, 32],
            lesion_count: 2..=4,
            lesion_radius: 3..=5,
            distractor_count: 1..=3,
            distractor_radius: 3..=5,
            lesion: Intensity { mean: 1.0, sigma: 0.2 },
            distractor: Intensity { mean: 1.1, sigma: 0.2 },
            background: Intensity { mean: 0.0, sigma: 0.05 },
            noise_sigma: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shape.contains(&0) {
            return Err(Error::Dimension(format!("volume shape {:?} has a zero axis", self.shape)));
        }
        let min_axis = *self.shape.iter().min().unwrap();
        for (name, r) in [("lesion", &self.lesion_radius), ("distractor", &self.distractor_radius)] {
            if r.is_empty() || *r.start() < 1 {
                return Err(Error::Parameter(format!("{name} radius range must start at >= 1")));
            }
            if 2 * r.end() + 1 > min_axis {
                return Err(Error::Parameter(format!(
                    "{name} radius {} does not fit in shape {:?}",
                    r.end(),
                    self.shape
                )));
            }
        }
        for (name, r) in [("lesion", &self.lesion_count), ("distractor", &self.distractor_count)] {
            if r.is_empty() {
                return Err(Error::Parameter(format!("{name} count range is empty")));
            }
        }
        let sigmas = [
            self.lesion.sigma,
            self.distractor.sigma,
            self.background.sigma,
            self.noise_sigma,
        ];
        if sigmas.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::Parameter("standard deviations must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Header lines echoing the configuration, each starting with `#`.
    fn echo(&self) -> String {
        let range = |r: &RangeInclusive<usize>| format!("{}..={}", r.start(), r.end());
        let dist = |i: &Intensity| format!("mean {} sigma {}", i.mean, i.sigma);
        format!(
            "# rng = {RNG_NAME}\n# seed = {}\n# shape = {}x{}x{}\n# lesion_count = {}\n# lesion_radius = {}\n# distractor_count = {}\n# distractor_radius = {}\n# lesion_intensity = {}\n# distractor_intensity = {}\n# background_intensity = {}\n# noise_sigma = {}\n",
            self.seed,
            self.shape[0],
            self.shape[1],
            self.shape[2],
            range(&self.lesion_count),
            range(&self.lesion_radius),
            range(&self.distractor_count),
            range(&self.distractor_radius),
            dist(&self.lesion),
            dist(&self.distractor),
            dist(&self.background),
            self.noise_sigma
        )
    }
}

/// Axis-aligned ellipsoid with integer center and semi-axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ellipsoid {
    pub center: [usize; 3],
    pub radii: [usize; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3)
            .map(|a| {
                let d = (p[a] as f64 - self.center[a] as f64) / self.radii[a] as f64;
                d * d
            })
            .sum::<f64>()
            <= 1.0
    }

    fn voxels(&self, shape: [usize; 3]) -> impl Iterator<Item = [usize; 3]> + '_ {
        let lo = |a: usize| self.center[a].saturating_sub(self.radii[a]);
        let hi = move |a: usize| (self.center[a] + self.radii[a]).min(shape[a] - 1);
        (lo(0)..=hi(0))
            .flat_map(move |x| (lo(1)..=hi(1)).flat_map(move |y| (lo(2)..=hi(2)).map(move |z| [x, y, z])))
            .filter(|p| self.contains(*p))
    }
}

/// One generated case.
#[derive(Debug, Clone)]
pub struct Case {
    pub image: Volume,
    pub labels: Volume,
    pub lesions: Vec<Ellipsoid>,
    pub distractors: Vec<Ellipsoid>,
}

pub fn generate_case(cfg: &SynthConfig, case_seed: u64) -> Result<Case> {
    cfg.validate()?;
    let shape = cfg.shape;
    let n: usize = shape.iter().product();
    let index = |p: [usize; 3]| (p[0] * shape[1] + p[1]) * shape[2] + p[2];

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(case_seed);
    let normal = |i: &Intensity| Normal::new(i.mean, i.sigma).map_err(|e| Error::Parameter(e.to_string()));

    let mut labels = vec![BACKGROUND; n];
    let mut image = vec![normal(&cfg.background)?.sample(&mut rng); n];
    let mut lesions = Vec::new();
    let mut distractors = Vec::new();

    let plan = [
        (LESION, &cfg.lesion_count, &cfg.lesion_radius, &cfg.lesion),
        (DISTRACTOR, &cfg.distractor_count, &cfg.distractor_radius, &cfg.distractor),
    ];
    for (label, count, radius, intensity) in plan {
        let count = rng.random_range(count.clone());
        let level = normal(intensity)?;
        for k in 0..count {
            let shape_ok = place(&mut rng, shape, radius, &labels, index).ok_or_else(|| {
                Error::Placement(format!(
                    "could not place object {} of class {label} after {MAX_PLACEMENT_TRIES} tries",
                    k + 1
                ))
            })?;
            let value = level.sample(&mut rng);
            for p in shape_ok.voxels(shape) {
                labels[index(p)] = label;
                image[index(p)] = value;
            }
            if label == LESION {
                lesions.push(shape_ok);
            } else {
                distractors.push(shape_ok);
            }
        }
    }

    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Parameter(e.to_string()))?;
    for v in image.iter_mut() {
        *v = f64::from((*v + noise.sample(&mut rng)) as f32);
    }

    Ok(Case {
        image: Volume::from_vec(shape, 1, DType::F32, image)?,
        labels: Volume::from_labels(shape, &labels)?,
        lesions,
        distractors,
    })
}

fn place(
    rng: &mut ChaCha8Rng,
    shape: [usize; 3],
    radius: &RangeInclusive<usize>,
    labels: &[u8],
    index: impl Fn([usize; 3]) -> usize,
) -> Option<Ellipsoid> {
    for _ in 0..MAX_PLACEMENT_TRIES {
        let radii = [0; 3].map(|_| rng.random_range(radius.clone()));
        let mut center = [0; 3];
        for a in 0..3 {
            center[a] = rng.random_range(radii[a]..shape[a] - radii[a]);
        }
        let e = Ellipsoid { center, radii };
        if e.voxels(shape).all(|p| labels[index(p)] == BACKGROUND) {
            return Some(e);
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Format(format!("unknown split '{s}'")))
    }
}

/// Split assignment read from a dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub root: PathBuf,
    pub cases: Vec<(Split, String)>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut cases = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (split, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("{}:{}: expected 'split<TAB>case'", path.display(), no + 1)))?;
            cases.push((split.parse()?, id.trim().to_string()));
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            cases,
        })
    }

    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.cases
            .iter()
            .filter(|(s, _)| *s == split)
            .map(|(_, id)| id.as_str())
            .collect()
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.root.join(format!("case_{id}_img.npy"))
    }

    pub fn label_path(&self, id: &str) -> PathBuf {
        self.root.join(format!("case_{id}_lbl.npy"))
    }

    pub fn load_case(&self, id: &str) -> Result<(Volume, Volume)> {
        let image = read_array_file(&self.image_path(id))?;
        let labels = read_array_file(&self.label_path(id))?;
        if !image.same_grid(&labels) || labels.channels() != 1 {
            return Err(Error::Shape(format!("case {id}: image and labels disagree")));
        }
        labels.labels(CLASSES)?;
        Ok((image, labels))
    }
}

pub fn case_id(index: usize) -> String {
    format!("{index:03}")
}

/// Generates `n_train + n_val + n_test` cases into `out_dir` and writes the
/// manifest. Case `k` (in split order) uses case seed `k`.
pub fn generate_dataset(
    cfg: &SynthConfig,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    out_dir: &Path,
) -> Result<PathBuf> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let splits: Vec<Split> = [(Split::Train, n_train), (Split::Val, n_val), (Split::Test, n_test)]
        .into_iter()
        .flat_map(|(s, k)| std::iter::repeat_n(s, k))
        .collect();

    let dataset = Dataset {
        root: out_dir.to_path_buf(),
        cases: splits.iter().enumerate().map(|(i, s)| (*s, case_id(i))).collect(),
    };
    dataset
        .cases
        .par_iter()
        .enumerate()
        .try_for_each(|(i, (_, id))| -> Result<()> {
            let case = generate_case(cfg, i as u64)?;
            write_array_file(&case.image, &dataset.image_path(id))?;
            write_array_file(&case.labels, &dataset.label_path(id))
        })?;

    let mut manifest = String::from("# synthetic lesion dataset\n");
    manifest.push_str(&cfg.echo());
    for split in Split::ALL {
        let ids = dataset.ids(split);
        manifest.push_str(&format!("# split {split}: {} cases\n", ids.len()));
        for id in ids {
            manifest.push_str(&format!("{split}\t{id}\n"));
        }
    }
    let path = out_dir.join(MANIFEST);
    crate::volume::npy::write_atomic(&path, manifest.as_bytes())?;
    Ok(path)
}
