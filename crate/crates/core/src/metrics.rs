//! Segmentation metrics for the lesion class: Dice, 95th-percentile
//! Hausdorff distance, absolute volume difference, and voxel-wise false
//! positives and negatives, plus mean/std aggregation over a set of cases.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::synth::LESION;
use crate::volume::Volume;

/// Binary voxel mask on a 3D grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub dims: [usize; 3],
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::Shape(format!("mask of {} voxels for grid {dims:?}", data.len())));
        }
        Ok(Mask { dims, data })
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    fn coords(&self, i: usize) -> [usize; 3] {
        let [_, ny, nz] = self.dims;
        [i / (ny * nz), (i / nz) % ny, i % nz]
    }

    /// Positive voxels with a negative face neighbor or touching the border.
    pub fn boundary(&self) -> Vec<[usize; 3]> {
        let dims = self.dims;
        let at = |p: [usize; 3]| self.data[(p[0] * dims[1] + p[1]) * dims[2] + p[2]];
        (0..self.data.len())
            .filter(|&i| self.data[i])
            .map(|i| self.coords(i))
            .filter(|&p| {
                (0..3).any(|a| {
                    if p[a] == 0 || p[a] + 1 == dims[a] {
                        return true;
                    }
                    let (mut lo, mut hi) = (p, p);
                    lo[a] -= 1;
                    hi[a] += 1;
                    !at(lo) || !at(hi)
                })
            })
            .collect()
    }
}

fn check_pair(a: &Mask, b: &Mask) -> Result<()> {
    if a.dims != b.dims || a.data.len() != b.data.len() {
        return Err(Error::Shape(format!("mask grids differ: {:?} vs {:?}", a.dims, b.dims)));
    }
    Ok(())
}

/// Lesion masks (`label == 1`) of prediction and truth; every other class
/// counts as negative.
pub fn binarize_wmh(pred: &Volume, truth: &Volume) -> Result<(Mask, Mask)> {
    if pred.dims() != truth.dims() || pred.channels() != 1 || truth.channels() != 1 {
        return Err(Error::Shape(format!(
            "label volumes differ: {:?}x{} vs {:?}x{}",
            pred.dims(),
            pred.channels(),
            truth.dims(),
            truth.channels()
        )));
    }
    let mask = |v: &Volume| Mask {
        dims: v.dims(),
        data: v.data().iter().map(|&l| l == LESION as f64).collect(),
    };
    Ok((mask(pred), mask(truth)))
}

fn intersection(a: &Mask, b: &Mask) -> usize {
    a.data.iter().zip(&b.data).filter(|(x, y)| **x && **y).count()
}

/// `2|A∩B| / (|A| + |B|)`, and 1 when both masks are empty.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    check_pair(a, b)?;
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * intersection(a, b) as f64 / total as f64)
}

/// Linear-interpolation percentile of unsorted values, `q` in `[0, 100]`.
pub fn percentile(values: &mut [f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Some(values[lo] + (values[hi] - values[lo]) * (rank - lo as f64))
}

fn nearest_distances(from: &[[usize; 3]], to: &[[usize; 3]], spacing: f64) -> Vec<f64> {
    from.par_iter()
        .map(|p| {
            let best = to
                .iter()
                .map(|q| {
                    (0..3)
                        .map(|a| {
                            let d = p[a] as f64 - q[a] as f64;
                            d * d
                        })
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min);
            best.sqrt() * spacing
        })
        .collect()
}

/// 95th percentile of the pooled boundary-to-boundary nearest distances in
/// both directions; `None` when either mask is empty.
pub fn hausdorff95(a: &Mask, b: &Mask, spacing: f64) -> Result<Option<f64>> {
    check_pair(a, b)?;
    if !(spacing > 0.0) {
        return Err(Error::Parameter(format!("spacing must be positive, got {spacing}")));
    }
    let (ba, bb) = (a.boundary(), b.boundary());
    if ba.is_empty() || bb.is_empty() {
        return Ok(None);
    }
    let mut pooled = nearest_distances(&ba, &bb, spacing);
    pooled.extend(nearest_distances(&bb, &ba, spacing));
    Ok(percentile(&mut pooled, 95.0))
}

/// `100 |(|A| - |B|)| / |B|` with `B` the truth; `None` for empty truth.
pub fn avd(pred: &Mask, truth: &Mask) -> Result<Option<f64>> {
    check_pair(pred, truth)?;
    let t = truth.count();
    if t == 0 {
        return Ok(None);
    }
    Ok(Some(100.0 * (pred.count() as f64 - t as f64).abs() / t as f64))
}

/// `(|A \ B|, |B \ A|)`.
pub fn fp_fn(pred: &Mask, truth: &Mask) -> Result<(usize, usize)> {
    check_pair(pred, truth)?;
    let mut fp = 0;
    let mut fn_ = 0;
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        fp += usize::from(p && !t);
        fn_ += usize::from(t && !p);
    }
    Ok((fp, fn_))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub case: String,
    pub dsc: f64,
    pub h95: Option<f64>,
    pub avd: Option<f64>,
    pub fp: usize,
    pub fn_: usize,
}

/// All metrics of one case from its label volumes.
pub fn evaluate_case(case: &str, pred: &Volume, truth: &Volume, spacing: f64) -> Result<MetricsRow> {
    let (a, b) = binarize_wmh(pred, truth)?;
    let (fp, fn_) = fp_fn(&a, &b)?;
    Ok(MetricsRow {
        case: case.to_string(),
        dsc: dice(&a, &b)?,
        h95: hausdorff95(&a, &b, spacing)?,
        avd: avd(&a, &b)?,
        fp,
        fn_,
    })
}

/// Mean and population standard deviation of the defined values of a
/// metric, with the number of excluded (undefined) cases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    pub excluded: usize,
}

impl Stat {
    fn of(values: impl Iterator<Item = Option<f64>>) -> Stat {
        let mut defined = Vec::new();
        let mut excluded = 0;
        for v in values {
            match v {
                Some(x) => defined.push(x),
                None => excluded += 1,
            }
        }
        let n = defined.len();
        if n == 0 {
            return Stat {
                mean: f64::NAN,
                std: f64::NAN,
                n,
                excluded,
            };
        }
        let mean = defined.iter().sum::<f64>() / n as f64;
        let var = defined.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        Stat {
            mean,
            std: var.sqrt(),
            n,
            excluded,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub dsc: Stat,
    pub h95: Stat,
    pub avd: Stat,
    pub fp: Stat,
    pub fn_: Stat,
}

pub fn evaluate_set(rows: &[MetricsRow]) -> Result<Summary> {
    if rows.is_empty() {
        return Err(Error::Usage("no cases to evaluate".into()));
    }
    Ok(Summary {
        dsc: Stat::of(rows.iter().map(|r| Some(r.dsc))),
        h95: Stat::of(rows.iter().map(|r| r.h95)),
        avd: Stat::of(rows.iter().map(|r| r.avd)),
        fp: Stat::of(rows.iter().map(|r| Some(r.fp as f64))),
        fn_: Stat::of(rows.iter().map(|r| Some(r.fn_ as f64))),
    })
}

const TABLE_COLUMNS: [&str; 6] = ["Method", "DSC(std)", "H95(std)(mm)", "AVD(std)(%)", "FP(std)", "FN(std)"];

/// Aligned plain-text table with one row per `(method, summary)`.
pub fn render_table(entries: &[(String, Summary)]) -> String {
    let cell = |s: &Stat, digits: usize| {
        if s.n == 0 {
            "NA".to_string()
        } else {
            format!("{:.digits$}({:.digits$})", s.mean, s.std)
        }
    };
    let mut rows: Vec<Vec<String>> = vec![TABLE_COLUMNS.iter().map(|s| s.to_string()).collect()];
    for (name, s) in entries {
        rows.push(vec![
            name.clone(),
            cell(&s.dsc, 3),
            cell(&s.h95, 2),
            cell(&s.avd, 2),
            cell(&s.fp, 1),
            cell(&s.fn_, 1),
        ]);
    }
    let widths: Vec<usize> = (0..TABLE_COLUMNS.len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::from("# mean(std) over cases, population std; undefined H95/AVD excluded\n");
    for row in &rows {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (v, w))| if i == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    for (name, s) in entries {
        if s.h95.excluded > 0 || s.avd.excluded > 0 {
            let _ = writeln!(
                out,
                "# {name}: excluded {} case(s) from H95, {} from AVD",
                s.h95.excluded, s.avd.excluded
            );
        }
    }
    out
}

pub const CSV_HEADER: &str = "case,dsc,h95,avd,fp,fn";

pub fn to_csv(rows: &[MetricsRow]) -> String {
    let opt = |v: Option<f64>| v.map_or("NA".to_string(), |x| x.to_string());
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.case,
            r.dsc,
            opt(r.h95),
            opt(r.avd),
            r.fp,
            r.fn_
        );
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(Error::Format(format!("metrics CSV must start with '{CSV_HEADER}'")));
    }
    let bad = |line: &str| Error::Format(format!("bad metrics line '{line}'"));
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(line));
        }
        let opt = |s: &str| -> Result<Option<f64>> {
            if s == "NA" {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(line))
            }
        };
        rows.push(MetricsRow {
            case: f[0].to_string(),
            dsc: f[1].parse().map_err(|_| bad(line))?,
            h95: opt(f[2])?,
            avd: opt(f[3])?,
            fp: f[4].parse().map_err(|_| bad(line))?,
            fn_: f[5].parse().map_err(|_| bad(line))?,
        });
    }
    Ok(rows)
}
