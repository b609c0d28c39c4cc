//! Dense voxel volumes with a trailing channel axis.
//!
//! Data is stored row-major over `(x, y, z, c)`, so the channel vector of a
//! voxel is contiguous. All arithmetic happens in `f64`; the dtype tag only
//! records how the volume is serialized.

pub mod npy;

use std::path::Path;

use crate::error::{Error, Result};

pub use npy::DType;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    channels: usize,
    dtype: DType,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: [usize; 3], channels: usize, fill: f64) -> Result<Self> {
        check_dims(dims, channels)?;
        let len = dims.iter().product::<usize>() * channels;
        Ok(Volume {
            dims,
            channels,
            dtype: DType::F64,
            data: vec![fill; len],
        })
    }

    pub fn from_vec(dims: [usize; 3], channels: usize, dtype: DType, data: Vec<f64>) -> Result<Self> {
        check_dims(dims, channels)?;
        let len = dims.iter().product::<usize>() * channels;
        if data.len() != len {
            return Err(Error::Shape(format!(
                "{dims:?}x{channels} volume needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Volume {
            dims,
            channels,
            dtype,
            data,
        })
    }

    /// A single-channel `uint8` volume of class labels.
    pub fn from_labels(dims: [usize; 3], labels: &[u8]) -> Result<Self> {
        Self::from_vec(dims, 1, DType::U8, labels.iter().map(|&l| l as f64).collect())
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn with_dtype(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        self
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn voxel_index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    #[inline]
    pub fn voxel_coords(&self, index: usize) -> [usize; 3] {
        let z = index % self.dims[2];
        let rest = index / self.dims[2];
        [rest / self.dims[1], rest % self.dims[1], z]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize, c: usize) -> f64 {
        self.data[self.voxel_index(x, y, z) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, c: usize, value: f64) {
        let i = self.voxel_index(x, y, z) * self.channels + c;
        self.data[i] = value;
    }

    /// The channel vector of voxel `index` (flat voxel order).
    #[inline]
    pub fn voxel(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn same_grid(&self, other: &Volume) -> bool {
        self.dims == other.dims
    }

    /// Label values of a single-channel volume, validated against `classes`.
    pub fn labels(&self, classes: usize) -> Result<Vec<u8>> {
        if self.channels != 1 {
            return Err(Error::Shape(format!(
                "label volume must have one channel, has {}",
                self.channels
            )));
        }
        self.data
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && (v as usize) < classes {
                    Ok(v as u8)
                } else {
                    Err(Error::Label(format!("label {v} outside 0..{classes}")))
                }
            })
            .collect()
    }

    /// Per-voxel index of the largest channel; ties go to the lowest index.
    pub fn argmax(&self) -> Volume {
        let labels: Vec<f64> = self
            .data
            .chunks_exact(self.channels)
            .map(|row| {
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best as f64
            })
            .collect();
        Volume {
            dims: self.dims,
            channels: 1,
            dtype: DType::U8,
            data: labels,
        }
    }

    /// Reverses the voxel order along `axis`.
    pub fn flipped(&self, axis: Axis) -> Volume {
        let [nx, ny, nz] = self.dims;
        let mut out = self.clone();
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    let (sx, sy, sz) = match axis {
                        Axis::X => (nx - 1 - x, y, z),
                        Axis::Y => (x, ny - 1 - y, z),
                        Axis::Z => (x, y, nz - 1 - z),
                    };
                    let dst = self.voxel_index(x, y, z) * self.channels;
                    let src = self.voxel_index(sx, sy, sz) * self.channels;
                    out.data[dst..dst + self.channels]
                        .copy_from_slice(&self.data[src..src + self.channels]);
                }
            }
        }
        out
    }
}

fn check_dims(dims: [usize; 3], channels: usize) -> Result<()> {
    if dims.contains(&0) || channels == 0 {
        return Err(Error::Dimension(format!(
            "volume dims {dims:?} with {channels} channels must all be >= 1"
        )));
    }
    Ok(())
}

pub fn read_array_file(path: &Path) -> Result<Volume> {
    let array = npy::read(path)?;
    let (dims, channels) = match array.shape.as_slice() {
        &[x, y, z] => ([x, y, z], 1),
        &[x, y, z, c] => ([x, y, z], c),
        other => {
            return Err(Error::Format(format!(
                "expected a rank 3 or 4 array, found shape {other:?}"
            )))
        }
    };
    Volume::from_vec(dims, channels, array.dtype, array.data)
}

/// Writes `v` as NPY v1.0 using its dtype tag; single-channel volumes are
/// stored as rank-3 arrays.
pub fn write_array_file(v: &Volume, path: &Path) -> Result<()> {
    let [x, y, z] = v.dims;
    let shape = if v.channels == 1 {
        vec![x, y, z]
    } else {
        vec![x, y, z, v.channels]
    };
    let array = npy::NpyArray::new(shape, v.dtype, v.data.clone())?;
    npy::write(&array, path)
}

/// Channel-wise softmax with max subtraction.
pub fn softmax_channels(v: &Volume) -> Result<Volume> {
    if v.channels < 2 {
        return Err(Error::Shape("softmax needs at least two channels".into()));
    }
    let mut data = v.data.clone();
    for (i, row) in data.chunks_exact_mut(v.channels).enumerate() {
        if row.iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric(format!("NaN logit at voxel {i}")));
        }
        softmax_in_place(row);
    }
    Ok(Volume {
        dims: v.dims,
        channels: v.channels,
        dtype: DType::F64,
        data,
    })
}

#[inline]
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Writes one slice of one channel as a binary 8-bit PGM.
///
/// Image columns follow the first remaining axis and rows the second, e.g.
/// an `Axis::Z` slice is `nx` wide and `ny` tall. Values are rescaled from
/// the slice's own `[min, max]` to `[0, 255]`, rounding half away from zero.
pub fn slice_to_image(v: &Volume, axis: Axis, index: usize, channel: usize, path: &Path) -> Result<()> {
    let bytes = slice_to_pgm(v, axis, index, channel)?;
    npy::write_atomic(path, &bytes)
}

pub fn slice_to_pgm(v: &Volume, axis: Axis, index: usize, channel: usize) -> Result<Vec<u8>> {
    let [nx, ny, nz] = v.dims;
    let extent = match axis {
        Axis::X => nx,
        Axis::Y => ny,
        Axis::Z => nz,
    };
    if index >= extent {
        return Err(Error::Bounds(format!(
            "slice {index} outside axis extent {extent}"
        )));
    }
    if channel >= v.channels {
        return Err(Error::Bounds(format!(
            "channel {channel} outside 0..{}",
            v.channels
        )));
    }
    let (width, height) = match axis {
        Axis::X => (ny, nz),
        Axis::Y => (nx, nz),
        Axis::Z => (nx, ny),
    };
    let mut values = Vec::with_capacity(width * height);
    for row in 0..height {
        for col in 0..width {
            let (x, y, z) = match axis {
                Axis::X => (index, col, row),
                Axis::Y => (col, index, row),
                Axis::Z => (col, row, index),
            };
            values.push(v.get(x, y, z, channel));
        }
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;

    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&val| {
        if range > 0.0 && range.is_finite() {
            ((val - min) / range * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    Ok(out)
}
