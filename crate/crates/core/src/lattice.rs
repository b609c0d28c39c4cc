//! Permutohedral-lattice Gaussian filtering (splat, blur, slice).
//!
//! Features are expected to be pre-divided by their bandwidths; the lattice
//! then approximates `v'_i = sum_j exp(-|f_i - f_j|^2 / 2) v_j` up to a global
//! scale. Each input point is embedded in the hyperplane `sum x = 0` of
//! `R^{d+1}`, located inside a simplex of the lattice `A*_d`, and splatted
//! onto the simplex vertices with barycentric weights.
//!
//! The blur step applies a `[1, 2, 1] / 4` kernel along each of the `d + 1`
//! lattice axes. Sequential axis blurs over a sparse lattice do not commute,
//! so the operator used here averages the forward (`0..=d`) and reverse
//! (`d..=0`) axis orders, which makes the filter exactly self-adjoint.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Largest supported feature dimension.
pub const MAX_FEATURE_DIM: usize = 16;

/// Denominators at or below this value mean a point has no usable neighbors.
pub const DEGENERATE_DENOMINATOR: f64 = 1e-12;

const NONE: u32 = u32::MAX;

/// `n` feature vectors of dimension `d`, stored point-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    dim: usize,
    len: usize,
    values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(dim: usize, len: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || len == 0 {
            return Err(Error::Dimension(format!(
                "feature matrix needs d >= 1 and n >= 1, got d={dim}, n={len}"
            )));
        }
        if values.len() != dim * len {
            return Err(Error::Shape(format!(
                "{len} points of dimension {dim} need {} values, got {}",
                dim * len,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite feature at point {}, component {}",
                pos / dim,
                pos % dim
            )));
        }
        Ok(FeatureMatrix { dim, len, values })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Open-addressing table from lattice keys to dense vertex indices.
/// Indices are assigned in insertion order.
struct KeyTable {
    width: usize,
    keys: Vec<i16>,
    slots: Vec<u32>,
}

impl KeyTable {
    fn new(width: usize, expected: usize) -> Self {
        let capacity = (expected * 2).next_power_of_two().max(16);
        KeyTable {
            width,
            keys: Vec::with_capacity(expected * width),
            slots: vec![NONE; capacity],
        }
    }

    fn len(&self) -> usize {
        self.keys.len() / self.width
    }

    fn key(&self, index: u32) -> &[i16] {
        let i = index as usize * self.width;
        &self.keys[i..i + self.width]
    }

    #[inline]
    fn hash(key: &[i16]) -> usize {
        let mut h: u64 = 0;
        for &k in key {
            h = (h.wrapping_add(k as i64 as u64)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        }
        (h ^ (h >> 29)) as usize
    }

    fn find(&self, key: &[i16]) -> Option<u32> {
        let mask = self.slots.len() - 1;
        let mut slot = Self::hash(key) & mask;
        loop {
            let index = self.slots[slot];
            if index == NONE {
                return None;
            }
            if self.key(index) == key {
                return Some(index);
            }
            slot = (slot + 1) & mask;
        }
    }

    fn find_or_insert(&mut self, key: &[i16]) -> u32 {
        if (self.len() + 1) * 2 > self.slots.len() {
            self.grow();
        }
        let mask = self.slots.len() - 1;
        let mut slot = Self::hash(key) & mask;
        loop {
            let index = self.slots[slot];
            if index == NONE {
                let new_index = self.len() as u32;
                self.keys.extend_from_slice(key);
                self.slots[slot] = new_index;
                return new_index;
            }
            if self.key(index) == key {
                return index;
            }
            slot = (slot + 1) & mask;
        }
    }

    fn grow(&mut self) {
        let capacity = self.slots.len() * 2;
        let mask = capacity - 1;
        let mut slots = vec![NONE; capacity];
        for index in 0..self.len() as u32 {
            let mut slot = Self::hash(self.key(index)) & mask;
            while slots[slot] != NONE {
                slot = (slot + 1) & mask;
            }
            slots[slot] = index;
        }
        self.slots = slots;
    }
}

#[derive(Debug, Clone)]
pub struct Lattice {
    dim: usize,
    n_points: usize,
    n_vertices: usize,
    /// `d + 1` coordinates per lattice vertex.
    keys: Vec<i16>,
    /// `d + 1` enclosing-simplex vertex indices per input point.
    offsets: Vec<u32>,
    /// Barycentric weights matching `offsets`.
    weights: Vec<f64>,
    /// Per axis, per vertex: `[minus, plus]` neighbor indices or `NONE`.
    neighbors: Vec<[u32; 2]>,
    /// `e_i^T F e_i` for every input point.
    self_response: Vec<f64>,
}

impl Lattice {
    pub fn build(features: &FeatureMatrix) -> Result<Self> {
        let d = features.dim();
        if d > MAX_FEATURE_DIM {
            return Err(Error::Dimension(format!(
                "feature dimension {d} exceeds {MAX_FEATURE_DIM}"
            )));
        }
        let d1 = d + 1;
        let limit = 30000.0 / d1 as f64;
        if let Some(v) = features.values().iter().find(|v| v.abs() > limit) {
            return Err(Error::Numeric(format!(
                "scaled feature magnitude {v} exceeds lattice key range +-{limit:.1}"
            )));
        }

        let n = features.len();
        let inv_std = (2.0f64 / 3.0).sqrt() * d1 as f64;
        let scale: Vec<f64> = (0..d)
            .map(|i| inv_std / (((i + 1) * (i + 2)) as f64).sqrt())
            .collect();

        let mut table = KeyTable::new(d1, n * d1 / 2 + 16);
        let mut offsets = Vec::with_capacity(n * d1);
        let mut weights = Vec::with_capacity(n * d1);
        // Axis moved by the step from simplex vertex r to r + 1, per point.
        let mut step_axes: Vec<u8> = Vec::with_capacity(n * d);

        let mut elevated = vec![0.0f64; d1];
        let mut rem0 = vec![0i32; d1];
        let mut rank = vec![0i32; d1];
        let mut bary = vec![0.0f64; d + 2];
        let mut key = vec![0i16; d1];

        for i in 0..n {
            let f = features.point(i);

            // Elevate onto the hyperplane sum(x) = 0.
            let mut sm = 0.0;
            for j in (1..=d).rev() {
                let cf = f[j - 1] * scale[j - 1];
                elevated[j] = sm - j as f64 * cf;
                sm += cf;
            }
            elevated[0] = sm;

            // Nearest remainder-0 lattice point.
            let down_factor = 1.0 / d1 as f64;
            let mut sum = 0i32;
            for k in 0..d1 {
                let v = elevated[k] * down_factor;
                let up = v.ceil() * d1 as f64;
                let down = v.floor() * d1 as f64;
                rem0[k] = if up - elevated[k] < elevated[k] - down {
                    up as i32
                } else {
                    down as i32
                };
                sum += rem0[k];
            }
            sum /= d1 as i32;

            // Rank the differential to find the enclosing simplex.
            rank.iter_mut().for_each(|r| *r = 0);
            for a in 0..d {
                for b in a + 1..d1 {
                    if elevated[a] - (rem0[a] as f64) < elevated[b] - (rem0[b] as f64) {
                        rank[a] += 1;
                    } else {
                        rank[b] += 1;
                    }
                }
            }
            let d1i = d1 as i32;
            if sum > 0 {
                for k in 0..d1 {
                    if rank[k] >= d1i - sum {
                        rem0[k] -= d1i;
                        rank[k] += sum - d1i;
                    } else {
                        rank[k] += sum;
                    }
                }
            } else if sum < 0 {
                for k in 0..d1 {
                    if rank[k] < -sum {
                        rem0[k] += d1i;
                        rank[k] += d1i + sum;
                    } else {
                        rank[k] += sum;
                    }
                }
            }

            // Barycentric coordinates.
            bary.iter_mut().for_each(|b| *b = 0.0);
            for k in 0..d1 {
                let v = (elevated[k] - rem0[k] as f64) * down_factor;
                let r = (d as i32 - rank[k]) as usize;
                bary[r] += v;
                bary[r + 1] -= v;
            }
            bary[0] += 1.0 + bary[d1];

            for r in 0..d1 {
                for k in 0..d1 {
                    let canonical = if rank[k] as usize <= d - r {
                        r as i32
                    } else {
                        r as i32 - d1i
                    };
                    key[k] = i16::try_from(rem0[k] + canonical).map_err(|_| {
                        Error::Numeric(format!("lattice key overflow at point {i}"))
                    })?;
                }
                offsets.push(table.find_or_insert(&key));
                weights.push(bary[r]);
            }
            for r in 0..d {
                let target = (d - r) as i32;
                let axis = rank.iter().position(|&rk| rk == target).unwrap();
                step_axes.push(axis as u8);
            }
        }

        let n_vertices = table.len();
        let mut neighbors = vec![[NONE; 2]; d1 * n_vertices];
        let mut probe = vec![0i16; d1];
        for axis in 0..d1 {
            for v in 0..n_vertices as u32 {
                let base = table.key(v);
                let mut entry = [NONE; 2];
                for (slot, sign) in [(0usize, -1i32), (1, 1)] {
                    let mut ok = true;
                    for k in 0..d1 {
                        let delta = if k == axis { -sign * d as i32 } else { sign };
                        match i16::try_from(base[k] as i32 + delta) {
                            Ok(c) => probe[k] = c,
                            Err(_) => ok = false,
                        }
                    }
                    if ok {
                        entry[slot] = table.find(&probe).unwrap_or(NONE);
                    }
                }
                neighbors[axis * n_vertices + v as usize] = entry;
            }
        }

        let mut lattice = Lattice {
            dim: d,
            n_points: n,
            n_vertices,
            keys: table.keys,
            offsets,
            weights,
            neighbors,
            self_response: Vec::new(),
        };
        lattice.self_response = (0..n)
            .map(|i| lattice.point_self_response(i, &step_axes[i * d..(i + 1) * d]))
            .collect();
        Ok(lattice)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn vertex_key(&self, vertex: usize) -> &[i16] {
        let d1 = self.dim + 1;
        &self.keys[vertex * d1..(vertex + 1) * d1]
    }

    /// Enclosing simplex vertex indices of input point `i`.
    pub fn point_vertices(&self, i: usize) -> &[u32] {
        let d1 = self.dim + 1;
        &self.offsets[i * d1..(i + 1) * d1]
    }

    /// Barycentric weights of input point `i`.
    pub fn point_weights(&self, i: usize) -> &[f64] {
        let d1 = self.dim + 1;
        &self.weights[i * d1..(i + 1) * d1]
    }

    /// The filter's response at point `i` to a unit impulse at point `i`.
    pub fn self_response(&self) -> &[f64] {
        &self.self_response
    }

    #[inline]
    fn neighbor(&self, axis: usize, vertex: u32, plus: bool) -> u32 {
        self.neighbors[axis * self.n_vertices + vertex as usize][plus as usize]
    }

    /// Weight of the forward-order blur path from `start` that moves by
    /// `steps[axis]` (-1, 0, +1) along each axis, or 0 if it leaves the lattice.
    fn path_weight(&self, start: u32, steps: &[i8]) -> f64 {
        let mut vertex = start;
        let mut weight = 1.0;
        for (axis, &step) in steps.iter().enumerate() {
            if step == 0 {
                weight *= 0.5;
            } else {
                vertex = self.neighbor(axis, vertex, step > 0);
                if vertex == NONE {
                    return 0.0;
                }
                weight *= 0.25;
            }
        }
        weight
    }

    /// Exact `e_i^T F e_i`. Only the few blur paths joining the vertices of
    /// the point's own simplex contribute; both axis orders give the same
    /// quadratic form, so walking the forward order suffices.
    fn point_self_response(&self, i: usize, step_axes: &[u8]) -> f64 {
        let d1 = self.dim + 1;
        let vertices = self.point_vertices(i);
        let weights = self.point_weights(i);
        let mut steps = [0i8; MAX_FEATURE_DIM + 1];
        let steps = &mut steps[..d1];
        let mut total = 0.0;
        for k in 0..d1 {
            if weights[k] == 0.0 {
                continue;
            }
            for l in 0..d1 {
                if weights[l] == 0.0 {
                    continue;
                }
                let (lo, hi) = (k.min(l), k.max(l));
                // Axes crossed going from vertex lo to vertex hi.
                let crossed = step_axes[lo..hi].iter().fold(0u32, |m, &a| m | 1 << a);
                let forward: i8 = if k <= l { 1 } else { -1 };
                let mut paths = 0.0;
                if k == l {
                    for s in [0i8, 1, -1] {
                        steps.fill(s);
                        paths += self.path_weight(vertices[k], steps);
                    }
                } else {
                    for (a, x) in steps.iter_mut().enumerate() {
                        *x = if crossed >> a & 1 == 1 { forward } else { 0 };
                    }
                    paths += self.path_weight(vertices[k], steps);
                    for (a, x) in steps.iter_mut().enumerate() {
                        *x = if crossed >> a & 1 == 1 { 0 } else { -forward };
                    }
                    paths += self.path_weight(vertices[k], steps);
                }
                total += weights[k] * weights[l] * paths;
            }
        }
        total
    }

    /// Applies the lattice filter to `channels` values per point (point-major).
    pub fn filter(&self, values: &[f64], channels: usize) -> Result<Vec<f64>> {
        if channels == 0 || values.len() != self.n_points * channels {
            return Err(Error::Shape(format!(
                "filter input has {} values, lattice expects {} points x {channels} channels",
                values.len(),
                self.n_points
            )));
        }
        let d1 = self.dim + 1;
        let c = channels;

        let mut splat = vec![0.0; self.n_vertices * c];
        for i in 0..self.n_points {
            let src = &values[i * c..(i + 1) * c];
            for r in 0..d1 {
                let w = self.weights[i * d1 + r];
                let o = self.offsets[i * d1 + r] as usize * c;
                for (dst, &v) in splat[o..o + c].iter_mut().zip(src) {
                    *dst += w * v;
                }
            }
        }

        let forward = self.blur(splat.clone(), c, (0..d1).collect());
        let reverse = self.blur(splat, c, (0..d1).rev().collect());
        let blurred: Vec<f64> = forward
            .iter()
            .zip(&reverse)
            .map(|(a, b)| 0.5 * (a + b))
            .collect();

        let mut out = vec![0.0; self.n_points * c];
        out.par_chunks_mut(c).enumerate().for_each(|(i, dst)| {
            for r in 0..d1 {
                let w = self.weights[i * d1 + r];
                let o = self.offsets[i * d1 + r] as usize * c;
                for (x, &v) in dst.iter_mut().zip(&blurred[o..o + c]) {
                    *x += w * v;
                }
            }
        });
        Ok(out)
    }

    fn blur(&self, mut buf: Vec<f64>, c: usize, axes: Vec<usize>) -> Vec<f64> {
        let mut next = vec![0.0; buf.len()];
        for axis in axes {
            let table = &self.neighbors[axis * self.n_vertices..(axis + 1) * self.n_vertices];
            let old = &buf;
            next.par_chunks_mut(c).enumerate().for_each(|(v, dst)| {
                let [minus, plus] = table[v];
                let here = &old[v * c..(v + 1) * c];
                for ch in 0..c {
                    let lo = if minus == NONE { 0.0 } else { old[minus as usize * c + ch] };
                    let hi = if plus == NONE { 0.0 } else { old[plus as usize * c + ch] };
                    dst[ch] = 0.5 * here[ch] + 0.25 * (lo + hi);
                }
            });
            std::mem::swap(&mut buf, &mut next);
        }
        buf
    }
}

/// Lattice filter plus the per-point normalization it needs for message
/// passing with self-exclusion.
#[derive(Debug, Clone)]
pub struct LatticeKernel {
    lattice: Lattice,
    ones_response: Vec<f64>,
}

impl LatticeKernel {
    pub fn new(features: &FeatureMatrix) -> Result<Self> {
        let lattice = Lattice::build(features)?;
        let ones_response = lattice.filter(&vec![1.0; lattice.n_points()], 1)?;
        Ok(LatticeKernel {
            lattice,
            ones_response,
        })
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn ones_response(&self) -> &[f64] {
        &self.ones_response
    }
}

/// `M_i = (F(q)_i - s_i q_i) / (F(1)_i - s_i)`: the lattice estimate of
/// `sum_{j != i} k_ij q_j / sum_{j != i} k_ij`.
pub fn normalized_message(
    lattice: &Lattice,
    q: &[f64],
    channels: usize,
    ones_response: &[f64],
) -> Result<Vec<f64>> {
    let n = lattice.n_points();
    if ones_response.len() != n {
        return Err(Error::Shape(format!(
            "ones response has {} entries, lattice has {n} points",
            ones_response.len()
        )));
    }
    let denominators = denominators(lattice, ones_response)?;
    let mut out = lattice.filter(q, channels)?;
    let s = lattice.self_response();
    for i in 0..n {
        for ch in 0..channels {
            let k = i * channels + ch;
            out[k] = (out[k] - s[i] * q[k]) / denominators[i];
        }
    }
    Ok(out)
}

/// Adjoint of [`normalized_message`] with respect to `q`.
pub fn normalized_message_adjoint(
    lattice: &Lattice,
    grad: &[f64],
    channels: usize,
    ones_response: &[f64],
) -> Result<Vec<f64>> {
    let n = lattice.n_points();
    if grad.len() != n * channels {
        return Err(Error::Shape(format!(
            "message gradient has {} values, expected {}",
            grad.len(),
            n * channels
        )));
    }
    let denominators = denominators(lattice, ones_response)?;
    let scaled: Vec<f64> = grad
        .iter()
        .enumerate()
        .map(|(k, g)| g / denominators[k / channels])
        .collect();
    let mut out = lattice.filter(&scaled, channels)?;
    let s = lattice.self_response();
    for (k, x) in out.iter_mut().enumerate() {
        *x -= s[k / channels] * scaled[k];
    }
    Ok(out)
}

fn denominators(lattice: &Lattice, ones_response: &[f64]) -> Result<Vec<f64>> {
    ones_response
        .iter()
        .zip(lattice.self_response())
        .enumerate()
        .map(|(i, (one, s))| {
            let den = one - s;
            if den <= DEGENERATE_DENOMINATOR || !den.is_finite() {
                Err(Error::DegenerateKernel(format!(
                    "point {i} has no neighbors in the kernel (denominator {den:e})"
                )))
            } else {
                Ok(den)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_features(rng: &mut ChaCha8Rng, dim: usize, n: usize, spread: f64) -> FeatureMatrix {
        let values = (0..dim * n).map(|_| rng.random_range(-spread..spread)).collect();
        FeatureMatrix::new(dim, n, values).unwrap()
    }

    #[test]
    fn feature_matrix_validation() {
        assert!(matches!(FeatureMatrix::new(0, 1, vec![]), Err(Error::Dimension(_))));
        assert!(matches!(FeatureMatrix::new(2, 2, vec![0.0; 3]), Err(Error::Shape(_))));
        assert!(matches!(
            FeatureMatrix::new(1, 2, vec![0.0, f64::INFINITY]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn single_point_has_full_simplex() {
        for d in 1..=6 {
            let f = FeatureMatrix::new(d, 1, (0..d).map(|k| 0.37 * k as f64 - 0.2).collect()).unwrap();
            let lat = Lattice::build(&f).unwrap();
            assert_eq!(lat.n_vertices(), d + 1);
            let w = lat.point_weights(0);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(w.iter().all(|&x| x >= -1e-12));
        }
    }

    #[test]
    fn keys_lie_on_the_hyperplane() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_features(&mut rng, 4, 50, 3.0);
        let lat = Lattice::build(&f).unwrap();
        for v in 0..lat.n_vertices() {
            let sum: i32 = lat.vertex_key(v).iter().map(|&k| k as i32).sum();
            assert_eq!(sum, 0);
        }
    }

    #[test]
    fn barycentric_weights_are_convex() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for d in [1, 3, 6, 10] {
            let f = random_features(&mut rng, d, 200, 5.0);
            let lat = Lattice::build(&f).unwrap();
            for i in 0..f.len() {
                let w = lat.point_weights(i);
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(w.iter().all(|&x| x >= -1e-12), "{w:?}");
            }
        }
    }

    #[test]
    fn duplicated_points_share_footprints() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = random_features(&mut rng, 3, 10, 2.0);
        let mut values = base.values().to_vec();
        values.extend_from_slice(base.point(4));
        let f = FeatureMatrix::new(3, 11, values).unwrap();
        let lat = Lattice::build(&f).unwrap();
        assert_eq!(lat.point_vertices(4), lat.point_vertices(10));
        assert_eq!(lat.point_weights(4), lat.point_weights(10));
        assert_eq!(lat.self_response()[4], lat.self_response()[10]);
    }

    #[test]
    fn single_point_filter_is_self_response() {
        let f = FeatureMatrix::new(3, 1, vec![0.1, -0.4, 0.9]).unwrap();
        let lat = Lattice::build(&f).unwrap();
        let out = lat.filter(&[2.0], 1).unwrap();
        assert!((out[0] - 2.0 * lat.self_response()[0]).abs() < 1e-15);
        assert_eq!(lat.filter(&[0.0], 1).unwrap(), vec![0.0]);
    }

    #[test]
    fn self_response_matches_impulse_filtering() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for d in [2, 3, 5] {
            let f = random_features(&mut rng, d, 40, 1.5);
            let lat = Lattice::build(&f).unwrap();
            for i in [0, 7, 39] {
                let mut e = vec![0.0; 40];
                e[i] = 1.0;
                let resp = lat.filter(&e, 1).unwrap()[i];
                let s = lat.self_response()[i];
                assert!((resp - s).abs() <= 1e-12 * resp.abs().max(1e-300), "{resp} vs {s}");
            }
        }
    }

    #[test]
    fn filter_rejects_mismatched_input() {
        let f = FeatureMatrix::new(2, 3, vec![0.0; 6]).unwrap();
        let lat = Lattice::build(&f).unwrap();
        assert!(matches!(lat.filter(&[1.0; 5], 2), Err(Error::Shape(_))));
    }

    #[test]
    fn oversized_features_are_rejected() {
        let f = FeatureMatrix::new(2, 1, vec![1.0e5, 0.0]).unwrap();
        assert!(matches!(Lattice::build(&f), Err(Error::Numeric(_))));
    }

    #[test]
    fn single_point_message_is_degenerate() {
        let f = FeatureMatrix::new(3, 1, vec![0.0; 3]).unwrap();
        let kernel = LatticeKernel::new(&f).unwrap();
        let err = normalized_message(kernel.lattice(), &[0.3, 0.7], 2, kernel.ones_response());
        assert!(matches!(err, Err(Error::DegenerateKernel(_))));
    }

    #[test]
    fn constant_field_message_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let f = random_features(&mut rng, 4, 125, 2.0);
        let kernel = LatticeKernel::new(&f).unwrap();
        let q: Vec<f64> = (0..125).flat_map(|_| [0.25, 0.75]).collect();
        let m = normalized_message(kernel.lattice(), &q, 2, kernel.ones_response()).unwrap();
        for row in m.chunks(2) {
            assert!((row[0] - 0.25).abs() < 1e-6 && (row[1] - 0.75).abs() < 1e-6);
        }
    }

    #[test]
    fn message_adjoint_matches_inner_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_features(&mut rng, 3, 64, 1.5);
        let kernel = LatticeKernel::new(&f).unwrap();
        let q: Vec<f64> = (0..128).map(|_| rng.random::<f64>()).collect();
        let g: Vec<f64> = (0..128).map(|_| rng.random::<f64>() - 0.5).collect();
        let m = normalized_message(kernel.lattice(), &q, 2, kernel.ones_response()).unwrap();
        let mt = normalized_message_adjoint(kernel.lattice(), &g, 2, kernel.ones_response()).unwrap();
        let lhs: f64 = g.iter().zip(&m).map(|(a, b)| a * b).sum();
        let rhs: f64 = mt.iter().zip(&q).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = random_features(&mut rng, 5, 300, 2.0);
        let lat = Lattice::build(&f).unwrap();
        let v: Vec<f64> = (0..600).map(|_| rng.random::<f64>()).collect();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| lat.filter(&v, 2).unwrap())
        };
        assert_eq!(run(1), run(4));
    }
}
