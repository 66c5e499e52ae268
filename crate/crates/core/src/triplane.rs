//! Tri-plane feature fields over the cube `[-1, 1]^3`.
//!
//! A tri-plane stores three axis-aligned `R x R x C` grids in XY, XZ, YZ order.
//! A 3D point is projected onto each plane, bilinearly interpolated with
//! edge-clamped addressing, and the three plane features are averaged.
//! Texel `(0, 0)` sits at the `(-1, -1)` corner and texel centers are at
//! `-1 + (2i + 1) / R`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::sh::ShLighting;

pub const PLANE_COUNT: usize = 3;

/// Plane index and the two point axes it keeps, in storage order.
pub const PLANE_AXES: [(usize, usize); PLANE_COUNT] = [(0, 1), (0, 2), (1, 2)];

/// How a new tri-plane is filled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    Zeros,
    Constant { value: f32 },
    Gaussian { mean: f32, sd: f32, seed: u64 },
}

/// Three feature planes of identical resolution and channel count.
#[derive(Clone, Debug, PartialEq)]
pub struct TriPlane {
    resolution: usize,
    channels: usize,
    data: Vec<f32>,
}

/// Sampled feature values; length equals the tri-plane channel count.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// The twelve texels (four per plane) that contribute to one point sample.
///
/// `texel` holds texel indices (without the channel stride) and `weight` the
/// bilinear weights already divided by three, so a sample is
/// `sum_k weight[k] * value(texel[k])`. `dweight` is the derivative of each
/// weight with respect to the point, zero where addressing is clamped.
#[derive(Clone, Copy, Debug)]
pub struct Footprint {
    pub texel: [usize; 12],
    pub weight: [f64; 12],
    pub dweight: [[f64; 3]; 12],
}

/// Per-axis lattice cell, fractional offset and interpolation slope.
#[inline]
fn cell(resolution: usize, p: [f64; 3]) -> ([usize; 3], [f64; 3], [f64; 3]) {
    let r = resolution;
    let half = r as f64 * 0.5;
    let max = (r - 1) as f64;
    let mut coord = [0usize; 3];
    let mut frac = [0f64; 3];
    let mut slope = [0f64; 3];
    for axis in 0..3 {
        let f = (p[axis].clamp(-1.0, 1.0) + 1.0) * half - 0.5;
        let (fc, d) = if f <= 0.0 {
            (0.0, 0.0)
        } else if f >= max {
            (max, 0.0)
        } else {
            (f, half)
        };
        let i = (fc as usize).min(r - 2);
        coord[axis] = i;
        frac[axis] = fc - i as f64;
        slope[axis] = d;
    }
    (coord, frac, slope)
}

const THIRD: f64 = 1.0 / 3.0;

/// Bilinear taps of a sample, without derivatives: per plane the index of
/// the lower-left texel and four weights (already divided by three) for
/// `(u, v), (u + 1, v), (u, v + 1), (u + 1, v + 1)`.
#[derive(Clone, Copy, Debug)]
pub struct Taps {
    pub base: [usize; 3],
    pub stride: usize,
    pub weight: [f64; 12],
}

impl Taps {
    #[inline]
    pub fn new(resolution: usize, p: [f64; 3]) -> Self {
        let r = resolution;
        let (coord, frac, _) = cell(r, p);
        let mut taps = Taps {
            base: [0; 3],
            stride: r,
            weight: [0.0; 12],
        };
        for (plane, &(a, b)) in PLANE_AXES.iter().enumerate() {
            let (tu, tv) = (frac[a], frac[b]);
            taps.base[plane] = (plane * r + coord[b]) * r + coord[a];
            let (u0, u1, v0) = ((1.0 - tu) * THIRD, tu * THIRD, 1.0 - tv);
            taps.weight[plane * 4..plane * 4 + 4].copy_from_slice(&[u0 * v0, u1 * v0, u0 * tv, u1 * tv]);
        }
        taps
    }

    /// Weighted sum of a single-channel plane array.
    #[inline]
    pub fn apply(&self, values: &[f64]) -> f64 {
        let mut acc = 0.0;
        for plane in 0..3 {
            let b = self.base[plane];
            let lo = &values[b..b + 2];
            let hi = &values[b + self.stride..b + self.stride + 2];
            let w = &self.weight[plane * 4..plane * 4 + 4];
            acc += w[0] * lo[0] + w[1] * lo[1] + w[2] * hi[0] + w[3] * hi[1];
        }
        acc
    }
}

impl Footprint {
    pub fn new(resolution: usize, p: [f64; 3]) -> Self {
        let r = resolution;
        let (coord, frac, slope) = cell(r, p);
        let mut fp = Footprint {
            texel: [0; 12],
            weight: [0.0; 12],
            dweight: [[0.0; 3]; 12],
        };
        for (plane, &(a, b)) in PLANE_AXES.iter().enumerate() {
            let (iu, iv) = (coord[a], coord[b]);
            let (tu, tv) = (frac[a], frac[b]);
            let (su, sv) = (slope[a], slope[b]);
            let base = (plane * r + iv) * r + iu;
            let corners = [
                (base, (1.0 - tu) * (1.0 - tv), -su * (1.0 - tv), -(1.0 - tu) * sv),
                (base + 1, tu * (1.0 - tv), su * (1.0 - tv), -tu * sv),
                (base + r, (1.0 - tu) * tv, -su * tv, (1.0 - tu) * sv),
                (base + r + 1, tu * tv, su * tv, tu * sv),
            ];
            for (k, &(texel, w, du, dv)) in corners.iter().enumerate() {
                let slot = plane * 4 + k;
                fp.texel[slot] = texel;
                fp.weight[slot] = w * THIRD;
                let mut dw = [0.0; 3];
                dw[a] = du * THIRD;
                dw[b] = dv * THIRD;
                fp.dweight[slot] = dw;
            }
        }
        fp
    }
}

/// Gradients produced by [`TriPlane::sample_grad`].
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrad {
    /// `(flat data index, gradient)` for every contributing texel channel.
    pub texels: Vec<(usize, f64)>,
    /// Gradient with respect to the sample point.
    pub point: [f64; 3],
}

fn check_point(p: [f64; 3]) -> Result<()> {
    if p.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("sample point"))
    }
}

impl TriPlane {
    pub fn new(resolution: usize, channels: usize, init: Init) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::Dimension(format!("resolution {resolution} < 2")));
        }
        if channels < 1 {
            return Err(Error::Dimension("channel count must be >= 1".into()));
        }
        let len = PLANE_COUNT * resolution * resolution * channels;
        let data = match init {
            Init::Zeros => vec![0.0; len],
            Init::Constant { value } => {
                if !value.is_finite() {
                    return Err(Error::NonFinite("constant init"));
                }
                vec![value; len]
            }
            Init::Gaussian { mean, sd, seed } => {
                if !(sd >= 0.0) || !mean.is_finite() || !sd.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "gaussian init needs finite mean and sd >= 0 (got {mean}, {sd})"
                    )));
                }
                let normal = Normal::new(mean, sd).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..len).map(|_| normal.sample(&mut rng)).collect()
            }
        };
        Ok(Self {
            resolution,
            channels,
            data,
        })
    }

    /// Wrap raw storage (`3 * R * R * C` values in plane, row, channel order).
    pub fn from_data(resolution: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if resolution < 2 || channels < 1 {
            return Err(Error::Dimension(format!(
                "invalid tri-plane shape R={resolution} C={channels}"
            )));
        }
        let expected = PLANE_COUNT * resolution * resolution * channels;
        if data.len() != expected {
            return Err(Error::Dimension(format!(
                "tri-plane data holds {} values, expected {expected}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tri-plane data"));
        }
        Ok(Self {
            resolution,
            channels,
            data,
        })
    }

    #[inline]
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable storage for the single writer (fitting updates).
    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Flat index of `(plane, row, column, channel)`.
    #[inline]
    pub fn index(&self, plane: usize, row: usize, col: usize, channel: usize) -> usize {
        ((plane * self.resolution + row) * self.resolution + col) * self.channels + channel
    }

    /// Texel center coordinate along one plane axis.
    #[inline]
    pub fn texel_center(&self, i: usize) -> f64 {
        -1.0 + (2 * i + 1) as f64 / self.resolution as f64
    }

    pub fn same_shape(&self, other: &TriPlane) -> bool {
        self.resolution == other.resolution && self.channels == other.channels
    }

    fn check_shape(&self, other: &TriPlane) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "tri-plane shapes differ: R={} C={} vs R={} C={}",
                self.resolution, self.channels, other.resolution, other.channels
            )))
        }
    }

    #[inline]
    pub fn footprint(&self, p: [f64; 3]) -> Footprint {
        Footprint::new(self.resolution, p)
    }

    /// Sample with a precomputed footprint into `out` (length `C`).
    #[inline]
    pub fn sample_with(&self, fp: &Footprint, out: &mut [f64]) {
        let c = self.channels;
        out[..c].iter_mut().for_each(|v| *v = 0.0);
        for k in 0..12 {
            let w = fp.weight[k];
            let base = fp.texel[k] * c;
            for (o, &v) in out[..c].iter_mut().zip(&self.data[base..base + c]) {
                *o += w * v as f64;
            }
        }
    }

    /// Interpolated feature at `p`; points outside the cube are clamped.
    pub fn sample(&self, p: [f64; 3]) -> Result<FeatureVector> {
        check_point(p)?;
        let mut out = vec![0.0; self.channels];
        self.sample_with(&self.footprint(p), &mut out);
        Ok(FeatureVector(out))
    }

    /// Add `upstream * weight` into a dense gradient buffer laid out like `data`.
    #[inline]
    pub fn accumulate_grad(&self, fp: &Footprint, upstream: &[f64], grad: &mut [f64]) {
        let c = self.channels;
        for k in 0..12 {
            let w = fp.weight[k];
            if w == 0.0 {
                continue;
            }
            let base = fp.texel[k] * c;
            for (g, &u) in grad[base..base + c].iter_mut().zip(upstream) {
                *g += w * u;
            }
        }
    }

    /// Gradient of `<upstream, sample(p)>` with respect to texels and to `p`.
    pub fn sample_grad(&self, p: [f64; 3], upstream: &[f64]) -> Result<SampleGrad> {
        check_point(p)?;
        if upstream.len() != self.channels {
            return Err(Error::Dimension(format!(
                "upstream has {} values, tri-plane has {} channels",
                upstream.len(),
                self.channels
            )));
        }
        let fp = self.footprint(p);
        let c = self.channels;
        let mut texels = Vec::with_capacity(12 * c);
        let mut point = [0.0; 3];
        for k in 0..12 {
            let base = fp.texel[k] * c;
            let mut dot = 0.0;
            for ch in 0..c {
                texels.push((base + ch, upstream[ch] * fp.weight[k]));
                dot += upstream[ch] * self.data[base + ch] as f64;
            }
            for axis in 0..3 {
                point[axis] += dot * fp.dweight[k][axis];
            }
        }
        Ok(SampleGrad { texels, point })
    }

    /// Elementwise sum; inputs are left untouched.
    pub fn add_residual(&self, residual: &TriPlane) -> Result<TriPlane> {
        self.check_shape(residual)?;
        let data: Vec<f32> = self
            .data
            .iter()
            .zip(&residual.data)
            .map(|(a, b)| a + b)
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("residual sum"));
        }
        Ok(TriPlane {
            resolution: self.resolution,
            channels: self.channels,
            data,
        })
    }

    /// `a * self + b * other`.
    pub fn linear_combination(&self, a: f32, other: &TriPlane, b: f32) -> Result<TriPlane> {
        self.check_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Ok(TriPlane {
            resolution: self.resolution,
            channels: self.channels,
            data,
        })
    }

    /// Standard deviation of all stored values.
    pub fn std_dev(&self) -> f64 {
        let n = self.data.len() as f64;
        let mean = self.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self
            .data
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        var.sqrt()
    }

    /// Mean absolute elementwise difference.
    pub fn mean_abs_diff(&self, other: &TriPlane) -> Result<f64> {
        self.check_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .sum::<f64>()
            / self.data.len() as f64)
    }
}

/// Albedo/geometry tri-plane paired with a shading tri-plane fitted under `lighting_tag`.
#[derive(Clone, Debug, PartialEq)]
pub struct DualTriPlane {
    pub albedo: TriPlane,
    pub shading: TriPlane,
    pub lighting_tag: ShLighting,
}

impl DualTriPlane {
    pub fn new(albedo: TriPlane, shading: TriPlane, lighting_tag: ShLighting) -> Self {
        Self {
            albedo,
            shading,
            lighting_tag,
        }
    }

    pub fn same_shape(&self, other: &DualTriPlane) -> bool {
        self.albedo.same_shape(&other.albedo) && self.shading.same_shape(&other.shading)
    }

    /// Apply per-branch residuals.
    pub fn add_residual(&self, residual: &DualTriPlane) -> Result<DualTriPlane> {
        Ok(DualTriPlane {
            albedo: self.albedo.add_residual(&residual.albedo)?,
            shading: self.shading.add_residual(&residual.shading)?,
            lighting_tag: self.lighting_tag,
        })
    }
}

/// `n` consecutive dual tri-planes with their cameras.
#[derive(Clone, Debug)]
pub struct TriPlaneWindow {
    pub frames: Vec<DualTriPlane>,
    pub cameras: Vec<Camera>,
}

impl TriPlaneWindow {
    pub fn new(frames: Vec<DualTriPlane>, cameras: Vec<Camera>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Dimension("window needs at least one frame".into()));
        }
        if frames.len() != cameras.len() {
            return Err(Error::Dimension(format!(
                "{} frames but {} cameras",
                frames.len(),
                cameras.len()
            )));
        }
        if frames.iter().any(|f| !f.same_shape(&frames[0])) {
            return Err(Error::Dimension("window frames differ in shape".into()));
        }
        Ok(Self { frames, cameras })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_dimensions() {
        assert!(matches!(TriPlane::new(1, 2, Init::Zeros), Err(Error::Dimension(_))));
        assert!(matches!(TriPlane::new(4, 0, Init::Zeros), Err(Error::Dimension(_))));
    }

    #[test]
    fn zeros_and_constants() {
        let z = TriPlane::new(4, 2, Init::Zeros).unwrap();
        assert_eq!(z.sample([0.3, -0.7, 0.1]).unwrap().0, vec![0.0, 0.0]);
        let c = TriPlane::new(4, 1, Init::Constant { value: 3.0 }).unwrap();
        for p in [[0.0, 0.0, 0.0], [0.99, -0.99, 0.5], [5.0, -7.0, 0.2]] {
            assert!((c.sample(p).unwrap().0[0] - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn seeded_gaussian_is_reproducible() {
        let init = Init::Gaussian { mean: 0.0, sd: 0.1, seed: 7 };
        let a = TriPlane::new(64, 8, init).unwrap();
        let b = TriPlane::new(64, 8, init).unwrap();
        assert_eq!(a.data(), b.data());
        let c = TriPlane::new(64, 8, Init::Gaussian { mean: 0.0, sd: 0.1, seed: 8 }).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn texel_center_is_exact() {
        let tp = TriPlane::new(8, 2, Init::Gaussian { mean: 0.0, sd: 1.0, seed: 1 }).unwrap();
        let (i, j, k) = (2usize, 5usize, 6usize);
        let p = [tp.texel_center(i), tp.texel_center(j), tp.texel_center(k)];
        let got = tp.sample(p).unwrap();
        for ch in 0..2 {
            let xy = tp.data()[tp.index(0, j, i, ch)] as f64;
            let xz = tp.data()[tp.index(1, k, i, ch)] as f64;
            let yz = tp.data()[tp.index(2, k, j, ch)] as f64;
            assert!((got.0[ch] - (xy + xz + yz) / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn texel_center_gradient_is_a_delta() {
        let tp = TriPlane::new(8, 1, Init::Zeros).unwrap();
        let p = [tp.texel_center(3), tp.texel_center(4), tp.texel_center(1)];
        let g = tp.sample_grad(p, &[1.0]).unwrap();
        let nonzero: Vec<_> = g.texels.iter().filter(|(_, v)| *v != 0.0).collect();
        assert_eq!(nonzero.len(), 3);
        for (_, v) in nonzero {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let tp = TriPlane::new(8, 3, Init::Gaussian { mean: 0.0, sd: 1.0, seed: 3 }).unwrap();
        let g = tp.sample_grad([0.1, 0.2, -0.3], &[0.0; 3]).unwrap();
        assert!(g.texels.iter().all(|(_, v)| *v == 0.0));
        assert_eq!(g.point, [0.0; 3]);
    }

    #[test]
    fn non_finite_point_rejected() {
        let tp = TriPlane::new(4, 1, Init::Zeros).unwrap();
        assert!(matches!(tp.sample([f64::NAN, 0.0, 0.0]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn residual_identity_and_mismatch() {
        let tp = TriPlane::new(4, 2, Init::Gaussian { mean: 0.0, sd: 1.0, seed: 2 }).unwrap();
        let zero = TriPlane::new(4, 2, Init::Zeros).unwrap();
        assert_eq!(tp.add_residual(&zero).unwrap(), tp);
        let one = TriPlane::new(4, 2, Init::Constant { value: 1.0 }).unwrap();
        let two = TriPlane::new(4, 2, Init::Constant { value: 2.0 }).unwrap();
        let three = one.add_residual(&two).unwrap();
        assert!(three.data().iter().all(|&v| v == 3.0));
        let other = TriPlane::new(8, 2, Init::Zeros).unwrap();
        assert!(matches!(tp.add_residual(&other), Err(Error::Dimension(_))));
    }
}
