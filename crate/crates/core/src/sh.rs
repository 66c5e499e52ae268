//! Second-order real spherical-harmonic lighting.
//!
//! Coefficients are ordered `(Y00, Y1-1, Y10, Y11, Y2-2, Y2-1, Y20, Y21, Y22)`,
//! with `z` as the polar axis. Shading is monochrome and computed as the
//! clamped dot product of the coefficients with the basis at the normal.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SH_COUNT: usize = 9;

/// `1 / (2 sqrt(pi))`
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
/// `sqrt(3 / (4 pi))`
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
/// `sqrt(15 / pi) / 2`
pub const SH_C2: f64 = 1.092_548_430_592_079_2;
/// `sqrt(5 / pi) / 4`
pub const SH_C3: f64 = 0.315_391_565_252_520_05;
/// `sqrt(15 / pi) / 4`
pub const SH_C4: f64 = 0.546_274_215_296_039_6;

const UNIT_TOLERANCE: f64 = 1e-6;

/// Basis values without the unit-length check.
#[inline]
pub fn sh_basis(d: [f64; 3]) -> [f64; SH_COUNT] {
    let [x, y, z] = d;
    [
        SH_C0,
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2 * x * y,
        SH_C2 * y * z,
        SH_C3 * (3.0 * z * z - 1.0),
        SH_C2 * x * z,
        SH_C4 * (x * x - y * y),
    ]
}

/// Real SH basis (bands 0..=2) at a unit direction.
pub fn eval_sh_basis(dir: [f64; 3]) -> Result<[f64; SH_COUNT]> {
    let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::NonUnitDirection(norm));
    }
    Ok(sh_basis(dir))
}

/// Nine SH lighting coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShLighting {
    pub coeffs: [f64; SH_COUNT],
}

impl Default for ShLighting {
    fn default() -> Self {
        Self::dc(1.0)
    }
}

impl ShLighting {
    pub fn new(coeffs: [f64; SH_COUNT]) -> Result<Self> {
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("SH coefficients"));
        }
        Ok(Self { coeffs })
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let coeffs: [f64; SH_COUNT] = values.try_into().map_err(|_| {
            Error::Dimension(format!("SH lighting needs 9 coefficients, got {}", values.len()))
        })?;
        Self::new(coeffs)
    }

    /// Isotropic lighting with only the band-0 term.
    pub fn dc(value: f64) -> Self {
        let mut coeffs = [0.0; SH_COUNT];
        coeffs[0] = value;
        Self { coeffs }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            coeffs: self.coeffs.map(|c| c * s),
        }
    }

    pub fn norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &ShLighting) -> f64 {
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Unclamped radiance `sum_k L_k Y_k(n)`.
    #[inline]
    pub fn radiance(&self, n: [f64; 3]) -> f64 {
        let y = sh_basis(n);
        self.coeffs.iter().zip(&y).map(|(l, b)| l * b).sum()
    }

    /// Clamped Lambertian shading at a unit normal.
    #[inline]
    pub fn shade(&self, n: [f64; 3]) -> f64 {
        self.radiance(n).max(0.0)
    }
}

/// `max(0, sum_k L_k Y_k(n))`.
pub fn shade_lambert(lighting: &ShLighting, normal: [f64; 3]) -> f64 {
    lighting.shade(normal)
}

/// Rotate lighting about the vertical (`z`) axis. Each `(m, -m)` pair turns by `m * angle`.
pub fn rotate_sh_yaw(lighting: &ShLighting, angle: f64) -> ShLighting {
    let c = lighting.coeffs;
    let mut out = c;
    let (s1, c1) = angle.sin_cos();
    let (s2, c2) = (2.0 * angle).sin_cos();
    // band 1: Y11 ~ x, Y1-1 ~ y
    out[3] = c[3] * c1 - c[1] * s1;
    out[1] = c[3] * s1 + c[1] * c1;
    // band 2, |m| = 1: Y21 ~ xz, Y2-1 ~ yz
    out[7] = c[7] * c1 - c[5] * s1;
    out[5] = c[7] * s1 + c[5] * c1;
    // band 2, |m| = 2: Y22 ~ x^2 - y^2, Y2-2 ~ xy
    out[8] = c[8] * c2 - c[4] * s2;
    out[4] = c[8] * s2 + c[4] * c2;
    ShLighting { coeffs: out }
}

/// Scale so the mean unclamped shading over the sphere is one.
pub fn renormalize_sh(lighting: &ShLighting) -> Result<ShLighting> {
    let dc = lighting.coeffs[0];
    if !(dc > 0.0) {
        return Err(Error::NonPositiveDc(dc));
    }
    Ok(lighting.scaled(1.0 / (dc * SH_C0)))
}

/// Equirectangular (lat-long) scalar radiance map.
///
/// Column `u` maps to azimuth `phi = 2 pi (u + 0.5) / width` measured from `+x`
/// toward `+y`; row `v` maps to polar angle `theta = pi (v + 0.5) / height`
/// measured from `+z`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvMap {
    width: usize,
    height: usize,
    texels: Vec<f64>,
}

impl EnvMap {
    pub fn new(width: usize, height: usize, texels: Vec<f64>) -> Result<Self> {
        if width < 4 || height < 2 {
            return Err(Error::Dimension(format!(
                "environment map must be at least 4x2, got {width}x{height}"
            )));
        }
        if texels.len() != width * height {
            return Err(Error::Dimension(format!(
                "environment map {width}x{height} needs {} texels, got {}",
                width * height,
                texels.len()
            )));
        }
        if texels.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("environment map"));
        }
        if texels.iter().any(|&t| t < 0.0) {
            return Err(Error::InvalidArgument("environment radiance must be >= 0".into()));
        }
        Ok(Self {
            width,
            height,
            texels,
        })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    /// Build a map by evaluating `f(direction)` at every texel center.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut([f64; 3]) -> f64) -> Result<Self> {
        let mut texels = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                texels.push(f(texel_direction(width, height, u, v)));
            }
        }
        Self::new(width, height, texels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn texels(&self) -> &[f64] {
        &self.texels
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.texels[v * self.width + u]
    }

    pub fn total(&self) -> f64 {
        self.texels.iter().sum()
    }

    /// Move texel `(u, v)` to `((u + shift) mod width, v)`; a positive shift turns
    /// the environment counter-clockwise seen from `+z`.
    pub fn shift_azimuth(&self, shift: usize) -> EnvMap {
        let w = self.width;
        let mut texels = vec![0.0; self.texels.len()];
        for v in 0..self.height {
            for u in 0..w {
                texels[v * w + (u + shift) % w] = self.texels[v * w + u];
            }
        }
        EnvMap {
            width: w,
            height: self.height,
            texels,
        }
    }
}

/// Unit direction of an environment texel center.
pub fn texel_direction(width: usize, height: usize, u: usize, v: usize) -> [f64; 3] {
    let theta = PI * (v as f64 + 0.5) / height as f64;
    let phi = 2.0 * PI * (u as f64 + 0.5) / width as f64;
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    [st * cp, st * sp, ct]
}

/// Quadrature `L_k = sum env * Y_k * sin(theta) dtheta dphi`.
pub fn project_envmap_to_sh(env: &EnvMap) -> ShLighting {
    let (w, h) = (env.width, env.height);
    let dtheta = PI / h as f64;
    let dphi = 2.0 * PI / w as f64;
    let mut coeffs = [0.0; SH_COUNT];
    for v in 0..h {
        let theta = PI * (v as f64 + 0.5) / h as f64;
        let solid = theta.sin() * dtheta * dphi;
        for u in 0..w {
            let radiance = env.texels[v * w + u];
            if radiance == 0.0 {
                continue;
            }
            let y = sh_basis(texel_direction(w, h, u, v));
            for k in 0..SH_COUNT {
                coeffs[k] += radiance * y[k] * solid;
            }
        }
    }
    ShLighting { coeffs }
}

/// Quarter turn about `+z` (counter-clockwise seen from `+z`) by shifting columns.
pub fn align_envmap_convention(env: &EnvMap) -> Result<EnvMap> {
    if env.width % 4 != 0 {
        return Err(Error::InvalidArgument(format!(
            "width {} is not divisible by 4",
            env.width
        )));
    }
    Ok(env.shift_azimuth(env.width / 4))
}
