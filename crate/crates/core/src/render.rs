//! Volume rendering of dual tri-plane fields.
//!
//! Each ray is sampled at `samples_per_ray` bin midpoints (or jittered bin
//! positions) between `near` and `far`. With `alpha_i = 1 - exp(-sigma_i d)`
//! and `w_i = alpha_i prod_{j<i} (1 - alpha_j)` the outputs are
//!
//! * albedo `A = sum w_i a_i`
//! * shading `S = sum w_i s_i / sum w_i` (opacity-normalized)
//! * rgb `I = A * S + T_end * background`
//! * depth `sum w_i t_i + T_end * far`
//!
//! so the composed image is exactly the product of the albedo and shading
//! images before the background term.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, Pose, Ray};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::sh::ShLighting;
use crate::triplane::{DualTriPlane, Taps, TriPlane};

pub const DEFAULT_SAMPLES_PER_RAY: usize = 96;

/// Guards the shading normalization on nearly empty pixels.
pub const SHADING_EPS: f64 = 1e-10;

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else if x < -15.0 {
        // ln(1 + e) = e - e^2/2 + O(e^3), relative error below 1e-13
        let e = x.exp();
        e - 0.5 * e * e
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`]; `-inf` at zero.
#[inline]
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

#[inline]
pub fn logit(y: f64) -> f64 {
    (y / (1.0 - y)).ln()
}

/// Affine decoders applied to the averaged tri-plane features.
///
/// The albedo decoder maps `C_A` features to raw density and three raw albedo
/// values (softplus and logistic activations); the shading decoder maps `C_S`
/// features to one raw shading value (softplus activation).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub albedo_channels: usize,
    pub shading_channels: usize,
    /// `4 x C_A`, row-major.
    pub albedo_weight: Vec<f64>,
    pub albedo_bias: [f64; 4],
    /// `C_S` weights.
    pub shading_weight: Vec<f64>,
    pub shading_bias: f64,
}

/// Gain applied to the density feature by [`DecoderParams::standard`].
pub const STANDARD_DENSITY_GAIN: f64 = 10.0;

impl DecoderParams {
    /// Channel 0 drives density (scaled by [`STANDARD_DENSITY_GAIN`]), channels
    /// 1..=3 drive albedo, shading channel 0 drives shading. Needs `C_A >= 4`.
    pub fn standard(albedo_channels: usize, shading_channels: usize) -> Result<Self> {
        if albedo_channels < 4 || shading_channels < 1 {
            return Err(Error::Dimension(format!(
                "standard decoder needs C_A >= 4 and C_S >= 1 (got {albedo_channels}, {shading_channels})"
            )));
        }
        let mut albedo_weight = vec![0.0; 4 * albedo_channels];
        albedo_weight[0] = STANDARD_DENSITY_GAIN;
        for k in 1..4 {
            albedo_weight[k * albedo_channels + k] = 1.0;
        }
        let mut shading_weight = vec![0.0; shading_channels];
        shading_weight[0] = 1.0;
        Ok(Self {
            albedo_channels,
            shading_channels,
            albedo_weight,
            albedo_bias: [0.0; 4],
            shading_weight,
            shading_bias: 0.0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.albedo_weight.len() != 4 * self.albedo_channels
            || self.shading_weight.len() != self.shading_channels
        {
            return Err(Error::Dimension("decoder weight shapes are inconsistent".into()));
        }
        let finite = self
            .albedo_weight
            .iter()
            .chain(&self.albedo_bias)
            .chain(&self.shading_weight)
            .chain(std::iter::once(&self.shading_bias))
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("decoder parameters"));
        }
        Ok(())
    }

    pub fn check_dual(&self, dual: &DualTriPlane) -> Result<()> {
        self.validate()?;
        if dual.albedo.channels() != self.albedo_channels
            || dual.shading.channels() != self.shading_channels
        {
            return Err(Error::Dimension(format!(
                "decoder expects C_A={} C_S={}, tri-planes have C_A={} C_S={}",
                self.albedo_channels,
                self.shading_channels,
                dual.albedo.channels(),
                dual.shading.channels()
            )));
        }
        Ok(())
    }

    /// Raw albedo-decoder outputs `(sigma~, a~_r, a~_g, a~_b)` for a feature vector.
    #[inline]
    pub fn albedo_raw(&self, features: &[f64]) -> [f64; 4] {
        let c = self.albedo_channels;
        let mut out = self.albedo_bias;
        for (k, o) in out.iter_mut().enumerate() {
            let row = &self.albedo_weight[k * c..(k + 1) * c];
            *o += row.iter().zip(features).map(|(w, f)| w * f).sum::<f64>();
        }
        out
    }

    #[inline]
    pub fn shading_raw(&self, features: &[f64]) -> f64 {
        self.shading_bias
            + self
                .shading_weight
                .iter()
                .zip(features)
                .map(|(w, f)| w * f)
                .sum::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderOptions {
    pub samples_per_ray: usize,
    /// Defaults to `radius - 1`.
    pub near: Option<f64>,
    /// Defaults to `radius + 1`.
    pub far: Option<f64>,
    pub stratified: bool,
    pub seed: u64,
    pub background: [f64; 3],
    /// Central-difference step for relighting normals; defaults to `2 / R_albedo`.
    pub normal_step: Option<f64>,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            samples_per_ray: DEFAULT_SAMPLES_PER_RAY,
            near: None,
            far: None,
            stratified: false,
            seed: 0,
            background: [0.0; 3],
            normal_step: None,
        }
    }
}

impl RenderOptions {
    pub fn with_samples(mut self, n: usize) -> Self {
        self.samples_per_ray = n;
        self
    }

    /// Resolve and validate the sampling interval for a camera.
    pub fn bounds(&self, cam: &Camera) -> Result<(f64, f64)> {
        cam.validate()?;
        let near = self.near.unwrap_or(cam.radius - 1.0);
        let far = self.far.unwrap_or(cam.radius + 1.0);
        if self.samples_per_ray < 2 {
            return Err(Error::InvalidArgument(format!(
                "samples_per_ray = {} < 2",
                self.samples_per_ray
            )));
        }
        if !(near < far) || near < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "invalid depth range near={near} far={far}"
            )));
        }
        if cam.radius <= near {
            return Err(Error::DegenerateCamera(format!(
                "radius {} <= near {near}",
                cam.radius
            )));
        }
        Ok((near, far))
    }
}

/// Images produced by one render.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub rgb: Image,
    pub albedo: Image,
    pub shading: Image,
    pub depth: Image,
    pub weights_sum: Image,
    /// Opacity-normalized mean normals `sum w n / sum w` (relighting and
    /// reference renders only); shorter than unit where normals vary along the ray.
    pub normals: Option<Image>,
    /// Samples whose density gradient vanished during relighting.
    pub zero_gradient_samples: u64,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.rgb.width
    }

    pub fn height(&self) -> usize {
        self.rgb.height
    }
}

/// One pixel's composited values.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PixelSample {
    pub rgb: [f64; 3],
    pub albedo: [f64; 3],
    pub shading: f64,
    pub depth: f64,
    pub weights_sum: f64,
    pub normal: [f64; 3],
    pub zero_gradient: u32,
}

/// Appearance at a point with non-zero compositing weight.
#[derive(Clone, Copy, Debug, Default)]
pub struct Appearance {
    pub albedo: [f64; 3],
    pub shading: f64,
    /// `None` when the field has no normal at this point.
    pub normal: Option<[f64; 3]>,
}

/// A field the quadrature can march through. Density is queried for every
/// sample; appearance only where the compositing weight is non-zero.
pub trait SampleField: Sync {
    type Cache;
    fn density(&self, p: [f64; 3]) -> (f64, Self::Cache);
    fn appearance(&self, p: [f64; 3], cache: &Self::Cache) -> Appearance;
    /// Conservative test that the density at `p` is too small to change any
    /// accumulated quantity.
    fn negligible(&self, _p: [f64; 3]) -> bool {
        false
    }
    /// Whether this field reports normals.
    fn has_normals(&self) -> bool {
        false
    }
}

#[derive(Clone, Copy)]
struct SplitMix64(u64);

impl SplitMix64 {
    fn new(seed: u64, stream: u64) -> Self {
        Self(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17))
    }

    fn next_f64(&mut self) -> f64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        (z >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// Sample depths along a ray; `jitter` selects a deterministic per-pixel stream.
pub fn sample_depths(near: f64, far: f64, n: usize, jitter: Option<(u64, u64)>, out: &mut Vec<f64>) -> f64 {
    let bin = (far - near) / n as f64;
    out.clear();
    match jitter {
        None => out.extend((0..n).map(|i| near + (i as f64 + 0.5) * bin)),
        Some((seed, stream)) => {
            let mut rng = SplitMix64::new(seed, stream);
            out.extend((0..n).map(|i| near + (i as f64 + rng.next_f64()) * bin));
        }
    }
    bin
}

/// Samples with compositing weight below this skip appearance evaluation.
pub const MIN_SAMPLE_WEIGHT: f64 = 1e-12;

/// March one ray through a field.
pub fn march<F: SampleField>(
    field: &F,
    ray: &Ray,
    depths: &[f64],
    bin: f64,
    far: f64,
    background: [f64; 3],
) -> PixelSample {
    let mut transmittance = 1.0f64;
    let mut albedo = [0.0; 3];
    let mut shading_acc = 0.0;
    let mut depth_acc = 0.0;
    let mut normal_acc = [0.0; 3];
    let mut zero_gradient = 0;
    for &t in depths {
        let p = [
            ray.origin[0] + t * ray.direction[0],
            ray.origin[1] + t * ray.direction[1],
            ray.origin[2] + t * ray.direction[2],
        ];
        if field.negligible(p) {
            continue;
        }
        let (sigma, cache) = field.density(p);
        let tau = sigma * bin;
        let alpha = if tau < 1e-9 { tau } else { -(-tau).exp_m1() };
        let w = transmittance * alpha;
        transmittance *= 1.0 - alpha;
        if w < MIN_SAMPLE_WEIGHT {
            if transmittance < MIN_SAMPLE_WEIGHT {
                break;
            }
            continue;
        }
        let app = field.appearance(p, &cache);
        for k in 0..3 {
            albedo[k] += w * app.albedo[k];
        }
        shading_acc += w * app.shading;
        depth_acc += w * t;
        match app.normal {
            Some(n) => {
                for k in 0..3 {
                    normal_acc[k] += w * n[k];
                }
            }
            None => {
                if field.has_normals() {
                    zero_gradient += 1;
                }
            }
        }
    }
    let weights_sum = 1.0 - transmittance;
    let shading = shading_acc / (weights_sum + SHADING_EPS);
    let mut rgb = [0.0; 3];
    for k in 0..3 {
        rgb[k] = albedo[k] * shading + transmittance * background[k];
    }
    let normal = normal_acc.map(|n| n / (weights_sum + SHADING_EPS));
    PixelSample {
        rgb,
        albedo,
        shading,
        depth: depth_acc + transmittance * far,
        weights_sum,
        normal,
        zero_gradient,
    }
}

/// Render every pixel of `cam` through `field`, parallel over rows.
pub fn render_field<F: SampleField>(field: &F, cam: &Camera, opts: &RenderOptions) -> Result<RenderOutput> {
    let (near, far) = opts.bounds(cam)?;
    let pose: Pose = cam.pose();
    let n = cam.image_size;
    let spp = opts.samples_per_ray;
    let mut pixels = vec![PixelSample::default(); n * n];
    pixels
        .par_chunks_mut(n)
        .enumerate()
        .for_each_init(
            || Vec::with_capacity(spp),
            |depths, (row, chunk)| {
                for (col, px) in chunk.iter_mut().enumerate() {
                    let ray = cam.ray(&pose, col, row);
                    let jitter = opts.stratified.then_some((opts.seed, (row * n + col) as u64));
                    let bin = sample_depths(near, far, spp, jitter, depths);
                    *px = march(field, &ray, depths, bin, far, opts.background);
                }
            },
        );
    Ok(assemble(&pixels, n, field.has_normals()))
}

fn assemble(pixels: &[PixelSample], n: usize, with_normals: bool) -> RenderOutput {
    let mut rgb = Image::new(n, n, 3);
    let mut albedo = Image::new(n, n, 3);
    let mut shading = Image::new(n, n, 1);
    let mut depth = Image::new(n, n, 1);
    let mut weights_sum = Image::new(n, n, 1);
    let mut normals = with_normals.then(|| Image::new(n, n, 3));
    let mut zero_gradient_samples = 0u64;
    for (i, px) in pixels.iter().enumerate() {
        rgb.data[3 * i..3 * i + 3].copy_from_slice(&px.rgb);
        albedo.data[3 * i..3 * i + 3].copy_from_slice(&px.albedo);
        shading.data[i] = px.shading;
        depth.data[i] = px.depth;
        weights_sum.data[i] = px.weights_sum;
        if let Some(img) = normals.as_mut() {
            img.data[3 * i..3 * i + 3].copy_from_slice(&px.normal);
        }
        zero_gradient_samples += px.zero_gradient as u64;
    }
    RenderOutput {
        rgb,
        albedo,
        shading,
        depth,
        weights_sum,
        normals,
        zero_gradient_samples,
    }
}

/// Tri-plane with the decoder's affine map folded into every texel.
///
/// Bilinear interpolation and plane averaging are linear, so
/// `W mean(P) + b = mean(W P) + b`; folding the decoder before sampling
/// reads fewer channels per sample.
#[derive(Clone, Debug)]
pub struct DecodedPlanes {
    resolution: usize,
    /// One contiguous array per output channel.
    data: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl DecodedPlanes {
    /// `weight` is `out x C` row-major.
    pub fn new(tp: &TriPlane, weight: &[f64], bias: &[f64]) -> Self {
        let c = tp.channels();
        let out = bias.len();
        let texels = tp.len() / c;
        let src = tp.data();
        let data = (0..out)
            .map(|o| {
                let row = &weight[o * c..(o + 1) * c];
                (0..texels)
                    .map(|t| row.iter().zip(&src[t * c..(t + 1) * c]).map(|(w, v)| w * *v as f64).sum())
                    .collect()
            })
            .collect();
        Self {
            resolution: tp.resolution(),
            data,
            bias: bias.to_vec(),
        }
    }

    #[inline]
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    #[inline]
    pub fn channel(&self, taps: &Taps, ch: usize) -> f64 {
        taps.apply(&self.data[ch]) + self.bias[ch]
    }
}

/// Albedo and shading channels interleaved per texel so one pass over the
/// taps yields all appearance channels.
#[derive(Clone, Debug)]
struct Interleaved {
    data: Vec<f64>,
    bias: [f64; 4],
}

impl Interleaved {
    fn new(albedo: &DecodedPlanes, shading: &DecodedPlanes) -> Option<Self> {
        if albedo.resolution != shading.resolution {
            return None;
        }
        let channels = [&albedo.data[1], &albedo.data[2], &albedo.data[3], &shading.data[0]];
        let data = (0..channels[0].len()).flat_map(|t| channels.map(|c| c[t])).collect();
        Some(Self {
            data,
            bias: [albedo.bias[1], albedo.bias[2], albedo.bias[3], shading.bias[0]],
        })
    }

    #[inline]
    fn apply(&self, taps: &Taps) -> [f64; 4] {
        let mut acc = [0.0; 4];
        for plane in 0..3 {
            let lo = &self.data[4 * taps.base[plane]..4 * taps.base[plane] + 8];
            let hi = &self.data[4 * (taps.base[plane] + taps.stride)..4 * (taps.base[plane] + taps.stride) + 8];
            let w = &taps.weight[plane * 4..plane * 4 + 4];
            for c in 0..4 {
                acc[c] += w[0] * lo[c] + w[1] * lo[4 + c] + w[2] * hi[c] + w[3] * hi[4 + c];
            }
        }
        [0, 1, 2, 3].map(|c| acc[c] + self.bias[c])
    }
}

/// Samples whose raw density is bounded below this are skipped. The optical
/// depth dropped along a ray is at most `(far - near) * exp(-25)`, about 3e-11.
pub const NEGLIGIBLE_RAW_DENSITY: f64 = -25.0;

/// Upper bounds of one decoded channel over blocks of lattice cells.
#[derive(Clone, Debug)]
struct CellBound {
    scale: f64,
    offset: f64,
    cells: usize,
    max: Vec<f64>,
}

impl CellBound {
    fn new(planes: &DecodedPlanes, ch: usize, block: usize) -> Self {
        let r = planes.resolution;
        let cells = (r - 1).div_ceil(block);
        let data = &planes.data[ch];
        // Per-plane maxima over the texels each block of cells can touch.
        let plane_max: Vec<Vec<f64>> = (0..3)
            .map(|plane| {
                let mut m = vec![f64::NEG_INFINITY; cells * cells];
                for kv in 0..cells {
                    for ku in 0..cells {
                        let mut best = f64::NEG_INFINITY;
                        for row in kv * block..=((kv + 1) * block).min(r - 1) {
                            for col in ku * block..=((ku + 1) * block).min(r - 1) {
                                best = best.max(data[(plane * r + row) * r + col]);
                            }
                        }
                        m[kv * cells + ku] = best;
                    }
                }
                m
            })
            .collect();
        let mut max = vec![0.0; cells * cells * cells];
        for kz in 0..cells {
            for ky in 0..cells {
                for kx in 0..cells {
                    max[(kz * cells + ky) * cells + kx] = (plane_max[0][ky * cells + kx]
                        + plane_max[1][kz * cells + kx]
                        + plane_max[2][kz * cells + ky])
                        / 3.0
                        + planes.bias[ch];
                }
            }
        }
        // Cell of the lower interpolation tap is `floor(f) / block` with
        // `f = (p + 1) R / 2 - 1/2`.
        let scale = r as f64 / (2.0 * block as f64);
        Self {
            scale,
            offset: scale - 0.5 / block as f64,
            cells,
            max,
        }
    }

    #[inline]
    fn at(&self, p: [f64; 3]) -> f64 {
        let last = self.cells - 1;
        let k = p.map(|x| ((x * self.scale + self.offset).max(0.0) as usize).min(last));
        self.max[(k[2] * self.cells + k[1]) * self.cells + k[0]]
    }
}

/// A dual tri-plane with decoders folded in, ready for repeated rendering.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    albedo: DecodedPlanes,
    density_bound: CellBound,
    shading: DecodedPlanes,
    interleaved: Option<Interleaved>,
    lighting_tag: ShLighting,
}

impl PreparedScene {
    pub fn new(dual: &DualTriPlane, dec: &DecoderParams) -> Result<Self> {
        dec.check_dual(dual)?;
        let albedo = DecodedPlanes::new(&dual.albedo, &dec.albedo_weight, &dec.albedo_bias);
        let block = (albedo.resolution / 16).max(2);
        let shading = DecodedPlanes::new(&dual.shading, &dec.shading_weight, &[dec.shading_bias]);
        Ok(Self {
            density_bound: CellBound::new(&albedo, 0, block),
            interleaved: Interleaved::new(&albedo, &shading),
            albedo,
            shading,
            lighting_tag: dual.lighting_tag,
        })
    }

    pub fn lighting_tag(&self) -> &ShLighting {
        &self.lighting_tag
    }

    pub fn albedo_resolution(&self) -> usize {
        self.albedo.resolution
    }

    /// Render with the learned shading tri-plane.
    pub fn render(&self, cam: &Camera, opts: &RenderOptions) -> Result<RenderOutput> {
        render_field(&LearnedField { scene: self }, cam, opts)
    }

    /// Render with analytic Lambertian shading under `lighting`, using normals
    /// from central differences of the decoded density.
    pub fn render_relit(&self, cam: &Camera, lighting: &ShLighting, opts: &RenderOptions) -> Result<RenderOutput> {
        let step = opts
            .normal_step
            .unwrap_or(2.0 / self.albedo.resolution as f64);
        if !(step > 0.0) {
            return Err(Error::InvalidArgument(format!("normal step {step} <= 0")));
        }
        render_field(
            &RelitField {
                scene: self,
                lighting: *lighting,
                step,
            },
            cam,
            opts,
        )
    }

    #[inline]
    fn density_at(&self, p: [f64; 3]) -> f64 {
        softplus(self.albedo.channel(&Taps::new(self.albedo.resolution, p), 0))
    }

    #[inline]
    fn albedo_at(&self, taps: &Taps) -> [f64; 3] {
        [
            sigmoid(self.albedo.channel(taps, 1)),
            sigmoid(self.albedo.channel(taps, 2)),
            sigmoid(self.albedo.channel(taps, 3)),
        ]
    }

    /// Outward unit normal `-grad(sigma) / |grad(sigma)|` by central differences.
    pub fn density_normal(&self, p: [f64; 3], step: f64) -> Option<[f64; 3]> {
        let mut g = [0.0; 3];
        for axis in 0..3 {
            let mut hi = p;
            let mut lo = p;
            hi[axis] += step;
            lo[axis] -= step;
            g[axis] = self.density_at(hi) - self.density_at(lo);
        }
        let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        (norm > 0.0 && norm.is_finite()).then(|| [-g[0] / norm, -g[1] / norm, -g[2] / norm])
    }
}

struct LearnedField<'a> {
    scene: &'a PreparedScene,
}

impl SampleField for LearnedField<'_> {
    type Cache = Taps;

    #[inline]
    fn negligible(&self, p: [f64; 3]) -> bool {
        self.scene.density_bound.at(p) < NEGLIGIBLE_RAW_DENSITY
    }

    #[inline]
    fn density(&self, p: [f64; 3]) -> (f64, Taps) {
        let taps = Taps::new(self.scene.albedo.resolution, p);
        (softplus(self.scene.albedo.channel(&taps, 0)), taps)
    }

    #[inline]
    fn appearance(&self, p: [f64; 3], taps: &Taps) -> Appearance {
        if let Some(il) = &self.scene.interleaved {
            let raw = il.apply(taps);
            return Appearance {
                albedo: [sigmoid(raw[0]), sigmoid(raw[1]), sigmoid(raw[2])],
                shading: softplus(raw[3]),
                normal: None,
            };
        }
        let shading_raw = self.scene.shading.channel(&Taps::new(self.scene.shading.resolution, p), 0);
        Appearance {
            albedo: self.scene.albedo_at(taps),
            shading: softplus(shading_raw),
            normal: None,
        }
    }
}

struct RelitField<'a> {
    scene: &'a PreparedScene,
    lighting: ShLighting,
    step: f64,
}

impl SampleField for RelitField<'_> {
    type Cache = Taps;

    #[inline]
    fn negligible(&self, p: [f64; 3]) -> bool {
        self.scene.density_bound.at(p) < NEGLIGIBLE_RAW_DENSITY
    }

    #[inline]
    fn density(&self, p: [f64; 3]) -> (f64, Taps) {
        let taps = Taps::new(self.scene.albedo.resolution, p);
        (softplus(self.scene.albedo.channel(&taps, 0)), taps)
    }

    fn appearance(&self, p: [f64; 3], taps: &Taps) -> Appearance {
        let normal = self.scene.density_normal(p, self.step);
        let shading = normal.map_or(0.0, |n| self.lighting.shade(n));
        Appearance {
            albedo: self.scene.albedo_at(taps),
            shading,
            normal,
        }
    }

    fn has_normals(&self) -> bool {
        true
    }
}

/// Render a dual tri-plane with its learned shading.
pub fn render(dual: &DualTriPlane, dec: &DecoderParams, cam: &Camera, opts: &RenderOptions) -> Result<RenderOutput> {
    PreparedScene::new(dual, dec)?.render(cam, opts)
}

/// Render with analytic shading under new lighting.
pub fn render_analytic_relight(
    dual: &DualTriPlane,
    dec: &DecoderParams,
    cam: &Camera,
    lighting: &ShLighting,
    opts: &RenderOptions,
) -> Result<RenderOutput> {
    PreparedScene::new(dual, dec)?.render_relit(cam, lighting, opts)
}
