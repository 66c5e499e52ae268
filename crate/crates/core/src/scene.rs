//! Analytic blob scenes, the reference renderer, tri-plane baking and exact flow.
//!
//! Each blob contributes a raw density `g_i(x) = s_i (1 - |x - c_i|^2 / r_i^2)`.
//! Blobs are blended with a log-sum-exp smooth maximum and the scene density is
//! `softplus(G(x) + bias)`. A single blob's raw field is a quadratic without
//! three-way cross terms, so tri-planes represent it exactly up to bilinear
//! interpolation error.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{dot, sub, Camera, Pose};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::render::{
    logit, render_field, softplus, softplus_inv, Appearance, DecoderParams, RenderOptions,
    RenderOutput, SampleField,
};
use crate::sh::ShLighting;
use crate::triplane::{DualTriPlane, TriPlane};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub center: [f64; 3],
    pub radius: f64,
    pub sharpness: f64,
    pub albedo: [f64; 3],
}

/// Structured scene description (TOML on disk).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Smooth-max sharpness between blobs.
    #[serde(default = "default_blend")]
    pub blend: f64,
    /// Added to the blended raw density; `-inf` empties the scene.
    #[serde(default)]
    pub density_bias: f64,
    #[serde(default, rename = "blob")]
    pub blobs: Vec<BlobSpec>,
}

fn default_blend() -> f64 {
    4.0
}

impl SceneSpec {
    pub fn sphere(radius: f64, sharpness: f64, albedo: [f64; 3]) -> Self {
        Self {
            blend: default_blend(),
            density_bias: 0.0,
            blobs: vec![BlobSpec {
                center: [0.0; 3],
                radius,
                sharpness,
                albedo,
            }],
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Validated scene with closed-form density, albedo and normals.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    spec: SceneSpec,
}

pub fn make_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    SyntheticScene::new(spec.clone())
}

impl SyntheticScene {
    pub fn new(spec: SceneSpec) -> Result<Self> {
        if spec.blobs.is_empty() {
            return Err(Error::InvalidArgument("scene has no primitives".into()));
        }
        if !(spec.blend > 0.0) || spec.density_bias.is_nan() {
            return Err(Error::InvalidArgument("blend must be > 0 and bias not NaN".into()));
        }
        for b in &spec.blobs {
            if !(b.radius > 0.0) || !(b.sharpness > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "blob radius and sharpness must be > 0 (got {}, {})",
                    b.radius, b.sharpness
                )));
            }
            if b.albedo.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(Error::InvalidArgument("blob albedo must lie in [0, 1]".into()));
            }
            if b.center.iter().any(|c| !c.is_finite()) {
                return Err(Error::NonFinite("blob center"));
            }
        }
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    #[inline]
    fn blob_raw(b: &BlobSpec, x: [f64; 3]) -> f64 {
        let d = sub(x, b.center);
        b.sharpness * (1.0 - dot(d, d) / (b.radius * b.radius))
    }

    /// Blended raw density before the bias, plus the blend weights.
    fn blend(&self, x: [f64; 3], weights: &mut Vec<f64>) -> f64 {
        weights.clear();
        let beta = self.spec.blend;
        weights.extend(self.spec.blobs.iter().map(|b| Self::blob_raw(b, x)));
        if weights.len() == 1 {
            let g = weights[0];
            weights[0] = 1.0;
            return g;
        }
        let m = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for w in weights.iter_mut() {
            *w = (beta * (*w - m)).exp();
            sum += *w;
        }
        for w in weights.iter_mut() {
            *w /= sum;
        }
        m + sum.ln() / beta
    }

    /// Pre-activation density `G(x) + bias`.
    pub fn raw_density(&self, x: [f64; 3]) -> f64 {
        let mut w = Vec::with_capacity(self.spec.blobs.len());
        self.blend(x, &mut w) + self.spec.density_bias
    }

    pub fn density(&self, x: [f64; 3]) -> f64 {
        softplus(self.raw_density(x))
    }

    pub fn albedo(&self, x: [f64; 3]) -> [f64; 3] {
        let mut w = Vec::with_capacity(self.spec.blobs.len());
        self.blend(x, &mut w);
        self.mix_albedo(&w)
    }

    fn mix_albedo(&self, w: &[f64]) -> [f64; 3] {
        let mut a = [0.0; 3];
        for (b, wi) in self.spec.blobs.iter().zip(w) {
            for k in 0..3 {
                a[k] += wi * b.albedo[k];
            }
        }
        a
    }

    fn raw_gradient(&self, x: [f64; 3], w: &[f64]) -> [f64; 3] {
        let mut g = [0.0; 3];
        for (b, wi) in self.spec.blobs.iter().zip(w) {
            let s = -2.0 * b.sharpness / (b.radius * b.radius) * wi;
            for k in 0..3 {
                g[k] += s * (x[k] - b.center[k]);
            }
        }
        g
    }

    /// Outward unit normal `-grad(density) / |grad(density)|`.
    pub fn normal(&self, x: [f64; 3]) -> Option<[f64; 3]> {
        let mut w = Vec::with_capacity(self.spec.blobs.len());
        self.blend(x, &mut w);
        normal_from_gradient(self.raw_gradient(x, &w))
    }

    /// Everything the renderer and baker need at one point.
    pub fn fields(&self, x: [f64; 3]) -> SceneSample {
        let mut w = Vec::with_capacity(self.spec.blobs.len());
        let raw = self.blend(x, &mut w) + self.spec.density_bias;
        SceneSample {
            raw_density: raw,
            albedo: self.mix_albedo(&w),
            normal: normal_from_gradient(self.raw_gradient(x, &w)),
        }
    }
}

fn normal_from_gradient(g: [f64; 3]) -> Option<[f64; 3]> {
    let n = dot(g, g).sqrt();
    (n > 0.0 && n.is_finite()).then(|| [-g[0] / n, -g[1] / n, -g[2] / n])
}

#[derive(Clone, Copy, Debug)]
pub struct SceneSample {
    pub raw_density: f64,
    pub albedo: [f64; 3],
    pub normal: Option<[f64; 3]>,
}

struct ReferenceField<'a> {
    scene: &'a SyntheticScene,
    lighting: ShLighting,
}

impl SampleField for ReferenceField<'_> {
    type Cache = ();

    #[inline]
    fn density(&self, p: [f64; 3]) -> (f64, ()) {
        (self.scene.density(p), ())
    }

    fn appearance(&self, p: [f64; 3], _: &()) -> Appearance {
        let s = self.scene.fields(p);
        Appearance {
            albedo: s.albedo,
            shading: s.normal.map_or(0.0, |n| self.lighting.shade(n)),
            normal: s.normal,
        }
    }

    fn has_normals(&self) -> bool {
        true
    }
}

/// Reference render of the analytic scene with analytic normals and Lambertian shading.
pub fn render_reference(
    scene: &SyntheticScene,
    cam: &Camera,
    lighting: &ShLighting,
    opts: &RenderOptions,
) -> Result<RenderOutput> {
    render_field(
        &ReferenceField {
            scene,
            lighting: *lighting,
        },
        cam,
        opts,
    )
}

/// Replacement raw density where the scene density is exactly zero.
pub const RAW_FLOOR: f64 = -30.0;
/// Albedo targets are clamped into `[eps, 1 - eps]` before the logit.
pub const ALBEDO_EPS: f64 = 1e-4;
/// Shading targets are clamped to at least this value before inversion.
pub const SHADING_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BakeOptions {
    /// Weighted refinement sweeps for the appearance channels.
    pub sweeps: usize,
    /// Width (in raw density units) of the surface band the appearance fit favors.
    pub band: f64,
    /// Weight given to points far from any surface.
    pub weight_floor: f64,
}

impl Default for BakeOptions {
    fn default() -> Self {
        Self {
            sweeps: 8,
            band: 6.0,
            weight_floor: 1e-3,
        }
    }
}

/// Tri-planes together with the decoder they are meant for.
#[derive(Clone, Debug, PartialEq)]
pub struct BakedScene {
    pub dual: DualTriPlane,
    pub decoder: DecoderParams,
}

#[derive(Clone, Debug)]
pub struct BakeReport {
    pub dual: DualTriPlane,
    /// Lattice values clamped into the activation ranges.
    pub clamped: usize,
}

/// Least-squares tri-plane fit of the scene's inverse-activated fields.
///
/// Raw targets are sampled on the `R^3` lattice of texel centers, where a
/// tri-plane sample is exactly the mean of three texels. Density uses the
/// closed-form unweighted solution; albedo and shading start from it and are
/// refined with surface-weighted Gauss-Seidel sweeps. Plane values are mapped
/// to features through the decoder pseudo-inverse.
pub fn bake_scene_to_triplanes(
    scene: &SyntheticScene,
    lighting: &ShLighting,
    resolution: usize,
    dec: &DecoderParams,
) -> Result<BakeReport> {
    bake_scene_with(scene, lighting, resolution, dec, &BakeOptions::default())
}

pub fn bake_scene_with(
    scene: &SyntheticScene,
    lighting: &ShLighting,
    resolution: usize,
    dec: &DecoderParams,
    opts: &BakeOptions,
) -> Result<BakeReport> {
    dec.validate()?;
    if resolution < 2 {
        return Err(Error::Dimension(format!("resolution {resolution} < 2")));
    }
    let r = resolution;
    let n3 = r * r * r;
    let centers: Vec<f64> = (0..r).map(|i| -1.0 + (2 * i + 1) as f64 / r as f64).collect();

    // Targets: raw density, three albedo logits, raw shading; plus fit weights.
    let mut targets: Vec<Vec<f32>> = (0..5).map(|_| vec![0f32; n3]).collect();
    let mut weights = vec![0f32; n3];
    let clamped: usize = {
        let mut slices: Vec<_> = {
            let mut t_iter = targets.iter_mut().map(|t| t.chunks_mut(r * r));
            let mut d = t_iter.next().unwrap();
            let mut a0 = t_iter.next().unwrap();
            let mut a1 = t_iter.next().unwrap();
            let mut a2 = t_iter.next().unwrap();
            let mut s = t_iter.next().unwrap();
            let mut wt = weights.chunks_mut(r * r);
            (0..r)
                .map(|_| {
                    (
                        d.next().unwrap(),
                        a0.next().unwrap(),
                        a1.next().unwrap(),
                        a2.next().unwrap(),
                        s.next().unwrap(),
                        wt.next().unwrap(),
                    )
                })
                .collect()
        };
        slices
            .par_iter_mut()
            .enumerate()
            .map(|(k, (d, a0, a1, a2, s, wt))| {
                let mut clamped = 0usize;
                for j in 0..r {
                    for i in 0..r {
                        let x = [centers[i], centers[j], centers[k]];
                        let f = scene.fields(x);
                        let idx = j * r + i;
                        let mut raw = f.raw_density;
                        if !raw.is_finite() {
                            clamped += 1;
                            raw = RAW_FLOOR;
                        }
                        d[idx] = raw as f32;
                        let mut alb = [0.0; 3];
                        for c in 0..3 {
                            let a = f.albedo[c];
                            let ac = a.clamp(ALBEDO_EPS, 1.0 - ALBEDO_EPS);
                            if ac != a {
                                clamped += 1;
                            }
                            alb[c] = logit(ac);
                        }
                        a0[idx] = alb[0] as f32;
                        a1[idx] = alb[1] as f32;
                        a2[idx] = alb[2] as f32;
                        let shade = f.normal.map_or(0.0, |n| lighting.shade(n));
                        let sc = shade.max(SHADING_FLOOR);
                        if sc != shade {
                            clamped += 1;
                        }
                        s[idx] = softplus_inv(sc) as f32;
                        let band = (raw.max(RAW_FLOOR) / opts.band).powi(2);
                        wt[idx] = (opts.weight_floor + (-band).exp()) as f32;
                    }
                }
                clamped
            })
            .sum()
    };

    let mut plane_values: Vec<[Vec<f64>; 3]> = Vec::with_capacity(5);
    for (ch, target) in targets.iter().enumerate() {
        let mut planes = additive_fit(target, r);
        if ch > 0 {
            for _ in 0..opts.sweeps {
                weighted_sweep(target, &weights, r, &mut planes);
            }
        }
        plane_values.push(planes);
    }
    drop(targets);

    let albedo = planes_to_features(
        &plane_values[0..4],
        r,
        &dec.albedo_weight,
        &dec.albedo_bias,
        dec.albedo_channels,
    )?;
    let shading = planes_to_features(
        &plane_values[4..5],
        r,
        &dec.shading_weight,
        &[dec.shading_bias],
        dec.shading_channels,
    )?;
    Ok(BakeReport {
        dual: DualTriPlane::new(albedo, shading, *lighting),
        clamped,
    })
}

#[inline]
fn lattice(r: usize, i: usize, j: usize, k: usize) -> usize {
    (k * r + j) * r + i
}

/// Closed-form least squares `F ~ (A_ij + B_ik + C_jk) / 3` with uniform weights.
/// Planes are returned as `[A (row j, col i), B (row k, col i), C (row k, col j)]`.
fn additive_fit(f: &[f32], r: usize) -> [Vec<f64>; 3] {
    let rf = r as f64;
    let mut m_ij = vec![0.0; r * r];
    let mut m_ik = vec![0.0; r * r];
    let mut m_jk = vec![0.0; r * r];
    for k in 0..r {
        for j in 0..r {
            for i in 0..r {
                let v = f[lattice(r, i, j, k)] as f64;
                m_ij[j * r + i] += v;
                m_ik[k * r + i] += v;
                m_jk[k * r + j] += v;
            }
        }
    }
    m_ij.iter_mut().chain(m_ik.iter_mut()).chain(m_jk.iter_mut()).for_each(|v| *v /= rf);
    let mut m_i = vec![0.0; r];
    let mut m_j = vec![0.0; r];
    let mut m_k = vec![0.0; r];
    for a in 0..r {
        for b in 0..r {
            m_i[b] += m_ij[a * r + b] / rf; // row j, col i
            m_j[a] += m_ij[a * r + b] / rf;
            m_k[a] += m_ik[a * r + b] / rf; // row k, col i
        }
    }
    let m = m_i.iter().sum::<f64>() / rf;
    let mut a_pl = vec![0.0; r * r];
    let mut b_pl = vec![0.0; r * r];
    let mut c_pl = vec![0.0; r * r];
    for row in 0..r {
        for col in 0..r {
            let idx = row * r + col;
            a_pl[idx] = 3.0 * (m_ij[idx] - 0.5 * m_i[col] - 0.5 * m_j[row] + m / 3.0);
            b_pl[idx] = 3.0 * (m_ik[idx] - 0.5 * m_i[col] - 0.5 * m_k[row] + m / 3.0);
            c_pl[idx] = 3.0 * (m_jk[idx] - 0.5 * m_j[col] - 0.5 * m_k[row] + m / 3.0);
        }
    }
    [a_pl, b_pl, c_pl]
}

/// One Gauss-Seidel pass of `min sum w (A_ij + B_ik + C_jk - 3F)^2`.
fn weighted_sweep(f: &[f32], w: &[f32], r: usize, planes: &mut [Vec<f64>; 3]) {
    let [a_pl, b_pl, c_pl] = planes;
    // A(j, i): sum over k
    a_pl.par_chunks_mut(r).enumerate().for_each(|(j, row)| {
        for (i, a) in row.iter_mut().enumerate() {
            let (mut num, mut den) = (0.0, 0.0);
            for k in 0..r {
                let idx = lattice(r, i, j, k);
                let wt = w[idx] as f64;
                num += wt * (3.0 * f[idx] as f64 - b_pl[k * r + i] - c_pl[k * r + j]);
                den += wt;
            }
            *a = num / den;
        }
    });
    // B(k, i): sum over j
    b_pl.par_chunks_mut(r).enumerate().for_each(|(k, row)| {
        for (i, b) in row.iter_mut().enumerate() {
            let (mut num, mut den) = (0.0, 0.0);
            for j in 0..r {
                let idx = lattice(r, i, j, k);
                let wt = w[idx] as f64;
                num += wt * (3.0 * f[idx] as f64 - a_pl[j * r + i] - c_pl[k * r + j]);
                den += wt;
            }
            *b = num / den;
        }
    });
    // C(k, j): sum over i
    c_pl.par_chunks_mut(r).enumerate().for_each(|(k, row)| {
        for (j, c) in row.iter_mut().enumerate() {
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..r {
                let idx = lattice(r, i, j, k);
                let wt = w[idx] as f64;
                num += wt * (3.0 * f[idx] as f64 - a_pl[j * r + i] - b_pl[k * r + i]);
                den += wt;
            }
            *c = num / den;
        }
    });
}

/// Map per-target plane values through the decoder pseudo-inverse.
fn planes_to_features(
    target_planes: &[[Vec<f64>; 3]],
    r: usize,
    weight: &[f64],
    bias: &[f64],
    channels: usize,
) -> Result<TriPlane> {
    let outs = target_planes.len();
    let w = DMatrix::from_row_slice(outs, channels, weight);
    let pinv = w
        .clone()
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::InvalidArgument(format!("decoder pseudo-inverse failed: {e}")))?;
    let mut data = vec![0f32; 3 * r * r * channels];
    for plane in 0..3 {
        for texel in 0..r * r {
            for c in 0..channels {
                let mut v = 0.0;
                for o in 0..outs {
                    v += pinv[(c, o)] * (target_planes[o][plane][texel] - bias[o]);
                }
                data[(plane * r * r + texel) * channels + c] = v as f32;
            }
        }
    }
    TriPlane::from_data(r, channels, data)
}

/// Per-pixel displacement from a target frame to the matching position in a
/// source frame, with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub flow: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            flow: vec![[0.0; 2]; width * height],
            valid: vec![true; width * height],
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid_count() as f64 / self.valid.len().max(1) as f64
    }
}

/// Minimum accumulated opacity for a pixel to count as foreground.
pub const FOREGROUND_OPACITY: f64 = 0.99;
/// Depth disagreement (scene units) beyond which a reprojection is occluded.
pub const OCCLUSION_TOLERANCE: f64 = 0.05;

/// What flow computation needs from one frame: intrinsics, pose and the ray
/// distance to the surface per pixel (`None` for background).
#[derive(Clone, Debug)]
pub struct FrameGeometry {
    pub camera: Camera,
    pub pose: Pose,
    pub surface: Vec<Option<f64>>,
}

impl FrameGeometry {
    /// Opacity-normalized depth `sum w t / sum w` on pixels with opacity of at
    /// least [`FOREGROUND_OPACITY`].
    pub fn from_render(out: &RenderOutput, cam: &Camera, opts: &RenderOptions) -> Result<Self> {
        let (_, far) = opts.bounds(cam)?;
        if out.width() != cam.image_size || out.height() != cam.image_size {
            return Err(Error::Dimension(format!(
                "render {}x{} vs camera size {}",
                out.width(),
                out.height(),
                cam.image_size
            )));
        }
        let surface = out
            .weights_sum
            .data
            .iter()
            .zip(&out.depth.data)
            .map(|(&w, &d)| (w >= FOREGROUND_OPACITY).then(|| (d - (1.0 - w) * far) / w))
            .collect();
        Ok(Self {
            camera: *cam,
            pose: cam.pose(),
            surface,
        })
    }
}

/// Exact flow: unproject every foreground pixel of `target` with its depth,
/// reproject into `source`. Pixels that leave the frame, hit background or
/// are occluded in the source are invalid.
pub fn ground_truth_flow(
    target: &RenderOutput,
    cam_target: &Camera,
    source: &RenderOutput,
    cam_source: &Camera,
    opts: &RenderOptions,
) -> Result<FlowField> {
    Ok(reprojection_flow(
        &FrameGeometry::from_render(target, cam_target, opts)?,
        &FrameGeometry::from_render(source, cam_source, opts)?,
    ))
}

/// Flow on the target grid pointing at source pixel positions.
pub fn reprojection_flow(target: &FrameGeometry, source: &FrameGeometry) -> FlowField {
    let n = target.camera.image_size;
    let ns = source.camera.image_size;
    let mut flow = FlowField {
        width: n,
        height: n,
        flow: vec![[0.0; 2]; n * n],
        valid: vec![false; n * n],
    };
    let max = (ns - 1) as f64;
    for row in 0..n {
        for col in 0..n {
            let idx = row * n + col;
            let Some(t) = target.surface[idx] else {
                continue;
            };
            let ray = target.camera.ray(&target.pose, col, row);
            let x = [
                ray.origin[0] + t * ray.direction[0],
                ray.origin[1] + t * ray.direction[1],
                ray.origin[2] + t * ray.direction[2],
            ];
            let Some((px, _)) = source.camera.project(&source.pose, x) else {
                continue;
            };
            flow.flow[idx] = [px[0] - col as f64, px[1] - row as f64];
            if !(px[0] >= 0.0 && px[0] <= max && px[1] >= 0.0 && px[1] <= max) {
                continue;
            }
            let d = sub(x, source.pose.translation);
            let dist = dot(d, d).sqrt();
            if let Some(sd) = bilinear_surface(&source.surface, ns, px) {
                flow.valid[idx] = (sd - dist).abs() <= OCCLUSION_TOLERANCE;
            }
        }
    }
    flow
}

/// Bilinear surface distance, `None` if any contributing pixel is background.
fn bilinear_surface(surface: &[Option<f64>], n: usize, p: [f64; 2]) -> Option<f64> {
    let x0 = (p[0].floor() as usize).min(n - 1);
    let y0 = (p[1].floor() as usize).min(n - 1);
    let x1 = (x0 + 1).min(n - 1);
    let y1 = (y0 + 1).min(n - 1);
    let tx = p[0] - x0 as f64;
    let ty = p[1] - y0 as f64;
    let mut acc = 0.0;
    for (x, y, w) in [
        (x0, y0, (1.0 - tx) * (1.0 - ty)),
        (x1, y0, tx * (1.0 - ty)),
        (x0, y1, (1.0 - tx) * ty),
        (x1, y1, tx * ty),
    ] {
        if w > 1e-9 {
            acc += w * surface[y * n + x]?;
        }
    }
    Some(acc)
}

/// Result of [`warp_backward`].
#[derive(Clone, Debug, PartialEq)]
pub struct WarpResult {
    pub image: Image,
    /// `false` where the flow was invalid and the destination value was kept.
    pub valid: Vec<bool>,
}

/// Resample `source` at `q + flow(q)` for every destination pixel `q`.
/// Invalid-flow pixels copy `destination`.
pub fn warp_backward(source: &Image, flow: &FlowField, destination: &Image) -> Result<WarpResult> {
    source.check_same_shape(destination)?;
    if flow.width != source.width || flow.height != source.height {
        return Err(Error::Dimension(format!(
            "flow {}x{} vs image {}x{}",
            flow.width, flow.height, source.width, source.height
        )));
    }
    let mut image = destination.clone();
    let c = source.channels;
    let mut buf = vec![0.0; c];
    for row in 0..source.height {
        for col in 0..source.width {
            let idx = row * source.width + col;
            if !flow.valid[idx] {
                continue;
            }
            let [dx, dy] = flow.flow[idx];
            source.sample_bilinear(col as f64 + dx, row as f64 + dy, &mut buf);
            image.pixel_mut(col, row).copy_from_slice(&buf);
        }
    }
    Ok(WarpResult {
        image,
        valid: flow.valid.clone(),
    })
}

/// Reference frames, cameras, lighting and exact flows for a camera path.
#[derive(Clone, Debug)]
pub struct GroundTruthBundle {
    pub frames: Vec<RenderOutput>,
    pub cameras: Vec<Camera>,
    pub lighting: ShLighting,
    pub render_options: RenderOptions,
    /// `flows[i]` maps frame `i + 1` back into frame `i`.
    pub flows: Vec<FlowField>,
    /// `long_flows[i]` maps frame `i + 1` back into frame `0`.
    pub long_flows: Vec<FlowField>,
    /// Baked ground-truth tri-planes, when available.
    pub baked: Option<BakedScene>,
}

impl GroundTruthBundle {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Reference renders plus consecutive and first-to-current flows along a camera path.
pub fn generate_sequence(
    scene: &SyntheticScene,
    cameras: &[Camera],
    lighting: &ShLighting,
    opts: &RenderOptions,
) -> Result<GroundTruthBundle> {
    if cameras.len() < 2 {
        return Err(Error::InvalidArgument("sequence needs at least two cameras".into()));
    }
    let frames = cameras
        .iter()
        .map(|cam| render_reference(scene, cam, lighting, opts))
        .collect::<Result<Vec<_>>>()?;
    let mut flows = Vec::with_capacity(cameras.len() - 1);
    let mut long_flows = Vec::with_capacity(cameras.len() - 1);
    for i in 1..cameras.len() {
        flows.push(ground_truth_flow(&frames[i], &cameras[i], &frames[i - 1], &cameras[i - 1], opts)?);
        long_flows.push(ground_truth_flow(&frames[i], &cameras[i], &frames[0], &cameras[0], opts)?);
    }
    Ok(GroundTruthBundle {
        frames,
        cameras: cameras.to_vec(),
        lighting: *lighting,
        render_options: opts.clone(),
        flows,
        long_flows,
        baked: None,
    })
}
