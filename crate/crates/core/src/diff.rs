//! Differentiable rendering of a dual tri-plane: forward and backward passes
//! through compositing, decoder activations and bilinear tri-plane sampling.
//!
//! The forward pass evaluates every sample (no skipping), so it is the exact
//! function whose gradient the backward pass returns.

use crate::camera::{Camera, Ray};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::render::{
    sample_depths, sigmoid, softplus, DecoderParams, PixelSample, RenderOptions, RenderOutput, SHADING_EPS,
};
use crate::triplane::{Taps, TriPlane};

/// Rectangle of pixels `[x0, x0 + width) x [y0, y0 + height)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl Region {
    pub fn full(size: usize) -> Self {
        Self {
            x0: 0,
            y0: 0,
            width: size,
            height: size,
        }
    }

    fn check(&self, cam: &Camera) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.x0 + self.width > cam.image_size || self.y0 + self.height > cam.image_size {
            return Err(Error::Dimension(format!("region {self:?} outside a {0}x{0} image", cam.image_size)));
        }
        Ok(())
    }
}

/// Learnable planes plus the fixed decoder.
#[derive(Clone, Copy)]
pub struct DiffScene<'a> {
    pub albedo: &'a TriPlane,
    pub shading: &'a TriPlane,
    pub decoder: &'a DecoderParams,
}

/// Upstream gradient of one pixel's outputs.
#[derive(Clone, Copy, Debug, Default)]
pub struct PixelUpstream {
    pub rgb: [f64; 3],
    pub albedo: [f64; 3],
    pub shading: f64,
}

struct Sample {
    taps_a: Taps,
    taps_s: Taps,
    raw: [f64; 4],
    shading_raw: f64,
    albedo: [f64; 3],
    shading: f64,
    alpha: f64,
    /// Transmittance after this sample.
    trans_after: f64,
    weight: f64,
}

fn sample_features(tp: &TriPlane, taps: &Taps, out: &mut [f64]) {
    let c = tp.channels();
    let data = tp.data();
    out.iter_mut().for_each(|v| *v = 0.0);
    for plane in 0..3 {
        let b = taps.base[plane];
        let s = taps.stride;
        for (k, texel) in [b, b + 1, b + s, b + s + 1].into_iter().enumerate() {
            let w = taps.weight[plane * 4 + k];
            for (o, v) in out.iter_mut().zip(&data[texel * c..(texel + 1) * c]) {
                *o += w * *v as f64;
            }
        }
    }
}

fn scatter(tp: &TriPlane, taps: &Taps, upstream: &[f64], grad: &mut [f64]) {
    let c = tp.channels();
    for plane in 0..3 {
        let b = taps.base[plane];
        let s = taps.stride;
        for (k, texel) in [b, b + 1, b + s, b + s + 1].into_iter().enumerate() {
            let w = taps.weight[plane * 4 + k];
            for (g, u) in grad[texel * c..(texel + 1) * c].iter_mut().zip(upstream) {
                *g += w * u;
            }
        }
    }
}

impl DiffScene<'_> {
    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        if self.albedo.channels() != self.decoder.albedo_channels || self.shading.channels() != self.decoder.shading_channels {
            return Err(Error::Dimension("tri-plane channels do not match the decoder".into()));
        }
        Ok(())
    }

    fn march(&self, ray: &Ray, depths: &[f64], bin: f64, samples: &mut Vec<Sample>) {
        samples.clear();
        let dec = self.decoder;
        let mut fa = vec![0.0; dec.albedo_channels];
        let mut fs = vec![0.0; dec.shading_channels];
        let mut trans = 1.0;
        for &t in depths {
            let p = [
                ray.origin[0] + t * ray.direction[0],
                ray.origin[1] + t * ray.direction[1],
                ray.origin[2] + t * ray.direction[2],
            ];
            let taps_a = Taps::new(self.albedo.resolution(), p);
            let taps_s = if self.shading.resolution() == self.albedo.resolution() {
                taps_a
            } else {
                Taps::new(self.shading.resolution(), p)
            };
            sample_features(self.albedo, &taps_a, &mut fa);
            sample_features(self.shading, &taps_s, &mut fs);
            let raw = dec.albedo_raw(&fa);
            let shading_raw = dec.shading_raw(&fs);
            let sigma = softplus(raw[0]);
            let tau = sigma * bin;
            let alpha = if tau < 1e-9 { tau } else { -(-tau).exp_m1() };
            let weight = trans * alpha;
            trans *= 1.0 - alpha;
            samples.push(Sample {
                taps_a,
                taps_s,
                raw,
                shading_raw,
                albedo: [sigmoid(raw[1]), sigmoid(raw[2]), sigmoid(raw[3])],
                shading: softplus(shading_raw),
                alpha,
                trans_after: trans,
                weight,
            });
        }
    }

    fn composite(samples: &[Sample], t: &[f64], far: f64, bg: [f64; 3]) -> PixelSample {
        let mut albedo = [0.0; 3];
        let mut u = 0.0;
        let mut depth = 0.0;
        for (s, t) in samples.iter().zip(t) {
            for k in 0..3 {
                albedo[k] += s.weight * s.albedo[k];
            }
            u += s.weight * s.shading;
            depth += s.weight * t;
        }
        let trans = samples.last().map_or(1.0, |s| s.trans_after);
        let weights_sum = 1.0 - trans;
        let shading = u / (weights_sum + SHADING_EPS);
        PixelSample {
            rgb: [0, 1, 2].map(|k| albedo[k] * shading + trans * bg[k]),
            albedo,
            shading,
            depth: depth + trans * far,
            weights_sum,
            normal: [0.0; 3],
            zero_gradient: 0,
        }
    }

    /// Forward render of `region` (output images have the region's size).
    pub fn render(&self, cam: &Camera, opts: &RenderOptions, region: Region) -> Result<RenderOutput> {
        self.validate()?;
        region.check(cam)?;
        let (near, far) = opts.bounds(cam)?;
        let pose = cam.pose();
        let n = cam.image_size;
        let (w, h) = (region.width, region.height);
        let mut out = RenderOutput {
            rgb: Image::new(w, h, 3),
            albedo: Image::new(w, h, 3),
            shading: Image::new(w, h, 1),
            depth: Image::new(w, h, 1),
            weights_sum: Image::new(w, h, 1),
            normals: None,
            zero_gradient_samples: 0,
        };
        let mut depths = Vec::new();
        let mut samples = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let (col, row) = (region.x0 + x, region.y0 + y);
                let ray = cam.ray(&pose, col, row);
                let jitter = opts.stratified.then_some((opts.seed, (row * n + col) as u64));
                let bin = sample_depths(near, far, opts.samples_per_ray, jitter, &mut depths);
                self.march(&ray, &depths, bin, &mut samples);
                let px = Self::composite(&samples, &depths, far, opts.background);
                let i = y * w + x;
                out.rgb.data[3 * i..3 * i + 3].copy_from_slice(&px.rgb);
                out.albedo.data[3 * i..3 * i + 3].copy_from_slice(&px.albedo);
                out.shading.data[i] = px.shading;
                out.depth.data[i] = px.depth;
                out.weights_sum.data[i] = px.weights_sum;
            }
        }
        Ok(out)
    }

    /// Accumulate texel gradients for upstream image gradients over `region`.
    /// Missing upstream images count as zero.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        cam: &Camera,
        opts: &RenderOptions,
        region: Region,
        d_rgb: Option<&Image>,
        d_albedo: Option<&Image>,
        d_shading: Option<&Image>,
        grad_albedo: &mut [f64],
        grad_shading: &mut [f64],
    ) -> Result<()> {
        self.validate()?;
        region.check(cam)?;
        if grad_albedo.len() != self.albedo.len() || grad_shading.len() != self.shading.len() {
            return Err(Error::Dimension("gradient buffers do not match the tri-planes".into()));
        }
        for img in [d_rgb, d_albedo, d_shading].into_iter().flatten() {
            if img.width != region.width || img.height != region.height {
                return Err(Error::Dimension("upstream image does not match the region".into()));
            }
        }
        let (near, far) = opts.bounds(cam)?;
        let pose = cam.pose();
        let n = cam.image_size;
        let mut depths = Vec::new();
        let mut samples = Vec::new();
        for y in 0..region.height {
            for x in 0..region.width {
                let i = y * region.width + x;
                let up = PixelUpstream {
                    rgb: d_rgb.map_or([0.0; 3], |g| [g.data[3 * i], g.data[3 * i + 1], g.data[3 * i + 2]]),
                    albedo: d_albedo.map_or([0.0; 3], |g| [g.data[3 * i], g.data[3 * i + 1], g.data[3 * i + 2]]),
                    shading: d_shading.map_or(0.0, |g| g.data[i]),
                };
                if up.rgb == [0.0; 3] && up.albedo == [0.0; 3] && up.shading == 0.0 {
                    continue;
                }
                let (col, row) = (region.x0 + x, region.y0 + y);
                let ray = cam.ray(&pose, col, row);
                let jitter = opts.stratified.then_some((opts.seed, (row * n + col) as u64));
                let bin = sample_depths(near, far, opts.samples_per_ray, jitter, &mut depths);
                self.march(&ray, &depths, bin, &mut samples);
                self.backward_ray(&samples, bin, opts.background, &up, grad_albedo, grad_shading);
            }
        }
        Ok(())
    }

    fn backward_ray(
        &self,
        samples: &[Sample],
        bin: f64,
        bg: [f64; 3],
        up: &PixelUpstream,
        grad_albedo: &mut [f64],
        grad_shading: &mut [f64],
    ) {
        let dec = self.decoder;
        let mut albedo = [0.0; 3];
        let mut u = 0.0;
        for s in samples {
            for k in 0..3 {
                albedo[k] += s.weight * s.albedo[k];
            }
            u += s.weight * s.shading;
        }
        let trans_end = samples.last().map_or(1.0, |s| s.trans_after);
        let norm = 1.0 - trans_end + SHADING_EPS;
        let shading = u / norm;

        // rgb = A * S + T_end * bg
        let g_a: [f64; 3] = [0, 1, 2].map(|k| up.albedo[k] + up.rgb[k] * shading);
        let g_s = up.shading + (0..3).map(|k| up.rgb[k] * albedo[k]).sum::<f64>();
        // S = U / (1 - T_end + eps)
        let g_u = g_s / norm;
        let g_trans = (0..3).map(|k| up.rgb[k] * bg[k]).sum::<f64>() + g_s * shading / norm;

        // Loss as sum_i w_i v_i + g_trans T_end.
        let values: Vec<f64> = samples
            .iter()
            .map(|s| (0..3).map(|k| g_a[k] * s.albedo[k]).sum::<f64>() + g_u * s.shading)
            .collect();
        let mut suffix = 0.0; // sum_{k > i} w_k v_k
        let mut fa = vec![0.0; dec.albedo_channels];
        let mut fs = vec![0.0; dec.shading_channels];
        for i in (0..samples.len()).rev() {
            let s = &samples[i];
            let d_sigma = bin * (s.trans_after * values[i] - suffix - g_trans * trans_end);
            suffix += s.weight * values[i];
            // softplus' = sigmoid, sigmoid' = a (1 - a)
            let g_raw = [
                d_sigma * sigmoid(s.raw[0]),
                s.weight * g_a[0] * s.albedo[0] * (1.0 - s.albedo[0]),
                s.weight * g_a[1] * s.albedo[1] * (1.0 - s.albedo[1]),
                s.weight * g_a[2] * s.albedo[2] * (1.0 - s.albedo[2]),
            ];
            let g_shading_raw = s.weight * g_u * sigmoid(s.shading_raw);
            let _ = s.alpha;
            for (c, f) in fa.iter_mut().enumerate() {
                *f = (0..4).map(|o| dec.albedo_weight[o * dec.albedo_channels + c] * g_raw[o]).sum();
            }
            for (c, f) in fs.iter_mut().enumerate() {
                *f = dec.shading_weight[c] * g_shading_raw;
            }
            scatter(self.albedo, &s.taps_a, &fa, grad_albedo);
            scatter(self.shading, &s.taps_s, &fs, grad_shading);
        }
    }
}
