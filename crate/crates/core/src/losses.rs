//! Image and tri-plane losses with gradients.
//!
//! Every loss returns its value together with gradients with respect to the
//! predicted images and tri-planes; the renderer backward pass turns image
//! gradients into texel gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::render::RenderOutput;
use crate::triplane::TriPlane;

/// Pyramid depth of the perceptual proxy.
pub const PROXY_LEVELS: usize = 3;

/// Mean absolute difference and its gradient with respect to `a`.
pub fn l1_mean(a: &Image, b: &Image) -> Result<(f64, Image)> {
    a.check_same_shape(b)?;
    let n = a.data.len().max(1) as f64;
    let mut grad = Image::new(a.width, a.height, a.channels);
    let mut sum = 0.0;
    for ((g, x), y) in grad.data.iter_mut().zip(&a.data).zip(&b.data) {
        let d = x - y;
        sum += d.abs();
        *g = sign(d) / n;
    }
    Ok((sum / n, grad))
}

/// Opacity-weighted mean absolute difference: `mean(m |a - b|)`.
pub fn weighted_l1_mean(a: &Image, b: &Image, mask: &Image) -> Result<(f64, Image)> {
    a.check_same_shape(b)?;
    if mask.width != a.width || mask.height != a.height || mask.channels != 1 {
        return Err(Error::Dimension("mask must be single-channel and match the image".into()));
    }
    let n = a.data.len().max(1) as f64;
    let c = a.channels;
    let mut grad = Image::new(a.width, a.height, c);
    let mut sum = 0.0;
    for (i, g) in grad.data.iter_mut().enumerate() {
        let m = mask.data[i / c];
        let d = a.data[i] - b.data[i];
        sum += m * d.abs();
        *g = m * sign(d) / n;
    }
    Ok((sum / n, grad))
}

#[inline]
fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// 2x2 box downsample (odd trailing rows and columns are dropped).
pub fn downsample(img: &Image) -> Image {
    let (w, h, c) = (img.width / 2, img.height / 2, img.channels);
    let mut out = Image::new(w, h, c);
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                let s = img.pixel(2 * x, 2 * y)[k]
                    + img.pixel(2 * x + 1, 2 * y)[k]
                    + img.pixel(2 * x, 2 * y + 1)[k]
                    + img.pixel(2 * x + 1, 2 * y + 1)[k];
                out.data[(y * w + x) * c + k] = 0.25 * s;
            }
        }
    }
    out
}

fn upsample_grad(grad: &Image, width: usize, height: usize) -> Image {
    let c = grad.channels;
    let mut out = Image::new(width, height, c);
    for y in 0..grad.height {
        for x in 0..grad.width {
            for k in 0..c {
                let g = 0.25 * grad.data[(y * grad.width + x) * c + k];
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    out.data[((2 * y + dy) * width + 2 * x + dx) * c + k] += g;
                }
            }
        }
    }
    out
}

/// Multi-scale L1: mean of per-level mean-L1 over a half-resolution pyramid
/// of up to `levels` levels (levels smaller than 1 pixel are omitted).
pub fn perceptual_proxy_levels(a: &Image, b: &Image, levels: usize) -> Result<(f64, Image)> {
    a.check_same_shape(b)?;
    if levels == 0 {
        return Err(Error::InvalidArgument("proxy needs at least one level".into()));
    }
    let mut pyramid = vec![(a.clone(), b.clone())];
    while pyramid.len() < levels {
        let (pa, pb) = pyramid.last().unwrap();
        if pa.width < 2 || pa.height < 2 {
            break;
        }
        pyramid.push((downsample(pa), downsample(pb)));
    }
    let count = pyramid.len() as f64;
    let mut value = 0.0;
    let mut grad: Option<Image> = None;
    for (pa, pb) in pyramid.iter().rev() {
        let (v, g) = l1_mean(pa, pb)?;
        value += v / count;
        let mut g = g;
        g.data.iter_mut().for_each(|x| *x /= count);
        if let Some(coarse) = grad.take() {
            let up = upsample_grad(&coarse, pa.width, pa.height);
            g.data.iter_mut().zip(&up.data).for_each(|(x, u)| *x += u);
        }
        grad = Some(g);
    }
    Ok((value, grad.unwrap()))
}

/// Stand-in for a learned perceptual distance: three-level multi-scale L1.
pub fn perceptual_proxy(a: &Image, b: &Image) -> Result<f64> {
    Ok(perceptual_proxy_levels(a, b, PROXY_LEVELS)?.0)
}

/// Mean absolute texel difference and its gradient with respect to `pred`.
pub fn triplane_l1(pred: &TriPlane, target: &TriPlane) -> Result<(f64, Vec<f64>)> {
    if !pred.same_shape(target) {
        return Err(Error::Dimension("tri-plane shapes differ".into()));
    }
    let n = pred.len().max(1) as f64;
    let mut grad = vec![0.0; pred.len()];
    let mut sum = 0.0;
    for ((g, x), y) in grad.iter_mut().zip(pred.data()).zip(target.data()) {
        let d = *x as f64 - *y as f64;
        sum += d.abs();
        *g = sign(d) / n;
    }
    Ok((sum / n, grad))
}

/// Mean squared forward difference along both plane axes, over every plane
/// and channel.
pub fn tv_regularizer(tp: &TriPlane) -> (f64, Vec<f64>) {
    let (r, c) = (tp.resolution(), tp.channels());
    let data = tp.data();
    let count = (3 * 2 * r * (r - 1) * c) as f64;
    let mut grad = vec![0.0; data.len()];
    let mut sum = 0.0;
    for plane in 0..3 {
        for row in 0..r {
            for col in 0..r {
                for ch in 0..c {
                    let i = tp.index(plane, row, col, ch);
                    for j in [
                        (col + 1 < r).then(|| tp.index(plane, row, col + 1, ch)),
                        (row + 1 < r).then(|| tp.index(plane, row + 1, col, ch)),
                    ]
                    .into_iter()
                    .flatten()
                    {
                        let d = data[j] as f64 - data[i] as f64;
                        sum += d * d;
                        grad[j] += 2.0 * d / count;
                        grad[i] -= 2.0 * d / count;
                    }
                }
            }
        }
    }
    (sum / count, grad)
}

/// Value and gradients of one loss term.
#[derive(Clone, Debug, Default)]
pub struct LossTerm {
    pub value: f64,
    pub d_rgb: Option<Image>,
    pub d_albedo: Option<Image>,
    pub d_shading: Option<Image>,
    pub d_albedo_plane: Option<Vec<f64>>,
    pub d_shading_plane: Option<Vec<f64>>,
}

/// `|A_hat - A|_1 + proxy(A_hat, A) + lambda_g |T_hat - T_g|_1`.
pub fn albedo_loss(
    pred: &RenderOutput,
    gt: &RenderOutput,
    t_pred: &TriPlane,
    t_g: Option<&TriPlane>,
    lambda_g: f64,
) -> Result<LossTerm> {
    let (l1, g1) = l1_mean(&pred.albedo, &gt.albedo)?;
    let (px, gp) = perceptual_proxy_levels(&pred.albedo, &gt.albedo, PROXY_LEVELS)?;
    let mut grad = g1;
    grad.data.iter_mut().zip(&gp.data).for_each(|(a, b)| *a += b);
    let mut term = LossTerm {
        value: l1 + px,
        d_albedo: Some(grad),
        ..Default::default()
    };
    if lambda_g > 0.0 {
        let t_g = t_g.ok_or(Error::MissingGroundTruth("albedo tri-plane"))?;
        let (v, g) = triplane_l1(t_pred, t_g)?;
        term.value += lambda_g * v;
        term.d_albedo_plane = Some(g.into_iter().map(|x| lambda_g * x).collect());
    }
    Ok(term)
}

/// `|W (S_hat - S)|_1 + lambda_s |T_S_hat - T_S|_1`, where `W` is the
/// ground-truth accumulated opacity (shading is undefined where nothing is hit).
pub fn shading_loss(
    pred: &RenderOutput,
    gt: &RenderOutput,
    t_pred: &TriPlane,
    t_gt: Option<&TriPlane>,
    lambda_s: f64,
) -> Result<LossTerm> {
    let (l1, g1) = weighted_l1_mean(&pred.shading, &gt.shading, &gt.weights_sum)?;
    let mut term = LossTerm {
        value: l1,
        d_shading: Some(g1),
        ..Default::default()
    };
    if lambda_s > 0.0 {
        let t_gt = t_gt.ok_or(Error::MissingGroundTruth("shading tri-plane"))?;
        let (v, g) = triplane_l1(t_pred, t_gt)?;
        term.value += lambda_s * v;
        term.d_shading_plane = Some(g.into_iter().map(|x| lambda_s * x).collect());
    }
    Ok(term)
}

/// `|I_hat - I|_1 + proxy(I_hat, I)`.
pub fn rgb_loss(pred: &RenderOutput, gt: &RenderOutput) -> Result<LossTerm> {
    let (l1, g1) = l1_mean(&pred.rgb, &gt.rgb)?;
    let (px, gp) = perceptual_proxy_levels(&pred.rgb, &gt.rgb, PROXY_LEVELS)?;
    let mut grad = g1;
    grad.data.iter_mut().zip(&gp.data).for_each(|(a, b)| *a += b);
    Ok(LossTerm {
        value: l1 + px,
        d_rgb: Some(grad),
        ..Default::default()
    })
}

/// Loss weights and schedules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub albedo: f64,
    pub shading: f64,
    pub rgb: f64,
    /// Adversarial slot; always 0.
    pub adv: f64,
    /// Feature-domain RGB slot; unused.
    pub feature: f64,
    pub tv: f64,
    /// Tri-plane L1 weights decay linearly from `start` to `end` over `decay_span` iterations.
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub decay_span: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            albedo: 1.0,
            shading: 1.0,
            rgb: 1.0,
            adv: 0.0,
            feature: 0.0,
            tv: 1e-4,
            lambda_start: 1.0,
            lambda_end: 0.01,
            decay_span: 2000,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.albedo,
            self.shading,
            self.rgb,
            self.adv,
            self.feature,
            self.tv,
            self.lambda_start,
            self.lambda_end,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument("loss weights must be finite and >= 0".into()));
        }
        if self.adv != 0.0 {
            return Err(Error::InvalidArgument("adversarial weight must be 0".into()));
        }
        Ok(())
    }

    /// Scheduled tri-plane weight at `iteration` (`lambda_g` and `lambda_s`).
    pub fn lambda_at(&self, iteration: usize) -> f64 {
        if self.decay_span == 0 {
            return self.lambda_end;
        }
        let t = (iteration as f64 / self.decay_span as f64).min(1.0);
        self.lambda_start + (self.lambda_end - self.lambda_start) * t
    }
}

/// Individual terms entering the total loss.
#[derive(Clone, Debug, Default)]
pub struct LossTerms {
    pub albedo: LossTerm,
    pub shading: LossTerm,
    pub rgb: LossTerm,
    /// TV of the albedo and shading planes.
    pub tv: LossTerm,
}

fn add_scaled_image(dst: &mut Option<Image>, src: &Option<Image>, w: f64) {
    if let Some(s) = src {
        match dst {
            Some(d) => d.data.iter_mut().zip(&s.data).for_each(|(a, b)| *a += w * b),
            None => {
                let mut c = s.clone();
                c.data.iter_mut().for_each(|v| *v *= w);
                *dst = Some(c);
            }
        }
    }
}

fn add_scaled_vec(dst: &mut Option<Vec<f64>>, src: &Option<Vec<f64>>, w: f64) {
    if let Some(s) = src {
        match dst {
            Some(d) => d.iter_mut().zip(s).for_each(|(a, b)| *a += w * b),
            None => *dst = Some(s.iter().map(|v| w * v).collect()),
        }
    }
}

/// Weighted sum `albedo L_A + shading L_S + rgb L_rgb + tv L_tv` (the
/// adversarial slot is fixed at 0) with the matching gradient combination.
pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> LossTerm {
    let mut out = LossTerm::default();
    for (term, weight) in [
        (&terms.albedo, w.albedo),
        (&terms.shading, w.shading),
        (&terms.rgb, w.rgb),
        (&terms.tv, w.tv),
    ] {
        if weight == 0.0 {
            continue;
        }
        out.value += weight * term.value;
        add_scaled_image(&mut out.d_rgb, &term.d_rgb, weight);
        add_scaled_image(&mut out.d_albedo, &term.d_albedo, weight);
        add_scaled_image(&mut out.d_shading, &term.d_shading, weight);
        add_scaled_vec(&mut out.d_albedo_plane, &term.d_albedo_plane, weight);
        add_scaled_vec(&mut out.d_shading_plane, &term.d_shading_plane, weight);
    }
    out
}

/// Largest relative error between `grad` and central differences of `f` at
/// `n_probes` coordinates (`probe(k)` picks the coordinate).
///
/// The relative error is `|g - fd| / max(|g|, |fd|, floor)`.
pub fn grad_check(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    grad: &[f64],
    probes: &[usize],
    step: f64,
    floor: f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    let mut xp = x.to_vec();
    for &k in probes {
        let orig = xp[k];
        xp[k] = orig + step;
        let hi = f(&xp);
        xp[k] = orig - step;
        let lo = f(&xp);
        xp[k] = orig;
        let fd = (hi - lo) / (2.0 * step);
        let denom = grad[k].abs().max(fd.abs()).max(floor);
        worst = worst.max((grad[k] - fd).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::triplane::Init;

    fn ramp(w: usize, h: usize, c: usize, s: f64) -> Image {
        Image::from_vec(w, h, c, (0..w * h * c).map(|i| ((i as f64) * s).sin()).collect()).unwrap()
    }

    #[test]
    fn proxy_single_level_is_mean_l1() {
        let a = ramp(8, 6, 3, 0.37);
        let b = ramp(8, 6, 3, 0.41);
        let direct: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data.len() as f64;
        let (v, _) = perceptual_proxy_levels(&a, &b, 1).unwrap();
        assert!((v - direct).abs() < 1e-12);
    }

    #[test]
    fn proxy_is_symmetric_and_zero_on_equal() {
        let a = ramp(16, 16, 3, 0.3);
        let b = ramp(16, 16, 3, 0.7);
        assert_eq!(perceptual_proxy(&a, &a).unwrap(), 0.0);
        assert!((perceptual_proxy(&a, &b).unwrap() - perceptual_proxy(&b, &a).unwrap()).abs() < 1e-15);
        assert!(perceptual_proxy(&a, &b).is_ok_and(|v| v > 0.0));
        assert!(perceptual_proxy(&a, &ramp(8, 16, 3, 0.3)).is_err());
    }

    #[test]
    fn proxy_gradient_matches_finite_differences() {
        let a = ramp(8, 8, 1, 0.37);
        let b = ramp(8, 8, 1, 0.91);
        let (_, g) = perceptual_proxy_levels(&a, &b, 3).unwrap();
        let mut f = |x: &[f64]| {
            let img = Image::from_vec(8, 8, 1, x.to_vec()).unwrap();
            perceptual_proxy_levels(&img, &b, 3).unwrap().0
        };
        let probes: Vec<usize> = (0..64).collect();
        assert!(grad_check(&mut f, &a.data, &g.data, &probes, 1e-7, 1e-9) < 1e-5);
    }

    #[test]
    fn tv_of_constant_is_zero_and_ramp_is_closed_form() {
        let tp = TriPlane::new(5, 2, Init::Constant { value: 0.7 }).unwrap();
        assert_eq!(tv_regularizer(&tp).0, 0.0);
        let a = 0.3;
        let mut ramp = TriPlane::new(5, 1, Init::Zeros).unwrap();
        for plane in 0..3 {
            for row in 0..5 {
                for col in 0..5 {
                    let i = ramp.index(plane, row, col, 0);
                    ramp.data_mut()[i] = (a * col as f64) as f32;
                }
            }
        }
        // Half the differences are `a`, half are 0.
        let expected = (a as f32 as f64).powi(2) / 2.0;
        assert!((tv_regularizer(&ramp).0 - expected).abs() < 1e-6);
    }

    #[test]
    fn tv_gradient_matches_finite_differences() {
        let tp = TriPlane::new(4, 2, Init::Gaussian { mean: 0.0, sd: 1.0, seed: 5 }).unwrap();
        let (_, g) = tv_regularizer(&tp);
        let x: Vec<f64> = tp.data().iter().map(|v| *v as f64).collect();
        let mut f = |x: &[f64]| {
            let t = TriPlane::from_data(4, 2, x.iter().map(|v| *v as f32).collect()).unwrap();
            tv_regularizer(&t).0
        };
        // f32 storage: use a step that survives rounding.
        let probes: Vec<usize> = (0..x.len()).step_by(3).collect();
        assert!(grad_check(&mut f, &x, &g, &probes, 1e-2, 1e-6) < 1e-3);
    }

    #[test]
    fn lambda_schedule_endpoints_and_monotone() {
        let w = LossWeights::default();
        assert_eq!(w.lambda_at(0), 1.0);
        assert!((w.lambda_at(w.decay_span) - 0.01).abs() < 1e-15);
        assert!((w.lambda_at(10 * w.decay_span) - 0.01).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for i in (0..=w.decay_span).step_by(50) {
            assert!(w.lambda_at(i) <= prev);
            prev = w.lambda_at(i);
        }
    }

    #[test]
    fn quadratic_grad_check() {
        let x = [0.3, -1.2, 2.0, 0.5];
        let grad: Vec<f64> = x.iter().enumerate().map(|(i, v)| 2.0 * (i as f64 + 1.0) * v).collect();
        let mut f = |x: &[f64]| x.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum();
        assert!(grad_check(&mut f, &x, &grad, &[0, 1, 2, 3], 1e-4, 1e-12) < 1e-6);
    }
}
