//! Per-scene fitting of dual tri-planes to posed ground-truth renders.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::{DiffScene, Region};
use crate::error::{Error, Result};
use crate::losses::{albedo_loss, rgb_loss, shading_loss, total_loss, triplane_l1, tv_regularizer, LossTerms, LossWeights};
use crate::metrics::psnr;
use crate::render::{DecoderParams, PreparedScene, RenderOptions, RenderOutput};
use crate::scene::GroundTruthBundle;
use crate::triplane::{DualTriPlane, Init, TriPlane};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Albedo plane only; shading replaced by ground truth when available.
    Albedo,
    /// Shading plane only; albedo replaced by ground truth when available.
    Shading,
    Joint,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Albedo => "albedo",
            Stage::Shading => "shading",
            Stage::Joint => "joint",
        }
    }

    fn learns_albedo(self) -> bool {
        self != Stage::Shading
    }

    fn learns_shading(self) -> bool {
        self != Stage::Albedo
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub resolution: usize,
    pub albedo_iterations: usize,
    pub shading_iterations: usize,
    pub joint_iterations: usize,
    pub learning_rate: f64,
    pub samples_per_ray: usize,
    /// Rays per iteration are `patches_per_iteration * patch_size^2`.
    pub patch_size: usize,
    pub patches_per_iteration: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Views excluded from training and used for held-out PSNR.
    pub holdout: Vec<usize>,
    /// Standard deviation of the random plane initialization.
    pub init_sd: f32,
    /// Record training PSNR every this many iterations (0 = stage ends only).
    pub eval_every: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            albedo_iterations: 2000,
            shading_iterations: 2000,
            joint_iterations: 4000,
            learning_rate: 1e-4,
            samples_per_ray: 48,
            patch_size: 16,
            patches_per_iteration: 4,
            seed: 0,
            weights: LossWeights::default(),
            holdout: Vec::new(),
            init_sd: 0.01,
            eval_every: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 || self.samples_per_ray == 0 || self.patch_size == 0 || self.patches_per_iteration == 0 {
            return Err(Error::InvalidArgument("fit counts must be positive (resolution >= 2)".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        self.weights.validate()
    }

    pub fn total_iterations(&self) -> usize {
        self.albedo_iterations + self.shading_iterations + self.joint_iterations
    }

    fn schedule(&self) -> [(Stage, usize); 3] {
        [
            (Stage::Albedo, self.albedo_iterations),
            (Stage::Shading, self.shading_iterations),
            (Stage::Joint, self.joint_iterations),
        ]
    }
}

/// Unweighted loss terms (tri-plane L1 terms already scaled by the schedule).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TermValues {
    pub albedo: f64,
    pub shading: f64,
    pub rgb: f64,
    pub tv: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub stage: Stage,
    pub total: f64,
    pub terms: TermValues,
    pub lambda: f64,
    pub psnr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub start_iteration: usize,
    pub iterations: usize,
    pub seconds: f64,
    pub train_psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    #[serde(skip)]
    pub curve: Vec<IterationRecord>,
    pub stages: Vec<StageRecord>,
    /// Full-frame loss on the training views before and after fitting.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_terms: TermValues,
    pub train_psnr: f64,
    pub heldout_psnr: Option<f64>,
}

impl FitReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,stage,total,albedo,shading,rgb,tv,lambda,psnr\n");
        for r in &self.curve {
            let psnr = r.psnr.map(|p| format!("{p:.4}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.6},{}",
                r.iteration,
                r.stage.name(),
                r.total,
                r.terms.albedo,
                r.terms.shading,
                r.terms.rgb,
                r.terms.tv,
                r.lambda,
                psnr
            );
        }
        s
    }

    /// Write `loss.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("loss.csv"), self.to_csv())?;
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Adam with an f64 master copy of the parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    master: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(params: &[f32], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            master: params.iter().map(|&p| p as f64).collect(),
            m: vec![0.0; params.len()],
            v: vec![0.0; params.len()],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            self.master[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            params[i] = self.master[i] as f32;
        }
    }
}

/// Crop every image of a render to `region`.
pub fn crop_output(out: &RenderOutput, r: Region) -> RenderOutput {
    let crop = |img: &crate::image::Image| img.crop(r.x0, r.y0, r.width, r.height);
    RenderOutput {
        rgb: crop(&out.rgb),
        albedo: crop(&out.albedo),
        shading: crop(&out.shading),
        depth: crop(&out.depth),
        weights_sum: crop(&out.weights_sum),
        normals: out.normals.as_ref().map(crop),
        zero_gradient_samples: 0,
    }
}

#[derive(Clone, Copy)]
struct StageWeights {
    albedo: f64,
    shading: f64,
    rgb: f64,
}

fn stage_weights(stage: Stage, w: &LossWeights) -> StageWeights {
    StageWeights {
        albedo: if stage.learns_albedo() { w.albedo } else { 0.0 },
        shading: if stage.learns_shading() { w.shading } else { 0.0 },
        rgb: w.rgb,
    }
}

struct ImageTerms {
    values: TermValues,
    total: f64,
    grad_albedo: Vec<f64>,
    grad_shading: Vec<f64>,
}

/// Image-space loss terms of one region and their tri-plane gradients.
fn image_terms(
    scene: &DiffScene,
    cam: &crate::camera::Camera,
    opts: &RenderOptions,
    region: Region,
    gt: &RenderOutput,
    sw: StageWeights,
) -> Result<ImageTerms> {
    let pred = scene.render(cam, opts, region)?;
    let gt = crop_output(gt, region);
    let mut terms = LossTerms::default();
    let mut values = TermValues::default();
    if sw.albedo > 0.0 {
        terms.albedo = albedo_loss(&pred, &gt, scene.albedo, None, 0.0)?;
        values.albedo = terms.albedo.value;
    }
    if sw.shading > 0.0 {
        terms.shading = shading_loss(&pred, &gt, scene.shading, None, 0.0)?;
        values.shading = terms.shading.value;
    }
    if sw.rgb > 0.0 {
        terms.rgb = rgb_loss(&pred, &gt)?;
        values.rgb = terms.rgb.value;
    }
    let weights = LossWeights {
        albedo: sw.albedo,
        shading: sw.shading,
        rgb: sw.rgb,
        tv: 0.0,
        ..LossWeights::default()
    };
    let total = total_loss(&terms, &weights);
    let mut grad_albedo = vec![0.0; scene.albedo.len()];
    let mut grad_shading = vec![0.0; scene.shading.len()];
    scene.backward(
        cam,
        opts,
        region,
        total.d_rgb.as_ref(),
        total.d_albedo.as_ref(),
        total.d_shading.as_ref(),
        &mut grad_albedo,
        &mut grad_shading,
    )?;
    Ok(ImageTerms {
        values,
        total: total.value,
        grad_albedo,
        grad_shading,
    })
}

/// Tri-plane L1 and TV terms; adds their gradients into the buffers.
#[allow(clippy::too_many_arguments)]
fn plane_terms(
    learn: &DualTriPlane,
    truth: Option<&DualTriPlane>,
    stage: Stage,
    sw: StageWeights,
    w: &LossWeights,
    lambda: f64,
    values: &mut TermValues,
    grad_albedo: &mut [f64],
    grad_shading: &mut [f64],
) -> Result<f64> {
    let mut total = 0.0;
    let planes = [
        (stage.learns_albedo(), sw.albedo, &learn.albedo, truth.map(|t| &t.albedo), &mut values.albedo, grad_albedo, "albedo tri-plane"),
        (stage.learns_shading(), sw.shading, &learn.shading, truth.map(|t| &t.shading), &mut values.shading, grad_shading, "shading tri-plane"),
    ];
    let mut tv_value = 0.0;
    for (learns, weight, tp, target, value, grad, what) in planes {
        if !learns {
            continue;
        }
        if weight > 0.0 && lambda > 0.0 {
            let target = target.ok_or(Error::MissingGroundTruth(what))?;
            let (v, g) = triplane_l1(tp, target)?;
            *value += lambda * v;
            total += weight * lambda * v;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += weight * lambda * b);
        }
        if w.tv > 0.0 {
            let (v, g) = tv_regularizer(tp);
            tv_value += v;
            total += w.tv * v;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += w.tv * b);
        }
    }
    values.tv = tv_value;
    Ok(total)
}

fn render_planes<'a>(learn: &'a DualTriPlane, truth: Option<&'a DualTriPlane>, stage: Stage) -> (&'a TriPlane, &'a TriPlane) {
    match (stage, truth) {
        (Stage::Albedo, Some(t)) => (&learn.albedo, &t.shading),
        (Stage::Shading, Some(t)) => (&t.albedo, &learn.shading),
        _ => (&learn.albedo, &learn.shading),
    }
}

/// Joint loss of one full view and its tri-plane gradients.
#[derive(Clone, Debug)]
pub struct ViewLoss {
    pub value: f64,
    pub terms: TermValues,
    pub grad_albedo: Vec<f64>,
    pub grad_shading: Vec<f64>,
}

/// Every loss term of the joint stage for one view: image terms through the
/// renderer plus tri-plane L1 (weight `lambda`) and TV.
#[allow(clippy::too_many_arguments)]
pub fn view_loss(
    dual: &DualTriPlane,
    decoder: &DecoderParams,
    truth: Option<&DualTriPlane>,
    cam: &crate::camera::Camera,
    opts: &RenderOptions,
    gt: &RenderOutput,
    weights: &LossWeights,
    lambda: f64,
) -> Result<ViewLoss> {
    weights.validate()?;
    let scene = DiffScene {
        albedo: &dual.albedo,
        shading: &dual.shading,
        decoder,
    };
    let sw = stage_weights(Stage::Joint, weights);
    let mut t = image_terms(&scene, cam, opts, Region::full(cam.image_size), gt, sw)?;
    let extra = plane_terms(dual, truth, Stage::Joint, sw, weights, lambda, &mut t.values, &mut t.grad_albedo, &mut t.grad_shading)?;
    Ok(ViewLoss {
        value: t.total + extra,
        terms: t.values,
        grad_albedo: t.grad_albedo,
        grad_shading: t.grad_shading,
    })
}

/// Mean RGB PSNR of `dual` against the bundle frames at `views`.
pub fn views_psnr(dual: &DualTriPlane, decoder: &DecoderParams, bundle: &GroundTruthBundle, views: &[usize]) -> Result<f64> {
    if views.is_empty() {
        return Err(Error::InvalidArgument("no views to evaluate".into()));
    }
    let prepared = PreparedScene::new(dual, decoder)?;
    let mut sum = 0.0;
    for &v in views {
        let out = prepared.render(&bundle.cameras[v], &bundle.render_options)?;
        sum += psnr(&out.rgb, &bundle.frames[v].rgb, 1.0)?;
    }
    Ok(sum / views.len() as f64)
}

/// Full-frame joint loss over `views` (schedule at its final value).
pub fn evaluate_loss(
    dual: &DualTriPlane,
    decoder: &DecoderParams,
    bundle: &GroundTruthBundle,
    views: &[usize],
    cfg: &FitConfig,
) -> Result<(f64, TermValues)> {
    let scene = DiffScene {
        albedo: &dual.albedo,
        shading: &dual.shading,
        decoder,
    };
    let opts = RenderOptions {
        samples_per_ray: cfg.samples_per_ray,
        stratified: false,
        ..bundle.render_options.clone()
    };
    let sw = stage_weights(Stage::Joint, &cfg.weights);
    let per_view = views
        .par_iter()
        .map(|&v| {
            let cam = &bundle.cameras[v];
            image_terms(&scene, cam, &opts, Region::full(cam.image_size), &bundle.frames[v], sw)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = views.len().max(1) as f64;
    let mut values = TermValues::default();
    let mut total = 0.0;
    for t in &per_view {
        values.albedo += t.values.albedo / n;
        values.shading += t.values.shading / n;
        values.rgb += t.values.rgb / n;
        total += t.total / n;
    }
    let lambda = cfg.weights.lambda_end;
    let truth = bundle.baked.as_ref().map(|b| &b.dual);
    let mut ga = vec![0.0; dual.albedo.len()];
    let mut gs = vec![0.0; dual.shading.len()];
    let lambda = if truth.is_some() { lambda } else { 0.0 };
    total += plane_terms(dual, truth, Stage::Joint, sw, &cfg.weights, lambda, &mut values, &mut ga, &mut gs)?;
    Ok((total, values))
}

/// Fit from a random initialization.
pub fn fit(bundle: &GroundTruthBundle, cfg: &FitConfig) -> Result<(DualTriPlane, FitReport)> {
    fit_from(bundle, cfg, None)
}

/// Fit starting from `init` (or a seeded random initialization).
pub fn fit_from(bundle: &GroundTruthBundle, cfg: &FitConfig, init: Option<DualTriPlane>) -> Result<(DualTriPlane, FitReport)> {
    fit_observed(bundle, cfg, init, &mut |_, _| {})
}

/// [`fit_from`] that calls `observer(None, planes)` before the first stage and
/// `observer(Some(stage), planes)` after each stage.
pub fn fit_observed(
    bundle: &GroundTruthBundle,
    cfg: &FitConfig,
    init: Option<DualTriPlane>,
    observer: &mut dyn FnMut(Option<Stage>, &DualTriPlane),
) -> Result<(DualTriPlane, FitReport)> {
    cfg.validate()?;
    if bundle.frames.len() != bundle.cameras.len() {
        return Err(Error::Dimension("bundle frames and cameras differ in count".into()));
    }
    let train: Vec<usize> = (0..bundle.frames.len()).filter(|v| !cfg.holdout.contains(v)).collect();
    if train.len() < 3 {
        return Err(Error::InvalidArgument(format!("fitting needs at least 3 training views, got {}", train.len())));
    }
    if let Some(&bad) = cfg.holdout.iter().find(|&&v| v >= bundle.frames.len()) {
        return Err(Error::InvalidArgument(format!("holdout view {bad} out of range")));
    }
    let truth = bundle.baked.as_ref().map(|b| &b.dual);
    let decoder = match &bundle.baked {
        Some(b) => b.decoder.clone(),
        None => DecoderParams::standard(4, 1)?,
    };
    if cfg.weights.lambda_start.max(cfg.weights.lambda_end) > 0.0 && truth.is_none() {
        return Err(Error::MissingGroundTruth("baked tri-planes"));
    }
    let mut learn = match init {
        Some(d) => {
            decoder.check_dual(&d)?;
            d
        }
        None => {
            let a = TriPlane::new(
                cfg.resolution,
                decoder.albedo_channels,
                Init::Gaussian { mean: 0.0, sd: cfg.init_sd, seed: cfg.seed },
            )?;
            let s = TriPlane::new(
                cfg.resolution,
                decoder.shading_channels,
                Init::Gaussian { mean: 0.0, sd: cfg.init_sd, seed: cfg.seed.wrapping_add(1) },
            )?;
            DualTriPlane::new(a, s, bundle.lighting)
        }
    };
    learn.lighting_tag = bundle.lighting;
    if let Some(t) = truth {
        if cfg.weights.lambda_start.max(cfg.weights.lambda_end) > 0.0 && !t.same_shape(&learn) {
            return Err(Error::Dimension("baked tri-planes differ in shape from the fitted planes".into()));
        }
    }

    let (initial_loss, _) = evaluate_loss(&learn, &decoder, bundle, &train, cfg)?;
    let mut adam_a = Adam::new(learn.albedo.data(), cfg.learning_rate);
    let mut adam_s = Adam::new(learn.shading.data(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::with_capacity(cfg.total_iterations());
    let mut stages = Vec::new();
    let mut iteration = 0;
    observer(None, &learn);
    for (stage, count) in cfg.schedule() {
        let start = Instant::now();
        let start_iteration = iteration;
        let sw = stage_weights(stage, &cfg.weights);
        for _ in 0..count {
            let lambda = cfg.weights.lambda_at(iteration);
            let opts = RenderOptions {
                samples_per_ray: cfg.samples_per_ray,
                stratified: true,
                seed: rng.random(),
                ..bundle.render_options.clone()
            };
            let patches: Vec<(usize, Region)> = (0..cfg.patches_per_iteration)
                .map(|_| {
                    let v = train[rng.random_range(0..train.len())];
                    let n = bundle.cameras[v].image_size;
                    let p = cfg.patch_size.min(n);
                    let region = Region {
                        x0: rng.random_range(0..=n - p),
                        y0: rng.random_range(0..=n - p),
                        width: p,
                        height: p,
                    };
                    (v, region)
                })
                .collect();
            let (ra, rs) = render_planes(&learn, truth, stage);
            let scene = DiffScene {
                albedo: ra,
                shading: rs,
                decoder: &decoder,
            };
            let results = patches
                .par_iter()
                .map(|&(v, region)| image_terms(&scene, &bundle.cameras[v], &opts, region, &bundle.frames[v], sw))
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / results.len() as f64;
            let mut values = TermValues::default();
            let mut total = 0.0;
            let mut grad_a = vec![0.0; learn.albedo.len()];
            let mut grad_s = vec![0.0; learn.shading.len()];
            for r in &results {
                values.albedo += scale * r.values.albedo;
                values.shading += scale * r.values.shading;
                values.rgb += scale * r.values.rgb;
                total += scale * r.total;
                if stage.learns_albedo() {
                    grad_a.iter_mut().zip(&r.grad_albedo).for_each(|(a, b)| *a += scale * b);
                }
                if stage.learns_shading() {
                    grad_s.iter_mut().zip(&r.grad_shading).for_each(|(a, b)| *a += scale * b);
                }
            }
            total += plane_terms(&learn, truth, stage, sw, &cfg.weights, lambda, &mut values, &mut grad_a, &mut grad_s)?;
            if !total.is_finite() {
                return Err(Error::Divergence { iteration, loss: total });
            }
            if stage.learns_albedo() {
                adam_a.step(learn.albedo.data_mut(), &grad_a);
            }
            if stage.learns_shading() {
                adam_s.step(learn.shading.data_mut(), &grad_s);
            }
            let psnr = if cfg.eval_every > 0 && (iteration + 1) % cfg.eval_every == 0 {
                Some(views_psnr(&learn, &decoder, bundle, &train)?)
            } else {
                None
            };
            curve.push(IterationRecord {
                iteration,
                stage,
                total,
                terms: values,
                lambda,
                psnr,
            });
            iteration += 1;
        }
        let train_psnr = views_psnr(&learn, &decoder, bundle, &train)?;
        stages.push(StageRecord {
            stage,
            start_iteration,
            iterations: count,
            seconds: start.elapsed().as_secs_f64(),
            train_psnr,
        });
        observer(Some(stage), &learn);
    }
    let (final_loss, final_terms) = evaluate_loss(&learn, &decoder, bundle, &train, cfg)?;
    let train_psnr = views_psnr(&learn, &decoder, bundle, &train)?;
    let heldout_psnr = if cfg.holdout.is_empty() {
        None
    } else {
        Some(views_psnr(&learn, &decoder, bundle, &cfg.holdout)?)
    };
    let report = FitReport {
        curve,
        stages,
        initial_loss,
        final_loss,
        final_terms,
        train_psnr,
        heldout_psnr,
    };
    Ok((learn, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = vec![3.0f32, -2.0];
        let mut adam = Adam::new(&x, 0.1);
        for _ in 0..500 {
            let g: Vec<f64> = x.iter().map(|&v| 2.0 * v as f64).collect();
            adam.step(&mut x, &g);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2), "{x:?}");
    }

    #[test]
    fn config_validation() {
        assert!(FitConfig::default().validate().is_ok());
        let bad = FitConfig { learning_rate: 0.0, ..FitConfig::default() };
        assert!(bad.validate().is_err());
        let bad = FitConfig { patch_size: 0, ..FitConfig::default() };
        assert!(bad.validate().is_err());
    }
}
