//! Temporal consistency of per-frame tri-planes: an attention smoother over a
//! sliding window, synthetic flickering windows, short- and long-term
//! temporal losses and smoother calibration.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{interpolate_cameras, sample_camera_pose_with, Camera, ViewSlot};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::perceptual_proxy;
use crate::render::{DecoderParams, PreparedScene, RenderOptions, RenderOutput};
use crate::scene::{ground_truth_flow, warp_backward, FlowField};
use crate::triplane::{DualTriPlane, TriPlane, TriPlaneWindow, PLANE_COUNT};

/// Default smoother patch size (texels per side).
pub const SMOOTH_PATCH: usize = 4;

/// Frame range of the `n`-frame window used for frame `i` of a `len`-frame sequence.
pub fn window_range(i: usize, len: usize, n: usize) -> std::ops::Range<usize> {
    let start = i.saturating_sub(n / 2).min(len - n);
    start..start + n
}

fn smooth_plane<'a>(frames: &[&'a TriPlane], target: usize, tau: f64, patch: usize) -> Result<TriPlane> {
    let tp = frames[target];
    let (r, c) = (tp.resolution(), tp.channels());
    if r % patch != 0 {
        return Err(Error::Dimension(format!("patch {patch} does not divide resolution {r}")));
    }
    if frames.iter().any(|f| f.resolution() != r || f.channels() != c) {
        return Err(Error::Dimension("sequence frames differ in shape".into()));
    }
    let g = r / patch;
    let width = patch * c;
    let rows: Vec<Vec<f32>> = (0..PLANE_COUNT * g * g)
        .into_par_iter()
        .map(|t| {
            let (plane, gr, gc) = (t / (g * g), (t / g) % g, t % g);
            let start = |pr: usize| tp.index(plane, gr * patch + pr, gc * patch, 0);
            let span = |f: &'a TriPlane, pr: usize| -> &'a [f32] { &f.data()[start(pr)..start(pr) + width] };
            let dist: Vec<f64> = frames
                .iter()
                .map(|f| {
                    (0..patch)
                        .map(|pr| {
                            span(f, pr)
                                .iter()
                                .zip(span(tp, pr))
                                .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                                .sum::<f64>()
                        })
                        .sum()
                })
                .collect();
            let min = dist.iter().cloned().fold(f64::INFINITY, f64::min);
            let weights: Vec<f64> = dist.iter().map(|d| (-(d - min) / tau).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut out = vec![0.0f64; patch * width];
            for (f, w) in frames.iter().zip(&weights) {
                let w = w / total;
                for pr in 0..patch {
                    for (o, v) in out[pr * width..(pr + 1) * width].iter_mut().zip(span(f, pr)) {
                        *o += w * *v as f64;
                    }
                }
            }
            out.into_iter().map(|v| v as f32).collect()
        })
        .collect();
    let mut data = vec![0.0f32; tp.len()];
    for (t, values) in rows.iter().enumerate() {
        let (plane, gr, gc) = (t / (g * g), (t / g) % g, t % g);
        for pr in 0..patch {
            let start = tp.index(plane, gr * patch + pr, gc * patch, 0);
            data[start..start + width].copy_from_slice(&values[pr * width..(pr + 1) * width]);
        }
    }
    TriPlane::from_data(r, c, data)
}

/// Attention smoothing: each patch of frame `i` becomes the softmax-weighted
/// mean of the same patch over the window, with weights
/// `softmax_j(-|patch_i - patch_j|^2 / tau)`. Albedo and shading planes are
/// weighted independently.
pub fn nonparametric_smooth(sequence: &[DualTriPlane], tau: f64, window: usize) -> Result<Vec<DualTriPlane>> {
    nonparametric_smooth_with(sequence, tau, window, SMOOTH_PATCH)
}

pub fn nonparametric_smooth_with(sequence: &[DualTriPlane], tau: f64, window: usize, patch: usize) -> Result<Vec<DualTriPlane>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {tau}")));
    }
    if window == 0 || sequence.len() < window {
        return Err(Error::InvalidArgument(format!(
            "sequence of {} frames is shorter than the window {window}",
            sequence.len()
        )));
    }
    if patch == 0 {
        return Err(Error::InvalidArgument("patch must be positive".into()));
    }
    (0..sequence.len())
        .map(|i| {
            let range = window_range(i, sequence.len(), window);
            let target = i - range.start;
            let frames = &sequence[range];
            let albedo: Vec<&TriPlane> = frames.iter().map(|f| &f.albedo).collect();
            let shading: Vec<&TriPlane> = frames.iter().map(|f| &f.shading).collect();
            Ok(DualTriPlane::new(
                smooth_plane(&albedo, target, tau, patch)?,
                smooth_plane(&shading, target, tau, patch)?,
                sequence[i].lighting_tag,
            ))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowOptions {
    pub frames: usize,
    /// Noise standard deviation relative to each plane's feature standard deviation.
    pub noise_scale: f64,
    pub image_size: usize,
    pub render: RenderOptions,
}

impl Default for WindowOptions {
    fn default() -> Self {
        Self {
            frames: 5,
            noise_scale: 0.05,
            image_size: 64,
            render: RenderOptions::default().with_samples(64),
        }
    }
}

/// A synthetic flickering window over a static scene.
#[derive(Clone, Debug)]
pub struct TrainingWindow {
    pub noisy: TriPlaneWindow,
    pub clean: Vec<DualTriPlane>,
    pub cameras: Vec<Camera>,
    /// Renders of the clean planes.
    pub frames: Vec<RenderOutput>,
    /// `flows[i]` maps frame `i + 1` back into frame `i`.
    pub flows: Vec<FlowField>,
    /// `long_flows[i]` maps frame `i + 1` back into frame `0`.
    pub long_flows: Vec<FlowField>,
    /// Absolute noise standard deviations used for the albedo and shading planes.
    pub noise_sd: [f64; 2],
}

fn add_noise(tp: &TriPlane, sd: f64, rng: &mut ChaCha8Rng) -> Result<TriPlane> {
    if sd == 0.0 {
        return Ok(tp.clone());
    }
    let normal = Normal::new(0.0, sd).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let data = tp.data().iter().map(|&v| (v as f64 + normal.sample(rng)) as f32).collect();
    TriPlane::from_data(tp.resolution(), tp.channels(), data)
}

/// Interpolate between a first-slot and a second-slot camera, add independent
/// Gaussian noise to both planes of every frame and compute exact flows from
/// renders of the clean planes.
pub fn synth_training_window(
    clean: &DualTriPlane,
    decoder: &DecoderParams,
    opts: &WindowOptions,
    seed: u64,
) -> Result<TrainingWindow> {
    if opts.frames < 2 {
        return Err(Error::InvalidArgument("a window needs at least two frames".into()));
    }
    if !(opts.noise_scale >= 0.0) {
        return Err(Error::InvalidArgument("noise scale must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = sample_camera_pose_with(&mut rng, ViewSlot::First, opts.image_size);
    let b = sample_camera_pose_with(&mut rng, ViewSlot::Second, opts.image_size);
    let cameras = (0..opts.frames)
        .map(|i| interpolate_cameras(&a, &b, i as f64 / (opts.frames - 1) as f64))
        .collect::<Result<Vec<_>>>()?;
    let noise_sd = [
        opts.noise_scale * clean.albedo.std_dev(),
        opts.noise_scale * clean.shading.std_dev(),
    ];
    let mut noisy = Vec::with_capacity(opts.frames);
    for _ in 0..opts.frames {
        let albedo = add_noise(&clean.albedo, noise_sd[0], &mut rng)?;
        let shading = add_noise(&clean.shading, noise_sd[1], &mut rng)?;
        noisy.push(DualTriPlane::new(albedo, shading, clean.lighting_tag));
    }
    let prepared = PreparedScene::new(clean, decoder)?;
    let frames = cameras
        .iter()
        .map(|cam| prepared.render(cam, &opts.render))
        .collect::<Result<Vec<_>>>()?;
    let mut flows = Vec::with_capacity(opts.frames - 1);
    let mut long_flows = Vec::with_capacity(opts.frames - 1);
    for i in 1..opts.frames {
        flows.push(ground_truth_flow(&frames[i], &cameras[i], &frames[i - 1], &cameras[i - 1], &opts.render)?);
        long_flows.push(ground_truth_flow(&frames[i], &cameras[i], &frames[0], &cameras[0], &opts.render)?);
    }
    Ok(TrainingWindow {
        noisy: TriPlaneWindow::new(noisy, cameras.clone())?,
        clean: vec![clean.clone(); opts.frames],
        cameras,
        frames,
        flows,
        long_flows,
        noise_sd,
    })
}

/// Per-pixel `exp(-|I - I_warped|_1)`, zero where the flow is invalid.
pub fn consistency_mask(gt: &Image, gt_warped: &Image, valid: &[bool]) -> Result<Image> {
    gt.check_same_shape(gt_warped)?;
    let c = gt.channels;
    let data = (0..gt.pixel_count())
        .map(|p| {
            if !valid[p] {
                return 0.0;
            }
            let l1: f64 = (0..c).map(|k| (gt.data[p * c + k] - gt_warped.data[p * c + k]).abs()).sum();
            (-l1).exp()
        })
        .collect();
    Image::from_vec(gt.width, gt.height, 1, data)
}

fn apply_mask(img: &Image, mask: &Image) -> Image {
    let c = img.channels;
    let mut out = img.clone();
    for (p, m) in mask.data.iter().enumerate() {
        out.data[p * c..(p + 1) * c].iter_mut().for_each(|v| *v *= m);
    }
    out
}

/// Masked proxy distance between each of rgb, albedo and shading of `current`
/// and `reference` warped by `flow`, summed. The mask comes from the ground
/// truth frames.
pub fn temporal_term(
    current: &RenderOutput,
    reference: &RenderOutput,
    flow: &FlowField,
    gt_current: &Image,
    gt_reference: &Image,
) -> Result<f64> {
    let gt_warp = warp_backward(gt_reference, flow, gt_current)?;
    let mask = consistency_mask(gt_current, &gt_warp.image, &gt_warp.valid)?;
    let mut total = 0.0;
    for (cur, refr) in [
        (&current.rgb, &reference.rgb),
        (&current.albedo, &reference.albedo),
        (&current.shading, &reference.shading),
    ] {
        let warped = warp_backward(refr, flow, cur)?;
        total += perceptual_proxy(&apply_mask(cur, &mask), &apply_mask(&warped.image, &mask))?;
    }
    Ok(total)
}

/// Short-term loss between frame `i` and frame `i - 1` (`flow` maps `i` into `i - 1`).
pub fn temporal_loss_short(
    output: &RenderOutput,
    previous: &RenderOutput,
    flow: &FlowField,
    gt: &Image,
    gt_previous: &Image,
) -> Result<f64> {
    temporal_term(output, previous, flow, gt, gt_previous)
}

/// Long-term loss between frame `i` and the first frame (`flow` maps `i` into the first frame).
pub fn temporal_loss_long(
    output: &RenderOutput,
    first: &RenderOutput,
    flow: &FlowField,
    gt: &Image,
    gt_first: &Image,
) -> Result<f64> {
    temporal_term(output, first, flow, gt, gt_first)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemporalWeights {
    pub short: f64,
    pub long: f64,
    pub recon: f64,
}

impl Default for TemporalWeights {
    fn default() -> Self {
        Self {
            short: 1.0,
            long: 1.0,
            recon: 1.0,
        }
    }
}

pub fn temporal_objective(short: f64, long: f64, recon: f64, w: &TemporalWeights) -> f64 {
    w.short * short + w.long * long + w.recon * recon
}

/// Mean temporal terms of a rendered sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SequenceScore {
    pub short: f64,
    pub long: f64,
    pub recon: f64,
    pub objective: f64,
}

/// Short/long terms averaged over frames `1..`, reconstruction over all frames.
pub fn sequence_objective(
    outputs: &[RenderOutput],
    gt: &[RenderOutput],
    flows: &[FlowField],
    long_flows: &[FlowField],
    w: &TemporalWeights,
) -> Result<SequenceScore> {
    let n = outputs.len();
    if n < 2 || gt.len() != n || flows.len() != n - 1 || long_flows.len() != n - 1 {
        return Err(Error::Dimension("sequence, ground truth and flows disagree in length".into()));
    }
    let terms = (1..n)
        .into_par_iter()
        .map(|i| -> Result<(f64, f64)> {
            Ok((
                temporal_loss_short(&outputs[i], &outputs[i - 1], &flows[i - 1], &gt[i].rgb, &gt[i - 1].rgb)?,
                temporal_loss_long(&outputs[i], &outputs[0], &long_flows[i - 1], &gt[i].rgb, &gt[0].rgb)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let recon = outputs
        .iter()
        .zip(gt)
        .map(|(o, g)| perceptual_proxy(&o.rgb, &g.rgb))
        .collect::<Result<Vec<_>>>()?;
    let short = terms.iter().map(|t| t.0).sum::<f64>() / (n - 1) as f64;
    let long = terms.iter().map(|t| t.1).sum::<f64>() / (n - 1) as f64;
    let recon = recon.iter().sum::<f64>() / n as f64;
    Ok(SequenceScore {
        short,
        long,
        recon,
        objective: temporal_objective(short, long, recon, w),
    })
}

/// Render every frame of a tri-plane sequence.
pub fn render_sequence(
    sequence: &[DualTriPlane],
    decoder: &DecoderParams,
    cameras: &[Camera],
    opts: &RenderOptions,
) -> Result<Vec<RenderOutput>> {
    if sequence.len() != cameras.len() {
        return Err(Error::Dimension("one camera per frame expected".into()));
    }
    sequence
        .iter()
        .zip(cameras)
        .map(|(d, cam)| PreparedScene::new(d, decoder)?.render(cam, opts))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub tau: f64,
    #[serde(flatten)]
    pub score: SequenceScore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub best_tau: f64,
    pub table: Vec<CalibrationRow>,
}

impl Calibration {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("tau,short,long,recon,objective\n");
        for r in &self.table {
            let _ = writeln!(
                s,
                "{:e},{:.9e},{:.9e},{:.9e},{:.9e}",
                r.tau, r.score.short, r.score.long, r.score.recon, r.score.objective
            );
        }
        s
    }
}

/// Relative tolerance under which calibration objectives count as tied; ties
/// go to the larger temperature.
pub const CALIBRATION_TIE: f64 = 1e-9;

/// Score a smoothed window.
pub fn score_window(
    window: &TrainingWindow,
    decoder: &DecoderParams,
    tau: f64,
    opts: &RenderOptions,
    w: &TemporalWeights,
) -> Result<SequenceScore> {
    let smoothed = nonparametric_smooth(&window.noisy.frames, tau, window.noisy.len())?;
    let outputs = render_sequence(&smoothed, decoder, &window.cameras, opts)?;
    sequence_objective(&outputs, &window.frames, &window.flows, &window.long_flows, w)
}

/// Pick the temperature with the lowest mean objective over `windows`.
pub fn calibrate_smoother(
    windows: &[TrainingWindow],
    taus: &[f64],
    decoder: &DecoderParams,
    opts: &RenderOptions,
    w: &TemporalWeights,
) -> Result<Calibration> {
    if windows.is_empty() || taus.is_empty() {
        return Err(Error::InvalidArgument("calibration needs windows and temperatures".into()));
    }
    let mut table = Vec::with_capacity(taus.len());
    for &tau in taus {
        let scores = windows
            .iter()
            .map(|win| score_window(win, decoder, tau, opts, w))
            .collect::<Result<Vec<_>>>()?;
        let n = scores.len() as f64;
        let mean = |f: fn(&SequenceScore) -> f64| scores.iter().map(f).sum::<f64>() / n;
        table.push(CalibrationRow {
            tau,
            score: SequenceScore {
                short: mean(|s| s.short),
                long: mean(|s| s.long),
                recon: mean(|s| s.recon),
                objective: mean(|s| s.objective),
            },
        });
    }
    let min = table.iter().map(|r| r.score.objective).fold(f64::INFINITY, f64::min);
    let best_tau = table
        .iter()
        .filter(|r| r.score.objective <= min + CALIBRATION_TIE * min.abs().max(1.0))
        .map(|r| r.tau)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(Calibration { best_tau, table })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sh::ShLighting;
    use crate::triplane::Init;

    fn dual(seed: u64) -> DualTriPlane {
        DualTriPlane::new(
            TriPlane::new(8, 2, Init::Gaussian { mean: 0.0, sd: 1.0, seed }).unwrap(),
            TriPlane::new(8, 1, Init::Gaussian { mean: 0.0, sd: 1.0, seed: seed + 100 }).unwrap(),
            ShLighting::dc(1.0),
        )
    }

    #[test]
    fn window_ranges() {
        assert_eq!(window_range(0, 10, 5), 0..5);
        assert_eq!(window_range(4, 10, 5), 2..7);
        assert_eq!(window_range(9, 10, 5), 5..10);
        assert_eq!(window_range(2, 5, 5), 0..5);
    }

    #[test]
    fn smoother_limits() {
        let seq: Vec<DualTriPlane> = (0..5).map(dual).collect();
        let sharp = nonparametric_smooth(&seq, 1e-9, 5).unwrap();
        for (a, b) in sharp.iter().zip(&seq) {
            assert_eq!(a.albedo, b.albedo);
        }
        let flat = nonparametric_smooth(&seq, 1e12, 5).unwrap();
        let k = 37;
        let mean = seq.iter().map(|d| d.albedo.data()[k] as f64).sum::<f64>() / 5.0;
        assert!((flat[0].albedo.data()[k] as f64 - mean).abs() < 1e-5);
        assert!(nonparametric_smooth(&seq, 0.0, 5).is_err());
        assert!(nonparametric_smooth(&seq[..3], 1.0, 5).is_err());
    }

    #[test]
    fn mask_shape() {
        let a = Image::filled(2, 1, 3, 0.5);
        let mut b = a.clone();
        b.data[3] = 0.9;
        let m = consistency_mask(&a, &b, &[true, true]).unwrap();
        assert_eq!(m.data[0], 1.0);
        assert!((m.data[1] - (-0.4f64).exp()).abs() < 1e-12);
        let m = consistency_mask(&a, &b, &[false, true]).unwrap();
        assert_eq!(m.data[0], 0.0);
    }

    #[test]
    fn objective_arithmetic() {
        let w = TemporalWeights { short: 0.5, long: 2.0, recon: 3.0 };
        assert!((temporal_objective(0.1, 0.2, 0.3, &w) - (0.05 + 0.4 + 0.9)).abs() < 1e-15);
        assert_eq!(temporal_objective(0.0, 0.0, 0.0, &TemporalWeights::default()), 0.0);
    }
}
