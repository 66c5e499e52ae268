//! Relighting quality metrics: lighting error and instability, warping error,
//! adjacent-frame proxy distance, PSNR and render timing.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::{SMatrix, SVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::perceptual_proxy;
use crate::render::RenderOutput;
use crate::scene::{warp_backward, FlowField};
use crate::sh::{renormalize_sh, sh_basis, ShLighting, SH_COUNT};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;
/// Ridge weight of the lighting fit.
pub const LIGHTING_RIDGE: f64 = 1e-3;
/// Pixels with shading at or below this are treated as clamped and ignored.
pub const UNCLAMPED_MIN: f64 = 0.05;
/// Smallest accepted eigenvalue ratio of the normal-equation matrix.
pub const MIN_CONDITIONING: f64 = 1e-6;

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP`].
pub fn psnr(image: &Image, reference: &Image, peak: f64) -> Result<f64> {
    image.check_same_shape(reference)?;
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument(format!("psnr peak must be > 0, got {peak}")));
    }
    let mse = image
        .data
        .iter()
        .zip(&reference.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / image.data.len().max(1) as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// PSNR restricted to pixels where `mask > 0.5`.
pub fn masked_psnr(image: &Image, reference: &Image, mask: &Image, peak: f64) -> Result<f64> {
    image.check_same_shape(reference)?;
    if mask.width != image.width || mask.height != image.height || mask.channels != 1 {
        return Err(Error::Dimension("mask must be single-channel and match the image".into()));
    }
    let c = image.channels;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, m) in mask.data.iter().enumerate() {
        if *m > 0.5 {
            for k in 0..c {
                let d = image.data[i * c + k] - reference.data[i * c + k];
                sum += d * d;
            }
            n += c;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("mask selects no pixels".into()));
    }
    let mse = sum / n as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// Ridge least-squares SH lighting from a shading image and per-pixel normals.
/// Uses pixels where `mask > 0.5`, the normal is non-zero and the shading
/// exceeds [`UNCLAMPED_MIN`].
pub fn estimate_lighting(shading: &Image, normals: &Image, mask: &Image) -> Result<ShLighting> {
    let n = shading.pixel_count();
    if shading.channels != 1 || normals.channels != 3 || mask.channels != 1 {
        return Err(Error::Dimension("expected 1-channel shading and mask, 3-channel normals".into()));
    }
    if normals.pixel_count() != n || mask.pixel_count() != n {
        return Err(Error::Dimension("shading, normals and mask differ in size".into()));
    }
    let mut ata = SMatrix::<f64, SH_COUNT, SH_COUNT>::zeros();
    let mut atb = SVector::<f64, SH_COUNT>::zeros();
    let mut used = 0usize;
    for i in 0..n {
        let s = shading.data[i];
        if !(mask.data[i] > 0.5) || !(s > UNCLAMPED_MIN) {
            continue;
        }
        let v = [normals.data[3 * i], normals.data[3 * i + 1], normals.data[3 * i + 2]];
        if !(v[0] * v[0] + v[1] * v[1] + v[2] * v[2] > 1e-12) {
            continue;
        }
        let y = SVector::<f64, SH_COUNT>::from(sh_basis(v));
        ata += y * y.transpose();
        atb += y * s;
        used += 1;
    }
    if used < SH_COUNT {
        return Err(Error::RankDeficient { ratio: 0.0 });
    }
    let eig = ata.symmetric_eigen().eigenvalues;
    let max = eig.max();
    let ratio = if max > 0.0 { eig.min() / max } else { 0.0 };
    if !(ratio >= MIN_CONDITIONING) {
        return Err(Error::RankDeficient { ratio });
    }
    let system = ata + SMatrix::<f64, SH_COUNT, SH_COUNT>::identity() * LIGHTING_RIDGE;
    let solution = system
        .cholesky()
        .ok_or(Error::RankDeficient { ratio })?
        .solve(&atb);
    ShLighting::from_slice(solution.as_slice())
}

/// Distance between the renormalized lightings.
pub fn lighting_error(target: &ShLighting, estimate: &ShLighting) -> Result<f64> {
    Ok(renormalize_sh(target)?.distance(&renormalize_sh(estimate)?))
}

/// Mean distance between consecutive renormalized estimates (0 for fewer than two).
pub fn lighting_instability(estimates: &[ShLighting]) -> Result<f64> {
    if estimates.len() < 2 {
        return Ok(0.0);
    }
    let normed = estimates.iter().map(renormalize_sh).collect::<Result<Vec<_>>>()?;
    let sum: f64 = normed.windows(2).map(|w| w[1].distance(&w[0])).sum();
    Ok(sum / (normed.len() - 1) as f64)
}

/// Mean over consecutive pairs of the MSE between frame `i + 1` and frame `i`
/// warped by `flows[i]`, over pixels where the flow is valid and the optional
/// `masks[i]` (on frame `i + 1`) exceeds 0.5.
pub fn warping_error(frames: &[Image], flows: &[FlowField], masks: Option<&[Image]>) -> Result<f64> {
    if frames.len() < 2 {
        return Ok(0.0);
    }
    if flows.len() != frames.len() - 1 {
        return Err(Error::Dimension(format!("{} frames need {} flows, got {}", frames.len(), frames.len() - 1, flows.len())));
    }
    if let Some(m) = masks {
        if m.len() != flows.len() {
            return Err(Error::Dimension("one mask per flow expected".into()));
        }
    }
    let per_pair = (0..flows.len())
        .into_par_iter()
        .map(|i| -> Result<Option<f64>> {
            let cur = &frames[i + 1];
            let warped = warp_backward(&frames[i], &flows[i], cur)?;
            let c = cur.channels;
            let mut sum = 0.0;
            let mut count = 0usize;
            for p in 0..cur.pixel_count() {
                if !warped.valid[p] || masks.is_some_and(|m| !(m[i].data[p] > 0.5)) {
                    continue;
                }
                for k in 0..c {
                    let d = warped.image.data[p * c + k] - cur.data[p * c + k];
                    sum += d * d;
                }
                count += c;
            }
            Ok((count > 0).then(|| sum / count as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    let valid: Vec<f64> = per_pair.into_iter().flatten().collect();
    Ok(if valid.is_empty() { 0.0 } else { valid.iter().sum::<f64>() / valid.len() as f64 })
}

/// Mean proxy distance between consecutive frames.
pub fn adjacent_proxy(frames: &[Image]) -> Result<f64> {
    if frames.len() < 2 {
        return Ok(0.0);
    }
    let d = frames
        .par_windows(2)
        .map(|w| perceptual_proxy(&w[0], &w[1]))
        .collect::<Result<Vec<_>>>()?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub frames: usize,
    pub mean_seconds: f64,
    pub median_seconds: f64,
    pub p95_seconds: f64,
    pub fps: f64,
}

/// Time `n_frames` calls of `render` after `warmup` untimed calls.
pub fn timing_harness<T>(mut render: impl FnMut() -> Result<T>, n_frames: usize, warmup: usize) -> Result<TimingStats> {
    if n_frames == 0 {
        return Err(Error::InvalidArgument("timing needs at least one frame".into()));
    }
    for _ in 0..warmup {
        std::hint::black_box(render()?);
    }
    let mut times = Vec::with_capacity(n_frames);
    for _ in 0..n_frames {
        let t = Instant::now();
        std::hint::black_box(render()?);
        times.push(t.elapsed().as_secs_f64());
    }
    let mean = times.iter().sum::<f64>() / n_frames as f64;
    times.sort_by(f64::total_cmp);
    let median = if n_frames % 2 == 1 {
        times[n_frames / 2]
    } else {
        0.5 * (times[n_frames / 2 - 1] + times[n_frames / 2])
    };
    let p95 = times[((0.95 * n_frames as f64).ceil() as usize).clamp(1, n_frames) - 1];
    Ok(TimingStats {
        frames: n_frames,
        mean_seconds: mean,
        median_seconds: median,
        p95_seconds: p95,
        fps: 1.0 / mean,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub lighting_error: f64,
    pub psnr: f64,
    /// Warping error against the previous frame (absent for frame 0).
    pub warping_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub lighting_error: f64,
    pub lighting_instability: f64,
    pub warping_error: f64,
    pub adjacent_proxy: f64,
    pub psnr: f64,
    pub fps: f64,
    pub rows: Vec<FrameMetrics>,
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,lighting_error,psnr,warping_error\n");
        for r in &self.rows {
            let we = r.warping_error.map(|v| format!("{v:.9e}")).unwrap_or_default();
            let _ = writeln!(s, "{},{:.9e},{:.4},{}", r.frame, r.lighting_error, r.psnr, we);
        }
        s
    }

    /// Write `metrics.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), self.to_csv())?;
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Opacity above which a pixel counts as foreground for lighting estimation.
pub const FOREGROUND_MASK: f64 = 0.99;

/// Evaluate a relit sequence. `outputs` must carry normals; `flows[i]` maps
/// frame `i + 1` back into frame `i`.
pub fn evaluate_sequence(
    outputs: &[RenderOutput],
    references: &[Image],
    target: &ShLighting,
    flows: &[FlowField],
    fps: f64,
) -> Result<MetricReport> {
    if outputs.is_empty() || outputs.len() != references.len() {
        return Err(Error::Dimension("need one reference per output frame".into()));
    }
    let estimates = outputs
        .par_iter()
        .map(|o| {
            let normals = o.normals.as_ref().ok_or(Error::InvalidArgument("lighting estimation needs normals".into()))?;
            let mask = Image::from_vec(
                o.weights_sum.width,
                o.weights_sum.height,
                1,
                o.weights_sum.data.iter().map(|&w| if w > FOREGROUND_MASK { 1.0 } else { 0.0 }).collect(),
            )?;
            estimate_lighting(&o.shading, normals, &mask)
        })
        .collect::<Result<Vec<_>>>()?;
    let frames: Vec<Image> = outputs.iter().map(|o| o.rgb.clone()).collect();
    let mut rows = Vec::with_capacity(outputs.len());
    for (i, (o, r)) in outputs.iter().zip(references).enumerate() {
        let we = if i == 0 {
            None
        } else {
            Some(warping_error(&frames[i - 1..=i], &flows[i - 1..i], None)?)
        };
        rows.push(FrameMetrics {
            frame: i,
            lighting_error: lighting_error(target, &estimates[i])?,
            psnr: psnr(&o.rgb, r, 1.0)?,
            warping_error: we,
        });
    }
    let n = rows.len() as f64;
    Ok(MetricReport {
        lighting_error: rows.iter().map(|r| r.lighting_error).sum::<f64>() / n,
        lighting_instability: lighting_instability(&estimates)?,
        warping_error: warping_error(&frames, flows, None)?,
        adjacent_proxy: adjacent_proxy(&frames)?,
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        fps,
        rows,
    })
}
