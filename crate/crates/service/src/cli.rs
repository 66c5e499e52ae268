use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use relit_core::camera::Camera;
use relit_core::io::{load_bundle, load_envmap, load_scene, save_bundle, save_png, save_scene};
use relit_core::metrics::{evaluate_sequence, psnr, warping_error};
use relit_core::render::{DecoderParams, PreparedScene, RenderOptions};
use relit_core::scene::{bake_scene_to_triplanes, generate_sequence, make_scene, render_reference, BakedScene, SceneSpec};
use relit_core::sh::{align_envmap_convention, project_envmap_to_sh, ShLighting};
use relit_core::temporal::{calibrate_smoother, nonparametric_smooth, synth_training_window, TemporalWeights, WindowOptions};
use serde_json::json;

use crate::config::Config;
use crate::outputs::{read_outputs, write_outputs};
use crate::session::SessionConfig;

#[derive(Debug, Parser)]
#[command(name = "relit", version, about = "Relightable tri-plane scenes: synthesis, fitting, rendering and live streaming")]
pub struct Cli {
    /// TOML settings file; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a ground-truth bundle (frames, flows, baked planes) of a synthetic scene.
    GenScene(GenSceneArgs),
    /// Bake a synthetic scene into tri-planes.
    Bake(BakeArgs),
    /// Fit tri-planes to a ground-truth bundle.
    Fit(FitArgs),
    /// Render tri-planes with their learned shading.
    Render(RenderArgs),
    /// Render tri-planes under new SH lighting.
    Relight(RelightArgs),
    /// Temporally smooth a tri-plane sequence, or calibrate the smoother on synthetic windows.
    Smooth(SmoothArgs),
    /// Score relit outputs against a bundle.
    Eval(EvalArgs),
    /// Stream frames over WebSocket.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenSceneArgs {
    /// Scene description (TOML); defaults to a single sphere.
    #[arg(long, value_name = "PATH")]
    pub scene: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_name = "\"9 floats\"")]
    pub sh: Option<String>,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub spp: Option<usize>,
    /// Ground-truth bake resolution (0 skips baking).
    #[arg(long)]
    pub resolution: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BakeArgs {
    #[arg(long, value_name = "PATH")]
    pub scene: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_name = "\"9 floats\"")]
    pub sh: Option<String>,
    #[arg(long)]
    pub resolution: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long, value_name = "DIR")]
    pub bundle: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub resolution: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ViewArgs {
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub spp: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub yaw: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub pitch: Option<f64>,
    #[arg(long)]
    pub radius: Option<f64>,
    /// Render every camera of this bundle instead of a single view.
    #[arg(long, value_name = "DIR", conflicts_with_all = ["size", "yaw", "pitch", "radius"])]
    pub bundle: Option<PathBuf>,
    /// Reference scene (TOML) to report PSNR against; single view only.
    #[arg(long, value_name = "PATH", conflicts_with = "bundle")]
    pub scene: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long, value_name = "PATH")]
    pub triplane: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[command(flatten)]
    pub view: ViewArgs,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("lighting").required(true).args(["sh", "envmap"]))]
pub struct RelightArgs {
    #[arg(long, value_name = "PATH")]
    pub triplane: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_name = "\"9 floats\"")]
    pub sh: Option<String>,
    /// Lat-long environment map (RENV container) projected to SH lighting.
    #[arg(long, value_name = "PATH")]
    pub envmap: Option<PathBuf>,
    #[command(flatten)]
    pub view: ViewArgs,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["input", "triplane"]))]
pub struct SmoothArgs {
    /// Directory of `.rscn` frames, smoothed in file-name order.
    #[arg(long, value_name = "DIR")]
    pub input: Option<PathBuf>,
    /// Clean scene used to synthesize noisy calibration windows.
    #[arg(long, value_name = "PATH")]
    pub triplane: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, conflicts_with = "input")]
    pub noise: Option<f64>,
    #[arg(long, conflicts_with = "input")]
    pub size: Option<usize>,
    #[arg(long, conflicts_with = "input")]
    pub spp: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "DIR")]
    pub bundle: PathBuf,
    /// Relit outputs written by `relight --bundle`.
    #[arg(long, value_name = "DIR")]
    pub input: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Target lighting; defaults to the bundle lighting.
    #[arg(long, value_name = "\"9 floats\"")]
    pub sh: Option<String>,
    #[arg(long)]
    pub fps: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, value_name = "PATH")]
    pub triplane: PathBuf,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub spp: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub yaw: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub pitch: Option<f64>,
    #[arg(long)]
    pub radius: Option<f64>,
    /// Initial lighting; without it frames use the learned shading.
    #[arg(long, value_name = "\"9 floats\"")]
    pub sh: Option<String>,
}

/// Parse nine coefficients separated by spaces and/or commas.
pub fn parse_sh(text: &str) -> Result<ShLighting> {
    let values = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().with_context(|| format!("bad SH coefficient {s:?}")))
        .collect::<Result<Vec<_>>>()?;
    Ok(ShLighting::from_slice(&values)?)
}

fn lighting_or(flag: Option<&str>, config: Option<&[f64]>, fallback: ShLighting) -> Result<ShLighting> {
    match (flag, config) {
        (Some(s), _) => parse_sh(s),
        (None, Some(v)) => Ok(ShLighting::from_slice(v)?),
        (None, None) => Ok(fallback),
    }
}

pub const SPHERE_ALBEDO: [f64; 3] = [0.7, 0.5, 0.3];

pub fn default_scene() -> SceneSpec {
    SceneSpec::sphere(0.5, 40.0, SPHERE_ALBEDO)
}

/// Lighting used when none is given.
pub fn default_lighting() -> ShLighting {
    ShLighting::new([1.0, 0.1, 0.15, -0.1, 0.03, 0.0, 0.02, 0.0, 0.02]).expect("finite")
}

/// `views` cameras evenly spaced in yaw with alternating pitch.
pub fn ring_cameras(views: usize, radius: f64, size: usize) -> Vec<Camera> {
    (0..views)
        .map(|k| {
            Camera {
                yaw: k as f64 * TAU / views as f64,
                pitch: if k % 2 == 0 { 0.2 } else { -0.1 },
                radius,
                ..Camera::default()
            }
            .with_size(size)
        })
        .collect()
}

fn read_scene_spec(path: Option<&Path>) -> Result<SceneSpec> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("scene {}: not found or unreadable", p.display()))?;
            Ok(SceneSpec::from_toml_str(&text)?)
        }
        None => Ok(default_scene()),
    }
}

fn read_baked(path: &Path) -> Result<BakedScene> {
    ensure!(path.exists(), "tri-plane file {}: not found", path.display());
    load_scene(path).with_context(|| format!("tri-plane file {}", path.display()))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    match cli.command {
        Command::GenScene(a) => gen_scene(&a, &config),
        Command::Bake(a) => bake(&a, &config),
        Command::Fit(a) => fit(&a, &config),
        Command::Render(a) => render(&a.triplane, &a.out, &a.view, None, &config),
        Command::Relight(a) => {
            let lighting = match (&a.sh, &a.envmap) {
                (Some(s), None) => parse_sh(s)?,
                (None, Some(p)) => project_envmap_to_sh(&align_envmap_convention(&load_envmap(p)?)?),
                _ => bail!("exactly one of --sh and --envmap is required"),
            };
            render(&a.triplane, &a.out, &a.view, Some(lighting), &config)
        }
        Command::Smooth(a) => smooth(&a, &config),
        Command::Eval(a) => eval(&a),
        Command::Serve(a) => serve(&a, &config),
    }
}

fn gen_scene(a: &GenSceneArgs, config: &Config) -> Result<()> {
    let spec = read_scene_spec(a.scene.as_deref())?;
    let scene = make_scene(&spec)?;
    let lighting = lighting_or(a.sh.as_deref(), config.render.sh.as_deref(), default_lighting())?;
    let size = a.size.unwrap_or(config.render.size);
    let cameras = ring_cameras(
        a.views.unwrap_or(config.scene.views),
        a.radius.unwrap_or(config.scene.radius),
        size,
    );
    let opts = RenderOptions::default().with_samples(a.spp.unwrap_or(config.render.spp));
    let mut bundle = generate_sequence(&scene, &cameras, &lighting, &opts)?;
    let resolution = a.resolution.unwrap_or(config.scene.resolution);
    if resolution > 0 {
        let decoder = DecoderParams::standard(4, 1)?;
        let report = bake_scene_to_triplanes(&scene, &lighting, resolution, &decoder)?;
        bundle.baked = Some(BakedScene { dual: report.dual, decoder });
    }
    save_bundle(&bundle, &a.out)?;
    fs::write(a.out.join("scene.toml"), spec.to_toml_string()?)?;
    tracing::info!(out = %a.out.display(), frames = bundle.len(), resolution, "bundle written");
    Ok(())
}

fn bake(a: &BakeArgs, config: &Config) -> Result<()> {
    let spec = read_scene_spec(Some(&a.scene))?;
    let scene = make_scene(&spec)?;
    let lighting = lighting_or(a.sh.as_deref(), config.render.sh.as_deref(), default_lighting())?;
    let resolution = a.resolution.unwrap_or(config.scene.resolution);
    ensure!(resolution >= 2, "bake resolution must be at least 2");
    let decoder = DecoderParams::standard(4, 1)?;
    let report = bake_scene_to_triplanes(&scene, &lighting, resolution, &decoder)?;
    fs::create_dir_all(&a.out)?;
    let path = a.out.join("scene.rscn");
    save_scene(&BakedScene { dual: report.dual, decoder }, &path)?;
    write_json(&a.out.join("bake.json"), &json!({ "resolution": resolution, "clamped": report.clamped }))?;
    tracing::info!(path = %path.display(), resolution, clamped = report.clamped, "baked");
    Ok(())
}

fn fit(a: &FitArgs, config: &Config) -> Result<()> {
    let bundle = load_bundle(&a.bundle).with_context(|| format!("bundle {}", a.bundle.display()))?;
    let mut cfg = config.fit.clone();
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.resolution = a.resolution.unwrap_or(cfg.resolution);
    let (dual, report) = relit_core::fit::fit(&bundle, &cfg)?;
    for s in &report.stages {
        tracing::info!(stage = ?s, "stage");
    }
    let decoder = match &bundle.baked {
        Some(b) => b.decoder.clone(),
        None => DecoderParams::standard(4, 1)?,
    };
    fs::create_dir_all(&a.out)?;
    save_scene(&BakedScene { dual, decoder }, a.out.join("scene.rscn"))?;
    report.write(&a.out)?;
    tracing::info!(
        initial_loss = report.initial_loss,
        final_loss = report.final_loss,
        train_psnr = report.train_psnr,
        "fit done"
    );
    Ok(())
}

fn render(triplane: &Path, out: &Path, view: &ViewArgs, lighting: Option<ShLighting>, config: &Config) -> Result<()> {
    let baked = read_baked(triplane)?;
    let scene = PreparedScene::new(&baked.dual, &baked.decoder)?;
    let draw = |cam: &Camera, opts: &RenderOptions| match &lighting {
        Some(l) => scene.render_relit(cam, l, opts),
        None => scene.render(cam, opts),
    };
    fs::create_dir_all(out)?;
    if let Some(dir) = &view.bundle {
        let bundle = load_bundle(dir).with_context(|| format!("bundle {}", dir.display()))?;
        let opts = match view.spp {
            Some(n) => bundle.render_options.clone().with_samples(n),
            None => bundle.render_options.clone(),
        };
        let outputs = bundle.cameras.iter().map(|c| draw(c, &opts)).collect::<relit_core::Result<Vec<_>>>()?;
        let mut psnrs = Vec::new();
        for (o, f) in outputs.iter().zip(&bundle.frames) {
            psnrs.push(psnr(&o.rgb, &f.rgb, 1.0)?);
        }
        write_outputs(out, &outputs, &bundle.cameras)?;
        let mean = psnrs.iter().sum::<f64>() / psnrs.len() as f64;
        write_json(&out.join("summary.json"), &json!({ "frames": outputs.len(), "psnr": psnrs, "mean_psnr": mean }))?;
        tracing::info!(frames = outputs.len(), mean_psnr = mean, "rendered bundle views");
        return Ok(());
    }
    let cam = Camera {
        yaw: view.yaw.unwrap_or(config.render.yaw),
        pitch: view.pitch.unwrap_or(config.render.pitch),
        radius: view.radius.unwrap_or(config.render.radius),
        ..Camera::default()
    }
    .with_size(view.size.unwrap_or(config.render.size));
    let opts = RenderOptions::default().with_samples(view.spp.unwrap_or(config.render.spp));
    let output = draw(&cam, &opts)?;
    let mut summary = json!({ "width": output.width(), "height": output.height(), "camera": cam });
    if let Some(path) = &view.scene {
        let reference = make_scene(&read_scene_spec(Some(path))?)?;
        let l = lighting.unwrap_or(*scene.lighting_tag());
        let truth = render_reference(&reference, &cam, &l, &opts)?;
        let p = psnr(&output.rgb, &truth.rgb, 1.0)?;
        summary["psnr"] = json!(p);
        tracing::info!(psnr = p, "compared with reference");
    }
    write_outputs(out, std::slice::from_ref(&output), &[cam])?;
    save_png(&output.rgb, out.join("render.png"))?;
    write_json(&out.join("summary.json"), &summary)?;
    tracing::info!(out = %out.display(), "rendered");
    Ok(())
}

fn smooth(a: &SmoothArgs, config: &Config) -> Result<()> {
    let s = &config.smooth;
    let window = a.window.unwrap_or(s.window);
    fs::create_dir_all(&a.out)?;
    if let Some(dir) = &a.input {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .with_context(|| format!("input {}: not found", dir.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        paths.retain(|p| p.extension().is_some_and(|e| e == "rscn"));
        paths.sort();
        ensure!(!paths.is_empty(), "no .rscn frames in {}", dir.display());
        let frames = paths.iter().map(|p| read_baked(p)).collect::<Result<Vec<_>>>()?;
        let tau = a.tau.or(s.tau).context("--tau is required when smoothing an input sequence")?;
        let duals: Vec<_> = frames.iter().map(|f| f.dual.clone()).collect();
        let smoothed = nonparametric_smooth(&duals, tau, window.min(duals.len()))?;
        for ((path, frame), dual) in paths.iter().zip(&frames).zip(smoothed) {
            let name = path.file_name().expect("file path");
            save_scene(&BakedScene { dual, decoder: frame.decoder.clone() }, a.out.join(name))?;
        }
        tracing::info!(frames = paths.len(), tau, window, "smoothed sequence");
        return Ok(());
    }
    let clean = read_baked(a.triplane.as_deref().expect("clap enforces a source"))?;
    let opts = WindowOptions {
        frames: window,
        noise_scale: a.noise.unwrap_or(s.noise),
        image_size: a.size.unwrap_or(48),
        render: RenderOptions::default().with_samples(a.spp.unwrap_or(48)),
    };
    let seed = a.seed.unwrap_or(0);
    let windows = (0..s.windows as u64)
        .map(|k| synth_training_window(&clean.dual, &clean.decoder, &opts, seed + k))
        .collect::<relit_core::Result<Vec<_>>>()?;
    let weights = TemporalWeights::default();
    let tau = match a.tau.or(s.tau) {
        Some(t) => t,
        None => {
            let cal = calibrate_smoother(&windows, &s.taus, &clean.decoder, &opts.render, &weights)?;
            fs::write(a.out.join("calibration.csv"), cal.to_csv())?;
            cal.best_tau
        }
    };
    let probe = synth_training_window(&clean.dual, &clean.decoder, &opts, seed + s.windows as u64)?;
    let prepared = |d: &relit_core::triplane::DualTriPlane| PreparedScene::new(d, &clean.decoder);
    let we = |seq: &[relit_core::triplane::DualTriPlane]| -> Result<f64> {
        let frames = seq
            .iter()
            .zip(&probe.cameras)
            .map(|(d, c)| Ok(prepared(d)?.render(c, &opts.render)?.rgb))
            .collect::<Result<Vec<_>>>()?;
        Ok(warping_error(&frames, &probe.flows, None)?)
    };
    let before = we(&probe.noisy.frames)?;
    let after = we(&nonparametric_smooth(&probe.noisy.frames, tau, window)?)?;
    write_json(
        &a.out.join("summary.json"),
        &json!({ "tau": tau, "window": window, "warping_error_noisy": before, "warping_error_smoothed": after }),
    )?;
    tracing::info!(tau, before, after, "smoother calibrated");
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let bundle = load_bundle(&a.bundle).with_context(|| format!("bundle {}", a.bundle.display()))?;
    let (outputs, _) = read_outputs(&a.input)?;
    ensure!(
        outputs.len() == bundle.len(),
        "{} outputs for a {}-frame bundle",
        outputs.len(),
        bundle.len()
    );
    let target = match &a.sh {
        Some(s) => parse_sh(s)?,
        None => bundle.lighting,
    };
    let refs: Vec<_> = bundle.frames.iter().map(|f| f.rgb.clone()).collect();
    let report = evaluate_sequence(&outputs, &refs, &target, &bundle.flows, a.fps.unwrap_or(0.0))?;
    fs::create_dir_all(&a.out)?;
    report.write(&a.out)?;
    tracing::info!(
        psnr = report.psnr,
        lighting_error = report.lighting_error,
        lighting_instability = report.lighting_instability,
        warping_error = report.warping_error,
        "evaluated"
    );
    Ok(())
}

fn serve(a: &ServeArgs, config: &Config) -> Result<()> {
    let baked = read_baked(&a.triplane)?;
    let scene = Arc::new(PreparedScene::new(&baked.dual, &baked.decoder)?);
    let r = &config.render;
    let lighting = match (&a.sh, &r.sh) {
        (Some(s), _) => Some(parse_sh(s)?),
        (None, Some(v)) => Some(ShLighting::from_slice(v)?),
        (None, None) => None,
    };
    let defaults = SessionConfig {
        camera: Camera {
            yaw: a.yaw.unwrap_or(r.yaw),
            pitch: a.pitch.unwrap_or(r.pitch),
            radius: a.radius.unwrap_or(r.radius),
            ..Camera::default()
        },
        lighting,
        size: a.size.unwrap_or(r.size),
        spp: a.spp.unwrap_or(r.spp),
    };
    let host = a.host.clone().unwrap_or_else(|| config.serve.host.clone());
    let port = a.port.unwrap_or(config.serve.port);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host.as_str(), port))
            .await
            .with_context(|| format!("bind {host}:{port}"))?;
        crate::server::serve(listener, scene, defaults).await
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn sh_strings() {
        let l = parse_sh("1 0.1, -0.2 0 0 0 0 0 0.5").unwrap();
        assert_eq!(l.coeffs[2], -0.2);
        assert_eq!(l.coeffs[8], 0.5);
        assert!(parse_sh("1 2 3").is_err());
        assert!(parse_sh("1 0 0 0 0 0 0 0 x").is_err());
    }

    #[test]
    fn conflicting_flags_are_rejected() {
        let parse = |args: &[&str]| Cli::try_parse_from(args.iter().copied());
        assert!(parse(&["relit", "relight", "--triplane", "a", "--out", "o", "--sh", "1 0 0 0 0 0 0 0 0", "--envmap", "e"]).is_err());
        assert!(parse(&["relit", "relight", "--triplane", "a", "--out", "o"]).is_err());
        assert!(parse(&["relit", "render", "--triplane", "a", "--out", "o", "--bundle", "b", "--yaw", "0.3"]).is_err());
        assert!(parse(&["relit", "render", "--triplane", "a", "--out", "o", "--yaw", "-0.3"]).is_ok());
        assert!(parse(&["relit", "teleport"]).is_err());
    }
}
