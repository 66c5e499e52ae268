//! Python bindings for the relightable tri-plane renderer.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use relit_core::camera::Camera as CoreCamera;
use relit_core::error::Error;
use relit_core::fit::FitConfig;
use relit_core::image::Image as CoreImage;
use relit_core::metrics::{self, FOREGROUND_MASK};
use relit_core::render::{DecoderParams, PreparedScene, RenderOptions, RenderOutput};
use relit_core::scene::{bake_scene_to_triplanes, generate_sequence, make_scene, BakedScene, GroundTruthBundle, SceneSpec};
use relit_core::sh::{self, ShLighting};
use relit_core::{io, temporal};

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

#[pyclass(module = "relit", from_py_object)]
#[derive(Clone)]
struct Camera {
    #[pyo3(get, set)]
    yaw: f64,
    #[pyo3(get, set)]
    pitch: f64,
    #[pyo3(get, set)]
    roll: f64,
    #[pyo3(get, set)]
    radius: f64,
    /// Vertical field of view in degrees.
    #[pyo3(get, set)]
    focal: f64,
    #[pyo3(get, set)]
    size: usize,
}

impl Camera {
    fn core(&self) -> CoreCamera {
        CoreCamera {
            yaw: self.yaw,
            pitch: self.pitch,
            roll: self.roll,
            radius: self.radius,
            focal: self.focal,
            ..CoreCamera::default()
        }
        .with_size(self.size)
    }

    fn wrap(c: &CoreCamera) -> Self {
        Self { yaw: c.yaw, pitch: c.pitch, roll: c.roll, radius: c.radius, focal: c.focal, size: c.image_size }
    }
}

#[pymethods]
impl Camera {
    #[new]
    #[pyo3(signature = (yaw=0.0, pitch=0.0, roll=0.0, radius=None, focal=None, size=128))]
    fn new(yaw: f64, pitch: f64, roll: f64, radius: Option<f64>, focal: Option<f64>, size: usize) -> Self {
        let d = CoreCamera::default();
        Self { yaw, pitch, roll, radius: radius.unwrap_or(d.radius), focal: focal.unwrap_or(d.focal), size }
    }

    fn __repr__(&self) -> String {
        format!("Camera(yaw={}, pitch={}, roll={}, radius={}, focal={}, size={})", self.yaw, self.pitch, self.roll, self.radius, self.focal, self.size)
    }
}

#[pyclass(module = "relit", from_py_object)]
#[derive(Clone)]
struct Lighting {
    inner: ShLighting,
}

#[pymethods]
impl Lighting {
    #[new]
    fn new(coeffs: Vec<f64>) -> PyResult<Self> {
        Ok(Self { inner: ShLighting::from_slice(&coeffs).map_err(err)? })
    }

    #[staticmethod]
    fn from_envmap(path: &str) -> PyResult<Self> {
        let env = io::load_envmap(path).map_err(err)?;
        let aligned = sh::align_envmap_convention(&env).map_err(err)?;
        Ok(Self { inner: sh::project_envmap_to_sh(&aligned) })
    }

    #[getter]
    fn coeffs(&self) -> Vec<f64> {
        self.inner.coeffs.to_vec()
    }

    fn shade(&self, normal: [f64; 3]) -> f64 {
        self.inner.shade(normal)
    }

    fn rotated(&self, angle: f64) -> Self {
        Self { inner: sh::rotate_sh_yaw(&self.inner, angle) }
    }

    fn renormalized(&self) -> PyResult<Self> {
        Ok(Self { inner: sh::renormalize_sh(&self.inner).map_err(err)? })
    }

    /// Distance after renormalizing both lightings.
    fn error(&self, other: &Lighting) -> PyResult<f64> {
        metrics::lighting_error(&self.inner, &other.inner).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Lighting({:?})", self.inner.coeffs)
    }
}

#[pyclass(module = "relit", from_py_object)]
#[derive(Clone)]
struct Image {
    inner: CoreImage,
}

#[pymethods]
impl Image {
    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels
    }

    /// Row-major interleaved samples.
    fn data(&self) -> Vec<f64> {
        self.inner.data.clone()
    }

    fn pixel(&self, x: usize, y: usize) -> PyResult<Vec<f64>> {
        if x >= self.inner.width || y >= self.inner.height {
            return Err(PyValueError::new_err(format!("pixel ({x}, {y}) outside {}x{}", self.inner.width, self.inner.height)));
        }
        Ok(self.inner.pixel(x, y).to_vec())
    }

    fn save_png(&self, path: &str) -> PyResult<()> {
        io::save_png(&self.inner, path).map_err(err)
    }

    #[pyo3(signature = (reference, mask=None))]
    fn psnr(&self, reference: &Image, mask: Option<&Image>) -> PyResult<f64> {
        match mask {
            Some(m) => metrics::masked_psnr(&self.inner, &reference.inner, &m.inner, 1.0),
            None => metrics::psnr(&self.inner, &reference.inner, 1.0),
        }
        .map_err(err)
    }
}

fn image(img: &CoreImage) -> Image {
    Image { inner: img.clone() }
}

#[pyclass(module = "relit", skip_from_py_object)]
struct Render {
    inner: RenderOutput,
}

#[pymethods]
impl Render {
    #[getter]
    fn rgb(&self) -> Image {
        image(&self.inner.rgb)
    }

    #[getter]
    fn albedo(&self) -> Image {
        image(&self.inner.albedo)
    }

    #[getter]
    fn shading(&self) -> Image {
        image(&self.inner.shading)
    }

    #[getter]
    fn depth(&self) -> Image {
        image(&self.inner.depth)
    }

    #[getter]
    fn weights_sum(&self) -> Image {
        image(&self.inner.weights_sum)
    }

    #[getter]
    fn normals(&self) -> Option<Image> {
        self.inner.normals.as_ref().map(image)
    }

    /// Pixels whose accumulated opacity exceeds the foreground threshold.
    fn foreground(&self) -> Image {
        let w = &self.inner.weights_sum;
        let data = w.data.iter().map(|&v| if v > FOREGROUND_MASK { 1.0 } else { 0.0 }).collect();
        Image { inner: CoreImage::from_vec(w.width, w.height, 1, data).expect("mask shape") }
    }

    /// Least-squares lighting from the shading and normals of a relit render.
    fn estimate_lighting(&self) -> PyResult<Lighting> {
        let normals = self.inner.normals.as_ref().ok_or_else(|| PyValueError::new_err("render has no normals; use a relit render"))?;
        let mask = self.foreground();
        Ok(Lighting { inner: metrics::estimate_lighting(&self.inner.shading, normals, &mask.inner).map_err(err)? })
    }
}

#[pyclass(module = "relit", from_py_object)]
#[derive(Clone)]
struct Scene {
    baked: BakedScene,
    prepared: std::sync::Arc<PreparedScene>,
}

impl Scene {
    fn from_baked(baked: BakedScene) -> PyResult<Self> {
        let prepared = PreparedScene::new(&baked.dual, &baked.decoder).map_err(err)?;
        Ok(Self { baked, prepared: std::sync::Arc::new(prepared) })
    }
}

fn spec(toml: Option<&str>) -> PyResult<SceneSpec> {
    match toml {
        Some(t) => SceneSpec::from_toml_str(t).map_err(err),
        None => Ok(SceneSpec::sphere(0.5, 40.0, [0.7, 0.5, 0.3])),
    }
}

#[pymethods]
impl Scene {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Self::from_baked(io::load_scene(path).map_err(err)?)
    }

    /// Bake an analytic scene (TOML blob list; default is a single sphere).
    #[staticmethod]
    #[pyo3(signature = (lighting, resolution=64, spec_toml=None))]
    fn bake(py: Python<'_>, lighting: &Lighting, resolution: usize, spec_toml: Option<&str>) -> PyResult<Self> {
        let spec = spec(spec_toml)?;
        let l = lighting.inner;
        let baked = py
            .detach(|| -> relit_core::error::Result<BakedScene> {
                let decoder = DecoderParams::standard(4, 1)?;
                let report = bake_scene_to_triplanes(&make_scene(&spec)?, &l, resolution, &decoder)?;
                Ok(BakedScene { dual: report.dual, decoder })
            })
            .map_err(err)?;
        Self::from_baked(baked)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        io::save_scene(&self.baked, path).map_err(err)
    }

    #[getter]
    fn resolution(&self) -> usize {
        self.baked.dual.albedo.resolution()
    }

    #[getter]
    fn lighting(&self) -> Lighting {
        Lighting { inner: self.baked.dual.lighting_tag }
    }

    /// Learned shading, or analytic shading under `lighting` when given.
    #[pyo3(signature = (camera, spp=64, lighting=None))]
    fn render(&self, py: Python<'_>, camera: &Camera, spp: usize, lighting: Option<&Lighting>) -> PyResult<Render> {
        let cam = camera.core();
        let opts = RenderOptions::default().with_samples(spp);
        let l = lighting.map(|l| l.inner);
        let scene = self.prepared.clone();
        let out = py
            .detach(|| match l {
                Some(l) => scene.render_relit(&cam, &l, &opts),
                None => scene.render(&cam, &opts),
            })
            .map_err(err)?;
        Ok(Render { inner: out })
    }
}

#[pyclass(module = "relit", skip_from_py_object)]
struct Bundle {
    inner: GroundTruthBundle,
}

#[pymethods]
impl Bundle {
    /// Render ground truth for an analytic scene from `cameras`.
    #[staticmethod]
    #[pyo3(signature = (cameras, lighting, spp=64, resolution=None, spec_toml=None))]
    fn generate(
        py: Python<'_>,
        cameras: Vec<Camera>,
        lighting: &Lighting,
        spp: usize,
        resolution: Option<usize>,
        spec_toml: Option<&str>,
    ) -> PyResult<Self> {
        let spec = spec(spec_toml)?;
        let cams: Vec<CoreCamera> = cameras.iter().map(Camera::core).collect();
        let l = lighting.inner;
        let bundle = py
            .detach(|| -> relit_core::error::Result<GroundTruthBundle> {
                let scene = make_scene(&spec)?;
                let mut b = generate_sequence(&scene, &cams, &l, &RenderOptions::default().with_samples(spp))?;
                if let Some(r) = resolution {
                    let decoder = DecoderParams::standard(4, 1)?;
                    let dual = bake_scene_to_triplanes(&scene, &l, r, &decoder)?.dual;
                    b.baked = Some(BakedScene { dual, decoder });
                }
                Ok(b)
            })
            .map_err(err)?;
        Ok(Self { inner: bundle })
    }

    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        Ok(Self { inner: io::load_bundle(dir).map_err(err)? })
    }

    fn save(&self, dir: &str) -> PyResult<()> {
        io::save_bundle(&self.inner, dir).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn cameras(&self) -> Vec<Camera> {
        self.inner.cameras.iter().map(Camera::wrap).collect()
    }

    fn frame(&self, i: usize) -> PyResult<Render> {
        let f = self.inner.frames.get(i).ok_or_else(|| PyValueError::new_err(format!("frame {i} of {}", self.inner.len())))?;
        Ok(Render { inner: f.clone() })
    }

    /// Staged fit; returns the scene and a summary dict.
    #[pyo3(signature = (resolution=64, iterations=(2000, 2000, 4000), learning_rate=1e-2, seed=0))]
    fn fit(
        &self,
        py: Python<'_>,
        resolution: usize,
        iterations: (usize, usize, usize),
        learning_rate: f64,
        seed: u64,
    ) -> PyResult<(Scene, Py<PyAny>)> {
        let cfg = FitConfig {
            resolution,
            albedo_iterations: iterations.0,
            shading_iterations: iterations.1,
            joint_iterations: iterations.2,
            learning_rate,
            seed,
            ..FitConfig::default()
        };
        let decoder = self
            .inner
            .baked
            .as_ref()
            .map(|b| b.decoder.clone())
            .ok_or_else(|| PyValueError::new_err("bundle has no baked ground truth; generate with resolution="))?;
        let (dual, report) = py.detach(|| relit_core::fit::fit(&self.inner, &cfg)).map_err(err)?;
        let summary = pyo3::types::PyDict::new(py);
        summary.set_item("initial_loss", report.initial_loss)?;
        summary.set_item("final_loss", report.final_loss)?;
        summary.set_item("train_psnr", report.train_psnr)?;
        summary.set_item("iterations", report.curve.len())?;
        Ok((Scene::from_baked(BakedScene { dual, decoder })?, summary.into_any().unbind()))
    }
}

/// Evenly spaced views on a circle around the origin.
#[pyfunction]
#[pyo3(signature = (views=8, radius=5.0, size=64))]
fn ring_cameras(views: usize, radius: f64, size: usize) -> Vec<Camera> {
    (0..views)
        .map(|k| Camera {
            yaw: k as f64 * std::f64::consts::TAU / views as f64,
            radius,
            size,
            ..Camera::new(0.0, 0.0, 0.0, None, None, size)
        })
        .collect()
}

/// Temporal smoothing of a tri-plane sequence; all scenes share the first decoder.
#[pyfunction]
#[pyo3(signature = (scenes, tau, window=5))]
fn smooth(scenes: Vec<Scene>, tau: f64, window: usize) -> PyResult<Vec<Scene>> {
    let decoder = scenes.first().ok_or_else(|| PyValueError::new_err("empty sequence"))?.baked.decoder.clone();
    let duals: Vec<_> = scenes.iter().map(|s| s.baked.dual.clone()).collect();
    temporal::nonparametric_smooth(&duals, tau, window)
        .map_err(err)?
        .into_iter()
        .map(|dual| Scene::from_baked(BakedScene { dual, decoder: decoder.clone() }))
        .collect()
}

#[pyfunction]
fn psnr(image: &Image, reference: &Image) -> PyResult<f64> {
    metrics::psnr(&image.inner, &reference.inner, 1.0).map_err(err)
}

#[pymodule]
fn relit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Camera>()?;
    m.add_class::<Lighting>()?;
    m.add_class::<Image>()?;
    m.add_class::<Render>()?;
    m.add_class::<Scene>()?;
    m.add_class::<Bundle>()?;
    m.add_function(wrap_pyfunction!(ring_cameras, m)?)?;
    m.add_function(wrap_pyfunction!(smooth, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    Ok(())
}
