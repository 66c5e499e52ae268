#![allow(dead_code)]

use relit_core::camera::Camera;
use relit_core::image::Image;
use relit_core::render::{DecoderParams, RenderOptions};
use relit_core::scene::{bake_scene_to_triplanes, make_scene, BakedScene, SceneSpec, SyntheticScene};
use relit_core::sh::ShLighting;

pub const SPHERE_ALBEDO: [f64; 3] = [0.7, 0.5, 0.3];

pub fn sphere() -> SyntheticScene {
    make_scene(&SceneSpec::sphere(0.5, 40.0, SPHERE_ALBEDO)).unwrap()
}

/// Same sphere with a surface thinner than one ray step.
pub fn hard_sphere() -> SyntheticScene {
    make_scene(&SceneSpec::sphere(0.5, 2000.0, SPHERE_ALBEDO)).unwrap()
}

/// DC-dominant lighting with the clamp inactive over the whole sphere.
pub fn key_light() -> ShLighting {
    ShLighting::new([0.9, 0.1, 0.3, 0.2, 0.05, 0.0, 0.05, 0.0, 0.02]).unwrap()
}

pub fn fill_light() -> ShLighting {
    ShLighting::new([1.0, 0.1, 0.15, -0.1, 0.03, 0.0, 0.02, 0.0, 0.02]).unwrap()
}

pub fn bake(scene: &SyntheticScene, lighting: &ShLighting, resolution: usize) -> BakedScene {
    let decoder = DecoderParams::standard(4, 1).unwrap();
    let report = bake_scene_to_triplanes(scene, lighting, resolution, &decoder).unwrap();
    BakedScene {
        dual: report.dual,
        decoder,
    }
}

/// Eight views around the sphere, alternating pitch.
pub fn ring(size: usize) -> Vec<Camera> {
    (0..8)
        .map(|k| Camera {
            yaw: k as f64 * std::f64::consts::TAU / 8.0,
            pitch: if k % 2 == 0 { 0.2 } else { -0.1 },
            radius: 5.0,
            ..Camera::default()
        }
        .with_size(size))
        .collect()
}

pub fn opts(samples: usize) -> RenderOptions {
    RenderOptions::default().with_samples(samples)
}

pub fn threshold(opacity: &Image, level: f64) -> Image {
    Image::from_vec(
        opacity.width,
        opacity.height,
        1,
        opacity.data.iter().map(|&w| if w > level { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap()
}
