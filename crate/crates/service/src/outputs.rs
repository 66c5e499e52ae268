//! Directory layout for rendered sequences: `outputs.json` plus
//! `frames/NNNN.{rgb,albedo,shading,depth,weights,normals}.f32` and `NNNN.png`.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use relit_core::camera::Camera;
use relit_core::io::{load_image, save_image, save_png};
use relit_core::render::RenderOutput;
use serde::{Deserialize, Serialize};

#[derive(Serialize, Deserialize)]
struct Manifest {
    frames: usize,
    cameras: Vec<Camera>,
}

pub fn write_outputs(dir: &Path, outputs: &[RenderOutput], cameras: &[Camera]) -> Result<()> {
    let frames = dir.join("frames");
    fs::create_dir_all(&frames)?;
    for (i, o) in outputs.iter().enumerate() {
        let images = [
            ("rgb", Some(&o.rgb)),
            ("albedo", Some(&o.albedo)),
            ("shading", Some(&o.shading)),
            ("depth", Some(&o.depth)),
            ("weights", Some(&o.weights_sum)),
            ("normals", o.normals.as_ref()),
        ];
        for (name, img) in images {
            if let Some(img) = img {
                save_image(img, frames.join(format!("{i:04}.{name}.f32")))?;
            }
        }
        save_png(&o.rgb, frames.join(format!("{i:04}.png")))?;
    }
    let manifest = Manifest { frames: outputs.len(), cameras: cameras.to_vec() };
    fs::write(dir.join("outputs.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_outputs(dir: &Path) -> Result<(Vec<RenderOutput>, Vec<Camera>)> {
    let manifest: Manifest = serde_json::from_slice(
        &fs::read(dir.join("outputs.json")).with_context(|| format!("outputs {}: not found", dir.display()))?,
    )?;
    let frames = dir.join("frames");
    let mut outputs = Vec::with_capacity(manifest.frames);
    for i in 0..manifest.frames {
        let path = |name: &str| frames.join(format!("{i:04}.{name}.f32"));
        let normals = path("normals");
        outputs.push(RenderOutput {
            rgb: load_image(path("rgb"))?,
            albedo: load_image(path("albedo"))?,
            shading: load_image(path("shading"))?,
            depth: load_image(path("depth"))?,
            weights_sum: load_image(path("weights"))?,
            normals: if normals.exists() { Some(load_image(normals)?) } else { None },
            zero_gradient_samples: 0,
        });
    }
    Ok((outputs, manifest.cameras))
}
