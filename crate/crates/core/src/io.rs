//! Binary containers and on-disk layouts.
//!
//! Every container is a 4-byte magic, a little-endian `u32` version and a
//! fixed number of `u32` dimensions, followed by little-endian `f32` values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::render::{DecoderParams, RenderOptions, RenderOutput};
use crate::scene::{BakedScene, FlowField, GroundTruthBundle};
use crate::sh::{EnvMap, ShLighting};
use crate::triplane::{DualTriPlane, TriPlane};

pub const FORMAT_VERSION: u32 = 1;
pub const TRIPLANE_MAGIC: [u8; 4] = *b"RTPL";
pub const ENVMAP_MAGIC: [u8; 4] = *b"RENV";
pub const IMAGE_MAGIC: [u8; 4] = *b"RIMG";
pub const SCENE_MAGIC: [u8; 4] = *b"RSCN";
const FLO_TAG: f32 = 202021.25;

/// Header-plus-payload container with `N` dimensions.
pub fn encode_container(magic: [u8; 4], dims: &[u32], payload: impl IntoIterator<Item = f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * dims.len());
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parsed container: dimensions and the payload bytes it declares, plus the
/// number of bytes consumed.
pub struct Container<'a> {
    pub dims: Vec<u32>,
    pub payload: &'a [u8],
    pub consumed: usize,
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Validate magic and version, read `ndims` dimensions and slice
/// `elements(dims)` f32 values.
pub fn decode_container<'a>(
    bytes: &'a [u8],
    magic: [u8; 4],
    ndims: usize,
    elements: impl Fn(&[u32]) -> usize,
) -> Result<Container<'a>> {
    let header = 8 + 4 * ndims;
    if bytes.len() < 4 {
        return Err(Error::TruncatedPayload {
            expected: header,
            actual: bytes.len(),
        });
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != magic {
        return Err(Error::BadMagic { expected: magic, found });
    }
    if bytes.len() < header {
        return Err(Error::TruncatedPayload {
            expected: header,
            actual: bytes.len(),
        });
    }
    let version = read_u32(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let dims: Vec<u32> = (0..ndims).map(|i| read_u32(bytes, 8 + 4 * i)).collect();
    let need = elements(&dims)
        .checked_mul(4)
        .and_then(|n| n.checked_add(header))
        .ok_or_else(|| Error::Dimension(format!("container dimensions overflow: {dims:?}")))?;
    if bytes.len() < need {
        return Err(Error::TruncatedPayload {
            expected: need,
            actual: bytes.len(),
        });
    }
    Ok(Container {
        dims,
        payload: &bytes[header..need],
        consumed: need,
    })
}

pub(crate) fn f32s(payload: &[u8]) -> impl Iterator<Item = f32> + '_ {
    payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
}

fn dim(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Dimension(format!("{v} does not fit in u32")))
}

pub fn encode_triplane(tp: &TriPlane) -> Result<Vec<u8>> {
    Ok(encode_container(
        TRIPLANE_MAGIC,
        &[dim(tp.resolution())?, dim(tp.channels())?],
        tp.data().iter().copied(),
    ))
}

/// Decode a tri-plane from the front of `bytes`; returns it with the byte count read.
pub fn decode_triplane(bytes: &[u8]) -> Result<(TriPlane, usize)> {
    let c = decode_container(bytes, TRIPLANE_MAGIC, 2, |d| 3 * d[0] as usize * d[0] as usize * d[1] as usize)?;
    let tp = TriPlane::from_data(c.dims[0] as usize, c.dims[1] as usize, f32s(c.payload).collect())?;
    Ok((tp, c.consumed))
}

pub fn save_triplane(tp: &TriPlane, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_triplane(tp)?)?;
    Ok(())
}

pub fn load_triplane(path: impl AsRef<Path>) -> Result<TriPlane> {
    let bytes = fs::read(path)?;
    Ok(decode_triplane(&bytes)?.0)
}

#[derive(Serialize, Deserialize)]
struct SceneHeader {
    lighting_tag: ShLighting,
    decoder: DecoderParams,
}

/// Scene file: `RSCN`, version, JSON length, JSON header (lighting tag and
/// decoder), then the albedo and shading tri-plane containers.
pub fn encode_scene(scene: &BakedScene) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&SceneHeader {
        lighting_tag: scene.dual.lighting_tag,
        decoder: scene.decoder.clone(),
    })
    .map_err(|e| Error::Parse(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(&SCENE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&dim(header.len())?.to_le_bytes());
    out.extend_from_slice(&header);
    out.extend(encode_triplane(&scene.dual.albedo)?);
    out.extend(encode_triplane(&scene.dual.shading)?);
    Ok(out)
}

pub fn decode_scene(bytes: &[u8]) -> Result<BakedScene> {
    let c = decode_container(bytes, SCENE_MAGIC, 1, |_| 0)?;
    let len = c.dims[0] as usize;
    let start = c.consumed;
    if bytes.len() < start + len {
        return Err(Error::TruncatedPayload {
            expected: start + len,
            actual: bytes.len(),
        });
    }
    let header: SceneHeader =
        serde_json::from_slice(&bytes[start..start + len]).map_err(|e| Error::Parse(e.to_string()))?;
    let (albedo, used) = decode_triplane(&bytes[start + len..])?;
    let (shading, _) = decode_triplane(&bytes[start + len + used..])?;
    let dual = DualTriPlane::new(albedo, shading, header.lighting_tag);
    header.decoder.check_dual(&dual)?;
    Ok(BakedScene {
        dual,
        decoder: header.decoder,
    })
}

pub fn save_scene(scene: &BakedScene, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_scene(scene)?)?;
    Ok(())
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<BakedScene> {
    decode_scene(&fs::read(path)?)
}

pub fn encode_image(img: &Image) -> Result<Vec<u8>> {
    Ok(encode_container(
        IMAGE_MAGIC,
        &[dim(img.width)?, dim(img.height)?, dim(img.channels)?],
        img.data.iter().map(|v| *v as f32),
    ))
}

pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    let c = decode_container(bytes, IMAGE_MAGIC, 3, |d| d.iter().map(|v| *v as usize).product())?;
    Image::from_vec(
        c.dims[0] as usize,
        c.dims[1] as usize,
        c.dims[2] as usize,
        f32s(c.payload).map(f64::from).collect(),
    )
}

pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_image(img)?)?;
    Ok(())
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    decode_image(&fs::read(path)?)
}

/// 8-bit PNG of a 1- or 3-channel image clamped to `[0, 1]`.
pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    use image::ImageEncoder;
    let color = match img.channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => return Err(Error::Dimension(format!("PNG needs 1 or 3 channels, got {c}"))),
    };
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(&img.to_u8(), dim(img.width)?, dim(img.height)?, color)
        .map_err(|e| Error::Codec(e.to_string()))?;
    Ok(out)
}

/// Decode an 8-bit PNG into `[0, 1]` floats (gray or RGB).
pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let dynamic = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Codec(e.to_string()))?;
    let (w, h) = (dynamic.width() as usize, dynamic.height() as usize);
    let (channels, raw) = match dynamic.color().channel_count() {
        1 => (1, dynamic.into_luma8().into_raw()),
        _ => (3, dynamic.into_rgb8().into_raw()),
    };
    Image::from_vec(w, h, channels, raw.into_iter().map(|v| v as f64 / 255.0).collect())
}

pub fn save_png(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_png(img)?)?;
    Ok(())
}

pub fn encode_envmap(env: &EnvMap) -> Result<Vec<u8>> {
    Ok(encode_container(
        ENVMAP_MAGIC,
        &[dim(env.width())?, dim(env.height())?, 1],
        env.texels().iter().map(|v| *v as f32),
    ))
}

/// Grayscale little-endian PFM (`Pf`, negative scale), rows stored bottom to top.
pub fn encode_pfm(env: &EnvMap) -> Vec<u8> {
    let (w, h) = (env.width(), env.height());
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for v in (0..h).rev() {
        for u in 0..w {
            out.extend_from_slice(&(env.at(u, v) as f32).to_le_bytes());
        }
    }
    out
}

fn decode_pfm(bytes: &[u8]) -> Result<EnvMap> {
    // Three whitespace-separated header tokens after the magic line.
    let mut tokens = Vec::new();
    let mut pos = 0;
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse("PFM header ended early".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1; // single whitespace byte before the raster
    if tokens[0] != "Pf" {
        return Err(Error::Parse(format!("unsupported PFM type {:?} (grayscale Pf only)", tokens[0])));
    }
    let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("PFM header {s:?}: {e}")));
    let (w, h, scale) = (parse(&tokens[1])? as usize, parse(&tokens[2])? as usize, parse(&tokens[3])?);
    let need = pos + 4 * w * h;
    if bytes.len() < need {
        return Err(Error::TruncatedPayload {
            expected: need,
            actual: bytes.len(),
        });
    }
    let little = scale < 0.0;
    let raster: Vec<f64> = bytes[pos..need]
        .chunks_exact(4)
        .map(|c| {
            let b: [u8; 4] = c.try_into().unwrap();
            (if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }) as f64
        })
        .collect();
    let mut texels = vec![0.0; w * h];
    for v in 0..h {
        let src = (h - 1 - v) * w;
        texels[v * w..(v + 1) * w].copy_from_slice(&raster[src..src + w]);
    }
    EnvMap::new(w, h, texels)
}

/// Load an environment map in either the `RENV` container or PFM.
pub fn decode_envmap(bytes: &[u8]) -> Result<EnvMap> {
    if bytes.starts_with(b"Pf") {
        return decode_pfm(bytes);
    }
    let c = decode_container(bytes, ENVMAP_MAGIC, 3, |d| d.iter().map(|v| *v as usize).product())?;
    if c.dims[2] != 1 {
        return Err(Error::Dimension(format!("environment maps are single-channel, got {}", c.dims[2])));
    }
    EnvMap::new(c.dims[0] as usize, c.dims[1] as usize, f32s(c.payload).map(f64::from).collect())
}

pub fn load_envmap(path: impl AsRef<Path>) -> Result<EnvMap> {
    decode_envmap(&fs::read(path)?)
}

/// Middlebury `.flo`: tag, width, height, then interleaved `(dx, dy)` f32.
pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * flow.flow.len());
    out.extend_from_slice(&FLO_TAG.to_le_bytes());
    out.extend_from_slice(&(flow.width as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for [dx, dy] in &flow.flow {
        out.extend_from_slice(&(*dx as f32).to_le_bytes());
        out.extend_from_slice(&(*dy as f32).to_le_bytes());
    }
    out
}

/// Decode `.flo`; every pixel is marked valid.
pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 12 {
        return Err(Error::TruncatedPayload {
            expected: 12,
            actual: bytes.len(),
        });
    }
    let tag: [u8; 4] = bytes[..4].try_into().unwrap();
    if f32::from_le_bytes(tag) != FLO_TAG {
        return Err(Error::BadMagic {
            expected: FLO_TAG.to_le_bytes(),
            found: tag,
        });
    }
    let w = i32::from_le_bytes(bytes[4..8].try_into().unwrap()).max(0) as usize;
    let h = i32::from_le_bytes(bytes[8..12].try_into().unwrap()).max(0) as usize;
    let need = 12 + 8 * w * h;
    if bytes.len() < need {
        return Err(Error::TruncatedPayload {
            expected: need,
            actual: bytes.len(),
        });
    }
    let vals: Vec<f64> = f32s(&bytes[12..need]).map(f64::from).collect();
    Ok(FlowField {
        width: w,
        height: h,
        flow: vals.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
        valid: vec![true; w * h],
    })
}

fn save_flow(flow: &FlowField, dir: &Path, stem: &str) -> Result<()> {
    fs::write(dir.join(format!("{stem}.flo")), encode_flo(flow))?;
    let mask = Image::from_vec(
        flow.width,
        flow.height,
        1,
        flow.valid.iter().map(|v| if *v { 1.0 } else { 0.0 }).collect(),
    )?;
    save_image(&mask, dir.join(format!("{stem}.mask.f32")))
}

fn load_flow(dir: &Path, stem: &str) -> Result<FlowField> {
    let mut flow = decode_flo(&fs::read(dir.join(format!("{stem}.flo")))?)?;
    let mask = load_image(dir.join(format!("{stem}.mask.f32")))?;
    if mask.data.len() != flow.valid.len() {
        return Err(Error::Dimension(format!("flow mask {stem} does not match its flow")));
    }
    flow.valid = mask.data.iter().map(|v| *v > 0.5).collect();
    Ok(flow)
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    version: u32,
    frames: usize,
    cameras: Vec<Camera>,
    lighting: ShLighting,
    render_options: RenderOptions,
    baked: bool,
}

const FRAME_CHANNELS: [&str; 5] = ["rgb", "albedo", "shading", "depth", "weights"];

/// Write a bundle directory:
/// `meta.json`, `frames/NNNN.{rgb,albedo,shading,depth,weights}.f32`,
/// `flows/NNNN.flo` (frame NNNN back to NNNN-1), `flows/long_NNNN.flo`
/// (frame NNNN back to frame 0) with `.mask.f32` validity masks, and
/// optionally `ground_truth.rscn`.
pub fn save_bundle(bundle: &GroundTruthBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let frames_dir = dir.join("frames");
    let flows_dir = dir.join("flows");
    fs::create_dir_all(&frames_dir)?;
    fs::create_dir_all(&flows_dir)?;
    for (i, f) in bundle.frames.iter().enumerate() {
        let images = [&f.rgb, &f.albedo, &f.shading, &f.depth, &f.weights_sum];
        for (name, img) in FRAME_CHANNELS.iter().zip(images) {
            save_image(img, frames_dir.join(format!("{i:04}.{name}.f32")))?;
        }
    }
    for (i, (short, long)) in bundle.flows.iter().zip(&bundle.long_flows).enumerate() {
        save_flow(short, &flows_dir, &format!("{:04}", i + 1))?;
        save_flow(long, &flows_dir, &format!("long_{:04}", i + 1))?;
    }
    if let Some(baked) = &bundle.baked {
        save_scene(baked, dir.join("ground_truth.rscn"))?;
    }
    let meta = BundleMeta {
        version: FORMAT_VERSION,
        frames: bundle.frames.len(),
        cameras: bundle.cameras.clone(),
        lighting: bundle.lighting,
        render_options: bundle.render_options.clone(),
        baked: bundle.baked.is_some(),
    };
    fs::write(
        dir.join("meta.json"),
        serde_json::to_vec_pretty(&meta).map_err(|e| Error::Parse(e.to_string()))?,
    )?;
    Ok(())
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<GroundTruthBundle> {
    let dir = dir.as_ref();
    let meta: BundleMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)
        .map_err(|e| Error::Parse(format!("meta.json: {e}")))?;
    if meta.version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION,
            found: meta.version,
        });
    }
    if meta.cameras.len() != meta.frames {
        return Err(Error::Dimension("meta.json camera count differs from frame count".into()));
    }
    let frames_dir = dir.join("frames");
    let mut frames = Vec::with_capacity(meta.frames);
    for i in 0..meta.frames {
        let path = |name: &str| -> PathBuf { frames_dir.join(format!("{i:04}.{name}.f32")) };
        frames.push(RenderOutput {
            rgb: load_image(path("rgb"))?,
            albedo: load_image(path("albedo"))?,
            shading: load_image(path("shading"))?,
            depth: load_image(path("depth"))?,
            weights_sum: load_image(path("weights"))?,
            normals: None,
            zero_gradient_samples: 0,
        });
    }
    let flows_dir = dir.join("flows");
    let mut flows = Vec::new();
    let mut long_flows = Vec::new();
    for i in 1..meta.frames {
        flows.push(load_flow(&flows_dir, &format!("{i:04}"))?);
        long_flows.push(load_flow(&flows_dir, &format!("long_{i:04}"))?);
    }
    let baked = if meta.baked {
        Some(load_scene(dir.join("ground_truth.rscn"))?)
    } else {
        None
    };
    Ok(GroundTruthBundle {
        frames,
        cameras: meta.cameras,
        lighting: meta.lighting,
        render_options: meta.render_options,
        flows,
        long_flows,
        baked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::triplane::Init;

    #[test]
    fn triplane_round_trip_is_bitwise() {
        let tp = TriPlane::new(6, 3, Init::Gaussian { mean: 0.0, sd: 1.0, seed: 9 }).unwrap();
        let bytes = encode_triplane(&tp).unwrap();
        assert_eq!(bytes.len(), 16 + 4 * 3 * 36 * 3);
        assert_eq!(&bytes[..4], b"RTPL");
        let (back, used) = decode_triplane(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, tp);
    }

    #[test]
    fn corrupt_headers_give_distinct_errors() {
        let tp = TriPlane::new(4, 2, Init::Constant { value: 1.0 }).unwrap();
        let good = encode_triplane(&tp).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_triplane(&bad), Err(Error::BadMagic { .. })));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode_triplane(&bad), Err(Error::VersionMismatch { found: 2, .. })));
        let bad = &good[..good.len() - 1];
        assert!(matches!(decode_triplane(bad), Err(Error::TruncatedPayload { .. })));
    }

    #[test]
    fn pfm_and_renv_round_trip() {
        let env = EnvMap::from_fn(8, 4, |d| 1.5 + d[2] + 0.25 * d[0]).unwrap();
        let back = decode_envmap(&encode_pfm(&env)).unwrap();
        let renv = decode_envmap(&encode_envmap(&env).unwrap()).unwrap();
        for (a, b) in env.texels().iter().zip(back.texels()) {
            assert_eq!(*a as f32, *b as f32);
        }
        assert_eq!(back, renv);
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let img = Image::from_vec(5, 3, 3, (0..45).map(|i| i as f64 / 44.0).collect()).unwrap();
        let back = decode_png(&encode_png(&img).unwrap()).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn flo_round_trip() {
        let mut flow = FlowField::zeros(3, 2);
        flow.flow[4] = [1.5, -2.25];
        let back = decode_flo(&encode_flo(&flow)).unwrap();
        assert_eq!(back, flow);
    }
}
