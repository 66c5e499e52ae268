//! Tri-plane tokenization and the two-branch attention network that predicts
//! per-frame tri-plane residuals over a window of frames.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{decode_container, encode_container, f32s};
use crate::triplane::{DualTriPlane, TriPlane, TriPlaneWindow, PLANE_COUNT};

pub const TCN_MAGIC: [u8; 4] = *b"RTCN";
/// Hidden width of the feed-forward block relative to `hidden`.
pub const MLP_RATIO: usize = 2;
const LAYER_NORM_EPS: f64 = 1e-5;

/// Non-overlapping `patch x patch` tiles of every plane, flattened.
///
/// Token `t = (plane * G + gr) * G + gc` with `G = R / patch`; element
/// `(r * patch + c) * C + ch` holds texel `(plane, gr * patch + r, gc * patch + c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokens {
    pub resolution: usize,
    pub channels: usize,
    pub patch: usize,
    pub data: Vec<f32>,
}

impl Tokens {
    pub fn grid(&self) -> usize {
        self.resolution / self.patch
    }

    pub fn count(&self) -> usize {
        PLANE_COUNT * self.grid() * self.grid()
    }

    pub fn dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn token(&self, t: usize) -> &[f32] {
        let d = self.dim();
        &self.data[t * d..(t + 1) * d]
    }
}

fn check_patch(resolution: usize, patch: usize) -> Result<()> {
    if patch == 0 || resolution % patch != 0 {
        return Err(Error::Dimension(format!("patch {patch} does not divide resolution {resolution}")));
    }
    Ok(())
}

pub fn tokenize(tp: &TriPlane, patch: usize) -> Result<Tokens> {
    let r = tp.resolution();
    check_patch(r, patch)?;
    let c = tp.channels();
    let g = r / patch;
    let src = tp.data();
    let mut data = Vec::with_capacity(src.len());
    for plane in 0..PLANE_COUNT {
        for gr in 0..g {
            for gc in 0..g {
                for pr in 0..patch {
                    let start = tp.index(plane, gr * patch + pr, gc * patch, 0);
                    data.extend_from_slice(&src[start..start + patch * c]);
                }
            }
        }
    }
    Ok(Tokens {
        resolution: r,
        channels: c,
        patch,
        data,
    })
}

pub fn untokenize(tokens: &Tokens) -> Result<TriPlane> {
    let (r, c, patch) = (tokens.resolution, tokens.channels, tokens.patch);
    check_patch(r, patch)?;
    if tokens.data.len() != PLANE_COUNT * r * r * c {
        return Err(Error::Dimension("token payload does not match its shape".into()));
    }
    let g = r / patch;
    let mut data = vec![0.0f32; tokens.data.len()];
    let mut src = tokens.data.chunks_exact(patch * c);
    for plane in 0..PLANE_COUNT {
        for gr in 0..g {
            for gc in 0..g {
                for pr in 0..patch {
                    let start = ((plane * r + gr * patch + pr) * r + gc * patch) * c;
                    data[start..start + patch * c].copy_from_slice(src.next().unwrap());
                }
            }
        }
    }
    TriPlane::from_data(r, c, data)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TcnConfig {
    /// Frames per window.
    pub window: usize,
    /// Self- and cross-attention transformers for the two branches; always 4.
    pub transformers: usize,
    pub heads: usize,
    /// Layers per transformer.
    pub layers: usize,
    pub hidden: usize,
    pub patch: usize,
    pub albedo_channels: usize,
    pub shading_channels: usize,
}

impl Default for TcnConfig {
    fn default() -> Self {
        Self {
            window: 5,
            transformers: 4,
            heads: 8,
            layers: 4,
            hidden: 512,
            patch: 4,
            albedo_channels: 4,
            shading_channels: 1,
        }
    }
}

impl TcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::InvalidArgument(format!("window must be >= 2, got {}", self.window)));
        }
        if self.transformers != 4 {
            return Err(Error::InvalidArgument("the network has exactly 4 transformers".into()));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::InvalidArgument(format!("hidden {} not divisible by heads {}", self.hidden, self.heads)));
        }
        if self.hidden == 0 || self.hidden % 8 != 0 {
            return Err(Error::InvalidArgument(format!("hidden {} must be a positive multiple of 8", self.hidden)));
        }
        if self.layers == 0 || self.patch == 0 || self.albedo_channels == 0 || self.shading_channels == 0 {
            return Err(Error::InvalidArgument("layers, patch and channel counts must be positive".into()));
        }
        Ok(())
    }

    fn dims(&self) -> Result<Vec<u32>> {
        [
            self.window,
            self.transformers,
            self.heads,
            self.layers,
            self.hidden,
            self.patch,
            self.albedo_channels,
            self.shading_channels,
        ]
        .iter()
        .map(|&v| u32::try_from(v).map_err(|_| Error::Dimension(format!("{v} does not fit in u32"))))
        .collect()
    }
}

/// Row-major affine map `y = W x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    fn random(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = (6.0 / (inputs + outputs) as f64).sqrt();
        Self {
            inputs,
            outputs,
            weight: (0..inputs * outputs).map(|_| rng.random_range(-a..a)).collect(),
            bias: vec![0.0; outputs],
        }
    }

    fn zero(&mut self) {
        self.weight.iter_mut().for_each(|w| *w = 0.0);
        self.bias.iter_mut().for_each(|b| *b = 0.0);
    }

    /// Apply to `x.len() / inputs` rows.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let rows = x.len() / self.inputs;
        let mut out = Vec::with_capacity(rows * self.outputs);
        for row in x.chunks_exact(self.inputs) {
            for o in 0..self.outputs {
                let w = &self.weight[o * self.inputs..(o + 1) * self.inputs];
                out.push(self.bias[o] + w.iter().zip(row).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f64>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerNorm {
    fn new(width: usize) -> Self {
        Self {
            gain: vec![1.0; width],
            bias: vec![0.0; width],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let w = self.gain.len();
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks_exact(w) {
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (k, v) in row.iter().enumerate() {
                out.push((v - mean) * inv * self.gain[k] + self.bias[k]);
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f64>; 2] {
        [&mut self.gain, &mut self.bias]
    }
}

/// `tanh` approximation of the Gaussian error linear unit.
pub fn gelu(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    0.5 * x * (1.0 + (K * (x + 0.044715 * x * x * x)).tanh())
}

/// Pre-norm attention block followed by a feed-forward block. Queries come
/// from the block input, keys and values from the context (the input itself
/// for self-attention).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayer {
    pub norm_query: LayerNorm,
    pub norm_context: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm_mlp: LayerNorm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

impl AttentionLayer {
    fn random(hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            norm_query: LayerNorm::new(hidden),
            norm_context: LayerNorm::new(hidden),
            query: Linear::random(hidden, hidden, rng),
            key: Linear::random(hidden, hidden, rng),
            value: Linear::random(hidden, hidden, rng),
            output: Linear::random(hidden, hidden, rng),
            norm_mlp: LayerNorm::new(hidden),
            mlp_in: Linear::random(hidden, MLP_RATIO * hidden, rng),
            mlp_out: Linear::random(MLP_RATIO * hidden, hidden, rng),
        }
    }

    pub fn forward(&self, x: &[f64], context: &[f64], heads: usize) -> Vec<f64> {
        let h = self.query.inputs;
        let q = self.query.apply(&self.norm_query.apply(x));
        let ctx = self.norm_context.apply(context);
        let k = self.key.apply(&ctx);
        let v = self.value.apply(&ctx);
        let attended = multi_head_attention(&q, &k, &v, h, heads);
        let mut y: Vec<f64> = self.output.apply(&attended).iter().zip(x).map(|(a, b)| a + b).collect();
        let mut inner = self.mlp_in.apply(&self.norm_mlp.apply(&y));
        inner.iter_mut().for_each(|v| *v = gelu(*v));
        for (a, b) in y.iter_mut().zip(self.mlp_out.apply(&inner)) {
            *a += b;
        }
        y
    }

    fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        out.extend(self.norm_query.tensors_mut());
        out.extend(self.norm_context.tensors_mut());
        out.extend(self.query.tensors_mut());
        out.extend(self.key.tensors_mut());
        out.extend(self.value.tensors_mut());
        out.extend(self.output.tensors_mut());
        out.extend(self.norm_mlp.tensors_mut());
        out.extend(self.mlp_in.tensors_mut());
        out.extend(self.mlp_out.tensors_mut());
        out
    }
}

/// Scaled dot-product attention, heads taken as contiguous slices of width `hidden / heads`.
fn multi_head_attention(q: &[f64], k: &[f64], v: &[f64], hidden: usize, heads: usize) -> Vec<f64> {
    let nq = q.len() / hidden;
    let nk = k.len() / hidden;
    let dh = hidden / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; q.len()];
    let mut scores = vec![0.0; nk];
    for head in 0..heads {
        let off = head * dh;
        for i in 0..nq {
            let qi = &q[i * hidden + off..i * hidden + off + dh];
            let mut max = f64::NEG_INFINITY;
            for (j, s) in scores.iter_mut().enumerate() {
                let kj = &k[j * hidden + off..j * hidden + off + dh];
                *s = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                max = max.max(*s);
            }
            let mut total = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                total += *s;
            }
            let oi = &mut out[i * hidden + off..i * hidden + off + dh];
            for (j, s) in scores.iter().enumerate() {
                let w = s / total;
                let vj = &v[j * hidden + off..j * hidden + off + dh];
                oi.iter_mut().zip(vj).for_each(|(o, x)| *o += w * x);
            }
        }
    }
    out
}

/// One branch (albedo or shading) of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    /// Per-texel channel mixing applied before tokenization.
    pub pre_mixer: Linear,
    pub embed: Linear,
    pub self_layers: Vec<AttentionLayer>,
    pub cross_layers: Vec<AttentionLayer>,
    /// Per-token mixing before the final projection.
    pub post_mixer: Linear,
    pub final_projection: Linear,
}

impl Branch {
    fn random(channels: usize, cfg: &TcnConfig, rng: &mut ChaCha8Rng) -> Self {
        let token_dim = cfg.patch * cfg.patch * channels;
        Self {
            pre_mixer: Linear::random(channels, channels, rng),
            embed: Linear::random(token_dim, cfg.hidden, rng),
            self_layers: (0..cfg.layers).map(|_| AttentionLayer::random(cfg.hidden, rng)).collect(),
            cross_layers: (0..cfg.layers).map(|_| AttentionLayer::random(cfg.hidden, rng)).collect(),
            post_mixer: Linear::random(cfg.hidden, cfg.hidden, rng),
            final_projection: Linear::random(cfg.hidden, token_dim, rng),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        out.extend(self.pre_mixer.tensors_mut());
        out.extend(self.embed.tensors_mut());
        for layer in self.self_layers.iter_mut().chain(self.cross_layers.iter_mut()) {
            out.extend(layer.tensors_mut());
        }
        out.extend(self.post_mixer.tensors_mut());
        out.extend(self.final_projection.tensors_mut());
        out
    }

    /// Tokens of every frame after mixing, embedding and positional encoding.
    fn embed_window(&self, planes: &[&TriPlane], patch: usize, hidden: usize) -> Result<Vec<f64>> {
        let mut rows = Vec::new();
        for (frame, tp) in planes.iter().enumerate() {
            let raw: Vec<f64> = tp.data().iter().map(|&v| v as f64).collect();
            let mixed: Vec<f32> = self.pre_mixer.apply(&raw).into_iter().map(|v| v as f32).collect();
            let tokens = tokenize(&TriPlane::from_data(tp.resolution(), tp.channels(), mixed)?, patch)?;
            let input: Vec<f64> = tokens.data.iter().map(|&v| v as f64).collect();
            let embedded = self.embed.apply(&input);
            let g = tokens.grid();
            for (t, row) in embedded.chunks_exact(hidden).enumerate() {
                let pos = positional_encoding([frame, t / (g * g), (t / g) % g, t % g], hidden);
                rows.extend(row.iter().zip(&pos).map(|(a, b)| a + b));
            }
        }
        Ok(rows)
    }

    fn project(&self, x: &[f64]) -> Vec<f64> {
        let mut mixed = self.post_mixer.apply(x);
        mixed.iter_mut().for_each(|v| *v = gelu(*v));
        self.final_projection.apply(&mixed)
    }
}

/// Sinusoidal encoding of `(frame, plane, row, col)`; each coordinate fills a
/// quarter of the width with `sin`/`cos` pairs.
pub fn positional_encoding(coords: [usize; 4], hidden: usize) -> Vec<f64> {
    let quarter = hidden / 4;
    let mut out = Vec::with_capacity(hidden);
    for &c in &coords {
        for k in 0..quarter / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * k as f64 / quarter as f64);
            let (s, co) = (c as f64 * freq).sin_cos();
            out.push(s);
            out.push(co);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TcnParams {
    pub config: TcnConfig,
    pub albedo: Branch,
    pub shading: Branch,
}

impl TcnParams {
    /// Xavier-uniform weights, unit layer-norm gains, zero biases.
    pub fn random(cfg: &TcnConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            config: cfg.clone(),
            albedo: Branch::random(cfg.albedo_channels, cfg, &mut rng),
            shading: Branch::random(cfg.shading_channels, cfg, &mut rng),
        })
    }

    /// Zero both final projections so every residual is exactly zero.
    pub fn zero_final_projection(&mut self) {
        self.albedo.final_projection.zero();
        self.shading.final_projection.zero();
    }

    /// Every tensor in serialization order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = self.albedo.tensors_mut();
        out.extend(self.shading.tensors_mut());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.clone().tensors_mut().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.clone().tensors_mut().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Random weights with a zero final projection: the forward pass returns zero residuals.
pub fn init_identity(cfg: &TcnConfig) -> Result<TcnParams> {
    let mut p = TcnParams::random(cfg, 0)?;
    p.zero_final_projection();
    Ok(p)
}

/// Per-frame residual tri-planes for a window (add with [`DualTriPlane::add_residual`]).
pub fn tcn_forward(window: &TriPlaneWindow, params: &TcnParams) -> Result<Vec<DualTriPlane>> {
    let cfg = &params.config;
    cfg.validate()?;
    if window.len() != cfg.window {
        return Err(Error::Dimension(format!("window has {} frames, network expects {}", window.len(), cfg.window)));
    }
    let first = &window.frames[0];
    if first.albedo.channels() != cfg.albedo_channels || first.shading.channels() != cfg.shading_channels {
        return Err(Error::Dimension("window channels do not match the network".into()));
    }
    if window.frames.iter().any(|f| !f.same_shape(first)) {
        return Err(Error::Dimension("window frames differ in shape".into()));
    }
    let albedo_planes: Vec<&TriPlane> = window.frames.iter().map(|f| &f.albedo).collect();
    let shading_planes: Vec<&TriPlane> = window.frames.iter().map(|f| &f.shading).collect();
    let mut a = params.albedo.embed_window(&albedo_planes, cfg.patch, cfg.hidden)?;
    let mut s = params.shading.embed_window(&shading_planes, cfg.patch, cfg.hidden)?;
    for layer in &params.albedo.self_layers {
        a = layer.forward(&a, &a, cfg.heads);
    }
    for layer in &params.shading.self_layers {
        s = layer.forward(&s, &s, cfg.heads);
    }
    for (la, ls) in params.albedo.cross_layers.iter().zip(&params.shading.cross_layers) {
        let next_a = la.forward(&a, &s, cfg.heads);
        let next_s = ls.forward(&s, &a, cfg.heads);
        a = next_a;
        s = next_s;
    }
    let ra = params.albedo.project(&a);
    let rs = params.shading.project(&s);
    let split = |values: Vec<f64>, tp: &TriPlane| -> Result<Vec<TriPlane>> {
        let per_frame = values.len() / cfg.window;
        values
            .chunks_exact(per_frame)
            .map(|chunk| {
                untokenize(&Tokens {
                    resolution: tp.resolution(),
                    channels: tp.channels(),
                    patch: cfg.patch,
                    data: chunk.iter().map(|&v| v as f32).collect(),
                })
            })
            .collect()
    };
    let albedo = split(ra, &first.albedo)?;
    let shading = split(rs, &first.shading)?;
    Ok(albedo
        .into_iter()
        .zip(shading)
        .zip(&window.frames)
        .map(|((a, s), f)| DualTriPlane::new(a, s, f.lighting_tag))
        .collect())
}

pub fn encode_tcn(params: &TcnParams) -> Result<Vec<u8>> {
    let dims = params.config.dims()?;
    let mut p = params.clone();
    let payload: Vec<f32> = p.tensors_mut().into_iter().flat_map(|t| t.iter().map(|&v| v as f32).collect::<Vec<_>>()).collect();
    Ok(encode_container(TCN_MAGIC, &dims, payload))
}

pub fn decode_tcn(bytes: &[u8]) -> Result<TcnParams> {
    // The element count depends on the configuration, so read the header first.
    let header = decode_container(bytes, TCN_MAGIC, 8, |_| 0)?;
    let d: Vec<usize> = header.dims.iter().map(|&v| v as usize).collect();
    let cfg = TcnConfig {
        window: d[0],
        transformers: d[1],
        heads: d[2],
        layers: d[3],
        hidden: d[4],
        patch: d[5],
        albedo_channels: d[6],
        shading_channels: d[7],
    };
    let mut params = TcnParams::random(&cfg, 0)?;
    let count = params.parameter_count();
    let container = decode_container(bytes, TCN_MAGIC, 8, |_| count)?;
    let mut values = f32s(container.payload);
    for tensor in params.tensors_mut() {
        for v in tensor.iter_mut() {
            *v = values.next().unwrap() as f64;
        }
    }
    Ok(params)
}

pub fn save_tcn(params: &TcnParams, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_tcn(params)?)?;
    Ok(())
}

pub fn load_tcn(path: impl AsRef<Path>) -> Result<TcnParams> {
    decode_tcn(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::triplane::Init;

    #[test]
    fn token_round_trip_and_count() {
        let tp = TriPlane::new(8, 3, Init::Gaussian { mean: 0.0, sd: 1.0, seed: 4 }).unwrap();
        let tokens = tokenize(&tp, 4).unwrap();
        assert_eq!(tokens.count(), 3 * 4);
        assert_eq!(tokens.dim(), 48);
        assert_eq!(untokenize(&tokens).unwrap(), tp);
        assert!(tokenize(&tp, 3).is_err());
    }

    #[test]
    fn token_layout() {
        let r = 4;
        let data: Vec<f32> = (0..3 * r * r * 2).map(|i| i as f32).collect();
        let tp = TriPlane::from_data(r, 2, data).unwrap();
        let tokens = tokenize(&tp, 2).unwrap();
        // token (plane 1, gr 1, gc 0), element (row 1, col 1, channel 1)
        let t = (4 + 2) * 8;
        let e = (2 + 1) * 2 + 1;
        assert_eq!(tokens.data[t + e], tp.data()[tp.index(1, 3, 1, 1)]);
    }

    #[test]
    fn config_validation() {
        assert!(TcnConfig::default().validate().is_ok());
        assert!(TcnConfig { heads: 7, ..TcnConfig::default() }.validate().is_err());
        assert!(TcnConfig { window: 1, ..TcnConfig::default() }.validate().is_err());
    }

    #[test]
    fn attention_matches_dense_oracle() {
        let (hidden, heads, nq, nk) = (8, 2, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-2.0..2.0)).collect() };
        let (q, k, v) = (draw(nq * hidden), draw(nk * hidden), draw(nk * hidden));
        let got = multi_head_attention(&q, &k, &v, hidden, heads);
        let dh = hidden / heads;
        for h in 0..heads {
            for i in 0..nq {
                let logits: Vec<f64> = (0..nk)
                    .map(|j| (0..dh).map(|d| q[i * hidden + h * dh + d] * k[j * hidden + h * dh + d]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                for d in 0..dh {
                    let want: f64 = (0..nk).map(|j| logits[j].exp() / z * v[j * hidden + h * dh + d]).sum();
                    assert!((got[i * hidden + h * dh + d] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_191_990_608_276_8).abs() < 1e-12);
        assert!((gelu(-3.0) + 0.003_637_392_081_773_0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_moments() {
        let ln = LayerNorm::new(6);
        let y = ln.apply(&[1.0, 2.0, 3.0, 4.0, 5.0, 9.0]);
        let mean = y.iter().sum::<f64>() / 6.0;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-5);
    }
}
