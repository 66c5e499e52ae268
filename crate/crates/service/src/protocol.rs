//! Wire format shared by the server and its clients.
//!
//! Control traffic is JSON text tagged by `"type"`. Frames are binary: four
//! little-endian u32 (width, height, channels, frame_id) followed by the pixel
//! payload, which is 8-bit interleaved samples, a PNG stream or f32 samples.

use anyhow::{bail, ensure, Result};
use relit_core::image::Image;
use relit_core::io::{decode_png, encode_png};
use relit_core::render::RenderOutput;
use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    #[default]
    Raw,
    Png,
    /// Little-endian f32 samples, unquantized.
    F32,
}

/// Which render channel a frame carries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    #[default]
    Rgb,
    Albedo,
    /// Single-channel shading, for debugging lighting.
    Shading,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Hello {
        version: u32,
        #[serde(default)]
        encoding: Encoding,
        #[serde(default)]
        channel: Channel,
    },
    SetCamera {
        yaw: Option<f64>,
        pitch: Option<f64>,
        roll: Option<f64>,
        radius: Option<f64>,
        focal: Option<f64>,
    },
    SetLighting {
        sh: Vec<f64>,
    },
    SetOpts {
        size: Option<usize>,
        spp: Option<usize>,
    },
    RequestFrame,
    Stream {
        on: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello {
        version: u32,
        encoding: Encoding,
        channel: Channel,
        frame_id: u32,
    },
    Ack {
        frame_id: u32,
    },
    Error {
        msg: String,
    },
}

impl ClientMessage {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("message serializes")
    }
}

impl ServerMessage {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("message serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameHeader {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub frame_id: u32,
}

impl FrameHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        for (k, v) in [self.width, self.height, self.channels, self.frame_id].into_iter().enumerate() {
            out[4 * k..4 * k + 4].copy_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        ensure!(bytes.len() >= HEADER_LEN, "frame shorter than its {HEADER_LEN}-byte header");
        let word = |k: usize| u32::from_le_bytes(bytes[4 * k..4 * k + 4].try_into().unwrap());
        Ok(Self {
            width: word(0),
            height: word(1),
            channels: word(2),
            frame_id: word(3),
        })
    }

    pub fn samples(&self) -> usize {
        self.width as usize * self.height as usize * self.channels as usize
    }
}

/// The image a frame of the given channel carries.
pub fn frame_image(out: &RenderOutput, channel: Channel) -> &Image {
    match channel {
        Channel::Rgb => &out.rgb,
        Channel::Albedo => &out.albedo,
        Channel::Shading => &out.shading,
    }
}

pub fn encode_image(img: &Image, frame_id: u32, encoding: Encoding) -> Result<Vec<u8>> {
    let header = FrameHeader {
        width: u32::try_from(img.width)?,
        height: u32::try_from(img.height)?,
        channels: u32::try_from(img.channels)?,
        frame_id,
    };
    let mut bytes = header.to_bytes().to_vec();
    match encoding {
        Encoding::Raw => bytes.extend(img.to_u8()),
        Encoding::Png => bytes.extend(encode_png(img)?),
        Encoding::F32 => bytes.extend(img.data.iter().flat_map(|&v| (v as f32).to_le_bytes())),
    }
    Ok(bytes)
}

pub fn encode_frame(out: &RenderOutput, channel: Channel, frame_id: u32, encoding: Encoding) -> Result<Vec<u8>> {
    encode_image(frame_image(out, channel), frame_id, encoding)
}

/// Decode a frame message; the payload kind follows from its length or PNG signature.
pub fn decode_frame(bytes: &[u8]) -> Result<(FrameHeader, Encoding, Image)> {
    let header = FrameHeader::from_bytes(bytes)?;
    let payload = &bytes[HEADER_LEN..];
    let (w, h, c) = (header.width as usize, header.height as usize, header.channels as usize);
    let n = header.samples();
    let (encoding, data) = if payload.len() == n && !payload.starts_with(&PNG_SIGNATURE) {
        (Encoding::Raw, payload.iter().map(|&v| v as f64 / 255.0).collect())
    } else if payload.starts_with(&PNG_SIGNATURE) {
        let img = decode_png(payload)?;
        ensure!(
            (img.width, img.height, img.channels) == (w, h, c),
            "PNG is {}x{}x{}, header says {w}x{h}x{c}",
            img.width,
            img.height,
            img.channels
        );
        (Encoding::Png, img.data)
    } else if payload.len() == 4 * n {
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        (Encoding::F32, data)
    } else {
        bail!("payload of {} bytes does not match a {w}x{h}x{c} frame", payload.len());
    };
    Ok((header, encoding, Image::from_vec(w, h, c, data)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize, c: usize) -> Image {
        let data = (0..w * h * c).map(|i| (i % 256) as f64 / 255.0).collect();
        Image::from_vec(w, h, c, data).unwrap()
    }

    #[test]
    fn header_layout() {
        let h = FrameHeader { width: 3, height: 2, channels: 1, frame_id: 0x0102_0304 };
        assert_eq!(h.to_bytes(), [3, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 4, 3, 2, 1]);
        assert_eq!(FrameHeader::from_bytes(&h.to_bytes()).unwrap(), h);
        assert!(FrameHeader::from_bytes(&[0; 15]).is_err());
    }

    #[test]
    fn raw_length_and_round_trip() {
        let img = ramp(7, 5, 3);
        let bytes = encode_image(&img, 9, Encoding::Raw).unwrap();
        assert_eq!(bytes.len(), 16 + 7 * 5 * 3);
        let (h, enc, back) = decode_frame(&bytes).unwrap();
        assert_eq!((h.frame_id, enc), (9, Encoding::Raw));
        assert_eq!(back, img);
    }

    #[test]
    fn png_and_f32_round_trip() {
        let img = ramp(6, 4, 1);
        let (_, enc, back) = decode_frame(&encode_image(&img, 1, Encoding::Png).unwrap()).unwrap();
        assert_eq!(enc, Encoding::Png);
        assert_eq!(back, img);
        let smooth = Image::from_vec(2, 2, 1, vec![0.1, 0.25, 1.5, -0.2]).unwrap();
        let (_, enc, back) = decode_frame(&encode_image(&smooth, 1, Encoding::F32).unwrap()).unwrap();
        assert_eq!(enc, Encoding::F32);
        for (a, b) in back.data.iter().zip(&smooth.data) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn messages_parse() {
        let m = ClientMessage::parse(r#"{"type":"set_camera","yaw":0.3,"pitch":0,"roll":0,"radius":2.7,"focal":18.837}"#).unwrap();
        assert_eq!(
            m,
            ClientMessage::SetCamera { yaw: Some(0.3), pitch: Some(0.0), roll: Some(0.0), radius: Some(2.7), focal: Some(18.837) }
        );
        assert_eq!(ClientMessage::parse(r#"{"type":"request_frame"}"#).unwrap(), ClientMessage::RequestFrame);
        assert_eq!(ClientMessage::parse(r#"{"type":"stream","on":true}"#).unwrap(), ClientMessage::Stream { on: true });
        let hello = ClientMessage::parse(r#"{"type":"hello","version":1}"#).unwrap();
        assert_eq!(hello, ClientMessage::Hello { version: 1, encoding: Encoding::Raw, channel: Channel::Rgb });
        assert!(ClientMessage::parse(r#"{"type":"set_lighting"}"#).is_err());
        assert!(ClientMessage::parse(r#"{"type":"warp"}"#).is_err());
        assert!(ClientMessage::parse(r#"{"type":"set_opts","size":64,"zoom":2}"#).is_err());
        assert_eq!(ServerMessage::Ack { frame_id: 4 }.to_json(), r#"{"type":"ack","frame_id":4}"#);
        assert_eq!(ServerMessage::Error { msg: "x".into() }.to_json(), r#"{"type":"error","msg":"x"}"#);
    }
}
