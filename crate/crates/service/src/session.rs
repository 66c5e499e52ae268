use std::sync::Arc;

use anyhow::{ensure, Result};
use relit_core::camera::Camera;
use relit_core::render::{PreparedScene, RenderOptions, RenderOutput};
use relit_core::sh::ShLighting;
use serde::{Deserialize, Serialize};

use crate::protocol::ClientMessage;

pub const DEFAULT_SIZE: usize = 128;
pub const DEFAULT_SPP: usize = 64;
pub const MIN_SIZE: usize = 8;
pub const MAX_SIZE: usize = 1024;
pub const MAX_SPP: usize = 1024;

/// Initial state of every new session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub camera: Camera,
    /// `None` renders the learned shading; otherwise analytic relighting.
    pub lighting: Option<ShLighting>,
    pub size: usize,
    pub spp: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            camera: Camera::default(),
            lighting: None,
            size: DEFAULT_SIZE,
            spp: DEFAULT_SPP,
        }
    }
}

/// Immutable render state tagged with the version that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub frame_id: u32,
    pub camera: Camera,
    pub lighting: Option<ShLighting>,
    pub opts: RenderOptions,
}

impl Snapshot {
    pub fn render(&self, scene: &PreparedScene) -> relit_core::Result<RenderOutput> {
        match &self.lighting {
            Some(l) => scene.render_relit(&self.camera, l, &self.opts),
            None => scene.render(&self.camera, &self.opts),
        }
    }
}

/// Mutable per-connection state; every accepted mutation bumps `frame_id`.
#[derive(Clone, Debug)]
pub struct Session {
    pub scene: Arc<PreparedScene>,
    state: Snapshot,
}

impl Session {
    pub fn new(scene: Arc<PreparedScene>, cfg: &SessionConfig) -> Result<Self> {
        check_opts(cfg.size, cfg.spp)?;
        let camera = cfg.camera.with_size(cfg.size);
        let opts = RenderOptions::default().with_samples(cfg.spp);
        opts.bounds(&camera)?;
        Ok(Self {
            scene,
            state: Snapshot { frame_id: 0, camera, lighting: cfg.lighting, opts },
        })
    }

    pub fn frame_id(&self) -> u32 {
        self.state.frame_id
    }

    pub fn snapshot(&self) -> Snapshot {
        self.state.clone()
    }

    /// Apply a state-changing message and return the version it takes effect from.
    /// Invalid values leave the state untouched.
    pub fn apply(&mut self, msg: &ClientMessage) -> Result<u32> {
        let mut next = self.state.clone();
        match msg {
            ClientMessage::SetCamera { yaw, pitch, roll, radius, focal } => {
                let c = &mut next.camera;
                c.yaw = yaw.unwrap_or(c.yaw);
                c.pitch = pitch.unwrap_or(c.pitch);
                c.roll = roll.unwrap_or(c.roll);
                c.radius = radius.unwrap_or(c.radius);
                c.focal = focal.unwrap_or(c.focal);
            }
            ClientMessage::SetLighting { sh } => next.lighting = Some(ShLighting::from_slice(sh)?),
            ClientMessage::SetOpts { size, spp } => {
                let size = size.unwrap_or(next.camera.image_size);
                let spp = spp.unwrap_or(next.opts.samples_per_ray);
                check_opts(size, spp)?;
                next.camera = next.camera.with_size(size);
                next.opts.samples_per_ray = spp;
            }
            other => anyhow::bail!("{} does not change the session state", message_name(other)),
        }
        next.opts.bounds(&next.camera)?;
        next.frame_id = self.state.frame_id.checked_add(1).ok_or_else(|| anyhow::anyhow!("frame counter exhausted"))?;
        self.state = next;
        Ok(self.state.frame_id)
    }
}

fn check_opts(size: usize, spp: usize) -> Result<()> {
    ensure!((MIN_SIZE..=MAX_SIZE).contains(&size), "size {size} outside {MIN_SIZE}..={MAX_SIZE}");
    ensure!((2..=MAX_SPP).contains(&spp), "spp {spp} outside 2..={MAX_SPP}");
    Ok(())
}

pub fn message_name(msg: &ClientMessage) -> &'static str {
    match msg {
        ClientMessage::Hello { .. } => "hello",
        ClientMessage::SetCamera { .. } => "set_camera",
        ClientMessage::SetLighting { .. } => "set_lighting",
        ClientMessage::SetOpts { .. } => "set_opts",
        ClientMessage::RequestFrame => "request_frame",
        ClientMessage::Stream { .. } => "stream",
    }
}
