use std::path::Path;

use anyhow::{Context, Result};
use relit_core::fit::FitConfig;
use serde::{Deserialize, Serialize};

/// Settings file shared by all subcommands; command-line flags take precedence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub render: RenderSection,
    pub scene: SceneSection,
    pub fit: FitConfig,
    pub smooth: SmoothSection,
    pub serve: ServeSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSection {
    pub size: usize,
    pub spp: usize,
    pub yaw: f64,
    pub pitch: f64,
    pub radius: f64,
    pub sh: Option<Vec<f64>>,
}

impl Default for RenderSection {
    fn default() -> Self {
        Self {
            size: crate::session::DEFAULT_SIZE,
            spp: crate::session::DEFAULT_SPP,
            yaw: 0.0,
            pitch: 0.0,
            radius: relit_core::camera::DEFAULT_RADIUS,
            sh: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSection {
    pub views: usize,
    pub radius: f64,
    /// Ground-truth bake resolution; 0 skips baking.
    pub resolution: usize,
}

impl Default for SceneSection {
    fn default() -> Self {
        Self {
            views: 8,
            radius: 5.0,
            resolution: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothSection {
    pub tau: Option<f64>,
    pub window: usize,
    pub noise: f64,
    pub windows: usize,
    pub taus: Vec<f64>,
}

impl Default for SmoothSection {
    fn default() -> Self {
        Self {
            tau: None,
            window: 5,
            noise: 0.3,
            windows: 4,
            taus: vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 1e3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub host: String,
    pub port: u16,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8765,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("config {}: not found or unreadable", path.display()))?;
        toml::from_str(&text).with_context(|| format!("config {}", path.display()))
    }
}
