//! Relightable tri-plane scene representation, rendering, fitting and evaluation.

pub mod camera;
pub mod diff;
pub mod error;
pub mod fit;
pub mod image;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod render;
pub mod scene;
pub mod sh;
pub mod tcn;
pub mod temporal;
pub mod triplane;

pub use error::{Error, Result};
