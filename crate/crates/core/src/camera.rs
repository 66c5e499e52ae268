//! Orbit-parameterized pinhole camera.
//!
//! World space is `z`-up. With zero angles the camera sits on the `+x` axis at
//! distance `radius` and looks at the origin. Yaw turns it about `z`, pitch
//! raises it toward `+z`, roll spins the image about the view axis. Camera axes
//! follow the x-right, y-down, z-forward convention.
//!
//! `focal` is the field of view in degrees in the normalized convention of the
//! FFHQ pose sampler (`focal_px = size / (sqrt(2) tan(fov / 2))`) and
//! `principal` is given in pixels of a 512-pixel reference image.

use std::f64::consts::SQRT_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Image size the principal point is expressed in.
pub const REFERENCE_IMAGE_SIZE: f64 = 512.0;

pub const DEFAULT_FOCAL: f64 = 18.837;
pub const DEFAULT_RADIUS: f64 = 2.7;
pub const DEFAULT_PRINCIPAL: f64 = 256.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub radius: f64,
    pub focal: f64,
    pub principal: [f64; 2],
    pub image_size: usize,
}

impl Default for Camera {
    fn default() -> Self {
        Self {
            yaw: 0.0,
            pitch: 0.0,
            roll: 0.0,
            radius: DEFAULT_RADIUS,
            focal: DEFAULT_FOCAL,
            principal: [DEFAULT_PRINCIPAL; 2],
            image_size: 64,
        }
    }
}

/// World-from-camera rigid transform. Rotation columns are the camera
/// right, down and forward axes in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Pose {
    #[inline]
    pub fn axis(&self, k: usize) -> [f64; 3] {
        [self.rotation[0][k], self.rotation[1][k], self.rotation[2][k]]
    }

    /// World point to camera coordinates.
    #[inline]
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let d = sub(p, self.translation);
        [dot(self.axis(0), d), dot(self.axis(1), d), dot(self.axis(2), d)]
    }

    pub fn determinant(&self) -> f64 {
        let m = self.rotation;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
}

#[inline]
pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub(crate) fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.yaw, self.pitch, self.roll, self.radius, self.focal]
            .iter()
            .chain(self.principal.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("camera parameters"));
        }
        if self.radius <= 0.0 {
            return Err(Error::DegenerateCamera(format!("radius {} <= 0", self.radius)));
        }
        if self.focal <= 0.0 || self.focal >= 180.0 {
            return Err(Error::DegenerateCamera(format!(
                "field of view {} outside (0, 180)",
                self.focal
            )));
        }
        if self.image_size < 8 {
            return Err(Error::DegenerateCamera(format!(
                "image size {} < 8",
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn with_size(mut self, image_size: usize) -> Self {
        self.image_size = image_size;
        self
    }

    pub fn focal_pixels(&self) -> f64 {
        let half = (self.focal.to_radians() * 0.5).tan();
        self.image_size as f64 / (SQRT_2 * half)
    }

    /// Principal point in pixels of this camera's image.
    pub fn principal_pixels(&self) -> [f64; 2] {
        let s = self.image_size as f64 / REFERENCE_IMAGE_SIZE;
        [self.principal[0] * s, self.principal[1] * s]
    }

    pub fn position(&self) -> [f64; 3] {
        let (sy, cy) = self.yaw.sin_cos();
        let (sp, cp) = self.pitch.sin_cos();
        [
            self.radius * cp * cy,
            self.radius * cp * sy,
            self.radius * sp,
        ]
    }

    pub fn pose(&self) -> Pose {
        let eye = self.position();
        let forward = normalize([-eye[0], -eye[1], -eye[2]]);
        let right0 = normalize(cross(forward, [0.0, 0.0, 1.0]));
        let down0 = cross(forward, right0);
        let (sr, cr) = self.roll.sin_cos();
        let right = [
            cr * right0[0] + sr * down0[0],
            cr * right0[1] + sr * down0[1],
            cr * right0[2] + sr * down0[2],
        ];
        let down = [
            -sr * right0[0] + cr * down0[0],
            -sr * right0[1] + cr * down0[1],
            -sr * right0[2] + cr * down0[2],
        ];
        let mut rotation = [[0.0; 3]; 3];
        for i in 0..3 {
            rotation[i][0] = right[i];
            rotation[i][1] = down[i];
            rotation[i][2] = forward[i];
        }
        Pose {
            rotation,
            translation: eye,
        }
    }

    /// Ray through the center of pixel `(col, row)`.
    pub fn ray(&self, pose: &Pose, col: usize, row: usize) -> Ray {
        let f = self.focal_pixels();
        let [cx, cy] = self.principal_pixels();
        let xc = (col as f64 + 0.5 - cx) / f;
        let yc = (row as f64 + 0.5 - cy) / f;
        let (r, d, fw) = (pose.axis(0), pose.axis(1), pose.axis(2));
        let dir = normalize([
            xc * r[0] + yc * d[0] + fw[0],
            xc * r[1] + yc * d[1] + fw[1],
            xc * r[2] + yc * d[2] + fw[2],
        ]);
        Ray {
            origin: pose.translation,
            direction: dir,
        }
    }

    /// Project a world point to continuous pixel-index coordinates (pixel
    /// centers at integers). Returns the camera-space depth along the view axis.
    pub fn project(&self, pose: &Pose, p: [f64; 3]) -> Option<([f64; 2], f64)> {
        let c = pose.to_camera(p);
        if c[2] <= 1e-9 {
            return None;
        }
        let f = self.focal_pixels();
        let [cx, cy] = self.principal_pixels();
        Some((
            [f * c[0] / c[2] + cx - 0.5, f * c[1] / c[2] + cy - 0.5],
            c[2],
        ))
    }
}

/// World-from-camera transform for the orbit parameterization.
pub fn camera_pose_matrix(cam: &Camera) -> Pose {
    cam.pose()
}

/// Row-major rays for every pixel.
pub fn generate_rays(cam: &Camera) -> Result<Vec<Ray>> {
    cam.validate()?;
    let pose = cam.pose();
    let n = cam.image_size;
    let mut rays = Vec::with_capacity(n * n);
    for row in 0..n {
        for col in 0..n {
            rays.push(cam.ray(&pose, col, row));
        }
    }
    Ok(rays)
}

/// Which of the two training views a pose is drawn for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewSlot {
    First,
    Second,
}

/// Draw a camera from the training-view distributions.
///
/// First slot: focal `N(18.837, 1)`, radius `N(2.7, 0.1)`, principal `N(256, 14)`,
/// pitch `U(-26, 26)` deg, yaw `U(-49, 49)` deg, roll `N(0, 2)` deg.
/// Second slot: pitch `U(-26, 26)` deg, yaw `U(-36, 36)` deg, everything else fixed.
pub fn sample_camera_pose(seed: u64, slot: ViewSlot, image_size: usize) -> Camera {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_camera_pose_with(&mut rng, slot, image_size)
}

pub fn sample_camera_pose_with<R: Rng + ?Sized>(rng: &mut R, slot: ViewSlot, image_size: usize) -> Camera {
    let deg = |d: f64| d.to_radians();
    let uniform = |lo: f64, hi: f64| Uniform::new(lo, hi).expect("non-empty range");
    match slot {
        ViewSlot::First => {
            let focal = Normal::new(DEFAULT_FOCAL, 1.0).unwrap().sample(rng);
            let radius = Normal::new(DEFAULT_RADIUS, 0.1).unwrap().sample(rng);
            let principal_dist = Normal::new(DEFAULT_PRINCIPAL, 14.0).unwrap();
            let principal = [principal_dist.sample(rng), principal_dist.sample(rng)];
            let pitch = uniform(deg(-26.0), deg(26.0)).sample(rng);
            let yaw = uniform(deg(-49.0), deg(49.0)).sample(rng);
            let roll = Normal::new(0.0, deg(2.0)).unwrap().sample(rng);
            Camera {
                yaw,
                pitch,
                roll,
                radius,
                focal,
                principal,
                image_size,
            }
        }
        ViewSlot::Second => {
            let pitch = uniform(deg(-26.0), deg(26.0)).sample(rng);
            let yaw = uniform(deg(-36.0), deg(36.0)).sample(rng);
            Camera {
                yaw,
                pitch,
                roll: 0.0,
                radius: DEFAULT_RADIUS,
                focal: DEFAULT_FOCAL,
                principal: [DEFAULT_PRINCIPAL; 2],
                image_size,
            }
        }
    }
}

/// Componentwise linear interpolation; `t = 0` gives `a`, `t = 1` gives `b` exactly.
pub fn interpolate_cameras(a: &Camera, b: &Camera, t: f64) -> Result<Camera> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("t = {t} outside [0, 1]")));
    }
    if a.image_size != b.image_size {
        return Err(Error::Dimension(format!(
            "image sizes differ: {} vs {}",
            a.image_size, b.image_size
        )));
    }
    let lerp = |x: f64, y: f64| {
        if t == 0.0 {
            x
        } else if t == 1.0 {
            y
        } else {
            x + (y - x) * t
        }
    };
    Ok(Camera {
        yaw: lerp(a.yaw, b.yaw),
        pitch: lerp(a.pitch, b.pitch),
        roll: lerp(a.roll, b.roll),
        radius: lerp(a.radius, b.radius),
        focal: lerp(a.focal, b.focal),
        principal: [lerp(a.principal[0], b.principal[0]), lerp(a.principal[1], b.principal[1])],
        image_size: a.image_size,
    })
}

/// Exponential smoothing `s_t = alpha x_t + (1 - alpha) s_{t-1}`, `s_0 = x_0`.
pub fn smooth_pose_sequence(poses: &[Camera], alpha: f64) -> Result<Vec<Camera>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha = {alpha} outside (0, 1]")));
    }
    let Some(first) = poses.first() else {
        return Err(Error::InvalidArgument("empty pose sequence".into()));
    };
    let mut out = Vec::with_capacity(poses.len());
    out.push(*first);
    let ema = |x: f64, s: f64| alpha * x + (1.0 - alpha) * s;
    for cam in &poses[1..] {
        let s = out.last().unwrap();
        out.push(Camera {
            yaw: ema(cam.yaw, s.yaw),
            pitch: ema(cam.pitch, s.pitch),
            roll: ema(cam.roll, s.roll),
            radius: ema(cam.radius, s.radius),
            focal: ema(cam.focal, s.focal),
            principal: [
                ema(cam.principal[0], s.principal[0]),
                ema(cam.principal[1], s.principal[1]),
            ],
            image_size: cam.image_size,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_pose_looks_at_origin_from_plus_x() {
        let cam = Camera::default();
        let pose = cam.pose();
        let t = pose.translation;
        assert!((t[0] - 2.7).abs() < 1e-12 && t[1].abs() < 1e-12 && t[2].abs() < 1e-12);
        let fwd = pose.axis(2);
        assert!((fwd[0] + 1.0).abs() < 1e-12);
        assert!((pose.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let a = Camera::default();
        let b = Camera {
            yaw: 0.4,
            pitch: -0.2,
            radius: 3.0,
            ..a
        };
        assert_eq!(interpolate_cameras(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate_cameras(&a, &b, 1.0).unwrap(), b);
        assert!((interpolate_cameras(&a, &b, 0.5).unwrap().yaw - 0.2).abs() < 1e-15);
        assert!(interpolate_cameras(&a, &b, 1.5).is_err());
    }

    #[test]
    fn smoothing_contract() {
        let cams: Vec<Camera> = (0..5)
            .map(|i| Camera {
                yaw: if i == 0 { 0.0 } else { 1.0 },
                ..Camera::default()
            })
            .collect();
        let s = smooth_pose_sequence(&cams, 0.5).unwrap();
        let yaws: Vec<f64> = s.iter().map(|c| c.yaw).collect();
        assert_eq!(yaws, vec![0.0, 0.5, 0.75, 0.875, 0.9375]);
        assert_eq!(smooth_pose_sequence(&cams, 1.0).unwrap(), cams);
        assert!(smooth_pose_sequence(&cams, 0.0).is_err());
        assert!(smooth_pose_sequence(&[], 0.5).is_err());
    }

    #[test]
    fn degenerate_cameras_rejected() {
        assert!(Camera { radius: 0.0, ..Camera::default() }.validate().is_err());
        assert!(Camera { image_size: 4, ..Camera::default() }.validate().is_err());
        assert!(Camera { focal: -1.0, ..Camera::default() }.validate().is_err());
    }
}
