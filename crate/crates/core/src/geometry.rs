//! Coordinate normalization, pinhole cameras and world-to-pixel projection.
//!
//! World frame is right-handed with z up. Camera frame follows the usual
//! computer-vision convention: x right, y down, z forward. Extrinsics are
//! stored world-to-camera: `p_cam = R * w + t`. Pixel `(i, j)` has its center
//! at `(u, v) = (i, j)`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::encoding::NormCoord2;
use crate::error::{Error, Result};
use crate::raster::{LabelMap, RgbImage};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coord2 {
    pub x: f64,
    pub y: f64,
}

impl Coord2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldPoint3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl WorldPoint3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn xy(&self) -> Coord2 {
        Coord2::new(self.x, self.y)
    }

    fn vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }
}

/// Extent of the supervised area plus a margin fraction on every side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBounds {
    pub min_x: f64,
    pub max_x: f64,
    pub min_y: f64,
    pub max_y: f64,
    pub margin: f64,
}

pub const DEFAULT_MARGIN: f64 = 0.01;

impl SceneBounds {
    pub fn new(min_x: f64, max_x: f64, min_y: f64, max_y: f64, margin: f64) -> Result<Self> {
        let b = Self {
            min_x,
            max_x,
            min_y,
            max_y,
            margin,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.min_x, self.max_x, self.min_y, self.max_y, self.margin]
            .iter()
            .all(|v| v.is_finite());
        if !finite || !(self.max_x > self.min_x) || !(self.max_y > self.min_y) {
            return Err(Error::DegenerateBounds(format!(
                "x [{}, {}], y [{}, {}]",
                self.min_x, self.max_x, self.min_y, self.max_y
            )));
        }
        if self.margin < 0.0 {
            return Err(Error::DegenerateBounds("negative margin".into()));
        }
        Ok(())
    }

    pub fn from_points<I: IntoIterator<Item = Coord2>>(points: I, margin: f64) -> Result<Self> {
        let mut b = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
        for p in points {
            b[0] = b[0].min(p.x);
            b[1] = b[1].max(p.x);
            b[2] = b[2].min(p.y);
            b[3] = b[3].max(p.y);
        }
        Self::new(b[0], b[1], b[2], b[3], margin)
    }

    fn axis(lo: f64, hi: f64, margin: f64) -> (f64, f64) {
        let pad = (hi - lo) * margin;
        (lo - pad, hi + pad)
    }

    /// Extent after applying the margin: `(x_lo, x_hi, y_lo, y_hi)`.
    pub fn padded(&self) -> (f64, f64, f64, f64) {
        let (x0, x1) = Self::axis(self.min_x, self.max_x, self.margin);
        let (y0, y1) = Self::axis(self.min_y, self.max_y, self.margin);
        (x0, x1, y0, y1)
    }

    pub fn normalize(&self, p: Coord2) -> NormCoord2 {
        let (x0, x1, y0, y1) = self.padded();
        NormCoord2::new(
            2.0 * (p.x - x0) / (x1 - x0) - 1.0,
            2.0 * (p.y - y0) / (y1 - y0) - 1.0,
        )
    }

    pub fn denormalize(&self, p: NormCoord2) -> Coord2 {
        let (x0, x1, y0, y1) = self.padded();
        Coord2::new(
            x0 + (p.x() + 1.0) * 0.5 * (x1 - x0),
            y0 + (p.y() + 1.0) * 0.5 * (y1 - y0),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// KITTI odometry left color camera, resampled to `width x height`.
    pub fn kitti_scaled(width: usize, height: usize) -> Self {
        let sx = width as f64 / 1241.0;
        let sy = height as f64 / 376.0;
        Self {
            fx: 718.856 * sx,
            fy: 718.856 * sx,
            cx: 607.1928 * sx,
            cy: 185.2157 * sy,
            width,
            height,
        }
    }
}

/// World-to-camera rigid transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extrinsics {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

pub const ORTHONORMAL_TOLERANCE: f64 = 1e-6;

impl Extrinsics {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let e = Self {
            rotation,
            translation,
        };
        e.check_orthonormal(ORTHONORMAL_TOLERANCE)?;
        Ok(e)
    }

    pub fn check_orthonormal(&self, tol: f64) -> Result<()> {
        let err = (self.rotation * self.rotation.transpose() - Matrix3::identity()).amax();
        if err > tol || self.rotation.determinant() < 0.0 {
            return Err(Error::Config(format!(
                "rotation is not orthonormal (|R R^T - I| = {err:.3e})"
            )));
        }
        Ok(())
    }

    /// Inverts a camera-to-world pose.
    pub fn from_camera_to_world(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let r = rotation.transpose();
        Self {
            rotation: r,
            translation: -(r * translation),
        }
    }

    /// Camera-to-world pose as `(R, t)`.
    pub fn camera_to_world(&self) -> (Matrix3<f64>, Vector3<f64>) {
        let r = self.rotation.transpose();
        (r, -(r * self.translation))
    }

    /// Camera at `position` heading `yaw` radians from +x (counter-clockwise)
    /// and tilted `pitch` radians below the horizon.
    pub fn looking(position: WorldPoint3, yaw: f64, pitch: f64) -> Self {
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let forward = Vector3::new(cp * cy, cp * sy, -sp);
        let right = Vector3::new(sy, -cy, 0.0);
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * position.vector());
        Self {
            rotation,
            translation,
        }
    }

    pub fn center(&self) -> WorldPoint3 {
        let c = -(self.rotation.transpose() * self.translation);
        WorldPoint3::new(c.x, c.y, c.z)
    }

    /// Heading of the camera on the ground plane. Uses the optical axis, or
    /// the image-up direction when the camera looks straight down.
    pub fn yaw(&self) -> f64 {
        let f = self.rotation.row(2);
        if f[0].hypot(f[1]) > 1e-9 {
            f[1].atan2(f[0])
        } else {
            let d = self.rotation.row(1);
            (-d[1]).atan2(-d[0])
        }
    }

    pub fn to_camera(&self, w: WorldPoint3) -> Vector3<f64> {
        self.rotation * w.vector() + self.translation
    }

    pub fn to_world(&self, p_cam: Vector3<f64>) -> WorldPoint3 {
        let w = self.rotation.transpose() * (p_cam - self.translation);
        WorldPoint3::new(w.x, w.y, w.z)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub extrinsics: Extrinsics,
    pub intrinsics: Intrinsics,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
    /// Camera-frame z, meters.
    pub depth: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    InView(PixelCoord),
    Behind,
    OutOfBounds(PixelCoord),
}

impl Projection {
    pub fn in_view(self) -> Option<PixelCoord> {
        match self {
            Projection::InView(p) => Some(p),
            _ => None,
        }
    }
}

pub fn project(w: WorldPoint3, cam: &Camera) -> Projection {
    let p = cam.extrinsics.to_camera(w);
    if p.z <= 0.0 {
        return Projection::Behind;
    }
    let k = &cam.intrinsics;
    let px = PixelCoord {
        u: k.fx * p.x / p.z + k.cx,
        v: k.fy * p.y / p.z + k.cy,
        depth: p.z,
    };
    if px.u >= 0.0 && px.u < k.width as f64 && px.v >= 0.0 && px.v < k.height as f64 {
        Projection::InView(px)
    } else {
        Projection::OutOfBounds(px)
    }
}

/// Camera-frame direction (z = 1) through pixel `(u, v)`.
pub fn pixel_ray(u: f64, v: f64, k: &Intrinsics) -> Vector3<f64> {
    Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0)
}

/// World point at camera-frame depth `depth` along the ray through `(u, v)`.
pub fn unproject(p: PixelCoord, cam: &Camera) -> WorldPoint3 {
    cam.extrinsics
        .to_world(pixel_ray(p.u, p.v, &cam.intrinsics) * p.depth)
}

/// Bilinear color lookup with edge clamping.
pub fn sample_color(image: &RgbImage, p: PixelCoord) -> [f64; 3] {
    let u = p.u.clamp(0.0, (image.width - 1) as f64);
    let v = p.v.clamp(0.0, (image.height - 1) as f64);
    let x0 = u.floor() as usize;
    let y0 = v.floor() as usize;
    let x1 = (x0 + 1).min(image.width - 1);
    let y1 = (y0 + 1).min(image.height - 1);
    let fx = u - x0 as f64;
    let fy = v - y0 as f64;
    let mut out = [0.0; 3];
    for (x, y, w) in [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x1, y0, fx * (1.0 - fy)),
        (x0, y1, (1.0 - fx) * fy),
        (x1, y1, fx * fy),
    ] {
        if w == 0.0 {
            continue;
        }
        let c = image.get(x, y);
        for k in 0..3 {
            out[k] += w * c[k] as f64;
        }
    }
    out
}

/// Nearest-pixel label lookup.
pub fn sample_label(labels: &LabelMap, p: PixelCoord) -> u8 {
    let (x, y) = nearest_pixel(p, labels.width, labels.height);
    labels.get(x, y)
}

pub fn nearest_pixel(p: PixelCoord, width: usize, height: usize) -> (usize, usize) {
    let x = (p.u.round().max(0.0) as usize).min(width - 1);
    let y = (p.v.round().max(0.0) as usize).min(height - 1);
    (x, y)
}

/// A posed image with optional semantic labels.
#[derive(Clone, Debug)]
pub struct CameraFrame {
    pub id: usize,
    pub camera: Camera,
    pub image: RgbImage,
    pub labels: Option<LabelMap>,
}

impl CameraFrame {
    pub fn new(id: usize, camera: Camera, image: RgbImage, labels: Option<LabelMap>) -> Result<Self> {
        let k = &camera.intrinsics;
        if image.width != k.width || image.height != k.height {
            return Err(Error::Shape(format!(
                "frame {id}: image {}x{} does not match intrinsics {}x{}",
                image.width, image.height, k.width, k.height
            )));
        }
        if let Some(l) = &labels {
            if l.width != image.width || l.height != image.height {
                return Err(Error::Shape(format!(
                    "frame {id}: label map {}x{} does not match image {}x{}",
                    l.width, l.height, image.width, image.height
                )));
            }
        }
        camera.extrinsics.check_orthonormal(ORTHONORMAL_TOLERANCE)?;
        Ok(Self {
            id,
            camera,
            image,
            labels,
        })
    }
}
