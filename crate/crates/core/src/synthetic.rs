//! Procedural road scenes with analytic height, color and class, plus a
//! ray-marching renderer used as ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    pixel_ray, project, sample_color, sample_label, Camera, CameraFrame, Coord2, Extrinsics, Intrinsics, SceneBounds,
    WorldPoint3, DEFAULT_MARGIN,
};
use crate::network::{MANHOLE, ROAD, TRAFFIC_LANE};
use crate::raster::{LabelMap, RgbImage, IGNORE_LABEL};
use crate::supervision::{HeightSample, HeightSource};

/// Fixed march step along rays, meters.
pub const MARCH_STEP: f64 = 0.05;
/// Bisection stops once the bracket is shorter than this, meters.
pub const ROOT_TOLERANCE: f64 = 1e-9;
/// Rays are not followed past this camera depth.
pub const MAX_DEPTH: f64 = 1000.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeightProfile {
    Flat { z0: f64 },
    /// `amplitude` on the first `duty` fraction of every period, 0 elsewhere.
    SquareWave { amplitude: f64, period: f64, duty: f64 },
    /// `z = grade * x`.
    Slope { grade: f64 },
}

impl HeightProfile {
    pub fn z(&self, x: f64) -> f64 {
        match *self {
            HeightProfile::Flat { z0 } => z0,
            HeightProfile::SquareWave {
                amplitude,
                period,
                duty,
            } => {
                if x.rem_euclid(period) < duty * period {
                    amplitude
                } else {
                    0.0
                }
            }
            HeightProfile::Slope { grade } => grade * x,
        }
    }

    /// Height range over `x` in `[0, length]`.
    pub fn z_range(&self, length: f64) -> (f64, f64) {
        match *self {
            HeightProfile::Flat { z0 } => (z0, z0),
            HeightProfile::SquareWave { amplitude, .. } => (amplitude.min(0.0), amplitude.max(0.0)),
            HeightProfile::Slope { grade } => {
                let e = grade * length;
                (e.min(0.0), e.max(0.0))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            HeightProfile::SquareWave { period, duty, .. } if !(period > 0.0) || !(0.0..=1.0).contains(&duty) => {
                Err(Error::Config("square wave needs period > 0 and duty in [0, 1]".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Axis-aligned rectangle on the ground plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min_x: f64,
    pub max_x: f64,
    pub min_y: f64,
    pub max_y: f64,
}

impl Rect {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min_x && x <= self.max_x && y >= self.min_y && y <= self.max_y
    }

    pub fn area(&self) -> f64 {
        (self.max_x - self.min_x) * (self.max_y - self.min_y)
    }
}

/// A painted line parallel to the road axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stripe {
    pub y_center: f64,
    pub width: f64,
    /// `(painted, gap)` lengths for dashed lines.
    #[serde(default)]
    pub dash: Option<(f64, f64)>,
}

impl Stripe {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        if (y - self.y_center).abs() > self.width / 2.0 {
            return false;
        }
        match self.dash {
            None => true,
            Some((on, off)) => x.rem_euclid(on + off) < on,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disc {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

impl Disc {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        (x - self.x).hypot(y - self.y) <= self.radius
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    pub road_color: [f64; 3],
    pub lane_color: [f64; 3],
    pub manhole_color: [f64; 3],
    pub sky_color: [f64; 3],
    pub stripes: Vec<Stripe>,
    pub manholes: Vec<Disc>,
    /// Amplitude of the slow procedural color drift; 0 gives flat class colors.
    pub variation_amplitude: f64,
    /// Wavelength of the drift along the road, meters.
    pub variation_period: f64,
}

impl Default for TextureSpec {
    fn default() -> Self {
        Self {
            road_color: [0.36, 0.35, 0.38],
            lane_color: [0.92, 0.92, 0.88],
            manhole_color: [0.14, 0.12, 0.10],
            sky_color: [0.62, 0.76, 0.95],
            stripes: vec![
                Stripe {
                    y_center: 1.75,
                    width: 0.25,
                    dash: None,
                },
                Stripe {
                    y_center: -1.75,
                    width: 0.25,
                    dash: Some((3.0, 3.0)),
                },
            ],
            manholes: [(10.0, -3.0), (30.0, 0.0), (50.0, 3.0), (70.0, -0.5), (90.0, 2.8)]
                .into_iter()
                .map(|(x, y)| Disc { x, y, radius: 0.4 })
                .collect(),
            variation_amplitude: 0.02,
            variation_period: 20.0,
        }
    }
}

/// Regularly spaced poses along the road.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPath {
    pub count: usize,
    pub start_x: f64,
    pub spacing: f64,
    pub lateral: f64,
    /// Mount height above the road surface under the camera.
    pub height: f64,
    /// Tilt below the horizon, radians.
    pub pitch: f64,
    #[serde(default)]
    pub yaw: f64,
}

impl Default for CameraPath {
    fn default() -> Self {
        Self {
            count: 50,
            start_x: 0.0,
            spacing: 2.0,
            lateral: 0.0,
            height: 1.65,
            pitch: 10f64.to_radians(),
            yaw: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Road occupies `x` in `[0, length]`, `y` in `[-width/2, width/2]`.
    pub length: f64,
    pub width: f64,
    pub profile: HeightProfile,
    pub texture: TextureSpec,
    /// Rectangles where height supervision is withheld.
    pub holes: Vec<Rect>,
    pub camera: CameraPath,
    pub image_width: usize,
    pub image_height: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            length: 100.0,
            width: 10.0,
            profile: HeightProfile::SquareWave {
                amplitude: 0.2,
                period: 8.0,
                duty: 0.5,
            },
            texture: TextureSpec::default(),
            holes: vec![
                Rect {
                    min_x: 49.0,
                    max_x: 51.0,
                    min_y: -5.0,
                    max_y: 5.0,
                },
                Rect {
                    min_x: 97.5,
                    max_x: 100.0,
                    min_y: 2.5,
                    max_y: 5.0,
                },
            ],
            camera: CameraPath::default(),
            image_width: 320,
            image_height: 96,
        }
    }
}

/// Analytic surface attributes at one ground coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfacePoint {
    pub z: f64,
    pub color: [f64; 3],
    pub class: u8,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.length > 0.0 && self.width > 0.0) {
            return Err(Error::Config("road length and width must be positive".into()));
        }
        if self.image_width == 0 || self.image_height == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        self.profile.validate()?;
        let road = self.road_rect();
        for h in &self.holes {
            if !(road.contains(h.min_x, h.min_y) && road.contains(h.max_x, h.max_y)) || h.area() <= 0.0 {
                return Err(Error::Config(format!("hole {h:?} is not a proper rectangle inside the road")));
            }
        }
        for m in &self.texture.manholes {
            if !(road.contains(m.x - m.radius, m.y - m.radius) && road.contains(m.x + m.radius, m.y + m.radius)) {
                return Err(Error::Config(format!("manhole {m:?} leaves the road")));
            }
        }
        for s in &self.texture.stripes {
            if (s.y_center.abs() + s.width / 2.0) > self.width / 2.0 {
                return Err(Error::Config(format!("stripe {s:?} leaves the road")));
            }
        }
        Ok(())
    }

    pub fn road_rect(&self) -> Rect {
        Rect {
            min_x: 0.0,
            max_x: self.length,
            min_y: -self.width / 2.0,
            max_y: self.width / 2.0,
        }
    }

    pub fn bounds(&self) -> SceneBounds {
        let r = self.road_rect();
        SceneBounds {
            min_x: r.min_x,
            max_x: r.max_x,
            min_y: r.min_y,
            max_y: r.max_y,
            margin: DEFAULT_MARGIN,
        }
    }

    pub fn on_road(&self, x: f64, y: f64) -> bool {
        self.road_rect().contains(x, y)
    }

    pub fn in_hole(&self, x: f64, y: f64) -> bool {
        self.holes.iter().any(|h| h.contains(x, y))
    }

    pub fn hole_area(&self) -> f64 {
        self.holes.iter().map(Rect::area).sum()
    }

    pub fn amplitude(&self) -> f64 {
        let (lo, hi) = self.profile.z_range(self.length);
        hi - lo
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::kitti_scaled(self.image_width, self.image_height)
    }

    pub fn poses(&self) -> Vec<Extrinsics> {
        let c = &self.camera;
        (0..c.count)
            .map(|i| {
                let x = c.start_x + i as f64 * c.spacing;
                let z = self.profile.z(x) + c.height;
                Extrinsics::looking(WorldPoint3::new(x, c.lateral, z), c.yaw, c.pitch)
            })
            .collect()
    }

    pub fn cameras(&self) -> Vec<Camera> {
        let k = self.intrinsics();
        self.poses()
            .into_iter()
            .map(|extrinsics| Camera {
                extrinsics,
                intrinsics: k,
            })
            .collect()
    }
}

/// Height, color and class of the road at `(x, y)`.
pub fn eval_surface(spec: &SceneSpec, x: f64, y: f64) -> SurfacePoint {
    let t = &spec.texture;
    let (class, base) = if t.manholes.iter().any(|m| m.contains(x, y)) {
        (MANHOLE, t.manhole_color)
    } else if t.stripes.iter().any(|s| s.contains(x, y)) {
        (TRAFFIC_LANE, t.lane_color)
    } else {
        (ROAD, t.road_color)
    };
    let w = std::f64::consts::TAU / t.variation_period;
    let a = t.variation_amplitude;
    let drift = [(w * x).sin(), (w * x + 1.0).sin(), (0.5 * w * x).cos() * (w * y).cos()];
    let mut color = [0.0; 3];
    for k in 0..3 {
        color[k] = (base[k] + a * drift[k]).clamp(0.0, 1.0);
    }
    SurfacePoint {
        z: spec.profile.z(x),
        color,
        class,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    /// Camera-frame depth per pixel; infinite where the ray misses the road.
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

#[derive(Clone, Debug)]
pub struct RenderedFrame {
    pub image: RgbImage,
    pub labels: LabelMap,
    pub depth: DepthMap,
}

/// Camera depth at which the ray through `(u, v)` first meets the road
/// surface, if it does.
pub fn intersect_ray(spec: &SceneSpec, cam: &Camera, u: f64, v: f64) -> Option<f64> {
    let d_cam = pixel_ray(u, v, &cam.intrinsics);
    let (r_cw, origin) = cam.extrinsics.camera_to_world();
    let dir = r_cw * d_cam;
    let (zlo, zhi) = spec.profile.z_range(spec.length);
    let (zlo, zhi) = (zlo - 1e-3, zhi + 1e-3);
    // depth interval where the ray lies inside the height slab
    let (mut t0, mut t1) = if dir.z.abs() < 1e-12 {
        if origin.z < zlo || origin.z > zhi {
            return None;
        }
        (0.0, MAX_DEPTH)
    } else {
        let a = (zlo - origin.z) / dir.z;
        let b = (zhi - origin.z) / dir.z;
        (a.min(b), a.max(b))
    };
    t0 = t0.max(0.0);
    t1 = t1.min(MAX_DEPTH);
    if t0 >= t1 {
        return None;
    }
    let f = |t: f64| {
        let p = origin + dir * t;
        if spec.on_road(p.x, p.y) {
            Some(p.z - spec.profile.z(p.x))
        } else {
            None
        }
    };
    let dt = MARCH_STEP / dir.norm();
    let mut prev = t0;
    let mut t = t0;
    while t < t1 {
        t = (t + dt).min(t1);
        if let Some(g) = f(t) {
            if g <= 0.0 {
                let (mut a, mut b) = (prev, t);
                while (b - a) * dir.norm() > ROOT_TOLERANCE {
                    let m = 0.5 * (a + b);
                    match f(m) {
                        Some(g) if g <= 0.0 => b = m,
                        _ => a = m,
                    }
                }
                return Some(0.5 * (a + b));
            }
        }
        prev = t;
    }
    None
}

pub fn render_frame(spec: &SceneSpec, cam: &Camera) -> RenderedFrame {
    let k = &cam.intrinsics;
    let (w, h) = (k.width, k.height);
    let rows: Vec<Vec<([f32; 3], u8, f64)>> = (0..h)
        .into_par_iter()
        .map(|j| {
            (0..w)
                .map(|i| {
                    let (u, v) = (i as f64, j as f64);
                    match intersect_ray(spec, cam, u, v) {
                        Some(depth) => {
                            let p = cam.extrinsics.to_world(pixel_ray(u, v, k) * depth);
                            let s = eval_surface(spec, p.x, p.y);
                            (s.color.map(|c| c as f32), s.class, depth)
                        }
                        None => (spec.texture.sky_color.map(|c| c as f32), IGNORE_LABEL, f64::INFINITY),
                    }
                })
                .collect()
        })
        .collect();
    let mut image = RgbImage::new(w, h, [0.0; 3]);
    let mut labels = LabelMap::new(w, h, IGNORE_LABEL);
    let mut depth = DepthMap {
        width: w,
        height: h,
        data: vec![f64::INFINITY; w * h],
    };
    for (j, row) in rows.into_iter().enumerate() {
        for (i, (c, l, d)) in row.into_iter().enumerate() {
            image.set(i, j, c);
            labels.set(i, j, l);
            depth.data[j * w + i] = d;
        }
    }
    RenderedFrame { image, labels, depth }
}

/// Renders every pose of the scene into labeled frames with ids `0..count`.
pub fn render_frames(spec: &SceneSpec) -> Result<Vec<CameraFrame>> {
    spec.validate()?;
    spec.cameras()
        .into_iter()
        .enumerate()
        .map(|(id, cam)| {
            let r = render_frame(spec, &cam);
            CameraFrame::new(id, cam, r.image, Some(r.labels))
        })
        .collect()
}

/// Sampling density and height noise of a simulated point cloud.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloudSpec {
    /// Points per square meter of road, before removing holes.
    pub density: f64,
    /// Standard deviation of additive height noise, meters.
    pub z_noise: f64,
    pub respect_holes: bool,
}

impl CloudSpec {
    pub fn lidar() -> Self {
        Self {
            density: 20.0,
            z_noise: 0.005,
            respect_holes: true,
        }
    }

    pub fn sfm_dense() -> Self {
        Self {
            density: 10.0,
            z_noise: 0.03,
            respect_holes: true,
        }
    }

    pub fn sfm_sparse() -> Self {
        Self {
            density: 1.0,
            z_noise: 0.05,
            respect_holes: true,
        }
    }

    /// Preset for a simulated source, `None` for sources that are not clouds.
    pub fn for_source(source: HeightSource) -> Option<Self> {
        match source {
            HeightSource::Lidar => Some(Self::lidar()),
            HeightSource::SfmDense => Some(Self::sfm_dense()),
            HeightSource::SfmSparse => Some(Self::sfm_sparse()),
            HeightSource::Synthetic => Some(Self {
                density: 20.0,
                z_noise: 0.0,
                respect_holes: true,
            }),
            HeightSource::Pose => None,
        }
    }
}

/// Uniform surface points; `round(density * road area)` candidates are drawn
/// and those inside holes are dropped when `respect_holes` is set.
pub fn generate_cloud_points(spec: &SceneSpec, cloud: &CloudSpec, seed: u64) -> Result<Vec<WorldPoint3>> {
    if !(cloud.density >= 0.0) || !(cloud.z_noise >= 0.0) {
        return Err(Error::Config("cloud density and noise must be non-negative".into()));
    }
    let road = spec.road_rect();
    let n = (cloud.density * road.area()).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cloud.z_noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.gen_range(road.min_x..road.max_x);
        let y = rng.gen_range(road.min_y..road.max_y);
        let e = noise.sample(&mut rng);
        if cloud.respect_holes && spec.in_hole(x, y) {
            continue;
        }
        out.push(WorldPoint3::new(x, y, spec.profile.z(x) + e));
    }
    Ok(out)
}

/// Noise-free height samples over the road.
pub fn generate_point_cloud(spec: &SceneSpec, density: f64, seed: u64, respect_holes: bool) -> Result<Vec<HeightSample>> {
    let cloud = CloudSpec {
        density,
        z_noise: 0.0,
        respect_holes,
    };
    Ok(generate_cloud_points(spec, &cloud, seed)?
        .into_iter()
        .map(|w| HeightSample {
            p: w.xy(),
            z_gt: w.z,
            source: HeightSource::Synthetic,
        })
        .collect())
}

/// Outcome of checking one surface point against a rendered frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OracleCheck {
    /// Not visible, or too close to a class or depth edge to be meaningful.
    Skipped,
    Pass,
    Fail { color_error: f64, class: u8, expected: u8 },
}

/// Projects the surface point at `(x, y)` into `frame` and compares the
/// sampled color and label with [`eval_surface`]. Points within `margin_px`
/// pixels of a label edge, or hidden behind nearer surface, are skipped.
pub fn oracle_check(spec: &SceneSpec, cam: &Camera, frame: &RenderedFrame, x: f64, y: f64, margin_px: usize) -> OracleCheck {
    let s = eval_surface(spec, x, y);
    let Some(px) = project(WorldPoint3::new(x, y, s.z), cam).in_view() else {
        return OracleCheck::Skipped;
    };
    let (w, h) = (frame.labels.width as isize, frame.labels.height as isize);
    let (ci, cj) = (px.u.round() as isize, px.v.round() as isize);
    let m = margin_px as isize;
    if ci - m < 0 || cj - m < 0 || ci + m >= w || cj + m >= h {
        return OracleCheck::Skipped;
    }
    let center = frame.labels.get(ci as usize, cj as usize);
    for j in cj - m..=cj + m {
        for i in ci - m..=ci + m {
            let (i, j) = (i as usize, j as usize);
            let d = frame.depth.get(i, j);
            // uniform label and no occluding or background surface nearby
            if frame.labels.get(i, j) != center || !d.is_finite() || (d - px.depth).abs() > 0.05 * px.depth {
                return OracleCheck::Skipped;
            }
        }
    }
    let c = sample_color(&frame.image, px);
    let color_error = (0..3).map(|k| (c[k] - s.color[k]).abs()).fold(0.0, f64::max);
    let class = sample_label(&frame.labels, px);
    if color_error <= 2.0 / 255.0 && class == s.class {
        OracleCheck::Pass
    } else {
        OracleCheck::Fail {
            color_error,
            class,
            expected: s.class,
        }
    }
}

/// Mask of road points on a regular grid: `(points, in_hole)`.
pub fn dense_grid(spec: &SceneSpec, step: f64) -> (Vec<Coord2>, Vec<bool>) {
    let nx = (spec.length / step).floor() as usize + 1;
    let ny = (spec.width / step).floor() as usize + 1;
    let mut pts = Vec::with_capacity(nx * ny);
    let mut hole = Vec::with_capacity(nx * ny);
    for i in 0..nx {
        for j in 0..ny {
            let p = Coord2::new(i as f64 * step, -spec.width / 2.0 + j as f64 * step);
            hole.push(spec.in_hole(p.x, p.y));
            pts.push(p);
        }
    }
    (pts, hole)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn wave(amp: f64, period: f64) -> HeightProfile {
        HeightProfile::SquareWave {
            amplitude: amp,
            period,
            duty: 0.5,
        }
    }

    #[test]
    fn square_wave_values() {
        let p = wave(0.2, 4.0);
        assert_eq!(p.z(1.0), 0.2);
        assert_eq!(p.z(3.0), 0.0);
        assert_eq!(p.z(2.0), 0.0);
        assert_eq!(p.z(4.0), 0.2);
    }

    #[test]
    fn classes_by_region() {
        let spec = SceneSpec::default();
        assert_eq!(eval_surface(&spec, 10.0, -3.0).class, MANHOLE);
        assert_eq!(eval_surface(&spec, 12.0, 1.75).class, TRAFFIC_LANE);
        assert_eq!(eval_surface(&spec, 1.0, -1.75).class, TRAFFIC_LANE);
        assert_eq!(eval_surface(&spec, 4.0, -1.75).class, ROAD);
        assert_eq!(eval_surface(&spec, 12.0, 0.5).class, ROAD);
        assert_eq!(eval_surface(&spec, 12.0, 0.5), eval_surface(&spec, 12.0, 0.5));
    }

    #[test]
    fn default_scene_is_valid() {
        let spec = SceneSpec::default();
        spec.validate().unwrap();
        assert_eq!(spec.poses().len(), 50);
        let mut bad = spec.clone();
        bad.holes.push(Rect {
            min_x: 99.0,
            max_x: 101.0,
            min_y: 0.0,
            max_y: 1.0,
        });
        assert!(bad.validate().is_err());
    }

    fn flat_spec() -> SceneSpec {
        SceneSpec {
            profile: HeightProfile::Flat { z0: 0.0 },
            texture: TextureSpec {
                stripes: vec![],
                manholes: vec![],
                variation_amplitude: 0.0,
                ..TextureSpec::default()
            },
            holes: vec![],
            ..SceneSpec::default()
        }
    }

    #[test]
    fn looking_down_on_flat_road() {
        let spec = flat_spec();
        let k = Intrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 10.0,
            cy: 10.0,
            width: 21,
            height: 21,
        };
        let cam = Camera {
            extrinsics: Extrinsics::looking(WorldPoint3::new(50.0, 0.0, 3.0), 0.0, FRAC_PI_2),
            intrinsics: k,
        };
        let r = render_frame(&spec, &cam);
        let road = spec.texture.road_color.map(|c| c as f32);
        assert!(r.image.data.iter().all(|c| *c == road));
        assert!(r.labels.data.iter().all(|l| *l == ROAD));
        assert_abs_diff_eq!(r.depth.get(10, 10), 3.0, epsilon = 1e-6);
    }

    #[test]
    fn optical_axis_depth_matches_closed_form() {
        let spec = flat_spec();
        let pitch = 0.3;
        let cam = Camera {
            extrinsics: Extrinsics::looking(WorldPoint3::new(5.0, 0.0, 1.65), 0.0, pitch),
            intrinsics: Intrinsics {
                fx: 100.0,
                fy: 100.0,
                cx: 8.0,
                cy: 6.0,
                width: 17,
                height: 13,
            },
        };
        let r = render_frame(&spec, &cam);
        assert_abs_diff_eq!(r.depth.get(8, 6), 1.65 / pitch.sin(), epsilon = 1e-6);
    }

    #[test]
    fn sky_rows_are_ignored() {
        let spec = SceneSpec::default();
        let cam = spec.cameras()[0];
        let r = render_frame(&spec, &cam);
        assert!((0..cam.intrinsics.width).all(|i| r.labels.get(i, 0) == IGNORE_LABEL));
        let bottom = cam.intrinsics.height - 1;
        let mid = cam.intrinsics.width / 2;
        assert_ne!(r.labels.get(mid, bottom), IGNORE_LABEL);
        assert!(r.depth.get(mid, bottom).is_finite());
    }

    #[test]
    fn cloud_respects_holes_and_density() {
        let spec = SceneSpec::default();
        assert!(generate_point_cloud(&spec, 0.0, 1, true).unwrap().is_empty());
        let pts = generate_point_cloud(&spec, 5.0, 1, true).unwrap();
        assert!(pts.iter().all(|s| !spec.in_hole(s.p.x, s.p.y)));
        let n = 5.0 * spec.road_rect().area();
        let p = 1.0 - spec.hole_area() / spec.road_rect().area();
        let sigma = (n * p * (1.0 - p)).sqrt();
        assert!((pts.len() as f64 - n * p).abs() <= 3.0 * sigma, "{} vs {}", pts.len(), n * p);
        let again = generate_point_cloud(&spec, 5.0, 1, true).unwrap();
        assert_eq!(pts, again);
        assert!(pts.iter().all(|s| s.z_gt == spec.profile.z(s.p.x)));
    }

    #[test]
    fn render_project_round_trip() {
        let spec = SceneSpec::default();
        let cams = spec.cameras();
        let pts = generate_point_cloud(&spec, 2.0, 7, false).unwrap();
        let (mut pass, mut total) = (0, 0);
        for idx in [0usize, 17, 33] {
            let r = render_frame(&spec, &cams[idx]);
            for s in &pts {
                match oracle_check(&spec, &cams[idx], &r, s.p.x, s.p.y, 2) {
                    OracleCheck::Skipped => {}
                    OracleCheck::Pass => {
                        pass += 1;
                        total += 1;
                    }
                    f => panic!("oracle mismatch at {:?}: {f:?}", s.p),
                }
            }
        }
        assert!(total > 100, "only {total} checks");
        assert_eq!(pass, total);
    }

    proptest! {
        #[test]
        fn square_wave_takes_two_values(x in -50.0f64..150.0, amp in 0.01f64..1.0, period in 0.5f64..20.0) {
            let z = wave(amp, period).z(x);
            prop_assert!(z == amp || z == 0.0);
            let k = (x / (0.5 * period)).floor();
            prop_assert_eq!(z == amp, (k as i64).rem_euclid(2) == 0);
        }
    }
}
