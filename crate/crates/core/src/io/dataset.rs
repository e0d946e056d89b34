//! On-disk dataset layout shared by generated scenes and recorded drives.
//!
//! ```text
//! root/
//!   poses.txt        one camera-to-world 3x4 matrix per line, row-major
//!   calib.txt        "P0: fx 0 cx 0 0 fy cy 0 0 0 1 0"
//!   image_2/NNNNNN.png
//!   labels/NNNNNN.png  single-channel class ids (optional per frame)
//!   clouds/<source>.bin  x y z intensity as little-endian f32 records
//!   palette.json     class names and display colors
//!   scene.json       generator parameters (generated scenes only)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{Camera, CameraFrame, Extrinsics, Intrinsics, WorldPoint3};
use crate::network::SemanticClassSet;
use crate::raster::{LabelMap, RgbImage};
use crate::supervision::HeightSource;
use crate::synthetic::SceneSpec;
use crate::util::hex;

/// Rotations further than this from orthonormal are rejected at load time.
pub const LOAD_ORTHONORMAL_TOLERANCE: f64 = 1e-3;
const CLOUD_RECORD: usize = 16;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub frames: Vec<CameraFrame>,
    pub clouds: Vec<(HeightSource, Vec<WorldPoint3>)>,
    pub classes: SemanticClassSet,
    pub scene: Option<SceneSpec>,
}

impl Dataset {
    pub fn cloud(&self, source: HeightSource) -> Option<&[WorldPoint3]> {
        self.clouds
            .iter()
            .find(|(s, _)| *s == source)
            .map(|(_, c)| c.as_slice())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LoadOptions {
    /// Input poses and clouds use the camera-style frame of recorded drives
    /// (x right, y down, z forward); remap them to z-up.
    pub kitti_axes: bool,
}

/// Recorded-drive world axes expressed in the z-up frame.
fn kitti_remap() -> Matrix3<f64> {
    Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0)
}

fn frame_name(i: usize) -> String {
    format!("{i:06}.png")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn pose_line(e: &Extrinsics) -> String {
    let (r, t) = e.camera_to_world();
    let mut v = Vec::with_capacity(12);
    for i in 0..3 {
        for j in 0..3 {
            v.push(r[(i, j)]);
        }
        v.push(t[i]);
    }
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn parse_pose_line(line: &str) -> std::result::Result<(Matrix3<f64>, Vector3<f64>), String> {
    let v: Vec<f64> = line
        .split_whitespace()
        .map(|s| s.parse::<f64>().map_err(|_| format!("not a number: {s}")))
        .collect::<std::result::Result<_, _>>()?;
    if v.len() != 12 {
        return Err(format!("expected 12 values, found {}", v.len()));
    }
    let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
    Ok((r, Vector3::new(v[3], v[7], v[11])))
}

pub fn calib_line(k: &Intrinsics) -> String {
    format!("P0: {} 0 {} 0 0 {} {} 0 0 0 1 0", k.fx, k.cx, k.fy, k.cy)
}

/// `(fx, fy, cx, cy)` from the first projection-matrix line.
pub fn parse_calib(text: &str) -> std::result::Result<(f64, f64, f64, f64), String> {
    let line = text
        .lines()
        .find(|l| l.trim_start().starts_with('P'))
        .ok_or("no projection matrix line")?;
    let body = line.split_once(':').map_or(line, |(_, b)| b);
    let v: Vec<f64> = body
        .split_whitespace()
        .map(|s| s.parse::<f64>().map_err(|_| format!("not a number: {s}")))
        .collect::<std::result::Result<_, _>>()?;
    if v.len() != 12 {
        return Err(format!("projection matrix needs 12 values, found {}", v.len()));
    }
    Ok((v[0], v[5], v[2], v[6]))
}

pub fn write_cloud(path: &Path, points: &[WorldPoint3]) -> Result<()> {
    let mut buf = Vec::with_capacity(points.len() * CLOUD_RECORD);
    for p in points {
        for v in [p.x as f32, p.y as f32, p.z as f32, 1.0f32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_cloud(path: &Path) -> Result<Vec<WorldPoint3>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % CLOUD_RECORD != 0 {
        return Err(Error::dataset(
            path,
            format!("{} bytes is not a whole number of 16-byte records", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(CLOUD_RECORD)
        .map(|r| {
            let f = |i: usize| f32::from_le_bytes(r[4 * i..4 * i + 4].try_into().unwrap()) as f64;
            WorldPoint3::new(f(0), f(1), f(2))
        })
        .collect())
}

pub fn write_dataset(
    root: &Path,
    frames: &[CameraFrame],
    clouds: &[(HeightSource, Vec<WorldPoint3>)],
    classes: &SemanticClassSet,
    scene: Option<&SceneSpec>,
) -> Result<()> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Config("cannot write a dataset without frames".into()))?;
    for dir in ["image_2", "labels", "clouds"] {
        mkdir(&root.join(dir))?;
    }
    let poses: Vec<String> = frames.iter().map(|f| pose_line(&f.camera.extrinsics)).collect();
    write_text(&root.join("poses.txt"), &(poses.join("\n") + "\n"))?;
    write_text(&root.join("calib.txt"), &(calib_line(&first.camera.intrinsics) + "\n"))?;
    frames.par_iter().enumerate().try_for_each(|(i, f)| -> Result<()> {
        f.image.save_png(&root.join("image_2").join(frame_name(i)))?;
        if let Some(l) = &f.labels {
            l.save_png(&root.join("labels").join(frame_name(i)))?;
        }
        Ok(())
    })?;
    for (source, pts) in clouds {
        write_cloud(&root.join("clouds").join(format!("{}.bin", source.name())), pts)?;
    }
    write_text(&root.join("palette.json"), &serde_json::to_string_pretty(classes)?)?;
    if let Some(s) = scene {
        write_text(&root.join("scene.json"), &serde_json::to_string_pretty(s)?)?;
    }
    Ok(())
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    v.sort();
    Ok(v)
}

pub fn load_dataset(root: &Path, opts: LoadOptions) -> Result<Dataset> {
    let poses_path = root.join("poses.txt");
    let text = fs::read_to_string(&poses_path).map_err(|e| Error::io(&poses_path, e))?;
    let remap = kitti_remap();
    let mut poses = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (mut r, mut t) =
            parse_pose_line(line).map_err(|m| Error::dataset(&poses_path, format!("line {}: {m}", n + 1)))?;
        if opts.kitti_axes {
            r = remap * r;
            t = remap * t;
        }
        let e = Extrinsics::from_camera_to_world(r, t);
        e.check_orthonormal(LOAD_ORTHONORMAL_TOLERANCE)
            .map_err(|err| Error::dataset(&poses_path, format!("line {}: {err}", n + 1)))?;
        poses.push(e);
    }
    let calib_path = root.join("calib.txt");
    let calib = fs::read_to_string(&calib_path).map_err(|e| Error::io(&calib_path, e))?;
    let (fx, fy, cx, cy) = parse_calib(&calib).map_err(|m| Error::dataset(&calib_path, m))?;
    let images = sorted_pngs(&root.join("image_2"))?;
    if images.len() != poses.len() {
        return Err(Error::dataset(
            root,
            format!("{} poses but {} images", poses.len(), images.len()),
        ));
    }
    let label_dir = root.join("labels");
    let frames = images
        .par_iter()
        .zip(&poses)
        .enumerate()
        .map(|(i, (img_path, pose))| -> Result<CameraFrame> {
            let image = RgbImage::load_png(img_path)?;
            let label_path = label_dir.join(img_path.file_name().unwrap());
            let labels = if label_path.exists() {
                Some(LabelMap::load_png(&label_path)?)
            } else {
                None
            };
            let intrinsics = Intrinsics {
                fx,
                fy,
                cx,
                cy,
                width: image.width,
                height: image.height,
            };
            let camera = Camera {
                extrinsics: *pose,
                intrinsics,
            };
            let mut e = camera.extrinsics;
            // loader tolerance is looser than the constructor's; re-orthonormalize
            e.rotation = nearest_rotation(&e.rotation);
            let c = pose.center();
            e.translation = -(e.rotation * Vector3::new(c.x, c.y, c.z));
            CameraFrame::new(
                i,
                Camera {
                    extrinsics: e,
                    intrinsics,
                },
                image,
                labels,
            )
            .map_err(|err| Error::dataset(img_path, err.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut clouds = Vec::new();
    let cloud_dir = root.join("clouds");
    if cloud_dir.is_dir() {
        for source in HeightSource::ALL {
            let p = cloud_dir.join(format!("{}.bin", source.name()));
            if p.exists() {
                let mut pts = read_cloud(&p)?;
                if opts.kitti_axes {
                    for w in pts.iter_mut() {
                        let v = remap * Vector3::new(w.x, w.y, w.z);
                        *w = WorldPoint3::new(v.x, v.y, v.z);
                    }
                }
                clouds.push((source, pts));
            }
        }
    }
    let palette = root.join("palette.json");
    let classes = if palette.exists() {
        let t = fs::read_to_string(&palette).map_err(|e| Error::io(&palette, e))?;
        let c: SemanticClassSet =
            serde_json::from_str(&t).map_err(|e| Error::dataset(&palette, e.to_string()))?;
        c.validate().map_err(|e| Error::dataset(&palette, e.to_string()))?;
        c
    } else {
        SemanticClassSet::default()
    };
    let scene_path = root.join("scene.json");
    let scene = if scene_path.exists() {
        let t = fs::read_to_string(&scene_path).map_err(|e| Error::io(&scene_path, e))?;
        Some(serde_json::from_str(&t).map_err(|e| Error::dataset(&scene_path, e.to_string()))?)
    } else {
        None
    };
    Ok(Dataset {
        root: root.to_path_buf(),
        frames,
        clouds,
        classes,
        scene,
    })
}

/// Closest rotation in the Frobenius sense, via SVD.
fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * vt;
    }
    r
}

/// Hex SHA-256 over every file below `root`, by sorted relative path.
pub fn dataset_hash(root: &Path) -> Result<String> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let p = e.map_err(|e| Error::io(dir, e))?.path();
            if p.is_dir() {
                walk(&p, out)?;
            } else {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(root, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(&f);
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(fs::read(&f).map_err(|e| Error::io(&f, e))?);
    }
    Ok(hex(&h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::IGNORE_LABEL;
    use approx::assert_abs_diff_eq;

    fn frames() -> Vec<CameraFrame> {
        let k = Intrinsics::kitti_scaled(24, 8);
        (0..3)
            .map(|i| {
                let e = Extrinsics::looking(WorldPoint3::new(i as f64, 0.5, 1.65), 0.1 * i as f64, 0.2);
                let mut l = LabelMap::new(24, 8, 0);
                l.set(0, 0, IGNORE_LABEL);
                CameraFrame::new(
                    i,
                    Camera {
                        extrinsics: e,
                        intrinsics: k,
                    },
                    RgbImage::new(24, 8, [0.2, 0.4, 0.6]),
                    (i != 1).then_some(l),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn identity_pose_line() {
        let (r, t) = parse_pose_line("1 0 0 0 0 1 0 0 0 0 1 0").unwrap();
        let e = Extrinsics::from_camera_to_world(r, t);
        assert_eq!(e, Extrinsics::identity());
        assert!(parse_pose_line("1 0 0").is_err());
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let fr = frames();
        let cloud = vec![WorldPoint3::new(1.0, 2.0, 0.25), WorldPoint3::new(-3.5, 0.0, 0.0)];
        let classes = SemanticClassSet::default();
        write_dataset(dir.path(), &fr, &[(HeightSource::Lidar, cloud.clone())], &classes, None).unwrap();
        let ds = load_dataset(dir.path(), LoadOptions::default()).unwrap();
        assert_eq!(ds.frames.len(), 3);
        assert!(ds.frames[1].labels.is_none());
        assert_eq!(ds.frames[2].labels, fr[2].labels);
        assert_eq!(ds.cloud(HeightSource::Lidar).unwrap(), &cloud[..]);
        for (a, b) in ds.frames.iter().zip(&fr) {
            assert_abs_diff_eq!(a.camera.extrinsics.rotation, b.camera.extrinsics.rotation, epsilon = 1e-12);
            assert_abs_diff_eq!(a.camera.extrinsics.translation, b.camera.extrinsics.translation, epsilon = 1e-12);
            assert_abs_diff_eq!(a.camera.intrinsics.fx, b.camera.intrinsics.fx, epsilon = 1e-12);
            assert_eq!(a.image.to_rgb8(), b.image.to_rgb8());
        }
        let h = dataset_hash(dir.path()).unwrap();
        assert_eq!(h, dataset_hash(dir.path()).unwrap());
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let fr = frames();
        write_dataset(dir.path(), &fr, &[], &SemanticClassSet::default(), None).unwrap();
        fs::write(dir.path().join("clouds/lidar.bin"), [0u8; 17]).unwrap();
        assert!(matches!(
            load_dataset(dir.path(), LoadOptions::default()),
            Err(Error::Dataset { .. })
        ));
        fs::remove_file(dir.path().join("clouds/lidar.bin")).unwrap();
        fs::remove_file(dir.path().join("image_2/000002.png")).unwrap();
        assert!(load_dataset(dir.path(), LoadOptions::default()).is_err());
        write_dataset(dir.path(), &fr, &[], &SemanticClassSet::default(), None).unwrap();
        fs::write(dir.path().join("poses.txt"), "2 0 0 0 0 1 0 0 0 0 1 0\n").unwrap();
        let err = load_dataset(dir.path(), LoadOptions::default()).unwrap_err();
        assert!(err.to_string().contains("orthonormal"), "{err}");
    }

    #[test]
    fn kitti_axes_put_forward_on_x() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &frames()[..1], &[], &SemanticClassSet::default(), None).unwrap();
        // camera at the origin of a y-down, z-forward world, moved 5 m forward
        fs::write(dir.path().join("poses.txt"), "1 0 0 0 0 1 0 0 0 0 1 5\n").unwrap();
        let ds = load_dataset(dir.path(), LoadOptions { kitti_axes: true }).unwrap();
        let e = &ds.frames[0].camera.extrinsics;
        let c = e.center();
        assert_abs_diff_eq!(c.x, 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(e.yaw(), 0.0, epsilon = 1e-12);
        // optical axis is horizontal along +x
        let fwd = e.rotation.row(2);
        assert_abs_diff_eq!(fwd[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn calib_parsing() {
        let k = Intrinsics::kitti_scaled(1241, 376);
        assert_eq!(parse_calib(&calib_line(&k)).unwrap(), (k.fx, k.fy, k.cx, k.cy));
        let kitti = "P0: 7.188560000000e+02 0.000000000000e+00 6.071928000000e+02 0.000000000000e+00 0.000000000000e+00 7.188560000000e+02 1.852157000000e+02 0.000000000000e+00 0.000000000000e+00 0.000000000000e+00 1.000000000000e+00 0.000000000000e+00";
        assert_eq!(parse_calib(kitti).unwrap(), (718.856, 718.856, 607.1928, 185.2157));
    }
}
