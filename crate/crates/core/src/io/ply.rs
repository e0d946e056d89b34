//! Binary little-endian PLY meshes of the reconstructed surface.
//!
//! Header written by [`write_ply`]:
//!
//! ```text
//! ply
//! format binary_little_endian 1.0
//! element vertex N
//! property float x
//! property float y
//! property float z
//! property uchar red
//! property uchar green
//! property uchar blue
//! element face M
//! property list uchar int vertex_indices
//! end_header
//! ```

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{Coord2, SceneBounds};
use crate::network::{FieldModel, HeightField};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlyMesh {
    pub vertices: Vec<[f32; 3]>,
    pub colors: Vec<[u8; 3]>,
    pub faces: Vec<[u32; 3]>,
}

const HEADER_BODY: &str = "property float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\n";

pub fn write_ply(path: &Path, mesh: &PlyMesh) -> Result<()> {
    if mesh.colors.len() != mesh.vertices.len() {
        return Err(Error::Ply("one color per vertex required".into()));
    }
    let mut buf = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n{HEADER_BODY}element face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.faces.len()
    )
    .into_bytes();
    for (v, c) in mesh.vertices.iter().zip(&mesh.colors) {
        for x in v {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        buf.extend_from_slice(c);
    }
    for f in &mesh.faces {
        buf.push(3);
        for i in f {
            buf.extend_from_slice(&(*i as i32).to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads files in the layout produced by [`write_ply`].
pub fn read_ply(path: &Path) -> Result<PlyMesh> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let marker = b"end_header\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| Error::Ply("missing end_header".into()))?
        + marker.len();
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::Ply("header is not text".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") || lines.next() != Some("format binary_little_endian 1.0") {
        return Err(Error::Ply("not a binary little-endian ply".into()));
    }
    let count = |line: Option<&str>, what: &str| -> Result<usize> {
        line.and_then(|l| l.strip_prefix(&format!("element {what} ")))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| Error::Ply(format!("expected element {what}")))
    };
    let nv = count(lines.next(), "vertex")?;
    let props: Vec<&str> = lines.by_ref().take(6).collect();
    if props.join("\n") + "\n" != HEADER_BODY {
        return Err(Error::Ply("unsupported vertex properties".into()));
    }
    let nf = count(lines.next(), "face")?;
    if lines.next() != Some("property list uchar int vertex_indices") {
        return Err(Error::Ply("unsupported face properties".into()));
    }
    let body = &bytes[end..];
    if body.len() != nv * 15 + nf * 13 {
        return Err(Error::Ply(format!("body is {} bytes, header implies {}", body.len(), nv * 15 + nf * 13)));
    }
    let mut mesh = PlyMesh::default();
    for r in body[..nv * 15].chunks_exact(15) {
        let f = |i: usize| f32::from_le_bytes(r[4 * i..4 * i + 4].try_into().unwrap());
        mesh.vertices.push([f(0), f(1), f(2)]);
        mesh.colors.push([r[12], r[13], r[14]]);
    }
    for r in body[nv * 15..].chunks_exact(13) {
        if r[0] != 3 {
            return Err(Error::Ply("only triangles are supported".into()));
        }
        let i = |k: usize| i32::from_le_bytes(r[1 + 4 * k..5 + 4 * k].try_into().unwrap());
        let tri = [i(0), i(1), i(2)];
        if tri.iter().any(|v| *v < 0 || *v as usize >= nv) {
            return Err(Error::Ply("face index out of range".into()));
        }
        mesh.faces.push(tri.map(|v| v as u32));
    }
    Ok(mesh)
}

/// Grid coordinates covering `[min, max]` of the bounds at spacing `step`,
/// x-major: `(points, nx, ny)`.
pub fn surface_grid(bounds: &SceneBounds, step: f64) -> Result<(Vec<Coord2>, usize, usize)> {
    if !(step > 0.0) {
        return Err(Error::Config(format!("grid step {step} must be positive")));
    }
    let nx = ((bounds.max_x - bounds.min_x) / step + 1e-9).floor() as usize + 1;
    let ny = ((bounds.max_y - bounds.min_y) / step + 1e-9).floor() as usize + 1;
    let mut pts = Vec::with_capacity(nx * ny);
    for i in 0..nx {
        for j in 0..ny {
            pts.push(Coord2::new(bounds.min_x + i as f64 * step, bounds.min_y + j as f64 * step));
        }
    }
    Ok((pts, nx, ny))
}

/// Two triangles per grid cell.
pub fn grid_faces(nx: usize, ny: usize) -> Vec<[u32; 3]> {
    let mut f = Vec::with_capacity(2 * nx.saturating_sub(1) * ny.saturating_sub(1));
    for i in 0..nx.saturating_sub(1) {
        for j in 0..ny.saturating_sub(1) {
            let a = (i * ny + j) as u32;
            let b = a + ny as u32;
            f.push([a, b, b + 1]);
            f.push([a, b + 1, a + 1]);
        }
    }
    f
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExportSummary {
    pub color_path: PathBuf,
    pub semantic_path: PathBuf,
    pub vertices: usize,
    pub faces: usize,
}

/// `name.ply` becomes `name_semantic.ply`.
pub fn semantic_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}_semantic.ply"))
}

/// Writes the surface over `bounds` twice: with predicted colors at `path`,
/// and with semantic palette colors next to it.
pub fn export_surface(model: &FieldModel, bounds: &SceneBounds, step: f64, path: &Path) -> Result<ExportSummary> {
    let (pts, nx, ny) = surface_grid(bounds, step)?;
    let z = model.heights(&pts);
    let vertices: Vec<[f32; 3]> = pts
        .iter()
        .zip(&z)
        .map(|(p, z)| [p.x as f32, p.y as f32, *z as f32])
        .collect();
    let faces = grid_faces(nx, ny);
    let colors = model
        .colors(&pts)
        .into_iter()
        .map(|c| c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    let palette = &model.config().classes.palette;
    let sem_colors = model
        .labels(&pts)
        .into_iter()
        .map(|l| palette.get(l as usize).copied().unwrap_or([0, 0, 0]))
        .collect();
    let mut mesh = PlyMesh {
        vertices,
        colors,
        faces,
    };
    write_ply(path, &mesh)?;
    mesh.colors = sem_colors;
    let sp = semantic_path(path);
    write_ply(&sp, &mesh)?;
    Ok(ExportSummary {
        color_path: path.to_path_buf(),
        semantic_path: sp,
        vertices: mesh.vertices.len(),
        faces: mesh.faces.len(),
    })
}
