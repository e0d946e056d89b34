//! In-memory color images and label maps, with PNG/PPM/PGM IO.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Label value for pixels excluded from semantic losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// Linear RGB image with channels in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f32; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, fill: [f32; 3]) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: [f32; 3]) {
        self.data[y * self.width + x] = c;
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .flat_map(|c| c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{width}x{height} rgb image needs {} bytes, got {}",
                width * height * 3,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(3)
            .map(|c| [c[0] as f32 / 255.0, c[1] as f32 / 255.0, c[2] as f32 / 255.0])
            .collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(
            path,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|source| Error::Image {
            path: path.into(),
            source,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.into(),
                source,
            })?
            .to_rgb8();
        Self::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw())
    }

    /// Binary PPM (P6).
    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)
            .and_then(|_| w.write_all(&self.to_rgb8()))
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// Single-channel class-id image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, fill: u8) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
        )
        .map_err(|source| Error::Image {
            path: path.into(),
            source,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.into(),
            source,
        })?;
        if img.color() != image::ColorType::L8 {
            return Err(Error::dataset(
                path,
                format!("label map must be 8-bit single channel, found {:?}", img.color()),
            ));
        }
        let img = img.to_luma8();
        Ok(Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.into_raw(),
        })
    }

    /// Binary PGM (P5) of the raw ids.
    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)
            .and_then(|_| w.write_all(&self.data))
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    /// Renders ids through `palette`; ids outside it become black.
    pub fn colorize(&self, palette: &[[u8; 3]]) -> RgbImage {
        let data = self
            .data
            .iter()
            .map(|&id| {
                let c = palette.get(id as usize).copied().unwrap_or([0, 0, 0]);
                c.map(|v| v as f32 / 255.0)
            })
            .collect();
        RgbImage {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RgbImage::new(4, 3, [0.0, 0.5, 1.0]);
        img.set(1, 2, [1.0, 0.0, 0.2]);
        let p = dir.path().join("c.png");
        img.save_png(&p).unwrap();
        let back = RgbImage::load_png(&p).unwrap();
        assert_eq!(back.to_rgb8(), img.to_rgb8());

        let mut labels = LabelMap::new(4, 3, 0);
        labels.set(3, 1, IGNORE_LABEL);
        labels.set(0, 0, 2);
        let p = dir.path().join("l.png");
        labels.save_png(&p).unwrap();
        assert_eq!(LabelMap::load_png(&p).unwrap(), labels);
    }

    #[test]
    fn rgb_label_png_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        RgbImage::new(2, 2, [0.1; 3]).save_png(&p).unwrap();
        assert!(LabelMap::load_png(&p).is_err());
    }

    #[test]
    fn ppm_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ppm");
        RgbImage::new(2, 1, [1.0, 0.0, 0.0]).save_ppm(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..11], b"P6\n2 1\n255\n");
        assert_eq!(&bytes[11..], &[255, 0, 0, 255, 0, 0]);
    }
}
