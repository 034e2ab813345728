//! Single-channel floating point images.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};

use crate::error::{Error, Result};
use crate::geometry::{ImageSpace, Landmark};

/// Row-major grayscale image with intensities nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    space: ImageSpace,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(space: ImageSpace, data: Vec<f32>) -> Result<Self> {
        if data.len() != space.pixels() {
            return Err(Error::contract(format!(
                "raster of {space} needs {} values, got {}",
                space.pixels(),
                data.len()
            )));
        }
        Ok(Self { space, data })
    }

    pub fn filled(space: ImageSpace, value: f32) -> Self {
        Self {
            space,
            data: vec![value; space.pixels()],
        }
    }

    pub fn space(&self) -> ImageSpace {
        self.space
    }

    pub fn width(&self) -> usize {
        self.space.width() as usize
    }

    pub fn height(&self) -> usize {
        self.space.height() as usize
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width() + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        let w = self.width();
        self.data[y * w + x] = v;
    }

    /// Bilinear sample at a continuous coordinate; `fill` outside the grid.
    pub fn sample_bilinear(&self, p: Landmark, fill: f32) -> f32 {
        let (w, h) = (self.width() as f64, self.height() as f64);
        if !(p.x > -1.0 && p.y > -1.0 && p.x < w && p.y < h) {
            return fill;
        }
        let x0 = p.x.floor();
        let y0 = p.y.floor();
        let fx = (p.x - x0) as f32;
        let fy = (p.y - y0) as f32;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let at = |x: i64, y: i64| -> f32 {
            if x < 0 || y < 0 || x >= self.width() as i64 || y >= self.height() as i64 {
                fill
            } else {
                self.data[y as usize * self.width() + x as usize]
            }
        };
        let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
        let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Triangle-filtered resize to `to`.
    pub fn resize(&self, to: ImageSpace) -> Raster {
        if to == self.space {
            return self.clone();
        }
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_raw(self.space.width(), self.space.height(), self.data.clone())
                .expect("raster length matches its space");
        let out = imageops::resize(&buf, to.width(), to.height(), FilterType::Triangle);
        Raster {
            space: to,
            data: out.into_raw(),
        }
    }

    /// Loads any supported image file as luminance in `[0, 1]`.
    pub fn load(path: &Path) -> Result<Raster> {
        let img = image::open(path)?;
        let gray = img.to_luma32f();
        let space = ImageSpace::new(gray.width(), gray.height())?;
        Ok(Raster {
            space,
            data: gray.into_raw(),
        })
    }

    /// Writes an 8-bit grayscale image; format follows the extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_raw(self.space.width(), self.space.height(), bytes)
                .expect("raster length matches its space");
        buf.save(path)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_interpolates_between_pixels() {
        let s = ImageSpace::new(2, 2).unwrap();
        let r = Raster::new(s, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.sample_bilinear(Landmark::new(0.5, 0.5), 0.0), 1.5);
        assert_eq!(r.sample_bilinear(Landmark::new(1.0, 1.0), 0.0), 3.0);
        assert_eq!(r.sample_bilinear(Landmark::new(-2.0, 0.0), 9.0), 9.0);
    }

    #[test]
    fn wrong_length_is_rejected() {
        let s = ImageSpace::new(3, 2).unwrap();
        assert!(Raster::new(s, vec![0.0; 5]).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = ImageSpace::new(5, 3).unwrap();
        let data: Vec<f32> = (0..15).map(|i| i as f32 / 14.0).collect();
        let r = Raster::new(s, data).unwrap();
        let path = dir.path().join("a.png");
        r.save(&path).unwrap();
        let back = Raster::load(&path).unwrap();
        assert_eq!(back.space(), s);
        for (a, b) in r.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1.0 / 255.0);
        }
    }

    #[test]
    fn resize_preserves_constant_images() {
        let r = Raster::filled(ImageSpace::new(40, 30).unwrap(), 0.25);
        let out = r.resize(ImageSpace::new(16, 8).unwrap());
        assert_eq!(out.space(), ImageSpace::new(16, 8).unwrap());
        assert!(out.data().iter().all(|v| (v - 0.25).abs() < 1e-6));
    }
}
