use std::path::Path;

use crate::error::{Error, Result};

/// Row-major 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        let expected = width * height * 3;
        if data.len() != expected {
            return Err(Error::RasterSize {
                slide_id: String::new(),
                width,
                height,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// An image of one flat colour.
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(width * height * 3)
            .collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    /// Copy out the `w`×`h` window whose top-left corner is `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> RgbImage {
        assert!(
            x + w <= self.width && y + h <= self.height,
            "crop out of bounds"
        );
        let mut data = Vec::with_capacity(w * h * 3);
        for row in y..y + h {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        RgbImage {
            width: w,
            height: h,
            data,
        }
    }

    pub fn mirror_horizontal(&self) -> RgbImage {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(self.width - 1 - x, y, self.pixel(x, y));
            }
        }
        out
    }

    /// Decode a PNG or binary PPM file.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            data: rgb.into_raw(),
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            image::ColorType::Rgb8,
        )
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// A slide (or a sampled region of one) held in memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlideRaster {
    pub slide_id: String,
    pub image: RgbImage,
}

impl SlideRaster {
    pub fn new(
        slide_id: impl Into<String>,
        width: usize,
        height: usize,
        pixels: Vec<u8>,
    ) -> Result<Self> {
        let slide_id = slide_id.into();
        let image = RgbImage::new(width, height, pixels).map_err(|e| match e {
            Error::RasterSize {
                width,
                height,
                expected,
                actual,
                ..
            } => Error::RasterSize {
                slide_id: slide_id.clone(),
                width,
                height,
                expected,
                actual,
            },
            other => other,
        })?;
        Ok(Self { slide_id, image })
    }

    pub fn from_image(slide_id: impl Into<String>, image: RgbImage) -> Self {
        Self {
            slide_id: slide_id.into(),
            image,
        }
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_byte_length() {
        let err = SlideRaster::new("s", 4, 4, vec![0; 47]).unwrap_err();
        assert!(matches!(
            err,
            Error::RasterSize {
                expected: 48,
                actual: 47,
                ..
            }
        ));
    }

    #[test]
    fn crop_copies_window() {
        let mut img = RgbImage::filled(4, 3, [0, 0, 0]);
        img.set_pixel(2, 1, [9, 8, 7]);
        let c = img.crop(1, 1, 2, 2);
        assert_eq!(c.pixel(1, 0), [9, 8, 7]);
        assert_eq!(c.pixel(0, 0), [0, 0, 0]);
    }

    #[test]
    fn png_and_ppm_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RgbImage::filled(3, 2, [10, 20, 30]);
        img.set_pixel(2, 1, [200, 100, 50]);
        let png = dir.path().join("a.png");
        img.save_png(&png).unwrap();
        assert_eq!(RgbImage::load(&png).unwrap(), img);

        let mut ppm = b"P6\n3 2\n255\n".to_vec();
        ppm.extend_from_slice(img.as_bytes());
        let ppm_path = dir.path().join("a.ppm");
        std::fs::write(&ppm_path, ppm).unwrap();
        assert_eq!(RgbImage::load(&ppm_path).unwrap(), img);
    }
}
