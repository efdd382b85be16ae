//! In-memory frame representation and PNG I/O.
//!
//! Frames are height x width x 3 arrays of f64 intensities in [0,1], stored
//! row-major HWC. PNG files are 8-bit RGB with intensities scaled by 255 and
//! rounded half-up.

use std::path::Path;

use crate::error::{Error, Result};

/// Luma weights for the grayscale transform.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut img = Image::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                img.set(y, x, f(y, x));
            }
        }
        img
    }

    pub fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape {
                expected: format!("{}x{}x3 = {} values", height, width, height * width * 3),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i] = rgb[0];
        self.data[i + 1] = rgb[1];
        self.data[i + 2] = rgb[2];
    }

    /// Paint an axis-aligned rectangle. Coordinates outside the image are
    /// clipped away; callers that must stay in bounds validate beforehand.
    pub fn fill_rect(&mut self, top: usize, left: usize, h: usize, w: usize, rgb: [f64; 3]) {
        let y1 = (top + h).min(self.height);
        let x1 = (left + w).min(self.width);
        for y in top.min(self.height)..y1 {
            for x in left.min(self.width)..x1 {
                self.set(y, x, rgb);
            }
        }
    }

    /// Horizontal mirror. A pure column permutation, so applying it twice
    /// reproduces the input bit for bit.
    pub fn flip_horizontal(&self) -> Image {
        let mut out = Image::zeros(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(y, x, self.get(y, self.width - 1 - x));
            }
        }
        out
    }

    /// Grayscale via luma weights (0.299, 0.587, 0.114), replicated to all
    /// three channels. Pixels whose channels are already equal pass through
    /// unchanged, which makes the transform bit-exactly idempotent (the
    /// weighted sum alone rounds off by an ulp for many values).
    pub fn to_gray(&self) -> Image {
        let mut out = Image::zeros(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                let [r, g, b] = self.get(y, x);
                let l = if r == g && g == b {
                    r
                } else {
                    LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b
                };
                out.set(y, x, [l, l, l]);
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let rgb = self.get(y, x);
                let px = [
                    quantize(rgb[0]),
                    quantize(rgb[1]),
                    quantize(rgb[2]),
                ];
                buf.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        buf.save(path).map_err(|e| Error::ImageDecode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let decoded = image::open(path).map_err(|e| Error::ImageDecode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = decoded.to_rgb8();
        let (w, h) = rgb.dimensions();
        let mut img = Image::zeros(h as usize, w as usize);
        for (x, y, px) in rgb.enumerate_pixels() {
            img.set(
                y as usize,
                x as usize,
                [
                    f64::from(px[0]) / 255.0,
                    f64::from(px[1]) / 255.0,
                    f64::from(px[2]) / 255.0,
                ],
            );
        }
        Ok(img)
    }

    /// Save a single-channel map as an 8-bit grayscale PNG.
    pub fn save_gray_png(values: &[f64], height: usize, width: usize, path: &Path) -> Result<()> {
        let mut buf = image::GrayImage::new(width as u32, height as u32);
        for y in 0..height {
            for x in 0..width {
                buf.put_pixel(x as u32, y as u32, image::Luma([quantize(values[y * width + x])]));
            }
        }
        buf.save(path).map_err(|e| Error::ImageDecode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
