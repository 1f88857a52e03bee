//! Minimal raster image support: PNG/PPM decode, grayscale conversion,
//! bilinear resampling and the mirror/rotate transforms used by data
//! augmentation.

use std::path::Path;

use crate::error::{Error, Result};

/// Grayscale or RGB image with pixel values in `[0, 1]`.
///
/// Data is stored row-major, `channels` values per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        assert!(width >= 1 && height >= 1, "empty image");
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        Image {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut img = Image::new(width, height, 1);
        for y in 0..height {
            for x in 0..width {
                img.data[y * width + x] = f(x, y);
            }
        }
        img
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Convert to single-channel using the Rec.601 luma weights.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let mut out = Image::new(self.width, self.height, 1);
        for y in 0..self.height {
            for x in 0..self.width {
                let v = 0.299 * self.get(x, y, 0) + 0.587 * self.get(x, y, 1)
                    + 0.114 * self.get(x, y, 2);
                out.set(x, y, 0, v);
            }
        }
        out
    }

    /// Bilinear sample with clamp-to-edge semantics, pixel centers at
    /// integer coordinates.
    pub fn sample_bilinear(&self, x: f64, y: f64, c: usize) -> f64 {
        let xc = x.clamp(0.0, (self.width - 1) as f64);
        let yc = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = xc - x0 as f64;
        let fy = yc - y0 as f64;
        let v00 = self.get(x0, y0, c);
        let v10 = self.get(x1, y0, c);
        let v01 = self.get(x0, y1, c);
        let v11 = self.get(x1, y1, c);
        (v00 * (1.0 - fx) + v10 * fx) * (1.0 - fy) + (v01 * (1.0 - fx) + v11 * fx) * fy
    }

    /// Bilinear resample to `new_width` x `new_height`.
    pub fn resize(&self, new_width: usize, new_height: usize) -> Image {
        assert!(new_width >= 1 && new_height >= 1);
        let mut out = Image::new(new_width, new_height, self.channels);
        let sx = self.width as f64 / new_width as f64;
        let sy = self.height as f64 / new_height as f64;
        for y in 0..new_height {
            for x in 0..new_width {
                // Map output pixel centers into source coordinates.
                let src_x = (x as f64 + 0.5) * sx - 0.5;
                let src_y = (y as f64 + 0.5) * sy - 0.5;
                for c in 0..self.channels {
                    out.set(x, y, c, self.sample_bilinear(src_x, src_y, c));
                }
            }
        }
        out
    }

    /// Resample by a scale factor (0 < s), rounding dimensions.
    pub fn rescale(&self, s: f64) -> Image {
        assert!(s > 0.0);
        let w = ((self.width as f64 * s).round() as usize).max(1);
        let h = ((self.height as f64 * s).round() as usize).max(1);
        self.resize(w, h)
    }

    /// Horizontal mirror: pixel x maps to width-1-x.
    pub fn mirror_horizontal(&self) -> Image {
        let mut out = Image::new(self.width, self.height, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(x, y, c, self.get(self.width - 1 - x, y, c));
                }
            }
        }
        out
    }

    /// Rotate about the image center by `degrees` (counter-clockwise in
    /// standard axes, i.e. y down makes positive angles clockwise on
    /// screen). Bilinear sampling, clamp-to-edge fill.
    pub fn rotate_about_center(&self, degrees: f64) -> Image {
        let theta = degrees.to_radians();
        let (sin_t, cos_t) = theta.sin_cos();
        let cx = (self.width as f64 - 1.0) / 2.0;
        let cy = (self.height as f64 - 1.0) / 2.0;
        let mut out = Image::new(self.width, self.height, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                // Inverse rotation of the output coordinate.
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let src_x = cx + cos_t * dx + sin_t * dy;
                let src_y = cy - sin_t * dx + cos_t * dy;
                for c in 0..self.channels {
                    out.set(x, y, c, self.sample_bilinear(src_x, src_y, c));
                }
            }
        }
        out
    }

    /// Exact 90-degree counter-clockwise rotation (pixel permutation, no
    /// resampling). The output is height x width.
    pub fn rotate90_ccw(&self) -> Image {
        let mut out = Image::new(self.height, self.width, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                // (x, y) -> (y, W-1-x) in the rotated frame.
                for c in 0..self.channels {
                    out.set(y, self.width - 1 - x, c, self.get(x, y, c));
                }
            }
        }
        out
    }
}

/// Decode a PNG or PPM/PGM file and normalize samples to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Image> {
    let dynimg = image::open(path).map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = dynimg.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut out = Image::new(w, h, 3);
    for y in 0..h {
        for x in 0..w {
            let p = rgb.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out.set(x, y, c, p[c] as f64 / 255.0);
            }
        }
    }
    Ok(out)
}

/// Write a grayscale or RGB image as PNG, quantizing to 8 bits.
pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let mut buf = image::RgbImage::new(img.width as u32, img.height as u32);
    for y in 0..img.height {
        for x in 0..img.width {
            let px = if img.channels == 1 {
                let v = (img.get(x, y, 0).clamp(0.0, 1.0) * 255.0).round() as u8;
                [v, v, v]
            } else {
                [
                    (img.get(x, y, 0).clamp(0.0, 1.0) * 255.0).round() as u8,
                    (img.get(x, y, 1).clamp(0.0, 1.0) * 255.0).round() as u8,
                    (img.get(x, y, 2).clamp(0.0, 1.0) * 255.0).round() as u8,
                ]
            };
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::Other, e.to_string()),
    })
}
