//! Float RGB images and the few resampling primitives the pipeline needs.

use std::path::Path;

use crate::error::{Error, Result};

/// `height × width × 3` image, row-major HWC, channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut img = Image::new(height, width);
        for y in 0..height {
            for x in 0..width {
                img.set(y, x, f(y, x));
            }
        }
        img
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, px: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&px);
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// integer + 0.5), clamped at the border.
    pub fn sample(&self, fy: f32, fx: f32) -> [f32; 3] {
        let sy = (fy - 0.5).clamp(0.0, (self.height - 1) as f32);
        let sx = (fx - 0.5).clamp(0.0, (self.width - 1) as f32);
        let y0 = sy.floor() as usize;
        let x0 = sx.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let wy = sy - y0 as f32;
        let wx = sx - x0 as f32;
        let a = self.get(y0, x0);
        let b = self.get(y0, x1);
        let c = self.get(y1, x0);
        let d = self.get(y1, x1);
        let mut out = [0.0; 3];
        for k in 0..3 {
            let top = a[k] * (1.0 - wx) + b[k] * wx;
            let bot = c[k] * (1.0 - wx) + d[k] * wx;
            out[k] = top * (1.0 - wy) + bot * wy;
        }
        out
    }

    /// Resamples the box `[top, top+h) × [left, left+w)` (continuous pixel
    /// units) to `out × out` with bilinear interpolation.
    pub fn crop_resize(&self, top: f32, left: f32, h: f32, w: f32, out_h: usize, out_w: usize) -> Image {
        let sy = h / out_h as f32;
        let sx = w / out_w as f32;
        Image::from_fn(out_h, out_w, |y, x| {
            self.sample(top + (y as f32 + 0.5) * sy, left + (x as f32 + 0.5) * sx)
        })
    }

    pub fn resize(&self, out_h: usize, out_w: usize) -> Image {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        self.crop_resize(0.0, 0.0, self.height as f32, self.width as f32, out_h, out_w)
    }

    pub fn flip_horizontal(&self) -> Image {
        Image::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }

    /// Rounds every channel to the nearest multiple of 1/255 so the image
    /// survives an 8-bit lossless round trip bit-exactly.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    pub fn is_valid(&self) -> bool {
        self.data.len() == self.height * self.width * 3 && self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::Shape("image buffer size".into()))?;
        buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        Ok(Image {
            height: rgb.height() as usize,
            width: rgb.width() as usize,
            data: rgb.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
        })
    }
}

/// Binary mask, row-major, values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    /// Nearest-neighbour resize.
    pub fn resize(&self, out_h: usize, out_w: usize) -> Mask {
        let mut m = Mask::new(out_h, out_w);
        for y in 0..out_h {
            let sy = ((y as f32 + 0.5) * self.height as f32 / out_h as f32) as usize;
            for x in 0..out_w {
                let sx = ((x as f32 + 0.5) * self.width as f32 / out_w as f32) as usize;
                m.data[y * out_w + x] = self.data[sy.min(self.height - 1) * self.width + sx.min(self.width - 1)];
            }
        }
        m
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::Shape("mask buffer size".into()))?;
        buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load_png(path: &Path) -> Result<Mask> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let g = img.to_luma8();
        let data: Vec<u8> = g.as_raw().iter().map(|&b| u8::from(b >= 128)).collect();
        if g.as_raw().iter().any(|&b| b != 0 && b != 255) {
            return Err(Error::Data(format!("mask {} is not binary", path.display())));
        }
        Ok(Mask {
            height: g.height() as usize,
            width: g.width() as usize,
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_resize_is_exact() {
        let img = Image::from_fn(5, 7, |y, x| [y as f32 / 5.0, x as f32 / 7.0, 0.5]);
        assert_eq!(img.resize(5, 7), img);
        assert_eq!(img.crop_resize(0.0, 0.0, 5.0, 7.0, 5, 7), img);
    }

    #[test]
    fn png_round_trip_is_bit_exact_after_quantize() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::from_fn(4, 4, |y, x| [0.1 * y as f32, 0.33 * x as f32 / 3.0, 0.77]);
        img.quantize();
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        assert_eq!(Image::load_png(&p).unwrap(), img);
    }
}
