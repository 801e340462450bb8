//! RGB8 image buffer with PNG I/O, bilinear resize and a few pixel utilities.
//!
//! The toolkit never embeds pixels in manifests; images live on disk as PNG
//! files referenced by relative path.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuf {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB, 3 bytes per pixel.
    pub data: Vec<u8>,
}

impl ImageBuf {
    pub fn new(width: usize, height: usize) -> Self {
        ImageBuf {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut img = ImageBuf::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let decoder = png::Decoder::new(std::io::BufReader::new(file));
        let mut reader = decoder.read_info().map_err(|e| Error::Png {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::Png {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let width = info.width as usize;
        let height = info.height as usize;
        let mut data = Vec::with_capacity(width * height * 3);
        match info.color_type {
            png::ColorType::Rgb => data.extend_from_slice(&buf[..width * height * 3]),
            png::ColorType::Rgba => {
                for px in buf[..width * height * 4].chunks_exact(4) {
                    data.extend_from_slice(&px[..3]);
                }
            }
            png::ColorType::Grayscale => {
                for &g in &buf[..width * height] {
                    data.extend_from_slice(&[g, g, g]);
                }
            }
            other => {
                return Err(Error::Png {
                    path: path.to_path_buf(),
                    detail: format!("unsupported color type {other:?}"),
                })
            }
        }
        Ok(ImageBuf {
            width,
            height,
            data,
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let w = BufWriter::new(file);
        let mut encoder = png::Encoder::new(w, self.width as u32, self.height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().map_err(|e| Error::Png {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        writer.write_image_data(&self.data).map_err(|e| Error::Png {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        Ok(())
    }

    /// Pixels scaled to [0,1], CHW layout.
    pub fn to_tensor(&self) -> Tensor3 {
        let (h, w) = (self.height, self.width);
        let mut t = Tensor3::zeros(3, h, w);
        for y in 0..h {
            for x in 0..w {
                let px = self.get(x, y);
                for (c, &v) in px.iter().enumerate() {
                    t.set(c, y, x, v as f64 / 255.0);
                }
            }
        }
        t
    }

    pub fn from_tensor(t: &Tensor3) -> Self {
        assert_eq!(t.c, 3, "expected 3-channel tensor");
        let mut img = ImageBuf::new(t.w, t.h);
        for y in 0..t.h {
            for x in 0..t.w {
                let px = [
                    (t.get(0, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
                    (t.get(1, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
                    (t.get(2, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
                ];
                img.set(x, y, px);
            }
        }
        img
    }

    pub fn resize_bilinear(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = ImageBuf::new(width, height);
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for y in 0..height {
            // center-aligned sampling
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, self.height as f64 - 1.0);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, self.width as f64 - 1.0);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                let mut px = [0u8; 3];
                for (c, out_px) in px.iter_mut().enumerate() {
                    let p00 = self.get(x0, y0)[c] as f64;
                    let p01 = self.get(x1, y0)[c] as f64;
                    let p10 = self.get(x0, y1)[c] as f64;
                    let p11 = self.get(x1, y1)[c] as f64;
                    let v = p00 * (1.0 - wx) * (1.0 - wy)
                        + p01 * wx * (1.0 - wy)
                        + p10 * (1.0 - wx) * wy
                        + p11 * wx * wy;
                    *out_px = v.round().clamp(0.0, 255.0) as u8;
                }
                out.set(x, y, px);
            }
        }
        out
    }

    /// Crop a rectangle (clamped to bounds) and bilinearly rescale it to the buffer size.
    pub fn crop_resize(&self, x0: usize, y0: usize, cw: usize, ch: usize, out: usize) -> Self {
        let x0 = x0.min(self.width.saturating_sub(1));
        let y0 = y0.min(self.height.saturating_sub(1));
        let cw = cw.max(1).min(self.width - x0);
        let ch = ch.max(1).min(self.height - y0);
        let mut crop = ImageBuf::new(cw, ch);
        for y in 0..ch {
            for x in 0..cw {
                crop.set(x, y, self.get(x0 + x, y0 + y));
            }
        }
        crop.resize_bilinear(out, out)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = ImageBuf::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }

    /// Bounding box (x0, y0, x1, y1 inclusive) of pixels that differ from `other`.
    pub fn diff_bbox(&self, other: &ImageBuf) -> Option<(usize, usize, usize, usize)> {
        if self.width != other.width || self.height != other.height {
            return None;
        }
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) != other.get(x, y) {
                    any = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        any.then_some((x0, y0, x1, y1))
    }

    /// Count pixels within `tol` per channel of `rgb`.
    pub fn count_near(&self, rgb: [u8; 3], tol: u8) -> usize {
        self.data
            .chunks_exact(3)
            .filter(|px| {
                px[0].abs_diff(rgb[0]) <= tol
                    && px[1].abs_diff(rgb[1]) <= tol
                    && px[2].abs_diff(rgb[2]) <= tol
            })
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_lossless_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = ImageBuf::new(9, 7);
        for y in 0..7 {
            for x in 0..9 {
                img.set(x, y, [(x * 17) as u8, (y * 31) as u8, 200]);
            }
        }
        let p1 = dir.path().join("a.png");
        let p2 = dir.path().join("b.png");
        img.save_png(&p1).unwrap();
        img.save_png(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let back = ImageBuf::load_png(&p1).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn tensor_roundtrip() {
        let mut img = ImageBuf::new(4, 4);
        img.set(2, 1, [255, 0, 128]);
        let t = img.to_tensor();
        assert_eq!(t.get(0, 1, 2), 1.0);
        let back = ImageBuf::from_tensor(&t);
        assert_eq!(back, img);
    }

    #[test]
    fn resize_identity_and_shrink() {
        let img = ImageBuf::filled(8, 8, [10, 20, 30]);
        assert_eq!(img.resize_bilinear(8, 8), img);
        let small = img.resize_bilinear(4, 4);
        assert_eq!(small.get(1, 1), [10, 20, 30]);
    }

    #[test]
    fn diff_bbox_localizes_change() {
        let a = ImageBuf::filled(10, 10, [0, 0, 0]);
        let mut b = a.clone();
        b.set(3, 4, [255, 255, 255]);
        b.set(5, 6, [255, 255, 255]);
        assert_eq!(a.diff_bbox(&b), Some((3, 4, 5, 6)));
        assert_eq!(a.diff_bbox(&a), None);
    }
}
