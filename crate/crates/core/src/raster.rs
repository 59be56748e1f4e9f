//! Planar float image buffer with bilinear sampling and reflection padding.

use crate::Error;
use std::path::Path;

/// Channel-major (CHW) float image, values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub w: usize,
    pub h: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

/// Mirror an index into `[0, n)` without repeating the border sample.
pub fn reflect_index(i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

impl Raster {
    pub fn new(w: usize, h: usize, c: usize) -> Self {
        Self {
            w,
            h,
            c,
            data: vec![0.0; w * h * c],
        }
    }

    pub fn filled(w: usize, h: usize, c: usize, value: f32) -> Self {
        Self {
            w,
            h,
            c,
            data: vec![value; w * h * c],
        }
    }

    #[inline]
    pub fn get(&self, ch: usize, x: usize, y: usize) -> f32 {
        self.data[(ch * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, ch: usize, x: usize, y: usize, v: f32) {
        self.data[(ch * self.h + y) * self.w + x] = v;
    }

    #[inline]
    pub fn channel(&self, ch: usize) -> &[f32] {
        &self.data[ch * self.w * self.h..(ch + 1) * self.w * self.h]
    }

    #[inline]
    pub fn channel_mut(&mut self, ch: usize) -> &mut [f32] {
        &mut self.data[ch * self.w * self.h..(ch + 1) * self.w * self.h]
    }

    /// Pixel fetch with reflection padding for out-of-range indices.
    #[inline]
    pub fn get_reflect(&self, ch: usize, x: isize, y: isize) -> f32 {
        self.get(ch, reflect_index(x, self.w), reflect_index(y, self.h))
    }

    /// Bilinear sample at continuous coordinates (pixel centers at `i + 0.5`),
    /// reflection-padded outside the image.
    pub fn sample_bilinear(&self, ch: usize, x: f64, y: f64) -> f32 {
        let gx = x - 0.5;
        let gy = y - 0.5;
        let x0 = gx.floor();
        let y0 = gy.floor();
        let fx = (gx - x0) as f32;
        let fy = (gy - y0) as f32;
        let (x0, y0) = (x0 as isize, y0 as isize);
        let v00 = self.get_reflect(ch, x0, y0);
        let v10 = self.get_reflect(ch, x0 + 1, y0);
        let v01 = self.get_reflect(ch, x0, y0 + 1);
        let v11 = self.get_reflect(ch, x0 + 1, y0 + 1);
        (v00 * (1.0 - fx) + v10 * fx) * (1.0 - fy) + (v01 * (1.0 - fx) + v11 * fx) * fy
    }

    /// Per-channel mean.
    pub fn channel_means(&self) -> Vec<f32> {
        (0..self.c)
            .map(|ch| {
                let s: f32 = self.channel(ch).iter().sum();
                s / (self.w * self.h) as f32
            })
            .collect()
    }

    /// Pad to `(w, h)` with reflection padding on the right/bottom edges.
    pub fn pad_to(&self, w: usize, h: usize) -> Raster {
        assert!(w >= self.w && h >= self.h);
        let mut out = Raster::new(w, h, self.c);
        for ch in 0..self.c {
            for y in 0..h {
                let sy = reflect_index(y as isize, self.h);
                for x in 0..w {
                    let sx = reflect_index(x as isize, self.w);
                    out.set(ch, x, y, self.get(ch, sx, sy));
                }
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<(), Error> {
        assert!(self.c == 1 || self.c == 3, "PNG export expects 1 or 3 channels");
        let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let mut buf = Vec::with_capacity(self.w * self.h * 3);
        for y in 0..self.h {
            for x in 0..self.w {
                if self.c == 1 {
                    let v = to_u8(self.get(0, x, y));
                    buf.extend_from_slice(&[v, v, v]);
                } else {
                    for ch in 0..3 {
                        buf.push(to_u8(self.get(ch, x, y)));
                    }
                }
            }
        }
        let img = image::RgbImage::from_raw(self.w as u32, self.h as u32, buf)
            .expect("buffer size matches dims");
        img.save(path)
            .map_err(|e| Error::Data(format!("saving {}: {e}", path.display())))
    }

    pub fn load_png(path: &Path) -> Result<Raster, Error> {
        let img = image::open(path)
            .map_err(|e| Error::Data(format!("loading {}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Raster::new(w, h, 3);
        for y in 0..h {
            for x in 0..w {
                let p = img.get_pixel(x as u32, y as u32);
                for ch in 0..3 {
                    out.set(ch, x, y, p.0[ch] as f32 / 255.0);
                }
            }
        }
        Ok(out)
    }

    /// Copy out a sub-rectangle.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Raster {
        assert!(x0 + w <= self.w && y0 + h <= self.h);
        let mut out = Raster::new(w, h, self.c);
        for ch in 0..self.c {
            for y in 0..h {
                let src = &self.channel(ch)[(y0 + y) * self.w + x0..][..w];
                out.channel_mut(ch)[y * w..][..w].copy_from_slice(src);
            }
        }
        out
    }

    /// Quantize to 8-bit levels; keeps in-memory datasets identical to their
    /// PNG round-trip.
    pub fn quantized(&self) -> Raster {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
        out
    }
}

/// 8-bit packed image for in-memory datasets (a 2000-image split at f32
/// would not fit comfortably in RAM).
#[derive(Debug, Clone)]
pub struct PackedRaster {
    pub w: usize,
    pub h: usize,
    pub c: usize,
    pub data: Vec<u8>,
}

impl PackedRaster {
    pub fn pack(r: &Raster) -> Self {
        Self {
            w: r.w,
            h: r.h,
            c: r.c,
            data: r
                .data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect(),
        }
    }

    pub fn unpack(&self) -> Raster {
        Raster {
            w: self.w,
            h: self.h,
            c: self.c,
            data: self.data.iter().map(|&v| v as f32 / 255.0).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_roundtrip_is_exact_on_quantized_images() {
        let mut r = Raster::new(5, 4, 3);
        for (i, v) in r.data.iter_mut().enumerate() {
            *v = (i % 256) as f32 / 255.0;
        }
        let q = r.quantized();
        assert_eq!(PackedRaster::pack(&q).unpack(), q);
    }

    #[test]
    fn reflect_is_mirror_without_edge_repeat() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(6, 5), 2);
        assert_eq!(reflect_index(2, 5), 2);
        assert_eq!(reflect_index(-3, 1), 0);
    }

    #[test]
    fn bilinear_at_pixel_centers_is_exact() {
        let mut r = Raster::new(4, 3, 1);
        for y in 0..3 {
            for x in 0..4 {
                r.set(0, x, y, (x + 10 * y) as f32);
            }
        }
        for y in 0..3 {
            for x in 0..4 {
                let v = r.sample_bilinear(0, x as f64 + 0.5, y as f64 + 0.5);
                assert_eq!(v, (x + 10 * y) as f32);
            }
        }
        let v = r.sample_bilinear(0, 1.0, 0.5);
        assert!((v - 0.5).abs() < 1e-6);
    }
}
