//! Minimal CPU neural-network kit: CHW tensors, 2D convolutions, group
//! normalization, nearest upsampling, and a decoupled-weight-decay Adam
//! optimizer over a flat named parameter arena.
//!
//! Everything is hand-rolled and deterministic: forward/backward walk the
//! data in fixed order, so runs with the same seed are bit-identical.

use crate::raster::Raster;
use crate::Error;
use rand::Rng;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

/// Channel-major (CHW) float tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_raster(r: &Raster) -> Self {
        Self {
            c: r.c,
            h: r.h,
            w: r.w,
            data: r.data.clone(),
        }
    }

    #[inline]
    pub fn plane(&self, ch: usize) -> &[f32] {
        &self.data[ch * self.h * self.w..(ch + 1) * self.h * self.w]
    }

    #[inline]
    pub fn plane_mut(&mut self, ch: usize) -> &mut [f32] {
        &mut self.data[ch * self.h * self.w..(ch + 1) * self.h * self.w]
    }

    #[inline]
    pub fn at(&self, ch: usize, y: usize, x: usize) -> f32 {
        self.data[(ch * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, ch: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[(ch * self.h + y) * self.w + x]
    }
}

/// Flat parameter store with named, contiguous entries. Gradients live in a
/// parallel buffer; the optimizer and checkpoints operate on the whole
/// arena.
#[derive(Debug, Clone, Default)]
pub struct ParamArena {
    names: Vec<String>,
    ranges: Vec<Range<usize>>,
    pub data: Vec<f32>,
    pub grad: Vec<f32>,
}

/// Handle to one named parameter array.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamArena {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, name: &str, len: usize, mut init: impl FnMut(usize) -> f32) -> ParamId {
        let start = self.data.len();
        self.data.extend((0..len).map(&mut init));
        self.grad.resize(self.data.len(), 0.0);
        self.names.push(name.to_string());
        self.ranges.push(start..start + len);
        ParamId(self.names.len() - 1)
    }

    #[inline]
    pub fn p(&self, id: ParamId) -> &[f32] {
        &self.data[self.ranges[id.0].clone()]
    }

    #[inline]
    pub fn g_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.grad[self.ranges[id.0].clone()]
    }

    /// Weights and their gradient buffer, borrowed together.
    #[inline]
    pub fn pg_mut(&mut self, id: ParamId) -> (&[f32], &mut [f32]) {
        let r = self.ranges[id.0].clone();
        let (data, grad) = (&self.data, &mut self.grad);
        (&data[r.clone()], &mut grad[r])
    }

    pub fn param_range(&self, id: ParamId) -> Range<usize> {
        self.ranges[id.0].clone()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Add another arena's gradient buffer (same layout) into this one.
    pub fn accumulate_grad(&mut self, other: &ParamArena) {
        debug_assert_eq!(self.grad.len(), other.grad.len());
        for (g, o) in self.grad.iter_mut().zip(&other.grad) {
            *g += o;
        }
    }

    /// Serialize as a flat binary of named arrays.
    ///
    /// Layout (all little-endian): magic `RDCP`, u32 version (1), u32 entry
    /// count; then per entry u32 name length, UTF-8 name bytes, u64 element
    /// count, f32 data.
    pub fn save(&self, path: &Path) -> Result<(), Error> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(b"RDCP")?;
        f.write_all(&1u32.to_le_bytes())?;
        f.write_all(&(self.names.len() as u32).to_le_bytes())?;
        for (name, range) in self.names.iter().zip(&self.ranges) {
            f.write_all(&(name.len() as u32).to_le_bytes())?;
            f.write_all(name.as_bytes())?;
            f.write_all(&(range.len() as u64).to_le_bytes())?;
            for v in &self.data[range.clone()] {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Load a checkpoint saved by [`ParamArena::save`] into an arena with the
    /// same entry layout (names and lengths must match).
    pub fn load_into(&mut self, path: &Path) -> Result<(), Error> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != b"RDCP" {
            return Err(Error::Data(format!(
                "{}: not a checkpoint file",
                path.display()
            )));
        }
        let mut u32buf = [0u8; 4];
        f.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != 1 {
            return Err(Error::Data(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        f.read_exact(&mut u32buf)?;
        let count = u32::from_le_bytes(u32buf) as usize;
        if count != self.names.len() {
            return Err(Error::Data(format!(
                "checkpoint has {count} entries, model expects {}",
                self.names.len()
            )));
        }
        for i in 0..count {
            f.read_exact(&mut u32buf)?;
            let name_len = u32::from_le_bytes(u32buf) as usize;
            let mut name = vec![0u8; name_len];
            f.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Data("checkpoint entry name is not UTF-8".into()))?;
            if name != self.names[i] {
                return Err(Error::Data(format!(
                    "checkpoint entry `{name}` does not match model entry `{}`",
                    self.names[i]
                )));
            }
            let mut u64buf = [0u8; 8];
            f.read_exact(&mut u64buf)?;
            let len = u64::from_le_bytes(u64buf) as usize;
            if len != self.ranges[i].len() {
                return Err(Error::Data(format!(
                    "checkpoint entry `{name}` has {len} values, expected {}",
                    self.ranges[i].len()
                )));
            }
            for j in self.ranges[i].clone() {
                let mut b = [0u8; 4];
                f.read_exact(&mut b)?;
                self.data[j] = f32::from_le_bytes(b);
            }
        }
        Ok(())
    }
}

/// 2D convolution (square kernel, zero padding).
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-normal weight init, zero bias.
    pub fn new<R: Rng>(
        arena: &mut ParamArena,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (in_c * k * k) as f64).sqrt();
        let w = arena.alloc(&format!("{name}.w"), out_c * in_c * k * k, |_| {
            let u1: f64 = rng.random_range(1e-12..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std) as f32
        });
        let b = arena.alloc(&format!("{name}.b"), out_c, |_| 0.0);
        Self {
            w,
            b,
            in_c,
            out_c,
            k,
            stride,
            pad: k / 2,
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Unfold the input into a `(in_c*k*k, ho*wo)` patch matrix.
    fn im2col(&self, x: &Tensor) -> Vec<f32> {
        let (ho, wo) = self.out_dims(x.h, x.w);
        let n = ho * wo;
        let (k, s, p) = (self.k, self.stride, self.pad);
        let mut col = vec![0.0f32; self.in_c * k * k * n];
        for ic in 0..self.in_c {
            let xp = x.plane(ic);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((ic * k + ky) * k + kx) * n..][..n];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let xrow = &xp[iy as usize * x.w..][..x.w];
                        let dst = &mut row[oy * wo..][..wo];
                        if s == 1 {
                            let off = kx as isize - p as isize;
                            let ox0 = (-off).max(0) as usize;
                            let ox1 = wo.min((x.w as isize - off).max(0) as usize);
                            if ox0 < ox1 {
                                dst[ox0..ox1]
                                    .copy_from_slice(&xrow[(ox0 as isize + off) as usize..][..ox1 - ox0]);
                            }
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix >= 0 && ix < x.w as isize {
                                    *d = xrow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        col
    }

    /// Scatter-add a patch-matrix gradient back onto the input grid.
    fn col2im(&self, gcol: &[f32], gx: &mut Tensor) {
        let (ho, wo) = self.out_dims(gx.h, gx.w);
        let n = ho * wo;
        let (k, s, p) = (self.k, self.stride, self.pad);
        for ic in 0..self.in_c {
            let h = gx.h;
            let w = gx.w;
            let gxp = gx.plane_mut(ic);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &gcol[((ic * k + ky) * k + kx) * n..][..n];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let gxrow = &mut gxp[iy as usize * w..][..w];
                        let src = &row[oy * wo..][..wo];
                        if s == 1 {
                            let off = kx as isize - p as isize;
                            let ox0 = (-off).max(0) as usize;
                            let ox1 = wo.min((w as isize - off).max(0) as usize);
                            if ox0 < ox1 {
                                let base = (ox0 as isize + off) as usize;
                                for (g, v) in gxrow[base..][..ox1 - ox0].iter_mut().zip(&src[ox0..ox1])
                                {
                                    *g += v;
                                }
                            }
                        } else {
                            for (ox, v) in src.iter().enumerate() {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix >= 0 && ix < w as isize {
                                    gxrow[ix as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, arena: &ParamArena, x: &Tensor) -> Tensor {
        debug_assert_eq!(x.c, self.in_c);
        let (ho, wo) = self.out_dims(x.h, x.w);
        let n = ho * wo;
        let kd = self.in_c * self.k * self.k;
        let col = self.im2col(x);
        let mut y = Tensor::zeros(self.out_c, ho, wo);
        let weights = arena.p(self.w);
        let bias = arena.p(self.b);
        for oc in 0..self.out_c {
            y.plane_mut(oc).fill(bias[oc]);
        }
        // y (out_c x n) += W (out_c x kd) * col (kd x n)
        unsafe {
            matrixmultiply::sgemm(
                self.out_c,
                kd,
                n,
                1.0,
                weights.as_ptr(),
                kd as isize,
                1,
                col.as_ptr(),
                n as isize,
                1,
                1.0,
                y.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        y
    }

    /// Backward pass: accumulates weight/bias gradients into the arena and
    /// returns the gradient w.r.t. the input.
    pub fn backward(&self, arena: &mut ParamArena, x: &Tensor, gy: &Tensor) -> Tensor {
        let (ho, wo) = self.out_dims(x.h, x.w);
        debug_assert_eq!((gy.c, gy.h, gy.w), (self.out_c, ho, wo));
        let n = ho * wo;
        let kd = self.in_c * self.k * self.k;

        {
            let gb = arena.g_mut(self.b);
            for oc in 0..self.out_c {
                gb[oc] += gy.plane(oc).iter().sum::<f32>();
            }
        }

        let col = self.im2col(x);
        {
            // gw (out_c x kd) += gy (out_c x n) * col^T (n x kd)
            let (_, gw) = arena.pg_mut(self.w);
            unsafe {
                matrixmultiply::sgemm(
                    self.out_c,
                    n,
                    kd,
                    1.0,
                    gy.data.as_ptr(),
                    n as isize,
                    1,
                    col.as_ptr(),
                    1,
                    n as isize,
                    1.0,
                    gw.as_mut_ptr(),
                    kd as isize,
                    1,
                );
            }
        }

        // gcol (kd x n) = W^T (kd x out_c) * gy (out_c x n)
        let weights = arena.p(self.w);
        let mut gcol = vec![0.0f32; kd * n];
        unsafe {
            matrixmultiply::sgemm(
                kd,
                self.out_c,
                n,
                1.0,
                weights.as_ptr(),
                1,
                kd as isize,
                gy.data.as_ptr(),
                n as isize,
                1,
                0.0,
                gcol.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let mut gx = Tensor::zeros(x.c, x.h, x.w);
        self.col2im(&gcol, &mut gx);
        gx
    }
}

/// Group normalization with affine parameters.
#[derive(Debug, Clone, Copy)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub c: usize,
}

/// Per-group statistics cached by the forward pass.
#[derive(Debug, Clone)]
pub struct GnCache {
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
}

const GN_EPS: f32 = 1e-5;

impl GroupNorm {
    pub fn new(arena: &mut ParamArena, name: &str, c: usize, groups: usize) -> Self {
        assert_eq!(c % groups, 0);
        let gamma = arena.alloc(&format!("{name}.gamma"), c, |_| 1.0);
        let beta = arena.alloc(&format!("{name}.beta"), c, |_| 0.0);
        Self {
            gamma,
            beta,
            groups,
            c,
        }
    }

    pub fn forward(&self, arena: &ParamArena, x: &Tensor) -> (Tensor, GnCache) {
        debug_assert_eq!(x.c, self.c);
        let cg = self.c / self.groups;
        let plane = x.h * x.w;
        let gamma = arena.p(self.gamma);
        let beta = arena.p(self.beta);
        let mut y = Tensor::zeros(x.c, x.h, x.w);
        let mut cache = GnCache {
            mean: vec![0.0; self.groups],
            inv_std: vec![0.0; self.groups],
        };
        for g in 0..self.groups {
            let span = &x.data[g * cg * plane..(g + 1) * cg * plane];
            let n = span.len() as f32;
            let mean = span.iter().sum::<f32>() / n;
            let var = span.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
            let inv_std = 1.0 / (var + GN_EPS).sqrt();
            cache.mean[g] = mean;
            cache.inv_std[g] = inv_std;
            for ci in 0..cg {
                let ch = g * cg + ci;
                let (gm, bt) = (gamma[ch], beta[ch]);
                let xs = &x.data[ch * plane..(ch + 1) * plane];
                let ys = &mut y.data[ch * plane..(ch + 1) * plane];
                for (yv, xv) in ys.iter_mut().zip(xs) {
                    *yv = (xv - mean) * inv_std * gm + bt;
                }
            }
        }
        (y, cache)
    }

    pub fn backward(
        &self,
        arena: &mut ParamArena,
        x: &Tensor,
        cache: &GnCache,
        gy: &Tensor,
    ) -> Tensor {
        let cg = self.c / self.groups;
        let plane = x.h * x.w;
        let mut gx = Tensor::zeros(x.c, x.h, x.w);

        {
            let gg = arena.g_mut(self.gamma);
            for (g, (m, istd)) in cache.mean.iter().zip(&cache.inv_std).enumerate() {
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    let xs = &x.data[ch * plane..(ch + 1) * plane];
                    let gys = &gy.data[ch * plane..(ch + 1) * plane];
                    let mut acc = 0.0f32;
                    for (xv, gv) in xs.iter().zip(gys) {
                        acc += gv * (xv - m) * istd;
                    }
                    gg[ch] += acc;
                }
            }
            let gb = arena.g_mut(self.beta);
            for ch in 0..self.c {
                gb[ch] += gy.data[ch * plane..(ch + 1) * plane].iter().sum::<f32>();
            }
        }

        let gamma = arena.p(self.gamma);
        for g in 0..self.groups {
            let (mean, istd) = (cache.mean[g], cache.inv_std[g]);
            let n = (cg * plane) as f32;
            let mut sum_dxh = 0.0f32;
            let mut sum_dxh_xh = 0.0f32;
            for ci in 0..cg {
                let ch = g * cg + ci;
                let gm = gamma[ch];
                let xs = &x.data[ch * plane..(ch + 1) * plane];
                let gys = &gy.data[ch * plane..(ch + 1) * plane];
                for (xv, gv) in xs.iter().zip(gys) {
                    let dxh = gv * gm;
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * (xv - mean) * istd;
                }
            }
            let m_dxh = sum_dxh / n;
            let m_dxh_xh = sum_dxh_xh / n;
            for ci in 0..cg {
                let ch = g * cg + ci;
                let gm = gamma[ch];
                let xs = &x.data[ch * plane..(ch + 1) * plane];
                let gys = &gy.data[ch * plane..(ch + 1) * plane];
                let gxs = &mut gx.data[ch * plane..(ch + 1) * plane];
                for ((xv, gv), gxv) in xs.iter().zip(gys).zip(gxs.iter_mut()) {
                    let xh = (xv - mean) * istd;
                    let dxh = gv * gm;
                    *gxv = istd * (dxh - m_dxh - xh * m_dxh_xh);
                }
            }
        }
        gx
    }
}

/// In-place ReLU.
pub fn relu(x: &mut Tensor) {
    for v in x.data.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Backward through ReLU given the post-activation output.
pub fn relu_backward(y: &Tensor, gy: &mut Tensor) {
    for (g, v) in gy.data.iter_mut().zip(&y.data) {
        if *v <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Nearest-neighbor upsample by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Tensor {
    let mut y = Tensor::zeros(x.c, x.h * factor, x.w * factor);
    for ch in 0..x.c {
        for oy in 0..y.h {
            let sy = oy / factor;
            let xrow = &x.plane(ch)[sy * x.w..][..x.w];
            let yw = y.w;
            let yrow = &mut y.plane_mut(ch)[oy * yw..][..yw];
            for (ox, yv) in yrow.iter_mut().enumerate() {
                *yv = xrow[ox / factor];
            }
        }
    }
    y
}

/// Backward of [`upsample_nearest`]: sum-pool the gradient.
pub fn upsample_nearest_backward(gy: &Tensor, factor: usize) -> Tensor {
    let (h, w) = (gy.h / factor, gy.w / factor);
    let mut gx = Tensor::zeros(gy.c, h, w);
    for ch in 0..gy.c {
        for oy in 0..gy.h {
            let sy = oy / factor;
            let grow = &gy.plane(ch)[oy * gy.w..][..gy.w];
            let gw = gx.w;
            let gxrow = &mut gx.plane_mut(ch)[sy * gw..][..gw];
            for (ox, gv) in grow.iter().enumerate() {
                gxrow[ox / factor] += gv;
            }
        }
    }
    gx
}

/// Adam with decoupled weight decay over a parameter arena.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

impl AdamW {
    pub fn new(param_len: usize, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; param_len],
            v: vec![0.0; param_len],
            t: 0,
        }
    }

    pub fn step(&mut self, arena: &mut ParamArena, lr: f64) {
        self.t += 1;
        let bc1 = (1.0 - self.beta1.powi(self.t as i32)) as f32;
        let bc2 = (1.0 - self.beta2.powi(self.t as i32)) as f32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let lr32 = lr as f32;
        let wd = (self.weight_decay * lr) as f32;
        let eps = self.eps as f32;
        for i in 0..arena.data.len() {
            let g = arena.grad[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            arena.data[i] -= lr32 * mhat / (vhat.sqrt() + eps) + wd * arena.data[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let mut t = Tensor::zeros(c, h, w);
        for v in t.data.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        t
    }

    /// Slow reference convolution for cross-checking the fast path.
    fn conv_ref(conv: &Conv2d, arena: &ParamArena, x: &Tensor) -> Tensor {
        let (ho, wo) = conv.out_dims(x.h, x.w);
        let mut y = Tensor::zeros(conv.out_c, ho, wo);
        let w = arena.p(conv.w);
        let b = arena.p(conv.b);
        for oc in 0..conv.out_c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[oc];
                    for ic in 0..conv.in_c {
                        for ky in 0..conv.k {
                            for kx in 0..conv.k {
                                let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                acc += w[((oc * conv.in_c + ic) * conv.k + ky) * conv.k + kx]
                                    * x.at(ic, iy as usize, ix as usize);
                            }
                        }
                    }
                    *y.at_mut(oc, oy, ox) = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_forward_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, stride, h, w) in &[
            (3usize, 1usize, 7usize, 9usize),
            (3, 2, 8, 8),
            (1, 1, 5, 5),
            (3, 2, 2, 2),
        ] {
            let mut arena = ParamArena::new();
            let conv = Conv2d::new(&mut arena, "c", 3, 4, k, stride, &mut rng);
            let x = rand_tensor(3, h, w, &mut rng);
            let fast = conv.forward(&arena, &x);
            let slow = conv_ref(&conv, &arena, &x);
            assert_eq!((fast.h, fast.w), (slow.h, slow.w));
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b} (k={k} s={stride})");
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut arena = ParamArena::new();
        let conv = Conv2d::new(&mut arena, "c", 2, 3, 3, 2, &mut rng);
        let x = rand_tensor(2, 6, 6, &mut rng);
        let (ho, wo) = conv.out_dims(6, 6);
        let gy = rand_tensor(3, ho, wo, &mut rng);
        let loss = |arena: &ParamArena, x: &Tensor| -> f64 {
            let y = conv.forward(arena, x);
            y.data.iter().zip(&gy.data).map(|(a, b)| (a * b) as f64).sum()
        };

        arena.zero_grad();
        let gx = conv.backward(&mut arena, &x, &gy);

        let mut xp = x.clone();
        for i in [0usize, 7, 20, 35, 71] {
            let eps = 1e-3f32;
            xp.data[i] = x.data[i] + eps;
            let hi = loss(&arena, &xp);
            xp.data[i] = x.data[i] - eps;
            let lo = loss(&arena, &xp);
            xp.data[i] = x.data[i];
            let fd = (hi - lo) / (2.0 * eps as f64);
            assert!(
                (gx.data[i] as f64 - fd).abs() < 2e-2 * fd.abs().max(1.0),
                "gx[{i}] {} vs {fd}",
                gx.data[i]
            );
        }

        let wr = arena.param_range(conv.w);
        for i in [0usize, 5, wr.len() - 1] {
            let eps = 1e-3f32;
            let mut a2 = arena.clone();
            a2.data[wr.start + i] += eps;
            let hi = loss(&a2, &x);
            a2.data[wr.start + i] -= 2.0 * eps;
            let lo = loss(&a2, &x);
            let fd = (hi - lo) / (2.0 * eps as f64);
            let got = arena.grad[wr.start + i] as f64;
            assert!(
                (got - fd).abs() < 2e-2 * fd.abs().max(1.0),
                "gw[{i}] {got} vs {fd}"
            );
        }
    }

    #[test]
    fn groupnorm_normalizes_and_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut arena = ParamArena::new();
        let gn = GroupNorm::new(&mut arena, "gn", 4, 2);
        let x = rand_tensor(4, 5, 5, &mut rng);
        let (y, cache) = gn.forward(&arena, &x);

        for g in 0..2 {
            let span = &y.data[g * 2 * 25..(g + 1) * 2 * 25];
            let mean: f32 = span.iter().sum::<f32>() / span.len() as f32;
            let var: f32 =
                span.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / span.len() as f32;
            assert!(mean.abs() < 1e-4 && (var - 1.0).abs() < 1e-2);
        }

        let gy = rand_tensor(4, 5, 5, &mut rng);
        let loss = |arena: &ParamArena, x: &Tensor| -> f64 {
            let (y, _) = gn.forward(arena, x);
            y.data.iter().zip(&gy.data).map(|(a, b)| (a * b) as f64).sum()
        };
        arena.zero_grad();
        let gx = gn.backward(&mut arena, &x, &cache, &gy);
        let mut xp = x.clone();
        for i in [0usize, 13, 61, 99] {
            let eps = 1e-3f32;
            xp.data[i] = x.data[i] + eps;
            let hi = loss(&arena, &xp);
            xp.data[i] = x.data[i] - eps;
            let lo = loss(&arena, &xp);
            xp.data[i] = x.data[i];
            let fd = (hi - lo) / (2.0 * eps as f64);
            assert!(
                (gx.data[i] as f64 - fd).abs() < 3e-2 * fd.abs().max(0.5),
                "gx[{i}] {} vs {fd}",
                gx.data[i]
            );
        }
    }

    #[test]
    fn upsample_roundtrip_shapes_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(2, 3, 4, &mut rng);
        let y = upsample_nearest(&x, 4);
        assert_eq!((y.h, y.w), (12, 16));
        assert_eq!(y.at(1, 5, 9), x.at(1, 1, 2));

        let gy = Tensor {
            c: 2,
            h: 12,
            w: 16,
            data: vec![1.0; 2 * 12 * 16],
        };
        let gx = upsample_nearest_backward(&gy, 4);
        assert!(gx.data.iter().all(|&v| (v - 16.0).abs() < 1e-6));
    }

    #[test]
    fn adamw_minimizes_quadratic_deterministically() {
        let run = || {
            let mut arena = ParamArena::new();
            let id = arena.alloc("x", 4, |i| (i as f32) - 1.5);
            let mut opt = AdamW::new(arena.len(), 0.0);
            for _ in 0..400 {
                arena.zero_grad();
                let x: Vec<f32> = arena.p(id).to_vec();
                let g = arena.g_mut(id);
                for i in 0..4 {
                    g[i] = 2.0 * (x[i] - 3.0);
                }
                opt.step(&mut arena, 0.05);
            }
            arena.p(id).to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "optimizer must be deterministic");
        for v in a {
            assert!((v - 3.0).abs() < 0.05, "converged to {v}");
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut arena = ParamArena::new();
        let _ = Conv2d::new(&mut arena, "stage1", 3, 8, 3, 2, &mut rng);
        let _ = GroupNorm::new(&mut arena, "gn1", 8, 4);
        let path = std::env::temp_dir().join("rotodet_ckpt_test.bin");
        arena.save(&path).unwrap();

        let mut arena2 = arena.clone();
        for v in arena2.data.iter_mut() {
            *v = 0.0;
        }
        arena2.load_into(&path).unwrap();
        assert_eq!(arena.data, arena2.data);

        let mut other = ParamArena::new();
        let _ = GroupNorm::new(&mut other, "different", 8, 4);
        assert!(other.load_into(&path).is_err());
    }
}
