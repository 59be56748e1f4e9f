//! Synthetic pattern overlay for point-supervised training, and the
//! procedural symmetric-scene dataset used throughout the test suites.
//!
//! The overlay pipeline mirrors the knowledge-combination recipe: sample the
//! face/edge colors around each labeled point, spread them over a per-class
//! gray-scale basic pattern, randomize flip/rotation/size, place the result
//! fully inside the image, suppress overlaps, and alpha-blend with a
//! Gaussian opacity profile. The exact boxes of the blended patterns are
//! returned for box-regression supervision.
//!
//! Scenes are built from three reflection-symmetric shape families (ellipse
//! "disc", rounded rectangle "slab", kite "dart") rendered from signed
//! distance fields, so every object is symmetric about its own angle axis —
//! the substrate the symmetry-recovery check trains on. An asymmetric
//! control family (random polygons) is available for the negative control.

use crate::dataio::{ImageAnnotations, Instance};
use crate::geom::{r2h, rotated_iou, PointLabel, RBox};
use crate::raster::Raster;
use crate::Error;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;

/// Per-category gray-scale exemplar with values strictly inside `(0, 1)`.
#[derive(Debug, Clone)]
pub struct BasicPattern {
    pub category: usize,
    /// Gray-scale canvas; the tight object box is centered in it.
    pub raster: Raster,
    /// Native tight-box size in pixels.
    pub w0: f64,
    pub h0: f64,
}

/// A synthetic instance blended into a training image.
#[derive(Debug, Clone)]
pub struct SynthInstance {
    /// Exact box of the blended pattern (ground truth for regression).
    pub rbox: RBox,
    pub category: usize,
    /// Opacity mask in the pattern frame, values in `[0.1, 1.0]`.
    pub alpha: Raster,
    /// Recolored pattern in the pattern frame (RGB).
    pub pixels: Raster,
}

/// Face color: mean over the 5x5 neighborhood. Edge color: gradient-weighted
/// mean over the 33x33 neighborhood (Sobel magnitude, weights normalized to
/// sum one; borders clipped and renormalized). A flat patch falls back to
/// blending the face color with the image mean.
pub fn extract_colors(image: &Raster, p: &PointLabel) -> ([f32; 3], [f32; 3]) {
    let px = p.x.round() as isize;
    let py = p.y.round() as isize;

    let mut c_face = [0.0f32; 3];
    let mut n = 0.0f32;
    for dy in -2..=2isize {
        for dx in -2..=2isize {
            let (x, y) = (px + dx, py + dy);
            if x < 0 || y < 0 || x >= image.w as isize || y >= image.h as isize {
                continue;
            }
            for ch in 0..3 {
                c_face[ch] += image.get(ch, x as usize, y as usize);
            }
            n += 1.0;
        }
    }
    for c in c_face.iter_mut() {
        *c /= n.max(1.0);
    }

    let gray = |x: isize, y: isize| -> f32 {
        let mut s = 0.0;
        for ch in 0..3 {
            s += image.get_reflect(ch, x, y);
        }
        s / 3.0
    };

    let mut weights = Vec::with_capacity(33 * 33);
    let mut total = 0.0f32;
    for dy in -16..=16isize {
        for dx in -16..=16isize {
            let (x, y) = (px + dx, py + dy);
            if x < 0 || y < 0 || x >= image.w as isize || y >= image.h as isize {
                continue;
            }
            let gx = (gray(x + 1, y - 1) + 2.0 * gray(x + 1, y) + gray(x + 1, y + 1))
                - (gray(x - 1, y - 1) + 2.0 * gray(x - 1, y) + gray(x - 1, y + 1));
            let gy = (gray(x - 1, y + 1) + 2.0 * gray(x, y + 1) + gray(x + 1, y + 1))
                - (gray(x - 1, y - 1) + 2.0 * gray(x, y - 1) + gray(x + 1, y - 1));
            let d = (gx * gx + gy * gy).sqrt();
            weights.push((x as usize, y as usize, d));
            total += d;
        }
    }

    let mut c_edge = [0.0f32; 3];
    if total > 1e-6 {
        for (x, y, d) in weights {
            let w = d / total;
            for ch in 0..3 {
                c_edge[ch] += w * image.get(ch, x, y);
            }
        }
    } else {
        // Flat patch: no gradient signal to weight by.
        let means = image.channel_means();
        for ch in 0..3 {
            c_edge[ch] = 0.5 * c_face[ch] + 0.5 * means[ch];
        }
    }
    (c_face, c_edge)
}

/// Spread the sampled colors over a gray-scale pattern:
/// `P * C_face + (1 - P) * C_edge`, per pixel per channel.
pub fn recolor(pattern: &Raster, c_face: [f32; 3], c_edge: [f32; 3]) -> Raster {
    assert_eq!(pattern.c, 1);
    let mut out = Raster::new(pattern.w, pattern.h, 3);
    for ch in 0..3 {
        for y in 0..pattern.h {
            for x in 0..pattern.w {
                let p = pattern.get(0, x, y);
                out.set(ch, x, y, p * c_face[ch] + (1.0 - p) * c_edge[ch]);
            }
        }
    }
    out
}

/// Log-normal size jitter: `w = w0 exp(sb + sw)`, `h = h0 exp(sb + sw + sr)`
/// where `sb` is shared per image and `sw`, `sr` are drawn per instance,
/// all from `N(0, 0.4)`.
pub fn random_resize<R: Rng>(w0: f64, h0: f64, sigma_base: f64, rng: &mut R) -> (f64, f64) {
    let normal = Normal::new(0.0, 0.4).unwrap();
    let sw: f64 = normal.sample(rng);
    let sr: f64 = normal.sample(rng);
    (w0 * (sigma_base + sw).exp(), h0 * (sigma_base + sw + sr).exp())
}

/// Draw the per-image shared component of [`random_resize`].
pub fn resize_sigma_base<R: Rng>(rng: &mut R) -> f64 {
    Normal::new(0.0, 0.4).unwrap().sample(rng)
}

/// Gaussian opacity profile `0.9 exp(-k0 x^2 - k1 y^2) + 0.1` over pattern
/// coordinates normalized to `[-1, 1]`; exactly 1 at the center, never
/// below 0.1.
pub fn alpha_mask_with(w: usize, h: usize, k0: f64, k1: f64) -> Raster {
    let mut out = Raster::new(w, h, 1);
    let norm = |i: usize, n: usize| -> f64 {
        if n <= 1 {
            0.0
        } else {
            (i as f64 - (n as f64 - 1.0) / 2.0) / ((n as f64 - 1.0) / 2.0)
        }
    };
    for y in 0..h {
        let vy = norm(y, h);
        for x in 0..w {
            let vx = norm(x, w);
            let a = 0.9 * (-k0 * vx * vx - k1 * vy * vy).exp() + 0.1;
            out.set(0, x, y, a as f32);
        }
    }
    out
}

/// [`alpha_mask_with`] with `k0, k1` drawn uniformly from `[0.1, 2]`.
pub fn alpha_mask<R: Rng>(w: usize, h: usize, rng: &mut R) -> Raster {
    let k0 = rng.random_range(0.1..=2.0);
    let k1 = rng.random_range(0.1..=2.0);
    alpha_mask_with(w, h, k0, k1)
}

/// Overlay recolored patterns at random poses around the labeled points.
///
/// Candidates whose rotated IoU with an already-kept pattern reaches 0.05
/// are suppressed, every kept pattern lies fully inside the image, and the
/// composite is `alpha * pattern + (1 - alpha) * background` per pixel.
pub fn overlay_patterns<R: Rng>(
    image: &Raster,
    points: &[PointLabel],
    patterns: &BTreeMap<usize, BasicPattern>,
    rng: &mut R,
) -> Result<(Raster, Vec<SynthInstance>), Error> {
    let mut out = image.clone();
    let mut kept: Vec<SynthInstance> = Vec::new();
    if points.is_empty() {
        return Ok((out, kept));
    }
    let sigma_base = resize_sigma_base(rng);

    for p in points {
        let pattern = patterns
            .get(&p.category)
            .ok_or_else(|| Error::MissingPattern(p.category.to_string()))?;

        let (c_face, c_edge) = extract_colors(image, p);
        let mut pixels = recolor(&pattern.raster, c_face, c_edge);
        if rng.random_range(0.0..1.0) < 0.5 {
            // Vertical flip of the pattern content.
            for ch in 0..3 {
                for y in 0..pixels.h / 2 {
                    for x in 0..pixels.w {
                        let a = pixels.get(ch, x, y);
                        let b = pixels.get(ch, x, pixels.h - 1 - y);
                        pixels.set(ch, x, y, b);
                        pixels.set(ch, x, pixels.h - 1 - y, a);
                    }
                }
            }
        }
        let phi = rng.random_range(0.0..PI);
        let (w, h) = random_resize(pattern.w0, pattern.h0, sigma_base, rng);

        // Canvas extent after resizing (margins scale with the tight box).
        let cw = pattern.raster.w as f64 * w / pattern.w0;
        let ch_ = pattern.raster.h as f64 * h / pattern.h0;
        let canvas = RBox::new(0.0, 0.0, cw, ch_, phi);
        let ext = r2h(&canvas);
        let (ex, ey) = (ext.xmax, ext.ymax);
        if 2.0 * ex >= image.w as f64 || 2.0 * ey >= image.h as f64 {
            continue; // cannot be placed fully inside the border
        }
        let cx = rng.random_range(ex..image.w as f64 - ex);
        let cy = rng.random_range(ey..image.h as f64 - ey);
        let rbox = RBox::new(cx, cy, w, h, phi).normalized();

        if kept.iter().any(|k| rotated_iou(&k.rbox, &rbox) >= 0.05) {
            continue;
        }

        let alpha = alpha_mask(pixels.w, pixels.h, rng);
        blend_pattern(&mut out, &pixels, &alpha, cx, cy, phi, w / pattern.w0, h / pattern.h0);
        kept.push(SynthInstance {
            rbox,
            category: p.category,
            alpha,
            pixels,
        });
    }
    Ok((out, kept))
}

/// Blend a pattern (with its alpha mask) into `out` at center `(cx, cy)`,
/// rotation `phi`, per-axis scale `(sx, sy)` from pattern to image pixels.
fn blend_pattern(
    out: &mut Raster,
    pixels: &Raster,
    alpha: &Raster,
    cx: f64,
    cy: f64,
    phi: f64,
    sx: f64,
    sy: f64,
) {
    let (s, c) = phi.sin_cos();
    let (pw, ph) = (pixels.w as f64, pixels.h as f64);
    // Image-space bounding box of the placed canvas.
    let ext = r2h(&RBox::new(cx, cy, pw * sx, ph * sy, phi));
    let x0 = ext.xmin.floor().max(0.0) as usize;
    let y0 = ext.ymin.floor().max(0.0) as usize;
    let x1 = (ext.xmax.ceil() as usize).min(out.w);
    let y1 = (ext.ymax.ceil() as usize).min(out.h);

    for y in y0..y1 {
        for x in x0..x1 {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            // Rotate back then unscale into pattern coordinates.
            let u = (c * dx + s * dy) / sx + pw / 2.0;
            let v = (-s * dx + c * dy) / sy + ph / 2.0;
            if u < 0.0 || v < 0.0 || u >= pw || v >= ph {
                continue;
            }
            let a = alpha.sample_bilinear(0, u, v);
            for chan in 0..3 {
                let pv = pixels.sample_bilinear(chan, u, v);
                let bg = out.get(chan, x, y);
                out.set(chan, x, y, a * pv + (1.0 - a) * bg);
            }
        }
    }
}

// ------------------------------------------------------------------ scenes

/// Shape families; each is reflection-symmetric about its own angle axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    /// Ellipse.
    Disc,
    /// Rounded rectangle.
    Slab,
    /// Kite (symmetric about its long axis only).
    Dart,
}

impl ShapeFamily {
    pub fn name(&self) -> &'static str {
        match self {
            ShapeFamily::Disc => "disc",
            ShapeFamily::Slab => "slab",
            ShapeFamily::Dart => "dart",
        }
    }
}

/// Configuration for procedural scene generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub image_size: usize,
    pub families: Vec<ShapeFamily>,
    pub count_min: usize,
    pub count_max: usize,
    /// Long-side range in pixels; sizes are log-uniform over it.
    pub long_min: f64,
    pub long_max: f64,
    pub aspect_min: f64,
    pub aspect_max: f64,
    /// Pairwise rotated-IoU packing bound.
    pub iou_max: f64,
    /// Minimum distance from box extents to the image border.
    pub margin: f64,
    /// Gaussian pixel noise added to the whole frame.
    pub noise_std: f64,
    /// When false, shapes are replaced by random asymmetric polygons
    /// (negative control for the symmetry check).
    pub symmetric: bool,
    pub max_retries: usize,
    /// Upper bound of the background gradient amplitude (0 = flat).
    pub gradient_amp_max: f64,
    /// When set, shape centers stay within this distance of the canvas
    /// center (single-object crops for the symmetry check).
    pub max_center_offset: Option<f64>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 128,
            families: vec![ShapeFamily::Disc, ShapeFamily::Slab, ShapeFamily::Dart],
            count_min: 3,
            count_max: 7,
            long_min: 12.0,
            long_max: 96.0,
            aspect_min: 1.4,
            aspect_max: 3.0,
            iou_max: 0.05,
            margin: 2.0,
            noise_std: 0.015,
            symmetric: true,
            max_retries: 200,
            gradient_amp_max: 0.08,
            max_center_offset: None,
        }
    }
}

impl SceneSpec {
    pub fn class_names(&self) -> Vec<String> {
        self.families.iter().map(|f| f.name().to_string()).collect()
    }
}

/// Signed distance in the local box frame `(u, v)` for a family; negative
/// inside. The shape touches the tight box `[-w/2, w/2] x [-h/2, h/2]` and
/// is symmetric about the `u` axis.
fn family_sdf(family: ShapeFamily, u: f64, v: f64, w: f64, h: f64) -> f64 {
    let (a, b) = (w / 2.0, h / 2.0);
    match family {
        ShapeFamily::Disc => {
            let k = (u / a).hypot(v / b);
            (k - 1.0) * b.min(a)
        }
        ShapeFamily::Slab => {
            let r = 0.35 * b;
            let qx = u.abs() - (a - r);
            let qy = v.abs() - (b - r);
            let ox = qx.max(0.0);
            let oy = qy.max(0.0);
            (ox * ox + oy * oy).sqrt() + qx.max(qy).min(0.0) - r
        }
        ShapeFamily::Dart => {
            let verts = [
                [a, 0.0],
                [-a, b],
                [-a + 0.55 * w, 0.0],
                [-a, -b],
            ];
            polygon_sdf(&verts, u, v)
        }
    }
}

/// Exact signed distance to a simple polygon (even-odd inside test).
fn polygon_sdf(verts: &[[f64; 2]], x: f64, y: f64) -> f64 {
    let n = verts.len();
    let mut d = f64::INFINITY;
    let mut inside = false;
    for i in 0..n {
        let p = verts[i];
        let q = verts[(i + 1) % n];
        let (ex, ey) = (q[0] - p[0], q[1] - p[1]);
        let (wx, wy) = (x - p[0], y - p[1]);
        let t = ((wx * ex + wy * ey) / (ex * ex + ey * ey)).clamp(0.0, 1.0);
        let (dx, dy) = (wx - t * ex, wy - t * ey);
        d = d.min((dx * dx + dy * dy).sqrt());
        if (p[1] <= y) != (q[1] <= y) {
            let xi = p[0] + (y - p[1]) / ey * ex;
            if x < xi {
                inside = !inside;
            }
        }
    }
    if inside {
        -d
    } else {
        d
    }
}

struct SceneShape {
    rbox: RBox,
    family_idx: usize,
    color: [f32; 3],
    /// Control-mode polygon in the local frame (empty when symmetric).
    control_verts: Vec<[f64; 2]>,
}

fn shape_sdf(shape: &SceneShape, families: &[ShapeFamily], u: f64, v: f64) -> f64 {
    if shape.control_verts.is_empty() {
        family_sdf(families[shape.family_idx], u, v, shape.rbox.w, shape.rbox.h)
    } else {
        polygon_sdf(&shape.control_verts, u, v)
    }
}

/// Random asymmetric polygon filling the tight box (negative control).
fn control_polygon<R: Rng>(w: f64, h: f64, rng: &mut R) -> Vec<[f64; 2]> {
    let (a, b) = (w / 2.0, h / 2.0);
    // Five vertices at jittered directions and radii, then rescaled to touch
    // the box on all four sides so the labeled box stays tight.
    let mut verts: Vec<[f64; 2]> = (0..5)
        .map(|i| {
            let ang = 2.0 * PI * (i as f64 + rng.random_range(0.05..0.95)) / 5.0;
            let r = rng.random_range(0.35..1.0);
            [r * ang.cos(), r * ang.sin()]
        })
        .collect();
    let xmax = verts.iter().map(|p| p[0].abs()).fold(0.0, f64::max);
    let ymax = verts.iter().map(|p| p[1].abs()).fold(0.0, f64::max);
    for p in verts.iter_mut() {
        p[0] *= a / xmax;
        p[1] *= b / ymax;
    }
    verts
}

/// Render a procedural scene with exact rotated-box ground truth.
///
/// Shapes are packed by rejection sampling so every surviving pair has
/// rotated IoU below `spec.iou_max`; packing failures after
/// `spec.max_retries` rejections yield an error.
pub fn gen_symmetric_scene<R: Rng>(
    spec: &SceneSpec,
    name: &str,
    rng: &mut R,
) -> Result<(Raster, ImageAnnotations), Error> {
    let size = spec.image_size;
    let mut img = Raster::new(size, size, 3);

    // Background: muted base color with a soft linear gradient.
    let base: Vec<f32> = (0..3).map(|_| rng.random_range(0.3..0.6)).collect();
    let gdir = rng.random_range(0.0..2.0 * PI);
    let gamp = if spec.gradient_amp_max > 0.0 {
        rng.random_range(0.25 * spec.gradient_amp_max..spec.gradient_amp_max)
    } else {
        0.0
    };
    let (gs, gc) = gdir.sin_cos();
    for y in 0..size {
        for x in 0..size {
            let t = ((x as f64 * gc + y as f64 * gs) / size as f64 - 0.5) * 2.0;
            for ch in 0..3 {
                img.set(ch, x, y, base[ch] + (gamp * t) as f32);
            }
        }
    }

    let count = rng.random_range(spec.count_min..=spec.count_max);
    let mut shapes: Vec<SceneShape> = Vec::with_capacity(count);
    let mut rejections = 0usize;
    while shapes.len() < count {
        if rejections >= spec.max_retries {
            return Err(Error::PackingInfeasible(spec.max_retries));
        }
        let family_idx = rng.random_range(0..spec.families.len());
        let long = (rng.random_range(spec.long_min.ln()..spec.long_max.ln())).exp();
        let aspect = rng.random_range(spec.aspect_min..spec.aspect_max);
        let (w, h) = (long, long / aspect);
        let theta = rng.random_range(-PI / 2.0..PI / 2.0);
        let ext = r2h(&RBox::new(0.0, 0.0, w, h, theta));
        let (ex, ey) = (ext.xmax + spec.margin, ext.ymax + spec.margin);
        if 2.0 * ex >= size as f64 || 2.0 * ey >= size as f64 {
            rejections += 1;
            continue;
        }
        let (x_lo, x_hi, y_lo, y_hi) = match spec.max_center_offset {
            Some(j) => {
                let c = size as f64 / 2.0;
                (
                    (c - j).max(ex),
                    (c + j).min(size as f64 - ex),
                    (c - j).max(ey),
                    (c + j).min(size as f64 - ey),
                )
            }
            None => (ex, size as f64 - ex, ey, size as f64 - ey),
        };
        if x_lo >= x_hi || y_lo >= y_hi {
            rejections += 1;
            continue;
        }
        let cx = rng.random_range(x_lo..x_hi);
        let cy = rng.random_range(y_lo..y_hi);
        let rbox = RBox::new(cx, cy, w, h, theta).normalized();
        if shapes.iter().any(|s| rotated_iou(&s.rbox, &rbox) >= spec.iou_max) {
            rejections += 1;
            continue;
        }
        // Face color with enough contrast against the background.
        let color = loop {
            let c: [f32; 3] = [
                rng.random_range(0.05..0.95),
                rng.random_range(0.05..0.95),
                rng.random_range(0.05..0.95),
            ];
            let dist: f32 = (0..3).map(|i| (c[i] - base[i]).abs()).sum();
            if dist > 0.5 {
                break c;
            }
        };
        let control_verts = if spec.symmetric {
            Vec::new()
        } else {
            control_polygon(w, h, rng)
        };
        shapes.push(SceneShape {
            rbox,
            family_idx,
            color,
            control_verts,
        });
    }

    for shape in &shapes {
        render_shape(&mut img, shape, &spec.families);
    }

    if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0, spec.noise_std).unwrap();
        for v in img.data.iter_mut() {
            *v = (*v + normal.sample(rng) as f32).clamp(0.0, 1.0);
        }
    }

    let instances = shapes
        .iter()
        .map(|s| Instance::rbox(s.rbox, s.family_idx))
        .collect();
    Ok((
        img.quantized(),
        ImageAnnotations {
            name: name.to_string(),
            width: size,
            height: size,
            instances,
        },
    ))
}

fn render_shape(img: &mut Raster, shape: &SceneShape, families: &[ShapeFamily]) {
    let b = shape.rbox;
    let ext = r2h(&b);
    let x0 = (ext.xmin - 2.0).floor().max(0.0) as usize;
    let y0 = (ext.ymin - 2.0).floor().max(0.0) as usize;
    let x1 = ((ext.xmax + 2.0).ceil() as usize).min(img.w);
    let y1 = ((ext.ymax + 2.0).ceil() as usize).min(img.h);
    let (s, c) = b.theta.sin_cos();
    let rim = (0.18 * b.h).clamp(1.0, 3.0);
    for y in y0..y1 {
        for x in x0..x1 {
            let (dx, dy) = (x as f64 + 0.5 - b.cx, y as f64 + 0.5 - b.cy);
            let u = c * dx + s * dy;
            let v = -s * dx + c * dy;
            let d = shape_sdf(shape, families, u, v);
            let cov = (0.5 - d).clamp(0.0, 1.0) as f32;
            if cov <= 0.0 {
                continue;
            }
            // Darkened rim band near the boundary; a function of the signed
            // distance only, so reflection symmetry is preserved.
            let t = (-d / rim).clamp(0.0, 1.0) as f32;
            let shade = 0.55 + 0.45 * t;
            for ch in 0..3 {
                let bg = img.get(ch, x, y);
                let fg = shape.color[ch] * shade;
                img.set(ch, x, y, bg * (1.0 - cov) + fg * cov);
            }
        }
    }
}

/// Render one canonical exemplar per family and wrap it as the per-category
/// basic pattern (gray-scale, tight box centered in a small canvas).
pub fn make_basic_patterns(spec: &SceneSpec) -> BTreeMap<usize, BasicPattern> {
    let mut out = BTreeMap::new();
    let (w0, h0) = (32.0f64, 16.0f64);
    let (cw, ch) = (36usize, 20usize);
    for (idx, &family) in spec.families.iter().enumerate() {
        let mut raster = Raster::filled(cw, ch, 1, 0.22);
        let rim = (0.18 * h0).clamp(1.0, 3.0);
        for y in 0..ch {
            for x in 0..cw {
                let u = x as f64 + 0.5 - cw as f64 / 2.0;
                let v = y as f64 + 0.5 - ch as f64 / 2.0;
                let d = family_sdf(family, u, v, w0, h0);
                let cov = (0.5 - d).clamp(0.0, 1.0);
                let t = (-d / rim).clamp(0.0, 1.0);
                let val = 0.22 + 0.6 * cov * (0.55 + 0.45 * t);
                raster.set(0, x, y, val as f32);
            }
        }
        out.insert(
            idx,
            BasicPattern {
                category: idx,
                raster,
                w0,
                h0,
            },
        );
    }
    out
}

/// Generate a full split of scenes. Names are `img_00000`, `img_00001`, ...
pub fn gen_scene_split<R: Rng>(
    spec: &SceneSpec,
    count: usize,
    rng: &mut R,
) -> Result<(Vec<Raster>, crate::dataio::AnnotationSet), Error> {
    let mut images = Vec::with_capacity(count);
    let mut anns = Vec::with_capacity(count);
    for i in 0..count {
        let (img, ann) = gen_symmetric_scene(spec, &format!("img_{i:05}"), rng)?;
        images.push(img);
        anns.push(ann);
    }
    Ok((
        images,
        crate::dataio::AnnotationSet {
            classes: spec.class_names(),
            images: anns,
        },
    ))
}

/// Reflection-symmetry score of a rendered box: fraction of in-shape pixels
/// whose mirror across the angle axis matches within `tol`.
pub fn reflection_symmetry_score(img: &Raster, rbox: &RBox, tol: f32) -> f64 {
    let ext = r2h(rbox);
    let x0 = ext.xmin.floor().max(0.0) as usize;
    let y0 = ext.ymin.floor().max(0.0) as usize;
    let x1 = (ext.xmax.ceil() as usize).min(img.w);
    let y1 = (ext.ymax.ceil() as usize).min(img.h);
    let two_t = 2.0 * rbox.theta;
    let (s2, c2) = two_t.sin_cos();
    let mut total = 0usize;
    let mut agree = 0usize;
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if !rbox.contains(px, py) {
                continue;
            }
            let (dx, dy) = (px - rbox.cx, py - rbox.cy);
            let mx = rbox.cx + c2 * dx + s2 * dy;
            let my = rbox.cy + s2 * dx - c2 * dy;
            total += 1;
            let mut ok = true;
            for ch in 0..img.c {
                let v = img.get(ch, x, y);
                let m = img.sample_bilinear(ch, mx, my);
                if (v - m).abs() > tol {
                    ok = false;
                    break;
                }
            }
            agree += ok as usize;
        }
    }
    if total == 0 {
        1.0
    } else {
        agree as f64 / total as f64
    }
}
