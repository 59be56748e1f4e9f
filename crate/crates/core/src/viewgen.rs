//! Transformed training views: vertical flip, rotation about the image
//! center with reflection padding, and isotropic rescaling.
//!
//! A [`ViewTransform`] carries the affine coordinate map applied to both the
//! raster and the annotations, plus a keep-mask for instances whose mapped
//! centers stay in bounds. Training samples a single view per step from a
//! mode-specific distribution (view multiplexing).

use crate::dataio::{ImageAnnotations, Instance, Label};
use crate::geom::{r2h, HBox, RBox};
use crate::raster::Raster;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewKind {
    Flip,
    Rotate,
    Scale,
}

/// Which view-sampling distribution to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewMix {
    /// 95% rotation, 5% flip.
    H2r,
    /// 66.5% rotation, 3.5% flip, 30% scale.
    P2r,
    /// 95% rotation, 5% flip.
    Unified,
}

/// A generated view: kind, parameters, and the source/destination geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewTransform {
    pub kind: ViewKind,
    /// Rotation angle (rotate views only).
    pub rot: f64,
    /// Scale ratio (scale views only).
    pub scale: f64,
    pub src_w: usize,
    pub src_h: usize,
    pub dst_w: usize,
    pub dst_h: usize,
}

impl ViewTransform {
    pub fn flip(src_w: usize, src_h: usize) -> Self {
        Self {
            kind: ViewKind::Flip,
            rot: 0.0,
            scale: 1.0,
            src_w,
            src_h,
            dst_w: src_w,
            dst_h: src_h,
        }
    }

    pub fn rotate(rot: f64, src_w: usize, src_h: usize) -> Self {
        Self {
            kind: ViewKind::Rotate,
            rot,
            scale: 1.0,
            src_w,
            src_h,
            dst_w: src_w,
            dst_h: src_h,
        }
    }

    pub fn scale(scale: f64, src_w: usize, src_h: usize) -> Self {
        Self {
            kind: ViewKind::Scale,
            rot: 0.0,
            scale,
            src_w,
            src_h,
            dst_w: ((src_w as f64 * scale).round() as usize).max(1),
            dst_h: ((src_h as f64 * scale).round() as usize).max(1),
        }
    }

    /// Map a point from source to view coordinates.
    pub fn map_point(&self, x: f64, y: f64) -> (f64, f64) {
        match self.kind {
            ViewKind::Flip => (x, self.src_h as f64 - y),
            ViewKind::Rotate => {
                let (cx, cy) = (self.src_w as f64 / 2.0, self.src_h as f64 / 2.0);
                let (s, c) = self.rot.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                (cx + c * dx - s * dy, cy + s * dx + c * dy)
            }
            ViewKind::Scale => (x * self.scale, y * self.scale),
        }
    }

    /// Map a rotated box through the view (rigid/similarity, exact).
    pub fn map_rbox(&self, b: &RBox) -> RBox {
        let (cx, cy) = self.map_point(b.cx, b.cy);
        match self.kind {
            ViewKind::Flip => RBox::new(cx, cy, b.w, b.h, -b.theta).normalized(),
            ViewKind::Rotate => RBox::new(cx, cy, b.w, b.h, b.theta + self.rot).normalized(),
            ViewKind::Scale => {
                RBox::new(cx, cy, b.w * self.scale, b.h * self.scale, b.theta).normalized()
            }
        }
    }

    /// Map a horizontal box: corners are transformed and re-circumscribed.
    pub fn map_hbox(&self, h: &HBox) -> HBox {
        match self.kind {
            ViewKind::Flip => HBox::new(
                h.xmin,
                self.src_h as f64 - h.ymax,
                h.xmax,
                self.src_h as f64 - h.ymin,
            ),
            ViewKind::Scale => HBox::new(
                h.xmin * self.scale,
                h.ymin * self.scale,
                h.xmax * self.scale,
                h.ymax * self.scale,
            ),
            ViewKind::Rotate => r2h(&self.map_rbox(&h.to_rbox())),
        }
    }

    pub fn map_label(&self, label: &Label) -> Label {
        match label {
            Label::Point { x, y } => {
                let (x, y) = self.map_point(*x, *y);
                Label::Point { x, y }
            }
            Label::Hbox(h) => Label::Hbox(self.map_hbox(h)),
            Label::Rbox(b) => Label::Rbox(self.map_rbox(b)),
        }
    }

    /// Inverse transform (flip is an involution; rotation negates the angle;
    /// scale inverts the ratio).
    pub fn inverse(&self) -> ViewTransform {
        match self.kind {
            ViewKind::Flip => *self,
            ViewKind::Rotate => ViewTransform::rotate(-self.rot, self.src_w, self.src_h),
            ViewKind::Scale => ViewTransform::scale(1.0 / self.scale, self.dst_w, self.dst_h),
        }
    }
}

/// Draw a view with mode-specific kind probabilities; rotation angles are
/// uniform on `[pi/4, 3pi/4]` and scale ratios uniform on `(0.5, 1.5)`.
pub fn sample_view<R: Rng>(mode: ViewMix, w: usize, h: usize, rng: &mut R) -> ViewTransform {
    let u: f64 = rng.random_range(0.0..1.0);
    let kind = match mode {
        ViewMix::Unified | ViewMix::H2r => {
            if u < 0.95 {
                ViewKind::Rotate
            } else {
                ViewKind::Flip
            }
        }
        ViewMix::P2r => {
            if u < 0.665 {
                ViewKind::Rotate
            } else if u < 0.70 {
                ViewKind::Flip
            } else {
                ViewKind::Scale
            }
        }
    };
    match kind {
        ViewKind::Flip => ViewTransform::flip(w, h),
        ViewKind::Rotate => ViewTransform::rotate(rng.random_range(PI / 4.0..=3.0 * PI / 4.0), w, h),
        ViewKind::Scale => ViewTransform::scale(rng.random_range(0.5..1.5), w, h),
    }
}

/// Warp an image and its annotations through a view.
///
/// Rotation keeps the canvas size and fills exposed regions by reflection
/// padding; scaling resamples to `s * size`; flipping mirrors rows exactly.
/// The returned mask marks instances whose mapped centers are in bounds.
pub fn apply_view(
    image: &Raster,
    anns: &ImageAnnotations,
    t: &ViewTransform,
) -> (Raster, ImageAnnotations, Vec<bool>) {
    debug_assert_eq!(image.w, t.src_w);
    debug_assert_eq!(image.h, t.src_h);
    let warped = match t.kind {
        ViewKind::Flip => {
            let mut out = Raster::new(image.w, image.h, image.c);
            for ch in 0..image.c {
                for y in 0..image.h {
                    let src = image.channel(ch)[(image.h - 1 - y) * image.w..][..image.w].to_vec();
                    out.channel_mut(ch)[y * image.w..][..image.w].copy_from_slice(&src);
                }
            }
            out
        }
        ViewKind::Rotate | ViewKind::Scale => {
            let inv = t.inverse();
            let mut out = Raster::new(t.dst_w, t.dst_h, image.c);
            for ch in 0..image.c {
                for y in 0..t.dst_h {
                    for x in 0..t.dst_w {
                        let (sx, sy) = inv.map_point(x as f64 + 0.5, y as f64 + 0.5);
                        out.set(ch, x, y, image.sample_bilinear(ch, sx, sy));
                    }
                }
            }
            out
        }
    };

    let mut keep = Vec::with_capacity(anns.instances.len());
    let instances: Vec<Instance> = anns
        .instances
        .iter()
        .map(|inst| {
            let label = t.map_label(&inst.label);
            let (cx, cy) = label.center();
            keep.push(cx >= 0.0 && cy >= 0.0 && cx < t.dst_w as f64 && cy < t.dst_h as f64);
            Instance {
                label,
                category: inst.category,
                difficulty: inst.difficulty,
                source_height: inst.source_height,
            }
        })
        .collect();

    (
        warped,
        ImageAnnotations {
            name: anns.name.clone(),
            width: t.dst_w,
            height: t.dst_h,
            instances,
        },
        keep,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Instance;
    use crate::geom::{fold_half_open, rotated_iou};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn test_image(w: usize, h: usize) -> Raster {
        let mut r = Raster::new(w, h, 1);
        for y in 0..h {
            for x in 0..w {
                r.set(0, x, y, ((x * 7 + y * 13) % 29) as f32 / 29.0);
            }
        }
        r
    }

    fn anns_with(boxes: &[RBox]) -> ImageAnnotations {
        ImageAnnotations {
            name: "t".into(),
            width: 0,
            height: 0,
            instances: boxes.iter().map(|b| Instance::rbox(*b, 0)).collect(),
        }
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = test_image(32, 24);
        let anns = anns_with(&[RBox::new(10.0, 8.0, 6.0, 3.0, 0.4)]);
        let t = ViewTransform::flip(32, 24);
        let (img1, anns1, _) = apply_view(&img, &anns, &t);
        let (img2, anns2, _) = apply_view(&img1, &anns1, &t);
        assert_eq!(img2, img);
        let Label::Rbox(b0) = anns.instances[0].label else { panic!() };
        let Label::Rbox(b2) = anns2.instances[0].label else { panic!() };
        assert!((b0.cx - b2.cx).abs() < 1e-12 && (b0.cy - b2.cy).abs() < 1e-12);
        assert!(fold_half_open(b0.theta - b2.theta).abs() < 1e-12);
    }

    #[test]
    fn rotate_adds_angle_and_moves_center() {
        let r = 0.9;
        let t = ViewTransform::rotate(r, 100, 100);
        let b = RBox::new(70.0, 40.0, 10.0, 4.0, 0.3);
        let m = t.map_rbox(&b);
        assert!(fold_half_open(m.theta - (0.3 + r)).abs() < 1e-12);
        let (s, c) = r.sin_cos();
        let (dx, dy) = (20.0, -10.0);
        assert!((m.cx - (50.0 + c * dx - s * dy)).abs() < 1e-9);
        assert!((m.cy - (50.0 + s * dx + c * dy)).abs() < 1e-9);
    }

    #[test]
    fn keep_mask_drops_out_of_bounds_centers() {
        let img = test_image(100, 60);
        let anns = anns_with(&[
            RBox::new(95.0, 5.0, 6.0, 3.0, 0.0),
            RBox::new(50.0, 30.0, 6.0, 3.0, 0.0),
        ]);
        let t = ViewTransform::rotate(FRAC_PI_2, 100, 60);
        let (_, _, keep) = apply_view(&img, &anns, &t);
        assert_eq!(keep, vec![false, true]);
    }

    #[test]
    fn kept_boxes_roundtrip_through_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let img = test_image(64, 64);
        for _ in 0..50 {
            let t = sample_view(ViewMix::P2r, 64, 64, &mut rng);
            let b = RBox::new(
                rng.random_range(16.0..48.0),
                rng.random_range(16.0..48.0),
                rng.random_range(4.0..12.0),
                rng.random_range(2.0..8.0),
                rng.random_range(-1.5..1.5),
            );
            let anns = anns_with(&[b]);
            let (img1, anns1, keep) = apply_view(&img, &anns, &t);
            if !keep[0] {
                continue;
            }
            let (_, anns2, _) = apply_view(&img1, &anns1, &t.inverse());
            let Label::Rbox(b2) = anns2.instances[0].label else { panic!() };
            assert!(
                rotated_iou(&b, &b2) >= 1.0 - 1e-6,
                "{:?} -> {:?} via {:?}",
                b,
                b2,
                t.kind
            );
        }
    }

    #[test]
    fn rotate_pixels_match_bilinear_oracle() {
        let img = test_image(32, 32);
        let t = ViewTransform::rotate(1.1, 32, 32);
        let (out, _, _) = apply_view(&img, &anns_with(&[]), &t);
        // Independent reimplementation of the inverse map for spot checks.
        let (s, c) = (-1.1f64).sin_cos();
        for &(x, y) in &[(16usize, 16usize), (10, 20), (3, 3), (28, 5)] {
            let (px, py) = (x as f64 + 0.5 - 16.0, y as f64 + 0.5 - 16.0);
            let sx = 16.0 + c * px - s * py;
            let sy = 16.0 + s * px + c * py;
            let want = img.sample_bilinear(0, sx, sy);
            assert!((out.get(0, x, y) - want).abs() < 1e-6);
        }
    }

    #[test]
    fn scale_sizes_scale_exactly() {
        let t = ViewTransform::scale(1.37, 64, 64);
        let b = RBox::new(20.0, 30.0, 10.0, 5.0, 0.7);
        let m = t.map_rbox(&b);
        assert_eq!(m.w, 10.0 * 1.37);
        assert_eq!(m.h, 5.0 * 1.37);
        assert_eq!(m.theta, 0.7);
        assert_eq!(t.dst_w, (64.0f64 * 1.37).round() as usize);
    }

    #[test]
    fn view_mix_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let n = 100_000;
        let mut flips = 0;
        for _ in 0..n {
            let t = sample_view(ViewMix::Unified, 64, 64, &mut rng);
            match t.kind {
                ViewKind::Flip => flips += 1,
                ViewKind::Rotate => {
                    assert!((PI / 4.0..=3.0 * PI / 4.0).contains(&t.rot));
                }
                ViewKind::Scale => panic!("no scale views in unified mode"),
            }
        }
        let frac = flips as f64 / n as f64;
        assert!((frac - 0.05).abs() < 0.01, "flip fraction {frac}");

        let mut scales = 0;
        for _ in 0..n {
            let t = sample_view(ViewMix::P2r, 64, 64, &mut rng);
            if t.kind == ViewKind::Scale {
                scales += 1;
                assert!((0.5..1.5).contains(&t.scale));
            }
        }
        let frac = scales as f64 / n as f64;
        assert!((frac - 0.30).abs() < 0.01, "scale fraction {frac}");
    }
}
