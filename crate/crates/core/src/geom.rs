//! Oriented-box geometry: conversions, rotated IoU via convex clipping,
//! circumscribed projection, minimum-area rectangles, and rotated NMS.
//!
//! All functions are pure. The clipping/IoU core is generic over [`Scalar`],
//! so the same code path produces plain values (`f64`) and exact analytic
//! gradients w.r.t. the five box parameters (`Jet<5>`).

use crate::jet::{Jet, Scalar};
use crate::Error;

/// Rotated box `(cx, cy, w, h, theta)`, angle in radians.
///
/// The canonical form follows the long-edge convention: `w >= h` and
/// `theta` in `[-pi/2, pi/2)`. Construction does not normalize; call
/// [`RBox::normalized`] when the canonical form is required (I/O paths do).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

/// Axis-aligned box `(xmin, ymin, xmax, ymax)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

/// Single-point label: a location plus its category id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointLabel {
    pub x: f64,
    pub y: f64,
    pub category: usize,
}

/// Fold an angle into `[-pi/2, pi/2)`.
pub fn fold_half_open(theta: f64) -> f64 {
    use std::f64::consts::PI;
    let t = theta - PI * ((theta + PI / 2.0) / PI).floor();
    // Guard the half-open upper boundary against floating-point round-up.
    if t >= PI / 2.0 {
        t - PI
    } else {
        t
    }
}

impl RBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Self {
        Self { cx, cy, w, h, theta }
    }

    /// Long-edge canonical form: `w >= h`, `theta` in `[-pi/2, pi/2)`.
    /// Idempotent.
    pub fn normalized(self) -> Self {
        let (w, h, theta) = if self.w < self.h {
            (self.h, self.w, self.theta + std::f64::consts::FRAC_PI_2)
        } else {
            (self.w, self.h, self.theta)
        };
        Self {
            cx: self.cx,
            cy: self.cy,
            w,
            h,
            theta: fold_half_open(theta),
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Corner points in counter-clockwise order; centroid equals `(cx, cy)`.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        corners_s(&params::<f64>(self))
    }

    /// Whether `(x, y)` lies inside the box (boundary inclusive).
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= self.w / 2.0 && v.abs() <= self.h / 2.0
    }
}

impl HBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Self {
        Self { xmin, ymin, xmax, ymax }
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.xmin + self.xmax) / 2.0, (self.ymin + self.ymax) / 2.0)
    }

    /// Equivalent axis-aligned rotated box (`theta = 0`).
    pub fn to_rbox(&self) -> RBox {
        let (cx, cy) = self.center();
        RBox::new(cx, cy, self.width(), self.height(), 0.0)
    }
}

fn params<S: Scalar>(b: &RBox) -> [S; 5] {
    [
        S::from_f64(b.cx),
        S::from_f64(b.cy),
        S::from_f64(b.w),
        S::from_f64(b.h),
        S::from_f64(b.theta),
    ]
}

fn seed5(b: &RBox) -> [Jet<5>; 5] {
    [
        Jet::variable(b.cx, 0),
        Jet::variable(b.cy, 1),
        Jet::variable(b.w, 2),
        Jet::variable(b.h, 3),
        Jet::variable(b.theta, 4),
    ]
}

fn corners_s<S: Scalar>(p: &[S; 5]) -> [[S; 2]; 4] {
    let [cx, cy, w, h, theta] = *p;
    let half = S::from_f64(0.5);
    let (hw, hh) = (w * half, h * half);
    let (s, c) = (theta.sin(), theta.cos());
    // Local corners (+,+), (-,+), (-,-), (+,-): counter-clockwise.
    let local = [[hw, hh], [-hw, hh], [-hw, -hh], [hw, -hh]];
    local.map(|[x, y]| [cx + c * x - s * y, cy + s * x + c * y])
}

/// Decompose a box into its four corner points (counter-clockwise).
pub fn rbox_to_corners(b: &RBox) -> [[f64; 2]; 4] {
    b.corners()
}

/// Smallest axis-aligned box containing all four corners.
pub fn r2h(b: &RBox) -> HBox {
    let cs = b.corners();
    let mut h = HBox::new(cs[0][0], cs[0][1], cs[0][0], cs[0][1]);
    for c in &cs[1..] {
        h.xmin = h.xmin.min(c[0]);
        h.ymin = h.ymin.min(c[1]);
        h.xmax = h.xmax.max(c[0]);
        h.ymax = h.ymax.max(c[1]);
    }
    h
}

/// Fixed-capacity polygon buffer (rect-rect clipping yields at most 8 vertices).
#[derive(Clone, Copy)]
struct Poly<S: Scalar> {
    pts: [[S; 2]; 16],
    len: usize,
}

impl<S: Scalar> Poly<S> {
    fn from_quad(q: [[S; 2]; 4]) -> Self {
        let zero = S::from_f64(0.0);
        let mut pts = [[zero, zero]; 16];
        pts[..4].copy_from_slice(&q);
        Self { pts, len: 4 }
    }

    fn push(&mut self, p: [S; 2]) {
        self.pts[self.len] = p;
        self.len += 1;
    }
}

fn cross<S: Scalar>(ax: S, ay: S, bx: S, by: S) -> S {
    ax * by - ay * bx
}

/// Sutherland-Hodgman: clip `subject` by the convex counter-clockwise `clip` quad.
fn clip_poly<S: Scalar>(subject: Poly<S>, clip: &[[S; 2]; 4]) -> Poly<S> {
    let zero = S::from_f64(0.0);
    let mut input = subject;
    for e in 0..4 {
        let a = clip[e];
        let b = clip[(e + 1) % 4];
        let ex = b[0] - a[0];
        let ey = b[1] - a[1];
        let mut output = Poly {
            pts: [[zero, zero]; 16],
            len: 0,
        };
        if input.len == 0 {
            return output;
        }
        for i in 0..input.len {
            let p = input.pts[i];
            let q = input.pts[(i + 1) % input.len];
            let side_p = cross(ex, ey, p[0] - a[0], p[1] - a[1]).value() >= 0.0;
            let side_q = cross(ex, ey, q[0] - a[0], q[1] - a[1]).value() >= 0.0;
            if side_p {
                output.push(p);
            }
            if side_p != side_q {
                // Edge p->q crosses the clip line a->b.
                let dpx = q[0] - p[0];
                let dpy = q[1] - p[1];
                let denom = cross(ex, ey, dpx, dpy);
                let t = cross(ex, ey, a[0] - p[0], a[1] - p[1]) / denom;
                output.push([p[0] + t * dpx, p[1] + t * dpy]);
            }
        }
        input = output;
    }
    input
}

/// Signed shoelace area (positive for counter-clockwise polygons).
fn shoelace<S: Scalar>(poly: &Poly<S>) -> S {
    let mut acc = S::from_f64(0.0);
    if poly.len < 3 {
        return acc;
    }
    for i in 0..poly.len {
        let p = poly.pts[i];
        let q = poly.pts[(i + 1) % poly.len];
        acc = acc + cross(p[0], p[1], q[0], q[1]);
    }
    acc * S::from_f64(0.5)
}

const DEGENERATE_AREA: f64 = 1e-12;

fn intersection_area_s<S: Scalar>(a: &[S; 5], b: &[S; 5]) -> S {
    let ca = corners_s(a);
    let cb = corners_s(b);
    shoelace(&clip_poly(Poly::from_quad(ca), &cb))
}

fn rotated_iou_s<S: Scalar>(a: &[S; 5], b: &[S; 5]) -> S {
    let area_a = a[2] * a[3];
    let area_b = b[2] * b[3];
    if area_a.value() < DEGENERATE_AREA || area_b.value() < DEGENERATE_AREA {
        return S::from_f64(0.0);
    }
    let inter = intersection_area_s(a, b).max(S::from_f64(0.0));
    let union = area_a + area_b - inter;
    inter / union
}

/// Intersection-over-union of two rotated boxes, in `[0, 1]`.
///
/// Computed by convex polygon clipping plus the shoelace formula; symmetric
/// in its arguments. Near-zero-area boxes contribute zero overlap.
pub fn rotated_iou(a: &RBox, b: &RBox) -> f64 {
    rotated_iou_s(&params::<f64>(a), &params::<f64>(b))
        .clamp(0.0, 1.0)
}

/// `rotated_iou` plus its gradient w.r.t. the five parameters of `a`.
pub fn rotated_iou_grad(a: &RBox, b: &RBox) -> (f64, [f64; 5]) {
    let j = rotated_iou_s(&seed5(a), &params::<Jet<5>>(b));
    (j.v, j.d)
}

/// Ratio clamp applied before logarithms so losses stay finite.
pub const IOU_CLAMP_MIN: f64 = 1e-7;

fn ln_iou_loss<S: Scalar>(iou: S) -> S {
    -iou.clamp_val(IOU_CLAMP_MIN, 1.0).ln()
}

/// `-ln IoU` box loss for rotated-box targets.
pub fn riou_loss(pred: &RBox, gt: &RBox) -> f64 {
    ln_iou_loss(rotated_iou_s(&params::<f64>(pred), &params::<f64>(gt)))
}

/// [`riou_loss`] plus its gradient w.r.t. the five parameters of `pred`.
pub fn riou_loss_grad(pred: &RBox, gt: &RBox) -> (f64, [f64; 5]) {
    let j = ln_iou_loss(rotated_iou_s(&seed5(pred), &params::<Jet<5>>(gt)));
    (j.v, j.d)
}

/// Extent of `pred`'s corners expressed in the frame rotated by `gt.theta`:
/// `(umin, vmin, umax, vmax)`.
fn frame_extent<S: Scalar>(pred: &[S; 5], theta_g: S) -> [S; 4] {
    let (s, c) = (theta_g.sin(), theta_g.cos());
    let cs = corners_s(pred);
    let mut ext: Option<[S; 4]> = None;
    for p in cs {
        let u = c * p[0] + s * p[1];
        let v = -s * p[0] + c * p[1];
        ext = Some(match ext {
            None => [u, v, u, v],
            Some([umin, vmin, umax, vmax]) => {
                [umin.min(u), vmin.min(v), umax.max(u), vmax.max(v)]
            }
        });
    }
    ext.unwrap()
}

/// Smallest rectangle with `gt`'s orientation containing all corners of `pred`.
pub fn project_to_orientation(pred: &RBox, gt: &RBox) -> RBox {
    if (fold_half_open(pred.theta - gt.theta)).abs() < 1e-15 {
        // Already aligned (mod pi): the projection is the box itself.
        return RBox::new(pred.cx, pred.cy, pred.w, pred.h, gt.theta);
    }
    let [umin, vmin, umax, vmax] = frame_extent(&params::<f64>(pred), gt.theta);
    let (s, c) = gt.theta.sin_cos();
    let (uc, vc) = ((umin + umax) / 2.0, (vmin + vmax) / 2.0);
    RBox::new(
        c * uc - s * vc,
        s * uc + c * vc,
        umax - umin,
        vmax - vmin,
        gt.theta,
    )
}

fn circum_iou_s<S: Scalar>(pred: &[S; 5], gt: &RBox) -> S {
    // Both the projection and gt share gt.theta, so the IoU reduces to the
    // axis-aligned overlap in gt's rotated frame.
    let tg = S::from_f64(gt.theta);
    let [pumin, pvmin, pumax, pvmax] = frame_extent(pred, tg);
    let (s, c) = gt.theta.sin_cos();
    let gu = S::from_f64(c * gt.cx + s * gt.cy);
    let gv = S::from_f64(-s * gt.cx + c * gt.cy);
    let hw = S::from_f64(gt.w / 2.0);
    let hh = S::from_f64(gt.h / 2.0);
    let zero = S::from_f64(0.0);

    let iw = (pumax.min(gu + hw) - pumin.max(gu - hw)).max(zero);
    let ih = (pvmax.min(gv + hh) - pvmin.max(gv - hh)).max(zero);
    let inter = iw * ih;
    let area_p = (pumax - pumin) * (pvmax - pvmin);
    let union = area_p + S::from_f64(gt.area()) - inter;
    inter / union
}

/// Circumscribed-IoU box loss: `-ln IoU(project_to_orientation(pred, gt), gt)`.
///
/// Zero exactly when the projection equals `gt`; clamped below so the value
/// stays finite for disjoint boxes.
pub fn circum_iou_loss(pred: &RBox, gt: &RBox) -> f64 {
    ln_iou_loss(circum_iou_s(&params::<f64>(pred), gt))
}

/// [`circum_iou_loss`] plus its gradient w.r.t. the five parameters of `pred`.
pub fn circum_iou_loss_grad(pred: &RBox, gt: &RBox) -> (f64, [f64; 5]) {
    let j = ln_iou_loss(circum_iou_s(&seed5(pred), gt));
    (j.v, j.d)
}

pub(crate) fn hbox_giou_s<S: Scalar>(
    a: [S; 4], // xmin, ymin, xmax, ymax
    b: [S; 4],
) -> S {
    let zero = S::from_f64(0.0);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(zero);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(zero);
    let inter = iw * ih;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    let union = area_a + area_b - inter;
    let iou = inter / union;
    // Enclosing box C.
    let cw = a[2].max(b[2]) - a[0].min(b[0]);
    let ch = a[3].max(b[3]) - a[1].min(b[1]);
    let c_area = cw * ch;
    iou - (c_area - union) / c_area
}

/// Generalized IoU of two axis-aligned boxes, in `(-1, 1]`.
pub fn hbox_giou(a: &HBox, b: &HBox) -> f64 {
    hbox_giou_s(
        [a.xmin, a.ymin, a.xmax, a.ymax],
        [b.xmin, b.ymin, b.xmax, b.ymax],
    )
}

/// Andrew's monotone-chain convex hull; returns counter-clockwise vertices.
fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup_by(|a, b| a[0] == b[0] && a[1] == b[1]);
    if pts.len() < 3 {
        return pts;
    }
    let turn = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(pts.len() * 2);
    for &p in &pts {
        while hull.len() >= 2 && turn(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len && turn(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0
        {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Minimum-area enclosing rectangle of a point set (rotating-calipers sweep
/// over convex-hull edge directions). Errors on collinear/degenerate input.
pub fn min_area_rbox(points: &[[f64; 2]]) -> Result<RBox, Error> {
    let hull = convex_hull(points);
    if hull.len() < 3 {
        return Err(Error::DegeneratePolygon);
    }
    let mut best: Option<(f64, RBox)> = None;
    for i in 0..hull.len() {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        let phi = (b[1] - a[1]).atan2(b[0] - a[0]);
        let (s, c) = phi.sin_cos();
        let (mut umin, mut vmin) = (f64::INFINITY, f64::INFINITY);
        let (mut umax, mut vmax) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &hull {
            let u = c * p[0] + s * p[1];
            let v = -s * p[0] + c * p[1];
            umin = umin.min(u);
            vmin = vmin.min(v);
            umax = umax.max(u);
            vmax = vmax.max(v);
        }
        let (w, h) = (umax - umin, vmax - vmin);
        let area = w * h;
        if best.map_or(true, |(ba, _)| area < ba) {
            let (uc, vc) = ((umin + umax) / 2.0, (vmin + vmax) / 2.0);
            let rb = RBox::new(c * uc - s * vc, s * uc + c * vc, w, h, phi).normalized();
            best = Some((area, rb));
        }
    }
    let (area, rb) = best.unwrap();
    if area < DEGENERATE_AREA {
        return Err(Error::DegeneratePolygon);
    }
    Ok(rb)
}

/// Greedy descending-score suppression; surviving pairs have
/// `rotated_iou < iou_thresh`. Returns indices of kept boxes.
pub fn rbox_nms(boxes: &[(RBox, f64)], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| boxes[j].1.total_cmp(&boxes[i].1).then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept
            .iter()
            .all(|&k| rotated_iou(&boxes[i].0, &boxes[k].0) < iou_thresh)
        {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jet::{finite_diff, grad_rel_err};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn sorted_corner_set(mut cs: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
        cs.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
        cs
    }

    fn random_box(rng: &mut ChaCha8Rng) -> RBox {
        RBox::new(
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(1.0..6.0),
            rng.random_range(0.5..4.0),
            rng.random_range(-FRAC_PI_2..FRAC_PI_2),
        )
    }

    #[test]
    fn corners_axis_aligned_unit_square() {
        let cs = rbox_to_corners(&RBox::new(0.0, 0.0, 2.0, 2.0, 0.0));
        let expect = vec![[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]];
        let got = sorted_corner_set(cs.to_vec());
        for (g, e) in got.iter().zip(&expect) {
            assert!(approx(g[0], e[0], 1e-12) && approx(g[1], e[1], 1e-12));
        }
    }

    #[test]
    fn corners_square_quarter_turn_same_set() {
        let a = sorted_corner_set(rbox_to_corners(&RBox::new(0.0, 0.0, 2.0, 2.0, 0.0)).to_vec());
        let b =
            sorted_corner_set(rbox_to_corners(&RBox::new(0.0, 0.0, 2.0, 2.0, FRAC_PI_2)).to_vec());
        for (p, q) in a.iter().zip(&b) {
            assert!(approx(p[0], q[0], 1e-12) && approx(p[1], q[1], 1e-12));
        }
    }

    #[test]
    fn corners_match_rotation_matrix_oracle() {
        // (1,1,4,2,pi/6): rotate local (+-2, +-1) then shift by (1,1).
        let b = RBox::new(1.0, 1.0, 4.0, 2.0, PI / 6.0);
        let (s, c) = (PI / 6.0).sin_cos();
        let oracle: Vec<[f64; 2]> = [[2.0, 1.0], [-2.0, 1.0], [-2.0, -1.0], [2.0, -1.0]]
            .iter()
            .map(|[x, y]| [1.0 + c * x - s * y, 1.0 + s * x + c * y])
            .collect();
        let got = sorted_corner_set(b.corners().to_vec());
        let want = sorted_corner_set(oracle);
        for (g, e) in got.iter().zip(&want) {
            assert!(approx(g[0], e[0], 1e-12) && approx(g[1], e[1], 1e-12));
        }
    }

    #[test]
    fn corners_ccw_and_centroid() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let b = random_box(&mut rng);
            let cs = b.corners();
            let mut area2 = 0.0;
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..4 {
                let p = cs[i];
                let q = cs[(i + 1) % 4];
                area2 += p[0] * q[1] - q[0] * p[1];
                mx += p[0];
                my += p[1];
            }
            assert!(area2 > 0.0, "corners must be counter-clockwise");
            assert!(approx(mx / 4.0, b.cx, 1e-9) && approx(my / 4.0, b.cy, 1e-9));
        }
    }

    #[test]
    fn r2h_cases() {
        let h = r2h(&RBox::new(0.0, 0.0, 2.0, 2.0, 0.0));
        assert_eq!(h, HBox::new(-1.0, -1.0, 1.0, 1.0));

        let h = r2h(&RBox::new(0.0, 0.0, 2.0, 2.0, FRAC_PI_4));
        let r = 2f64.sqrt();
        for (got, want) in [(h.xmin, -r), (h.ymin, -r), (h.xmax, r), (h.ymax, r)] {
            assert!(approx(got, want, 1e-12));
        }

        // Corner-max oracle.
        let b = RBox::new(3.0, 4.0, 6.0, 2.0, PI / 6.0);
        let cs = b.corners();
        let h = r2h(&b);
        let xmin = cs.iter().map(|c| c[0]).fold(f64::INFINITY, f64::min);
        let xmax = cs.iter().map(|c| c[0]).fold(f64::NEG_INFINITY, f64::max);
        assert!(approx(h.xmin, xmin, 1e-12) && approx(h.xmax, xmax, 1e-12));
    }

    #[test]
    fn iou_identical_and_disjoint() {
        let a = RBox::new(0.0, 0.0, 3.0, 1.5, 0.4);
        assert!(approx(rotated_iou(&a, &a), 1.0, 1e-12));
        let b = RBox::new(100.0, 0.0, 2.0, 2.0, 0.3);
        assert_eq!(rotated_iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_octagon_case_exact() {
        // Two unit squares, same center, relative rotation pi/4: the
        // intersection is a regular octagon and the IoU equals 1/sqrt(2).
        let a = RBox::new(0.0, 0.0, 1.0, 1.0, 0.0);
        let b = RBox::new(0.0, 0.0, 1.0, 1.0, FRAC_PI_4);
        assert!(approx(rotated_iou(&a, &b), 1.0 / 2f64.sqrt(), 1e-12));
    }

    #[test]
    fn iou_symmetric_and_rigid_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let a = random_box(&mut rng);
            let b = random_box(&mut rng);
            let ij = rotated_iou(&a, &b);
            assert!(approx(ij, rotated_iou(&b, &a), 1e-12));

            // Joint rigid transform: rotate both about the origin, translate.
            let r = rng.random_range(-PI..PI);
            let (dx, dy) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let mv = |q: &RBox| {
                let (s, c) = r.sin_cos();
                RBox::new(
                    c * q.cx - s * q.cy + dx,
                    s * q.cx + c * q.cy + dy,
                    q.w,
                    q.h,
                    q.theta + r,
                )
            };
            assert!(approx(ij, rotated_iou(&mv(&a), &mv(&b)), 1e-9));
        }
    }

    #[test]
    fn iou_agrees_with_membership_sampling() {
        // Quick sampling sanity; the full 10^6-sample oracle lives in the
        // acceptance suite.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..30 {
            let a = RBox::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(1.0..4.0),
                rng.random_range(1.0..3.0),
                rng.random_range(-FRAC_PI_2..FRAC_PI_2),
            );
            let b = RBox::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(1.0..4.0),
                rng.random_range(1.0..3.0),
                rng.random_range(-FRAC_PI_2..FRAC_PI_2),
            );
            let ha = r2h(&a);
            let hb = r2h(&b);
            let (x0, x1) = (ha.xmin.min(hb.xmin), ha.xmax.max(hb.xmax));
            let (y0, y1) = (ha.ymin.min(hb.ymin), ha.ymax.max(hb.ymax));
            let n = 100_000;
            let (mut both, mut either) = (0u32, 0u32);
            for _ in 0..n {
                let x = rng.random_range(x0..x1);
                let y = rng.random_range(y0..y1);
                let ia = a.contains(x, y);
                let ib = b.contains(x, y);
                both += (ia && ib) as u32;
                either += (ia || ib) as u32;
            }
            let mc = if either == 0 {
                0.0
            } else {
                both as f64 / either as f64
            };
            assert!(
                approx(rotated_iou(&a, &b), mc, 1.5e-2),
                "iou {} vs mc {}",
                rotated_iou(&a, &b),
                mc
            );
        }
    }

    #[test]
    fn projection_aligned_is_identity() {
        let p = RBox::new(1.0, -2.0, 3.0, 1.0, 0.7);
        let g = RBox::new(5.0, 5.0, 2.0, 2.0, 0.7);
        assert_eq!(project_to_orientation(&p, &g), p);
    }

    #[test]
    fn projection_square_diagonal() {
        let p = RBox::new(0.0, 0.0, 2.0, 2.0, FRAC_PI_4);
        let g = RBox::new(0.0, 0.0, 1.0, 1.0, 0.0);
        let proj = project_to_orientation(&p, &g);
        let r = 2.0 * 2f64.sqrt();
        assert!(approx(proj.cx, 0.0, 1e-12) && approx(proj.cy, 0.0, 1e-12));
        assert!(approx(proj.w, r, 1e-12) && approx(proj.h, r, 1e-12));
        assert_eq!(proj.theta, 0.0);
    }

    #[test]
    fn projection_contains_pred_and_is_minimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let p = random_box(&mut rng);
            let g = random_box(&mut rng);
            let proj = project_to_orientation(&p, &g);
            assert!(approx(proj.theta, g.theta, 0.0));
            // Containment with a hair of slack.
            let grown = RBox::new(proj.cx, proj.cy, proj.w + 1e-9, proj.h + 1e-9, proj.theta);
            for c in p.corners() {
                assert!(grown.contains(c[0], c[1]));
            }
            // Minimality along gt axes: some pred corner touches each side.
            let (s, c) = g.theta.sin_cos();
            let us: Vec<f64> = p.corners().iter().map(|p| c * p[0] + s * p[1]).collect();
            let vs: Vec<f64> = p.corners().iter().map(|p| -s * p[0] + c * p[1]).collect();
            let w = us.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
                - us.iter().fold(f64::INFINITY, |a, &b| a.min(b));
            let h = vs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
                - vs.iter().fold(f64::INFINITY, |a, &b| a.min(b));
            assert!(approx(proj.w, w, 1e-9) && approx(proj.h, h, 1e-9));
        }
    }

    #[test]
    fn circum_loss_cases() {
        let g = RBox::new(2.0, 3.0, 4.0, 2.0, 0.5);
        assert!(approx(circum_iou_loss(&g, &g), 0.0, 1e-12));

        // Half width, co-oriented, nested.
        let p = RBox::new(2.0, 3.0, 2.0, 2.0, 0.5);
        assert!(approx(circum_iou_loss(&p, &g), -(0.5f64.ln()), 1e-12));

        // Square rotated pi/4 inside a square gt: oracle from composing the
        // projection with the axis-aligned IoU.
        let p = RBox::new(0.0, 0.0, 2.0, 2.0, FRAC_PI_4);
        let g = RBox::new(0.0, 0.0, 2.0 * 2f64.sqrt(), 2.0 * 2f64.sqrt(), 0.0);
        let proj = project_to_orientation(&p, &g);
        let iou = rotated_iou(&proj, &g);
        assert!(approx(circum_iou_loss(&p, &g), -iou.ln(), 1e-12));
    }

    #[test]
    fn circum_loss_zero_iff_projection_equals_gt() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..100 {
            let p = random_box(&mut rng);
            let g = random_box(&mut rng);
            let loss = circum_iou_loss(&p, &g);
            let proj = project_to_orientation(&p, &g);
            let same = approx(proj.cx, g.cx, 1e-9)
                && approx(proj.cy, g.cy, 1e-9)
                && approx(proj.w, g.w, 1e-9)
                && approx(proj.h, g.h, 1e-9);
            assert_eq!(loss.abs() < 1e-9, same);
        }
    }

    #[test]
    fn giou_cases() {
        let a = HBox::new(0.0, 0.0, 2.0, 2.0);
        assert!(approx(hbox_giou(&a, &a), 1.0, 1e-12));

        let far = HBox::new(1000.0, 0.0, 1002.0, 2.0);
        assert!(hbox_giou(&a, &far) < -0.98);

        // IoU 1/3, enclosing area 6, union 6 -> GIoU = 1/3.
        let b = HBox::new(1.0, 0.0, 3.0, 2.0);
        assert!(approx(hbox_giou(&a, &b), 1.0 / 3.0, 1e-12));
    }

    #[test]
    fn min_area_roundtrip_and_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let b = random_box(&mut rng).normalized();
            let rec = min_area_rbox(&b.corners()).unwrap();
            assert!(approx(rec.cx, b.cx, 1e-6) && approx(rec.cy, b.cy, 1e-6));
            // theta mod pi/2 equivalence with possible w/h swap.
            let dt = fold_half_open(rec.theta - b.theta);
            if dt.abs() < 1e-6 {
                assert!(approx(rec.w, b.w, 1e-6) && approx(rec.h, b.h, 1e-6));
            } else {
                assert!(approx(dt.abs(), FRAC_PI_2, 1e-6));
                assert!(approx(rec.w, b.h, 1e-6) && approx(rec.h, b.w, 1e-6));
            }
        }

        let cloud = [[0.0, 0.0], [4.0, 0.0], [4.0, 2.0], [0.0, 2.0]];
        let rb = min_area_rbox(&cloud).unwrap();
        assert!(approx(rb.cx, 2.0, 1e-9) && approx(rb.cy, 1.0, 1e-9));
        assert!(approx(rb.w, 4.0, 1e-9) && approx(rb.h, 2.0, 1e-9));
        assert!(approx(rb.theta, 0.0, 1e-9));

        assert!(matches!(
            min_area_rbox(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]),
            Err(Error::DegeneratePolygon)
        ));
    }

    #[test]
    fn min_area_beats_orientation_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..20 {
            let pts: Vec<[f64; 2]> = (0..12)
                .map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)])
                .collect();
            let best = min_area_rbox(&pts).unwrap();
            for k in 0..180 {
                let phi = k as f64 * PI / 180.0;
                let (s, c) = phi.sin_cos();
                let us: Vec<f64> = pts.iter().map(|p| c * p[0] + s * p[1]).collect();
                let vs: Vec<f64> = pts.iter().map(|p| -s * p[0] + c * p[1]).collect();
                let w = us.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
                    - us.iter().fold(f64::INFINITY, |a, &b| a.min(b));
                let h = vs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
                    - vs.iter().fold(f64::INFINITY, |a, &b| a.min(b));
                assert!(best.area() <= w * h + 1e-9);
            }
        }
    }

    #[test]
    fn nms_cases() {
        let b = RBox::new(0.0, 0.0, 2.0, 1.0, 0.2);
        assert_eq!(rbox_nms(&[(b, 0.5)], 0.05), vec![0]);

        let kept = rbox_nms(&[(b, 0.9), (b, 0.8)], 0.05);
        assert_eq!(kept, vec![0]);

        // Chain of overlapping boxes: verify the greedy postconditions.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let boxes: Vec<(RBox, f64)> = (0..40)
            .map(|i| {
                (
                    RBox::new(
                        i as f64 * 0.6 + rng.random_range(-0.2..0.2),
                        rng.random_range(-0.3..0.3),
                        2.0,
                        1.2,
                        rng.random_range(-0.4..0.4),
                    ),
                    rng.random_range(0.1..1.0),
                )
            })
            .collect();
        let thresh = 0.2;
        let kept = rbox_nms(&boxes, thresh);
        for (i, &a) in kept.iter().enumerate() {
            for &b in &kept[i + 1..] {
                assert!(rotated_iou(&boxes[a].0, &boxes[b].0) < thresh);
            }
        }
        for i in 0..boxes.len() {
            if kept.contains(&i) {
                continue;
            }
            // Every suppressed box overlaps a kept box of higher score.
            assert!(kept.iter().any(|&k| {
                boxes[k].1 >= boxes[i].1 && rotated_iou(&boxes[i].0, &boxes[k].0) >= thresh
            }));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let mut checked = 0;
        while checked < 100 {
            let p = random_box(&mut rng);
            let g = random_box(&mut rng);
            if rotated_iou(&p, &g) < 0.05 || rotated_iou(&p, &g) > 0.98 {
                continue; // keep away from clamp/degenerate regions
            }
            checked += 1;
            let eval_r = |v: &[f64]| riou_loss(&RBox::new(v[0], v[1], v[2], v[3], v[4]), &g);
            let eval_c = |v: &[f64]| circum_iou_loss(&RBox::new(v[0], v[1], v[2], v[3], v[4]), &g);
            let at = [p.cx, p.cy, p.w, p.h, p.theta];

            let (_, dr) = riou_loss_grad(&p, &g);
            let fd = finite_diff(eval_r, &at, 1e-6);
            for i in 0..5 {
                assert!(
                    grad_rel_err(dr[i], fd[i]) < 1e-4,
                    "riou slot {i}: {} vs {}",
                    dr[i],
                    fd[i]
                );
            }

            let (_, dc) = circum_iou_loss_grad(&p, &g);
            let fd = finite_diff(eval_c, &at, 1e-6);
            for i in 0..5 {
                assert!(
                    grad_rel_err(dc[i], fd[i]) < 1e-4,
                    "circum slot {i}: {} vs {}",
                    dc[i],
                    fd[i]
                );
            }
        }
    }

    #[test]
    fn normalization_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..200 {
            let b = RBox::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(0.5..4.0),
                rng.random_range(0.5..4.0),
                rng.random_range(-10.0..10.0),
            );
            let n = b.normalized();
            assert!(n.w >= n.h);
            assert!((-FRAC_PI_2..FRAC_PI_2).contains(&n.theta));
            assert_eq!(n, n.normalized());
        }
    }
}
