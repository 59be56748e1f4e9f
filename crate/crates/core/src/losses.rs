//! Training losses: self-supervised view-consistency terms, weakly- and
//! fully-supervised box losses, focal classification, centerness, and the
//! per-pipeline weighted compositions.

use crate::anglecodec::{snap_loss, snap_loss_grad};
use crate::geom::{self, circum_iou_loss, circum_iou_loss_grad, riou_loss, riou_loss_grad, RBox};
use crate::jet::{Jet, Scalar};
use crate::Error;
use serde::{Deserialize, Serialize};

/// Weights of the loss compositions; all default to one except the flip
/// weight `lambda` (0.05).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_flip: f64,
    pub mu_cn: f64,
    pub mu_box: f64,
    pub mu_ss: f64,
    pub mu_flp: f64,
    pub mu_sca: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_flip: 0.05,
            mu_cn: 1.0,
            mu_box: 1.0,
            mu_ss: 1.0,
            mu_flp: 1.0,
            mu_sca: 1.0,
        }
    }
}

/// Per-object mean predicted angles in the original and transformed views;
/// only objects surviving both views' keep-masks appear.
#[derive(Debug, Clone, Default)]
pub struct PairedAngles {
    /// `(theta, theta_view)` per matched object.
    pub pairs: Vec<(f64, f64)>,
}

/// A consistency-loss value together with the number of contributing pairs
/// (zero pairs yields value 0 and serves as the "no pairs" flag).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsLoss {
    pub value: f64,
    pub pairs: usize,
}

/// Flip consistency: mean `snap(theta_view + theta, 0)` over objects.
pub fn loss_flp(pairs: &PairedAngles) -> SsLoss {
    let n = pairs.pairs.len();
    if n == 0 {
        return SsLoss { value: 0.0, pairs: 0 };
    }
    let sum: f64 = pairs
        .pairs
        .iter()
        .map(|&(th, th_v)| snap_loss(th_v + th, 0.0))
        .sum();
    SsLoss {
        value: sum / n as f64,
        pairs: n,
    }
}

/// Rotate consistency: mean `snap(theta_view - theta, rot)` over objects.
pub fn loss_rot(pairs: &PairedAngles, rot: f64) -> SsLoss {
    let n = pairs.pairs.len();
    if n == 0 {
        return SsLoss { value: 0.0, pairs: 0 };
    }
    let sum: f64 = pairs
        .pairs
        .iter()
        .map(|&(th, th_v)| snap_loss(th_v - th, rot))
        .sum();
    SsLoss {
        value: sum / n as f64,
        pairs: n,
    }
}

/// [`loss_flp`] with per-pair derivatives `(d/dtheta, d/dtheta_view)`.
pub fn loss_flp_grad(pairs: &PairedAngles) -> (SsLoss, Vec<(f64, f64)>) {
    let n = pairs.pairs.len();
    let mut grads = Vec::with_capacity(n);
    let mut sum = 0.0;
    for &(th, th_v) in &pairs.pairs {
        let (v, g) = snap_loss_grad(th_v + th, 0.0);
        sum += v;
        grads.push((g / n as f64, g / n as f64));
    }
    (
        SsLoss {
            value: if n == 0 { 0.0 } else { sum / n as f64 },
            pairs: n,
        },
        grads,
    )
}

/// [`loss_rot`] with per-pair derivatives `(d/dtheta, d/dtheta_view)`.
pub fn loss_rot_grad(pairs: &PairedAngles, rot: f64) -> (SsLoss, Vec<(f64, f64)>) {
    let n = pairs.pairs.len();
    let mut grads = Vec::with_capacity(n);
    let mut sum = 0.0;
    for &(th, th_v) in &pairs.pairs {
        let (v, g) = snap_loss_grad(th_v - th, rot);
        sum += v;
        grads.push((-g / n as f64, g / n as f64));
    }
    (
        SsLoss {
            value: if n == 0 { 0.0 } else { sum / n as f64 },
            pairs: n,
        },
        grads,
    )
}

fn r2h_s<S: Scalar>(p: &[S; 5]) -> [S; 4] {
    let [cx, cy, w, h, theta] = *p;
    let half = S::from_f64(0.5);
    let (s, c) = (theta.sin(), theta.cos());
    // Half-extents of the circumscribed axis-aligned box.
    let ex = (c * w * half).abs() + (s * h * half).abs();
    let ey = (s * w * half).abs() + (c * h * half).abs();
    [cx - ex, cy - ey, cx + ex, cy + ey]
}

fn sca_pair_s<S: Scalar>(ori: &[S; 5], trs: &[S; 5], s: f64) -> S {
    let sc = S::from_f64(s);
    let ho = r2h_s(ori).map(|v| v * sc);
    let ht = r2h_s(trs);
    S::from_f64(1.0) - geom::hbox_giou_s(ho, ht)
}

/// Scale consistency: mean `1 - GIoU(r2h(b_ori) * s, r2h(b_trs))` over
/// paired detections; the scaling applies the same coordinate map as the
/// scale view.
pub fn loss_sca(b_ori: &[RBox], b_trs: &[RBox], s: f64) -> SsLoss {
    assert_eq!(b_ori.len(), b_trs.len());
    let n = b_ori.len();
    if n == 0 {
        return SsLoss { value: 0.0, pairs: 0 };
    }
    let sum: f64 = b_ori
        .iter()
        .zip(b_trs)
        .map(|(o, t)| {
            sca_pair_s(
                &[o.cx, o.cy, o.w, o.h, o.theta],
                &[t.cx, t.cy, t.w, t.h, t.theta],
                s,
            )
        })
        .sum();
    SsLoss {
        value: sum / n as f64,
        pairs: n,
    }
}

/// [`loss_sca`] with per-pair gradients w.r.t. both boxes' five parameters.
pub fn loss_sca_grad(
    b_ori: &[RBox],
    b_trs: &[RBox],
    s: f64,
) -> (SsLoss, Vec<([f64; 5], [f64; 5])>) {
    assert_eq!(b_ori.len(), b_trs.len());
    let n = b_ori.len();
    let mut grads = Vec::with_capacity(n);
    let mut sum = 0.0;
    for (o, t) in b_ori.iter().zip(b_trs) {
        let jo = [
            Jet::<10>::variable(o.cx, 0),
            Jet::variable(o.cy, 1),
            Jet::variable(o.w, 2),
            Jet::variable(o.h, 3),
            Jet::variable(o.theta, 4),
        ];
        let jt = [
            Jet::<10>::variable(t.cx, 5),
            Jet::variable(t.cy, 6),
            Jet::variable(t.w, 7),
            Jet::variable(t.h, 8),
            Jet::variable(t.theta, 9),
        ];
        let j = sca_pair_s(&jo, &jt, s);
        sum += j.v;
        let mut go = [0.0; 5];
        let mut gt = [0.0; 5];
        for i in 0..5 {
            go[i] = j.d[i] / n as f64;
            gt[i] = j.d[5 + i] / n as f64;
        }
        grads.push((go, gt));
    }
    (
        SsLoss {
            value: if n == 0 { 0.0 } else { sum / n as f64 },
            pairs: n,
        },
        grads,
    )
}

/// Kind of box ground truth for the weakly-supervised box loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoxKind {
    Hbox,
    Rbox,
}

/// Weakly-supervised box loss: circumscribed IoU for hbox targets (targets
/// are treated as axis-aligned boxes), rotated `-ln IoU` for rbox targets.
pub fn loss_box_ws(pred: &RBox, gt: &RBox, kind: BoxKind) -> f64 {
    match kind {
        BoxKind::Hbox => circum_iou_loss(pred, gt),
        BoxKind::Rbox => riou_loss(pred, gt),
    }
}

/// [`loss_box_ws`] plus the gradient w.r.t. the prediction.
pub fn loss_box_ws_grad(pred: &RBox, gt: &RBox, kind: BoxKind) -> (f64, [f64; 5]) {
    match kind {
        BoxKind::Hbox => circum_iou_loss_grad(pred, gt),
        BoxKind::Rbox => riou_loss_grad(pred, gt),
    }
}

pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Focal loss (gamma 2, alpha 0.25) on a single sigmoid logit.
pub fn focal_loss(logit: f64, positive: bool) -> f64 {
    let p = sigmoid(logit).clamp(1e-9, 1.0 - 1e-9);
    if positive {
        -FOCAL_ALPHA * (1.0 - p) * (1.0 - p) * p.ln()
    } else {
        -(1.0 - FOCAL_ALPHA) * p * p * (1.0 - p).ln()
    }
}

/// [`focal_loss`] with its derivative w.r.t. the logit.
pub fn focal_loss_grad(logit: f64, positive: bool) -> (f64, f64) {
    let p = sigmoid(logit).clamp(1e-9, 1.0 - 1e-9);
    let dp_dx = p * (1.0 - p);
    if positive {
        let q = 1.0 - p;
        let v = -FOCAL_ALPHA * q * q * p.ln();
        let dv_dp = FOCAL_ALPHA * (2.0 * q * p.ln() - q * q / p);
        (v, dv_dp * dp_dx)
    } else {
        let v = -(1.0 - FOCAL_ALPHA) * p * p * (1.0 - p).ln();
        let dv_dp = -(1.0 - FOCAL_ALPHA) * (2.0 * p * (1.0 - p).ln() - p * p / (1.0 - p));
        (v, dv_dp * dp_dx)
    }
}

/// Binary cross-entropy on a sigmoid logit against a soft target.
pub fn bce_loss(logit: f64, target: f64) -> f64 {
    let p = sigmoid(logit).clamp(1e-9, 1.0 - 1e-9);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// [`bce_loss`] with its derivative w.r.t. the logit (`sigmoid(x) - t`).
pub fn bce_loss_grad(logit: f64, target: f64) -> (f64, f64) {
    (bce_loss(logit, target), sigmoid(logit) - target)
}

/// FCOS centerness target from the four side offsets.
pub fn centerness_target(l: f64, t: f64, r: f64, b: f64) -> f64 {
    let lr = (l.min(r) / l.max(r)).max(0.0);
    let tb = (t.min(b) / t.max(b)).max(0.0);
    (lr * tb).sqrt()
}

/// Loss composition selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Hbox-supervised pipeline: `cls + cn + box + (rot + lambda flp)`.
    HboxToRbox,
    /// Point-supervised pipeline with a scale view:
    /// `cls + box + (rot + flp + sca)`.
    PointToRbox,
    /// Unified pipeline: `cls + cn + box + (rot + flp)`, the flip/rotate
    /// balance carried by the view-sampling proportions.
    Unified,
    /// Point-to-rbox subnet: `cls + box` only.
    P2rSubnet,
}

impl LossMode {
    fn name(&self) -> &'static str {
        match self {
            LossMode::HboxToRbox => "hbox_to_rbox",
            LossMode::PointToRbox => "point_to_rbox",
            LossMode::Unified => "unified",
            LossMode::P2rSubnet => "p2r_subnet",
        }
    }
}

/// Computed loss parts; `None` means the part was not computed at all.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub cls: Option<f64>,
    pub cn: Option<f64>,
    pub bbox: Option<f64>,
    pub rot: Option<f64>,
    pub flp: Option<f64>,
    pub sca: Option<f64>,
}

fn need(part: Option<f64>, name: &'static str, mode: LossMode) -> Result<f64, Error> {
    part.ok_or(Error::MissingLossPart(name, mode.name()))
}

/// Weighted total loss for a pipeline. Missing required parts are an error;
/// extra parts are ignored where the composition does not use them.
pub fn total_loss(parts: &LossParts, mode: LossMode, w: &LossWeights) -> Result<f64, Error> {
    match mode {
        LossMode::HboxToRbox => {
            let ss = need(parts.rot, "rot", mode)? + w.lambda_flip * need(parts.flp, "flp", mode)?;
            Ok(need(parts.cls, "cls", mode)?
                + w.mu_cn * need(parts.cn, "cn", mode)?
                + w.mu_box * need(parts.bbox, "bbox", mode)?
                + w.mu_ss * ss)
        }
        LossMode::PointToRbox => {
            let ss = need(parts.rot, "rot", mode)?
                + w.mu_flp * need(parts.flp, "flp", mode)?
                + w.mu_sca * need(parts.sca, "sca", mode)?;
            Ok(need(parts.cls, "cls", mode)?
                + w.mu_box * need(parts.bbox, "bbox", mode)?
                + w.mu_ss * ss)
        }
        LossMode::Unified => {
            let cls = need(parts.cls, "cls", mode)?;
            let cn = need(parts.cn, "cn", mode)?;
            let bbox = need(parts.bbox, "bbox", mode)?;
            let ss = need(parts.rot, "rot", mode)? + w.mu_flp * need(parts.flp, "flp", mode)?;
            Ok(cls + w.mu_cn * cn + w.mu_box * bbox + w.mu_ss * ss)
        }
        LossMode::P2rSubnet => {
            Ok(need(parts.cls, "cls", mode)? + w.mu_box * need(parts.bbox, "bbox", mode)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::r2h;
    use crate::jet::{finite_diff, grad_rel_err};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn flip_loss_fixed_points() {
        let exact = PairedAngles {
            pairs: vec![(0.3, -0.3), (1.1, -1.1 + PI)],
        };
        assert!(loss_flp(&exact).value < 1e-24);

        let off = PairedAngles {
            pairs: vec![(0.3, 0.3)],
        };
        assert!((loss_flp(&off).value - snap_loss(0.6, 0.0)).abs() < 1e-12);

        let empty = loss_flp(&PairedAngles::default());
        assert_eq!(empty, SsLoss { value: 0.0, pairs: 0 });
    }

    #[test]
    fn rot_loss_fixed_points() {
        let r = 0.8;
        let exact = PairedAngles {
            pairs: vec![(0.2, 1.0), (-0.5, 0.3 - PI)],
        };
        assert!(loss_rot(&exact, r).value < 1e-20);

        let off = PairedAngles {
            pairs: vec![(0.2, 0.2)],
        };
        assert!((loss_rot(&off, FRAC_PI_2).value - snap_loss(0.0, FRAC_PI_2)).abs() < 1e-12);
    }

    #[test]
    fn consistency_losses_pi_periodic_in_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let th = rng.random_range(-2.0..2.0);
            let tv = rng.random_range(-2.0..2.0);
            let r = rng.random_range(0.5..2.0);
            let k = [-2.0f64, -1.0, 1.0, 2.0][rng.random_range(0..4)];
            let a = PairedAngles { pairs: vec![(th, tv)] };
            let b = PairedAngles {
                pairs: vec![(th + k * PI, tv)],
            };
            assert!((loss_rot(&a, r).value - loss_rot(&b, r).value).abs() < 1e-9);
            assert!((loss_flp(&a).value - loss_flp(&b).value).abs() < 1e-9);
        }
    }

    #[test]
    fn sca_loss_cases() {
        let b = RBox::new(10.0, 12.0, 8.0, 4.0, 0.6);
        // Exact scaled copy.
        let s = 1.3;
        let scaled = RBox::new(b.cx * s, b.cy * s, b.w * s, b.h * s, b.theta);
        let l = loss_sca(&[b], &[scaled], s);
        assert!(l.value.abs() < 1e-12);

        // Identity scale.
        assert!(loss_sca(&[b], &[b], 1.0).value.abs() < 1e-12);

        // Deliberate 2x size error matches the giou oracle on nested boxes.
        let wrong = RBox::new(b.cx, b.cy, b.w * 2.0, b.h * 2.0, b.theta);
        let l = loss_sca(&[b], &[wrong], 1.0);
        let want = 1.0 - crate::geom::hbox_giou(&r2h(&b), &r2h(&wrong));
        assert!((l.value - want).abs() < 1e-12);
    }

    #[test]
    fn sca_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut n = 0;
        while n < 100 {
            let o = RBox::new(
                rng.random_range(5.0..20.0),
                rng.random_range(5.0..20.0),
                rng.random_range(4.0..10.0),
                rng.random_range(2.0..6.0),
                rng.random_range(-1.4..1.4),
            );
            let s = rng.random_range(0.6..1.4);
            let t = RBox::new(
                o.cx * s + rng.random_range(-2.0..2.0),
                o.cy * s + rng.random_range(-2.0..2.0),
                o.w * s * rng.random_range(0.7..1.3),
                o.h * s * rng.random_range(0.7..1.3),
                o.theta + rng.random_range(-0.3..0.3),
            );
            n += 1;
            let (_, grads) = loss_sca_grad(&[o], &[t], s);
            let (go, gt) = grads[0];
            let fd_o = finite_diff(
                |p| {
                    loss_sca(&[RBox::new(p[0], p[1], p[2], p[3], p[4])], &[t], s).value
                },
                &[o.cx, o.cy, o.w, o.h, o.theta],
                1e-6,
            );
            let fd_t = finite_diff(
                |p| {
                    loss_sca(&[o], &[RBox::new(p[0], p[1], p[2], p[3], p[4])], s).value
                },
                &[t.cx, t.cy, t.w, t.h, t.theta],
                1e-6,
            );
            for i in 0..5 {
                assert!(grad_rel_err(go[i], fd_o[i]) < 1e-4, "ori slot {i}");
                assert!(grad_rel_err(gt[i], fd_t[i]) < 1e-4, "trs slot {i}");
            }
        }
    }

    #[test]
    fn box_ws_cases() {
        let gt = RBox::new(5.0, 5.0, 6.0, 3.0, 0.4);
        assert!(loss_box_ws(&gt, &gt, BoxKind::Rbox).abs() < 1e-9);

        // Prediction whose circumscribed box in the gt frame equals the gt.
        let hgt = RBox::new(5.0, 5.0, 6.0, 3.0, 0.0);
        assert!(loss_box_ws(&hgt, &hgt, BoxKind::Hbox).abs() < 1e-9);

        let half = RBox::new(5.0, 5.0, 3.0, 3.0, 0.4);
        assert!((loss_box_ws(&half, &gt, BoxKind::Rbox) - -(0.5f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn focal_and_centerness() {
        // Perfect confident positives/negatives drive the loss to zero.
        assert!(focal_loss(12.0, true) < 1e-4);
        assert!(focal_loss(-12.0, false) < 1e-4);

        // Centerness target is 1 at the box center.
        assert_eq!(centerness_target(3.0, 2.0, 3.0, 2.0), 1.0);

        // Direct formula oracle on random logits.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let x = rng.random_range(-4.0..4.0);
            let pos = rng.random_range(0.0..1.0) < 0.5;
            let p: f64 = sigmoid(x);
            let want = if pos {
                -0.25 * (1.0 - p).powi(2) * p.ln()
            } else {
                -0.75 * p.powi(2) * (1.0 - p).ln()
            };
            assert!((focal_loss(x, pos) - want).abs() < 1e-9);

            let (_, g) = focal_loss_grad(x, pos);
            let fd = finite_diff(|v| focal_loss(v[0], pos), &[x], 1e-6)[0];
            assert!(grad_rel_err(g, fd) < 1e-4);

            let t = rng.random_range(0.0..1.0);
            let (_, g) = bce_loss_grad(x, t);
            let fd = finite_diff(|v| bce_loss(v[0], t), &[x], 1e-6)[0];
            assert!(grad_rel_err(g, fd) < 1e-4);
        }
    }

    #[test]
    fn total_loss_compositions() {
        let w = LossWeights::default();
        let zeros = LossParts {
            cls: Some(0.0),
            cn: Some(0.0),
            bbox: Some(0.0),
            rot: Some(0.0),
            flp: Some(0.0),
            sca: Some(0.0),
        };
        for mode in [
            LossMode::HboxToRbox,
            LossMode::PointToRbox,
            LossMode::Unified,
            LossMode::P2rSubnet,
        ] {
            assert_eq!(total_loss(&zeros, mode, &w).unwrap(), 0.0);
        }

        // rot = 1, flp = 1, lambda = 0.05, everything else 0 -> 1.05.
        let parts = LossParts {
            cls: Some(0.0),
            cn: Some(0.0),
            bbox: Some(0.0),
            rot: Some(1.0),
            flp: Some(1.0),
            sca: Some(0.0),
        };
        assert!((total_loss(&parts, LossMode::HboxToRbox, &w).unwrap() - 1.05).abs() < 1e-12);

        // The subnet composition ignores cn and ss parts entirely.
        let parts = LossParts {
            cls: Some(0.5),
            cn: Some(100.0),
            bbox: Some(0.25),
            rot: Some(100.0),
            flp: Some(100.0),
            sca: Some(100.0),
        };
        assert!((total_loss(&parts, LossMode::P2rSubnet, &w).unwrap() - 0.75).abs() < 1e-12);

        // Missing parts are rejected.
        let missing = LossParts {
            cls: Some(0.0),
            ..LossParts::default()
        };
        assert!(matches!(
            total_loss(&missing, LossMode::Unified, &w),
            Err(Error::MissingLossPart("cn", _))
        ));
    }

    #[test]
    fn pair_grads_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let th = rng.random_range(-1.2..1.2);
            let tv = rng.random_range(-1.2..1.2);
            let r = rng.random_range(0.8..2.3);
            let pairs = PairedAngles {
                pairs: vec![(th, tv)],
            };
            let folded = crate::geom::fold_half_open(tv - th - r + FRAC_PI_2) - FRAC_PI_2;
            if (folded.abs() - FRAC_PI_2).abs() < 1e-3 || (folded.abs() - 1.0).abs() < 1e-3 {
                continue;
            }
            let (_, g) = loss_rot_grad(&pairs, r);
            let fd_th = finite_diff(
                |p| loss_rot(&PairedAngles { pairs: vec![(p[0], tv)] }, r).value,
                &[th],
                1e-6,
            )[0];
            let fd_tv = finite_diff(
                |p| loss_rot(&PairedAngles { pairs: vec![(th, p[0])] }, r).value,
                &[tv],
                1e-6,
            )[0];
            assert!(grad_rel_err(g[0].0, fd_th) < 1e-4);
            assert!(grad_rel_err(g[0].1, fd_tv) < 1e-4);
        }
    }
}
