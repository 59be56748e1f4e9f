//! Label assigners: FCOS center sampling over the pyramid, nearest-pixel
//! assignment on the fused single-level map, and score-based anchor
//! assignment for fixed-size anchors.

use crate::geom::RBox;
use crate::losses::centerness_target;
use crate::model::{DensePrediction, NUM_LEVELS, STRIDES};

/// Grid geometry of one pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelGeom {
    pub stride: usize,
    pub h: usize,
    pub w: usize,
}

/// Level geometries for an input of the given size.
pub fn level_geoms(img_h: usize, img_w: usize) -> Vec<LevelGeom> {
    STRIDES
        .iter()
        .map(|&stride| LevelGeom {
            stride,
            h: img_h.div_ceil(stride),
            w: img_w.div_ceil(stride),
        })
        .collect()
}

/// Center pixel coordinates of a grid location.
#[inline]
pub fn loc_center(stride: usize, x: usize, y: usize) -> (f64, f64) {
    (
        (x as f64 + 0.5) * stride as f64,
        (y as f64 + 0.5) * stride as f64,
    )
}

/// One assigned positive location.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignTarget {
    pub level: usize,
    pub y: usize,
    pub x: usize,
    pub gt_index: usize,
    pub class: usize,
    /// Side offsets (left, top, right, bottom) of the location in the ground
    /// truth's rotated frame, pixels.
    pub ltrb: [f64; 4],
    pub centerness: f64,
    /// Marks locations supervised by synthetic-pattern boxes.
    pub m_box: bool,
}

/// Assignment output: positive locations plus unassigned ground truths.
#[derive(Debug, Clone, Default)]
pub struct AssignmentResult {
    pub positives: Vec<AssignTarget>,
    pub unassigned: Vec<usize>,
}

impl AssignmentResult {
    /// Positive locations per ground-truth index.
    pub fn by_gt(&self, n_gts: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); n_gts];
        for (i, t) in self.positives.iter().enumerate() {
            out[t.gt_index].push(i);
        }
        out
    }
}

/// FCOS regression ranges scaled from the standard settings to the given
/// image size: level `i` accepts max offsets in `(bounds[i-1], bounds[i]]`.
///
/// The scale is half the raw image-size ratio: strides are fixed at 8..128
/// regardless of image size, and shrinking the ranges by the full ratio
/// would leave levels whose grid pitch exceeds the entire range span, so
/// off-grid objects would own no location at their level.
pub fn regression_bounds(img_h: usize, img_w: usize) -> [f64; 4] {
    let scale = img_h.min(img_w) as f64 / 512.0;
    [64.0 * scale, 128.0 * scale, 256.0 * scale, 512.0 * scale]
}

const CENTER_RADIUS: f64 = 1.5;

/// Side offsets of a point in the box's rotated frame; all positive inside.
fn frame_offsets(b: &RBox, px: f64, py: f64) -> [f64; 4] {
    let (s, c) = b.theta.sin_cos();
    let dx = px - b.cx;
    let dy = py - b.cy;
    let u = c * dx + s * dy;
    let v = -s * dx + c * dy;
    [
        u + b.w / 2.0,
        v + b.h / 2.0,
        b.w / 2.0 - u,
        b.h / 2.0 - v,
    ]
}

/// Default FCOS center-sampling assigner over rotated ground-truth boxes.
///
/// A location is positive for a ground truth when it lies inside the box,
/// within `1.5 * stride` of the center along the box axes, and the maximum
/// side offset falls in the level's regression range. Locations claimed by
/// several ground truths keep the smallest-area one.
pub fn assign_fcos(
    gts: &[(RBox, usize)],
    m_box_flags: &[bool],
    geoms: &[LevelGeom],
    img_h: usize,
    img_w: usize,
) -> AssignmentResult {
    let bounds = regression_bounds(img_h, img_w);
    let mut positives: Vec<AssignTarget> = Vec::new();
    // location key -> (area, index into positives)
    let mut claimed: std::collections::BTreeMap<(usize, usize, usize), (f64, usize)> =
        std::collections::BTreeMap::new();
    let mut assigned_gt = vec![false; gts.len()];

    for (gi, (gt, class)) in gts.iter().enumerate() {
        for (lvl, geom) in geoms.iter().enumerate().take(NUM_LEVELS) {
            let lo = if lvl == 0 { 0.0 } else { bounds[lvl - 1] };
            let hi = if lvl == 4 { f64::INFINITY } else { bounds[lvl] };
            for y in 0..geom.h {
                for x in 0..geom.w {
                    let (px, py) = loc_center(geom.stride, x, y);
                    let ltrb = frame_offsets(gt, px, py);
                    if ltrb.iter().any(|&o| o <= 0.0) {
                        continue;
                    }
                    let max_off = ltrb.iter().cloned().fold(0.0, f64::max);
                    if max_off <= lo || max_off > hi {
                        continue;
                    }
                    // Center sampling in the box frame.
                    let r = CENTER_RADIUS * geom.stride as f64;
                    let u = ltrb[0] - gt.w / 2.0;
                    let v = ltrb[1] - gt.h / 2.0;
                    if u.abs() > r || v.abs() > r {
                        continue;
                    }
                    let key = (lvl, y, x);
                    let area = gt.area();
                    if let Some(&(prev_area, idx)) = claimed.get(&key) {
                        if area < prev_area {
                            positives[idx] = AssignTarget {
                                level: lvl,
                                y,
                                x,
                                gt_index: gi,
                                class: *class,
                                centerness: centerness_target(ltrb[0], ltrb[1], ltrb[2], ltrb[3]),
                                ltrb,
                                m_box: m_box_flags.get(gi).copied().unwrap_or(false),
                            };
                            claimed.insert(key, (area, idx));
                            assigned_gt[gi] = true;
                        }
                        continue;
                    }
                    positives.push(AssignTarget {
                        level: lvl,
                        y,
                        x,
                        gt_index: gi,
                        class: *class,
                        centerness: centerness_target(ltrb[0], ltrb[1], ltrb[2], ltrb[3]),
                        ltrb,
                        m_box: m_box_flags.get(gi).copied().unwrap_or(false),
                    });
                    claimed.insert(key, (area, positives.len() - 1));
                    assigned_gt[gi] = true;
                }
            }
        }
    }

    // Re-derive the assigned set after stealing: a gt whose every location
    // was re-claimed by a smaller gt counts as unassigned.
    let mut seen = vec![false; gts.len()];
    for t in &positives {
        seen[t.gt_index] = true;
    }
    let unassigned = (0..gts.len()).filter(|&i| !seen[i]).collect();
    AssignmentResult {
        positives,
        unassigned,
    }
}

/// Nearest-pixel assignment on the fused stride-8 map: each center claims
/// its nearest free location; collisions are resolved in input order, the
/// loser moving to the next-nearest free pixel.
pub fn assign_points_nearest(
    centers: &[(f64, f64, usize)],
    m_box_flags: &[bool],
    geom: LevelGeom,
) -> AssignmentResult {
    let mut taken = vec![false; geom.h * geom.w];
    let mut positives = Vec::with_capacity(centers.len());
    let mut unassigned = Vec::new();

    for (gi, &(cx, cy, class)) in centers.iter().enumerate() {
        // Fractional grid coordinates; ties round to the lower index.
        let fx = cx / geom.stride as f64 - 0.5;
        let fy = cy / geom.stride as f64 - 0.5;
        let nx = (fx - 0.5).ceil().clamp(0.0, geom.w as f64 - 1.0) as usize;
        let ny = (fy - 0.5).ceil().clamp(0.0, geom.h as f64 - 1.0) as usize;

        let mut best: Option<(f64, usize, usize)> = None;
        if !taken[ny * geom.w + nx] {
            best = Some((0.0, nx, ny));
        } else {
            // Exhaustive search over free pixels by distance, ties by
            // row-major order.
            for y in 0..geom.h {
                for x in 0..geom.w {
                    if taken[y * geom.w + x] {
                        continue;
                    }
                    let (px, py) = loc_center(geom.stride, x, y);
                    let d2 = (px - cx) * (px - cx) + (py - cy) * (py - cy);
                    if best.is_none_or(|(bd, _, _)| d2 < bd) {
                        best = Some((d2, x, y));
                    }
                }
            }
        }
        match best {
            Some((_, x, y)) => {
                taken[y * geom.w + x] = true;
                positives.push(AssignTarget {
                    level: 0,
                    y,
                    x,
                    gt_index: gi,
                    class,
                    ltrb: [0.0; 4],
                    centerness: 1.0,
                    m_box: m_box_flags.get(gi).copied().unwrap_or(false),
                });
            }
            None => unassigned.push(gi),
        }
    }
    AssignmentResult {
        positives,
        unassigned,
    }
}

/// Score-based assignment for fixed-size anchors: the matching score is the
/// predicted class score, zeroed when the L1 center distance exceeds the
/// gate; the top `k` anchors per ground truth become positive.
pub fn assign_score_based(
    gts: &[(f64, f64, usize)],
    anchors: &[(f64, f64)],
    cls_scores: &[Vec<f64>],
    distance_gate: f64,
    k: usize,
) -> (Vec<Vec<usize>>, Vec<usize>) {
    let mut per_gt = Vec::with_capacity(gts.len());
    let mut unassigned = Vec::new();
    for (gi, &(gx, gy, class)) in gts.iter().enumerate() {
        let mut scored: Vec<(f64, usize)> = anchors
            .iter()
            .enumerate()
            .filter_map(|(ai, &(ax, ay))| {
                let l1 = (ax - gx).abs() + (ay - gy).abs();
                if l1 > distance_gate {
                    None
                } else {
                    Some((cls_scores[ai][class], ai))
                }
            })
            .collect();
        if scored.is_empty() {
            unassigned.push(gi);
            per_gt.push(Vec::new());
            continue;
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        per_gt.push(scored.iter().take(k).map(|&(_, ai)| ai).collect());
    }
    (per_gt, unassigned)
}

// ----------------------------------------------------------- view pairing

/// Mean angle code and decoded angle of one object's assigned locations.
#[derive(Debug, Clone)]
pub struct ObjectAngle {
    pub gt_index: usize,
    /// `(level, y, x)` of each contributing location.
    pub locs: Vec<(usize, usize, usize)>,
    pub mean_code: [f64; 3],
    pub theta: f64,
}

/// Average the angle-code features over each object's assigned locations and
/// decode once (robust circular mean). Objects whose phasor vanishes are
/// dropped.
pub fn object_angles(asg: &AssignmentResult, pred: &DensePrediction, n_gts: usize) -> Vec<Option<ObjectAngle>> {
    let mut out: Vec<Option<ObjectAngle>> = vec![None; n_gts];
    let by_gt = asg.by_gt(n_gts);
    for (gi, locs) in by_gt.iter().enumerate() {
        if locs.is_empty() {
            continue;
        }
        let mut mean_code = [0.0f64; 3];
        let mut loc_list = Vec::with_capacity(locs.len());
        for &pi in locs {
            let t = &asg.positives[pi];
            let code = pred.angle_code(t.level, t.y, t.x);
            for j in 0..3 {
                mean_code[j] += code[j];
            }
            loc_list.push((t.level, t.y, t.x));
        }
        for c in mean_code.iter_mut() {
            *c /= locs.len() as f64;
        }
        let Ok((theta, _)) = crate::anglecodec::angle_decode_grad(&mean_code) else {
            continue;
        };
        out[gi] = Some(ObjectAngle {
            gt_index: gi,
            locs: loc_list,
            mean_code,
            theta,
        });
    }
    out
}

/// Matched per-object angles across two views. Identity is by ground-truth
/// index; objects missing from either view or dropped by the keep-mask are
/// excluded.
pub fn pair_views(
    orig: &[Option<ObjectAngle>],
    view: &[Option<ObjectAngle>],
    keep: &[bool],
) -> Vec<(ObjectAngle, ObjectAngle)> {
    orig.iter()
        .zip(view)
        .enumerate()
        .filter(|&(gi, _)| keep.get(gi).copied().unwrap_or(false))
        .filter_map(|(_, (o, v))| match (o, v) {
            (Some(o), Some(v)) => Some((o.clone(), v.clone())),
            _ => None,
        })
        .collect()
}
