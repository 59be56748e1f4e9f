//! Training loops for all supervision modes, inference, and the empirical
//! symmetry-recovery check.
//!
//! Each step multiplexes a single transformed view: the original and warped
//! frames pass through the shared detector, matched objects contribute a
//! consistency loss on their mean angle codes, and the weakly-supervised
//! losses (classification, centerness, box) are computed on the original
//! frame only. In point and mixed modes a pattern generator blends synthetic
//! instances with known boxes into the frame and a separate point-to-rbox
//! subnet learns from them; its per-point box suggestions are refreshed once
//! per epoch and stand in as rotated-box targets for point-labeled objects.

use crate::anglecodec::angle_decode_grad;
use crate::assign::{
    assign_fcos, assign_points_nearest, level_geoms, loc_center, object_angles, pair_views,
    regression_bounds, AssignTarget, AssignmentResult, LevelGeom, ObjectAngle,
};
use crate::config::{DatasetConfig, SymmetryConfig, TrainConfig, TrainMode};
use crate::dataio::{
    eval_ap50, noise_instance, AnnotationSet, ApReport, Detection, ImageAnnotations,
    ImageDetections, Instance, Label,
};
use crate::geom::{r2h, rbox_nms, RBox};
use crate::losses::{
    bce_loss_grad, focal_loss_grad, loss_box_ws_grad, loss_flp_grad, loss_rot_grad, loss_sca_grad,
    sigmoid, BoxKind, LossMode, LossParts, PairedAngles,
};
use crate::model::{
    backprop_box_main, backprop_box_p2r, decode_box_main, decode_box_p2r, gate_scale_factor,
    DensePrediction, Detector, ModelConfig, Optimizer, P2rGrads, P2rSubnet, NUM_LEVELS, STRIDES,
};
use crate::nn::{Conv2d, GroupNorm, ParamArena, Tensor};
use crate::raster::{PackedRaster, Raster};
use crate::synth::{gen_scene_split, make_basic_patterns, BasicPattern, SceneSpec, ShapeFamily};
use crate::viewgen::{apply_view, sample_view, ViewKind, ViewTransform};
use crate::{Error, PointLabel};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Derive an independent RNG stream from the run seed.
fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(tag))
}

// ------------------------------------------------------------------- data

/// One split held in memory.
pub struct SplitData {
    pub images: Vec<PackedRaster>,
    pub anns: AnnotationSet,
}

/// Train/test data with train labels already degraded to the configured
/// supervision mode (plus optional annotation noise).
pub struct TrainData {
    pub classes: Vec<String>,
    pub train: SplitData,
    pub test: SplitData,
}

fn degrade_instance(inst: &mut Instance, to: TrainMode) {
    let Label::Rbox(b) = inst.label else { return };
    let b = b.normalized();
    match to {
        TrainMode::Rbox => {}
        TrainMode::Hbox => {
            inst.source_height = Some(b.h);
            inst.label = Label::Hbox(r2h(&b));
        }
        TrainMode::Point | TrainMode::Mixed => {
            inst.source_height = Some(b.h);
            inst.label = Label::Point { x: b.cx, y: b.cy };
        }
    }
}

/// Build the in-memory dataset for a config: generate or load both splits,
/// then degrade the train labels per mode and apply annotation noise.
pub fn build_data(cfg: &TrainConfig) -> Result<TrainData, Error> {
    let (train_images, mut train_anns, test_images, test_anns, classes) = match &cfg.dataset {
        DatasetConfig::Synthetic {
            train_images,
            test_images,
            scene,
        } => {
            let mut rng_train = stream(cfg.seed, 1);
            let mut rng_test = stream(cfg.seed, 2);
            let (timgs, tanns) = gen_scene_split(scene, *train_images, &mut rng_train)?;
            let (eimgs, eanns) = gen_scene_split(scene, *test_images, &mut rng_test)?;
            let classes = scene.class_names();
            (
                timgs.iter().map(PackedRaster::pack).collect::<Vec<_>>(),
                tanns,
                eimgs.iter().map(PackedRaster::pack).collect::<Vec<_>>(),
                eanns,
                classes,
            )
        }
        DatasetConfig::Dir {
            train_images,
            train_annotations,
            test_images,
            test_annotations,
        } => {
            let tanns = crate::dataio::load_annotations(
                train_annotations,
                crate::dataio::AnnFormat::Internal,
                None,
            )?;
            let eanns = crate::dataio::load_annotations(
                test_annotations,
                crate::dataio::AnnFormat::Internal,
                None,
            )?;
            let load = |dir: &Path, anns: &AnnotationSet| -> Result<Vec<PackedRaster>, Error> {
                anns.images
                    .iter()
                    .map(|img| {
                        let mut p = dir.join(&img.name);
                        if p.extension().is_none() {
                            p.set_extension("png");
                        }
                        Ok(PackedRaster::pack(&Raster::load_png(&p)?))
                    })
                    .collect()
            };
            let timgs = load(train_images, &tanns)?;
            let eimgs = load(test_images, &eanns)?;
            let classes = tanns.classes.clone();
            (timgs, tanns, eimgs, eanns, classes)
        }
    };

    // Degrade train labels per mode, then optional annotation noise.
    let mut rng_kind = stream(cfg.seed, 3);
    let mut rng_noise = stream(cfg.seed, 4);
    for img in train_anns.images.iter_mut() {
        for inst in img.instances.iter_mut() {
            let to = match cfg.mode {
                TrainMode::Mixed => {
                    let u: f64 = rng_kind.random_range(0.0..1.0);
                    if u < cfg.mixed.point {
                        TrainMode::Point
                    } else if u < cfg.mixed.point + cfg.mixed.hbox {
                        TrainMode::Hbox
                    } else {
                        TrainMode::Rbox
                    }
                }
                m => m,
            };
            degrade_instance(inst, to);
            if cfg.noise_sigma > 0.0 && !matches!(inst.label, Label::Rbox(_)) {
                noise_instance(inst, cfg.noise_sigma, &mut rng_noise)?;
            }
        }
    }

    Ok(TrainData {
        classes,
        train: SplitData {
            images: train_images,
            anns: train_anns,
        },
        test: SplitData {
            images: test_images,
            anns: test_anns,
        },
    })
}

// --------------------------------------------------------------- gt per step

/// Box target attached to one instance for a step.
#[derive(Debug, Clone)]
struct StepGt {
    rbox: RBox,
    class: usize,
    kind: BoxKind,
    /// Box regression enabled (false for point labels without a suggestion).
    box_supervised: bool,
    /// Synthetic-pattern instance.
    m_box: bool,
}

/// Nominal assignment box for point labels before suggestions exist.
const NOMINAL_POINT_SIZE: f64 = 24.0;

fn step_gts(
    instances: &[Instance],
    suggestions: Option<&[Option<RBox>]>,
    synth: &[(RBox, usize)],
) -> Vec<StepGt> {
    let mut gts: Vec<StepGt> = instances
        .iter()
        .enumerate()
        .map(|(i, inst)| match inst.label {
            Label::Rbox(b) => StepGt {
                rbox: b.normalized(),
                class: inst.category,
                kind: BoxKind::Rbox,
                box_supervised: true,
                m_box: false,
            },
            Label::Hbox(h) => StepGt {
                rbox: h.to_rbox(),
                class: inst.category,
                kind: BoxKind::Hbox,
                box_supervised: true,
                m_box: false,
            },
            Label::Point { x, y } => {
                let sug = suggestions.and_then(|s| s.get(i).copied().flatten());
                match sug {
                    Some(b) => StepGt {
                        rbox: b,
                        class: inst.category,
                        kind: BoxKind::Rbox,
                        box_supervised: true,
                        m_box: false,
                    },
                    None => StepGt {
                        rbox: RBox::new(x, y, NOMINAL_POINT_SIZE, NOMINAL_POINT_SIZE, 0.0),
                        class: inst.category,
                        kind: BoxKind::Rbox,
                        box_supervised: false,
                        m_box: false,
                    },
                }
            }
        })
        .collect();
    for (b, class) in synth {
        gts.push(StepGt {
            rbox: *b,
            class: *class,
            kind: BoxKind::Rbox,
            box_supervised: true,
            m_box: true,
        });
    }
    gts
}

/// Nearest-location fallback for ground truths that FCOS assignment left
/// without a positive (coarse desk grids regularly miss off-grid objects).
fn add_fallback_targets(
    asg: &mut AssignmentResult,
    gts: &[StepGt],
    geoms: &[LevelGeom],
    img_h: usize,
    img_w: usize,
) {
    if asg.unassigned.is_empty() {
        return;
    }
    let bounds = regression_bounds(img_h, img_w);
    let claimed: std::collections::BTreeSet<(usize, usize, usize)> = asg
        .positives
        .iter()
        .map(|t| (t.level, t.y, t.x))
        .collect();
    let unassigned = std::mem::take(&mut asg.unassigned);
    for gi in unassigned {
        let gt = &gts[gi];
        let m_c = gt.rbox.w.max(gt.rbox.h) / 2.0;
        let mut lvl = NUM_LEVELS - 1;
        for (i, b) in bounds.iter().enumerate() {
            if m_c <= *b {
                lvl = i;
                break;
            }
        }
        let geom = geoms[lvl];
        let fx = (gt.rbox.cx / geom.stride as f64 - 0.5)
            .round()
            .clamp(0.0, geom.w as f64 - 1.0) as usize;
        let fy = (gt.rbox.cy / geom.stride as f64 - 0.5)
            .round()
            .clamp(0.0, geom.h as f64 - 1.0) as usize;
        if claimed.contains(&(lvl, fy, fx)) {
            asg.unassigned.push(gi);
            continue;
        }
        let (px, py) = loc_center(geom.stride, fx, fy);
        let (s, c) = gt.rbox.theta.sin_cos();
        let dx = px - gt.rbox.cx;
        let dy = py - gt.rbox.cy;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let min_off = 0.25 * geom.stride as f64;
        let ltrb = [
            (u + gt.rbox.w / 2.0).max(min_off),
            (v + gt.rbox.h / 2.0).max(min_off),
            (gt.rbox.w / 2.0 - u).max(min_off),
            (gt.rbox.h / 2.0 - v).max(min_off),
        ];
        asg.positives.push(AssignTarget {
            level: lvl,
            y: fy,
            x: fx,
            gt_index: gi,
            class: gt.class,
            centerness: crate::losses::centerness_target(ltrb[0], ltrb[1], ltrb[2], ltrb[3]),
            ltrb,
            m_box: gt.m_box,
        });
    }
}

// ------------------------------------------------------------ loss assembly

struct StepStats {
    parts: LossParts,
    p2r_cls: f64,
    p2r_box: f64,
    total: f64,
    positives: usize,
}

fn normalize_input(r: &Raster) -> Tensor {
    let mut t = Tensor::from_raster(r);
    for v in t.data.iter_mut() {
        *v = (*v - 0.5) * 2.0;
    }
    t
}

/// Dense focal classification over every location/class; positives given as
/// per-level class maps (-1 = background). Returns the loss, writing
/// gradients scaled by `gscale / num_pos`.
fn cls_loss_and_grad(
    pred_cls: &[Tensor],
    pos_class: &[Vec<i32>],
    num_pos: usize,
    grads: &mut [Tensor],
    gscale: f64,
) -> f64 {
    let norm = num_pos.max(1) as f64;
    let mut total = 0.0;
    for lvl in 0..pred_cls.len() {
        let t = &pred_cls[lvl];
        let plane = t.h * t.w;
        for k in 0..t.c {
            for i in 0..plane {
                let positive = pos_class[lvl][i] == k as i32;
                let (v, g) = focal_loss_grad(t.data[k * plane + i] as f64, positive);
                total += v;
                grads[lvl].data[k * plane + i] += (g * gscale / norm) as f32;
            }
        }
    }
    total / norm
}

/// The per-image training state threaded through one step.
struct ImageStep {
    raster: Raster,
    instances: Vec<Instance>,
    suggestions: Option<Vec<Option<RBox>>>,
    /// Per-image RNG seed (drawn up front so worker scheduling cannot
    /// affect the realized randomness).
    seed: u64,
}

/// Shared read-only state for one training step.
struct StepCtx<'a> {
    cfg: &'a TrainConfig,
    det: &'a Detector,
    subnet: Option<&'a P2rSubnet>,
    patterns: &'a BTreeMap<usize, BasicPattern>,
}

/// Per-image step output: loss contributions plus private gradient buffers.
struct StepOutput {
    accum: PartsAccum,
    det_grads: ParamArena,
    p2r_grads: Option<ParamArena>,
}

/// Aggregated loss parts over a batch (values summed; averaged later).
#[derive(Default)]
struct PartsAccum {
    cls: f64,
    cn: f64,
    bbox: f64,
    rot: f64,
    flp: f64,
    sca: f64,
    images: usize,
    positives: usize,
    p2r_cls: f64,
    p2r_box: f64,
}

impl PartsAccum {
    fn merge(&mut self, o: &PartsAccum) {
        self.cls += o.cls;
        self.cn += o.cn;
        self.bbox += o.bbox;
        self.rot += o.rot;
        self.flp += o.flp;
        self.sca += o.sca;
        self.images += o.images;
        self.positives += o.positives;
        self.p2r_cls += o.p2r_cls;
        self.p2r_box += o.p2r_box;
    }
}

/// Full detector pipeline for all supervision modes.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub classes: Vec<String>,
    pub detector: Detector,
    pub subnet: Option<P2rSubnet>,
    det_opt: Optimizer,
    p2r_opt: Option<Optimizer>,
    patterns: BTreeMap<usize, BasicPattern>,
    /// Per train image, per instance: current box suggestion.
    suggestions: Vec<Vec<Option<RBox>>>,
    rng_step: ChaCha8Rng,
    rng_order: ChaCha8Rng,
    pub warnings: usize,
}

/// Per-epoch metrics-log record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub cls: f64,
    pub cn: f64,
    pub bbox: f64,
    pub rot: f64,
    pub flp: f64,
    pub sca: f64,
    pub p2r_cls: f64,
    pub p2r_box: f64,
    pub total: f64,
    pub ap50: f64,
}

/// Result of a training run.
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    /// Exact serialized lines of the metrics log.
    pub metrics_lines: Vec<String>,
    pub final_ap50: f64,
    pub final_per_class: Vec<Option<f64>>,
    pub warnings: usize,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, data: &TrainData) -> Self {
        let needs_p2r = matches!(cfg.mode, TrainMode::Point | TrainMode::Mixed);
        let mcfg = ModelConfig {
            num_classes: data.classes.len(),
            channels: cfg.model.channels,
            fusion_scaling: cfg.model.fusion_scaling,
        };
        let detector = Detector::new(mcfg.clone(), cfg.seed.wrapping_add(11));
        let total_iters = (cfg.epochs
            * data.train.images.len().div_ceil(cfg.batch_size.max(1)))
            as u64;
        let decay_at = if cfg.lr_decay_frac > 0.0 {
            (total_iters as f64 * cfg.lr_decay_frac) as u64
        } else {
            0
        };
        let det_opt = Optimizer::new(
            detector.arena.len(),
            cfg.learning_rate,
            cfg.weight_decay,
            cfg.warmup_iters,
            decay_at,
        );
        let (subnet, p2r_opt) = if needs_p2r {
            let net = P2rSubnet::new(mcfg, cfg.seed.wrapping_add(13));
            let opt = Optimizer::new(
                net.arena.len(),
                cfg.learning_rate,
                cfg.weight_decay,
                cfg.warmup_iters,
                decay_at,
            );
            (Some(net), Some(opt))
        } else {
            (None, None)
        };
        let patterns = if needs_p2r {
            let scene = match &cfg.dataset {
                DatasetConfig::Synthetic { scene, .. } => scene.clone(),
                _ => SceneSpec::default(),
            };
            make_basic_patterns(&scene)
        } else {
            BTreeMap::new()
        };
        let suggestions = data
            .train
            .anns
            .images
            .iter()
            .map(|img| vec![None; img.instances.len()])
            .collect();
        Self {
            cfg: cfg.clone(),
            classes: data.classes.clone(),
            detector,
            subnet,
            det_opt,
            p2r_opt,
            patterns,
            suggestions,
            rng_step: stream(cfg.seed, 5),
            rng_order: stream(cfg.seed, 6),
            warnings: 0,
        }
    }

    /// One optimizer step over a batch of train images.
    fn train_batch(&mut self, data: &TrainData, indices: &[usize]) -> Result<StepStats, Error> {
        self.detector.arena.zero_grad();
        if let Some(net) = self.subnet.as_mut() {
            net.arena.zero_grad();
        }
        let mut accum = PartsAccum::default();

        let steps: Vec<ImageStep> = indices
            .iter()
            .map(|&idx| ImageStep {
                raster: data.train.images[idx].unpack(),
                instances: data.train.anns.images[idx].instances.clone(),
                suggestions: Some(self.suggestions[idx].clone()),
                seed: self.rng_step.random(),
            })
            .collect();
        let ctx = StepCtx {
            cfg: &self.cfg,
            det: &self.detector,
            subnet: self.subnet.as_ref(),
            patterns: &self.patterns,
        };
        let workers = self.cfg.workers.max(1).min(steps.len().max(1));
        let outputs: Vec<Result<StepOutput, Error>> = if workers <= 1 {
            steps.into_iter().map(|s| run_image_step(&ctx, s)).collect()
        } else {
            // Fixed round-robin partition; results are accumulated in input
            // order, so the reduction is deterministic for a given worker
            // count.
            let mut shards: Vec<Vec<ImageStep>> = (0..workers).map(|_| Vec::new()).collect();
            for (i, s) in steps.into_iter().enumerate() {
                shards[i % workers].push(s);
            }
            let mut results: Vec<Vec<Result<StepOutput, Error>>> = Vec::new();
            std::thread::scope(|scope| {
                let handles: Vec<_> = shards
                    .into_iter()
                    .map(|shard| {
                        let ctx = &ctx;
                        scope.spawn(move || {
                            shard
                                .into_iter()
                                .map(|s| run_image_step(ctx, s))
                                .collect::<Vec<_>>()
                        })
                    })
                    .collect();
                for h in handles {
                    results.push(h.join().expect("worker panicked"));
                }
            });
            // Restore input order from the round-robin shards.
            let mut flat: Vec<Option<Result<StepOutput, Error>>> = Vec::new();
            let total: usize = results.iter().map(|r| r.len()).sum();
            flat.resize_with(total, || None);
            for (w, shard) in results.into_iter().enumerate() {
                for (j, out) in shard.into_iter().enumerate() {
                    flat[w + j * workers] = Some(out);
                }
            }
            flat.into_iter().map(|o| o.expect("shard filled")).collect()
        };
        for out in outputs {
            let out = out?;
            accum.merge(&out.accum);
            self.detector.arena.accumulate_grad(&out.det_grads);
            if let (Some(net), Some(g)) = (self.subnet.as_mut(), out.p2r_grads.as_ref()) {
                net.arena.accumulate_grad(g);
            }
        }

        let n = accum.images.max(1) as f64;
        let parts = LossParts {
            cls: Some(accum.cls / n),
            cn: Some(accum.cn / n),
            bbox: Some(accum.bbox / n),
            rot: Some(accum.rot / n),
            flp: Some(accum.flp / n),
            sca: Some(accum.sca / n),
        };
        let mode = match (self.cfg.mode, self.cfg.view_mode) {
            (TrainMode::Hbox, _) => LossMode::HboxToRbox,
            (TrainMode::Point | TrainMode::Mixed, crate::viewgen::ViewMix::P2r) => {
                LossMode::PointToRbox
            }
            _ => LossMode::Unified,
        };
        let total = crate::losses::total_loss(&parts, mode, &self.cfg.weights)?
            + accum.p2r_cls / n
            + accum.p2r_box / n;
        if !total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at iter {}: {parts:?}",
                self.det_opt.iter
            )));
        }

        if accum.positives == 0 {
            // Nothing supervised this batch: skip the update.
            self.warnings += 1;
        } else {
            self.det_opt.step(&mut self.detector.arena);
            if let (Some(net), Some(opt)) = (self.subnet.as_mut(), self.p2r_opt.as_mut()) {
                opt.step(&mut net.arena);
            }
        }
        Ok(StepStats {
            parts,
            p2r_cls: accum.p2r_cls / n,
            p2r_box: accum.p2r_box / n,
            total,
            positives: accum.positives,
        })
    }

    #[cfg(test)]
    fn image_step_for_test(&mut self, step: ImageStep) -> Result<PartsAccum, Error> {
        let ctx = StepCtx {
            cfg: &self.cfg,
            det: &self.detector,
            subnet: self.subnet.as_ref(),
            patterns: &self.patterns,
        };
        let out = run_image_step(&ctx, step)?;
        self.detector.arena.accumulate_grad(&out.det_grads);
        if let (Some(net), Some(g)) = (self.subnet.as_mut(), out.p2r_grads.as_ref()) {
            net.arena.accumulate_grad(g);
        }
        Ok(out.accum)
    }
}

/// Forward/backward for a single image (both views plus the subnet);
/// gradients go into private arena clones so steps can run concurrently.
fn run_image_step(ctx: &StepCtx<'_>, step: ImageStep) -> Result<StepOutput, Error> {
    let cfg = ctx.cfg;
    let mut accum = PartsAccum::default();
    let accum = &mut accum;
    let rng = &mut ChaCha8Rng::seed_from_u64(step.seed);
    let (img_h, img_w) = (step.raster.h, step.raster.w);
    let mut det_grads = ctx.det.arena.clone();
    det_grads.zero_grad();
    let mut p2r_grads = ctx.subnet.map(|n| {
        let mut a = n.arena.clone();
        a.zero_grad();
        a
    });

    // Optional whole-frame random-rotation augmentation.
    let (base_raster, base_instances): (Raster, Vec<Instance>) = if cfg.random_rotation {
        let rr = ViewTransform::rotate(rng.random_range(0.0..std::f64::consts::PI), img_w, img_h);
        let anns = ImageAnnotations {
            name: String::new(),
            width: img_w,
            height: img_h,
            instances: step.instances.clone(),
        };
        let (r, a, keep) = apply_view(&step.raster, &anns, &rr);
            let kept: Vec<Instance> = a
                .instances
                .into_iter()
                .zip(&keep)
                .filter(|(_, k)| **k)
                .map(|(i, _)| i)
                .collect();
            (r, kept)
        } else {
            (step.raster.clone(), step.instances.clone())
        };

    // Pattern overlay for point-labeled instances.
    let needs_p2r = ctx.subnet.is_some();
        let point_labels: Vec<PointLabel> = base_instances
            .iter()
            .filter_map(|inst| match inst.label {
                Label::Point { x, y } => Some(PointLabel {
                    x,
                    y,
                    category: inst.category,
                }),
                _ => None,
            })
            .collect();
        let (image, synth) = if needs_p2r && !point_labels.is_empty() {
            let (img, synth) = crate::synth::overlay_patterns(
                &base_raster,
                &point_labels,
                ctx.patterns,
                rng,
            )?;
            (img, synth.into_iter().map(|s| (s.rbox, s.category)).collect())
        } else {
            (base_raster, Vec::<(RBox, usize)>::new())
        };

        // Ground truths for this step. Suggestions are indexed by the
        // original instance order; under random rotation the indices shift,
        // so suggestions are only consulted when the frame is unrotated.
        let suggestions = if cfg.random_rotation {
            None
        } else {
            step.suggestions.as_deref()
        };
        let gts = step_gts(&base_instances, suggestions, &synth);

        // Sample the multiplexed view and warp.
        let view = sample_view(cfg.view_mode, img_w, img_h, rng);
        let gt_anns = ImageAnnotations {
            name: String::new(),
            width: img_w,
            height: img_h,
            instances: gts
                .iter()
                .map(|g| Instance::rbox(g.rbox, g.class))
                .collect(),
        };
        let (view_img, view_anns, keep) = apply_view(&image, &gt_anns, &view);
        // Scale views may need padding up to the 128 granularity.
        let (view_img, vh, vw) = {
            let (h, w) = (view_img.h, view_img.w);
            let ph = h.div_ceil(128) * 128;
            let pw = w.div_ceil(128) * 128;
            if ph != h || pw != w {
                (view_img.pad_to(pw, ph), ph, pw)
            } else {
                (view_img, h, w)
            }
        };

        let x_orig = normalize_input(&image);
        let x_view = normalize_input(&view_img);
        let (pred_o, cache_o) = ctx.det.forward(&x_orig)?;
        let (pred_v, cache_v) = ctx.det.forward(&x_view)?;

        // Assignments in both frames (with nearest-location fallback).
        let geoms_o = level_geoms(img_h, img_w);
        let geoms_v = level_geoms(vh, vw);
        let gt_boxes_o: Vec<(RBox, usize)> = gts.iter().map(|g| (g.rbox, g.class)).collect();
        let m_flags: Vec<bool> = gts.iter().map(|g| g.m_box).collect();
        let mut asg_o = assign_fcos(&gt_boxes_o, &m_flags, &geoms_o, img_h, img_w);
        add_fallback_targets(&mut asg_o, &gts, &geoms_o, img_h, img_w);

        let gts_v: Vec<StepGt> = view_anns
            .instances
            .iter()
            .zip(&gts)
            .map(|(vi, g)| {
                let Label::Rbox(b) = vi.label else { unreachable!() };
                StepGt {
                    rbox: b,
                    class: g.class,
                    kind: g.kind,
                    box_supervised: false,
                    m_box: g.m_box,
                }
            })
            .collect();
        let gt_boxes_v: Vec<(RBox, usize)> = gts_v.iter().map(|g| (g.rbox, g.class)).collect();
        let mut asg_v = assign_fcos(&gt_boxes_v, &m_flags, &geoms_v, vh, vw);
        add_fallback_targets(&mut asg_v, &gts_v, &geoms_v, vh, vw);

        let mut grads_o = pred_o.zeros_like();
        let mut grads_v = pred_v.zeros_like();
        let w = &cfg.weights;

        // ---------------- self-supervised consistency ----------------
        let angles_o = object_angles(&asg_o, &pred_o, gts.len());
        let angles_v = object_angles(&asg_v, &pred_v, gts.len());
        let pairs = pair_views(&angles_o, &angles_v, &keep);
        let paired = PairedAngles {
            pairs: pairs.iter().map(|(o, v)| (o.theta, v.theta)).collect(),
        };

        match view.kind {
            ViewKind::Rotate => {
                let (ss, pair_grads) = loss_rot_grad(&paired, view.rot);
                accum.rot += ss.value;
                for ((oa, va), (g_o, g_v)) in pairs.iter().zip(&pair_grads) {
                    distribute_angle_grad(&mut grads_o, &pred_o, oa, g_o * w.mu_ss);
                    distribute_angle_grad(&mut grads_v, &pred_v, va, g_v * w.mu_ss);
                }
            }
            ViewKind::Flip => {
                let (ss, pair_grads) = loss_flp_grad(&paired);
                accum.flp += ss.value;
                let flip_w = match cfg.mode {
                    TrainMode::Hbox => w.lambda_flip,
                    _ => w.mu_flp,
                } * w.mu_ss;
                for ((oa, va), (g_o, g_v)) in pairs.iter().zip(&pair_grads) {
                    distribute_angle_grad(&mut grads_o, &pred_o, oa, g_o * flip_w);
                    distribute_angle_grad(&mut grads_v, &pred_v, va, g_v * flip_w);
                }
            }
            ViewKind::Scale => {
                // Pair decoded boxes at the best (highest-centerness)
                // location of each object in each view.
                let mut b_ori = Vec::new();
                let mut b_trs = Vec::new();
                let mut locs = Vec::new();
                for (oa, va) in &pairs {
                    let Some((lo, do_)) = best_decoded(&asg_o, &pred_o, oa.gt_index) else {
                        continue;
                    };
                    let Some((lv, dv)) = best_decoded(&asg_v, &pred_v, va.gt_index) else {
                        continue;
                    };
                    b_ori.push(do_.rbox);
                    b_trs.push(dv.rbox);
                    locs.push((lo, do_, lv, dv));
                }
                let (ss, pair_grads) = loss_sca_grad(&b_ori, &b_trs, view.scale);
                accum.sca += ss.value;
                for ((lo, do_, lv, dv), (go, gv)) in locs.iter().zip(pair_grads.iter()) {
                    let scale = w.mu_ss * w.mu_sca;
                    let (greg, gang) = backprop_box_main(do_, (*go).map(|g| g * scale));
                    write_box_grad(&mut grads_o, lo, greg, gang);
                    let (greg, gang) = backprop_box_main(dv, (*gv).map(|g| g * scale));
                    write_box_grad(&mut grads_v, lv, greg, gang);
                }
            }
        }

        // ---------------- weakly-supervised losses (original view) -----
        let num_pos = asg_o.positives.len();
        accum.positives += num_pos;

        // Classification.
        let mut pos_class: Vec<Vec<i32>> = pred_o
            .cls
            .iter()
            .map(|t| vec![-1; t.h * t.w])
            .collect();
        for t in &asg_o.positives {
            pos_class[t.level][t.y * pred_o.cls[t.level].w + t.x] = t.class as i32;
        }
        accum.cls += cls_loss_and_grad(&pred_o.cls, &pos_class, num_pos, &mut grads_o.cls, 1.0);

        // Centerness (positives only).
        if num_pos > 0 {
            let mut cn_sum = 0.0;
            for t in &asg_o.positives {
                let w_t = pred_o.cn[t.level].w;
                let logit = pred_o.cn[t.level].data[t.y * w_t + t.x] as f64;
                let (v, g) = bce_loss_grad(logit, t.centerness);
                cn_sum += v;
                grads_o.cn[t.level].data[t.y * w_t + t.x] +=
                    (g * w.mu_cn / num_pos as f64) as f32;
            }
            accum.cn += cn_sum / num_pos as f64;
        }

        // Box regression at supervised positives, centerness-weighted.
        let mut box_terms: Vec<((usize, usize, usize), crate::model::DecodedBox, [f64; 5], f64, BoxKind)> =
            Vec::new();
        let mut weight_sum = 0.0;
        let mut box_sum = 0.0;
        for t in &asg_o.positives {
            let g = &gts[t.gt_index];
            if !g.box_supervised {
                continue;
            }
            let stride = STRIDES[t.level];
            let (px, py) = loc_center(stride, t.x, t.y);
            let reg: [f32; 4] = core::array::from_fn(|i| pred_o.reg[t.level].at(i, t.y, t.x));
            let ang: [f32; 3] = core::array::from_fn(|j| pred_o.ang[t.level].at(j, t.y, t.x));
            let dec = decode_box_main(px, py, stride, reg, ang);
            let (v, gbox) = loss_box_ws_grad(&dec.rbox, &g.rbox, g.kind);
            let wt = t.centerness.max(1e-3);
            box_sum += wt * v;
            weight_sum += wt;
            box_terms.push(((t.level, t.y, t.x), dec, gbox, wt, g.kind));
        }
        if weight_sum > 0.0 {
            accum.bbox += box_sum / weight_sum;
            for (loc, dec, gbox, wt, kind) in box_terms {
                let scale = w.mu_box * wt / weight_sum;
                let (greg, mut gang) = backprop_box_main(&dec, gbox.map(|g| g * scale));
                if kind == BoxKind::Hbox {
                    // No box-target gradient reaches the angle head from
                    // hbox ground truth; orientation comes from consistency
                    // losses alone.
                    gang = [0.0; 3];
                }
                write_box_grad(&mut grads_o, &loc, greg, gang);
            }
        }

        ctx.det.backward_into(&mut det_grads, &cache_o, &grads_o);
        ctx.det.backward_into(&mut det_grads, &cache_v, &grads_v);

        // ---------------- point-to-rbox subnet ------------------------
        if let Some(net) = ctx.subnet {
            if !point_labels.is_empty() || !synth.is_empty() {
                let (pred2, cache2) = net.forward(&x_orig)?;
                let geom2 = LevelGeom {
                    stride: STRIDES[0],
                    h: pred2.cls.h,
                    w: pred2.cls.w,
                };
                let mut centers: Vec<(f64, f64, usize)> = point_labels
                    .iter()
                    .map(|p| (p.x, p.y, p.category))
                    .collect();
                let mut flags = vec![false; centers.len()];
                for (b, class) in &synth {
                    centers.push((b.cx, b.cy, *class));
                    flags.push(true);
                }
                let asg2 = assign_points_nearest(&centers, &flags, geom2);

                let mut g2 = P2rGrads {
                    cls: Tensor::zeros(pred2.cls.c, pred2.cls.h, pred2.cls.w),
                    reg: Tensor::zeros(pred2.reg.c, pred2.reg.h, pred2.reg.w),
                    ang: Tensor::zeros(pred2.ang.c, pred2.ang.h, pred2.ang.w),
                    gates: Tensor::zeros(pred2.gates.c, pred2.gates.h, pred2.gates.w),
                };
                let num_pos2 = asg2.positives.len();
                let mut pos_class2 = vec![vec![-1i32; pred2.cls.h * pred2.cls.w]];
                for t in &asg2.positives {
                    pos_class2[0][t.y * pred2.cls.w + t.x] = t.class as i32;
                }
                accum.p2r_cls += cls_loss_and_grad(
                    std::slice::from_ref(&pred2.cls),
                    &pos_class2,
                    num_pos2,
                    std::slice::from_mut(&mut g2.cls),
                    1.0,
                );

                // Box regression on synthetic-pattern positives only.
                let synth_pos: Vec<&AssignTarget> =
                    asg2.positives.iter().filter(|t| t.m_box).collect();
                if !synth_pos.is_empty() {
                    let norm = synth_pos.len() as f64;
                    for t in &synth_pos {
                        let (b, _) = synth[t.gt_index - point_labels.len()];
                        let (px, py) = loc_center(geom2.stride, t.x, t.y);
                        let reg: [f32; 4] = core::array::from_fn(|i| pred2.reg.at(i, t.y, t.x));
                        let ang: [f32; 3] = core::array::from_fn(|j| pred2.ang.at(j, t.y, t.x));
                        let (m, dm_dg) = gate_scale_factor(&pred2.gates, t.y, t.x);
                        let dec = decode_box_p2r(px, py, geom2.stride, reg, ang, m);
                        let (v, gbox) = crate::geom::riou_loss_grad(&dec.rbox, &b);
                        accum.p2r_box += v / norm;
                        let scale = w.mu_box / norm;
                        let (greg, gang, gm) =
                            backprop_box_p2r(&dec, reg, m, gbox.map(|g| g * scale));
                        for i in 0..4 {
                            *g2.reg.at_mut(i, t.y, t.x) += greg[i];
                        }
                        for j in 0..3 {
                            *g2.ang.at_mut(j, t.y, t.x) += gang[j];
                        }
                        // m-path gradient into the gates (clamped: the
                        // bin2dec phasor derivative blows up near uniform
                        // gates).
                        for l in 0..NUM_LEVELS {
                            let gv = (gm * dm_dg[l]).clamp(-50.0, 50.0);
                            *g2.gates.at_mut(l, t.y, t.x) += gv as f32;
                        }
                    }
                }
                accum.positives += num_pos2;
                net.backward_into(p2r_grads.as_mut().expect("subnet grads"), &cache2, &g2);
            }
        }

    accum.images += 1;
    let accum = std::mem::take(accum);
    Ok(StepOutput {
        accum,
        det_grads,
        p2r_grads,
    })
}

impl Trainer {

    /// Refresh per-point box suggestions from the current subnet (called
    /// once per epoch).
    fn refresh_suggestions(&mut self, data: &TrainData) -> Result<(), Error> {
        let Some(net) = self.subnet.as_ref() else {
            return Ok(());
        };
        for (idx, img_anns) in data.train.anns.images.iter().enumerate() {
            let has_points = img_anns
                .instances
                .iter()
                .any(|i| matches!(i.label, Label::Point { .. }));
            if !has_points {
                continue;
            }
            let raster = data.train.images[idx].unpack();
            let x = normalize_input(&raster);
            let (pred2, _) = net.forward(&x)?;
            let geom_w = pred2.cls.w;
            let geom_h = pred2.cls.h;
            for (ii, inst) in img_anns.instances.iter().enumerate() {
                let Label::Point { x: px, y: py } = inst.label else {
                    continue;
                };
                let gx = (px / 8.0 - 0.5).round().clamp(0.0, geom_w as f64 - 1.0) as usize;
                let gy = (py / 8.0 - 0.5).round().clamp(0.0, geom_h as f64 - 1.0) as usize;
                let reg: [f32; 4] = core::array::from_fn(|i| pred2.reg.at(i, gy, gx));
                let ang: [f32; 3] = core::array::from_fn(|j| pred2.ang.at(j, gy, gx));
                let (m, _) = gate_scale_factor(&pred2.gates, gy, gx);
                let (lx, ly) = loc_center(8, gx, gy);
                let dec = decode_box_p2r(lx, ly, 8, reg, ang, m);
                // The labeled point is the trusted center; the subnet
                // supplies size and angle.
                let sug = RBox::new(px, py, dec.rbox.w, dec.rbox.h, dec.rbox.theta).normalized();
                self.suggestions[idx][ii] = Some(sug);
            }
        }
        Ok(())
    }

    /// Full training loop; returns the report and keeps the trained nets.
    pub fn run(&mut self, data: &TrainData) -> Result<TrainReport, Error> {
        let n = data.train.images.len();
        let batch = self.cfg.batch_size.max(1);
        let mut metrics = Vec::new();
        let mut lines = Vec::new();

        for epoch in 0..self.cfg.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut self.rng_order);

            let mut sums = EpochMetrics {
                epoch: epoch + 1,
                cls: 0.0,
                cn: 0.0,
                bbox: 0.0,
                rot: 0.0,
                flp: 0.0,
                sca: 0.0,
                p2r_cls: 0.0,
                p2r_box: 0.0,
                total: 0.0,
                ap50: 0.0,
            };
            let mut steps = 0usize;
            for chunk in order.chunks(batch) {
                let stats = self.train_batch(data, chunk)?;
                sums.cls += stats.parts.cls.unwrap_or(0.0);
                sums.cn += stats.parts.cn.unwrap_or(0.0);
                sums.bbox += stats.parts.bbox.unwrap_or(0.0);
                sums.rot += stats.parts.rot.unwrap_or(0.0);
                sums.flp += stats.parts.flp.unwrap_or(0.0);
                sums.sca += stats.parts.sca.unwrap_or(0.0);
                sums.p2r_cls += stats.p2r_cls;
                sums.p2r_box += stats.p2r_box;
                sums.total += stats.total;
                let _ = stats.positives;
                steps += 1;
            }
            let k = steps.max(1) as f64;
            sums.cls /= k;
            sums.cn /= k;
            sums.bbox /= k;
            sums.rot /= k;
            sums.flp /= k;
            sums.sca /= k;
            sums.p2r_cls /= k;
            sums.p2r_box /= k;
            sums.total /= k;

            self.refresh_suggestions(data)?;

            let limit = if self.cfg.eval_images == 0 {
                data.test.images.len()
            } else {
                self.cfg.eval_images.min(data.test.images.len())
            };
            let rep = self.evaluate(data, limit)?;
            sums.ap50 = rep.mean;

            let line = serde_json::to_string(&sums).expect("metrics serialize");
            lines.push(line);
            metrics.push(sums);
        }

        let final_rep = self.evaluate(data, data.test.images.len())?;
        Ok(TrainReport {
            metrics,
            metrics_lines: lines,
            final_ap50: final_rep.mean,
            final_per_class: final_rep.per_class,
            warnings: self.warnings,
        })
    }

    /// AP50 of the current detector over the first `limit` test images.
    pub fn evaluate(&self, data: &TrainData, limit: usize) -> Result<ApReport, Error> {
        let limit = limit.min(data.test.images.len());
        let mut dets = Vec::with_capacity(limit);
        for i in 0..limit {
            let raster = data.test.images[i].unpack();
            let found = infer(
                &self.detector,
                &raster,
                self.cfg.score_thresh,
                self.cfg.nms_thresh,
            )?;
            dets.push(ImageDetections {
                name: data.test.anns.images[i].name.clone(),
                detections: found,
            });
        }
        let gts = AnnotationSet {
            classes: data.test.anns.classes.clone(),
            images: data.test.anns.images[..limit].to_vec(),
        };
        eval_ap50(&dets, &gts)
    }

    /// Size factor `m` at the nearest fused-map location of each test
    /// object, paired with the object's long side.
    pub fn object_scale_factors(&self, data: &TrainData) -> Result<Vec<(f64, f64)>, Error> {
        let Some(net) = self.subnet.as_ref() else {
            return Ok(Vec::new());
        };
        let mut out = Vec::new();
        for (img, anns) in data.test.images.iter().zip(&data.test.anns.images) {
            let x = normalize_input(&img.unpack());
            let (pred2, _) = net.forward(&x)?;
            for inst in &anns.instances {
                let Label::Rbox(b) = inst.label else { continue };
                let gx = (b.cx / 8.0 - 0.5)
                    .round()
                    .clamp(0.0, pred2.cls.w as f64 - 1.0) as usize;
                let gy = (b.cy / 8.0 - 0.5)
                    .round()
                    .clamp(0.0, pred2.cls.h as f64 - 1.0) as usize;
                let (m, _) = gate_scale_factor(&pred2.gates, gy, gx);
                out.push((b.normalized().w, m));
            }
        }
        Ok(out)
    }

    /// Save checkpoints and run metadata.
    pub fn save(&self, dir: &Path) -> Result<(), Error> {
        std::fs::create_dir_all(dir)?;
        self.detector.arena.save(&dir.join("checkpoint.bin"))?;
        if let Some(net) = &self.subnet {
            net.arena.save(&dir.join("checkpoint_p2r.bin"))?;
        }
        let meta = RunMeta {
            classes: self.classes.clone(),
            channels: self.cfg.model.channels,
            fusion_scaling: self.cfg.model.fusion_scaling,
            score_thresh: self.cfg.score_thresh,
            nms_thresh: self.cfg.nms_thresh,
        };
        std::fs::write(
            dir.join("model.toml"),
            toml::to_string_pretty(&meta).expect("meta serializes"),
        )?;
        Ok(())
    }
}

/// Run metadata stored next to checkpoints so inference can rebuild the
/// network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub classes: Vec<String>,
    pub channels: usize,
    pub fusion_scaling: bool,
    pub score_thresh: f64,
    pub nms_thresh: f64,
}

/// Load a detector from a checkpoint directory written by [`Trainer::save`].
pub fn load_detector(dir: &Path) -> Result<(Detector, RunMeta), Error> {
    let meta: RunMeta = toml::from_str(&std::fs::read_to_string(dir.join("model.toml"))?)
        .map_err(|e| Error::Data(format!("model.toml: {e}")))?;
    let mcfg = ModelConfig {
        num_classes: meta.classes.len(),
        channels: meta.channels,
        fusion_scaling: meta.fusion_scaling,
    };
    let mut det = Detector::new(mcfg, 0);
    det.arena.load_into(&dir.join("checkpoint.bin"))?;
    Ok((det, meta))
}

fn distribute_angle_grad(
    grads: &mut DensePrediction,
    _pred: &DensePrediction,
    oa: &ObjectAngle,
    dtheta: f64,
) {
    let Ok((_, ddecode)) = angle_decode_grad(&oa.mean_code) else {
        return;
    };
    let n = oa.locs.len() as f64;
    for &(lvl, y, x) in &oa.locs {
        for j in 0..3 {
            let g = dtheta * ddecode[j] / n;
            *grads.ang[lvl].at_mut(j, y, x) += g as f32;
        }
    }
}

fn write_box_grad(
    grads: &mut DensePrediction,
    loc: &(usize, usize, usize),
    greg: [f32; 4],
    gang: [f32; 3],
) {
    let &(lvl, y, x) = loc;
    for i in 0..4 {
        *grads.reg[lvl].at_mut(i, y, x) += greg[i];
    }
    for j in 0..3 {
        *grads.ang[lvl].at_mut(j, y, x) += gang[j];
    }
}

/// Highest-centerness positive of a ground truth, decoded.
fn best_decoded(
    asg: &AssignmentResult,
    pred: &DensePrediction,
    gt_index: usize,
) -> Option<((usize, usize, usize), crate::model::DecodedBox)> {
    let t = asg
        .positives
        .iter()
        .filter(|t| t.gt_index == gt_index)
        .max_by(|a, b| a.centerness.total_cmp(&b.centerness))?;
    let stride = STRIDES[t.level];
    let (px, py) = loc_center(stride, t.x, t.y);
    let reg: [f32; 4] = core::array::from_fn(|i| pred.reg[t.level].at(i, t.y, t.x));
    let ang: [f32; 3] = core::array::from_fn(|j| pred.ang[t.level].at(j, t.y, t.x));
    Some(((t.level, t.y, t.x), decode_box_main(px, py, stride, reg, ang)))
}

// -------------------------------------------------------------- inference

/// Decode dense predictions into scored detections: per-class score
/// threshold, then rotated NMS per class. No view generation is involved.
pub fn infer(
    det: &Detector,
    raster: &Raster,
    score_thresh: f64,
    nms_thresh: f64,
) -> Result<Vec<Detection>, Error> {
    let x = normalize_input(raster);
    let (pred, _) = det.forward(&x)?;
    let k = det.cfg.num_classes;
    let mut out = Vec::new();
    for class in 0..k {
        let mut candidates: Vec<(RBox, f64)> = Vec::new();
        for lvl in 0..NUM_LEVELS {
            let t = &pred.cls[lvl];
            let plane = t.h * t.w;
            for i in 0..plane {
                let cls_p = sigmoid(t.data[class * plane + i] as f64);
                let cn_p = sigmoid(pred.cn[lvl].data[i] as f64);
                let score = (cls_p * cn_p).sqrt();
                if score < score_thresh {
                    continue;
                }
                let (y, xisz) = (i / t.w, i % t.w);
                let stride = STRIDES[lvl];
                let (px, py) = loc_center(stride, xisz, y);
                let reg: [f32; 4] = core::array::from_fn(|c| pred.reg[lvl].at(c, y, xisz));
                let ang: [f32; 3] = core::array::from_fn(|c| pred.ang[lvl].at(c, y, xisz));
                let dec = decode_box_main(px, py, stride, reg, ang);
                candidates.push((dec.rbox.normalized(), score));
            }
        }
        let kept = rbox_nms(&candidates, nms_thresh);
        for i in kept {
            out.push(Detection {
                rbox: candidates[i].0,
                category: class,
                score: candidates[i].1,
            });
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(100);
    Ok(out)
}

/// Convenience: build data, train, optionally persist everything.
pub fn train(cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<(TrainReport, Trainer), Error> {
    let data = build_data(cfg)?;
    let mut trainer = Trainer::new(cfg, &data);
    let report = trainer.run(&data)?;
    if let Some(dir) = out_dir {
        trainer.save(dir)?;
        let mut log = String::new();
        for line in &report.metrics_lines {
            log.push_str(line);
            log.push('\n');
        }
        std::fs::write(dir.join("metrics.jsonl"), log)?;
    }
    Ok((report, trainer))
}

// ------------------------------------------------- symmetry recovery check

/// Angle-only network for the symmetry check: strided conv stages, one
/// stride-1 stage for receptive field, global average pooling, and a linear
/// map to the angle code.
struct AngleNet {
    arena: ParamArena,
    s1: (Conv2d, GroupNorm),
    s2: (Conv2d, GroupNorm),
    s3: (Conv2d, GroupNorm),
    s4: (Conv2d, GroupNorm),
    head: Conv2d,
}

struct AngleNetCache {
    x: Tensor,
    pre: [Tensor; 4],
    gn: [crate::nn::GnCache; 4],
    post: [Tensor; 4],
    head_in: Tensor,
    head_out: Tensor,
}

impl AngleNet {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut arena = ParamArena::new();
        let c1 = Conv2d::new(&mut arena, "a.s1", 3, 16, 3, 2, &mut rng);
        let g1 = GroupNorm::new(&mut arena, "a.s1.gn", 16, 4);
        let c2 = Conv2d::new(&mut arena, "a.s2", 16, 32, 3, 2, &mut rng);
        let g2 = GroupNorm::new(&mut arena, "a.s2.gn", 32, 8);
        let c3 = Conv2d::new(&mut arena, "a.s3", 32, 32, 3, 2, &mut rng);
        let g3 = GroupNorm::new(&mut arena, "a.s3.gn", 32, 8);
        let c4 = Conv2d::new(&mut arena, "a.s4", 32, 32, 3, 1, &mut rng);
        let g4 = GroupNorm::new(&mut arena, "a.s4.gn", 32, 8);
        // The head reads [features, features^2]: orientation modulo pi is a
        // second-harmonic quantity, which pooled first-order responses
        // cannot express but products of oriented responses can (structure
        // tensor).
        let head = Conv2d::new(&mut arena, "a.head", 64, 3, 1, 1, &mut rng);
        // Spread the initial predictions across angles: a constant predictor
        // is a balanced equilibrium of the folded consistency loss (gradient
        // contributions from rotations on either side of pi/2 cancel), so
        // the head starts wide, with a small angle-zero bias keeping the
        // decode phasor away from its singularity.
        let wr = arena.param_range(head.w);
        for v in &mut arena.data[wr] {
            *v *= 6.0;
        }
        let code = crate::anglecodec::angle_encode(0.0).channels;
        let r = arena.param_range(head.b);
        for (v, c) in arena.data[r].iter_mut().zip(code.iter()) {
            *v = 0.3 * *c as f32;
        }
        Self {
            arena,
            s1: (c1, g1),
            s2: (c2, g2),
            s3: (c3, g3),
            s4: (c4, g4),
            head,
        }
    }

    /// Returns the raw (pre-tanh) pooled angle code.
    fn forward(&self, x: &Tensor) -> ([f64; 3], AngleNetCache) {
        let run = |conv: &Conv2d, gn: &GroupNorm, x: &Tensor| {
            let pre = conv.forward(&self.arena, x);
            let (mut post, cache) = gn.forward(&self.arena, &pre);
            crate::nn::relu(&mut post);
            (pre, cache, post)
        };
        let (pre1, gn1, post1) = run(&self.s1.0, &self.s1.1, x);
        let (pre2, gn2, post2) = run(&self.s2.0, &self.s2.1, &post1);
        let (pre3, gn3, post3) = run(&self.s3.0, &self.s3.1, &post2);
        let (pre4, gn4, post4) = run(&self.s4.0, &self.s4.1, &post3);
        let mut head_in = Tensor::zeros(64, post4.h, post4.w);
        let plane_len = post4.h * post4.w;
        head_in.data[..32 * plane_len].copy_from_slice(&post4.data);
        for (dst, src) in head_in.data[32 * plane_len..]
            .iter_mut()
            .zip(&post4.data)
        {
            *dst = src * src;
        }
        let head_out = self.head.forward(&self.arena, &head_in);
        let plane = (head_out.h * head_out.w) as f64;
        let code: [f64; 3] = core::array::from_fn(|j| {
            head_out.plane(j).iter().map(|v| *v as f64).sum::<f64>() / plane
        });
        (
            code,
            AngleNetCache {
                x: x.clone(),
                pre: [pre1, pre2, pre3, pre4],
                gn: [gn1, gn2, gn3, gn4],
                post: [post1, post2, post3, post4],
                head_in,
                head_out,
            },
        )
    }

    fn backward(&mut self, cache: &AngleNetCache, gcode: [f64; 3]) {
        let plane = (cache.head_out.h * cache.head_out.w) as f64;
        let mut ghead = Tensor::zeros(3, cache.head_out.h, cache.head_out.w);
        for j in 0..3 {
            let g = (gcode[j] / plane) as f32;
            ghead.plane_mut(j).fill(g);
        }
        let gcat = self.head.backward(&mut self.arena, &cache.head_in, &ghead);
        // Split the concatenated gradient: d(x^2)/dx = 2x.
        let post4 = &cache.post[3];
        let plane_len = post4.h * post4.w;
        let mut g = Tensor::zeros(32, post4.h, post4.w);
        for i in 0..32 * plane_len {
            g.data[i] = gcat.data[i] + 2.0 * post4.data[i] * gcat.data[32 * plane_len + i];
        }
        for stage in (0..4).rev() {
            let (conv, gn) = match stage {
                0 => (&self.s1.0, &self.s1.1),
                1 => (&self.s2.0, &self.s2.1),
                2 => (&self.s3.0, &self.s3.1),
                _ => (&self.s4.0, &self.s4.1),
            };
            crate::nn::relu_backward(&cache.post[stage], &mut g);
            let gg = gn.backward(&mut self.arena, &cache.pre[stage], &cache.gn[stage], &g);
            let input = if stage == 0 { &cache.x } else { &cache.post[stage - 1] };
            g = conv.backward(&mut self.arena, input, &gg);
        }
    }
}

/// Outcome of the symmetry-recovery run.
#[derive(Debug, Clone, Serialize)]
pub struct SymmetryReport {
    /// Held-out angular errors, radians, folded mod pi/2.
    pub errors: Vec<f64>,
    /// Fraction of held-out objects below the error threshold.
    pub pass_fraction: f64,
    pub passed: bool,
    /// Mean training loss over consecutive tenths of the run.
    pub loss_trace: Vec<f64>,
    /// Same statistic for an untrained copy of the network (baseline).
    pub untrained_pass_fraction: f64,
}

/// Fold an angle difference into `(-pi/4, pi/4]` (minimum distance to any
/// quarter-turn multiple).
pub fn fold_quarter(d: f64) -> f64 {
    use std::f64::consts::FRAC_PI_2;
    let t = d - FRAC_PI_2 * (d / FRAC_PI_2).round();
    // round() ties keep |t| <= pi/4.
    t
}

/// Crops are cut from the center of a double-size canvas so that rotated
/// views never show reflection padding inside the crop; the background is
/// flat (no gradient) so the object is the only orientation signal. The
/// asymmetric control also drops the elongation cue (aspect near one),
/// leaving its construction angle genuinely unrecoverable.
fn sym_canvas_spec(cfg: &SymmetryConfig) -> SceneSpec {
    let (aspect_min, aspect_max) = if cfg.control { (1.0, 1.15) } else { (1.5, 3.0) };
    SceneSpec {
        image_size: cfg.crop * 2,
        families: vec![ShapeFamily::Disc, ShapeFamily::Slab, ShapeFamily::Dart],
        count_min: 1,
        count_max: 1,
        long_min: cfg.long_min,
        long_max: cfg.long_max,
        aspect_min,
        aspect_max,
        iou_max: 0.05,
        margin: 3.0,
        noise_std: 0.008,
        symmetric: !cfg.control,
        max_retries: 400,
        gradient_amp_max: 0.0,
        max_center_offset: Some(3.0),
    }
}

/// Generate one canvas and return it with its ground-truth angle.
fn sym_canvas<R: Rng>(spec: &SceneSpec, rng: &mut R) -> Result<(Raster, f64), Error> {
    let (img, anns) = crate::synth::gen_symmetric_scene(spec, "c", rng)?;
    let Label::Rbox(b) = anns.instances[0].label else {
        unreachable!()
    };
    Ok((img, b.theta))
}

/// Center crop of a canvas (crop size is half the canvas side).
fn center_crop(canvas: &Raster, crop: usize) -> Raster {
    let x0 = (canvas.w - crop) / 2;
    let y0 = (canvas.h - crop) / 2;
    canvas.crop(x0, y0, crop, crop)
}

/// Train an angle-only head with the consistency losses alone (no angle
/// ground truth is ever seen) and report the held-out distribution of
/// `min_k |theta_hat - theta - k pi/2|`.
pub fn verify_symmetry(cfg: &SymmetryConfig) -> Result<SymmetryReport, Error> {
    let spec = sym_canvas_spec(cfg);
    let mut rng_data = stream(cfg.seed, 21);
    // Fixed held-out pool; training canvases are generated on the fly so
    // the network can never memorize per-image noise.
    let holdout: Vec<(Raster, f64)> = (0..cfg.holdout_objects)
        .map(|_| {
            let (canvas, theta) = sym_canvas(&spec, &mut rng_data)?;
            Ok((center_crop(&canvas, cfg.crop), theta))
        })
        .collect::<Result<_, Error>>()?;

    let mut net = AngleNet::new(cfg.seed.wrapping_add(31));
    let untrained_pass_fraction = eval_anglenet(&net, &holdout, cfg).1;

    // Rate decay late in the run tightens the final angular precision.
    let decay_at = (cfg.steps as f64 * 0.75) as u64;
    let mut opt = Optimizer::new(net.arena.len(), cfg.learning_rate, 1e-4, 200, decay_at);
    let mut rng = stream(cfg.seed, 22);
    let mut losses = Vec::with_capacity(cfg.steps);
    // `train_objects` caps the number of distinct canvases drawn.
    let mut drawn = 0usize;

    for _ in 0..cfg.steps {
        net.arena.zero_grad();
        let mut step_loss = 0.0;
        for _ in 0..cfg.batch_size {
            let (canvas, _) = if drawn < cfg.train_objects {
                drawn += 1;
                sym_canvas(&spec, &mut rng)?
            } else {
                // Pool exhausted: draw again from a reseeded stream.
                sym_canvas(&spec, &mut rng)?
            };
            let view = sample_view(
                crate::viewgen::ViewMix::Unified,
                canvas.w,
                canvas.h,
                &mut rng,
            );
            let anns = ImageAnnotations {
                name: String::new(),
                width: canvas.w,
                height: canvas.h,
                instances: vec![],
            };
            let (canvas_v, _, _) = apply_view(&canvas, &anns, &view);
            let img = center_crop(&canvas, cfg.crop);
            let img_v = center_crop(&canvas_v, cfg.crop);

            let x_o = normalize_input(&img);
            let x_v = normalize_input(&img_v);
            let (code_o, cache_o) = net.forward(&x_o);
            let (code_v, cache_v) = net.forward(&x_v);
            let (Ok((th_o, dd_o)), Ok((th_v, dd_v))) =
                (angle_decode_grad(&code_o), angle_decode_grad(&code_v))
            else {
                continue;
            };

            let pairs = PairedAngles {
                pairs: vec![(th_o, th_v)],
            };
            let (loss, pg) = match view.kind {
                ViewKind::Rotate => loss_rot_grad(&pairs, view.rot),
                ViewKind::Flip => loss_flp_grad(&pairs),
                ViewKind::Scale => unreachable!("unified mix has no scale views"),
            };
            step_loss += loss.value;
            let (g_o, g_v) = pg[0];
            let scale = 1.0 / cfg.batch_size as f64;
            let gcode_o: [f64; 3] = core::array::from_fn(|j| g_o * dd_o[j] * scale);
            let gcode_v: [f64; 3] = core::array::from_fn(|j| g_v * dd_v[j] * scale);
            net.backward(&cache_o, gcode_o);
            net.backward(&cache_v, gcode_v);
        }
        losses.push(step_loss / cfg.batch_size as f64);
        opt.step(&mut net.arena);
    }

    let (errors, pass_fraction) = eval_anglenet(&net, &holdout, cfg);
    let passed = pass_fraction >= cfg.pass_fraction;

    // Compress the loss trace to ten averaged buckets.
    let bucket = (losses.len() / 10).max(1);
    let loss_trace: Vec<f64> = losses
        .chunks(bucket)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();

    Ok(SymmetryReport {
        errors,
        pass_fraction,
        passed,
        loss_trace,
        untrained_pass_fraction,
    })
}

/// Supervised sanity probe for the symmetry harness: fit the ground-truth
/// angles directly (no consistency) to validate the architecture.
#[doc(hidden)]
pub fn debug_sym_supervised(cfg: &SymmetryConfig) -> Result<(f64, Vec<f64>), Error> {
    let spec = sym_canvas_spec(cfg);
    let mut rng_data = stream(cfg.seed, 21);
    let holdout: Vec<(Raster, f64)> = (0..cfg.holdout_objects)
        .map(|_| {
            let (canvas, theta) = sym_canvas(&spec, &mut rng_data)?;
            Ok((center_crop(&canvas, cfg.crop), theta))
        })
        .collect::<Result<_, Error>>()?;
    let mut net = AngleNet::new(cfg.seed.wrapping_add(31));
    let mut opt = Optimizer::new(net.arena.len(), cfg.learning_rate, 1e-4, 200, 0);
    let mut rng = stream(cfg.seed, 22);
    let mut losses = Vec::new();
    for _ in 0..cfg.steps {
        net.arena.zero_grad();
        let mut step_loss = 0.0;
        for _ in 0..cfg.batch_size {
            let (canvas, theta_gt) = sym_canvas(&spec, &mut rng)?;
            let theta_gt = &theta_gt;
            let img = center_crop(&canvas, cfg.crop);
            let x = normalize_input(&img);
            let (code, cache) = net.forward(&x);
            let Ok((th, dd)) = angle_decode_grad(&code) else { continue };
            let (v, g) = crate::anglecodec::snap_loss_grad(th, *theta_gt);
            step_loss += v;
            let scale = 1.0 / cfg.batch_size as f64;
            let gcode: [f64; 3] = core::array::from_fn(|j| g * dd[j] * scale);
            net.backward(&cache, gcode);
        }
        losses.push(step_loss / cfg.batch_size as f64);
        opt.step(&mut net.arena);
    }
    let (_, pass) = eval_anglenet(&net, &holdout, cfg);
    let bucket = (losses.len() / 10).max(1);
    let trace: Vec<f64> = losses.chunks(bucket).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    Ok((pass, trace))
}

fn eval_anglenet(
    net: &AngleNet,
    holdout: &[(Raster, f64)],
    cfg: &SymmetryConfig,
) -> (Vec<f64>, f64) {
    let mut errors = Vec::with_capacity(holdout.len());
    for (img, theta_gt) in holdout {
        let x = normalize_input(img);
        let (code, _) = net.forward(&x);
        let theta = angle_decode_grad(&code).map(|(t, _)| t).unwrap_or(0.0);
        errors.push(fold_quarter(theta - theta_gt).abs());
    }
    let hits = errors.iter().filter(|e| **e < cfg.error_threshold).count();
    (errors, hits as f64 / holdout.len().max(1) as f64)
}
