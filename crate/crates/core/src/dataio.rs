//! Annotation I/O, label degradation and noise protocols, and AP evaluation.
//!
//! Two interchange formats are supported:
//! - `internal`: one TOML document per split with explicit label-kind tags;
//! - `dota_txt`: one text file per image, lines
//!   `x1 y1 x2 y2 x3 y3 x4 y4 class difficulty`, quads converted to rotated
//!   boxes on load.

use crate::geom::{self, min_area_rbox, r2h, rotated_iou, HBox, RBox};
use crate::Error;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// One annotation label: a point, a horizontal box, or a rotated box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Label {
    Point { x: f64, y: f64 },
    Hbox(HBox),
    Rbox(RBox),
}

impl Label {
    pub fn kind(&self) -> LabelKind {
        match self {
            Label::Point { .. } => LabelKind::Point,
            Label::Hbox(_) => LabelKind::Hbox,
            Label::Rbox(_) => LabelKind::Rbox,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        match self {
            Label::Point { x, y } => (*x, *y),
            Label::Hbox(h) => h.center(),
            Label::Rbox(b) => (b.cx, b.cy),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Point,
    Hbox,
    Rbox,
}

/// A labeled instance: label plus category id and difficulty flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub label: Label,
    pub category: usize,
    pub difficulty: u8,
    /// Height of the source box, retained through degradation so the point
    /// noise protocol (offsets scaled by object height) stays applicable.
    pub source_height: Option<f64>,
}

impl Instance {
    pub fn rbox(rbox: RBox, category: usize) -> Self {
        Self {
            label: Label::Rbox(rbox),
            category,
            difficulty: 0,
            source_height: None,
        }
    }
}

/// Annotations for a single image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageAnnotations {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub instances: Vec<Instance>,
}

/// Per-split annotation collection with its declared class list.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    pub classes: Vec<String>,
    pub images: Vec<ImageAnnotations>,
}

/// A scored rotated-box prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub rbox: RBox,
    pub category: usize,
    pub score: f64,
}

/// All detections for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDetections {
    pub name: String,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnFormat {
    DotaTxt,
    Internal,
}

/// Degradation target for [`degrade`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegradeTarget {
    Hbox,
    Point,
}

// ---------------------------------------------------------------- internal

#[derive(Serialize, Deserialize)]
struct FileRoot {
    format_version: u32,
    classes: Vec<String>,
    #[serde(default)]
    images: Vec<FileImage>,
}

#[derive(Serialize, Deserialize)]
struct FileImage {
    name: String,
    width: usize,
    height: usize,
    #[serde(default)]
    instances: Vec<FileInstance>,
}

#[derive(Serialize, Deserialize)]
struct FileInstance {
    kind: LabelKind,
    category: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    rbox: Option<[f64; 5]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    hbox: Option<[f64; 4]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    point: Option<[f64; 2]>,
    #[serde(default)]
    difficulty: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    source_height: Option<f64>,
}

fn class_index(classes: &[String], name: &str) -> Result<usize, Error> {
    classes
        .iter()
        .position(|c| c == name)
        .ok_or_else(|| Error::UnknownClass(name.to_string()))
}

fn load_internal(path: &Path) -> Result<AnnotationSet, Error> {
    let text = std::fs::read_to_string(path)?;
    let root: FileRoot = toml::from_str(&text).map_err(|e| Error::Parse {
        file: path.display().to_string(),
        line: 0,
        msg: e.to_string(),
    })?;
    let mut images = Vec::with_capacity(root.images.len());
    for img in root.images {
        let mut instances = Vec::with_capacity(img.instances.len());
        for inst in img.instances {
            let category = class_index(&root.classes, &inst.category)?;
            let label = match inst.kind {
                LabelKind::Rbox => {
                    let [cx, cy, w, h, th] = inst.rbox.ok_or_else(|| Error::Data(
                        format!("{}: rbox instance missing `rbox` field", img.name),
                    ))?;
                    Label::Rbox(RBox::new(cx, cy, w, h, th).normalized())
                }
                LabelKind::Hbox => {
                    let [x0, y0, x1, y1] = inst.hbox.ok_or_else(|| Error::Data(
                        format!("{}: hbox instance missing `hbox` field", img.name),
                    ))?;
                    Label::Hbox(HBox::new(x0, y0, x1, y1))
                }
                LabelKind::Point => {
                    let [x, y] = inst.point.ok_or_else(|| Error::Data(
                        format!("{}: point instance missing `point` field", img.name),
                    ))?;
                    Label::Point { x, y }
                }
            };
            instances.push(Instance {
                label,
                category,
                difficulty: inst.difficulty,
                source_height: inst.source_height,
            });
        }
        images.push(ImageAnnotations {
            name: img.name,
            width: img.width,
            height: img.height,
            instances,
        });
    }
    Ok(AnnotationSet {
        classes: root.classes,
        images,
    })
}

fn save_internal(set: &AnnotationSet, path: &Path) -> Result<(), Error> {
    let root = FileRoot {
        format_version: 1,
        classes: set.classes.clone(),
        images: set
            .images
            .iter()
            .map(|img| FileImage {
                name: img.name.clone(),
                width: img.width,
                height: img.height,
                instances: img
                    .instances
                    .iter()
                    .map(|inst| {
                        let (rbox, hbox, point) = match inst.label {
                            Label::Rbox(b) => (Some([b.cx, b.cy, b.w, b.h, b.theta]), None, None),
                            Label::Hbox(h) => {
                                (None, Some([h.xmin, h.ymin, h.xmax, h.ymax]), None)
                            }
                            Label::Point { x, y } => (None, None, Some([x, y])),
                        };
                        FileInstance {
                            kind: inst.label.kind(),
                            category: set.classes[inst.category].clone(),
                            rbox,
                            hbox,
                            point,
                            difficulty: inst.difficulty,
                            source_height: inst.source_height,
                        }
                    })
                    .collect(),
            })
            .collect(),
    };
    let text = toml::to_string(&root).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------- dota_txt

fn load_dota(dir: &Path, classes: &[String]) -> Result<AnnotationSet, Error> {
    let mut names: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    names.sort();
    let mut images = Vec::new();
    for file in names {
        let stem = file
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let text = std::fs::read_to_string(&file)?;
        let mut instances = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with("imagesource") || line.starts_with("gsd") {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() < 10 {
                return Err(Error::Parse {
                    file: file.display().to_string(),
                    line: lineno + 1,
                    msg: format!("expected 10 fields, got {}", toks.len()),
                });
            }
            let mut quad = [[0.0f64; 2]; 4];
            for i in 0..8 {
                quad[i / 2][i % 2] = toks[i].parse().map_err(|_| Error::Parse {
                    file: file.display().to_string(),
                    line: lineno + 1,
                    msg: format!("bad coordinate `{}`", toks[i]),
                })?;
            }
            let category = class_index(classes, toks[8])?;
            let difficulty: u8 = toks[9].parse().map_err(|_| Error::Parse {
                file: file.display().to_string(),
                line: lineno + 1,
                msg: format!("bad difficulty `{}`", toks[9]),
            })?;
            let rbox = min_area_rbox(&quad)?;
            instances.push(Instance {
                label: Label::Rbox(rbox),
                category,
                difficulty,
                source_height: None,
            });
        }
        images.push(ImageAnnotations {
            name: stem,
            width: 0,
            height: 0,
            instances,
        });
    }
    Ok(AnnotationSet {
        classes: classes.to_vec(),
        images,
    })
}

fn save_dota(set: &AnnotationSet, dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    for img in &set.images {
        let mut out = String::new();
        for inst in &img.instances {
            let b = match inst.label {
                Label::Rbox(b) => b,
                Label::Hbox(h) => h.to_rbox(),
                Label::Point { .. } => {
                    return Err(Error::Data(
                        "dota_txt cannot represent point labels; use the internal format"
                            .to_string(),
                    ))
                }
            };
            let cs = b.corners();
            for c in &cs {
                out.push_str(&format!("{:.2} {:.2} ", c[0], c[1]));
            }
            out.push_str(&format!(
                "{} {}\n",
                set.classes[inst.category], inst.difficulty
            ));
        }
        std::fs::write(dir.join(format!("{}.txt", img.name)), out)?;
    }
    Ok(())
}

/// Load an annotation set. For `dota_txt`, `path` is a directory of per-image
/// text files and `classes` must list the valid categories; for `internal`,
/// `path` is a single TOML document carrying its own class list.
pub fn load_annotations(
    path: &Path,
    format: AnnFormat,
    classes: Option<&[String]>,
) -> Result<AnnotationSet, Error> {
    match format {
        AnnFormat::Internal => load_internal(path),
        AnnFormat::DotaTxt => {
            let classes = classes.ok_or_else(|| {
                Error::Config("dota_txt loading requires a class list".to_string())
            })?;
            load_dota(path, classes)
        }
    }
}

pub fn save_annotations(set: &AnnotationSet, path: &Path, format: AnnFormat) -> Result<(), Error> {
    match format {
        AnnFormat::Internal => save_internal(set, path),
        AnnFormat::DotaTxt => save_dota(set, path),
    }
}

// ------------------------------------------------------------- degradation

/// Degrade rotated-box annotations to horizontal boxes or center points.
/// Already-degraded labels at the target level pass through unchanged.
pub fn degrade(set: &AnnotationSet, target: DegradeTarget) -> Result<AnnotationSet, Error> {
    let mut out = set.clone();
    for img in out.images.iter_mut() {
        for inst in img.instances.iter_mut() {
            match (target, inst.label) {
                (DegradeTarget::Hbox, Label::Rbox(b)) => {
                    inst.source_height = Some(b.normalized().h);
                    inst.label = Label::Hbox(r2h(&b));
                }
                (DegradeTarget::Hbox, Label::Hbox(_)) => {}
                (DegradeTarget::Hbox, Label::Point { .. }) => {
                    return Err(Error::Data(
                        "cannot degrade point labels to hbox".to_string(),
                    ))
                }
                (DegradeTarget::Point, Label::Rbox(b)) => {
                    inst.source_height = Some(b.normalized().h);
                    inst.label = Label::Point { x: b.cx, y: b.cy };
                }
                (DegradeTarget::Point, Label::Hbox(h)) => {
                    inst.source_height = Some(h.height());
                    let (x, y) = h.center();
                    inst.label = Label::Point { x, y };
                }
                (DegradeTarget::Point, Label::Point { .. }) => {}
            }
        }
    }
    Ok(out)
}

/// Apply the annotation-noise protocol to one instance: horizontal boxes
/// get width/height scaled independently by `U(1-sigma, 1+sigma)`; points
/// get each coordinate offset by `U(-sigma*H, sigma*H)` with `H` the source
/// object height. Rotated boxes are rejected.
pub fn noise_instance<R: Rng>(inst: &mut Instance, sigma: f64, rng: &mut R) -> Result<(), Error> {
    match &mut inst.label {
        Label::Rbox(_) => return Err(Error::NoiseOnRbox),
        Label::Hbox(h) => {
            let (cx, cy) = h.center();
            let w = h.width() * rng.random_range(1.0 - sigma..1.0 + sigma);
            let hh = h.height() * rng.random_range(1.0 - sigma..1.0 + sigma);
            *h = HBox::new(cx - w / 2.0, cy - hh / 2.0, cx + w / 2.0, cy + hh / 2.0);
        }
        Label::Point { x, y } => {
            let height = inst.source_height.ok_or_else(|| {
                Error::Data(
                    "point noise needs the source object height; degrade from boxes first"
                        .to_string(),
                )
            })?;
            *x += rng.random_range(-sigma * height..sigma * height);
            *y += rng.random_range(-sigma * height..sigma * height);
        }
    }
    Ok(())
}

/// [`noise_instance`] over a whole annotation set.
pub fn inject_noise<R: Rng>(
    set: &AnnotationSet,
    sigma: f64,
    rng: &mut R,
) -> Result<AnnotationSet, Error> {
    assert!((0.0..1.0).contains(&sigma), "sigma in [0, 1)");
    if sigma == 0.0 {
        return Ok(set.clone());
    }
    let mut out = set.clone();
    for img in out.images.iter_mut() {
        for inst in img.instances.iter_mut() {
            noise_instance(inst, sigma, rng)?;
        }
    }
    Ok(out)
}

// -------------------------------------------------------------- evaluation

/// Per-class AP plus the mean over classes with at least one ground truth.
#[derive(Debug, Clone)]
pub struct ApReport {
    /// AP per class; `None` for classes with zero ground-truth instances.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

fn gt_rbox(label: &Label) -> Result<RBox, Error> {
    match label {
        Label::Rbox(b) => Ok(*b),
        Label::Hbox(h) => Ok(h.to_rbox()),
        Label::Point { .. } => Err(Error::Data(
            "AP evaluation needs box ground truth, got point labels".to_string(),
        )),
    }
}

/// Average precision at a rotated-IoU threshold (all-point interpolation).
///
/// Score-ranked greedy matching, each ground truth matched at most once;
/// ties broken by input order. Difficult ground truths are excluded from
/// both matching credit and the positive count.
pub fn eval_ap(
    dets: &[ImageDetections],
    gts: &AnnotationSet,
    iou_thresh: f64,
) -> Result<ApReport, Error> {
    let k = gts.classes.len();
    let gt_by_name: BTreeMap<&str, &ImageAnnotations> = gts
        .images
        .iter()
        .map(|img| (img.name.as_str(), img))
        .collect();

    let mut per_class = Vec::with_capacity(k);
    for class in 0..k {
        // (image name, rbox, difficult)
        let mut npos = 0usize;
        let mut gt_boxes: BTreeMap<&str, Vec<(RBox, bool, bool)>> = BTreeMap::new();
        for img in &gts.images {
            let list: Vec<(RBox, bool, bool)> = img
                .instances
                .iter()
                .filter(|i| i.category == class)
                .map(|i| Ok((gt_rbox(&i.label)?, i.difficulty != 0, false)))
                .collect::<Result<_, Error>>()?;
            npos += list.iter().filter(|(_, diff, _)| !diff).count();
            gt_boxes.insert(img.name.as_str(), list);
        }
        if npos == 0 {
            per_class.push(None);
            continue;
        }

        let mut ranked: Vec<(usize, f64, &str, &RBox)> = Vec::new();
        for img in dets {
            for d in &img.detections {
                if d.category == class {
                    ranked.push((ranked.len(), d.score, img.name.as_str(), &d.rbox));
                }
            }
        }
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

        let mut tp = Vec::with_capacity(ranked.len());
        let mut fp = Vec::with_capacity(ranked.len());
        for (_, _, name, rbox) in &ranked {
            if !gt_by_name.contains_key(name) {
                tp.push(0u32);
                fp.push(1u32);
                continue;
            }
            let candidates = gt_boxes.get_mut(name).unwrap();
            let mut best: Option<(usize, f64)> = None;
            let mut best_diff: Option<(usize, f64)> = None;
            for (gi, (g, difficult, matched)) in candidates.iter().enumerate() {
                let iou = rotated_iou(rbox, g);
                if iou < iou_thresh {
                    continue;
                }
                if *difficult {
                    if best_diff.is_none_or(|(_, bi)| iou > bi) {
                        best_diff = Some((gi, iou));
                    }
                } else if !matched && best.is_none_or(|(_, bi)| iou > bi) {
                    best = Some((gi, iou));
                }
            }
            match (best, best_diff) {
                (Some((gi, _)), _) => {
                    candidates[gi].2 = true;
                    tp.push(1);
                    fp.push(0);
                }
                // Overlaps only a difficult ground truth: ignored.
                (None, Some(_)) => {
                    tp.push(0);
                    fp.push(0);
                }
                (None, None) => {
                    tp.push(0);
                    fp.push(1);
                }
            }
        }

        let mut tp_cum = 0u32;
        let mut fp_cum = 0u32;
        let mut recall = Vec::with_capacity(tp.len());
        let mut precision = Vec::with_capacity(tp.len());
        for i in 0..tp.len() {
            tp_cum += tp[i];
            fp_cum += fp[i];
            if tp[i] == 0 && fp[i] == 0 {
                continue; // ignored detection: no PR point
            }
            recall.push(tp_cum as f64 / npos as f64);
            precision.push(tp_cum as f64 / (tp_cum + fp_cum) as f64);
        }
        // Monotone precision envelope, then area under PR.
        for i in (0..precision.len().saturating_sub(1)).rev() {
            precision[i] = precision[i].max(precision[i + 1]);
        }
        let mut ap = 0.0;
        let mut prev_r = 0.0;
        for i in 0..recall.len() {
            ap += (recall[i] - prev_r) * precision[i];
            prev_r = recall[i];
        }
        per_class.push(Some(ap));
    }

    let evaluated: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if evaluated.is_empty() {
        0.0
    } else {
        evaluated.iter().sum::<f64>() / evaluated.len() as f64
    };
    Ok(ApReport { per_class, mean })
}

/// AP at the standard 50% rotated-IoU threshold.
pub fn eval_ap50(dets: &[ImageDetections], gts: &AnnotationSet) -> Result<ApReport, Error> {
    eval_ap(dets, gts, 0.5)
}

// ------------------------------------------------- detection files (DOTA)

/// Write detections as per-class text files `Task1_<class>.txt` with lines
/// `image score x1 y1 x2 y2 x3 y3 x4 y4`.
pub fn write_detections(
    dets: &[ImageDetections],
    classes: &[String],
    dir: &Path,
) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    for (ci, class) in classes.iter().enumerate() {
        let mut out = String::new();
        for img in dets {
            for d in img.detections.iter().filter(|d| d.category == ci) {
                out.push_str(&format!("{} {:.6}", img.name, d.score));
                for c in d.rbox.corners() {
                    out.push_str(&format!(" {:.2} {:.2}", c[0], c[1]));
                }
                out.push('\n');
            }
        }
        std::fs::write(dir.join(format!("Task1_{class}.txt")), out)?;
    }
    Ok(())
}

/// Read detections written by [`write_detections`].
pub fn read_detections(dir: &Path, classes: &[String]) -> Result<Vec<ImageDetections>, Error> {
    let mut by_image: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for (ci, class) in classes.iter().enumerate() {
        let path = dir.join(format!("Task1_{class}.txt"));
        if !path.exists() {
            continue;
        }
        let text = std::fs::read_to_string(&path)?;
        for (lineno, line) in text.lines().enumerate() {
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.is_empty() {
                continue;
            }
            if toks.len() != 10 {
                return Err(Error::Parse {
                    file: path.display().to_string(),
                    line: lineno + 1,
                    msg: format!("expected 10 fields, got {}", toks.len()),
                });
            }
            let parse = |s: &str| -> Result<f64, Error> {
                s.parse().map_err(|_| Error::Parse {
                    file: path.display().to_string(),
                    line: lineno + 1,
                    msg: format!("bad number `{s}`"),
                })
            };
            let score = parse(toks[1])?;
            let mut quad = [[0.0; 2]; 4];
            for i in 0..8 {
                quad[i / 2][i % 2] = parse(toks[2 + i])?;
            }
            let rbox = min_area_rbox(&quad)?;
            by_image.entry(toks[0].to_string()).or_default().push(Detection {
                rbox,
                category: ci,
                score,
            });
        }
    }
    Ok(by_image
        .into_iter()
        .map(|(name, detections)| ImageDetections { name, detections })
        .collect())
}

/// Convenience: all instances of an image as rotated boxes (for training and
/// view mapping). Errors if a non-rbox label is encountered.
pub fn instances_as_rboxes(img: &ImageAnnotations) -> Result<Vec<(RBox, usize)>, Error> {
    img.instances
        .iter()
        .map(|i| match i.label {
            Label::Rbox(b) => Ok((b, i.category)),
            _ => Err(Error::Data("expected rbox labels".to_string())),
        })
        .collect()
}

pub use geom::fold_half_open;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_set() -> AnnotationSet {
        AnnotationSet {
            classes: vec!["disc".into(), "slab".into()],
            images: vec![ImageAnnotations {
                name: "img_0".into(),
                width: 128,
                height: 128,
                instances: vec![
                    Instance::rbox(RBox::new(40.0, 40.0, 30.0, 12.0, 0.5), 0),
                    Instance::rbox(RBox::new(90.0, 80.0, 24.0, 10.0, -0.8), 1),
                ],
            }],
        }
    }

    #[test]
    fn internal_roundtrip() {
        let dir = std::env::temp_dir().join("rotodet_dataio_internal");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("anns.toml");
        let set = sample_set();
        save_annotations(&set, &path, AnnFormat::Internal).unwrap();
        let loaded = load_annotations(&path, AnnFormat::Internal, None).unwrap();
        assert_eq!(loaded.classes, set.classes);
        for (a, b) in loaded.images[0]
            .instances
            .iter()
            .zip(&set.images[0].instances)
        {
            let (Label::Rbox(x), Label::Rbox(y)) = (&a.label, &b.label) else {
                panic!("labels changed kind");
            };
            assert!((x.cx - y.cx).abs() < 1e-6 && (x.theta - y.theta).abs() < 1e-6);
        }
    }

    #[test]
    fn dota_roundtrip_and_quad_conversion() {
        let dir = std::env::temp_dir().join("rotodet_dataio_dota");
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();

        // Axis-aligned quad -> theta = 0.
        std::fs::write(
            dir.join("img_a.txt"),
            "10 10 50 10 50 30 10 30 disc 0\n",
        )
        .unwrap();
        let classes = vec!["disc".to_string()];
        let set = load_annotations(&dir, AnnFormat::DotaTxt, Some(&classes)).unwrap();
        let Label::Rbox(b) = set.images[0].instances[0].label else {
            panic!()
        };
        assert!((b.cx - 30.0).abs() < 1e-9 && (b.cy - 20.0).abs() < 1e-9);
        assert!((b.w - 40.0).abs() < 1e-9 && (b.h - 20.0).abs() < 1e-9);
        assert!(b.theta.abs() < 1e-9);

        // Rotated quad matches the min-area oracle after a save/load cycle.
        let rb = RBox::new(60.0, 60.0, 40.0, 16.0, 0.6);
        let set2 = AnnotationSet {
            classes: classes.clone(),
            images: vec![ImageAnnotations {
                name: "img_b".into(),
                width: 0,
                height: 0,
                instances: vec![Instance::rbox(rb, 0)],
            }],
        };
        let out = dir.join("round");
        save_annotations(&set2, &out, AnnFormat::DotaTxt).unwrap();
        let back = load_annotations(&out, AnnFormat::DotaTxt, Some(&classes)).unwrap();
        let Label::Rbox(rb2) = back.images[0].instances[0].label else {
            panic!()
        };
        let oracle = min_area_rbox(&rb.corners()).unwrap();
        assert!((rb2.cx - oracle.cx).abs() < 0.05 && (rb2.w - oracle.w).abs() < 0.05);

        // Unknown class is rejected by name.
        std::fs::write(dir.join("img_a.txt"), "0 0 1 0 1 1 0 1 ufo 0\n").unwrap();
        match load_annotations(&dir, AnnFormat::DotaTxt, Some(&classes)) {
            Err(Error::UnknownClass(name)) => assert_eq!(name, "ufo"),
            other => panic!("expected unknown-class error, got {other:?}"),
        }
    }

    #[test]
    fn degrade_cases() {
        let mut set = sample_set();
        set.images[0].instances[0] =
            Instance::rbox(RBox::new(40.0, 40.0, 20.0, 20.0, 0.0), 0);

        let hb = degrade(&set, DegradeTarget::Hbox).unwrap();
        let Label::Hbox(h) = hb.images[0].instances[0].label else {
            panic!()
        };
        assert_eq!(h, HBox::new(30.0, 30.0, 50.0, 50.0));

        let pt = degrade(&set, DegradeTarget::Point).unwrap();
        let Label::Point { x, y } = pt.images[0].instances[0].label else {
            panic!()
        };
        assert_eq!((x, y), (40.0, 40.0));

        // Idempotent on already-degraded sets.
        assert_eq!(degrade(&pt, DegradeTarget::Point).unwrap(), pt);
    }

    #[test]
    fn noise_protocol() {
        let set = sample_set();
        let mut rng = ChaCha8Rng::seed_from_u64(3);

        // Sigma on rbox labels is rejected.
        assert!(matches!(
            inject_noise(&set, 0.3, &mut rng),
            Err(Error::NoiseOnRbox)
        ));

        let hb = degrade(&set, DegradeTarget::Hbox).unwrap();
        assert_eq!(inject_noise(&hb, 0.0, &mut rng).unwrap(), hb);

        // Scaled widths stay inside [0.7, 1.3] x original, and the mean
        // scale over many draws is ~1.
        let Label::Hbox(h0) = hb.images[0].instances[0].label else {
            panic!()
        };
        let mut sum = 0.0;
        let n = 100_000;
        for _ in 0..n {
            let noisy = inject_noise(&hb, 0.3, &mut rng).unwrap();
            let Label::Hbox(h) = noisy.images[0].instances[0].label else {
                panic!()
            };
            let ratio = h.width() / h0.width();
            assert!((0.7..=1.3).contains(&ratio));
            sum += ratio;
        }
        assert!((sum / n as f64 - 1.0).abs() < 0.01);

        // Point offsets bounded by sigma * source height.
        let pt = degrade(&set, DegradeTarget::Point).unwrap();
        let Label::Point { x: x0, y: y0 } = pt.images[0].instances[0].label else {
            panic!()
        };
        let src_h = pt.images[0].instances[0].source_height.unwrap();
        for _ in 0..1000 {
            let noisy = inject_noise(&pt, 0.3, &mut rng).unwrap();
            let Label::Point { x, y } = noisy.images[0].instances[0].label else {
                panic!()
            };
            assert!((x - x0).abs() <= 0.3 * src_h && (y - y0).abs() <= 0.3 * src_h);
        }
    }

    #[test]
    fn ap_trivial_cases() {
        let set = sample_set();
        let dets: Vec<ImageDetections> = set
            .images
            .iter()
            .map(|img| ImageDetections {
                name: img.name.clone(),
                detections: img
                    .instances
                    .iter()
                    .map(|i| {
                        let Label::Rbox(b) = i.label else { panic!() };
                        Detection {
                            rbox: b,
                            category: i.category,
                            score: 1.0,
                        }
                    })
                    .collect(),
            })
            .collect();
        let rep = eval_ap50(&dets, &set).unwrap();
        assert_eq!(rep.mean, 1.0);

        let empty = vec![ImageDetections {
            name: "img_0".into(),
            detections: vec![],
        }];
        let rep = eval_ap50(&empty, &set).unwrap();
        assert_eq!(rep.mean, 0.0);
    }

    #[test]
    fn ap_hand_case() {
        // 2 ground truths, 3 detections: TP(0.9), FP(0.8), TP(0.7).
        // PR points: (0.5, 1), (0.5, 1/2), (1, 2/3); all-point AP = 5/6.
        let gt = AnnotationSet {
            classes: vec!["disc".into()],
            images: vec![ImageAnnotations {
                name: "img".into(),
                width: 200,
                height: 200,
                instances: vec![
                    Instance::rbox(RBox::new(30.0, 30.0, 20.0, 10.0, 0.3), 0),
                    Instance::rbox(RBox::new(120.0, 120.0, 24.0, 12.0, -0.4), 0),
                ],
            }],
        };
        let dets = vec![ImageDetections {
            name: "img".into(),
            detections: vec![
                Detection {
                    rbox: RBox::new(30.0, 30.0, 20.0, 10.0, 0.3),
                    category: 0,
                    score: 0.9,
                },
                Detection {
                    rbox: RBox::new(70.0, 70.0, 20.0, 10.0, 0.0),
                    category: 0,
                    score: 0.8,
                },
                Detection {
                    rbox: RBox::new(120.0, 120.0, 24.0, 12.0, -0.4),
                    category: 0,
                    score: 0.7,
                },
            ],
        }];
        let rep = eval_ap50(&dets, &gt).unwrap();
        assert!((rep.mean - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn ap_order_invariant_at_equal_scores() {
        let gt = sample_set();
        let mk = |order: [usize; 2]| {
            let boxes = [
                RBox::new(40.0, 40.0, 30.0, 12.0, 0.5),
                RBox::new(90.0, 80.0, 24.0, 10.0, -0.8),
            ];
            let cats = [0usize, 1usize];
            vec![ImageDetections {
                name: "img_0".into(),
                detections: order
                    .iter()
                    .map(|&i| Detection {
                        rbox: boxes[i],
                        category: cats[i],
                        score: 0.5,
                    })
                    .collect(),
            }]
        };
        let a = eval_ap50(&mk([0, 1]), &gt).unwrap();
        let b = eval_ap50(&mk([1, 0]), &gt).unwrap();
        assert_eq!(a.mean, b.mean);
    }

    #[test]
    fn zero_gt_class_excluded_from_mean() {
        let mut set = sample_set();
        set.classes.push("ghost".into());
        let dets = vec![ImageDetections {
            name: "img_0".into(),
            detections: vec![Detection {
                rbox: RBox::new(40.0, 40.0, 30.0, 12.0, 0.5),
                category: 0,
                score: 0.9,
            }],
        }];
        let rep = eval_ap50(&dets, &set).unwrap();
        assert!(rep.per_class[2].is_none());
        assert!((rep.mean - 0.5).abs() < 1e-12); // (1.0 + 0.0) / 2 evaluated classes
    }
}
