//! Oriented object detection trainable from weak labels.
//!
//! This crate implements a small, fully testable oriented-object detector
//! that accepts any mix of annotation formats — single points, horizontal
//! boxes, rotated boxes — and always predicts rotated boxes. Orientation is
//! learned without angle ground truth through consistency losses across
//! flipped/rotated views (objects with a reflection symmetry axis provably
//! pin the output angle modulo a quarter turn), while box extents are
//! learned from circumscribed-IoU against horizontal boxes or, for point
//! labels, from synthetic patterns with known boxes blended into the
//! training images plus the suggestions of a dedicated point-to-rbox subnet.
//!
//! Module map:
//! - [`geom`] — rotated-box geometry: IoU by polygon clipping, circumscribed
//!   projection, min-area rectangles, NMS; analytic gradients throughout.
//! - [`anglecodec`] — phase-based angle coding, snap loss, and the
//!   continuous gate-vector decoder used for fusion-and-scaling.
//! - [`viewgen`] — flip/rotate/scale view generation with reflection padding.
//! - [`synth`] — synthetic pattern overlay and the procedural symmetric-scene
//!   dataset used by the test suites.
//! - [`losses`] — consistency, box, classification, and centerness losses
//!   plus the per-pipeline compositions.
//! - [`nn`] — minimal CPU tensor/conv/optimizer kit the detector is built on.
//! - [`model`] — backbone, pyramid heads, gated fusion, point-to-rbox subnet,
//!   and label assigners.
//! - [`trainer`] — training loops for all supervision modes, the symmetry
//!   recovery check, and inference.
//! - [`dataio`] — annotation I/O, label degradation/noise protocols, and
//!   AP evaluation.
//! - [`config`] — structured-text configuration for training and data
//!   generation.

pub mod anglecodec;
pub mod assign;
pub mod config;
pub mod dataio;
pub mod geom;
pub mod jet;
pub mod losses;
pub mod model;
pub mod nn;
pub mod raster;
pub mod synth;
pub mod trainer;
pub mod viewgen;

pub use geom::{HBox, PointLabel, RBox};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate polygon")]
    DegeneratePolygon,
    #[error("undefined phase: all-zero angle code")]
    UndefinedPhase,
    #[error("undefined scale phase: gate phasor has zero magnitude")]
    UndefinedScalePhase,
    #[error("missing basic pattern for category {0}")]
    MissingPattern(String),
    #[error("scene packing infeasible after {0} retries")]
    PackingInfeasible(usize),
    #[error("bad image dims {w}x{h}: {msg}")]
    BadDims { w: usize, h: usize, msg: String },
    #[error("unknown class: {0}")]
    UnknownClass(String),
    #[error("missing loss part `{0}` for mode {1}")]
    MissingLossPart(&'static str, &'static str),
    #[error("noise injection is defined for hbox/point labels only")]
    NoiseOnRbox,
    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
