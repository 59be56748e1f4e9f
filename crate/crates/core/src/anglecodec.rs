//! Boundary-free angle coding and the continuous gate decoder.
//!
//! Angles are represented by phase-shifted cosine channels with period pi,
//! so regression targets never jump at the `+-pi/2` boundary. The same
//! phasor trick decodes a softmax gate vector into a real level index,
//! which drives the fusion-and-scaling size factor `m = 2^Y`.

use crate::geom::fold_half_open;
use crate::jet::{Jet, Scalar};
use crate::Error;
use std::f64::consts::PI;

/// Number of phase channels in the angle code.
pub const ANGLE_CHANNELS: usize = 3;

/// Phase-shifted cosine channels encoding an angle with period pi.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngleCode {
    pub channels: [f64; ANGLE_CHANNELS],
}

/// Encode an angle: `c_j = cos(2 theta + 2 pi j / N)`.
pub fn angle_encode(theta: f64) -> AngleCode {
    let mut channels = [0.0; ANGLE_CHANNELS];
    for (j, c) in channels.iter_mut().enumerate() {
        *c = (2.0 * theta + 2.0 * PI * j as f64 / ANGLE_CHANNELS as f64).cos();
    }
    AngleCode { channels }
}

/// Decode phase channels back to an angle in `[-pi/2, pi/2)`.
///
/// Exact inverse of [`angle_encode`] on clean codes; least-squares phase
/// recovery on noisy ones. Errors on an all-zero channel vector.
pub fn angle_decode(code: &AngleCode) -> Result<f64, Error> {
    let (sy, sx) = decode_sums(&code.channels);
    if sy * sy + sx * sx < 1e-24 {
        return Err(Error::UndefinedPhase);
    }
    Ok(fold_half_open(0.5 * (-sy).atan2(sx)))
}

fn decode_sums(channels: &[f64; ANGLE_CHANNELS]) -> (f64, f64) {
    let mut sy = 0.0;
    let mut sx = 0.0;
    for (j, &c) in channels.iter().enumerate() {
        let phi = 2.0 * PI * j as f64 / ANGLE_CHANNELS as f64;
        sy += c * phi.sin();
        sx += c * phi.cos();
    }
    (sy, sx)
}

/// Decode with partial derivatives w.r.t. each channel.
pub fn angle_decode_grad(channels: &[f64; ANGLE_CHANNELS]) -> Result<(f64, [f64; ANGLE_CHANNELS]), Error> {
    let mut sy = Jet::<ANGLE_CHANNELS>::constant(0.0);
    let mut sx = Jet::<ANGLE_CHANNELS>::constant(0.0);
    for (j, &c) in channels.iter().enumerate() {
        let phi = 2.0 * PI * j as f64 / ANGLE_CHANNELS as f64;
        let cj = Jet::variable(c, j);
        sy = sy + cj * Jet::constant(phi.sin());
        sx = sx + cj * Jet::constant(phi.cos());
    }
    if sy.v * sy.v + sx.v * sx.v < 1e-24 {
        return Err(Error::UndefinedPhase);
    }
    let theta = (-sy).atan2(sx) * Jet::constant(0.5);
    // Folding shifts by a constant; derivatives are unaffected.
    Ok((fold_half_open(theta.v), theta.d))
}

/// Smooth-L1 with `beta = 1`.
fn smooth_l1<S: Scalar>(diff: S) -> S {
    let a = diff.abs();
    if a.value() < 1.0 {
        a * a * S::from_f64(0.5)
    } else {
        a - S::from_f64(0.5)
    }
}

fn snap_s<S: Scalar>(pred: S, target: f64) -> S {
    // Fold pred - target into (-pi/2, pi/2]: the closest pi-shifted target.
    let d = pred - S::from_f64(target);
    let k = ((d.value() + PI / 2.0) / PI).ceil() - 1.0;
    smooth_l1(d - S::from_f64(k * PI))
}

/// Periodic regression loss: `min_k smoothL1(pred, k*pi + target)`.
///
/// Implemented by folding the difference into `(-pi/2, pi/2]`; ties at the
/// fold boundary resolve to the positive side.
pub fn snap_loss(theta_pred: f64, theta_target: f64) -> f64 {
    snap_s(theta_pred, theta_target)
}

/// [`snap_loss`] plus its derivative w.r.t. `theta_pred`.
pub fn snap_loss_grad(theta_pred: f64, theta_target: f64) -> (f64, f64) {
    let j = snap_s(Jet::<1>::variable(theta_pred, 0), theta_target);
    (j.v, j.d[0])
}

/// Softmax-normalized gating scores over pyramid levels.
#[derive(Debug, Clone, PartialEq)]
pub struct GateVector {
    pub g: Vec<f64>,
}

impl GateVector {
    pub fn new(g: Vec<f64>) -> Self {
        Self { g }
    }

    pub fn one_hot(n: usize, levels: usize) -> Self {
        let mut g = vec![0.0; levels];
        g[n] = 1.0;
        Self { g }
    }
}

fn bin2dec_s<S: Scalar>(g: &[S]) -> (S, f64) {
    let n = g.len() as f64;
    let mut sy = S::from_f64(0.0);
    let mut sx = S::from_f64(0.0);
    for (i, &gi) in g.iter().enumerate() {
        let phi = 2.0 * PI * i as f64 / n;
        sy = sy + gi * S::from_f64(phi.sin());
        sx = sx - gi * S::from_f64(phi.cos());
    }
    let mag2 = sy.value() * sy.value() + sx.value() * sx.value();
    let y = (S::from_f64(PI) - sy.atan2(sx)) * S::from_f64(n / (2.0 * PI));
    (y, mag2)
}

/// Continuous binary-to-decimal gate decoder: maps a softmax gate vector to
/// a real level index `Y` in `[0, N)`. One-hot input at level `n`
/// (zero-based) yields exactly `n`.
pub fn bin2dec(gate: &GateVector) -> Result<f64, Error> {
    let g: Vec<f64> = gate.g.clone();
    let (y, mag2) = bin2dec_s(&g);
    if mag2 < 1e-24 {
        return Err(Error::UndefinedScalePhase);
    }
    // atan2 range maps Y into [0, N]; N folds back to 0.
    Ok(if y >= g.len() as f64 { y - g.len() as f64 } else { y })
}

/// [`bin2dec`] plus its gradient w.r.t. the gate entries (5-level gates).
pub fn bin2dec_grad5(gate: &[f64; 5]) -> Result<(f64, [f64; 5]), Error> {
    let jg: Vec<Jet<5>> = gate
        .iter()
        .enumerate()
        .map(|(i, &v)| Jet::variable(v, i))
        .collect();
    let (y, mag2) = bin2dec_s(&jg);
    if mag2 < 1e-24 {
        return Err(Error::UndefinedScalePhase);
    }
    let v = if y.v >= 5.0 { y.v - 5.0 } else { y.v };
    Ok((v, y.d))
}

/// Multiplicative size factor `m = 2^Y` in `[1, 2^N)`.
pub fn scale_factor(gate: &GateVector) -> Result<f64, Error> {
    Ok(bin2dec(gate)?.exp2())
}
