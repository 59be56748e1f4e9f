//! The detector networks: a tiny strided backbone with a top-down pyramid,
//! shared dense heads (class / centerness / box offsets / angle code), and
//! the single-level point-to-rbox subnet with softmax-gated level fusion and
//! the gate-derived multiplicative size factor.
//!
//! Forward passes cache every intermediate needed by the matching
//! hand-written backward passes; both networks are deterministic given
//! their seed.

use crate::anglecodec::{angle_decode_grad, bin2dec_grad5, ANGLE_CHANNELS};
use crate::geom::RBox;
use crate::nn::{
    relu, relu_backward, upsample_nearest, upsample_nearest_backward, AdamW, Conv2d, GnCache,
    GroupNorm, ParamArena, Tensor,
};
use crate::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Pyramid strides, P3 to P7.
pub const STRIDES: [usize; 5] = [8, 16, 32, 64, 128];
pub const NUM_LEVELS: usize = 5;

/// Focal-loss prior for classification bias init.
const CLS_PRIOR: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Pyramid channel width.
    pub channels: usize,
    /// Enable gated fusion-and-scaling in the point-to-rbox subnet; when
    /// false the gate is pinned one-hot to the stride-8 level and `m = 1`.
    pub fusion_scaling: bool,
}

impl ModelConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            channels: 32,
            fusion_scaling: true,
        }
    }
}

/// Bias the angle head toward the code of angle zero so the decode phasor
/// starts with a healthy magnitude instead of thrashing around the atan2
/// singularity.
fn init_angle_bias(arena: &mut ParamArena, ang: &Conv2d) {
    let code = crate::anglecodec::angle_encode(0.0).channels;
    let r = arena.param_range(ang.b);
    for (v, c) in arena.data[r].iter_mut().zip(code.iter()) {
        *v = *c as f32;
    }
}

/// Five feature maps at strides 8..128.
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

fn check_dims(h: usize, w: usize) -> Result<(), Error> {
    if h == 0 || w == 0 || h % 128 != 0 || w % 128 != 0 {
        return Err(Error::BadDims {
            w,
            h,
            msg: "input dims must be positive multiples of 128".to_string(),
        });
    }
    Ok(())
}

// ------------------------------------------------------------- backbone

struct Stage {
    conv: Conv2d,
    gn: GroupNorm,
}

impl Stage {
    fn new(
        arena: &mut ParamArena,
        name: &str,
        in_c: usize,
        out_c: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            conv: Conv2d::new(arena, name, in_c, out_c, 3, stride, rng),
            gn: GroupNorm::new(arena, &format!("{name}.gn"), out_c, (out_c / 4).max(1)),
        }
    }

    fn forward(&self, arena: &ParamArena, x: &Tensor) -> StageCache {
        let pre = self.conv.forward(arena, x);
        let (mut post, cache) = self.gn.forward(arena, &pre);
        relu(&mut post);
        StageCache { pre, cache, post }
    }
}

struct StageCache {
    pre: Tensor,
    cache: GnCache,
    post: Tensor,
}

/// Strided convolutional backbone (4 stride-2 stages) plus lateral top-down
/// merge and extra downsampled levels, yielding P3..P7 at `channels` width.
struct Backbone {
    stem: Stage,
    s2: Stage,
    s3: Stage,
    s4: Stage,
    lat3: Conv2d,
    lat4: Conv2d,
    smooth3: Conv2d,
    smooth4: Conv2d,
    down5: Conv2d,
    down6: Conv2d,
    down7: Conv2d,
}

struct BackboneCache {
    input: Tensor,
    stem: StageCache,
    s2: StageCache,
    s3: StageCache,
    s4: StageCache,
    p4m: Tensor,
    p3m: Tensor,
    p4: Tensor,
    r5: Tensor,
    r6: Tensor,
}

impl Backbone {
    fn new(arena: &mut ParamArena, prefix: &str, c: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            stem: Stage::new(arena, &format!("{prefix}.stem"), 3, 16, 2, rng),
            s2: Stage::new(arena, &format!("{prefix}.s2"), 16, c, 2, rng),
            s3: Stage::new(arena, &format!("{prefix}.s3"), c, c, 2, rng),
            s4: Stage::new(arena, &format!("{prefix}.s4"), c, c, 2, rng),
            lat3: Conv2d::new(arena, &format!("{prefix}.lat3"), c, c, 1, 1, rng),
            lat4: Conv2d::new(arena, &format!("{prefix}.lat4"), c, c, 1, 1, rng),
            smooth3: Conv2d::new(arena, &format!("{prefix}.smooth3"), c, c, 3, 1, rng),
            smooth4: Conv2d::new(arena, &format!("{prefix}.smooth4"), c, c, 3, 1, rng),
            down5: Conv2d::new(arena, &format!("{prefix}.down5"), c, c, 3, 2, rng),
            down6: Conv2d::new(arena, &format!("{prefix}.down6"), c, c, 3, 2, rng),
            down7: Conv2d::new(arena, &format!("{prefix}.down7"), c, c, 3, 2, rng),
        }
    }

    fn forward(&self, arena: &ParamArena, input: &Tensor) -> (FeaturePyramid, BackboneCache) {
        let stem = self.stem.forward(arena, input);
        let s2 = self.s2.forward(arena, &stem.post);
        let s3 = self.s3.forward(arena, &s2.post);
        let s4 = self.s4.forward(arena, &s3.post);

        let l3 = self.lat3.forward(arena, &s3.post);
        let p4m = self.lat4.forward(arena, &s4.post);
        let up = upsample_nearest(&p4m, 2);
        let mut p3m = l3;
        for (a, b) in p3m.data.iter_mut().zip(&up.data) {
            *a += b;
        }
        let p3 = self.smooth3.forward(arena, &p3m);
        let p4 = self.smooth4.forward(arena, &p4m);
        let p5 = self.down5.forward(arena, &p4);
        let mut r5 = p5.clone();
        relu(&mut r5);
        let p6 = self.down6.forward(arena, &r5);
        let mut r6 = p6.clone();
        relu(&mut r6);
        let p7 = self.down7.forward(arena, &r6);

        let cache = BackboneCache {
            input: input.clone(),
            stem,
            s2,
            s3,
            s4,
            p4m,
            p3m,
            p4: p4.clone(),
            r5,
            r6,
        };
        (
            FeaturePyramid {
                levels: vec![p3, p4, p5, p6, p7],
            },
            cache,
        )
    }

    fn backward(&self, arena: &mut ParamArena, cache: &BackboneCache, gpyr: Vec<Tensor>) {
        let mut it = gpyr.into_iter();
        let (gp3, mut gp4, mut gp5, mut gp6, gp7) = (
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
        );

        // P7 -> P6 -> P5 chain.
        let mut g_r6 = self.down7.backward(arena, &cache.r6, &gp7);
        relu_backward(&cache.r6, &mut g_r6);
        for (a, b) in gp6.data.iter_mut().zip(&g_r6.data) {
            *a += b;
        }
        let mut g_r5 = self.down6.backward(arena, &cache.r5, &gp6);
        relu_backward(&cache.r5, &mut g_r5);
        for (a, b) in gp5.data.iter_mut().zip(&g_r5.data) {
            *a += b;
        }
        let g_from_p5 = self.down5.backward(arena, &cache.p4, &gp5);
        for (a, b) in gp4.data.iter_mut().zip(&g_from_p5.data) {
            *a += b;
        }

        // Smooth convs back to the merged maps; p3m = l3 + up(p4m).
        let gp3m = self.smooth3.backward(arena, &cache.p3m, &gp3);
        let mut gp4m = self.smooth4.backward(arena, &cache.p4m, &gp4);
        let g_up = upsample_nearest_backward(&gp3m, 2);
        for (a, b) in gp4m.data.iter_mut().zip(&g_up.data) {
            *a += b;
        }

        let mut gt4 = self.lat4.backward(arena, &cache.s4.post, &gp4m);
        let mut gt3 = self.lat3.backward(arena, &cache.s3.post, &gp3m);

        relu_backward(&cache.s4.post, &mut gt4);
        let g = self.s4.gn.backward(arena, &cache.s4.pre, &cache.s4.cache, &gt4);
        let g = self.s4.conv.backward(arena, &cache.s3.post, &g);
        for (a, b) in gt3.data.iter_mut().zip(&g.data) {
            *a += b;
        }

        relu_backward(&cache.s3.post, &mut gt3);
        let g = self.s3.gn.backward(arena, &cache.s3.pre, &cache.s3.cache, &gt3);
        let mut gt2 = self.s3.conv.backward(arena, &cache.s2.post, &g);

        relu_backward(&cache.s2.post, &mut gt2);
        let g = self.s2.gn.backward(arena, &cache.s2.pre, &cache.s2.cache, &gt2);
        let mut gt1 = self.s2.conv.backward(arena, &cache.stem.post, &g);

        relu_backward(&cache.stem.post, &mut gt1);
        let g = self
            .stem
            .gn
            .backward(arena, &cache.stem.pre, &cache.stem.cache, &gt1);
        let _ = self.stem.conv.backward(arena, &cache.input, &g);
    }
}

// ------------------------------------------------------------ dense heads

/// Raw per-level head outputs (logits; activations are applied at decode /
/// loss time).
pub struct DensePrediction {
    /// Per level: class logits `(K, h, w)`.
    pub cls: Vec<Tensor>,
    /// Per level: centerness logit `(1, h, w)`.
    pub cn: Vec<Tensor>,
    /// Per level: raw box offsets `(4, h, w)`; `ltrb = exp(raw) * stride`.
    pub reg: Vec<Tensor>,
    /// Per level: raw angle code `(3, h, w)`; channels are `tanh(raw)`.
    pub ang: Vec<Tensor>,
}

impl DensePrediction {
    pub fn zeros_like(&self) -> DensePrediction {
        DensePrediction {
            cls: self.cls.iter().map(|t| Tensor::zeros(t.c, t.h, t.w)).collect(),
            cn: self.cn.iter().map(|t| Tensor::zeros(t.c, t.h, t.w)).collect(),
            reg: self.reg.iter().map(|t| Tensor::zeros(t.c, t.h, t.w)).collect(),
            ang: self.ang.iter().map(|t| Tensor::zeros(t.c, t.h, t.w)).collect(),
        }
    }

    /// Angle code at a location (raw head output; the decode is
    /// scale-invariant).
    pub fn angle_code(&self, level: usize, y: usize, x: usize) -> [f64; ANGLE_CHANNELS] {
        core::array::from_fn(|j| self.ang[level].at(j, y, x) as f64)
    }
}

struct Heads {
    tower: Conv2d,
    tower_gn: GroupNorm,
    cls: Conv2d,
    cn: Conv2d,
    reg: Conv2d,
    ang: Conv2d,
}

struct HeadLevelCache {
    tower_pre: Tensor,
    tower_gn: GnCache,
    tower_post: Tensor,
    ang_in: Tensor,
}

/// `[x, x^2]` channel concatenation.
fn cat_squared(x: &Tensor) -> Tensor {
    let plane = x.h * x.w;
    let mut out = Tensor::zeros(2 * x.c, x.h, x.w);
    out.data[..x.c * plane].copy_from_slice(&x.data);
    for (dst, src) in out.data[x.c * plane..].iter_mut().zip(&x.data) {
        *dst = src * src;
    }
    out
}

/// Backward of [`cat_squared`]: fold the squared-channel gradient back.
fn cat_squared_backward(x: &Tensor, gcat: &Tensor, gx: &mut Tensor) {
    let plane = x.h * x.w;
    for i in 0..x.c * plane {
        gx.data[i] += gcat.data[i] + 2.0 * x.data[i] * gcat.data[x.c * plane + i];
    }
}

impl Heads {
    fn new(
        arena: &mut ParamArena,
        prefix: &str,
        c: usize,
        num_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let tower = Conv2d::new(arena, &format!("{prefix}.tower"), c, c, 3, 1, rng);
        let tower_gn = GroupNorm::new(arena, &format!("{prefix}.tower.gn"), c, c / 4);
        let cls = Conv2d::new(arena, &format!("{prefix}.cls"), c, num_classes, 3, 1, rng);
        // Focal prior: rare-positive bias keeps early training stable.
        let bias = (-((1.0 - CLS_PRIOR) / CLS_PRIOR).ln()) as f32;
        let r = arena.param_range(cls.b);
        for v in &mut arena.data[r] {
            *v = bias;
        }
        let cn = Conv2d::new(arena, &format!("{prefix}.cn"), c, 1, 3, 1, rng);
        let reg = Conv2d::new(arena, &format!("{prefix}.reg"), c, 4, 3, 1, rng);
        // The angle head reads [features, features^2]: orientation modulo
        // pi is a second-harmonic quantity that products of oriented
        // responses express far better than rectified first-order features.
        let ang = Conv2d::new(arena, &format!("{prefix}.ang"), 2 * c, ANGLE_CHANNELS, 3, 1, rng);
        init_angle_bias(arena, &ang);
        Self {
            tower,
            tower_gn,
            cls,
            cn,
            reg,
            ang,
        }
    }

    fn forward_level(&self, arena: &ParamArena, feat: &Tensor) -> (HeadLevelCache, [Tensor; 4]) {
        let pre = self.tower.forward(arena, feat);
        let (mut post, gnc) = self.tower_gn.forward(arena, &pre);
        relu(&mut post);
        let cls = self.cls.forward(arena, &post);
        let cn = self.cn.forward(arena, &post);
        let reg = self.reg.forward(arena, &post);
        let ang_in = cat_squared(&post);
        let ang = self.ang.forward(arena, &ang_in);
        (
            HeadLevelCache {
                tower_pre: pre,
                tower_gn: gnc,
                tower_post: post,
                ang_in,
            },
            [cls, cn, reg, ang],
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_level(
        &self,
        arena: &mut ParamArena,
        feat: &Tensor,
        cache: &HeadLevelCache,
        gcls: &Tensor,
        gcn: &Tensor,
        greg: &Tensor,
        gang: &Tensor,
    ) -> Tensor {
        let mut gpost = self.cls.backward(arena, &cache.tower_post, gcls);
        let add = |dst: &mut Tensor, src: Tensor| {
            for (a, b) in dst.data.iter_mut().zip(&src.data) {
                *a += b;
            }
        };
        add(&mut gpost, self.cn.backward(arena, &cache.tower_post, gcn));
        add(&mut gpost, self.reg.backward(arena, &cache.tower_post, greg));
        let gang_cat = self.ang.backward(arena, &cache.ang_in, gang);
        cat_squared_backward(&cache.tower_post, &gang_cat, &mut gpost);
        relu_backward(&cache.tower_post, &mut gpost);
        let g = self
            .tower_gn
            .backward(arena, &cache.tower_pre, &cache.tower_gn, &gpost);
        self.tower.backward(arena, feat, &g)
    }
}

// --------------------------------------------------------- main detector

/// Multi-level dense detector with an angle-code head.
pub struct Detector {
    pub arena: ParamArena,
    pub cfg: ModelConfig,
    backbone: Backbone,
    heads: Heads,
}

/// Everything the backward pass needs from one forward call.
pub struct ForwardCache {
    backbone: BackboneCache,
    pyramid: Vec<Tensor>,
    head_levels: Vec<HeadLevelCache>,
}

impl Detector {
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut arena = ParamArena::new();
        let backbone = Backbone::new(&mut arena, "bb", cfg.channels, &mut rng);
        let heads = Heads::new(&mut arena, "head", cfg.channels, cfg.num_classes, &mut rng);
        Self {
            arena,
            cfg,
            backbone,
            heads,
        }
    }

    pub fn num_params(&self) -> usize {
        self.arena.len()
    }

    /// Parameter handles of the angle-head conv (weights, bias); used by
    /// gradient-isolation checks.
    pub fn angle_head_params(&self) -> (crate::nn::ParamId, crate::nn::ParamId) {
        (self.heads.ang.w, self.heads.ang.b)
    }

    /// Backbone + pyramid only.
    pub fn backbone_forward(&self, input: &Tensor) -> Result<FeaturePyramid, Error> {
        check_dims(input.h, input.w)?;
        Ok(self.backbone.forward(&self.arena, input).0)
    }

    /// Full dense forward; the cache feeds [`Detector::backward`].
    pub fn forward(&self, input: &Tensor) -> Result<(DensePrediction, ForwardCache), Error> {
        check_dims(input.h, input.w)?;
        let (pyr, bb_cache) = self.backbone.forward(&self.arena, input);
        let mut pred = DensePrediction {
            cls: Vec::with_capacity(NUM_LEVELS),
            cn: Vec::with_capacity(NUM_LEVELS),
            reg: Vec::with_capacity(NUM_LEVELS),
            ang: Vec::with_capacity(NUM_LEVELS),
        };
        let mut head_levels = Vec::with_capacity(NUM_LEVELS);
        for feat in &pyr.levels {
            let (cache, [cls, cn, reg, ang]) = self.heads.forward_level(&self.arena, feat);
            pred.cls.push(cls);
            pred.cn.push(cn);
            pred.reg.push(reg);
            pred.ang.push(ang);
            head_levels.push(cache);
        }
        Ok((
            pred,
            ForwardCache {
                backbone: bb_cache,
                pyramid: pyr.levels,
                head_levels,
            },
        ))
    }

    /// Backward from per-level head-output gradients, accumulating into the
    /// detector's own gradient buffer.
    pub fn backward(&mut self, cache: &ForwardCache, grads: &DensePrediction) {
        let mut arena = std::mem::take(&mut self.arena);
        self.backward_into(&mut arena, cache, grads);
        self.arena = arena;
    }

    /// Backward into an external arena with the same layout (weights are
    /// read from it, gradients accumulated into it); lets workers hold
    /// private gradient buffers.
    pub fn backward_into(&self, arena: &mut ParamArena, cache: &ForwardCache, grads: &DensePrediction) {
        let mut gpyr = Vec::with_capacity(NUM_LEVELS);
        for lvl in 0..NUM_LEVELS {
            let g = self.heads.backward_level(
                arena,
                &cache.pyramid[lvl],
                &cache.head_levels[lvl],
                &grads.cls[lvl],
                &grads.cn[lvl],
                &grads.reg[lvl],
                &grads.ang[lvl],
            );
            gpyr.push(g);
        }
        self.backbone.backward(arena, &cache.backbone, gpyr);
    }
}

// -------------------------------------------------- box decode with grads

/// Decoded box plus the intermediates needed to push gradients back to the
/// raw head outputs.
#[derive(Debug, Clone)]
pub struct DecodedBox {
    pub rbox: RBox,
    ltrb_px: [f64; 4],
    dtheta_dcode: [f64; ANGLE_CHANNELS],
    theta: f64,
    u: f64,
    v: f64,
}

const REG_CLAMP: f32 = 8.0;

/// Decode a main-detector location: `ltrb = exp(raw) * stride`, angle from
/// the tanh code, center from the rotated offset midpoint.
pub fn decode_box_main(
    loc_x: f64,
    loc_y: f64,
    stride: usize,
    reg_raw: [f32; 4],
    ang_raw: [f32; ANGLE_CHANNELS],
) -> DecodedBox {
    let ltrb: [f64; 4] = core::array::from_fn(|i| {
        (reg_raw[i].clamp(-REG_CLAMP, REG_CLAMP) as f64).exp() * stride as f64
    });
    decode_common(loc_x, loc_y, ltrb, ang_raw)
}

fn decode_common(
    loc_x: f64,
    loc_y: f64,
    ltrb: [f64; 4],
    ang_raw: [f32; ANGLE_CHANNELS],
) -> DecodedBox {
    let code: [f64; ANGLE_CHANNELS] = core::array::from_fn(|j| ang_raw[j] as f64);
    let (theta, dtheta_dcode) = match angle_decode_grad(&code) {
        Ok(v) => v,
        Err(_) => (0.0, [0.0; ANGLE_CHANNELS]),
    };
    let [l, t, r, b] = ltrb;
    let u = (r - l) / 2.0;
    let v = (b - t) / 2.0;
    let (s, c) = theta.sin_cos();
    let rbox = RBox::new(
        loc_x + c * u - s * v,
        loc_y + s * u + c * v,
        l + r,
        t + b,
        theta,
    );
    DecodedBox {
        rbox,
        ltrb_px: ltrb,
        dtheta_dcode,
        theta,
        u,
        v,
    }
}

/// Push a gradient w.r.t. the decoded `(cx, cy, w, h, theta)` back to the
/// raw reg/ang outputs of the main detector.
pub fn backprop_box_main(d: &DecodedBox, gbox: [f64; 5]) -> ([f32; 4], [f32; ANGLE_CHANNELS]) {
    let (g_ltrb_px, gang) = backprop_common(d, gbox);
    // Chain through exp: d ltrb_px / d raw = ltrb_px.
    let greg: [f32; 4] = core::array::from_fn(|i| (g_ltrb_px[i] * d.ltrb_px[i]) as f32);
    (greg, gang)
}

fn backprop_common(d: &DecodedBox, gbox: [f64; 5]) -> ([f64; 4], [f32; ANGLE_CHANNELS]) {
    let [gcx, gcy, gw, gh, gtheta] = gbox;
    let (s, c) = d.theta.sin_cos();
    let gu = gcx * c + gcy * s;
    let gv = -gcx * s + gcy * c;
    let g_ltrb = [
        -gu / 2.0 + gw,
        -gv / 2.0 + gh,
        gu / 2.0 + gw,
        gv / 2.0 + gh,
    ];
    let gtheta_total = gtheta + gcx * (-s * d.u - c * d.v) + gcy * (c * d.u - s * d.v);
    let gang: [f32; ANGLE_CHANNELS] =
        core::array::from_fn(|j| (gtheta_total * d.dtheta_dcode[j]) as f32);
    (g_ltrb, gang)
}

// ------------------------------------------------------------ gated fusion

/// Softmax-gated level fusion from per-level gating logits (all upsampled to
/// the stride-8 shape). Returns the fused map and the gate tensor
/// `(levels, h, w)` whose per-pixel sum is one.
pub fn fuse_from_logits(ups: &[Tensor], logits: &[Tensor]) -> (Tensor, Tensor) {
    let (h, w) = (ups[0].h, ups[0].w);
    let c = ups[0].c;
    let n = ups.len();
    let mut gates = Tensor::zeros(n, h, w);
    for i in 0..h * w {
        let mut maxv = f32::MIN;
        for l in 0..n {
            maxv = maxv.max(logits[l].data[i]);
        }
        let mut denom = 0.0f32;
        for l in 0..n {
            let e = (logits[l].data[i] - maxv).exp();
            gates.data[l * h * w + i] = e;
            denom += e;
        }
        for l in 0..n {
            gates.data[l * h * w + i] /= denom;
        }
    }
    let mut fused = Tensor::zeros(c, h, w);
    for l in 0..n {
        let gp = gates.plane(l).to_vec();
        for ch in 0..c {
            let up = ups[l].plane(ch);
            let fp = fused.plane_mut(ch);
            for i in 0..h * w {
                fp[i] += gp[i] * up[i];
            }
        }
    }
    (fused, gates)
}

// --------------------------------------------------------------- p2r subnet

/// Single-level point-to-rbox subnet: its own backbone, gated fusion of the
/// pyramid into one stride-8 map, and heads whose size output is scaled by
/// the gate-derived factor `m = 2^Y`.
pub struct P2rSubnet {
    pub arena: ParamArena,
    pub cfg: ModelConfig,
    backbone: Backbone,
    gate: Conv2d,
    tower: Conv2d,
    tower_gn: GroupNorm,
    cls: Conv2d,
    reg: Conv2d,
    ang: Conv2d,
}

pub struct P2rPrediction {
    /// Class logits `(K, h, w)` on the fused stride-8 map.
    pub cls: Tensor,
    /// Raw size offsets `(4, h, w)`; `ltrb = m * 2^tanh(raw) * stride`.
    pub reg: Tensor,
    /// Raw angle code `(3, h, w)`.
    pub ang: Tensor,
    /// Softmax gates `(levels, h, w)`.
    pub gates: Tensor,
}

pub struct P2rCache {
    backbone: BackboneCache,
    ups: Vec<Tensor>,
    gates: Tensor,
    fused: Tensor,
    tower_pre: Tensor,
    tower_gn: GnCache,
    tower_post: Tensor,
}

/// Gradients w.r.t. the subnet head outputs plus the gate tensor.
pub struct P2rGrads {
    pub cls: Tensor,
    pub reg: Tensor,
    pub ang: Tensor,
    /// Gradient w.r.t. the softmax gates (the `m` path).
    pub gates: Tensor,
}

impl P2rSubnet {
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut arena = ParamArena::new();
        let backbone = Backbone::new(&mut arena, "p2r.bb", cfg.channels, &mut rng);
        let gate = Conv2d::new(&mut arena, "p2r.gate", cfg.channels, 1, 3, 1, &mut rng);
        let tower = Conv2d::new(
            &mut arena,
            "p2r.tower",
            cfg.channels,
            cfg.channels,
            3,
            1,
            &mut rng,
        );
        let tower_gn = GroupNorm::new(&mut arena, "p2r.tower.gn", cfg.channels, cfg.channels / 4);
        let cls = Conv2d::new(
            &mut arena,
            "p2r.cls",
            cfg.channels,
            cfg.num_classes,
            3,
            1,
            &mut rng,
        );
        let bias = (-((1.0 - CLS_PRIOR) / CLS_PRIOR).ln()) as f32;
        let r = arena.param_range(cls.b);
        for v in &mut arena.data[r] {
            *v = bias;
        }
        let reg = Conv2d::new(&mut arena, "p2r.reg", cfg.channels, 4, 3, 1, &mut rng);
        let ang = Conv2d::new(&mut arena, "p2r.ang", cfg.channels, ANGLE_CHANNELS, 3, 1, &mut rng);
        init_angle_bias(&mut arena, &ang);
        Self {
            arena,
            cfg,
            backbone,
            gate,
            tower,
            tower_gn,
            cls,
            reg,
            ang,
        }
    }

    pub fn num_params(&self) -> usize {
        self.arena.len()
    }

    pub fn forward(&self, input: &Tensor) -> Result<(P2rPrediction, P2rCache), Error> {
        check_dims(input.h, input.w)?;
        let (pyr, bb_cache) = self.backbone.forward(&self.arena, input);
        let ups: Vec<Tensor> = pyr
            .levels
            .iter()
            .enumerate()
            .map(|(l, t)| {
                if l == 0 {
                    t.clone()
                } else {
                    upsample_nearest(t, 1 << l)
                }
            })
            .collect();

        let (fused, gates) = if self.cfg.fusion_scaling {
            let glogits: Vec<Tensor> = ups
                .iter()
                .map(|u| self.gate.forward(&self.arena, u))
                .collect();
            fuse_from_logits(&ups, &glogits)
        } else {
            // Pinned one-hot gate at the stride-8 level: F = P3, m = 1.
            let (h, w) = (ups[0].h, ups[0].w);
            let mut gates = Tensor::zeros(NUM_LEVELS, h, w);
            gates.plane_mut(0).fill(1.0);
            (ups[0].clone(), gates)
        };

        let tower_pre = self.tower.forward(&self.arena, &fused);
        let (mut tower_post, tower_gn) = self.tower_gn.forward(&self.arena, &tower_pre);
        relu(&mut tower_post);
        let cls = self.cls.forward(&self.arena, &tower_post);
        let reg = self.reg.forward(&self.arena, &tower_post);
        let ang = self.ang.forward(&self.arena, &tower_post);

        Ok((
            P2rPrediction {
                cls,
                reg,
                ang,
                gates: gates.clone(),
            },
            P2rCache {
                backbone: bb_cache,
                ups,
                gates,
                fused,
                tower_pre,
                tower_gn,
                tower_post,
            },
        ))
    }

    pub fn backward(&mut self, cache: &P2rCache, grads: &P2rGrads) {
        let mut arena = std::mem::take(&mut self.arena);
        self.backward_into(&mut arena, cache, grads);
        self.arena = arena;
    }

    /// Backward into an external same-layout arena.
    pub fn backward_into(&self, arena: &mut ParamArena, cache: &P2rCache, grads: &P2rGrads) {
        let mut gpost = self.cls.backward(arena, &cache.tower_post, &grads.cls);
        for (a, b) in gpost
            .data
            .iter_mut()
            .zip(&self.reg.backward(arena, &cache.tower_post, &grads.reg).data)
        {
            *a += b;
        }
        for (a, b) in gpost
            .data
            .iter_mut()
            .zip(&self.ang.backward(arena, &cache.tower_post, &grads.ang).data)
        {
            *a += b;
        }
        relu_backward(&cache.tower_post, &mut gpost);
        let g = self
            .tower_gn
            .backward(arena, &cache.tower_pre, &cache.tower_gn, &gpost);
        let gfused = self.tower.backward(arena, &cache.fused, &g);

        let (h, w) = (gfused.h, gfused.w);
        let c = gfused.c;
        let mut gups: Vec<Tensor> = cache
            .ups
            .iter()
            .map(|u| Tensor::zeros(u.c, u.h, u.w))
            .collect();

        if self.cfg.fusion_scaling {
            // dG from the fusion path plus the external m-path contribution.
            let mut dgate = grads.gates.clone();
            for l in 0..NUM_LEVELS {
                let gp = cache.gates.plane(l).to_vec();
                for ch in 0..c {
                    let up = cache.ups[l].plane(ch);
                    let gf = gfused.plane(ch);
                    let dg = dgate.plane_mut(l);
                    let gu = gups[l].plane_mut(ch);
                    for i in 0..h * w {
                        dg[i] += gf[i] * up[i];
                        gu[i] += gp[i] * gf[i];
                    }
                }
            }
            // Softmax backward per pixel, then the shared gate conv.
            let mut glogit: Vec<Tensor> = (0..NUM_LEVELS).map(|_| Tensor::zeros(1, h, w)).collect();
            for i in 0..h * w {
                let mut dot = 0.0f32;
                for l in 0..NUM_LEVELS {
                    dot += cache.gates.data[l * h * w + i] * dgate.data[l * h * w + i];
                }
                for l in 0..NUM_LEVELS {
                    let g = cache.gates.data[l * h * w + i];
                    glogit[l].data[i] = g * (dgate.data[l * h * w + i] - dot);
                }
            }
            for l in 0..NUM_LEVELS {
                let g = self.gate.backward(arena, &cache.ups[l], &glogit[l]);
                for (a, b) in gups[l].data.iter_mut().zip(&g.data) {
                    *a += b;
                }
            }
        } else {
            for (a, b) in gups[0].data.iter_mut().zip(&gfused.data) {
                *a += b;
            }
        }

        let gpyr: Vec<Tensor> = gups
            .into_iter()
            .enumerate()
            .map(|(l, g)| {
                if l == 0 {
                    g
                } else {
                    upsample_nearest_backward(&g, 1 << l)
                }
            })
            .collect();
        self.backbone.backward(arena, &cache.backbone, gpyr);
    }
}

/// Size factor at a fused-map location: `m = 2^Y` with its gradient w.r.t.
/// the five gates. Falls back to `m = 1` at the singular phasor.
pub fn gate_scale_factor(gates: &Tensor, y: usize, x: usize) -> (f64, [f64; 5]) {
    let g: [f64; 5] = core::array::from_fn(|l| gates.at(l, y, x) as f64);
    match bin2dec_grad5(&g) {
        Ok((yy, dy)) => {
            let m = yy.exp2();
            let scale = m * std::f64::consts::LN_2;
            (m, core::array::from_fn(|i| scale * dy[i]))
        }
        Err(_) => (1.0, [0.0; 5]),
    }
}

/// Decode a subnet location: `ltrb = m * 2^tanh(raw) * stride`.
pub fn decode_box_p2r(
    loc_x: f64,
    loc_y: f64,
    stride: usize,
    reg_raw: [f32; 4],
    ang_raw: [f32; ANGLE_CHANNELS],
    m: f64,
) -> DecodedBox {
    let ltrb: [f64; 4] = core::array::from_fn(|i| {
        m * ((reg_raw[i] as f64).tanh() * std::f64::consts::LN_2).exp() * stride as f64
    });
    decode_common(loc_x, loc_y, ltrb, ang_raw)
}

/// Backprop for [`decode_box_p2r`]: returns gradients for the raw reg, raw
/// angle, and the scalar factor `m`.
pub fn backprop_box_p2r(
    d: &DecodedBox,
    reg_raw: [f32; 4],
    m: f64,
    gbox: [f64; 5],
) -> ([f32; 4], [f32; ANGLE_CHANNELS], f64) {
    let (g_ltrb_px, gang) = backprop_common(d, gbox);
    let mut greg = [0.0f32; 4];
    let mut gm = 0.0f64;
    for i in 0..4 {
        let th = (reg_raw[i] as f64).tanh();
        // d ltrb / d raw = ltrb * ln2 * (1 - tanh^2).
        greg[i] = (g_ltrb_px[i] * d.ltrb_px[i] * std::f64::consts::LN_2 * (1.0 - th * th)) as f32;
        gm += g_ltrb_px[i] * d.ltrb_px[i] / m;
    }
    (greg, gang, gm)
}

/// AdamW with linear warmup then constant rate and one decay step.
pub struct Optimizer {
    pub opt: AdamW,
    pub base_lr: f64,
    pub warmup_iters: u64,
    pub decay_at: u64,
    pub iter: u64,
}

impl Optimizer {
    pub fn new(
        param_len: usize,
        base_lr: f64,
        weight_decay: f64,
        warmup_iters: u64,
        decay_at: u64,
    ) -> Self {
        Self {
            opt: AdamW::new(param_len, weight_decay),
            base_lr,
            warmup_iters,
            decay_at,
            iter: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        let warm = if self.iter < self.warmup_iters {
            let f = self.iter as f64 / self.warmup_iters as f64;
            1.0 / 3.0 + f * (2.0 / 3.0)
        } else {
            1.0
        };
        let decay = if self.decay_at > 0 && self.iter >= self.decay_at {
            0.1
        } else {
            1.0
        };
        self.base_lr * warm * decay
    }

    pub fn step(&mut self, arena: &mut ParamArena) {
        let lr = self.lr();
        self.iter += 1;
        self.opt.step(arena, lr);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_input(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::zeros(3, h, w);
        for v in t.data.iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        t
    }

    #[test]
    fn backbone_level_shapes_and_determinism() {
        let det = Detector::new(ModelConfig::new(3), 7);
        let x = rand_input(128, 128, 1);
        let pyr = det.backbone_forward(&x).unwrap();
        let dims: Vec<(usize, usize)> = pyr.levels.iter().map(|t| (t.h, t.w)).collect();
        assert_eq!(dims, vec![(16, 16), (8, 8), (4, 4), (2, 2), (1, 1)]);
        for t in &pyr.levels {
            assert_eq!(t.c, 32);
            assert!(t.data.iter().all(|v| v.is_finite()));
        }

        let pyr2 = det.backbone_forward(&x).unwrap();
        for (a, b) in pyr.levels.iter().zip(&pyr2.levels) {
            assert_eq!(a.data, b.data);
        }

        let x = rand_input(128, 256, 2);
        let pyr = det.backbone_forward(&x).unwrap();
        assert_eq!((pyr.levels[0].h, pyr.levels[0].w), (16, 32));

        assert!(matches!(
            det.backbone_forward(&rand_input(96, 128, 3)),
            Err(Error::BadDims { .. })
        ));
    }

    #[test]
    fn dense_head_shapes_and_param_count() {
        let det = Detector::new(ModelConfig::new(3), 8);
        let x = rand_input(128, 128, 4);
        let (pred, _) = det.forward(&x).unwrap();
        for (lvl, (h, w)) in [(16usize, 16usize), (8, 8), (4, 4), (2, 2), (1, 1)]
            .iter()
            .enumerate()
        {
            assert_eq!(
                (pred.cls[lvl].c, pred.cls[lvl].h, pred.cls[lvl].w),
                (3, *h, *w)
            );
            assert_eq!(pred.cn[lvl].c, 1);
            assert_eq!(pred.reg[lvl].c, 4);
            assert_eq!(pred.ang[lvl].c, ANGLE_CHANNELS);
            for t in [&pred.cls[lvl], &pred.cn[lvl], &pred.reg[lvl], &pred.ang[lvl]] {
                assert!(t.data.iter().all(|v| v.is_finite()));
            }
        }
        let n = det.num_params();
        assert!((50_000..300_000).contains(&n), "params: {n}");
    }

    #[test]
    fn fuse_one_hot_endpoint_and_convexity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ups: Vec<Tensor> = (0..5)
            .map(|_| {
                let mut t = Tensor::zeros(4, 6, 6);
                for v in t.data.iter_mut() {
                    *v = rng.random_range(-1.0..1.0);
                }
                t
            })
            .collect();

        // One-hot at level 2 reproduces that level exactly.
        let logits: Vec<Tensor> = (0..5)
            .map(|l| {
                let mut t = Tensor::zeros(1, 6, 6);
                t.data.fill(if l == 2 { 50.0 } else { -50.0 });
                t
            })
            .collect();
        let (fused, gates) = fuse_from_logits(&ups, &logits);
        for (a, b) in fused.data.iter().zip(&ups[2].data) {
            assert!((a - b).abs() < 1e-5);
        }
        for i in 0..36 {
            let s: f32 = (0..5).map(|l| gates.data[l * 36 + i]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }

        // Random logits: fused output stays inside the per-pixel envelope.
        let logits: Vec<Tensor> = (0..5)
            .map(|_| {
                let mut t = Tensor::zeros(1, 6, 6);
                for v in t.data.iter_mut() {
                    *v = rng.random_range(-2.0..2.0);
                }
                t
            })
            .collect();
        let (fused, gates) = fuse_from_logits(&ups, &logits);
        for i in 0..36 {
            let s: f32 = (0..5).map(|l| gates.data[l * 36 + i]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
        for ch in 0..4 {
            for i in 0..36 {
                let vals: Vec<f32> = (0..5).map(|l| ups[l].plane(ch)[i]).collect();
                let lo = vals.iter().cloned().fold(f32::MAX, f32::min);
                let hi = vals.iter().cloned().fold(f32::MIN, f32::max);
                let v = fused.plane(ch)[i];
                assert!(v >= lo - 1e-5 && v <= hi + 1e-5);
            }
        }
    }

    #[test]
    fn p2r_gate_extremes_scale_sizes() {
        let mut gates = Tensor::zeros(5, 1, 1);
        gates.plane_mut(0).fill(1.0);
        let (m, _) = gate_scale_factor(&gates, 0, 0);
        assert!((m - 1.0).abs() < 1e-9);

        let reg = [0.2f32, -0.3, 0.1, 0.4];
        let ang = [0.0f32; 3];
        let d1 = decode_box_p2r(64.0, 64.0, 8, reg, ang, m);

        let mut gates = Tensor::zeros(5, 1, 1);
        gates.plane_mut(4).fill(1.0);
        let (m16, _) = gate_scale_factor(&gates, 0, 0);
        assert!((m16 - 16.0).abs() < 1e-8);
        let d16 = decode_box_p2r(64.0, 64.0, 8, reg, ang, m16);
        assert!((d16.rbox.w / d1.rbox.w - 16.0).abs() < 1e-6);
        assert!((d16.rbox.h / d1.rbox.h - 16.0).abs() < 1e-6);
    }

    #[test]
    fn p2r_forward_shapes_and_determinism() {
        let net = P2rSubnet::new(ModelConfig::new(3), 11);
        let x = rand_input(128, 128, 12);
        let (pred, _) = net.forward(&x).unwrap();
        assert_eq!((pred.cls.c, pred.cls.h, pred.cls.w), (3, 16, 16));
        assert_eq!(pred.reg.c, 4);
        assert_eq!(pred.gates.c, 5);
        for i in 0..16 * 16 {
            let s: f32 = (0..5).map(|l| pred.gates.data[l * 256 + i]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
        let (pred2, _) = net.forward(&x).unwrap();
        assert_eq!(pred.cls.data, pred2.cls.data);
    }

    #[test]
    fn fixed_gate_mode_uses_p3_only() {
        let cfg = ModelConfig {
            fusion_scaling: false,
            ..ModelConfig::new(3)
        };
        let net = P2rSubnet::new(cfg, 13);
        let x = rand_input(128, 128, 14);
        let (pred, _) = net.forward(&x).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(pred.gates.at(0, y, x), 1.0);
                let (m, _) = gate_scale_factor(&pred.gates, y, x);
                assert!((m - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn decode_backprop_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut n = 0;
        while n < 50 {
            let reg: [f32; 4] = core::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let ang: [f32; 3] = core::array::from_fn(|_| rng.random_range(-0.9..0.9));
            let gbox: [f64; 5] = core::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let d = decode_box_main(40.0, 24.0, 8, reg, ang);
            if (d.rbox.theta.abs() - std::f64::consts::FRAC_PI_2).abs() < 0.05 {
                continue; // angle folding seam
            }
            n += 1;
            let (greg, gang) = backprop_box_main(&d, gbox);

            let f = |reg: [f32; 4], ang: [f32; 3]| -> f64 {
                let d = decode_box_main(40.0, 24.0, 8, reg, ang);
                gbox[0] * d.rbox.cx
                    + gbox[1] * d.rbox.cy
                    + gbox[2] * d.rbox.w
                    + gbox[3] * d.rbox.h
                    + gbox[4] * d.rbox.theta
            };
            for i in 0..4 {
                let eps = 1e-4f32;
                let mut rp = reg;
                rp[i] += eps;
                let hi = f(rp, ang);
                rp[i] -= 2.0 * eps;
                let lo = f(rp, ang);
                let fd = (hi - lo) / (2.0 * eps as f64);
                assert!(
                    (greg[i] as f64 - fd).abs() < 2e-3 * fd.abs().max(1.0),
                    "reg[{i}]: {} vs {fd}",
                    greg[i]
                );
            }
            for j in 0..3 {
                let eps = 1e-4f32;
                let mut ap = ang;
                ap[j] += eps;
                let hi = f(reg, ap);
                ap[j] -= 2.0 * eps;
                let lo = f(reg, ap);
                let fd = (hi - lo) / (2.0 * eps as f64);
                assert!(
                    (gang[j] as f64 - fd).abs() < 2e-3 * fd.abs().max(1.0),
                    "ang[{j}]: {} vs {fd}",
                    gang[j]
                );
            }
        }
    }

    #[test]
    fn end_to_end_gradient_descends() {
        // One optimizer step against a toy objective must reduce it: checks
        // the full backward wiring of the main detector.
        let mut det = Detector::new(ModelConfig::new(3), 21);
        let x = rand_input(128, 128, 22);
        let objective = |det: &Detector| {
            let (pred, _) = det.forward(&x).unwrap();
            pred.cls[0].data.iter().map(|v| *v as f64).sum::<f64>()
        };
        let before = objective(&det);
        let (pred, cache) = det.forward(&x).unwrap();
        let mut grads = pred.zeros_like();
        grads.cls[0].data.fill(1.0);
        det.arena.zero_grad();
        det.backward(&cache, &grads);
        let mut opt = Optimizer::new(det.arena.len(), 1e-2, 0.0, 0, 0);
        opt.step(&mut det.arena);
        let after = objective(&det);
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn p2r_end_to_end_gradient_descends() {
        let mut net = P2rSubnet::new(ModelConfig::new(3), 23);
        let x = rand_input(128, 128, 24);
        let objective = |net: &P2rSubnet| {
            let (pred, _) = net.forward(&x).unwrap();
            pred.reg.data.iter().map(|v| *v as f64).sum::<f64>()
                + pred.gates.plane(3).iter().map(|v| *v as f64).sum::<f64>()
        };
        let before = objective(&net);
        let (pred, cache) = net.forward(&x).unwrap();
        let mut grads = P2rGrads {
            cls: Tensor::zeros(pred.cls.c, pred.cls.h, pred.cls.w),
            reg: Tensor::zeros(pred.reg.c, pred.reg.h, pred.reg.w),
            ang: Tensor::zeros(pred.ang.c, pred.ang.h, pred.ang.w),
            gates: Tensor::zeros(pred.gates.c, pred.gates.h, pred.gates.w),
        };
        grads.reg.data.fill(1.0);
        grads.gates.plane_mut(3).fill(1.0);
        net.arena.zero_grad();
        net.backward(&cache, &grads);
        let mut opt = Optimizer::new(net.arena.len(), 1e-2, 0.0, 0, 0);
        opt.step(&mut net.arena);
        let after = objective(&net);
        assert!(after < before, "{after} !< {before}");
    }
}
