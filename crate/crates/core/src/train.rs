//! Augmentation, SGD with momentum, and the training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval;
use crate::heatmap::{synthesize_target, target_mask, DEFAULT_SIGMA};
use crate::kv;
use crate::network::{ModelKind, Network, NetworkConfig};
use crate::pose::{Joint, Pose, Skeleton};
use crate::synth::Dataset;
use crate::tensor::{Tape, Tensor};
use crate::temporal::PoolingMode;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    /// Side of the square crop taken from the frame.
    pub crop_size: usize,
    pub flip_prob: f64,
    /// Rotations are drawn uniformly from `[-range, range]` degrees.
    pub rotation_range: f64,
    /// Side of the square output the crop is resized to.
    pub output_size: usize,
}

impl AugmentParams {
    pub fn identity(size: usize) -> Self {
        AugmentParams {
            crop_size: size,
            flip_prob: 0.0,
            rotation_range: 0.0,
            output_size: size,
        }
    }

    pub fn validate(&self, frame_h: usize, frame_w: usize) -> Result<()> {
        if self.crop_size == 0 || self.crop_size > frame_h || self.crop_size > frame_w {
            return Err(Error::config(
                "crop",
                format!("crop {} does not fit a {frame_h}x{frame_w} frame", self.crop_size),
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config("flip", "probability must be in [0, 1]"));
        }
        if !(self.rotation_range >= 0.0 && self.rotation_range <= 180.0) {
            return Err(Error::config("rotation", "range must be in [0, 180] degrees"));
        }
        if self.output_size == 0 {
            return Err(Error::config("output_size", "must be positive"));
        }
        Ok(())
    }

    /// Random crop offset, flip and angle.
    pub fn draw(&self, frame_h: usize, frame_w: usize, rng: &mut impl Rng) -> AugmentDraw {
        AugmentDraw {
            crop_x: rng.gen_range(0..=frame_w - self.crop_size),
            crop_y: rng.gen_range(0..=frame_h - self.crop_size),
            flip: rng.gen_bool(self.flip_prob),
            angle_deg: if self.rotation_range > 0.0 {
                rng.gen_range(-self.rotation_range..=self.rotation_range)
            } else {
                0.0
            },
        }
    }
}

/// One concrete augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub crop_x: usize,
    pub crop_y: usize,
    pub flip: bool,
    pub angle_deg: f64,
}

/// Row-major 2x3 affine map `q = A p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine([[f64; 3]; 2]);

impl Affine {
    pub fn identity() -> Self {
        Affine([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    }

    pub fn translate(dx: f64, dy: f64) -> Self {
        Affine([[1.0, 0.0, dx], [0.0, 1.0, dy]])
    }

    pub fn scale(s: f64) -> Self {
        Affine([[s, 0.0, 0.0], [0.0, s, 0.0]])
    }

    /// Rotation by `deg` degrees about `(cx, cy)`.
    pub fn rotate_about(deg: f64, cx: f64, cy: f64) -> Self {
        let (s, c) = deg.to_radians().sin_cos();
        Affine::translate(cx, cy)
            .then_after(&Affine([[c, -s, 0.0], [s, c, 0.0]]))
            .then_after(&Affine::translate(-cx, -cy))
    }

    /// `self ∘ other`: apply `other` first.
    pub fn then_after(&self, other: &Affine) -> Affine {
        let (a, b) = (&self.0, &other.0);
        let mut m = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                m[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c] + if c == 2 { a[r][2] } else { 0.0 };
            }
        }
        Affine(m)
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        (
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
        )
    }

    pub fn inverse(&self) -> Affine {
        let m = &self.0;
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let (a, b, c, d) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
        Affine([
            [a, b, -(a * m[0][2] + b * m[1][2])],
            [c, d, -(c * m[0][2] + d * m[1][2])],
        ])
    }
}

impl AugmentDraw {
    pub fn is_identity(&self, params: &AugmentParams, frame_h: usize, frame_w: usize) -> bool {
        self.crop_x == 0
            && self.crop_y == 0
            && !self.flip
            && self.angle_deg == 0.0
            && params.crop_size == frame_h
            && params.crop_size == frame_w
            && params.output_size == params.crop_size
    }

    /// Source-to-output map: crop, then flip, then rotate about the crop
    /// centre, then resize (pixel centres at integer coordinates).
    pub fn affine(&self, params: &AugmentParams) -> Affine {
        let crop = params.crop_size as f64;
        let c = (crop - 1.0) / 2.0;
        let mut m = Affine::translate(-(self.crop_x as f64), -(self.crop_y as f64));
        if self.flip {
            m = Affine([[-1.0, 0.0, crop - 1.0], [0.0, 1.0, 0.0]]).then_after(&m);
        }
        if self.angle_deg != 0.0 {
            m = Affine::rotate_about(self.angle_deg, c, c).then_after(&m);
        }
        let s = params.output_size as f64 / crop;
        Affine::translate(-0.5, -0.5)
            .then_after(&Affine::scale(s))
            .then_after(&Affine::translate(0.5, 0.5))
            .then_after(&m)
    }
}

fn sample_clamped(plane: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let at = |xx: i64, yy: i64| {
        let xx = xx.clamp(0, w as i64 - 1) as usize;
        let yy = yy.clamp(0, h as i64 - 1) as usize;
        plane[yy * w + xx]
    };
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x0 + 1, y0))
        + fy * ((1.0 - fx) * at(x0, y0 + 1) + fx * at(x0 + 1, y0 + 1))
}

/// Applies `draw` to a `(1, C, H, W)` frame and its pose. Pixels are
/// resampled bilinearly with border replication; the pose goes through the
/// same affine map, and a flip exchanges left/right labels via `mirror`.
pub fn apply_augment(
    frame: &Tensor,
    pose: &Pose,
    params: &AugmentParams,
    draw: &AugmentDraw,
    mirror: &[usize],
) -> Result<(Tensor, Pose)> {
    let [b, ch, h, w] = frame.shape();
    if b != 1 {
        return Err(Error::shape("augment", format!("expected one frame, got {:?}", frame.shape())));
    }
    params.validate(h, w)?;
    if draw.is_identity(params, h, w) {
        return Ok((frame.clone(), pose.clone()));
    }
    if draw.flip && mirror.len() != pose.len() {
        return Err(Error::shape(
            "augment",
            format!("mirror map for {} joints, pose has {}", mirror.len(), pose.len()),
        ));
    }
    let fwd = draw.affine(params);
    let inv = fwd.inverse();
    let o = params.output_size;
    let mut out = Tensor::zeros([1, ch, o, o]);
    for c in 0..ch {
        let src = frame.plane(0, c);
        let dst = out.plane_mut(0, c);
        for y in 0..o {
            for x in 0..o {
                let (sx, sy) = inv.apply(x as f64, y as f64);
                dst[y * o + x] = sample_clamped(src, w, h, sx, sy);
            }
        }
    }
    let moved: Vec<Joint> = pose
        .joints
        .iter()
        .map(|j| {
            let (x, y) = fwd.apply(j.x, j.y);
            Joint { x, y, ..*j }
        })
        .collect();
    let joints = if draw.flip {
        let mut swapped = moved.clone();
        for (i, j) in moved.into_iter().enumerate() {
            swapped[mirror[i]] = j;
        }
        swapped
    } else {
        moved
    };
    Ok((out, Pose::new(joints)))
}

pub fn augment(
    frame: &Tensor,
    pose: &Pose,
    params: &AugmentParams,
    mirror: &[usize],
    rng: &mut impl Rng,
) -> Result<(Tensor, Pose)> {
    params.validate(frame.height(), frame.width())?;
    let draw = params.draw(frame.height(), frame.width(), rng);
    apply_augment(frame, pose, params, &draw, mirror)
}

/// Piecewise-constant learning rate: `base`, replaced by each `(from, lr)`
/// once the iteration reaches `from`.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub steps: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            base: lr,
            steps: Vec::new(),
        }
    }

    /// Two tenfold decays, at 2/3 and at 5/6 of `total` iterations.
    pub fn step_decay(lr: f64, total: usize) -> Self {
        LrSchedule {
            base: lr,
            steps: vec![(total * 2 / 3, lr * 0.1), (total * 5 / 6, lr * 0.01)],
        }
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        self.steps
            .iter()
            .filter(|(from, _)| iteration >= *from)
            .last()
            .map_or(self.base, |s| s.1)
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub momentum: f64,
    pub schedule: LrSchedule,
    pub velocity: Vec<Vec<f64>>,
    pub iteration: usize,
}

impl OptimizerState {
    pub fn new(momentum: f64, schedule: LrSchedule) -> Self {
        OptimizerState {
            momentum,
            schedule,
            velocity: Vec::new(),
            iteration: 0,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.schedule.lr_at(self.iteration)
    }
}

/// `v <- mu v - lr g; p <- p + v` for every parameter buffer, with `lr`
/// taken from the schedule at the current iteration.
pub fn sgd_momentum_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(
            "sgd",
            format!("{} parameters, {} gradients", params.len(), grads.len()),
        ));
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || state.velocity[i].len() != p.len() {
            return Err(Error::shape(
                "sgd",
                format!("parameter {i}: {} values, {} gradients", p.len(), g.len()),
            ));
        }
    }
    let lr = state.learning_rate();
    let mu = state.momentum;
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((pi, gi), vi) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
            *vi = mu * *vi - lr * gi;
            *pi += *vi;
        }
    }
    state.iteration += 1;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub iters: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    /// Crop side in pixels; `0` keeps the full frame.
    pub crop: usize,
    pub flip: f64,
    /// Rotation half-range in degrees.
    pub rotation: f64,
    pub sigma: f64,
    /// Temporal neighbourhood for the pooling stage.
    pub n: usize,
    pub pooling_type: PoolingMode,
    /// Preset the network is built from: `desk`, `compact` or `toy`.
    pub network: String,
    pub model: ModelKind,
    pub fusion: bool,
    pub shuffle: bool,
    pub val_every: usize,
    /// Trailing frames of the data directory held out for validation.
    pub val_frames: usize,
    /// Validation PCK threshold, input pixels.
    pub val_d: f64,
    pub pool_iters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            iters: 1500,
            lr: 2.0,
            momentum: 0.95,
            batch: 8,
            crop: 0,
            flip: 0.5,
            rotation: 40.0,
            sigma: DEFAULT_SIGMA,
            n: 15,
            pooling_type: PoolingMode::Parametric,
            network: "compact".into(),
            model: ModelKind::Heatmap,
            fusion: true,
            shuffle: true,
            val_every: 100,
            val_frames: 100,
            val_d: 8.0,
            pool_iters: 20_000,
        }
    }
}

const TRAIN_KEYS: &[&str] = &[
    "seed",
    "iters",
    "lr",
    "momentum",
    "batch",
    "crop",
    "flip",
    "rotation",
    "sigma",
    "n",
    "pooling_type",
    "network",
    "model",
    "fusion",
    "shuffle",
    "val_every",
    "val_frames",
    "val_d",
    "pool_iters",
];

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let m = kv::parse(text, TRAIN_KEYS)?;
        let mut c = TrainConfig::default();
        kv::set(&m, "seed", &mut c.seed)?;
        kv::set(&m, "iters", &mut c.iters)?;
        kv::set(&m, "lr", &mut c.lr)?;
        kv::set(&m, "momentum", &mut c.momentum)?;
        kv::set(&m, "batch", &mut c.batch)?;
        kv::set(&m, "crop", &mut c.crop)?;
        kv::set(&m, "flip", &mut c.flip)?;
        kv::set(&m, "rotation", &mut c.rotation)?;
        kv::set(&m, "sigma", &mut c.sigma)?;
        kv::set(&m, "n", &mut c.n)?;
        kv::set(&m, "pooling_type", &mut c.pooling_type)?;
        kv::set(&m, "network", &mut c.network)?;
        if let Some(v) = m.get("model") {
            c.model = match v.as_str() {
                "heatmap" => ModelKind::Heatmap,
                "coordinate" => ModelKind::Coordinate,
                _ => return Err(Error::config("model", format!("unknown model {v}"))),
            };
        }
        kv::set(&m, "fusion", &mut c.fusion)?;
        kv::set(&m, "shuffle", &mut c.shuffle)?;
        kv::set(&m, "val_every", &mut c.val_every)?;
        kv::set(&m, "val_frames", &mut c.val_frames)?;
        kv::set(&m, "val_d", &mut c.val_d)?;
        kv::set(&m, "pool_iters", &mut c.pool_iters)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mode = match self.pooling_type {
            PoolingMode::Parametric => "parametric",
            PoolingMode::Sum => "sum",
            PoolingMode::Max => "max",
        };
        let model = match self.model {
            ModelKind::Heatmap => "heatmap",
            ModelKind::Coordinate => "coordinate",
        };
        for (k, v) in [
            ("seed", self.seed.to_string()),
            ("iters", self.iters.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("momentum", format!("{:?}", self.momentum)),
            ("batch", self.batch.to_string()),
            ("crop", self.crop.to_string()),
            ("flip", format!("{:?}", self.flip)),
            ("rotation", format!("{:?}", self.rotation)),
            ("sigma", format!("{:?}", self.sigma)),
            ("n", self.n.to_string()),
            ("pooling_type", mode.to_string()),
            ("network", self.network.clone()),
            ("model", model.to_string()),
            ("fusion", self.fusion.to_string()),
            ("shuffle", self.shuffle.to_string()),
            ("val_every", self.val_every.to_string()),
            ("val_frames", self.val_frames.to_string()),
            ("val_d", format!("{:?}", self.val_d)),
            ("pool_iters", self.pool_iters.to_string()),
        ] {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("iters", self.iters as f64),
            ("batch", self.batch as f64),
            ("lr", self.lr),
            ("sigma", self.sigma),
            ("val_every", self.val_every as f64),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(k, "must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must be in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.flip) {
            return Err(Error::config("flip", "probability must be in [0, 1]"));
        }
        if !(0.0..=180.0).contains(&self.rotation) {
            return Err(Error::config("rotation", "range must be in [0, 180] degrees"));
        }
        if !(self.val_d >= 0.0) {
            return Err(Error::config("val_d", "must be non-negative"));
        }
        if !["desk", "compact", "toy"].contains(&self.network.as_str()) {
            return Err(Error::config("network", format!("unknown preset {}", self.network)));
        }
        Ok(())
    }

    /// Network configuration for frames of `input` pixels and `joints` joints.
    pub fn network_config(&self, input: usize, joints: usize) -> Result<NetworkConfig> {
        let base = match self.network.as_str() {
            "desk" => NetworkConfig::desk(input, joints),
            "compact" => NetworkConfig::compact(input, joints),
            "toy" => NetworkConfig::toy(input, joints),
            other => return Err(Error::config("network", format!("unknown preset {other}"))),
        };
        let cfg = match self.model {
            ModelKind::Coordinate => NetworkConfig::coordinate_baseline(base),
            ModelKind::Heatmap if self.fusion => base,
            ModelKind::Heatmap => base.without_fusion(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn augment_params(&self, input: usize) -> AugmentParams {
        AugmentParams {
            crop_size: if self.crop == 0 { input } else { self.crop },
            flip_prob: self.flip,
            rotation_range: self.rotation,
            output_size: input,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub iteration: usize,
    pub train_loss: f64,
    pub val_pck: Option<f64>,
}

pub fn curve_to_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("iteration,train_loss,val_pck\n");
    for p in curve {
        match p.val_pck {
            Some(v) => writeln!(s, "{},{:?},{:?}", p.iteration, p.train_loss, v),
            None => writeln!(s, "{},{:?},", p.iteration, p.train_loss),
        }
        .unwrap();
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights with the best validation PCK (the last one on ties).
    pub best: Network,
    pub best_iteration: usize,
    pub best_val_pck: f64,
    pub last: Network,
    pub curve: Vec<CurvePoint>,
}

/// Mean PCK over all joints at `d` input pixels.
pub fn validation_pck(net: &Network, val: &Dataset, d: f64) -> Result<f64> {
    let preds = predict_dataset(net, &val.frames)?;
    let curve = eval::pck(&preds, &val.poses, &[d])?;
    Ok(curve.mean_at(0))
}

/// Poses for every frame, evaluated in small batches.
pub fn predict_dataset(net: &Network, frames: &[Tensor]) -> Result<Vec<Pose>> {
    let mut out = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(16) {
        out.extend(net.predict_poses(&Tensor::stack(chunk)?)?);
    }
    Ok(out)
}

/// One optimisation step on a batch; returns the loss before the update.
pub fn train_step(
    net: &mut Network,
    frames: &Tensor,
    poses: &[Pose],
    sigma: f64,
    opt: &mut OptimizerState,
) -> Result<f64> {
    let mut tape = Tape::new();
    let params = net.bind(&mut tape, true);
    let x = tape.constant(frames.clone());
    let out = net.forward(&mut tape, &params, x)?;
    let loss = match net.config().kind {
        ModelKind::Coordinate => net.coordinate_loss(&mut tape, &out, poses)?,
        ModelKind::Heatmap => {
            let (h, w) = net.config().heatmap_size();
            let scale = net.scale();
            let k = net.config().joints;
            let mut targets = Tensor::zeros([poses.len(), k, h, w]);
            let mut mask = Vec::with_capacity(poses.len() * k);
            for (b, p) in poses.iter().enumerate() {
                let t = synthesize_target(p, sigma, (h, w), scale)?;
                let n = k * h * w;
                targets.data_mut()[b * n..(b + 1) * n].copy_from_slice(t.tensor().data());
                mask.extend(target_mask(p, (h, w), scale));
            }
            net.heatmap_loss(&mut tape, &out, &targets, &mask)?
        }
    };
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::Diverged {
            iteration: opt.iteration,
            loss: value,
        });
    }
    tape.backward(loss)?;
    let grads: Vec<Vec<f64>> = params
        .iter()
        .map(|&p| tape.grad(p).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();
    let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
    let mut values: Vec<&mut [f64]> = net.params_mut().iter_mut().map(|p| p.value.data_mut()).collect();
    sgd_momentum_step(&mut values, &grad_refs, opt)?;
    Ok(value)
}

/// Trains `net` on `train` with seeded shuffling and augmentation,
/// evaluating validation PCK every `val_every` iterations and at the end.
pub fn train(
    mut net: Network,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    skeleton: &Skeleton,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let (h, w) = net.config().input_size;
    if h != w {
        return Err(Error::Invalid("augmentation expects square frames".into()));
    }
    let aug = cfg.augment_params(h);
    aug.validate(h, w)?;
    let mirror = skeleton.mirror_map();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(cfg.momentum, LrSchedule::step_decay(cfg.lr, cfg.iters));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut curve = Vec::with_capacity(cfg.iters);
    let mut best: Option<(f64, usize, Network)> = None;

    for it in 1..=cfg.iters {
        let mut frames = Vec::with_capacity(cfg.batch);
        let mut poses = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            if cursor == order.len() {
                if cfg.shuffle {
                    order.shuffle(&mut rng);
                }
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            let (f, p) = augment(&train.frames[i], &train.poses[i], &aug, &mirror, &mut rng)?;
            frames.push(f);
            poses.push(p);
        }
        let loss = train_step(&mut net, &Tensor::stack(&frames)?, &poses, cfg.sigma, &mut opt)?;
        let val_pck = if !val.is_empty() && (it % cfg.val_every == 0 || it == cfg.iters) {
            let v = validation_pck(&net, val, cfg.val_d)?;
            if best.as_ref().map_or(true, |b| v >= b.0) {
                best = Some((v, it, net.clone()));
            }
            Some(v)
        } else {
            None
        };
        curve.push(CurvePoint {
            iteration: it,
            train_loss: loss,
            val_pck,
        });
    }
    let (best_val_pck, best_iteration, best) = best.unwrap_or((f64::NAN, cfg.iters, net.clone()));
    Ok(TrainOutcome {
        best,
        best_iteration,
        best_val_pck,
        last: net,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::{LEFT_WRIST, RIGHT_WRIST};

    fn blob_frame(size: usize, cx: f64, cy: f64) -> Tensor {
        Tensor::from_fn([1, 1, size, size], |[_, _, y, x]| {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            (-d2 / 8.0).exp()
        })
    }

    fn centroid(frame: &Tensor) -> (f64, f64) {
        let w = frame.width();
        let (mut sx, mut sy, mut s) = (0.0, 0.0, 0.0);
        for (i, &v) in frame.plane(0, 0).iter().enumerate() {
            let v = v * v * v; // emphasise the blob over border replication
            sx += v * (i % w) as f64;
            sy += v * (i / w) as f64;
            s += v;
        }
        (sx / s, sy / s)
    }

    #[test]
    fn identity_augmentation_is_a_no_op() {
        let f = blob_frame(16, 5.0, 9.0);
        let p = Pose::from_points(&[(5.0, 9.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (g, q) = augment(&f, &p, &AugmentParams::identity(16), &[0], &mut rng).unwrap();
        assert!(g.bit_eq(&f));
        assert_eq!(q, p);
    }

    #[test]
    fn flip_mirrors_and_swaps_labels() {
        let skel = Skeleton::upper_body();
        let f = blob_frame(16, 3.0, 7.0);
        let mut p = Pose::from_points(&[(1.0, 1.0); 7]);
        p.joints[LEFT_WRIST] = Joint::new(3.0, 7.0);
        p.joints[RIGHT_WRIST] = Joint::new(12.0, 2.0);
        let params = AugmentParams::identity(16);
        let draw = AugmentDraw {
            crop_x: 0,
            crop_y: 0,
            flip: true,
            angle_deg: 0.0,
        };
        let (g, q) = apply_augment(&f, &p, &params, &draw, &skel.mirror_map()).unwrap();
        assert_eq!((q.joints[RIGHT_WRIST].x, q.joints[RIGHT_WRIST].y), (12.0, 7.0));
        assert_eq!((q.joints[LEFT_WRIST].x, q.joints[LEFT_WRIST].y), (3.0, 2.0));
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(g.at(0, 0, y, x), f.at(0, 0, y, 15 - x));
            }
        }
    }

    #[test]
    fn rotation_moves_joint_with_the_blob() {
        let f = blob_frame(32, 10.0, 12.0);
        let p = Pose::from_points(&[(10.0, 12.0)]);
        let params = AugmentParams {
            crop_size: 32,
            flip_prob: 0.0,
            rotation_range: 90.0,
            output_size: 32,
        };
        for angle in [90.0, -90.0, 33.0] {
            let draw = AugmentDraw {
                crop_x: 0,
                crop_y: 0,
                flip: false,
                angle_deg: angle,
            };
            let (g, q) = apply_augment(&f, &p, &params, &draw, &[0]).unwrap();
            let (cx, cy) = centroid(&g);
            assert!((cx - q.joints[0].x).abs() < 1.0 && (cy - q.joints[0].y).abs() < 1.0, "{angle}");
        }
    }

    #[test]
    fn crop_and_resize_keep_correspondence() {
        let f = blob_frame(32, 14.0, 17.0);
        let p = Pose::from_points(&[(14.0, 17.0)]);
        let params = AugmentParams {
            crop_size: 24,
            flip_prob: 0.5,
            rotation_range: 40.0,
            output_size: 32,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let (g, q) = augment(&f, &p, &params, &[0], &mut rng).unwrap();
            let (cx, cy) = centroid(&g);
            assert!((cx - q.joints[0].x).abs() < 1.0 && (cy - q.joints[0].y).abs() < 1.0);
        }
        let too_big = AugmentParams {
            crop_size: 40,
            ..params
        };
        assert!(augment(&f, &p, &too_big, &[0], &mut rng).is_err());
    }

    #[test]
    fn affine_inverse() {
        let draw = AugmentDraw {
            crop_x: 3,
            crop_y: 1,
            flip: true,
            angle_deg: 17.0,
        };
        let params = AugmentParams {
            crop_size: 20,
            flip_prob: 1.0,
            rotation_range: 40.0,
            output_size: 28,
        };
        let m = draw.affine(&params);
        let (x, y) = m.inverse().apply(m.apply(4.5, -2.0).0, m.apply(4.5, -2.0).1);
        assert!((x - 4.5).abs() < 1e-12 && (y + 2.0).abs() < 1e-12);
    }

    #[test]
    fn sgd_steps() {
        let mut p = vec![0.0];
        let mut st = OptimizerState::new(0.0, LrSchedule::constant(1.0));
        sgd_momentum_step(&mut [&mut p[..]], &[&[1.0]], &mut st).unwrap();
        assert_eq!(p, vec![-1.0]);

        let mut p = vec![0.0];
        let mut st = OptimizerState::new(0.95, LrSchedule::constant(0.1));
        sgd_momentum_step(&mut [&mut p[..]], &[&[2.0]], &mut st).unwrap();
        let p1 = p[0];
        sgd_momentum_step(&mut [&mut p[..]], &[&[2.0]], &mut st).unwrap();
        assert!((p[0] - p1 - (-0.1 * 2.0 * 1.95)).abs() < 1e-15);

        // zero gradient: the velocity decays geometrically, p converges
        let mut prev = p[0];
        let mut step = f64::INFINITY;
        for _ in 0..500 {
            sgd_momentum_step(&mut [&mut p[..]], &[&[0.0]], &mut st).unwrap();
            let s = (p[0] - prev).abs();
            assert!(s <= step);
            step = s;
            prev = p[0];
        }
        assert!(step < 1e-10);

        assert!(sgd_momentum_step(&mut [&mut p[..]], &[&[1.0, 2.0]], &mut st).is_err());
    }

    #[test]
    fn step_decay_schedule() {
        let s = LrSchedule::step_decay(0.3, 600);
        assert_eq!(s.lr_at(0), 0.3);
        assert_eq!(s.lr_at(399), 0.3);
        assert!((s.lr_at(400) - 0.03).abs() < 1e-15);
        assert!((s.lr_at(500) - 0.003).abs() < 1e-15);
    }

    #[test]
    fn config_round_trip_and_errors() {
        let c = TrainConfig::parse("seed = 4\niters = 10\npooling_type = max\nmodel = coordinate\n").unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.pooling_type, PoolingMode::Max);
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
        for (text, key) in [
            ("lr = -1", "lr"),
            ("momentum = 1.5", "momentum"),
            ("pooling_type = mean", "pooling_type"),
            ("network = huge", "network"),
            ("iters = many", "iters"),
        ] {
            let e = TrainConfig::parse(text).unwrap_err();
            assert!(e.to_string().contains(key), "{e}");
        }
    }
}
