//! Synthetic articulated-puppet video with exact joints and exact flow.
//!
//! The puppet is a kinematic tree hanging off a neck point. Every drawn part
//! (torso, bones, head disc, joint markers) moves rigidly with one tree
//! node, so the displacement of any foreground pixel between two frames is
//! the composition of that part's two rigid placements; background pixels
//! move with the global drift. Appearance noise (pixel noise and random
//! distractor blobs) is drawn per frame and does not take part in the flow.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_3, PI};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::kv;
use crate::pose::{Joint, Pose, Skeleton};
use crate::tensor::{io as tio, Tensor};

pub type Rgb = [f64; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct JointSpec {
    pub name: String,
    /// `None` attaches the joint to the neck.
    pub parent: Option<usize>,
    /// Bone length from the parent (or neck), pixels.
    pub length: f64,
    pub bone_radius: f64,
    pub bone_color: Rgb,
    /// Direction relative to the parent bone (to the torso axis for neck
    /// children), radians.
    pub rest_angle: f64,
    /// Half-width of the allowed angle interval around `rest_angle`.
    pub angle_range: f64,
    pub marker_color: Rgb,
    /// Extra disc drawn at the joint (the head).
    pub end_disc: Option<(f64, Rgb)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PuppetSpec {
    pub width: usize,
    pub height: usize,
    pub joints: Vec<JointSpec>,
    pub mirror_pairs: Vec<(usize, usize)>,
    pub torso_length: f64,
    pub torso_radius: f64,
    pub torso_color: Rgb,
    pub marker_radius: f64,
    /// Half-range of the torso tilt, radians.
    pub tilt_range: f64,
    /// Bound on every angular velocity, radians per frame.
    pub max_angular_speed: f64,
    /// Standard deviation of the per-frame angular acceleration.
    pub angular_accel: f64,
    /// Box `(x0, x1, y0, y1)` the neck wanders in.
    pub neck_box: (f64, f64, f64, f64),
    /// Bound on the neck speed, pixels per frame.
    pub neck_speed: f64,
    pub background: Rgb,
    pub texture_amplitude: f64,
    /// Global background translation per frame.
    pub drift: (f64, f64),
    /// Standard deviation of i.i.d. per-pixel noise.
    pub pixel_noise: f64,
    /// Random marker-coloured blobs per frame.
    pub distractors: usize,
    /// Joints are kept at least this far inside the frame.
    pub margin: f64,
}

impl PuppetSpec {
    /// Seven-joint upper body on a 64x64 frame.
    pub fn upper_body() -> Self {
        let names = Skeleton::upper_body().names;
        let j = |i: usize, parent, length, bone_radius, bone_color, rest_angle, angle_range, marker_color| JointSpec {
            name: names[i].clone(),
            parent,
            length,
            bone_radius,
            bone_color,
            rest_angle,
            angle_range,
            marker_color,
            end_disc: None,
        };
        let torso = [0.55, 0.45, 0.35];
        let mut head = j(0, None, 9.0, 2.0, torso, PI, 0.25, [0.95, 0.95, 0.95]);
        head.end_disc = Some((5.0, [0.85, 0.7, 0.55]));
        PuppetSpec {
            width: 64,
            height: 64,
            joints: vec![
                head,
                j(1, None, 7.0, 2.5, torso, -FRAC_PI_2, 0.1, [0.0, 0.9, 0.0]),
                j(2, None, 7.0, 2.5, torso, FRAC_PI_2, 0.1, [0.9, 0.0, 0.9]),
                j(3, Some(1), 11.0, 2.5, [0.2, 0.35, 0.8], FRAC_PI_3, 1.0, [0.0, 0.0, 1.0]),
                j(4, Some(2), 11.0, 2.5, [0.8, 0.3, 0.2], -FRAC_PI_3, 1.0, [1.0, 0.0, 0.0]),
                j(5, Some(3), 10.0, 2.0, [0.3, 0.7, 0.9], 0.6, 1.2, [0.0, 1.0, 1.0]),
                j(6, Some(4), 10.0, 2.0, [0.9, 0.6, 0.2], -0.6, 1.2, [1.0, 1.0, 0.0]),
            ],
            mirror_pairs: Skeleton::upper_body().mirror_pairs,
            torso_length: 22.0,
            torso_radius: 6.0,
            torso_color: torso,
            marker_radius: 2.0,
            tilt_range: 0.15,
            max_angular_speed: 0.12,
            angular_accel: 0.03,
            neck_box: (26.0, 38.0, 18.0, 26.0),
            neck_speed: 0.4,
            background: [0.4, 0.4, 0.45],
            texture_amplitude: 0.06,
            drift: (0.0, 0.0),
            pixel_noise: 0.0,
            distractors: 0,
            margin: 3.0,
        }
    }

    pub fn skeleton(&self) -> Skeleton {
        Skeleton {
            names: self.joints.iter().map(|j| j.name.clone()).collect(),
            mirror_pairs: self.mirror_pairs.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("width", "frame must be non-empty"));
        }
        if self.joints.is_empty() {
            return Err(Error::config("joints", "puppet needs at least one joint"));
        }
        for (i, j) in self.joints.iter().enumerate() {
            // parents precede children, so the tree is connected and acyclic
            if j.parent.map_or(false, |p| p >= i) {
                return Err(Error::config(
                    "parent",
                    format!("joint {} must come after its parent", j.name),
                ));
            }
            if !(j.length > 0.0) || !(j.bone_radius >= 0.0) || !(j.angle_range >= 0.0) {
                return Err(Error::config("length", format!("joint {} has invalid geometry", j.name)));
            }
        }
        let (x0, x1, y0, y1) = self.neck_box;
        if !(x0 <= x1 && y0 <= y1) {
            return Err(Error::config("neck_box", "empty box"));
        }
        for key_val in [
            ("max_angular_speed", self.max_angular_speed),
            ("angular_accel", self.angular_accel),
            ("neck_speed", self.neck_speed),
            ("pixel_noise", self.pixel_noise),
            ("tilt_range", self.tilt_range),
        ] {
            if !(key_val.1 >= 0.0) {
                return Err(Error::config(key_val.0, "must be non-negative"));
            }
        }
        // the rest pose at the box centre must fit with margin
        let state = State::rest(self);
        if !state.inside(self) {
            return Err(Error::config("neck_box", "rest pose leaves the frame"));
        }
        Ok(())
    }

    /// Overrides of the scalar fields, as `key = value` lines.
    pub fn parse(text: &str) -> Result<Self> {
        const KEYS: &[&str] = &[
            "width",
            "height",
            "max_angular_speed",
            "angular_accel",
            "neck_speed",
            "tilt_range",
            "texture_amplitude",
            "drift_x",
            "drift_y",
            "pixel_noise",
            "distractors",
            "marker_radius",
            "margin",
        ];
        let m = kv::parse(text, KEYS)?;
        let mut s = PuppetSpec::upper_body();
        kv::set(&m, "width", &mut s.width)?;
        kv::set(&m, "height", &mut s.height)?;
        // keep the neck box centred relative to the frame
        let (dx, dy) = (s.width as f64 - 64.0, s.height as f64 - 64.0);
        s.neck_box = (
            s.neck_box.0 + dx / 2.0,
            s.neck_box.1 + dx / 2.0,
            s.neck_box.2 + dy / 2.0,
            s.neck_box.3 + dy / 2.0,
        );
        kv::set(&m, "max_angular_speed", &mut s.max_angular_speed)?;
        kv::set(&m, "angular_accel", &mut s.angular_accel)?;
        kv::set(&m, "neck_speed", &mut s.neck_speed)?;
        kv::set(&m, "tilt_range", &mut s.tilt_range)?;
        kv::set(&m, "texture_amplitude", &mut s.texture_amplitude)?;
        kv::set(&m, "drift_x", &mut s.drift.0)?;
        kv::set(&m, "drift_y", &mut s.drift.1)?;
        kv::set(&m, "pixel_noise", &mut s.pixel_noise)?;
        kv::set(&m, "distractors", &mut s.distractors)?;
        kv::set(&m, "marker_radius", &mut s.marker_radius)?;
        kv::set(&m, "margin", &mut s.margin)?;
        s.validate()?;
        Ok(s)
    }

    /// Disables all motion.
    pub fn frozen(mut self) -> Self {
        self.max_angular_speed = 0.0;
        self.neck_speed = 0.0;
        self.drift = (0.0, 0.0);
        self
    }
}

/// Kinematic state of one frame.
#[derive(Clone, Debug, PartialEq)]
struct State {
    neck: (f64, f64),
    neck_vel: (f64, f64),
    tilt: f64,
    /// Relative joint angles; index 0 of `vel` is the tilt.
    rel: Vec<f64>,
    vel: Vec<f64>,
}

impl State {
    fn rest(spec: &PuppetSpec) -> State {
        let (x0, x1, y0, y1) = spec.neck_box;
        State {
            neck: ((x0 + x1) / 2.0, (y0 + y1) / 2.0),
            neck_vel: (0.0, 0.0),
            tilt: 0.0,
            rel: spec.joints.iter().map(|j| j.rest_angle).collect(),
            vel: vec![0.0; spec.joints.len() + 1],
        }
    }

    fn torso_angle(&self) -> f64 {
        FRAC_PI_2 + self.tilt
    }

    /// Absolute bone angles and joint positions.
    fn kinematics(&self, spec: &PuppetSpec) -> (Vec<f64>, Vec<(f64, f64)>) {
        let mut abs = Vec::with_capacity(spec.joints.len());
        let mut pos: Vec<(f64, f64)> = Vec::with_capacity(spec.joints.len());
        for (i, j) in spec.joints.iter().enumerate() {
            let (base_angle, origin) = match j.parent {
                None => (self.torso_angle(), self.neck),
                Some(p) => (abs[p], pos[p]),
            };
            let a = base_angle + self.rel[i];
            abs.push(a);
            pos.push((origin.0 + j.length * a.cos(), origin.1 + j.length * a.sin()));
        }
        (abs, pos)
    }

    fn inside(&self, spec: &PuppetSpec) -> bool {
        let (_, pos) = self.kinematics(spec);
        let (w, h) = (spec.width as f64 - 1.0, spec.height as f64 - 1.0);
        let m = spec.margin;
        pos.iter()
            .chain(std::iter::once(&self.neck))
            .all(|&(x, y)| x >= m && y >= m && x <= w - m && y <= h - m)
    }

    fn pose(&self, spec: &PuppetSpec) -> Pose {
        let (_, pos) = self.kinematics(spec);
        Pose::new(pos.into_iter().map(|(x, y)| Joint::new(x, y)).collect())
    }
}

fn reflect(value: f64, vel: f64, lo: f64, hi: f64) -> (f64, f64) {
    if value < lo {
        (2.0 * lo - value, -vel)
    } else if value > hi {
        (2.0 * hi - value, -vel)
    } else {
        (value, vel)
    }
}

fn step(spec: &PuppetSpec, s: &State, rng: &mut ChaCha8Rng) -> State {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut next = s.clone();
    let clamp = |v: f64, m: f64| v.clamp(-m, m);
    for d in 0..next.vel.len() {
        let kick = spec.angular_accel * normal.sample(rng);
        next.vel[d] = clamp(0.9 * next.vel[d] + kick, spec.max_angular_speed);
    }
    let (t, v) = reflect(s.tilt + next.vel[0], next.vel[0], -spec.tilt_range, spec.tilt_range);
    next.tilt = t;
    next.vel[0] = v;
    for (i, j) in spec.joints.iter().enumerate() {
        let (a, v) = reflect(
            s.rel[i] + next.vel[i + 1],
            next.vel[i + 1],
            j.rest_angle - j.angle_range,
            j.rest_angle + j.angle_range,
        );
        next.rel[i] = a;
        next.vel[i + 1] = v;
    }
    let kick = (normal.sample(rng), normal.sample(rng));
    let (x0, x1, y0, y1) = spec.neck_box;
    let nv = (
        clamp(0.9 * s.neck_vel.0 + 0.25 * spec.neck_speed * kick.0, spec.neck_speed),
        clamp(0.9 * s.neck_vel.1 + 0.25 * spec.neck_speed * kick.1, spec.neck_speed),
    );
    let (nx, vx) = reflect(s.neck.0 + nv.0, nv.0, x0, x1);
    let (ny, vy) = reflect(s.neck.1 + nv.1, nv.1, y0, y1);
    next.neck = (nx, ny);
    next.neck_vel = (vx, vy);
    if next.inside(spec) {
        next
    } else {
        // stay put and turn around
        let mut back = s.clone();
        back.vel.iter_mut().for_each(|v| *v = -*v);
        back.neck_vel = (-s.neck_vel.0, -s.neck_vel.1);
        back
    }
}

/// A drawable shape rigidly attached to a placement `(origin, angle)`.
#[derive(Clone, Debug)]
struct Part {
    a: (f64, f64),
    b: (f64, f64),
    radius: f64,
    color: Rgb,
    origin: (f64, f64),
    angle: f64,
}

impl Part {
    fn signed_distance(&self, p: (f64, f64)) -> f64 {
        let (dx, dy) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let (px, py) = (p.0 - self.a.0, p.1 - self.a.1);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            ((px * dx + py * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (px - t * dx).hypot(py - t * dy) - self.radius
    }
}

/// Parts in drawing order; the list layout is identical for every state.
fn parts(spec: &PuppetSpec, s: &State) -> Vec<Part> {
    let (abs, pos) = s.kinematics(spec);
    let ta = s.torso_angle();
    let mut out = vec![Part {
        a: s.neck,
        b: (
            s.neck.0 + spec.torso_length * ta.cos(),
            s.neck.1 + spec.torso_length * ta.sin(),
        ),
        radius: spec.torso_radius,
        color: spec.torso_color,
        origin: s.neck,
        angle: ta,
    }];
    for (i, j) in spec.joints.iter().enumerate() {
        let from = j.parent.map_or(s.neck, |p| pos[p]);
        out.push(Part {
            a: from,
            b: pos[i],
            radius: j.bone_radius,
            color: j.bone_color,
            origin: from,
            angle: abs[i],
        });
    }
    for (i, j) in spec.joints.iter().enumerate() {
        if let Some((r, color)) = j.end_disc {
            out.push(Part {
                a: pos[i],
                b: pos[i],
                radius: r,
                color,
                origin: pos[i],
                angle: abs[i],
            });
        }
    }
    for (i, j) in spec.joints.iter().enumerate() {
        out.push(Part {
            a: pos[i],
            b: pos[i],
            radius: spec.marker_radius,
            color: j.marker_color,
            origin: pos[i],
            angle: abs[i],
        });
    }
    out
}

/// Static background: a few low-contrast plane waves per channel.
#[derive(Clone, Debug)]
struct Texture {
    waves: Vec<(f64, f64, f64, usize)>,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng) -> Texture {
        Texture {
            waves: (0..6)
                .map(|i| {
                    let angle = rng.gen_range(0.0..2.0 * PI);
                    let freq = rng.gen_range(0.15..0.5);
                    (freq * angle.cos(), freq * angle.sin(), rng.gen_range(0.0..2.0 * PI), i % 3)
                })
                .collect(),
        }
    }

    fn value(&self, spec: &PuppetSpec, x: f64, y: f64, channel: usize) -> f64 {
        let mut v = 0.0;
        for &(kx, ky, phase, c) in &self.waves {
            if c == channel {
                v += (kx * x + ky * y + phase).sin();
            }
        }
        spec.background[channel] + 0.5 * spec.texture_amplitude * v
    }
}

fn coverage(sd: f64) -> f64 {
    (0.5 - sd).clamp(0.0, 1.0)
}

fn render(
    spec: &PuppetSpec,
    texture: &Texture,
    t: usize,
    parts: &[Part],
    noise: &[Part],
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let (w, h) = (spec.width, spec.height);
    let mut frame = Tensor::zeros([1, 3, h, w]);
    let shift = (spec.drift.0 * t as f64, spec.drift.1 * t as f64);
    let normal = Normal::new(0.0, 1.0).unwrap();
    for y in 0..h {
        for x in 0..w {
            let p = (x as f64, y as f64);
            let mut rgb = [0.0; 3];
            for (c, v) in rgb.iter_mut().enumerate() {
                *v = texture.value(spec, p.0 - shift.0, p.1 - shift.1, c);
            }
            for part in parts.iter().chain(noise) {
                let cov = coverage(part.signed_distance(p));
                if cov > 0.0 {
                    for c in 0..3 {
                        rgb[c] += cov * (part.color[c] - rgb[c]);
                    }
                }
            }
            for (c, v) in rgb.iter().enumerate() {
                frame.set(0, c, y, x, *v);
            }
        }
    }
    if spec.pixel_noise > 0.0 {
        for v in frame.data_mut() {
            *v += spec.pixel_noise * normal.sample(rng);
        }
    }
    for v in frame.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    frame
}

/// A generated clip: frames, exact poses, and what is needed to evaluate
/// the exact flow between any two of its frames.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub spec: PuppetSpec,
    pub frames: Vec<Tensor>,
    pub poses: Vec<Pose>,
    states: Vec<State>,
}

pub fn generate_sequence(spec: &PuppetSpec, length: usize, seed: u64) -> Result<Sequence> {
    spec.validate()?;
    if length == 0 {
        return Err(Error::Invalid("sequence length must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let texture = Texture::random(&mut rng);
    let mut state = State::rest(spec);
    let (x0, x1, y0, y1) = spec.neck_box;
    state.neck = (rng.gen_range(x0..=x1), rng.gen_range(y0..=y1));
    for (i, j) in spec.joints.iter().enumerate() {
        state.rel[i] = j.rest_angle + j.angle_range * rng.gen_range(-0.5..=0.5);
    }
    if !state.inside(spec) {
        state = State::rest(spec);
    }
    let mut states = Vec::with_capacity(length);
    let mut frames = Vec::with_capacity(length);
    for t in 0..length {
        if t > 0 {
            state = step(spec, &state, &mut rng);
        }
        let noise: Vec<Part> = (0..spec.distractors)
            .map(|_| {
                let j = &spec.joints[rng.gen_range(0..spec.joints.len())];
                let c = (
                    rng.gen_range(0.0..spec.width as f64),
                    rng.gen_range(0.0..spec.height as f64),
                );
                Part {
                    a: c,
                    b: c,
                    radius: spec.marker_radius,
                    color: j.marker_color,
                    origin: c,
                    angle: 0.0,
                }
            })
            .collect();
        frames.push(render(spec, &texture, t, &parts(spec, &state), &noise, &mut rng));
        states.push(state.clone());
    }
    Ok(Sequence {
        spec: spec.clone(),
        poses: states.iter().map(|s| s.pose(spec)).collect(),
        frames,
        states,
    })
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Index of the topmost part covering each pixel centre of frame `t`,
    /// `None` for background.
    pub fn ownership(&self, t: usize) -> Vec<Option<usize>> {
        let ps = parts(&self.spec, &self.states[t]);
        let (w, h) = (self.spec.width, self.spec.height);
        let mut out = vec![None; w * h];
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = ps
                    .iter()
                    .rposition(|p| p.signed_distance((x as f64, y as f64)) < 0.0);
            }
        }
        out
    }

    /// Exact flow from frame `from` to frame `to` at frame resolution.
    pub fn true_flow(&self, from: usize, to: usize) -> Result<FlowField> {
        if from >= self.len() || to >= self.len() {
            return Err(Error::Invalid(format!(
                "flow {from} -> {to} outside a {}-frame sequence",
                self.len()
            )));
        }
        let (w, h) = (self.spec.width, self.spec.height);
        let pa = parts(&self.spec, &self.states[from]);
        let pb = parts(&self.spec, &self.states[to]);
        let dt = to as f64 - from as f64;
        let owner = self.ownership(from);
        let mut flow = FlowField::zeros(w, h).between(from, to);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = match owner[y * w + x] {
                    None => (self.spec.drift.0 * dt, self.spec.drift.1 * dt),
                    Some(i) => {
                        let (a, b) = (&pa[i], &pb[i]);
                        let (px, py) = (x as f64 - a.origin.0, y as f64 - a.origin.1);
                        let rot = b.angle - a.angle;
                        let (c, s) = (rot.cos(), rot.sin());
                        let qx = b.origin.0 + c * px - s * py;
                        let qy = b.origin.1 + s * px + c * py;
                        (qx - x as f64, qy - y as f64)
                    }
                };
                flow.set(x, y, u, v);
            }
        }
        Ok(flow)
    }

    /// Flows between consecutive frames, `t -> t + 1`.
    pub fn consecutive_flows(&self) -> Result<Vec<FlowField>> {
        (1..self.len()).map(|t| self.true_flow(t - 1, t)).collect()
    }
}

/// Gaussian jitter on every joint, then uniform relocation inside the
/// `width x height` frame for a fraction `outlier_rate` of joints.
pub fn add_label_noise(
    poses: &[Pose],
    jitter_sigma: f64,
    outlier_rate: f64,
    frame: (usize, usize),
    seed: u64,
) -> Result<Vec<Pose>> {
    if !(jitter_sigma >= 0.0) || !(0.0..=1.0).contains(&outlier_rate) {
        return Err(Error::Invalid(format!(
            "jitter {jitter_sigma} and outlier rate {outlier_rate} out of range"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    Ok(poses
        .iter()
        .map(|p| {
            let mut p = p.clone();
            for j in &mut p.joints {
                let (nx, ny) = (normal.sample(&mut rng), normal.sample(&mut rng));
                j.x += jitter_sigma * nx;
                j.y += jitter_sigma * ny;
                if rng.gen_bool(outlier_rate) {
                    j.x = rng.gen_range(0.0..frame.0 as f64);
                    j.y = rng.gen_range(0.0..frame.1 as f64);
                }
            }
            p
        })
        .collect())
}

pub fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("frame_{index:05}.tns"))
}

pub fn flow_path(dir: &Path, index: usize, delta: i64) -> PathBuf {
    dir.join(format!("flow_{index:05}_{delta:+03}.flo"))
}

pub const POSES_FILE: &str = "poses.csv";

pub fn poses_to_csv(poses: &[Pose], names: &[String]) -> String {
    let mut s = String::from("frame,joint,x,y,visible\n");
    for (f, p) in poses.iter().enumerate() {
        for (j, joint) in p.joints.iter().enumerate() {
            let name = names.get(j).cloned().unwrap_or_else(|| j.to_string());
            writeln!(s, "{f},{name},{},{},{}", joint.x, joint.y, joint.visible as u8).unwrap();
        }
    }
    s
}

/// Parses `frame,joint,x,y,visible` rows. Joint order is the order of
/// first appearance; every frame must list the same joints in that order.
pub fn poses_from_csv(text: &str, origin: &Path) -> Result<(Vec<Pose>, Vec<String>)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == "frame,joint,x,y,visible" => {}
        _ => return Err(Error::format(origin, "expected header frame,joint,x,y,visible")),
    }
    let mut poses: Vec<Pose> = Vec::new();
    let mut names: Vec<String> = Vec::new();
    for (lineno, line) in lines {
        let bad = |msg: &str| Error::format(origin, format!("line {}: {msg}", lineno + 1));
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != 5 {
            return Err(bad("expected 5 cells"));
        }
        let frame: usize = cells[0].parse().map_err(|_| bad("bad frame index"))?;
        let x: f64 = cells[2].parse().map_err(|_| bad("bad x"))?;
        let y: f64 = cells[3].parse().map_err(|_| bad("bad y"))?;
        let visible = match cells[4] {
            "1" => true,
            "0" => false,
            _ => return Err(bad("visible must be 0 or 1")),
        };
        if frame == poses.len() {
            poses.push(Pose::default());
        } else if frame + 1 != poses.len() {
            return Err(bad("frames must be consecutive from 0"));
        }
        let pose = poses.last_mut().unwrap();
        let slot = pose.joints.len();
        if frame == 0 {
            names.push(cells[1].to_string());
        } else if names.get(slot).map(String::as_str) != Some(cells[1]) {
            return Err(bad("joint order differs from frame 0"));
        }
        pose.joints.push(Joint {
            x,
            y,
            visible,
            confidence: 1.0,
        });
    }
    if poses.iter().any(|p| p.len() != names.len()) {
        return Err(Error::format(origin, "frames list different joint counts"));
    }
    Ok((poses, names))
}

pub fn write_poses(path: impl AsRef<Path>, poses: &[Pose], names: &[String]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, poses_to_csv(poses, names)).map_err(|e| Error::io(path, e))
}

pub fn read_poses(path: impl AsRef<Path>) -> Result<(Vec<Pose>, Vec<String>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    poses_from_csv(&text, path)
}

/// Frames with labels, as stored in a dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub frames: Vec<Tensor>,
    pub poses: Vec<Pose>,
    pub joint_names: Vec<String>,
}

impl Dataset {
    pub fn from_sequence(seq: &Sequence) -> Self {
        Dataset {
            frames: seq.frames.clone(),
            poses: seq.poses.clone(),
            joint_names: seq.spec.skeleton().names,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frames `range` as a new dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            frames: self.frames[range.clone()].to_vec(),
            poses: self.poses[range].to_vec(),
            joint_names: self.joint_names.clone(),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, f) in self.frames.iter().enumerate() {
            tio::write_tensor(frame_path(dir, i), f)?;
        }
        write_poses(dir.join(POSES_FILE), &self.poses, &self.joint_names)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Dataset> {
        let dir = dir.as_ref();
        let (poses, joint_names) = read_poses(dir.join(POSES_FILE))?;
        let frames = (0..poses.len())
            .map(|i| tio::read_tensor(frame_path(dir, i)))
            .collect::<Result<Vec<_>>>()?;
        if let Some(f) = frames.first() {
            if frames.iter().any(|g| g.shape() != f.shape()) {
                return Err(Error::format(dir, "frames differ in shape"));
            }
        }
        Ok(Dataset {
            frames,
            poses,
            joint_names,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::warp_frame;

    fn sd(xs: &[f64]) -> f64 {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
    }

    #[test]
    fn single_frame_has_no_flows() {
        let s = generate_sequence(&PuppetSpec::upper_body(), 1, 3).unwrap();
        assert_eq!(s.len(), 1);
        assert!(s.consecutive_flows().unwrap().is_empty());
        assert!(generate_sequence(&PuppetSpec::upper_body(), 0, 3).is_err());
    }

    #[test]
    fn frozen_puppet_is_static() {
        let s = generate_sequence(&PuppetSpec::upper_body().frozen(), 6, 4).unwrap();
        for f in &s.frames[1..] {
            assert!(f.bit_eq(&s.frames[0]));
        }
        for flow in s.consecutive_flows().unwrap() {
            assert!(flow.u().iter().chain(flow.v()).all(|&x| x.abs() < 1e-12));
        }
    }

    #[test]
    fn same_seed_same_sequence() {
        let mut spec = PuppetSpec::upper_body();
        spec.pixel_noise = 0.05;
        spec.distractors = 2;
        let a = generate_sequence(&spec, 5, 9).unwrap();
        let b = generate_sequence(&spec, 5, 9).unwrap();
        for (x, y) in a.frames.iter().zip(&b.frames) {
            assert!(x.bit_eq(y));
        }
        assert_eq!(a.poses, b.poses);
        let c = generate_sequence(&spec, 5, 10).unwrap();
        assert!(!a.frames[0].bit_eq(&c.frames[0]));
    }

    #[test]
    fn joints_stay_in_frame_and_markers_sit_on_joints() {
        let spec = PuppetSpec::upper_body();
        let s = generate_sequence(&spec, 300, 5).unwrap();
        for (t, p) in s.poses.iter().enumerate() {
            for (j, joint) in p.joints.iter().enumerate() {
                assert!(joint.x >= spec.margin && joint.x <= 63.0 - spec.margin);
                assert!(joint.y >= spec.margin && joint.y <= 63.0 - spec.margin);
                // markers are drawn last, so the nearest pixel carries the
                // marker colour unless a later marker overlaps it
                let (x, y) = (joint.x.round() as usize, joint.y.round() as usize);
                let owner = s.ownership(t)[y * 64 + x].unwrap();
                let n = spec.joints.len();
                let first_marker = parts(&spec, &s.states[t]).len() - n;
                assert!(owner >= first_marker, "frame {t} joint {j}");
            }
        }
    }

    #[test]
    fn true_flow_explains_the_next_frame() {
        let mut spec = PuppetSpec::upper_body();
        spec.drift = (0.3, -0.2);
        let s = generate_sequence(&spec, 40, 6).unwrap();
        for t in 0..39 {
            let flow = s.true_flow(t, t + 1).unwrap();
            let warped = warp_frame(&s.frames[t + 1], &flow).unwrap();
            let owner = s.ownership(t);
            let (mut err, mut count) = (0.0, 0);
            for c in 0..3 {
                for (i, o) in owner.iter().enumerate() {
                    if o.is_some() {
                        err += (warped.plane(0, c)[i] - s.frames[t].plane(0, c)[i]).abs();
                        count += 1;
                    }
                }
            }
            assert!(err / count as f64 <= 0.05, "frame {t}: {}", err / count as f64);
        }
    }

    #[test]
    fn flow_to_self_is_zero() {
        let s = generate_sequence(&PuppetSpec::upper_body(), 3, 7).unwrap();
        let f = s.true_flow(1, 1).unwrap();
        assert!(f.u().iter().chain(f.v()).all(|&x| x == 0.0));
        assert!(s.true_flow(0, 3).is_err());
    }

    #[test]
    fn label_noise_statistics() {
        let poses: Vec<Pose> = (0..5000)
            .map(|_| Pose::from_points(&[(30.0, 30.0), (10.0, 50.0)]))
            .collect();
        assert_eq!(add_label_noise(&poses, 0.0, 0.0, (64, 64), 1).unwrap(), poses);

        let noisy = add_label_noise(&poses, 2.0, 0.0, (64, 64), 2).unwrap();
        let dx: Vec<f64> = noisy
            .iter()
            .zip(&poses)
            .flat_map(|(a, b)| a.joints.iter().zip(&b.joints).map(|(p, q)| p.x - q.x).collect::<Vec<_>>())
            .collect();
        assert_eq!(dx.len(), 10_000);
        assert!((sd(&dx) - 2.0).abs() < 0.1);

        let moved = add_label_noise(&poses, 0.0, 1.0, (64, 64), 3).unwrap();
        let same = moved
            .iter()
            .zip(&poses)
            .flat_map(|(a, b)| a.joints.iter().zip(&b.joints).map(|(p, q)| p == q).collect::<Vec<_>>())
            .filter(|&s| s)
            .count();
        assert_eq!(same, 0);
        assert!(add_label_noise(&poses, 0.0, 1.5, (64, 64), 3).is_err());
    }

    #[test]
    fn file_names() {
        let d = Path::new("d");
        assert_eq!(frame_path(d, 7), Path::new("d/frame_00007.tns"));
        assert_eq!(flow_path(d, 12, -3), Path::new("d/flow_00012_-03.flo"));
        assert_eq!(flow_path(d, 12, 1), Path::new("d/flow_00012_+01.flo"));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_sequence(&PuppetSpec::upper_body(), 3, 8).unwrap();
        let mut ds = Dataset::from_sequence(&s);
        ds.poses[1].joints[2].visible = false;
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.poses, ds.poses);
        assert_eq!(back.joint_names, ds.joint_names);
        for (a, b) in back.frames.iter().zip(&ds.frames) {
            assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn malformed_pose_csv() {
        let p = Path::new("p.csv");
        assert!(poses_from_csv("x,y\n", p).is_err());
        assert!(poses_from_csv("frame,joint,x,y,visible\n0,a,1,2,3\n", p).is_err());
        assert!(poses_from_csv("frame,joint,x,y,visible\n1,a,1,2,1\n", p).is_err());
        let (poses, names) = poses_from_csv("frame,joint,x,y,visible\n0,a,1,2,1\n0,b,3,4,0\n1,a,5,6,1\n1,b,7,8,1\n", p).unwrap();
        assert_eq!(names, vec!["a", "b"]);
        assert_eq!(poses.len(), 2);
        assert!(!poses[0].joints[1].visible);
    }

    #[test]
    fn spec_text_overrides() {
        let s = PuppetSpec::parse("pixel_noise = 0.1\ndistractors = 3\n").unwrap();
        assert_eq!(s.pixel_noise, 0.1);
        assert_eq!(s.distractors, 3);
        let e = PuppetSpec::parse("pixel_noise = -1").unwrap_err();
        assert!(e.to_string().contains("pixel_noise"));
        assert!(PuppetSpec::parse("bogus = 1").is_err());
    }
}
