//! Cross-channel pooling of the `2n + 1` flow-warped heatmap stacks around a
//! reference frame into one composite confidence map per joint.
//!
//! Parametric pooling learns one weight per (temporal offset, joint): a 1x1
//! convolution across the warped maps of each joint, shared over pixels,
//! with no bias and no rectification. Sum and max pooling are the fixed
//! baselines.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::flow::{warp_heatmap, FlowField};
use crate::heatmap::HeatmapStack;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolingMode {
    Parametric,
    Sum,
    Max,
}

impl std::str::FromStr for PoolingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parametric" => Ok(PoolingMode::Parametric),
            "sum" => Ok(PoolingMode::Sum),
            "max" => Ok(PoolingMode::Max),
            _ => Err(Error::config("pooling_type", format!("unknown mode {s}"))),
        }
    }
}

/// `(2n + 1) x k` weights; row `tau` holds temporal offset `tau - n`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolingWeights {
    n: usize,
    joints: usize,
    values: Vec<f64>,
}

impl PoolingWeights {
    pub fn from_values(n: usize, joints: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != (2 * n + 1) * joints {
            return Err(Error::shape(
                "pooling_weights",
                format!("{} values for n = {n}, k = {joints}", values.len()),
            ));
        }
        Ok(PoolingWeights { n, joints, values })
    }

    /// Plain temporal averaging, `1 / (2n + 1)` everywhere.
    pub fn uniform(n: usize, joints: usize) -> Self {
        let t = 2 * n + 1;
        PoolingWeights {
            n,
            joints,
            values: vec![1.0 / t as f64; t * joints],
        }
    }

    /// Selects the reference frame only.
    pub fn center(n: usize, joints: usize) -> Self {
        let mut values = vec![0.0; (2 * n + 1) * joints];
        values[n * joints..(n + 1) * joints].fill(1.0);
        PoolingWeights { n, joints, values }
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn temporal(&self) -> usize {
        2 * self.n + 1
    }
    pub fn joints(&self) -> usize {
        self.joints
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, tau: usize, joint: usize) -> f64 {
        self.values[tau * self.joints + joint]
    }

    pub fn set(&mut self, tau: usize, joint: usize, v: f64) {
        self.values[tau * self.joints + joint] = v;
    }

    /// Weight profile over offsets `-n..=n` for one joint.
    pub fn profile(&self, joint: usize) -> Vec<f64> {
        (0..self.temporal()).map(|t| self.get(t, joint)).collect()
    }

    pub fn scaled(&self, a: f64) -> Self {
        PoolingWeights {
            values: self.values.iter().map(|v| v * a).collect(),
            ..self.clone()
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec([1, 1, self.temporal(), self.joints], self.values.clone()).unwrap()
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [a, b, rows, joints] = t.shape();
        if a != 1 || b != 1 || rows % 2 == 0 {
            return Err(Error::shape(
                "pooling_weights",
                format!("{:?} is not a (1, 1, 2n+1, k) tensor", t.shape()),
            ));
        }
        Self::from_values(rows / 2, joints, t.data().to_vec())
    }

    /// CSV with one row per offset `-n..=n` and one column per joint.
    pub fn to_csv(&self, joint_names: &[String]) -> String {
        let mut s = String::from("offset");
        for j in 0..self.joints {
            match joint_names.get(j) {
                Some(n) => write!(s, ",{n}").unwrap(),
                None => write!(s, ",joint{j}").unwrap(),
            }
        }
        s.push('\n');
        for tau in 0..self.temporal() {
            write!(s, "{}", tau as i64 - self.n as i64).unwrap();
            for j in 0..self.joints {
                write!(s, ",{:?}", self.get(tau, j)).unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::config("weights", "empty CSV"))?;
        let joints = header.split(',').count() - 1;
        let mut values = Vec::new();
        let mut rows = 0;
        for (i, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != joints + 1 {
                return Err(Error::config("weights", format!("row {} has {} cells", i + 1, cells.len())));
            }
            for c in &cells[1..] {
                values.push(
                    c.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::config("weights", format!("bad number `{c}`")))?,
                );
            }
            rows += 1;
        }
        if rows % 2 == 0 {
            return Err(Error::config("weights", format!("{rows} rows, expected 2n+1")));
        }
        Self::from_values(rows / 2, joints, values)
    }
}

fn check_stacks(warped: &[HeatmapStack]) -> Result<()> {
    let first = warped
        .first()
        .ok_or_else(|| Error::Invalid("no heatmap stacks to pool".into()))?;
    for w in warped {
        if w.tensor().shape() != first.tensor().shape() {
            return Err(Error::shape(
                "pool",
                format!("{:?} vs {:?}", w.tensor().shape(), first.tensor().shape()),
            ));
        }
    }
    Ok(())
}

/// `out[c](p) = sum_tau w[tau][c] * warped[tau][c](p)`.
pub fn pool_parametric(warped: &[HeatmapStack], weights: &PoolingWeights) -> Result<HeatmapStack> {
    check_stacks(warped)?;
    let mut tape = Tape::new();
    let stacks: Vec<_> = warped
        .iter()
        .map(|h| tape.constant(h.tensor().clone()))
        .collect();
    let w = tape.constant(weights.to_tensor());
    let out = tape.temporal_pool(&stacks, w)?;
    HeatmapStack::new(tape.value(out).clone())
}

pub fn pool_sum(warped: &[HeatmapStack]) -> Result<HeatmapStack> {
    check_stacks(warped)?;
    let mut out = warped[0].clone();
    for h in &warped[1..] {
        out.tensor_mut()
            .data_mut()
            .iter_mut()
            .zip(h.tensor().data())
            .for_each(|(a, b)| *a += b);
    }
    Ok(out)
}

pub fn pool_max(warped: &[HeatmapStack]) -> Result<HeatmapStack> {
    check_stacks(warped)?;
    let mut out = warped[0].clone();
    for h in &warped[1..] {
        out.tensor_mut()
            .data_mut()
            .iter_mut()
            .zip(h.tensor().data())
            .for_each(|(a, &b)| {
                if b > *a {
                    *a = b
                }
            });
    }
    Ok(out)
}

pub fn pool(mode: PoolingMode, warped: &[HeatmapStack], weights: Option<&PoolingWeights>) -> Result<HeatmapStack> {
    match mode {
        PoolingMode::Sum => pool_sum(warped),
        PoolingMode::Max => pool_max(warped),
        PoolingMode::Parametric => {
            let w = weights.ok_or_else(|| Error::Invalid("parametric pooling needs weights".into()))?;
            pool_parametric(warped, w)
        }
    }
}

/// The `2n + 1` stacks around frame `t`, each warped to `t` and ordered by
/// offset `-n..=n`. Offsets past either end of the sequence reuse the
/// nearest existing frame. `flow(t, s)` must return the flow from `t` to
/// `s` at heatmap resolution; the reference frame itself is not warped.
pub fn warp_window(
    heatmaps: &[HeatmapStack],
    t: usize,
    n: usize,
    mut flow: impl FnMut(usize, usize) -> Result<FlowField>,
) -> Result<Vec<HeatmapStack>> {
    if t >= heatmaps.len() {
        return Err(Error::Invalid(format!("frame {t} outside {} heatmaps", heatmaps.len())));
    }
    let last = heatmaps.len() as i64 - 1;
    (-(n as i64)..=n as i64)
        .map(|off| {
            let s = (t as i64 + off).clamp(0, last) as usize;
            if s == t {
                Ok(heatmaps[t].clone())
            } else {
                warp_heatmap(&heatmaps[s], &flow(t, s)?)
            }
        })
        .collect()
}

/// One training example: the warped stacks around a frame, ordered by
/// offset `-n..=n`, and that frame's target heatmaps.
#[derive(Clone, Debug)]
pub struct PoolingSample {
    pub warped: Vec<HeatmapStack>,
    pub target: HeatmapStack,
    /// Joints that count towards the loss; `None` means all.
    pub mask: Option<Vec<bool>>,
}

#[derive(Clone, Debug)]
pub struct PoolLearnSettings {
    pub iterations: usize,
    pub momentum: f64,
    /// Step size as a fraction of `1 / L`, where `L` is the largest
    /// curvature of the loss for each joint.
    pub relative_lr: f64,
}

impl Default for PoolLearnSettings {
    fn default() -> Self {
        PoolLearnSettings {
            iterations: 20_000,
            momentum: 0.95,
            relative_lr: 1.0,
        }
    }
}

/// Second-order sufficient statistics of the pooling loss for one joint:
/// `loss(w) = (w' G w - 2 b' w + c) / count`.
#[derive(Clone, Debug)]
struct JointStats {
    gram: Vec<f64>,
    cross: Vec<f64>,
    target_sq: f64,
    count: usize,
}

fn joint_stats(samples: &[PoolingSample], t: usize, joint: usize) -> JointStats {
    let mut s = JointStats {
        gram: vec![0.0; t * t],
        cross: vec![0.0; t],
        target_sq: 0.0,
        count: 0,
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    for sample in samples {
        if !sample.mask.as_ref().map_or(true, |m| m[joint]) {
            continue;
        }
        let target = sample.target.plane(joint);
        s.count += target.len();
        s.target_sq += dot(target, target);
        for a in 0..t {
            let xa = sample.warped[a].plane(joint);
            s.cross[a] += dot(xa, target);
            for b in a..t {
                let v = dot(xa, sample.warped[b].plane(joint));
                s.gram[a * t + b] += v;
                if a != b {
                    s.gram[b * t + a] += v;
                }
            }
        }
    }
    s
}

impl JointStats {
    fn loss(&self, w: &[f64]) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        let t = w.len();
        let mut quad = 0.0;
        for a in 0..t {
            for b in 0..t {
                quad += w[a] * self.gram[a * t + b] * w[b];
            }
        }
        let lin: f64 = w.iter().zip(&self.cross).map(|(x, y)| x * y).sum();
        (quad - 2.0 * lin + self.target_sq) / self.count as f64
    }

    fn grad(&self, w: &[f64], out: &mut [f64]) {
        let t = w.len();
        let scale = if self.count == 0 { 0.0 } else { 2.0 / self.count as f64 };
        for a in 0..t {
            let gw: f64 = (0..t).map(|b| self.gram[a * t + b] * w[b]).sum();
            out[a] = scale * (gw - self.cross[a]);
        }
    }

    /// Largest eigenvalue of the Hessian `2 G / count`, by power iteration.
    fn curvature(&self, t: usize) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        let mut v = vec![1.0 / (t as f64).sqrt(); t];
        let mut lambda = 0.0;
        for _ in 0..200 {
            let mut nv: Vec<f64> = (0..t)
                .map(|a| (0..t).map(|b| self.gram[a * t + b] * v[b]).sum())
                .collect();
            let norm = nv.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            nv.iter_mut().for_each(|x| *x /= norm);
            lambda = norm;
            v = nv;
        }
        2.0 * lambda / self.count as f64
    }
}

/// Mean squared pooling loss over all samples and unmasked joints.
pub fn pooling_loss(samples: &[PoolingSample], weights: &PoolingWeights) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for s in samples {
        let pooled = pool_parametric(&s.warped, weights)?;
        for j in 0..weights.joints() {
            if !s.mask.as_ref().map_or(true, |m| m[j]) {
                continue;
            }
            for (p, t) in pooled.plane(j).iter().zip(s.target.plane(j)) {
                sum += (p - t) * (p - t);
            }
            count += s.target.plane(j).len();
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Fits pooling weights by full-batch gradient descent with momentum on the
/// mean squared error between pooled maps and targets, starting at `init`.
///
/// The loss separates over joints and is quadratic in the weights, so the
/// gradient is evaluated from per-joint Gram statistics gathered once.
pub fn learn_pooling_weights(
    samples: &[PoolingSample],
    init: &PoolingWeights,
    settings: &PoolLearnSettings,
) -> Result<PoolingWeights> {
    let t = init.temporal();
    let k = init.joints();
    for (i, s) in samples.iter().enumerate() {
        if s.warped.len() != t {
            return Err(Error::shape(
                "learn_pooling_weights",
                format!("sample {i} has {} stacks, expected {t}", s.warped.len()),
            ));
        }
        check_stacks(&s.warped)?;
        if s.target.tensor().shape() != s.warped[0].tensor().shape() || s.target.joints() != k {
            return Err(Error::shape(
                "learn_pooling_weights",
                format!("sample {i} target {:?}", s.target.tensor().shape()),
            ));
        }
    }
    let mut out = init.clone();
    for j in 0..k {
        let stats = joint_stats(samples, t, j);
        let curvature = stats.curvature(t);
        if curvature == 0.0 {
            continue;
        }
        let lr = settings.relative_lr / curvature;
        let mut w = init.profile(j);
        let mut v = vec![0.0; t];
        let mut g = vec![0.0; t];
        for _ in 0..settings.iterations {
            stats.grad(&w, &mut g);
            for a in 0..t {
                v[a] = settings.momentum * v[a] - lr * g[a];
                w[a] += v[a];
            }
        }
        if !stats.loss(&w).is_finite() {
            return Err(Error::Diverged {
                iteration: settings.iterations,
                loss: stats.loss(&w),
            });
        }
        for (tau, wv) in w.into_iter().enumerate() {
            out.set(tau, j, wv);
        }
    }
    Ok(out)
}
