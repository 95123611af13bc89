use rayon::prelude::*;

use super::kernels::{self, ConvGeom, Mat};
use super::{numel, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Relu {
        input: Var,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool2 {
        input: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    L2Loss {
        pred: Var,
        target: Tensor,
        mask: Option<Vec<bool>>,
        count: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    TemporalPool {
        stacks: Vec<Var>,
        weights: Var,
    },
    WeightedSum {
        terms: Vec<(Var, f64)>,
    },
    Sum {
        input: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Linear record of executed ops; [`Tape::backward`] replays it in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
    visited: Vec<Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are tracked iff `tensor.needs_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.needs_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    /// Records a constant input (no gradient).
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        self.push(tensor, Op::Leaf, false)
    }

    /// Records a trainable parameter.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.requires_grad(), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Nodes visited by the last backward pass, in visit order.
    pub fn backward_order(&self) -> &[Var] {
        &self.visited
    }

    /// Clears gradients so `backward` may run again on the same graph.
    pub fn reset(&mut self) {
        for n in &mut self.nodes {
            n.value.set_grad(None);
        }
        self.backward_done = false;
        self.visited.clear();
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Stride-1 convolution. `kernel` is `(out_c, in_c, kh, kw)` with odd
    /// sides; `bias` is `(1, out_c, 1, 1)`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, pad: usize) -> Result<Var> {
        let [b, in_c, in_h, in_w] = self.shape(input);
        let [out_c, k_in, kh, kw] = self.shape(kernel);
        if k_in != in_c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {in_c} channels, kernel expects {k_in}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} must have odd sides"),
            ));
        }
        if self.shape(bias) != [1, out_c, 1, 1] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} for {out_c} output channels", self.shape(bias)),
            ));
        }
        if in_h + 2 * pad < kh || in_w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {in_h}x{in_w}+{pad}"),
            ));
        }
        let geom = ConvGeom {
            in_c,
            in_h,
            in_w,
            kh,
            kw,
            pad,
            out_h: in_h + 2 * pad - kh + 1,
            out_w: in_w + 2 * pad - kw + 1,
        };
        let out_shape = [b, out_c, geom.out_h, geom.out_w];
        let mut out = Tensor::zeros(out_shape);
        {
            let x = self.value(input).data();
            let w = self.value(kernel).data();
            let bs = self.value(bias).data();
            let in_n = in_c * in_h * in_w;
            out.data_mut()
                .par_chunks_mut(out_c * geom.col_cols())
                .enumerate()
                .for_each_init(Vec::new, |scratch, (bi, o)| {
                    kernels::conv_forward_sample(
                        &x[bi * in_n..(bi + 1) * in_n],
                        w,
                        bs,
                        &geom,
                        scratch,
                        o,
                    );
                });
        }
        let ng = self.any_grad(&[input, kernel, bias]);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            ng,
        ))
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|v| if v > 0.0 { v } else { 0.0 });
        let ng = self.any_grad(&[input]);
        self.push(out, Op::Relu { input }, ng)
    }

    /// Non-overlapping 2x2 max pool.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let [b, c, h, w] = self.shape(input);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "maxpool2",
                format!("spatial size {h}x{w} must be even"),
            ));
        }
        let out_shape = [b, c, h / 2, w / 2];
        let mut out = Tensor::zeros(out_shape);
        let mut argmax = vec![0usize; numel(out_shape)];
        let x = self.value(input).data();
        let (ihw, ohw) = (h * w, h * w / 4);
        for p in 0..b * c {
            kernels::maxpool2_plane(
                &x[p * ihw..(p + 1) * ihw],
                h,
                w,
                p * ihw,
                &mut out.data_mut()[p * ohw..(p + 1) * ohw],
                &mut argmax[p * ohw..(p + 1) * ohw],
            );
        }
        let ng = self.any_grad(&[input]);
        Ok(self.push(out, Op::MaxPool2 { input, argmax }, ng))
    }

    /// Non-overlapping 2x2 average pool.
    pub fn avgpool2(&mut self, input: Var) -> Result<Var> {
        let [b, c, h, w] = self.shape(input);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "avgpool2",
                format!("spatial size {h}x{w} must be even"),
            ));
        }
        let mut out = Tensor::zeros([b, c, h / 2, w / 2]);
        let x = self.value(input).data();
        let (ihw, ohw) = (h * w, h * w / 4);
        for p in 0..b * c {
            kernels::avgpool2_plane(
                &x[p * ihw..(p + 1) * ihw],
                h,
                w,
                &mut out.data_mut()[p * ohw..(p + 1) * ohw],
            );
        }
        let ng = self.any_grad(&[input]);
        Ok(self.push(out, Op::AvgPool2 { input }, ng))
    }

    /// Concatenates along channels. Batch and spatial sizes must agree.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ab, ac, ah, aw] = self.shape(a);
        let [bb, bc, bh, bw] = self.shape(b);
        if (ab, ah, aw) != (bb, bh, bw) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let hw = ah * aw;
        let mut data = Vec::with_capacity(ab * (ac + bc) * hw);
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        for i in 0..ab {
            data.extend_from_slice(&xa[i * ac * hw..(i + 1) * ac * hw]);
            data.extend_from_slice(&xb[i * bc * hw..(i + 1) * bc * hw]);
        }
        let out = Tensor::from_vec([ab, ac + bc, ah, aw], data)?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Concat { a, b }, ng))
    }

    /// Mean squared difference over all elements.
    pub fn l2_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        self.l2_loss_masked(pred, target, None)
    }

    /// Mean squared difference over the `(batch, channel)` planes whose
    /// `mask` entry is true. An all-false mask yields a zero loss.
    pub fn l2_loss_masked(
        &mut self,
        pred: Var,
        target: &Tensor,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let shape = self.shape(pred);
        if shape != target.shape() {
            return Err(Error::shape(
                "l2_loss",
                format!("pred {:?} vs target {:?}", shape, target.shape()),
            ));
        }
        let planes = shape[0] * shape[1];
        let hw = shape[2] * shape[3];
        if let Some(m) = mask {
            if m.len() != planes {
                return Err(Error::shape(
                    "l2_loss",
                    format!("mask has {} entries for {planes} planes", m.len()),
                ));
            }
        }
        let p = self.value(pred).data();
        let t = target.data();
        let mut sum = 0.0;
        let mut count = 0;
        for plane in 0..planes {
            if mask.map_or(true, |m| m[plane]) {
                count += hw;
                for i in plane * hw..(plane + 1) * hw {
                    let d = p[i] - t[i];
                    sum += d * d;
                }
            }
        }
        let loss = if count == 0 { 0.0 } else { sum / count as f64 };
        let ng = self.any_grad(&[pred]);
        Ok(self.push(
            Tensor::full([1, 1, 1, 1], loss),
            Op::L2Loss {
                pred,
                target: target.clone(),
                mask: mask.map(|m| m.to_vec()),
                count,
            },
            ng,
        ))
    }

    /// Fully connected map of the flattened `(C, H, W)` features.
    /// `weight` is `(out, C*H*W, 1, 1)`, `bias` is `(1, out, 1, 1)`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let [b, c, h, w] = self.shape(input);
        let d = c * h * w;
        let [o, wd, one_a, one_b] = self.shape(weight);
        if wd != d || one_a != 1 || one_b != 1 || self.shape(bias) != [1, o, 1, 1] {
            return Err(Error::shape(
                "linear",
                format!(
                    "input {:?}, weight {:?}, bias {:?}",
                    self.shape(input),
                    self.shape(weight),
                    self.shape(bias)
                ),
            ));
        }
        let mut out = Tensor::zeros([b, o, 1, 1]);
        let bs = self.value(bias).data();
        for row in out.data_mut().chunks_mut(o) {
            row.copy_from_slice(bs);
        }
        kernels::gemm(
            Mat::new(self.value(input).data(), b, d),
            Mat::new(self.value(weight).data(), o, d).t(),
            1.0,
            out.data_mut(),
        );
        let ng = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
            ng,
        ))
    }

    /// Cross-channel weighted sum over `t` stacks of shape `(B, k, H, W)`:
    /// `out[b, c] = sum_tau weights[tau, c] * stacks[tau][b, c]`, with
    /// `weights` of shape `(1, 1, t, k)`.
    pub fn temporal_pool(&mut self, stacks: &[Var], weights: Var) -> Result<Var> {
        let first = *stacks
            .first()
            .ok_or_else(|| Error::Invalid("temporal_pool of zero stacks".into()))?;
        let shape = self.shape(first);
        for s in stacks {
            if self.shape(*s) != shape {
                return Err(Error::shape(
                    "temporal_pool",
                    format!("stack {:?} vs {:?}", self.shape(*s), shape),
                ));
            }
        }
        let [b, k, h, w] = shape;
        let t = stacks.len();
        if self.shape(weights) != [1, 1, t, k] {
            return Err(Error::shape(
                "temporal_pool",
                format!("weights {:?}, expected [1, 1, {t}, {k}]", self.shape(weights)),
            ));
        }
        let hw = h * w;
        let wv = self.value(weights).data();
        let mut out = Tensor::zeros(shape);
        for (tau, s) in stacks.iter().enumerate() {
            let x = self.value(*s).data();
            for bi in 0..b {
                for c in 0..k {
                    let wt = wv[tau * k + c];
                    let base = (bi * k + c) * hw;
                    let dst = &mut out.data_mut()[base..base + hw];
                    for (o, v) in dst.iter_mut().zip(&x[base..base + hw]) {
                        *o += wt * v;
                    }
                }
            }
        }
        let mut inputs = stacks.to_vec();
        inputs.push(weights);
        let ng = self.any_grad(&inputs);
        Ok(self.push(
            out,
            Op::TemporalPool {
                stacks: stacks.to_vec(),
                weights,
            },
            ng,
        ))
    }

    /// `sum_i c_i * x_i` over same-shaped nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| Error::Invalid("weighted_sum of zero terms".into()))?;
        let shape = self.shape(first);
        let mut out = Tensor::zeros(shape);
        for &(v, c) in terms {
            if self.shape(v) != shape {
                return Err(Error::shape(
                    "weighted_sum",
                    format!("{:?} vs {:?}", self.shape(v), shape),
                ));
            }
            for (o, x) in out.data_mut().iter_mut().zip(self.value(v).data()) {
                *o += c * x;
            }
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let ng = self.any_grad(&vars);
        Ok(self.push(
            out,
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            ng,
        ))
    }

    /// Sum of every entry, as a one-element node.
    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).sum();
        let ng = self.any_grad(&[input]);
        self.push(Tensor::full([1, 1, 1, 1], total), Op::Sum { input }, ng)
    }

    /// Reverse-mode sweep from a one-element `root`. Gradients accumulate
    /// on every node that depends on a trainable leaf.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(root).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", self.shape(root)),
            ));
        }
        self.backward_done = true;
        self.visited.clear();
        if !self.nodes[root.0].needs_grad {
            return Ok(());
        }
        self.nodes[root.0].value.set_grad(Some(vec![1.0]));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].value.grad.take() else {
                continue;
            };
            self.visited.push(Var(i));
            let contributions = self.node_backward(i, &g);
            self.nodes[i].value.grad = Some(g);
            for (v, c) in contributions {
                let node = &mut self.nodes[v.0];
                match node.value.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                    None => node.value.grad = Some(c),
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to its inputs, given its output
    /// gradient `g`. Only inputs that need gradients receive one.
    fn node_backward(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let zeros = |v: Var| vec![0.0; self.nodes[v.0].value.len()];
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let x = self.value(*input).data();
                let w = self.value(*kernel).data();
                let batch = self.shape(*input)[0];
                let in_n = geom.in_c * geom.in_h * geom.in_w;
                let out_n = g.len() / batch;
                let mut kg = wants(*kernel).then(|| zeros(*kernel));
                let mut bg = wants(*bias).then(|| zeros(*bias));
                let mut ig = wants(*input).then(|| zeros(*input));
                let mut scratch = Vec::new();
                for bi in 0..batch {
                    kernels::conv_backward_sample(
                        &x[bi * in_n..(bi + 1) * in_n],
                        w,
                        &g[bi * out_n..(bi + 1) * out_n],
                        geom,
                        &mut scratch,
                        kg.as_deref_mut(),
                        bg.as_deref_mut(),
                        ig.as_mut().map(|v| &mut v[bi * in_n..(bi + 1) * in_n]),
                    );
                }
                out.extend(kg.map(|v| (*kernel, v)));
                out.extend(bg.map(|v| (*bias, v)));
                out.extend(ig.map(|v| (*input, v)));
            }
            Op::Relu { input } => {
                if wants(*input) {
                    let x = self.value(*input).data();
                    let d = x
                        .iter()
                        .zip(g)
                        .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect();
                    out.push((*input, d));
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if wants(*input) {
                    let mut d = zeros(*input);
                    for (&src, &gv) in argmax.iter().zip(g) {
                        d[src] += gv;
                    }
                    out.push((*input, d));
                }
            }
            Op::AvgPool2 { input } => {
                if wants(*input) {
                    let [b, c, h, w] = self.shape(*input);
                    let (oh, ow) = (h / 2, w / 2);
                    let mut d = zeros(*input);
                    for p in 0..b * c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = 0.25 * g[(p * oh + oy) * ow + ox];
                                let base = p * h * w + 2 * oy * w + 2 * ox;
                                d[base] += gv;
                                d[base + 1] += gv;
                                d[base + w] += gv;
                                d[base + w + 1] += gv;
                            }
                        }
                    }
                    out.push((*input, d));
                }
            }
            Op::Concat { a, b } => {
                let [bn, ac, h, w] = self.shape(*a);
                let bc = self.shape(*b)[1];
                let hw = h * w;
                let (mut da, mut db) = (Vec::new(), Vec::new());
                for i in 0..bn {
                    let base = i * (ac + bc) * hw;
                    da.extend_from_slice(&g[base..base + ac * hw]);
                    db.extend_from_slice(&g[base + ac * hw..base + (ac + bc) * hw]);
                }
                if wants(*a) {
                    out.push((*a, da));
                }
                if wants(*b) {
                    out.push((*b, db));
                }
            }
            Op::L2Loss {
                pred,
                target,
                mask,
                count,
            } => {
                if wants(*pred) && *count > 0 {
                    let p = self.value(*pred).data();
                    let t = target.data();
                    let hw = target.height() * target.width();
                    let scale = 2.0 * g[0] / *count as f64;
                    let mut d = zeros(*pred);
                    for (plane, chunk) in d.chunks_mut(hw).enumerate() {
                        if mask.as_ref().map_or(true, |m| m[plane]) {
                            let base = plane * hw;
                            for (j, v) in chunk.iter_mut().enumerate() {
                                *v = scale * (p[base + j] - t[base + j]);
                            }
                        }
                    }
                    out.push((*pred, d));
                } else if wants(*pred) {
                    out.push((*pred, zeros(*pred)));
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let [b, c, h, w] = self.shape(*input);
                let d = c * h * w;
                let o = self.shape(*weight)[0];
                let dy = Mat::new(g, b, o);
                if wants(*input) {
                    let mut dx = zeros(*input);
                    kernels::gemm(dy, Mat::new(self.value(*weight).data(), o, d), 0.0, &mut dx);
                    out.push((*input, dx));
                }
                if wants(*weight) {
                    let mut dw = zeros(*weight);
                    kernels::gemm(dy.t(), Mat::new(self.value(*input).data(), b, d), 0.0, &mut dw);
                    out.push((*weight, dw));
                }
                if wants(*bias) {
                    let mut db = vec![0.0; o];
                    for row in g.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    out.push((*bias, db));
                }
            }
            Op::TemporalPool { stacks, weights } => {
                let [b, k, h, w] = self.shape(stacks[0]);
                let hw = h * w;
                let wv = self.value(*weights).data();
                let mut dw = wants(*weights).then(|| zeros(*weights));
                for (tau, s) in stacks.iter().enumerate() {
                    let x = self.value(*s).data();
                    let mut ds = wants(*s).then(|| zeros(*s));
                    for bi in 0..b {
                        for c in 0..k {
                            let base = (bi * k + c) * hw;
                            let gp = &g[base..base + hw];
                            if let Some(dw) = dw.as_mut() {
                                dw[tau * k + c] += gp
                                    .iter()
                                    .zip(&x[base..base + hw])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            }
                            if let Some(ds) = ds.as_mut() {
                                let wt = wv[tau * k + c];
                                for (d, gv) in ds[base..base + hw].iter_mut().zip(gp) {
                                    *d = wt * gv;
                                }
                            }
                        }
                    }
                    out.extend(ds.map(|d| (*s, d)));
                }
                out.extend(dw.map(|d| (*weights, d)));
            }
            Op::Sum { input } => {
                if wants(*input) {
                    out.push((*input, vec![g[0]; self.value(*input).len()]));
                }
            }
            Op::WeightedSum { terms } => {
                for &(v, c) in terms {
                    if wants(v) {
                        out.push((v, g.iter().map(|x| c * x).collect()));
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{numeric_grad, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn conv_sum(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> f64 {
        let mut tape = Tape::new();
        let (x, w, b) = (
            tape.constant(x.clone()),
            tape.constant(w.clone()),
            tape.constant(b.clone()),
        );
        let y = tape.conv2d(x, w, b, pad).unwrap();
        tape.value(y).sum()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let w = tape.constant(Tensor::full([1, 1, 1, 1], 1.0));
        let b = tape.constant(Tensor::zeros([1, 1, 1, 1]));
        let y = tape.conv2d(x, w, b, 0).unwrap();
        assert!(tape.value(y).bit_eq(tape.value(x)));
    }

    #[test]
    fn conv_ones_window_sums() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let w = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let b = tape.constant(Tensor::zeros([1, 1, 1, 1]));
        let y = tape.conv2d(x, w, b, 1).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), [1, 1, 3, 3]);
        assert_eq!(out.at(0, 0, 1, 1), 9.0);
        assert_eq!(out.at(0, 0, 0, 0), 4.0);
        assert_eq!(out.at(0, 0, 2, 2), 4.0);
        assert_eq!(out.at(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros([1, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros([1, 1, 1, 1]));
        assert!(tape.conv2d(x, w, b, 1).is_err());
        let w_even = tape.constant(Tensor::zeros([1, 2, 2, 2]));
        assert!(tape.conv2d(x, w_even, b, 0).is_err());
    }

    #[test]
    fn same_padding_preserves_spatial_size() {
        for k in [1usize, 3, 5, 7, 9] {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::zeros([2, 3, 11, 9]));
            let w = tape.constant(Tensor::zeros([4, 3, k, k]));
            let b = tape.constant(Tensor::zeros([1, 4, 1, 1]));
            let y = tape.conv2d(x, w, b, (k - 1) / 2).unwrap();
            assert_eq!(tape.value(y).shape(), [2, 4, 11, 9]);
        }
    }

    #[test]
    fn conv_kernel_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for pad in [0, 1] {
            let x = random([2, 2, 5, 6], &mut rng);
            let w = random([3, 2, 3, 3], &mut rng);
            let b = random([1, 3, 1, 1], &mut rng);
            let mut tape = Tape::new();
            let xv = tape.param(x.clone());
            let wv = tape.param(w.clone());
            let bv = tape.param(b.clone());
            let y = tape.conv2d(xv, wv, bv, pad).unwrap();
            let s = tape.sum(y);
            tape.backward(s).unwrap();

            let nw = numeric_grad(|w| conv_sum(&x, w, &b, pad), &w, 1e-6);
            assert!(relative_error(tape.grad(wv).unwrap(), &nw) < 1e-6);
            let nx = numeric_grad(|x| conv_sum(x, &w, &b, pad), &x, 1e-6);
            assert!(relative_error(tape.grad(xv).unwrap(), &nx) < 1e-6);
            let nb = numeric_grad(|b| conv_sum(&x, &w, b, pad), &b, 1e-6);
            assert!(relative_error(tape.grad(bv).unwrap(), &nb) < 1e-6);
        }
    }

    #[test]
    fn relu_values_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let loss = tape.l2_loss(y, &Tensor::full([1, 1, 1, 3], -1.0)).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], 0.0);
        assert!((g[2] - 2.0 * 3.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn relu_all_negative_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full([1, 2, 3, 3], -0.5));
        let y = tape.relu(x);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let loss = tape.l2_loss(y, &Tensor::full([1, 2, 3, 3], 1.0)).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn maxpool_picks_max_and_first_on_ties() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::full([1, 1, 4, 4], 7.0));
        let y = tape.maxpool2(x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 7.0));
        let loss = tape.l2_loss(y, &Tensor::zeros([1, 1, 2, 2])).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        for (i, &gv) in g.iter().enumerate() {
            let (r, c) = (i / 4, i % 4);
            if r % 2 == 0 && c % 2 == 0 {
                assert!(gv > 0.0);
            } else {
                assert_eq!(gv, 0.0);
            }
        }
    }

    #[test]
    fn maxpool_rejects_odd() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 1, 3, 4]));
        assert!(tape.maxpool2(x).is_err());
    }

    #[test]
    fn concat_shapes_slices_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random([1, 2, 4, 4], &mut rng);
        let b = random([1, 3, 4, 4], &mut rng);
        let mut tape = Tape::new();
        let av = tape.param(a.clone());
        let bv = tape.param(b.clone());
        let c = tape.concat_channels(av, bv).unwrap();
        let cv = tape.value(c).clone();
        assert_eq!(cv.shape(), [1, 5, 4, 4]);
        assert!(cv.slice_channels(0, 2).unwrap().bit_eq(&a));
        assert!(cv.slice_channels(2, 3).unwrap().bit_eq(&b));

        let s = tape.sum(c);
        tape.backward(s).unwrap();
        assert!(tape.grad(av).unwrap().iter().all(|&g| g == 1.0));
        assert!(tape.grad(bv).unwrap().iter().all(|&g| g == 1.0));

        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([1, 1, 4, 4]));
        let b = tape.constant(Tensor::zeros([1, 1, 2, 2]));
        assert!(tape.concat_channels(a, b).is_err());
    }

    #[test]
    fn l2_loss_values() {
        let t = Tensor::full([1, 2, 3, 3], 0.25);
        let mut tape = Tape::new();
        let p = tape.constant(t.clone());
        let l = tape.l2_loss(p, &t).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        let p1 = tape.constant(t.map(|v| v + 1.0));
        let l1 = tape.l2_loss(p1, &t).unwrap();
        assert!((tape.scalar(l1) - 1.0).abs() < 1e-15);
        let bad = tape.constant(Tensor::zeros([1, 1, 3, 3]));
        assert!(tape.l2_loss(bad, &t).is_err());
    }

    #[test]
    fn l2_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random([2, 3, 4, 4], &mut rng);
        let t = random([2, 3, 4, 4], &mut rng);
        let mask = [true, false, true, true, true, false];
        for m in [None, Some(&mask[..])] {
            let mut tape = Tape::new();
            let xv = tape.param(x.clone());
            let l = tape.l2_loss_masked(xv, &t, m).unwrap();
            tape.backward(l).unwrap();
            let n = numeric_grad(
                |x| {
                    let mut tp = Tape::new();
                    let v = tp.constant(x.clone());
                    let l = tp.l2_loss_masked(v, &t, m).unwrap();
                    tp.scalar(l)
                },
                &x,
                1e-5,
            );
            assert!(relative_error(tape.grad(xv).unwrap(), &n) < 1e-8);
        }
    }

    #[test]
    fn backward_twice_is_an_error_until_reset() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full([1, 1, 2, 2], 1.0));
        let y = tape.relu(x);
        let l = tape.l2_loss(y, &Tensor::zeros([1, 1, 2, 2])).unwrap();
        tape.backward(l).unwrap();
        let first = tape.grad(x).unwrap().to_vec();
        assert!(matches!(tape.backward(l), Err(Error::BackwardTwice)));
        tape.reset();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &first[..]);
    }

    #[test]
    fn backward_visits_in_reverse_execution_order() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full([1, 1, 4, 4], 0.5));
        let y = tape.relu(x);
        let z = tape.maxpool2(y).unwrap();
        let l = tape.l2_loss(z, &Tensor::zeros([1, 1, 2, 2])).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.backward_order(), &[l, z, y, x]);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random([3, 2, 8, 8], &mut rng);
        let w = random([4, 2, 5, 5], &mut rng);
        let b = random([1, 4, 1, 1], &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let (xv, wv, bv) = (
                tape.constant(x.clone()),
                tape.constant(w.clone()),
                tape.constant(b.clone()),
            );
            let y = tape.conv2d(xv, wv, bv, 2).unwrap();
            tape.value(y).clone()
        };
        assert!(run().bit_eq(&run()));
    }
}
