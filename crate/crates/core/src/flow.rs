//! Dense optical flow (Horn–Schunck on a fixed three-level pyramid), heatmap
//! warping along flow tracks, and Middlebury `.flo` files.
//!
//! Flow `f` from frame `a` to frame `b` maps pixel `p` of `a` to `p + f(p)`
//! in `b`. Warping samples the neighbour at `p + f(p)` (backward mapping), so
//! a map belonging to `b` comes out aligned with `a`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::heatmap::HeatmapStack;
use crate::tensor::Tensor;

pub const FLO_MAGIC: f32 = 202_021.25;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    u: Vec<f64>,
    v: Vec<f64>,
    pub from_frame: usize,
    pub to_frame: usize,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
            from_frame: 0,
            to_frame: 0,
        }
    }

    pub fn constant(width: usize, height: usize, u: f64, v: f64) -> Self {
        FlowField {
            u: vec![u; width * height],
            v: vec![v; width * height],
            ..Self::zeros(width, height)
        }
    }

    pub fn from_uv(width: usize, height: usize, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if u.len() != width * height || v.len() != width * height {
            return Err(Error::shape(
                "flow",
                format!("{width}x{height} field with {} / {} values", u.len(), v.len()),
            ));
        }
        if !u.iter().chain(&v).all(|x| x.is_finite()) {
            return Err(Error::Invalid("flow contains non-finite values".into()));
        }
        Ok(FlowField {
            u,
            v,
            ..Self::zeros(width, height)
        })
    }

    pub fn between(mut self, from: usize, to: usize) -> Self {
        self.from_frame = from;
        self.to_frame = to;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn u(&self) -> &[f64] {
        &self.u
    }
    pub fn v(&self) -> &[f64] {
        &self.v
    }
    pub fn u_mut(&mut self) -> &mut [f64] {
        &mut self.u
    }
    pub fn v_mut(&mut self) -> &mut [f64] {
        &mut self.v
    }

    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn set(&mut self, x: usize, y: usize, u: f64, v: f64) {
        let i = y * self.width + x;
        self.u[i] = u;
        self.v[i] = v;
    }

    /// Per-component medians.
    pub fn median(&self) -> (f64, f64) {
        (median(&self.u), median(&self.v))
    }

    /// Averages `s x s` blocks and divides displacements by `s`, giving the
    /// field on a grid `s` times coarser.
    pub fn downsample(&self, s: usize) -> Result<FlowField> {
        if s == 0 || self.width % s != 0 || self.height % s != 0 {
            return Err(Error::shape(
                "flow_downsample",
                format!("{}x{} is not divisible by {s}", self.width, self.height),
            ));
        }
        let (w, h) = (self.width / s, self.height / s);
        let norm = 1.0 / (s * s * s) as f64;
        let mut out = FlowField::zeros(w, h).between(self.from_frame, self.to_frame);
        for y in 0..h {
            for x in 0..w {
                let (mut su, mut sv) = (0.0, 0.0);
                for dy in 0..s {
                    for dx in 0..s {
                        let (a, b) = self.at(x * s + dx, y * s + dy);
                        su += a;
                        sv += b;
                    }
                }
                out.set(x, y, su * norm, sv * norm);
            }
        }
        Ok(out)
    }

    pub fn to_flo_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.u.len());
        out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
        out.extend_from_slice(&(self.width as i32).to_le_bytes());
        out.extend_from_slice(&(self.height as i32).to_le_bytes());
        for (u, v) in self.u.iter().zip(&self.v) {
            out.extend_from_slice(&(*u as f32).to_le_bytes());
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_flo_bytes(bytes: &[u8], origin: &Path) -> Result<FlowField> {
        let word = |i: usize| -> [u8; 4] { bytes[4 * i..4 * i + 4].try_into().unwrap() };
        if bytes.len() < 12 {
            return Err(Error::format(origin, "truncated .flo header"));
        }
        if f32::from_le_bytes(word(0)) != FLO_MAGIC {
            return Err(Error::format(origin, "bad .flo magic"));
        }
        let (w, h) = (i32::from_le_bytes(word(1)), i32::from_le_bytes(word(2)));
        if w < 0 || h < 0 {
            return Err(Error::format(origin, format!("negative .flo size {w}x{h}")));
        }
        let (w, h) = (w as usize, h as usize);
        let n = w
            .checked_mul(h)
            .filter(|n| n.checked_mul(8).map_or(false, |b| b + 12 == bytes.len()))
            .ok_or_else(|| Error::format(origin, format!("{} bytes for a {w}x{h} field", bytes.len())))?;
        let mut u = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for i in 0..n {
            u.push(f32::from_le_bytes(word(3 + 2 * i)) as f64);
            v.push(f32::from_le_bytes(word(4 + 2 * i)) as f64);
        }
        FlowField::from_uv(w, h, u, v).map_err(|e| Error::format(origin, e.to_string()))
    }
}

pub fn write_flo(flow: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, flow.to_flo_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FlowField::from_flo_bytes(&bytes, path)
}

fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut s = xs.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HornSchunck {
    /// Weight of the smoothness term relative to brightness constancy, for
    /// intensities in `[0, 1]`.
    pub lambda: f64,
    /// Jacobi sweeps per pyramid level.
    pub iterations: usize,
}

impl Default for HornSchunck {
    fn default() -> Self {
        HornSchunck {
            lambda: 0.1,
            iterations: 200,
        }
    }
}

const PYRAMID_LEVELS: usize = 3;

/// Single-channel image used internally by the flow solver.
#[derive(Clone, Debug)]
struct Gray {
    w: usize,
    h: usize,
    px: Vec<f64>,
}

impl Gray {
    fn from_frame(frame: &Tensor) -> Gray {
        let [_, c, h, w] = frame.shape();
        let px = if c == 3 {
            let (r, g, b) = (frame.plane(0, 0), frame.plane(0, 1), frame.plane(0, 2));
            (0..w * h)
                .map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i])
                .collect()
        } else {
            (0..w * h)
                .map(|i| (0..c).map(|ch| frame.plane(0, ch)[i]).sum::<f64>() / c as f64)
                .collect()
        };
        Gray { w, h, px }
    }

    fn clamped(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.w as isize - 1) as usize;
        let y = y.clamp(0, self.h as isize - 1) as usize;
        self.px[y * self.w + x]
    }

    /// Bilinear sample with border replication.
    fn sample(&self, x: f64, y: f64) -> f64 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (x0, y0) = (x0 as isize, y0 as isize);
        (1.0 - fy) * ((1.0 - fx) * self.clamped(x0, y0) + fx * self.clamped(x0 + 1, y0))
            + fy * ((1.0 - fx) * self.clamped(x0, y0 + 1) + fx * self.clamped(x0 + 1, y0 + 1))
    }

    /// 2x2 box reduction; a trailing odd row/column is folded into the last
    /// cell by border replication.
    fn reduce(&self) -> Gray {
        let (w, h) = (self.w.div_ceil(2), self.h.div_ceil(2));
        let mut px = Vec::with_capacity(w * h);
        for y in 0..h as isize {
            for x in 0..w as isize {
                px.push(
                    0.25 * (self.clamped(2 * x, 2 * y)
                        + self.clamped(2 * x + 1, 2 * y)
                        + self.clamped(2 * x, 2 * y + 1)
                        + self.clamped(2 * x + 1, 2 * y + 1)),
                );
            }
        }
        Gray { w, h, px }
    }
}

/// Horn–Schunck flow from `a` to `b`, coarse to fine: at each level the
/// second image is warped by the current estimate and an increment is
/// solved for with a fixed number of Jacobi sweeps.
pub fn estimate_flow(a: &Tensor, b: &Tensor, params: &HornSchunck) -> Result<FlowField> {
    if a.shape() != b.shape() || a.batch() != 1 {
        return Err(Error::shape(
            "estimate_flow",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    if !(params.lambda > 0.0) {
        return Err(Error::config("lambda", "must be positive"));
    }
    let mut pa = vec![Gray::from_frame(a)];
    let mut pb = vec![Gray::from_frame(b)];
    for _ in 1..PYRAMID_LEVELS {
        if pa.last().unwrap().w < 4 || pa.last().unwrap().h < 4 {
            break;
        }
        pa.push(pa.last().unwrap().reduce());
        pb.push(pb.last().unwrap().reduce());
    }

    let mut flow: Option<FlowField> = None;
    for level in (0..pa.len()).rev() {
        let (ga, gb) = (&pa[level], &pb[level]);
        let mut f = match flow.take() {
            None => FlowField::zeros(ga.w, ga.h),
            Some(coarse) => upsample(&coarse, ga.w, ga.h),
        };
        refine(ga, gb, &mut f, params);
        flow = Some(f);
    }
    Ok(flow.unwrap())
}

/// Bilinear upsampling to `(w, h)` with displacements rescaled.
fn upsample(coarse: &FlowField, w: usize, h: usize) -> FlowField {
    let sx = coarse.width as f64 / w as f64;
    let sy = coarse.height as f64 / h as f64;
    let gu = Gray {
        w: coarse.width,
        h: coarse.height,
        px: coarse.u.clone(),
    };
    let gv = Gray {
        w: coarse.width,
        h: coarse.height,
        px: coarse.v.clone(),
    };
    let mut out = FlowField::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let cx = (x as f64 + 0.5) * sx - 0.5;
            let cy = (y as f64 + 0.5) * sy - 0.5;
            out.set(x, y, gu.sample(cx, cy) / sx, gv.sample(cx, cy) / sy);
        }
    }
    out
}

fn refine(a: &Gray, b: &Gray, flow: &mut FlowField, params: &HornSchunck) {
    let (w, h) = (a.w, a.h);
    let n = w * h;
    let mut warped = vec![0.0; n];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.at(x, y);
            warped[y * w + x] = b.sample(x as f64 + u, y as f64 + v);
        }
    }
    let mean = Gray {
        w,
        h,
        px: a.px.iter().zip(&warped).map(|(p, q)| 0.5 * (p + q)).collect(),
    };
    let mut ix = vec![0.0; n];
    let mut iy = vec![0.0; n];
    let mut it = vec![0.0; n];
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as isize, y as isize);
            let i = y * w + x;
            ix[i] = 0.5 * (mean.clamped(xi + 1, yi) - mean.clamped(xi - 1, yi));
            iy[i] = 0.5 * (mean.clamped(xi, yi + 1) - mean.clamped(xi, yi - 1));
            it[i] = warped[i] - a.px[i];
        }
    }

    // Jacobi sweeps on the increment (du, dv), smoothness on the full flow.
    let base_u = flow.u.clone();
    let base_v = flow.v.clone();
    let mut du = vec![0.0; n];
    let mut dv = vec![0.0; n];
    let mut nu = vec![0.0; n];
    let mut nv = vec![0.0; n];
    let avg = |f: &[f64], x: usize, y: usize| -> f64 {
        let at = |xx: isize, yy: isize| {
            let xx = xx.clamp(0, w as isize - 1) as usize;
            let yy = yy.clamp(0, h as isize - 1) as usize;
            f[yy * w + xx]
        };
        let (x, y) = (x as isize, y as isize);
        (at(x - 1, y) + at(x + 1, y) + at(x, y - 1) + at(x, y + 1)) / 6.0
            + (at(x - 1, y - 1) + at(x + 1, y - 1) + at(x - 1, y + 1) + at(x + 1, y + 1)) / 12.0
    };
    let mut total_u = base_u.clone();
    let mut total_v = base_v.clone();
    for _ in 0..params.iterations {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                // neighbourhood average of the full flow, expressed as increment
                let ub = avg(&total_u, x, y) - base_u[i];
                let vb = avg(&total_v, x, y) - base_v[i];
                let r = (ix[i] * ub + iy[i] * vb + it[i])
                    / (params.lambda + ix[i] * ix[i] + iy[i] * iy[i]);
                nu[i] = ub - ix[i] * r;
                nv[i] = vb - iy[i] * r;
            }
        }
        std::mem::swap(&mut du, &mut nu);
        std::mem::swap(&mut dv, &mut nv);
        for i in 0..n {
            total_u[i] = base_u[i] + du[i];
            total_v[i] = base_v[i] + dv[i];
        }
    }
    flow.u = total_u;
    flow.v = total_v;
}

/// Bilinear sample of one plane with zero padding outside the grid.
/// Taps with zero weight are skipped so integer positions copy exactly.
fn sample_zero(plane: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let mut acc = 0.0;
    for (dx, dy, wt) in [
        (0, 0, (1.0 - fx) * (1.0 - fy)),
        (1, 0, fx * (1.0 - fy)),
        (0, 1, (1.0 - fx) * fy),
        (1, 1, fx * fy),
    ] {
        let (xx, yy) = (x0 + dx, y0 + dy);
        if wt == 0.0 || xx < 0 || yy < 0 || xx >= w as i64 || yy >= h as i64 {
            continue;
        }
        acc += wt * plane[yy as usize * w + xx as usize];
    }
    acc
}

/// Aligns `source` (a neighbour's heatmaps) to the reference frame:
/// `out(p) = source(p + flow(p))`, zero where the sample leaves the grid.
pub fn warp_heatmap(source: &HeatmapStack, flow: &FlowField) -> Result<HeatmapStack> {
    let (h, w) = source.size();
    if flow.width != w || flow.height != h {
        return Err(Error::shape(
            "warp_heatmap",
            format!("{w}x{h} heatmaps with a {}x{} flow", flow.width, flow.height),
        ));
    }
    let mut out = HeatmapStack::zeros(source.joints(), h, w);
    for c in 0..source.joints() {
        let src = source.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if flow.u[i] == 0.0 && flow.v[i] == 0.0 {
                    dst[i] = src[i];
                } else {
                    dst[i] = sample_zero(src, w, h, x as f64 + flow.u[i], y as f64 + flow.v[i]);
                }
            }
        }
    }
    Ok(out)
}

/// Backward warp of a full frame with border replication, used to check
/// flow fields against image content.
pub fn warp_frame(frame: &Tensor, flow: &FlowField) -> Result<Tensor> {
    let [b, c, h, w] = frame.shape();
    if b != 1 || flow.width != w || flow.height != h {
        return Err(Error::shape(
            "warp_frame",
            format!("{:?} with a {}x{} flow", frame.shape(), flow.width, flow.height),
        ));
    }
    let mut out = Tensor::zeros([1, c, h, w]);
    for ch in 0..c {
        let g = Gray {
            w,
            h,
            px: frame.plane(0, ch).to_vec(),
        };
        let dst = out.plane_mut(0, ch);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = flow.at(x, y);
                dst[y * w + x] = g.sample(x as f64 + u, y as f64 + v);
            }
        }
    }
    Ok(out)
}
