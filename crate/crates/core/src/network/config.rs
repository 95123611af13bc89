use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    /// Same-padded convolution, `pad = (kernel - 1) / 2`.
    Conv {
        name: String,
        kernel: usize,
        out_channels: usize,
        stride: usize,
    },
    Relu,
    /// 2x2 max pool. A disabled pool still counts towards the pool budget.
    MaxPool2 { enabled: bool },
}

impl LayerSpec {
    pub fn conv(name: &str, kernel: usize, out_channels: usize) -> Self {
        LayerSpec::Conv {
            name: name.to_string(),
            kernel,
            out_channels,
            stride: 1,
        }
    }

    pub fn pool() -> Self {
        LayerSpec::MaxPool2 { enabled: true }
    }

    pub fn name(&self) -> Option<&str> {
        match self {
            LayerSpec::Conv { name, .. } => Some(name),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionSpec {
    /// Activations concatenated on entry, deepest first (e.g. conv7, conv3).
    pub skip_sources: (String, String),
    pub layers: Vec<LayerSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Heatmap,
    /// Direct regression of `2k` coordinates from the trunk.
    Coordinate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateHead {
    /// Last spatial layer (by name) kept as the trunk.
    pub trunk_end: String,
    /// 2x2 average pools applied to the trunk output before the linear map.
    pub avg_pools: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub kind: ModelKind,
    pub input_size: (usize, usize),
    pub in_channels: usize,
    pub joints: usize,
    pub spatial_layers: Vec<LayerSpec>,
    pub fusion: Option<FusionSpec>,
    pub coordinate: Option<CoordinateHead>,
    /// `(w_spatial, w_fusion)`.
    pub loss_weights: (f64, f64),
}

fn conv_relu(layers: &mut Vec<LayerSpec>, name: &str, kernel: usize, out: usize) {
    layers.push(LayerSpec::conv(name, kernel, out));
    layers.push(LayerSpec::Relu);
}

/// conv1..conv8 and the five fusion convolutions with the given widths.
fn spatial_net(
    input: usize,
    joints: usize,
    c: [usize; 5],
    fusion_width: usize,
    fusion_kernel: usize,
) -> NetworkConfig {
    let mut s = Vec::new();
    conv_relu(&mut s, "conv1", 5, c[0]);
    s.push(LayerSpec::pool());
    conv_relu(&mut s, "conv2", 5, c[1]);
    s.push(LayerSpec::pool());
    conv_relu(&mut s, "conv3", 3, c[2]);
    conv_relu(&mut s, "conv4", 3, c[2]);
    conv_relu(&mut s, "conv5", 3, c[2]);
    conv_relu(&mut s, "conv6", 1, c[3]);
    conv_relu(&mut s, "conv7", 1, c[4]);
    // Output layers stay linear: a ReLU there can switch a joint's channel
    // off for good early in training.
    s.push(LayerSpec::conv("conv8", 1, joints));
    let mut f = Vec::new();
    for i in 1..=4 {
        conv_relu(&mut f, &format!("fuse{i}"), fusion_kernel, fusion_width);
    }
    f.push(LayerSpec::conv("fuse5", 1, joints));
    NetworkConfig {
        kind: ModelKind::Heatmap,
        input_size: (input, input),
        in_channels: 3,
        joints,
        spatial_layers: s,
        fusion: Some(FusionSpec {
            skip_sources: ("conv7".into(), "conv3".into()),
            layers: f,
        }),
        coordinate: None,
        loss_weights: (1.0, 1.0),
    }
}

impl NetworkConfig {
    /// Desk-scale layout: 5x5x32, pool, 5x5x64, pool, three 3x3x128,
    /// 1x1x256 twice, 1x1xk; fusion of four 7x7x64 and a 1x1xk.
    pub fn desk(input: usize, joints: usize) -> Self {
        spatial_net(input, joints, [32, 64, 128, 256, 256], 64, 7)
    }

    /// Same topology at reduced width, for single-core training runs.
    pub fn compact(input: usize, joints: usize) -> Self {
        spatial_net(input, joints, [16, 32, 64, 64, 64], 16, 7)
    }

    /// Smallest useful topology; gradient checks and unit tests.
    pub fn toy(input: usize, joints: usize) -> Self {
        spatial_net(input, joints, [3, 4, 4, 5, 5], 3, 3)
    }

    /// Coordinate-regression baseline sharing the spatial trunk up to conv5.
    pub fn coordinate_baseline(mut base: NetworkConfig) -> Self {
        let end = base
            .spatial_layers
            .iter()
            .position(|l| l.name() == Some("conv5"))
            .map(|i| i + 2)
            .unwrap_or(base.spatial_layers.len());
        base.spatial_layers.truncate(end);
        base.kind = ModelKind::Coordinate;
        base.fusion = None;
        base.coordinate = Some(CoordinateHead {
            trunk_end: "conv5".into(),
            avg_pools: 1,
        });
        base.loss_weights = (1.0, 0.0);
        base
    }

    pub fn without_fusion(mut self) -> Self {
        self.fusion = None;
        self.loss_weights.1 = 0.0;
        self
    }

    /// Ratio of input to heatmap resolution implied by the enabled pools.
    pub fn scale(&self) -> usize {
        let pools = self
            .spatial_layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::MaxPool2 { enabled: true }))
            .count();
        1 << pools
    }

    pub fn heatmap_size(&self) -> (usize, usize) {
        let s = self.scale();
        (self.input_size.0 / s, self.input_size.1 / s)
    }

    /// Spatial resolution reached after each named layer.
    pub(crate) fn resolution_of(&self, name: &str) -> Option<(usize, usize)> {
        let (mut h, mut w) = self.input_size;
        for l in &self.spatial_layers {
            match l {
                LayerSpec::MaxPool2 { enabled: true } => {
                    h /= 2;
                    w /= 2;
                }
                LayerSpec::Conv { name: n, .. } if n == name => return Some((h, w)),
                _ => {}
            }
        }
        None
    }

    /// Output channels of each named spatial conv.
    pub(crate) fn channels_of(&self, name: &str) -> Option<usize> {
        self.spatial_layers.iter().find_map(|l| match l {
            LayerSpec::Conv {
                name: n,
                out_channels,
                ..
            } if n == name => Some(*out_channels),
            _ => None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || self.in_channels == 0 || self.joints == 0 {
            return Err(Error::config("input", "sizes and joint count must be positive"));
        }
        let pools = self
            .spatial_layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::MaxPool2 { .. }))
            .count();
        if self.kind == ModelKind::Heatmap && pools != 2 {
            return Err(Error::config(
                "layer",
                format!("a heatmap network needs exactly two maxpool2 layers, found {pools}"),
            ));
        }
        if pools > 2 {
            return Err(Error::config(
                "layer",
                format!("at most two maxpool2 layers allowed, found {pools}"),
            ));
        }
        if h % self.scale() != 0 || w % self.scale() != 0 {
            return Err(Error::config(
                "input",
                format!("{h}x{w} not divisible by pooling factor {}", self.scale()),
            ));
        }
        let mut names = Vec::new();
        let all = self
            .spatial_layers
            .iter()
            .chain(self.fusion.iter().flat_map(|f| f.layers.iter()));
        for l in all {
            if let LayerSpec::Conv {
                name,
                kernel,
                out_channels,
                stride,
            } = l
            {
                if *stride != 1 {
                    return Err(Error::config(
                        "layer",
                        format!("{name}: stride {stride}, all strides must be 1"),
                    ));
                }
                if kernel % 2 == 0 {
                    return Err(Error::config(
                        "layer",
                        format!("{name}: kernel {kernel} must be odd"),
                    ));
                }
                if *out_channels == 0 {
                    return Err(Error::config("layer", format!("{name}: zero channels")));
                }
                if names.contains(name) {
                    return Err(Error::config("layer", format!("duplicate layer name {name}")));
                }
                names.push(name.clone());
            }
        }
        let last_conv = |layers: &[LayerSpec]| {
            layers.iter().rev().find_map(|l| match l {
                LayerSpec::Conv { out_channels, .. } => Some(*out_channels),
                _ => None,
            })
        };
        match self.kind {
            ModelKind::Heatmap => {
                if last_conv(&self.spatial_layers) != Some(self.joints) {
                    return Err(Error::config(
                        "layer",
                        format!("last spatial conv must have {} channels", self.joints),
                    ));
                }
                if let Some(f) = &self.fusion {
                    for src in [&f.skip_sources.0, &f.skip_sources.1] {
                        if self.channels_of(src).is_none() {
                            return Err(Error::config(
                                "fusion_skip",
                                format!("skip source {src} is not a spatial layer"),
                            ));
                        }
                    }
                    let (a, b) = (
                        self.resolution_of(&f.skip_sources.0).unwrap(),
                        self.resolution_of(&f.skip_sources.1).unwrap(),
                    );
                    let ok = (0..=2).any(|m| (b.0 >> m, b.1 >> m) == a && b.0 % (1 << m) == 0);
                    if !ok {
                        return Err(Error::config(
                            "fusion_skip",
                            format!("cannot resize {b:?} to {a:?} by 2x2 averaging"),
                        ));
                    }
                    if f.layers.iter().any(|l| matches!(l, LayerSpec::MaxPool2 { .. })) {
                        return Err(Error::config("fusion_layer", "fusion layers cannot pool"));
                    }
                    if last_conv(&f.layers) != Some(self.joints) {
                        return Err(Error::config(
                            "fusion_layer",
                            format!("last fusion conv must have {} channels", self.joints),
                        ));
                    }
                }
            }
            ModelKind::Coordinate => {
                let head = self.coordinate.as_ref().ok_or_else(|| {
                    Error::config("coord_trunk_end", "coordinate model needs a head")
                })?;
                let (rh, rw) = self.resolution_of(&head.trunk_end).ok_or_else(|| {
                    Error::config("coord_trunk_end", format!("no layer {}", head.trunk_end))
                })?;
                let div = 1 << head.avg_pools;
                if rh % div != 0 || rw % div != 0 {
                    return Err(Error::config(
                        "coord_avg_pools",
                        format!("{rh}x{rw} not divisible by {div}"),
                    ));
                }
            }
        }
        if !(self.loss_weights.0 >= 0.0 && self.loss_weights.1 >= 0.0) {
            return Err(Error::config("loss_weights", "weights must be non-negative"));
        }
        Ok(())
    }

    /// Canonical line-oriented text form; [`NetworkConfig::parse`] inverts it.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let kind = match self.kind {
            ModelKind::Heatmap => "heatmap",
            ModelKind::Coordinate => "coordinate",
        };
        writeln!(s, "kind = {kind}").unwrap();
        writeln!(s, "input = {}x{}", self.input_size.0, self.input_size.1).unwrap();
        writeln!(s, "in_channels = {}", self.in_channels).unwrap();
        writeln!(s, "joints = {}", self.joints).unwrap();
        for l in &self.spatial_layers {
            writeln!(s, "layer = {}", layer_text(l)).unwrap();
        }
        if let Some(f) = &self.fusion {
            writeln!(s, "fusion_skip = {} {}", f.skip_sources.0, f.skip_sources.1).unwrap();
            for l in &f.layers {
                writeln!(s, "fusion_layer = {}", layer_text(l)).unwrap();
            }
        }
        if let Some(c) = &self.coordinate {
            writeln!(s, "coord_trunk_end = {}", c.trunk_end).unwrap();
            writeln!(s, "coord_avg_pools = {}", c.avg_pools).unwrap();
        }
        writeln!(
            s,
            "loss_weights = {:?} {:?}",
            self.loss_weights.0, self.loss_weights.1
        )
        .unwrap();
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kind = None;
        let mut input = None;
        let mut in_channels = 3;
        let mut joints = None;
        let mut spatial = Vec::new();
        let mut skip = None;
        let mut fusion_layers = Vec::new();
        let mut trunk_end = None;
        let mut avg_pools = 1;
        let mut loss_weights = (1.0, 1.0);
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::config(format!("line {}", lineno + 1), "expected key = value"))?;
            match key {
                "kind" => {
                    kind = Some(match value {
                        "heatmap" => ModelKind::Heatmap,
                        "coordinate" => ModelKind::Coordinate,
                        _ => return Err(Error::config(key, format!("unknown kind {value}"))),
                    })
                }
                "input" => {
                    let (a, b) = value
                        .split_once('x')
                        .ok_or_else(|| Error::config(key, "expected HxW"))?;
                    input = Some((parse_num(key, a)?, parse_num(key, b)?));
                }
                "in_channels" => in_channels = parse_num(key, value)?,
                "joints" => joints = Some(parse_num(key, value)?),
                "layer" => spatial.push(parse_layer(key, value)?),
                "fusion_layer" => fusion_layers.push(parse_layer(key, value)?),
                "fusion_skip" => {
                    let mut it = value.split_whitespace();
                    match (it.next(), it.next(), it.next()) {
                        (Some(a), Some(b), None) => skip = Some((a.to_string(), b.to_string())),
                        _ => return Err(Error::config(key, "expected two layer names")),
                    }
                }
                "coord_trunk_end" => trunk_end = Some(value.to_string()),
                "coord_avg_pools" => avg_pools = parse_num(key, value)?,
                "loss_weights" => {
                    let v: Vec<&str> = value.split_whitespace().collect();
                    if v.len() != 2 {
                        return Err(Error::config(key, "expected two numbers"));
                    }
                    loss_weights = (parse_num(key, v[0])?, parse_num(key, v[1])?);
                }
                _ => return Err(Error::config(key, "unknown key")),
            }
        }
        let kind = kind.unwrap_or(ModelKind::Heatmap);
        let cfg = NetworkConfig {
            kind,
            input_size: input.ok_or_else(|| Error::config("input", "missing"))?,
            in_channels,
            joints: joints.ok_or_else(|| Error::config("joints", "missing"))?,
            spatial_layers: spatial,
            fusion: skip.map(|skip_sources| FusionSpec {
                skip_sources,
                layers: fusion_layers,
            }),
            coordinate: trunk_end.map(|trunk_end| CoordinateHead {
                trunk_end,
                avg_pools,
            }),
            loss_weights,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn layer_text(l: &LayerSpec) -> String {
    match l {
        LayerSpec::Conv {
            name,
            kernel,
            out_channels,
            stride,
        } => format!("conv name={name} kernel={kernel} out={out_channels} stride={stride}"),
        LayerSpec::Relu => "relu".into(),
        LayerSpec::MaxPool2 { enabled } => format!("maxpool2 enabled={}", *enabled as u8),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
}

fn parse_layer(key: &str, value: &str) -> Result<LayerSpec> {
    let mut parts = value.split_whitespace();
    let kind = parts.next().ok_or_else(|| Error::config(key, "empty layer"))?;
    let field = |want: &str| -> Option<String> {
        let mut p = value.split_whitespace().skip(1);
        p.find_map(|kv| kv.strip_prefix(&format!("{want}=")).map(str::to_string))
    };
    match kind {
        "relu" => Ok(LayerSpec::Relu),
        "maxpool2" => Ok(LayerSpec::MaxPool2 {
            enabled: field("enabled").map_or(true, |v| v != "0"),
        }),
        "conv" => {
            let get = |f: Option<String>, n: &str| {
                f.ok_or_else(|| Error::config(key, format!("conv missing {n}")))
            };
            let name = get(field("name"), "name")?;
            Ok(LayerSpec::Conv {
                kernel: parse_num(key, &get(field("kernel"), "kernel")?)?,
                out_channels: parse_num(key, &get(field("out"), "out")?)?,
                stride: field("stride").map_or(Ok(1), |s| parse_num(key, &s))?,
                name,
            })
        }
        other => Err(Error::config(key, format!("unknown layer kind {other}"))),
    }
}
