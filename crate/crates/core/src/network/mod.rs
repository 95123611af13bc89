//! Fully-convolutional heatmap regressor (conv1..conv8), spatial fusion
//! layers over a conv7/conv3 skip concatenation, and a coordinate-regression
//! baseline, all built from a [`NetworkConfig`].

pub mod checkpoint;
mod config;

pub use config::{CoordinateHead, FusionSpec, LayerSpec, ModelKind, NetworkConfig};

use rand::Rng;

use crate::error::{Error, Result};
use crate::heatmap::{decode_argmax, HeatmapStack};
use crate::pose::{Joint, Pose};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    params: Vec<Param>,
}

/// Tape handles produced by [`Network::forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// conv8 heatmaps (heatmap models).
    pub spatial: Option<Var>,
    /// Fusion-layer heatmaps, when the config has fusion layers.
    pub fusion: Option<Var>,
    /// `(B, 2k, 1, 1)` normalised coordinates (coordinate models).
    pub coords: Option<Var>,
    /// Post-activation output of every named layer, in execution order.
    pub activations: Vec<(String, Var)>,
}

impl ForwardOutput {
    /// Final heatmaps: fusion output if present, conv8 otherwise.
    pub fn heatmaps(&self) -> Option<Var> {
        self.fusion.or(self.spatial)
    }

    pub fn activation(&self, name: &str) -> Option<Var> {
        self.activations
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }
}

/// Non-differentiable forward result for one batch.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub spatial: Option<Tensor>,
    pub fusion: Option<Tensor>,
    pub coords: Option<Tensor>,
}

struct ConvShape {
    name: String,
    in_c: usize,
    out_c: usize,
    kernel: usize,
}

fn conv_shapes(layers: &[LayerSpec], mut in_c: usize, out: &mut Vec<ConvShape>) -> usize {
    for l in layers {
        if let LayerSpec::Conv {
            name,
            kernel,
            out_channels,
            ..
        } = l
        {
            out.push(ConvShape {
                name: name.clone(),
                in_c,
                out_c: *out_channels,
                kernel: *kernel,
            });
            in_c = *out_channels;
        }
    }
    in_c
}

/// Spatial layers up to the coordinate head's trunk end and its ReLU.
fn trunk_layers(config: &NetworkConfig) -> &[LayerSpec] {
    let layers = &config.spatial_layers;
    let Some(head) = &config.coordinate else {
        return layers;
    };
    let Some(end) = layers
        .iter()
        .position(|l| l.name() == Some(head.trunk_end.as_str()))
    else {
        return layers;
    };
    match layers.get(end + 1) {
        Some(LayerSpec::Relu) => &layers[..end + 2],
        _ => &layers[..end + 1],
    }
}

impl Network {
    /// Builds the network with weights drawn uniformly from
    /// `[-1 / sqrt(fan_in), 1 / sqrt(fan_in)]` and zero biases.
    pub fn build(config: NetworkConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        for p in &mut net.params {
            if p.name.ends_with(".weight") {
                let [_, a, b, c] = p.value.shape();
                let bound = 1.0 / ((a * b * c) as f64).sqrt();
                p.value
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = rng.gen_range(-bound..bound));
            }
        }
        Ok(net)
    }

    /// Builds the network with every parameter set to zero.
    pub fn zeros(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::new();
        let trunk_c = match config.kind {
            ModelKind::Heatmap => conv_shapes(&config.spatial_layers, config.in_channels, &mut convs),
            ModelKind::Coordinate => {
                conv_shapes(trunk_layers(&config), config.in_channels, &mut convs)
            }
        };
        if let (ModelKind::Heatmap, Some(f)) = (config.kind, &config.fusion) {
            let in_c = config.channels_of(&f.skip_sources.0).unwrap()
                + config.channels_of(&f.skip_sources.1).unwrap();
            conv_shapes(&f.layers, in_c, &mut convs);
        }
        let mut params = Vec::new();
        for c in &convs {
            params.push(Param {
                name: format!("{}.weight", c.name),
                value: Tensor::zeros([c.out_c, c.in_c, c.kernel, c.kernel]),
            });
            params.push(Param {
                name: format!("{}.bias", c.name),
                value: Tensor::zeros([1, c.out_c, 1, 1]),
            });
        }
        if config.kind == ModelKind::Coordinate {
            let head = config.coordinate.as_ref().unwrap();
            let (h, w) = config.resolution_of(&head.trunk_end).unwrap();
            let d = trunk_c * (h >> head.avg_pools) * (w >> head.avg_pools);
            let out = 2 * config.joints;
            params.push(Param {
                name: "coord.weight".into(),
                value: Tensor::zeros([out, d, 1, 1]),
            });
            params.push(Param {
                name: "coord.bias".into(),
                value: Tensor::zeros([1, out, 1, 1]),
            });
        }
        Ok(Network { config, params })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Input-to-heatmap resolution ratio.
    pub fn scale(&self) -> f64 {
        self.config.scale() as f64
    }

    /// Replaces all parameter values; shapes must match.
    pub fn set_params(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::shape(
                "set_params",
                format!("{} tensors for {} parameters", values.len(), self.params.len()),
            ));
        }
        for (p, v) in self.params.iter().zip(&values) {
            if p.value.shape() != v.shape() {
                return Err(Error::shape(
                    "set_params",
                    format!("{}: {:?} vs {:?}", p.name, p.value.shape(), v.shape()),
                ));
            }
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v;
        }
        Ok(())
    }

    /// Records every parameter on the tape, in declaration order.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }

    fn run_layers(
        &self,
        tape: &mut Tape,
        params: &[Var],
        cursor: &mut usize,
        layers: &[LayerSpec],
        mut x: Var,
        acts: &mut Vec<(String, Var)>,
    ) -> Result<Var> {
        let mut pending: Option<String> = None;
        for l in layers {
            match l {
                LayerSpec::Conv { name, kernel, .. } => {
                    if let Some(n) = pending.take() {
                        acts.push((n, x));
                    }
                    let (w, b) = (params[*cursor], params[*cursor + 1]);
                    *cursor += 2;
                    x = tape.conv2d(x, w, b, (kernel - 1) / 2)?;
                    pending = Some(name.clone());
                }
                LayerSpec::Relu => x = tape.relu(x),
                LayerSpec::MaxPool2 { enabled } => {
                    if let Some(n) = pending.take() {
                        acts.push((n, x));
                    }
                    if *enabled {
                        x = tape.maxpool2(x)?;
                    }
                }
            }
        }
        if let Some(n) = pending.take() {
            acts.push((n, x));
        }
        Ok(x)
    }

    /// Differentiable forward pass of a `(B, C, H, W)` frame batch.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], frames: Var) -> Result<ForwardOutput> {
        let [_, c, h, w] = tape.value(frames).shape();
        if (c, h, w) != (self.config.in_channels, self.config.input_size.0, self.config.input_size.1) {
            return Err(Error::shape(
                "forward",
                format!(
                    "frames {:?}, network expects {}x{}x{}",
                    tape.value(frames).shape(),
                    self.config.in_channels,
                    self.config.input_size.0,
                    self.config.input_size.1
                ),
            ));
        }
        if params.len() != self.params.len() {
            return Err(Error::shape("forward", "parameter handle count"));
        }
        let mut acts = Vec::new();
        let mut cursor = 0;
        match self.config.kind {
            ModelKind::Heatmap => {
                let spatial = self.run_layers(
                    tape,
                    params,
                    &mut cursor,
                    &self.config.spatial_layers,
                    frames,
                    &mut acts,
                )?;
                let fusion = match &self.config.fusion {
                    None => None,
                    Some(f) => {
                        let find = |n: &str| {
                            acts.iter()
                                .find(|(a, _)| a == n)
                                .map(|(_, v)| *v)
                                .ok_or_else(|| Error::Invalid(format!("missing activation {n}")))
                        };
                        let deep = find(&f.skip_sources.0)?;
                        let mut shallow = find(&f.skip_sources.1)?;
                        while tape.value(shallow).height() > tape.value(deep).height() {
                            shallow = tape.avgpool2(shallow)?;
                        }
                        let joined = tape.concat_channels(deep, shallow)?;
                        Some(self.run_layers(
                            tape,
                            params,
                            &mut cursor,
                            &f.layers,
                            joined,
                            &mut acts,
                        )?)
                    }
                };
                Ok(ForwardOutput {
                    spatial: Some(spatial),
                    fusion,
                    coords: None,
                    activations: acts,
                })
            }
            ModelKind::Coordinate => {
                let head = self.config.coordinate.as_ref().unwrap();
                let trunk = trunk_layers(&self.config);
                let mut x = self.run_layers(tape, params, &mut cursor, trunk, frames, &mut acts)?;
                for _ in 0..head.avg_pools {
                    x = tape.avgpool2(x)?;
                }
                let coords = tape.linear(x, params[cursor], params[cursor + 1])?;
                Ok(ForwardOutput {
                    spatial: None,
                    fusion: None,
                    coords: Some(coords),
                    activations: acts,
                })
            }
        }
    }

    /// `w_spatial * L(conv8) + w_fusion * L(fusion)` against heatmap
    /// targets, with `mask` selecting the `(batch, joint)` planes that count.
    pub fn heatmap_loss(
        &self,
        tape: &mut Tape,
        out: &ForwardOutput,
        targets: &Tensor,
        mask: &[bool],
    ) -> Result<Var> {
        let mut terms = Vec::new();
        if let Some(s) = out.spatial {
            let l = tape.l2_loss_masked(s, targets, Some(mask))?;
            terms.push((l, self.config.loss_weights.0));
        }
        if let Some(f) = out.fusion {
            let l = tape.l2_loss_masked(f, targets, Some(mask))?;
            terms.push((l, self.config.loss_weights.1));
        }
        tape.weighted_sum(&terms)
    }

    /// Mean squared error on normalised coordinates of visible joints.
    pub fn coordinate_loss(&self, tape: &mut Tape, out: &ForwardOutput, poses: &[Pose]) -> Result<Var> {
        let coords = out
            .coords
            .ok_or_else(|| Error::Invalid("not a coordinate model".into()))?;
        let k = self.config.joints;
        let mut target = Tensor::zeros([poses.len(), 2 * k, 1, 1]);
        let mut mask = vec![false; poses.len() * 2 * k];
        for (b, pose) in poses.iter().enumerate() {
            for (j, joint) in pose.joints.iter().enumerate() {
                let (u, v) = self.normalise(joint.x, joint.y);
                target.set(b, 2 * j, 0, 0, u);
                target.set(b, 2 * j + 1, 0, 0, v);
                let ok = joint.visible && joint.x.is_finite() && joint.y.is_finite();
                mask[b * 2 * k + 2 * j] = ok;
                mask[b * 2 * k + 2 * j + 1] = ok;
            }
        }
        tape.l2_loss_masked(coords, &target, Some(&mask))
    }

    fn normalise(&self, x: f64, y: f64) -> (f64, f64) {
        let (h, w) = self.config.input_size;
        (x / w as f64 - 0.5, y / h as f64 - 0.5)
    }

    /// Maps a `(B, 2k, 1, 1)` coordinate output to poses in image space.
    pub fn coords_to_poses(&self, coords: &Tensor) -> Vec<Pose> {
        let (h, w) = self.config.input_size;
        let k = self.config.joints;
        (0..coords.batch())
            .map(|b| {
                Pose::new(
                    (0..k)
                        .map(|j| {
                            Joint::new(
                                (coords.at(b, 2 * j, 0, 0) + 0.5) * w as f64,
                                (coords.at(b, 2 * j + 1, 0, 0) + 0.5) * h as f64,
                            )
                        })
                        .collect(),
                )
            })
            .collect()
    }

    pub fn predict(&self, frames: &Tensor) -> Result<Prediction> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let x = tape.constant(frames.clone());
        let out = self.forward(&mut tape, &params, x)?;
        let get = |v: Option<Var>| v.map(|v| tape.value(v).clone());
        Ok(Prediction {
            spatial: get(out.spatial),
            fusion: get(out.fusion),
            coords: get(out.coords),
        })
    }

    /// Final heatmaps for a single `(1, C, H, W)` frame.
    pub fn heatmaps(&self, frame: &Tensor) -> Result<HeatmapStack> {
        let p = self.predict(frame)?;
        let t = p
            .fusion
            .or(p.spatial)
            .ok_or_else(|| Error::Invalid("not a heatmap model".into()))?;
        HeatmapStack::new(t)
    }

    /// Pose estimate for every frame of a batch.
    pub fn predict_poses(&self, frames: &Tensor) -> Result<Vec<Pose>> {
        let p = self.predict(frames)?;
        if let Some(c) = p.coords {
            return Ok(self.coords_to_poses(&c));
        }
        let maps = p.fusion.or(p.spatial).expect("heatmap model");
        (0..maps.batch())
            .map(|b| Ok(decode_argmax(&HeatmapStack::new(maps.batch_item(b))?, self.scale())))
            .collect()
    }
}
