use std::fs;
use std::path::{Path, PathBuf};

use flowpose::error::{Error, Result};
use flowpose::eval::{self, NamedCurves};
use flowpose::flow::{self, read_flo, write_flo, FlowField, HornSchunck};
use flowpose::heatmap::{decode_argmax, synthesize_target, target_mask, HeatmapStack};
use flowpose::network::checkpoint::Checkpoint;
use flowpose::network::{ModelKind, Network};
use flowpose::pose::Pose;
use flowpose::synth::{
    add_label_noise, flow_path, frame_path, generate_sequence, read_poses, write_poses, Dataset, PuppetSpec,
    POSES_FILE,
};
use flowpose::temporal::{
    self as temporal, learn_pooling_weights, warp_window, PoolLearnSettings, PoolingMode, PoolingSample, PoolingWeights,
};
use flowpose::tensor::io::{read_tensor, write_tensor};
use flowpose::train::{curve_to_csv, TrainConfig};
use flowpose::Tensor;
use rand::SeedableRng;
use rayon::prelude::*;

use crate::manifest::RunManifest;
use crate::{EstimateFlowArgs, EvalArgs, GenDataArgs, InferArgs, LearnPoolArgs, PoolArgs, TrainArgs, WarpArgs};

/// Joint names, one per line, carried alongside heatmaps and checkpoints.
pub const JOINTS_FILE: &str = "joints.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.fpnet";
pub const WEIGHTS_FILE: &str = "pooling_weights.csv";

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn read_text(path: &Path) -> Result<String> {
    io(path, fs::read_to_string(path))
}

fn create_dir(path: &Path) -> Result<()> {
    io(path, fs::create_dir_all(path))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    io(path, fs::write(path, text))
}

fn heatmap_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("heatmap_{t:05}.tns"))
}

fn warped_path(dir: &Path, t: usize, offset: i64) -> PathBuf {
    dir.join(format!("warped_{t:05}_{offset:+03}.tns"))
}

/// Number of consecutive files `path(0), path(1), ...` that exist.
fn count_files(path: impl Fn(usize) -> PathBuf) -> usize {
    (0..).take_while(|&t| path(t).is_file()).count()
}

fn write_joints(dir: &Path, names: &[String]) -> Result<()> {
    write_text(&dir.join(JOINTS_FILE), &(names.join("\n") + "\n"))
}

/// Names from `dir/joints.txt`, or generic names when the file is absent.
fn read_joints(dir: &Path, joints: usize) -> Result<Vec<String>> {
    let path = dir.join(JOINTS_FILE);
    if !path.is_file() {
        return Ok((0..joints).map(|j| format!("joint{j}")).collect());
    }
    let names: Vec<String> = read_text(&path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if names.len() != joints {
        return Err(Error::Format {
            path,
            msg: format!("{} names for {joints} joints", names.len()),
        });
    }
    Ok(names)
}

fn read_stack(path: &Path) -> Result<HeatmapStack> {
    HeatmapStack::new(read_tensor(path)?).map_err(|e| Error::Format {
        path: path.into(),
        msg: e.to_string(),
    })
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => PuppetSpec::parse(&read_text(p)?)?,
        None => PuppetSpec::upper_body(),
    };
    let seq = generate_sequence(&spec, a.frames, a.seed)?;
    let mut ds = Dataset::from_sequence(&seq);
    create_dir(&a.out)?;
    if a.label_jitter != 0.0 || a.label_outliers != 0.0 {
        write_poses(a.out.join("poses_clean.csv"), &ds.poses, &ds.joint_names)?;
        let frame = (spec.width, spec.height);
        ds.poses = add_label_noise(&ds.poses, a.label_jitter, a.label_outliers, frame, a.seed ^ 0x5eed)?;
    }
    ds.save(&a.out)?;
    write_joints(&a.out, &ds.joint_names)?;
    let range = a.flow_range as i64;
    (0..seq.len())
        .into_par_iter()
        .map(|t| {
            for d in (-range..=range).filter(|&d| d != 0) {
                let s = t as i64 + d;
                if (0..seq.len() as i64).contains(&s) {
                    write_flo(&seq.true_flow(t, s as usize)?, flow_path(&a.out, t, d))?;
                }
            }
            Ok(())
        })
        .collect::<Result<()>>()?;
    let mut m = RunManifest::new("gen-data");
    m.config = a.spec.clone();
    m.seed = Some(a.seed);
    m.outputs = vec![a.out.clone()];
    m.write(&a.out)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::parse(&read_text(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let data = Dataset::load(&a.data)?;
    if data.len() <= cfg.val_frames {
        return Err(Error::Config {
            key: "val_frames".into(),
            msg: format!("{} of {} frames leaves nothing to train on", cfg.val_frames, data.len()),
        });
    }
    let split = data.len() - cfg.val_frames;
    let (train_set, val_set) = (data.slice(0..split), data.slice(split..data.len()));
    let frame = &data.frames[0];
    if frame.height() != frame.width() {
        return Err(Error::Invalid("training expects square frames".into()));
    }
    let skeleton = flowpose::pose::Skeleton::from_names(&data.joint_names);
    let net_cfg = cfg.network_config(frame.height(), data.joint_names.len())?;
    let net = Network::build(net_cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let outcome = flowpose::train::train(net, &train_set, &val_set, &cfg, &skeleton)?;

    create_dir(&a.out)?;
    let ckpt = a.out.join(CHECKPOINT_FILE);
    Checkpoint::new(outcome.best).save(&ckpt)?;
    Checkpoint::new(outcome.last).save(a.out.join("last.fpnet"))?;
    write_text(&a.out.join("curve.csv"), &curve_to_csv(&outcome.curve))?;
    write_text(&a.out.join("config.txt"), &cfg.to_text())?;
    write_joints(&a.out, &data.joint_names)?;
    println!(
        "best validation PCK {:.4} at iteration {}",
        outcome.best_val_pck, outcome.best_iteration
    );
    let mut m = RunManifest::new("train").with_checkpoint(&ckpt)?;
    m.config = a.config.clone();
    m.seed = Some(cfg.seed);
    m.inputs = vec![a.data.clone()];
    m.outputs = vec![a.out.clone()];
    m.write(&a.out)
}

/// Expands directories to their `frame_*.tns` files in index order.
fn frame_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let n = count_files(|t| frame_path(p, t));
            if n == 0 {
                return Err(Error::Invalid(format!("no frame_*.tns files in {}", p.display())));
            }
            out.extend((0..n).map(|t| frame_path(p, t)));
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

pub fn infer(a: &InferArgs) -> Result<()> {
    let net = Checkpoint::load(&a.checkpoint)?.network;
    let ckpt_dir = a.checkpoint.parent().unwrap_or(Path::new("."));
    let names = read_joints(ckpt_dir, net.config().joints)?;
    let files = frame_files(&a.frames)?;
    create_dir(&a.out)?;
    let heatmap_model = net.config().kind == ModelKind::Heatmap;
    let poses = files
        .par_iter()
        .enumerate()
        .map(|(t, f)| {
            let frame = read_tensor(f)?;
            if heatmap_model {
                let maps = net.heatmaps(&frame)?;
                write_tensor(heatmap_path(&a.out, t), maps.tensor())?;
                Ok(decode_argmax(&maps, net.scale()))
            } else {
                Ok(net.predict_poses(&frame)?.remove(0))
            }
        })
        .collect::<Result<Vec<Pose>>>()?;
    write_poses(a.out.join(POSES_FILE), &poses, &names)?;
    write_joints(&a.out, &names)?;
    let mut m = RunManifest::new("infer").with_checkpoint(&a.checkpoint)?;
    m.inputs = a.frames.clone();
    m.outputs = vec![a.out.clone()];
    m.write(&a.out)
}

pub fn estimate_flow(a: &EstimateFlowArgs) -> Result<()> {
    let files = frame_files(std::slice::from_ref(&a.frames))?;
    let frames = files.iter().map(read_tensor).collect::<Result<Vec<Tensor>>>()?;
    let params = HornSchunck {
        lambda: a.lambda,
        iterations: a.iterations,
    };
    create_dir(&a.out)?;
    let range = a.range as i64;
    let pairs: Vec<(usize, i64)> = (0..frames.len())
        .flat_map(|t| (-range..=range).map(move |d| (t, d)))
        .filter(|&(t, d)| d != 0 && (0..frames.len() as i64).contains(&(t as i64 + d)))
        .collect();
    pairs
        .par_iter()
        .map(|&(t, d)| {
            let s = (t as i64 + d) as usize;
            let flow = flow::estimate_flow(&frames[t], &frames[s], &params)?.between(t, s);
            write_flo(&flow, flow_path(&a.out, t, d))
        })
        .collect::<Result<()>>()?;
    let mut m = RunManifest::new("estimate-flow");
    m.inputs = vec![a.frames.clone()];
    m.outputs = vec![a.out.clone()];
    m.write(&a.out)
}

/// Brings a flow to heatmap resolution, averaging down by an integer factor.
fn flow_to_heatmap(flow: FlowField, size: (usize, usize), path: &Path) -> Result<FlowField> {
    let (h, w) = size;
    if (flow.height(), flow.width()) == (h, w) {
        return Ok(flow);
    }
    let s = flow.width() / w;
    if s == 0 || flow.width() != s * w || flow.height() != s * h {
        return Err(Error::Format {
            path: path.into(),
            msg: format!(
                "{}x{} flow does not match {w}x{h} heatmaps by an integer factor",
                flow.width(),
                flow.height()
            ),
        });
    }
    flow.downsample(s)
}

pub fn warp(a: &WarpArgs) -> Result<()> {
    let count = count_files(|t| heatmap_path(&a.heatmaps, t));
    if count == 0 {
        return Err(Error::Invalid(format!(
            "no heatmap_*.tns files in {}",
            a.heatmaps.display()
        )));
    }
    let maps = (0..count)
        .map(|t| read_stack(&heatmap_path(&a.heatmaps, t)))
        .collect::<Result<Vec<_>>>()?;
    let size = maps[0].size();
    if maps.iter().any(|m| m.tensor().shape() != maps[0].tensor().shape()) {
        return Err(Error::Invalid("heatmaps differ in shape".into()));
    }
    let names = read_joints(&a.heatmaps, maps[0].joints())?;
    create_dir(&a.out)?;
    let n = a.n as i64;
    (0..count)
        .into_par_iter()
        .map(|t| {
            let window = warp_window(&maps, t, a.n, |t, s| {
                let path = flow_path(&a.flows, t, s as i64 - t as i64);
                flow_to_heatmap(read_flo(&path)?, size, &path)
            })?;
            for (stack, off) in window.iter().zip(-n..=n) {
                write_tensor(warped_path(&a.out, t, off), stack.tensor())?;
            }
            Ok(())
        })
        .collect::<Result<()>>()?;
    write_joints(&a.out, &names)?;
    let mut m = RunManifest::new("warp");
    m.inputs = vec![a.heatmaps.clone(), a.flows.clone()];
    m.outputs = vec![a.out.clone()];
    m.write(&a.out)
}

/// Frame count and half-width of a directory written by `warp`.
fn warped_layout(dir: &Path) -> Result<(usize, usize)> {
    let count = count_files(|t| warped_path(dir, t, 0));
    if count == 0 {
        return Err(Error::Invalid(format!("no warped_*.tns files in {}", dir.display())));
    }
    let n = (1..).take_while(|&k| warped_path(dir, 0, k).is_file()).count();
    Ok((count, n))
}

fn read_window(dir: &Path, t: usize, n: usize) -> Result<Vec<HeatmapStack>> {
    (-(n as i64)..=n as i64)
        .map(|off| read_stack(&warped_path(dir, t, off)))
        .collect()
}

pub fn pool(a: &PoolArgs) -> Result<()> {
    let mode: PoolingMode = a.mode.parse().map_err(|_| Error::Config {
        key: "mode".into(),
        msg: format!("unknown mode `{}`; expected parametric, sum or max", a.mode),
    })?;
    let (count, n) = warped_layout(&a.warped)?;
    let weights = match (&a.weights, mode) {
        (Some(p), _) => {
            let w = PoolingWeights::from_csv(&read_text(p)?).map_err(|e| Error::Format {
                path: p.clone(),
                msg: e.to_string(),
            })?;
            if w.n() != n {
                return Err(Error::Config {
                    key: "weights".into(),
                    msg: format!("weights cover n = {}, warped frames n = {n}", w.n()),
                });
            }
            Some(w)
        }
        (None, PoolingMode::Parametric) => {
            return Err(Error::Config {
                key: "weights".into(),
                msg: "parametric pooling needs --weights".into(),
            })
        }
        (None, _) => None,
    };
    create_dir(&a.out)?;
    let poses = (0..count)
        .into_par_iter()
        .map(|t| {
            let window = read_window(&a.warped, t, n)?;
            let pooled = temporal::pool(mode, &window, weights.as_ref())?;
            write_tensor(heatmap_path(&a.out, t), pooled.tensor())?;
            Ok(decode_argmax(&pooled, a.scale))
        })
        .collect::<Result<Vec<Pose>>>()?;
    let joints = poses[0].len();
    let names = read_joints(&a.warped, joints)?;
    write_poses(a.out.join(POSES_FILE), &poses, &names)?;
    write_joints(&a.out, &names)?;
    let mut m = RunManifest::new("pool");
    m.inputs = std::iter::once(a.warped.clone()).chain(a.weights.clone()).collect();
    m.outputs = vec![a.out.clone()];
    m.write(&a.out)
}

pub fn learn_pool(a: &LearnPoolArgs) -> Result<()> {
    let (count, n) = warped_layout(&a.warped)?;
    let (labels, _) = read_poses(&a.targets)?;
    if labels.len() != count {
        return Err(Error::Invalid(format!(
            "{} labelled frames for {count} warped frames",
            labels.len()
        )));
    }
    let samples = (0..count)
        .into_par_iter()
        .map(|t| {
            let warped = read_window(&a.warped, t, n)?;
            let size = warped[0].size();
            Ok(PoolingSample {
                target: synthesize_target(&labels[t], a.sigma, size, a.scale)?,
                mask: Some(target_mask(&labels[t], size, a.scale)),
                warped,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let joints = samples[0].target.joints();
    let init = match a.init.as_str() {
        "center" => PoolingWeights::center(n, joints),
        "uniform" => PoolingWeights::uniform(n, joints),
        other => {
            return Err(Error::Config {
                key: "init".into(),
                msg: format!("unknown init `{other}`; expected center or uniform"),
            })
        }
    };
    let settings = PoolLearnSettings {
        iterations: a.iterations,
        ..Default::default()
    };
    let weights = learn_pooling_weights(&samples, &init, &settings)?;
    let names = read_joints(&a.warped, joints)?;
    create_dir(&a.out)?;
    write_text(&a.out.join(WEIGHTS_FILE), &weights.to_csv(&names))?;
    let mut m = RunManifest::new("learn-pool");
    m.inputs = vec![a.warped.clone(), a.targets.clone()];
    m.outputs = vec![a.out.clone()];
    m.write(&a.out)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    if !(a.step > 0.0) || !(a.d_max >= 0.0) {
        return Err(Error::Config {
            key: "step".into(),
            msg: "need step > 0 and d-max >= 0".into(),
        });
    }
    let (gt, names) = read_poses(&a.gt)?;
    let d = eval::d_grid(a.d_max, a.step);
    let mut sets = Vec::new();
    let mut inputs = vec![a.gt.clone()];
    for spec in &a.preds {
        let (method, path) = match spec.split_once('=') {
            Some((m, p)) => (m.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(spec);
                let m = p
                    .parent()
                    .and_then(Path::file_name)
                    .map_or_else(|| "prediction".to_string(), |s| s.to_string_lossy().into_owned());
                (m, p)
            }
        };
        let (preds, _) = read_poses(&path)?;
        let curve = eval::pck(&preds, &gt, &d)?.with_names(&names);
        let mut curves = curve.joints.clone();
        let wrists: Vec<usize> = flowpose::pose::Skeleton::from_names(&names).wrists();
        if !wrists.is_empty() {
            curves.push(curve.average(&wrists, "wrists")?);
        }
        let all: Vec<usize> = (0..names.len()).collect();
        curves.push(curve.average(&all, "mean")?);
        for c in &curves {
            println!(
                "{method} {}: {}",
                c.name,
                c.accuracy.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ")
            );
        }
        sets.push(NamedCurves { method, curves });
        inputs.push(path);
    }
    eval::emit_curves(&sets, &a.out, "pck")?;
    let mut m = RunManifest::new("eval");
    m.inputs = inputs;
    m.outputs = vec![a.out.clone()];
    m.write(&a.out)
}
