//! Accuracy-vs-distance (PCK) curves and their CSV/SVG rendering.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pose::Pose;

/// Accuracy of one joint over a grid of distance thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct JointCurve {
    pub name: String,
    pub d: Vec<f64>,
    pub accuracy: Vec<f64>,
    /// Frames in which the joint is labelled visible.
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PckCurve {
    pub joints: Vec<JointCurve>,
    pub frames: usize,
}

impl PckCurve {
    /// Mean accuracy at the `di`-th threshold over joints with labels.
    pub fn mean_at(&self, di: usize) -> f64 {
        let used: Vec<_> = self.joints.iter().filter(|j| j.count > 0).collect();
        if used.is_empty() {
            return 0.0;
        }
        used.iter().map(|j| j.accuracy[di]).sum::<f64>() / used.len() as f64
    }

    pub fn joint(&self, name: &str) -> Option<&JointCurve> {
        self.joints.iter().find(|j| j.name == name)
    }

    pub fn with_names(mut self, names: &[String]) -> Self {
        for (j, n) in self.joints.iter_mut().zip(names) {
            j.name = n.clone();
        }
        self
    }

    /// Pointwise mean of the given joints, e.g. left and right wrist.
    pub fn average(&self, joints: &[usize], name: &str) -> Result<JointCurve> {
        let picked: Vec<&JointCurve> = joints
            .iter()
            .map(|&j| {
                self.joints
                    .get(j)
                    .ok_or_else(|| Error::Invalid(format!("no joint {j}")))
            })
            .collect::<Result<_>>()?;
        compare_average(&picked, name)
    }
}

/// Fraction of frames whose prediction lies within `d` (inclusive) of the
/// label, per joint and threshold. Joints hidden in the label are left out
/// of both counts; a joint never visible gets accuracy 0 and count 0.
pub fn pck(predictions: &[Pose], ground_truth: &[Pose], d_values: &[f64]) -> Result<PckCurve> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::shape(
            "pck",
            format!("{} predictions for {} labels", predictions.len(), ground_truth.len()),
        ));
    }
    if d_values.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::Invalid("d values must be sorted ascending".into()));
    }
    let k = ground_truth.first().map_or(0, Pose::len);
    for (p, g) in predictions.iter().zip(ground_truth) {
        if p.len() != k || g.len() != k {
            return Err(Error::shape("pck", format!("poses with {} and {} joints, expected {k}", p.len(), g.len())));
        }
    }
    let joints = (0..k)
        .map(|j| {
            let errors: Vec<f64> = predictions
                .iter()
                .zip(ground_truth)
                .filter(|(_, g)| g.joints[j].visible)
                .map(|(p, g)| {
                    let e = p.joints[j].distance(&g.joints[j]);
                    if e.is_nan() {
                        f64::INFINITY
                    } else {
                        e
                    }
                })
                .collect();
            let n = errors.len();
            JointCurve {
                name: format!("joint{j}"),
                d: d_values.to_vec(),
                accuracy: d_values
                    .iter()
                    .map(|&d| {
                        if n == 0 {
                            0.0
                        } else {
                            errors.iter().filter(|&&e| e <= d).count() as f64 / n as f64
                        }
                    })
                    .collect(),
                count: n,
            }
        })
        .collect();
    Ok(PckCurve {
        joints,
        frames: ground_truth.len(),
    })
}

/// Pointwise mean of curves that share a `d` grid.
pub fn compare_average(curves: &[&JointCurve], name: &str) -> Result<JointCurve> {
    let first = curves
        .first()
        .ok_or_else(|| Error::Invalid("nothing to average".into()))?;
    if curves.iter().any(|c| c.d != first.d) {
        return Err(Error::shape("compare_average", "curves use different d grids"));
    }
    let n = curves.len() as f64;
    Ok(JointCurve {
        name: name.to_string(),
        d: first.d.clone(),
        accuracy: (0..first.d.len())
            .map(|i| curves.iter().map(|c| c.accuracy[i]).sum::<f64>() / n)
            .collect(),
        count: curves.iter().map(|c| c.count).sum(),
    })
}

/// `0, step, 2 step, ..., d_max`.
pub fn d_grid(d_max: f64, step: f64) -> Vec<f64> {
    let n = (d_max / step).round() as usize;
    (0..=n).map(|i| i as f64 * step).collect()
}

/// A method's curves, as plotted together.
#[derive(Clone, Debug)]
pub struct NamedCurves {
    pub method: String,
    pub curves: Vec<JointCurve>,
}

pub fn curves_to_csv(sets: &[NamedCurves]) -> String {
    let mut s = String::from("method,joint,d,accuracy\n");
    for set in sets {
        for c in &set.curves {
            for (d, a) in c.d.iter().zip(&c.accuracy) {
                writeln!(s, "{},{},{d},{a}", set.method, c.name).unwrap();
            }
        }
    }
    s
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Standalone SVG: accuracy against d, one line per method and joint.
pub fn curves_to_svg(sets: &[NamedCurves], title: &str) -> String {
    let (w, h) = (640.0, 420.0);
    let (l, r, t, b) = (60.0, 190.0, 40.0, 50.0);
    let (pw, ph) = (w - l - r, h - t - b);
    let d_max = sets
        .iter()
        .flat_map(|s| s.curves.iter().flat_map(|c| c.d.iter().copied()))
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let px = |d: f64| l + pw * d / d_max;
    let py = |a: f64| t + ph * (1.0 - a);

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, l + pw / 2.0, escape(title)).unwrap();
    for i in 0..=5 {
        let a = i as f64 / 5.0;
        let y = py(a);
        writeln!(s, r##"<line x1="{l}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/>"##, l + pw).unwrap();
        writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, l - 6.0, y + 4.0, (a * 100.0).round()).unwrap();
        let d = d_max * a;
        let x = px(d);
        writeln!(s, r##"<line x1="{x:.2}" y1="{t}" x2="{x:.2}" y2="{:.2}" stroke="#ddd"/>"##, t + ph).unwrap();
        writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{:.1}</text>"#, t + ph + 16.0, d).unwrap();
    }
    writeln!(s, r#"<rect x="{l}" y="{t}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#).unwrap();
    writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">distance d (pixels)</text>"#, l + pw / 2.0, h - 12.0).unwrap();
    writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">accuracy (%)</text>"#,
        t + ph / 2.0,
        t + ph / 2.0
    )
    .unwrap();

    let mut series = 0;
    for (mi, set) in sets.iter().enumerate() {
        let dash = if mi % 2 == 1 { r#" stroke-dasharray="6 3""# } else { "" };
        for c in &set.curves {
            let color = PALETTE[series % PALETTE.len()];
            let pts: Vec<String> = c
                .d
                .iter()
                .zip(&c.accuracy)
                .map(|(&d, &a)| format!("{:.2},{:.2}", px(d), py(a)))
                .collect();
            writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2"{dash} points="{}"/>"#,
                pts.join(" ")
            )
            .unwrap();
            let ly = t + 10.0 + 18.0 * series as f64;
            let lx = l + pw + 14.0;
            writeln!(
                s,
                r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"{dash}/>"#,
                lx + 24.0
            )
            .unwrap();
            writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}">{}: {}</text>"#,
                lx + 30.0,
                ly + 4.0,
                escape(&set.method),
                escape(&c.name)
            )
            .unwrap();
            series += 1;
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `<stem>.csv` and `<stem>.svg` into `dir`.
pub fn emit_curves(sets: &[NamedCurves], dir: impl AsRef<Path>, stem: &str) -> Result<(PathBuf, PathBuf)> {
    if sets.is_empty() {
        return Err(Error::Invalid("no curves to emit".into()));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join(format!("{stem}.csv"));
    let svg = dir.join(format!("{stem}.svg"));
    fs::write(&csv, curves_to_csv(sets)).map_err(|e| Error::io(&csv, e))?;
    fs::write(&svg, curves_to_svg(sets, stem)).map_err(|e| Error::io(&svg, e))?;
    Ok((csv, svg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::Joint;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn poses(points: &[&[(f64, f64)]]) -> Vec<Pose> {
        points.iter().map(|p| Pose::from_points(p)).collect()
    }

    #[test]
    fn perfect_predictions() {
        let gt = poses(&[&[(1.0, 2.0), (3.0, 4.0)], &[(5.0, 6.0), (7.0, 8.0)]]);
        let c = pck(&gt, &gt, &[0.0, 1.0, 5.0]).unwrap();
        for j in &c.joints {
            assert_eq!(j.accuracy, vec![1.0, 1.0, 1.0]);
        }
    }

    #[test]
    fn step_at_exact_error() {
        let gt = poses(&[&[(10.0, 10.0)], &[(20.0, 5.0)]]);
        let pred = poses(&[&[(13.0, 14.0)], &[(20.0, 0.0)]]);
        let c = pck(&pred, &gt, &[0.0, 4.99, 5.0, 6.0]).unwrap();
        assert_eq!(c.joints[0].accuracy, vec![0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn hidden_joints_are_excluded() {
        let mut gt = poses(&[&[(0.0, 0.0)], &[(0.0, 0.0)], &[(0.0, 0.0)]]);
        gt[2].joints[0].visible = false;
        let pred = poses(&[&[(0.0, 0.0)], &[(9.0, 0.0)], &[(9.0, 0.0)]]);
        let c = pck(&pred, &gt, &[1.0]).unwrap();
        assert_eq!(c.joints[0].accuracy, vec![0.5]);
        assert_eq!(c.joints[0].count, 2);
        assert!(pck(&pred[..2], &gt, &[1.0]).is_err());
    }

    #[test]
    fn averages() {
        let zero = JointCurve {
            name: "a".into(),
            d: vec![1.0, 2.0],
            accuracy: vec![0.0, 0.0],
            count: 3,
        };
        let one = JointCurve {
            accuracy: vec![1.0, 1.0],
            ..zero.clone()
        };
        assert_eq!(compare_average(&[&zero, &one], "m").unwrap().accuracy, vec![0.5, 0.5]);
        assert_eq!(compare_average(&[&one, &one], "m").unwrap().accuracy, one.accuracy);
        let other = JointCurve {
            d: vec![1.0, 3.0],
            ..zero.clone()
        };
        assert!(compare_average(&[&zero, &other], "m").is_err());
        assert!(compare_average(&[], "m").is_err());
    }

    fn flat(method: &str) -> NamedCurves {
        NamedCurves {
            method: method.into(),
            curves: vec![JointCurve {
                name: "wrist".into(),
                d: d_grid(10.0, 1.0),
                accuracy: vec![0.5; 11],
                count: 4,
            }],
        }
    }

    #[test]
    fn emitted_files() {
        let dir = tempfile::tempdir().unwrap();
        let (csv, svg) = emit_curves(&[flat("only")], dir.path(), "pck").unwrap();
        let text = fs::read_to_string(&csv).unwrap();
        assert_eq!(text.lines().count(), 1 + 11);
        assert!(text.starts_with("method,joint,d,accuracy\nonly,wrist,0,0.5\n"));

        let (_, svg2) = emit_curves(&[flat("sum"), flat("max <pooled>")], dir.path(), "two").unwrap();
        let plot = fs::read_to_string(&svg2).unwrap();
        assert!(plot.contains("sum: wrist") && plot.contains("max &lt;pooled&gt;: wrist"));

        let first = fs::read(&svg).unwrap();
        emit_curves(&[flat("only")], dir.path(), "pck").unwrap();
        assert_eq!(fs::read(&svg).unwrap(), first);
        assert!(emit_curves(&[], dir.path(), "x").is_err());
    }

    /// Coordinates on a 1/8 grid, so integer shifts are exact.
    fn eighth(v: f64) -> f64 {
        (v * 8.0).round() / 8.0
    }

    fn random_set(rng: &mut ChaCha8Rng, frames: usize, k: usize) -> (Vec<Pose>, Vec<Pose>) {
        let gt: Vec<Pose> = (0..frames)
            .map(|_| {
                Pose::new(
                    (0..k)
                        .map(|_| Joint {
                            visible: rng.gen_bool(0.85),
                            ..Joint::new(eighth(rng.gen_range(0.0..64.0)), eighth(rng.gen_range(0.0..64.0)))
                        })
                        .collect(),
                )
            })
            .collect();
        let pred = gt
            .iter()
            .map(|g| {
                let (ex, ey) = (eighth(rng.gen_range(-8.0..8.0)), eighth(rng.gen_range(-8.0..8.0)));
                g.map_coords(|x, y| (x + ex, y + ey))
            })
            .collect();
        (pred, gt)
    }

    proptest! {
        #[test]
        fn monotone_and_translation_invariant(seed in any::<u64>(), dx in -50.0f64..50.0, dy in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (pred, gt) = random_set(&mut rng, 12, 3);
            let ds = d_grid(20.0, 0.5);
            let c = pck(&pred, &gt, &ds).unwrap();
            for j in &c.joints {
                prop_assert!(j.accuracy.windows(2).all(|w| w[0] <= w[1]));
                prop_assert!(j.accuracy.iter().all(|a| (0.0..=1.0).contains(a)));
            }
            let far = pck(&pred, &gt, &[1e9]).unwrap();
            prop_assert!(far.joints.iter().all(|j| j.count == 0 || j.accuracy[0] == 1.0));

            let (dx, dy) = (dx.round(), dy.round());
            let shift = |p: &Vec<Pose>| p.iter().map(|q| q.map_coords(|x, y| (x + dx, y + dy))).collect::<Vec<_>>();
            let moved = pck(&shift(&pred), &shift(&gt), &ds).unwrap();
            prop_assert_eq!(c, moved);
        }
    }
}
