//! Gaussian confidence-map targets and argmax decoding.
//!
//! Heatmap space relates to image space by a pure scale: an image point
//! `(x, y)` sits at `(x / s, y / s)` on the heatmap grid, and grid pixel
//! `(i, j)` decodes to `(i * s, j * s)`. Pixel centres are at integer
//! coordinates in both spaces, so the round trip error is at most `s / 2`
//! per axis and has no systematic offset.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::pose::{Joint, Pose};
use crate::tensor::Tensor;

pub const DEFAULT_SIGMA: f64 = 1.5;

/// `(1, k, H, W)` tensor, one confidence plane per joint in skeleton order.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapStack {
    tensor: Tensor,
}

impl HeatmapStack {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.batch() != 1 {
            return Err(Error::shape(
                "heatmap",
                format!("expected batch 1, got {:?}", tensor.shape()),
            ));
        }
        Ok(HeatmapStack { tensor })
    }

    pub fn zeros(joints: usize, height: usize, width: usize) -> Self {
        HeatmapStack {
            tensor: Tensor::zeros([1, joints, height, width]),
        }
    }

    pub fn joints(&self) -> usize {
        self.tensor.channels()
    }

    /// `(height, width)`.
    pub fn size(&self) -> (usize, usize) {
        (self.tensor.height(), self.tensor.width())
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn plane(&self, joint: usize) -> &[f64] {
        self.tensor.plane(0, joint)
    }

    pub fn plane_mut(&mut self, joint: usize) -> &mut [f64] {
        self.tensor.plane_mut(0, joint)
    }
}

/// Nearest grid index, ties resolved towards the lower index (which is
/// where argmax tie-breaking puts the peak of a symmetric Gaussian).
pub fn nearest_pixel(coord: f64) -> i64 {
    (coord - 0.5).ceil() as i64
}

/// Whether a heatmap-space point has its nearest pixel inside the grid.
pub fn in_grid(hx: f64, hy: f64, height: usize, width: usize) -> bool {
    if !hx.is_finite() || !hy.is_finite() {
        return false;
    }
    let (i, j) = (nearest_pixel(hx), nearest_pixel(hy));
    i >= 0 && j >= 0 && (i as usize) < width && (j as usize) < height
}

pub fn gaussian_peak(sigma: f64) -> f64 {
    1.0 / (2.0 * PI * sigma * sigma)
}

/// Renders one isotropic Gaussian per joint at heatmap resolution.
/// Hidden or off-grid joints give an all-zero plane.
pub fn synthesize_target(
    pose: &Pose,
    sigma: f64,
    size: (usize, usize),
    scale: f64,
) -> Result<HeatmapStack> {
    if !(sigma > 0.0) {
        return Err(Error::Invalid(format!("sigma must be positive, got {sigma}")));
    }
    if !(scale > 0.0) {
        return Err(Error::Invalid(format!("scale must be positive, got {scale}")));
    }
    let (h, w) = size;
    let mut out = HeatmapStack::zeros(pose.len(), h, w);
    let amp = gaussian_peak(sigma);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for (c, joint) in pose.joints.iter().enumerate() {
        let (hx, hy) = (joint.x / scale, joint.y / scale);
        if !joint.visible || !in_grid(hx, hy, h, w) {
            continue;
        }
        let plane = out.plane_mut(c);
        // separable: exp(-(dx^2 + dy^2) k) = exp(-dx^2 k) exp(-dy^2 k)
        let gx: Vec<f64> = (0..w).map(|i| (-(hx - i as f64).powi(2) * inv).exp()).collect();
        for j in 0..h {
            let gy = amp * (-(hy - j as f64).powi(2) * inv).exp();
            for (v, g) in plane[j * w..(j + 1) * w].iter_mut().zip(&gx) {
                *v = gy * g;
            }
        }
    }
    Ok(out)
}

/// Which joints contribute to the loss: visible and on the grid.
pub fn target_mask(pose: &Pose, size: (usize, usize), scale: f64) -> Vec<bool> {
    pose.joints
        .iter()
        .map(|j| j.visible && in_grid(j.x / scale, j.y / scale, size.0, size.1))
        .collect()
}

/// Index and value of the first maximum in row-major order.
pub fn argmax(plane: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &v) in plane.iter().enumerate() {
        if v > plane[best] {
            best = i;
        }
    }
    (best, plane.get(best).copied().unwrap_or(f64::NAN))
}

/// Per-joint maximum, mapped back to image coordinates. The confidence of
/// each joint is the maximum value.
pub fn decode_argmax(maps: &HeatmapStack, scale: f64) -> Pose {
    let (_, w) = maps.size();
    Pose::new(
        (0..maps.joints())
            .map(|c| {
                let (idx, value) = argmax(maps.plane(c));
                let (i, j) = ((idx % w) as f64, (idx / w) as f64);
                Joint {
                    x: i * scale,
                    y: j * scale,
                    visible: true,
                    confidence: value,
                }
            })
            .collect(),
    )
}

pub fn coords_to_heatmap_space(pose: &Pose, scale: f64) -> Result<Pose> {
    check_scale(scale)?;
    Ok(pose.map_coords(|x, y| (x / scale, y / scale)))
}

pub fn heatmap_to_coords(pose: &Pose, scale: f64) -> Result<Pose> {
    check_scale(scale)?;
    Ok(pose.map_coords(|x, y| (x * scale, y * scale)))
}

fn check_scale(scale: f64) -> Result<()> {
    if scale > 0.0 && scale.is_finite() {
        Ok(())
    } else {
        Err(Error::Invalid(format!("scale must be positive, got {scale}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn peak_and_neighbour_values() {
        let pose = Pose::from_points(&[(40.0, 24.0)]);
        let t = synthesize_target(&pose, 1.5, (16, 16), 4.0).unwrap();
        let peak = t.tensor().at(0, 0, 6, 10);
        // 1 / (2 pi 2.25)
        assert!((peak - 0.070_735_5).abs() < 1e-6);
        assert!((peak - 1.0 / (4.5 * PI)).abs() < 1e-15);
        let side = t.tensor().at(0, 0, 6, 11);
        assert!((side - 0.056_640_6).abs() < 1e-6);
        assert!((side - peak * (-1.0f64 / 4.5).exp()).abs() < 1e-15);
    }

    #[test]
    fn off_image_and_hidden_joints_are_zero() {
        let mut pose = Pose::from_points(&[(-30.0, 10.0), (10.0, 10.0), (10.0, 200.0)]);
        pose.joints[1].visible = false;
        let t = synthesize_target(&pose, 1.5, (16, 16), 4.0).unwrap();
        for c in 0..3 {
            assert!(t.plane(c).iter().all(|&v| v == 0.0));
        }
        assert_eq!(target_mask(&pose, (16, 16), 4.0), vec![false, false, false]);
    }

    #[test]
    fn rejects_non_positive_sigma() {
        let pose = Pose::from_points(&[(4.0, 4.0)]);
        assert!(synthesize_target(&pose, 0.0, (8, 8), 1.0).is_err());
        assert!(synthesize_target(&pose, -1.0, (8, 8), 1.0).is_err());
    }

    #[test]
    fn decode_ties_break_row_major() {
        let flat = HeatmapStack::new(Tensor::full([1, 1, 8, 8], 0.3)).unwrap();
        let p = decode_argmax(&flat, 4.0);
        assert_eq!((p.joints[0].x, p.joints[0].y), (0.0, 0.0));
        assert_eq!(p.joints[0].confidence, 0.3);

        let mut two = HeatmapStack::zeros(1, 32, 32);
        two.tensor_mut().set(0, 0, 5, 5, 1.0);
        two.tensor_mut().set(0, 0, 20, 20, 1.0);
        let p = decode_argmax(&two, 1.0);
        assert_eq!((p.joints[0].x, p.joints[0].y), (5.0, 5.0));
    }

    #[test]
    fn coordinate_mapping() {
        let p = Pose::from_points(&[(100.0, 60.0)]);
        let h = coords_to_heatmap_space(&p, 4.0).unwrap();
        assert_eq!((h.joints[0].x, h.joints[0].y), (25.0, 15.0));
        assert_eq!(heatmap_to_coords(&h, 4.0).unwrap(), p);
        assert_eq!(coords_to_heatmap_space(&p, 1.0).unwrap(), p);
        assert!(coords_to_heatmap_space(&p, 0.0).is_err());
    }

    #[test]
    fn round_trip_over_random_poses() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scale = 4.0;
        for _ in 0..1000 {
            let pose = Pose::from_points(
                &(0..7)
                    .map(|_| (rng.gen_range(0.0..62.0), rng.gen_range(0.0..62.0)))
                    .collect::<Vec<_>>(),
            );
            let t = synthesize_target(&pose, 1.5, (16, 16), scale).unwrap();
            let back = decode_argmax(&t, scale);
            for (a, b) in pose.joints.iter().zip(&back.joints) {
                assert!((a.x - b.x).abs() <= scale / 2.0 + 1e-9);
                assert!((a.y - b.y).abs() <= scale / 2.0 + 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn peak_sits_at_nearest_pixel(hx in 0.0f64..31.4, hy in 0.0f64..31.4, sigma in 0.5f64..3.0) {
            let pose = Pose::from_points(&[(hx * 2.0, hy * 2.0)]);
            let t = synthesize_target(&pose, sigma, (32, 32), 2.0).unwrap();
            let (idx, _) = argmax(t.plane(0));
            prop_assert_eq!((idx % 32) as i64, nearest_pixel(hx));
            prop_assert_eq!((idx / 32) as i64, nearest_pixel(hy));
            prop_assert!(t.plane(0).iter().all(|&v| v >= 0.0));
            prop_assert!(t.plane(0)[idx] > 0.0);
        }

        #[test]
        fn interior_mass_is_nearly_one(hx in 6.0f64..26.0, hy in 6.0f64..26.0) {
            // more than 4 sigma from every border for sigma = 1.5
            let pose = Pose::from_points(&[(hx, hy)]);
            let t = synthesize_target(&pose, 1.5, (32, 32), 1.0).unwrap();
            let mass: f64 = t.plane(0).iter().sum();
            prop_assert!(mass <= 1.0 + 1e-12);
            prop_assert!(mass >= 0.95);
        }
    }
}
