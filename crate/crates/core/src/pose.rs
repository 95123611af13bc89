//! Joint coordinates and the skeleton they belong to.
//!
//! Coordinates use the pixel-index convention: the centre of pixel
//! `(col, row)` sits at `(x, y) = (col, row)`.

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Joint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
    pub confidence: f64,
}

impl Joint {
    pub fn new(x: f64, y: f64) -> Self {
        Joint {
            x,
            y,
            visible: true,
            confidence: 1.0,
        }
    }

    pub fn hidden(x: f64, y: f64) -> Self {
        Joint {
            visible: false,
            ..Joint::new(x, y)
        }
    }

    pub fn distance(&self, other: &Joint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// One joint per skeleton entry, in skeleton order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Pose {
    pub joints: Vec<Joint>,
}

impl Pose {
    pub fn new(joints: Vec<Joint>) -> Self {
        Pose { joints }
    }

    pub fn from_points(points: &[(f64, f64)]) -> Self {
        Pose {
            joints: points.iter().map(|&(x, y)| Joint::new(x, y)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    /// Applies `f` to every coordinate, keeping visibility and confidence.
    pub fn map_coords(&self, f: impl Fn(f64, f64) -> (f64, f64)) -> Pose {
        Pose {
            joints: self
                .joints
                .iter()
                .map(|j| {
                    let (x, y) = f(j.x, j.y);
                    Joint { x, y, ..*j }
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.joints.iter().all(|j| j.x.is_finite() && j.y.is_finite())
    }
}

/// Named joints plus the left/right pairs exchanged by a horizontal flip.
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    pub names: Vec<String>,
    pub mirror_pairs: Vec<(usize, usize)>,
}

pub const HEAD: usize = 0;
pub const LEFT_SHOULDER: usize = 1;
pub const RIGHT_SHOULDER: usize = 2;
pub const LEFT_ELBOW: usize = 3;
pub const RIGHT_ELBOW: usize = 4;
pub const LEFT_WRIST: usize = 5;
pub const RIGHT_WRIST: usize = 6;

impl Skeleton {
    /// Seven upper-body joints: head, shoulders, elbows, wrists.
    pub fn upper_body() -> Self {
        Skeleton {
            names: [
                "head",
                "left_shoulder",
                "right_shoulder",
                "left_elbow",
                "right_elbow",
                "left_wrist",
                "right_wrist",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            mirror_pairs: vec![
                (LEFT_SHOULDER, RIGHT_SHOULDER),
                (LEFT_ELBOW, RIGHT_ELBOW),
                (LEFT_WRIST, RIGHT_WRIST),
            ],
        }
    }

    /// Skeleton over arbitrary names; `left_<x>` and `right_<x>` are paired
    /// for flipping.
    pub fn from_names(names: &[String]) -> Self {
        let mut mirror_pairs = Vec::new();
        for (l, name) in names.iter().enumerate() {
            if let Some(part) = name.strip_prefix("left_") {
                let right = format!("right_{part}");
                if let Some(r) = names.iter().position(|n| *n == right) {
                    mirror_pairs.push((l, r));
                }
            }
        }
        Skeleton {
            names: names.to_vec(),
            mirror_pairs,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Index of each joint's mirror image (itself when unpaired).
    pub fn mirror_map(&self) -> Vec<usize> {
        let mut map: Vec<usize> = (0..self.len()).collect();
        for &(l, r) in &self.mirror_pairs {
            map[l] = r;
            map[r] = l;
        }
        map
    }

    pub fn wrists(&self) -> Vec<usize> {
        self.names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.ends_with("wrist"))
            .map(|(i, _)| i)
            .collect()
    }
}

impl Default for Skeleton {
    fn default() -> Self {
        Skeleton::upper_body()
    }
}
