//! The canonical 26-part body layout, its four limb sub-trees and the
//! limb table used by PCP scoring.
//!
//! Part ids:
//!
//! ```text
//!  0 head_top     1 head_mid     2 neck
//!  3 chest        4 torso_mid    5 pelvis
//!  6..=10  left arm   (shoulder, upper-arm mid, elbow, forearm mid, wrist)
//! 11..=15  right arm
//! 16..=20  left leg   (hip, thigh mid, knee, shin mid, ankle)
//! 21..=25  right leg
//! ```

pub const NUM_PARTS: usize = 26;

pub const HEAD_TOP: usize = 0;
pub const HEAD_MID: usize = 1;
pub const NECK: usize = 2;
pub const CHEST: usize = 3;
pub const TORSO_MID: usize = 4;
pub const PELVIS: usize = 5;

pub const PART_NAMES: [&str; NUM_PARTS] = [
    "head_top",
    "head_mid",
    "neck",
    "chest",
    "torso_mid",
    "pelvis",
    "l_shoulder",
    "l_uarm_mid",
    "l_elbow",
    "l_farm_mid",
    "l_wrist",
    "r_shoulder",
    "r_uarm_mid",
    "r_elbow",
    "r_farm_mid",
    "r_wrist",
    "l_hip",
    "l_thigh_mid",
    "l_knee",
    "l_shin_mid",
    "l_ankle",
    "r_hip",
    "r_thigh_mid",
    "r_knee",
    "r_shin_mid",
    "r_ankle",
];

/// The four limb sub-trees. Torso and head parts stay in the upper layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SubTreeName {
    LeftArm,
    RightArm,
    LeftLeg,
    RightLeg,
}

impl SubTreeName {
    pub const ALL: [SubTreeName; 4] = [
        SubTreeName::LeftArm,
        SubTreeName::RightArm,
        SubTreeName::LeftLeg,
        SubTreeName::RightLeg,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SubTreeName::LeftArm => "left_arm",
            SubTreeName::RightArm => "right_arm",
            SubTreeName::LeftLeg => "left_leg",
            SubTreeName::RightLeg => "right_leg",
        }
    }

    pub fn is_leg(&self) -> bool {
        matches!(self, SubTreeName::LeftLeg | SubTreeName::RightLeg)
    }
}

/// Sub-tree definition: the ordered observed parts of one limb, rooted at
/// their centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct SubTreeDefinition {
    pub name: SubTreeName,
    pub part_ids: Vec<usize>,
}

pub fn sub_tree_definitions() -> Vec<SubTreeDefinition> {
    SubTreeName::ALL
        .iter()
        .map(|&name| SubTreeDefinition {
            name,
            part_ids: match name {
                SubTreeName::LeftArm => (6..=10).collect(),
                SubTreeName::RightArm => (11..=15).collect(),
                SubTreeName::LeftLeg => (16..=20).collect(),
                SubTreeName::RightLeg => (21..=25).collect(),
            },
        })
        .collect()
}

/// Parts that live in the upper layer (torso plus head chain).
pub fn upper_layer_parts() -> Vec<usize> {
    vec![HEAD_TOP, HEAD_MID, NECK, CHEST, TORSO_MID, PELVIS]
}

/// Swap table for observer-centric mirroring: left and right limbs trade
/// ids, axial parts stay.
pub fn mirror_part_id(id: usize) -> usize {
    match id {
        6..=10 => id + 5,
        11..=15 => id - 5,
        16..=20 => id + 5,
        21..=25 => id - 5,
        other => other,
    }
}

/// One scored limb for PCP: a name and the endpoint part pairs it
/// aggregates (paired left/right limbs are averaged into one column).
#[derive(Debug, Clone, PartialEq)]
pub struct LimbDefinition {
    pub name: String,
    pub endpoint_pairs: Vec<(usize, usize)>,
}

pub fn limb_definitions() -> Vec<LimbDefinition> {
    let limb = |name: &str, pairs: &[(usize, usize)]| LimbDefinition {
        name: name.to_string(),
        endpoint_pairs: pairs.to_vec(),
    };
    vec![
        limb("Torso", &[(NECK, PELVIS)]),
        limb("Head", &[(HEAD_TOP, NECK)]),
        limb("U.Leg", &[(16, 18), (21, 23)]),
        limb("L.Leg", &[(18, 20), (23, 25)]),
        limb("U.Arm", &[(6, 8), (11, 13)]),
        limb("L.Arm", &[(8, 10), (13, 15)]),
    ]
}

/// A fully labeled training pose: 26 part locations in image pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingAnnotation {
    pub points: Vec<(f64, f64)>,
}

impl TrainingAnnotation {
    pub fn new(points: Vec<(f64, f64)>) -> Self {
        TrainingAnnotation { points }
    }

    pub fn torso_height(&self) -> f64 {
        let (nx, ny) = self.points[NECK];
        let (px, py) = self.points[PELVIS];
        ((nx - px).powi(2) + (ny - py).powi(2)).sqrt()
    }

    pub fn mirrored(&self, image_width: f64) -> TrainingAnnotation {
        let mut points = vec![(0.0, 0.0); self.points.len()];
        for (id, &(x, y)) in self.points.iter().enumerate() {
            points[mirror_part_id(id)] = (image_width - 1.0 - x, y);
        }
        TrainingAnnotation { points }
    }

    /// Rotate all points about the image center by `degrees`, matching
    /// `Image::rotate_about_center`.
    pub fn rotated(&self, degrees: f64, image_width: f64, image_height: f64) -> TrainingAnnotation {
        let theta = degrees.to_radians();
        let (s, c) = theta.sin_cos();
        let cx = (image_width - 1.0) / 2.0;
        let cy = (image_height - 1.0) / 2.0;
        let points = self
            .points
            .iter()
            .map(|&(x, y)| {
                let dx = x - cx;
                let dy = y - cy;
                // Forward map; the image rotation samples with the inverse.
                (cx + c * dx - s * dy, cy + s * dx + c * dy)
            })
            .collect();
        TrainingAnnotation { points }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sub_trees_are_disjoint_and_exclude_torso() {
        let defs = sub_tree_definitions();
        let mut seen = vec![false; NUM_PARTS];
        for d in &defs {
            for &p in &d.part_ids {
                assert!(!seen[p], "part {p} in two sub-trees");
                seen[p] = true;
            }
        }
        for p in upper_layer_parts() {
            assert!(!seen[p], "torso/head part {p} inside a sub-tree");
            seen[p] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn mirror_is_involution_on_ids() {
        for id in 0..NUM_PARTS {
            assert_eq!(mirror_part_id(mirror_part_id(id)), id);
        }
    }

    #[test]
    fn limb_endpoints_are_valid() {
        for limb in limb_definitions() {
            for (a, b) in limb.endpoint_pairs {
                assert!(a < NUM_PARTS && b < NUM_PARTS && a != b);
            }
        }
    }

    #[test]
    fn rotation_composition_recovers_original() {
        let ann = TrainingAnnotation::new(
            (0..NUM_PARTS)
                .map(|i| (10.0 + i as f64 * 3.0, 20.0 + (i % 5) as f64 * 7.0))
                .collect(),
        );
        let back = ann.rotated(10.0, 100.0, 100.0).rotated(-10.0, 100.0, 100.0);
        for (a, b) in ann.points.iter().zip(&back.points) {
            assert!((a.0 - b.0).abs() < 1e-6 && (a.1 - b.1).abs() < 1e-6);
        }
    }

    #[test]
    fn mirror_annotation_swaps_sides() {
        let mut pts = vec![(0.0, 0.0); NUM_PARTS];
        pts[6] = (10.0, 40.0); // l_shoulder
        pts[11] = (30.0, 40.0); // r_shoulder
        let ann = TrainingAnnotation::new(pts).mirrored(64.0);
        assert_eq!(ann.points[11], (64.0 - 1.0 - 10.0, 40.0));
        assert_eq!(ann.points[6], (64.0 - 1.0 - 30.0, 40.0));
    }
}
