//! Kinematic tree, mirror pairing and the body-part label taxonomy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Background label in every label image.
pub const BACKGROUND: u8 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoneClass {
    Torso,
    UpperLimb,
    LowerLimb,
    Head,
}

/// A rigid segment from `parent` to `child`; rendered with part `label`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bone {
    pub name: String,
    pub parent: usize,
    pub child: usize,
    pub class: BoneClass,
    pub label: u8,
}

/// One element of the painter order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Primitive {
    /// Index into [`KinematicLayout::bones`].
    Bone(usize),
    /// Circle at a joint.
    Joint(usize),
}

/// How joint circles are labeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Taxonomy {
    /// Every limb joint circle carries its own label: 14 segments + 10
    /// joints + background = 25 classes.
    #[default]
    Detailed,
    /// Joint circles reuse the label of the segment ending at the joint:
    /// 14 segments + background = 15 classes.
    Coarse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinematicLayout {
    pub joint_names: Vec<String>,
    /// `None` only for the root (pelvis, index 0).
    pub parents: Vec<Option<usize>>,
    /// Rest offset of each joint from its parent, millimeters.
    pub offsets: Vec<[f64; 3]>,
    /// Left/right mirror image of each joint (self for central joints).
    pub mirror: Vec<usize>,
    pub bones: Vec<Bone>,
    /// Circle label per joint, `None` where no circle is drawn.
    pub joint_labels: Vec<Option<u8>>,
    /// Part names indexed by label; entry 0 is the background.
    pub part_names: Vec<String>,
    /// Mirror image of each part label.
    pub part_mirror: Vec<u8>,
    /// Euler (x, y, z) limits in degrees for the rotation of the segment
    /// ending at each joint, relative to its parent segment; for the root
    /// this is the global orientation.
    pub angle_limits_deg: Vec<[[f64; 2]; 3]>,
    pub painter_order: Vec<Primitive>,
}

// Joint indices of the default 15-joint skeleton.
pub const PELVIS: usize = 0;
pub const NECK: usize = 1;
pub const HEAD: usize = 2;
pub const R_SHOULDER: usize = 3;
pub const R_ELBOW: usize = 4;
pub const R_WRIST: usize = 5;
pub const L_SHOULDER: usize = 6;
pub const L_ELBOW: usize = 7;
pub const L_WRIST: usize = 8;
pub const R_HIP: usize = 9;
pub const R_KNEE: usize = 10;
pub const R_ANKLE: usize = 11;
pub const L_HIP: usize = 12;
pub const L_KNEE: usize = 13;
pub const L_ANKLE: usize = 14;

impl KinematicLayout {
    /// 15-joint human skeleton in camera-style axes (x right, y down, z
    /// away from the viewer), facing the camera in a T-pose at rest.
    pub fn human15(taxonomy: Taxonomy) -> Self {
        let joints: [(&str, Option<usize>, [f64; 3]); 15] = [
            ("pelvis", None, [0.0, 0.0, 0.0]),
            ("neck", Some(PELVIS), [0.0, -500.0, 0.0]),
            ("head", Some(NECK), [0.0, -250.0, 0.0]),
            ("r_shoulder", Some(NECK), [-180.0, 0.0, 0.0]),
            ("r_elbow", Some(R_SHOULDER), [-290.0, 0.0, 0.0]),
            ("r_wrist", Some(R_ELBOW), [-260.0, 0.0, 0.0]),
            ("l_shoulder", Some(NECK), [180.0, 0.0, 0.0]),
            ("l_elbow", Some(L_SHOULDER), [290.0, 0.0, 0.0]),
            ("l_wrist", Some(L_ELBOW), [260.0, 0.0, 0.0]),
            ("r_hip", Some(PELVIS), [-110.0, 0.0, 0.0]),
            ("r_knee", Some(R_HIP), [0.0, 430.0, 0.0]),
            ("r_ankle", Some(R_KNEE), [0.0, 420.0, 0.0]),
            ("l_hip", Some(PELVIS), [110.0, 0.0, 0.0]),
            ("l_knee", Some(L_HIP), [0.0, 430.0, 0.0]),
            ("l_ankle", Some(L_KNEE), [0.0, 420.0, 0.0]),
        ];
        let mirror = vec![0, 1, 2, 6, 7, 8, 3, 4, 5, 12, 13, 14, 9, 10, 11];

        use BoneClass::*;
        let bone_specs: [(&str, usize, BoneClass); 14] = [
            ("torso", NECK, Torso),
            ("head", HEAD, Head),
            ("r_clavicle", R_SHOULDER, UpperLimb),
            ("r_upper_arm", R_ELBOW, UpperLimb),
            ("r_forearm", R_WRIST, LowerLimb),
            ("l_clavicle", L_SHOULDER, UpperLimb),
            ("l_upper_arm", L_ELBOW, UpperLimb),
            ("l_forearm", L_WRIST, LowerLimb),
            ("r_hip", R_HIP, UpperLimb),
            ("r_thigh", R_KNEE, UpperLimb),
            ("r_shin", R_ANKLE, LowerLimb),
            ("l_hip", L_HIP, UpperLimb),
            ("l_thigh", L_KNEE, UpperLimb),
            ("l_shin", L_ANKLE, LowerLimb),
        ];
        let bones: Vec<Bone> = bone_specs
            .iter()
            .enumerate()
            .map(|(i, &(name, child, class))| Bone {
                name: name.to_string(),
                parent: joints[child].1.expect("non-root"),
                child,
                class,
                label: i as u8 + 1,
            })
            .collect();
        let bone_into = |joint: usize| bones.iter().position(|b| b.child == joint).expect("bone");

        let circle_joints = [
            R_SHOULDER, R_ELBOW, R_WRIST, L_SHOULDER, L_ELBOW, L_WRIST, R_KNEE, R_ANKLE, L_KNEE, L_ANKLE,
        ];
        let mut joint_labels = vec![None; joints.len()];
        let mut part_names: Vec<String> = std::iter::once("background".to_string())
            .chain(bones.iter().map(|b| b.name.clone()))
            .collect();
        for &j in &circle_joints {
            joint_labels[j] = Some(match taxonomy {
                Taxonomy::Detailed => {
                    part_names.push(format!("{}_joint", joints[j].0));
                    (part_names.len() - 1) as u8
                }
                Taxonomy::Coarse => bones[bone_into(j)].label,
            });
        }

        let mut part_mirror: Vec<u8> = (0..part_names.len() as u8).collect();
        for b in &bones {
            let mb = &bones[bone_into(mirror[b.child])];
            part_mirror[b.label as usize] = mb.label;
        }
        for &j in &circle_joints {
            if let (Some(l), Some(ml)) = (joint_labels[j], joint_labels[mirror[j]]) {
                part_mirror[l as usize] = ml;
            }
        }

        let z = [0.0, 0.0];
        let mut angle_limits_deg = vec![[z, z, z]; joints.len()];
        angle_limits_deg[PELVIS] = [[-10.0, 10.0], [-60.0, 60.0], [-10.0, 10.0]];
        angle_limits_deg[NECK] = [[-20.0, 20.0], [-30.0, 30.0], [-20.0, 20.0]];
        angle_limits_deg[HEAD] = [[-30.0, 30.0], [-40.0, 40.0], [-20.0, 20.0]];
        angle_limits_deg[R_SHOULDER] = [z, [-10.0, 10.0], [-10.0, 10.0]];
        angle_limits_deg[L_SHOULDER] = [z, [-10.0, 10.0], [-10.0, 10.0]];
        angle_limits_deg[R_ELBOW] = [[-45.0, 45.0], [-60.0, 60.0], [-85.0, 30.0]];
        angle_limits_deg[L_ELBOW] = [[-45.0, 45.0], [-60.0, 60.0], [-30.0, 85.0]];
        angle_limits_deg[R_WRIST] = [z, [0.0, 150.0], z];
        angle_limits_deg[L_WRIST] = [z, [-150.0, 0.0], z];
        angle_limits_deg[R_KNEE] = [[-90.0, 30.0], [-30.0, 30.0], [-10.0, 40.0]];
        angle_limits_deg[L_KNEE] = [[-90.0, 30.0], [-30.0, 30.0], [-40.0, 10.0]];
        angle_limits_deg[R_ANKLE] = [[0.0, 150.0], z, z];
        angle_limits_deg[L_ANKLE] = [[0.0, 150.0], z, z];

        let b = |name: &str| Primitive::Bone(bones.iter().position(|x| x.name == name).expect("bone name"));
        let mut painter_order = vec![b("torso"), b("r_clavicle"), b("l_clavicle"), b("r_hip"), b("l_hip")];
        painter_order.extend([Primitive::Joint(R_SHOULDER), Primitive::Joint(L_SHOULDER)]);
        painter_order.extend([b("r_upper_arm"), b("l_upper_arm"), b("r_thigh"), b("l_thigh")]);
        painter_order.extend([R_ELBOW, L_ELBOW, R_KNEE, L_KNEE].map(Primitive::Joint));
        painter_order.extend([b("r_forearm"), b("l_forearm"), b("r_shin"), b("l_shin")]);
        painter_order.extend([R_WRIST, L_WRIST, R_ANKLE, L_ANKLE].map(Primitive::Joint));
        painter_order.push(b("head"));

        let layout = Self {
            joint_names: joints.iter().map(|j| j.0.to_string()).collect(),
            parents: joints.iter().map(|j| j.1).collect(),
            offsets: joints.iter().map(|j| j.2).collect(),
            mirror,
            bones,
            joint_labels,
            part_names,
            part_mirror,
            angle_limits_deg,
            painter_order,
        };
        debug_assert!(layout.validate().is_ok());
        layout
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    /// Label classes including the background.
    pub fn num_parts(&self) -> usize {
        self.part_names.len()
    }

    pub fn bone_length(&self, bone: usize) -> f64 {
        let o = self.offsets[self.bones[bone].child];
        (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]).sqrt()
    }

    /// Bones whose label names a segment (every bone).
    pub fn bone_for_label(&self, label: u8) -> Option<usize> {
        self.bones.iter().position(|b| b.label == label)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_joints();
        let bad = |m: String| Err(Error::Config(format!("skeleton: {m}")));
        if n == 0 || self.parents[0].is_some() {
            return bad("joint 0 must be the root".into());
        }
        if self.joint_names.len() != n || self.offsets.len() != n || self.mirror.len() != n {
            return bad("per-joint tables disagree in length".into());
        }
        if self.angle_limits_deg.len() != n || self.joint_labels.len() != n {
            return bad("per-joint tables disagree in length".into());
        }
        for (j, p) in self.parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j => {}
                _ => return bad(format!("joint {j} must have a parent with a smaller index")),
            }
        }
        for (j, &m) in self.mirror.iter().enumerate() {
            if m >= n || self.mirror[m] != j {
                return bad(format!("mirror pairing is not an involution at joint {j}"));
            }
        }
        let parts = self.num_parts();
        if parts < 2 || parts > u8::MAX as usize + 1 {
            return bad(format!("{parts} part classes"));
        }
        for b in &self.bones {
            if self.parents[b.child] != Some(b.parent) {
                return bad(format!("bone {} does not follow the tree", b.name));
            }
            if b.label == BACKGROUND || b.label as usize >= parts {
                return bad(format!("bone {} has label {}", b.name, b.label));
            }
        }
        if self.part_mirror.len() != parts {
            return bad("part mirror table length".into());
        }
        for (l, &m) in self.part_mirror.iter().enumerate() {
            if m as usize >= parts || self.part_mirror[m as usize] as usize != l {
                return bad(format!("part mirror is not an involution at label {l}"));
            }
        }
        if self.part_mirror[0] != BACKGROUND {
            return bad("background must mirror to itself".into());
        }
        for lim in &self.angle_limits_deg {
            if lim.iter().any(|[lo, hi]| lo > hi) {
                return bad("angle limit with lo > hi".into());
            }
        }
        Ok(())
    }
}
