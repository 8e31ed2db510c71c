//! Articulated capsule body: skeleton, poses, forward kinematics, the
//! observation-to-canonical deformation mapping, and surface normals.
//!
//! The body is a tree of joints; every non-root joint k carries a capsule
//! bone spanning its parent's position to its own. Skinning weights are a
//! softmax over squared distances to the posed capsules, so the deformation
//! mapping is smooth everywhere.

use crate::autodiff::{Tape, Tensor, Var};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::math::{point_segment_distance, rotation_from_axis_angle, Aabb, Mat3, Rigid, Vec3};

const TAU_PI2: f64 = 2.0 * std::f64::consts::PI;

#[derive(Debug, Clone)]
pub struct Joint {
    /// None for the root (joint 0 only).
    pub parent: Option<usize>,
    /// Rest offset from the parent (root: canonical position).
    pub offset: Vec3,
}

/// Joint tree plus per-bone capsule radii. Bone b connects joint b+1 to its
/// parent, so a skeleton with n joints has n-1 bones.
#[derive(Debug, Clone)]
pub struct Skeleton {
    joints: Vec<Joint>,
    radii: Vec<f64>,
}

impl Skeleton {
    pub fn new(joints: Vec<Joint>, radii: Vec<f64>) -> Result<Self> {
        if joints.is_empty() {
            return Err(Error::config("skeleton needs at least a root joint"));
        }
        if joints[0].parent.is_some() {
            return Err(Error::config("joint 0 must be the root (no parent)"));
        }
        for (k, j) in joints.iter().enumerate().skip(1) {
            match j.parent {
                Some(p) if p < k => {}
                _ => {
                    return Err(Error::config(format!(
                        "joint {k} parent must exist and precede it"
                    )))
                }
            }
        }
        if radii.len() != joints.len() - 1 {
            return Err(Error::config(format!(
                "expected {} bone radii, got {}",
                joints.len() - 1,
                radii.len()
            )));
        }
        if radii.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::config("bone radii must be positive"));
        }
        Ok(Skeleton { joints, radii })
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn bone_count(&self) -> usize {
        self.joints.len() - 1
    }

    pub fn joint(&self, k: usize) -> &Joint {
        &self.joints[k]
    }

    /// Bone b = joint b+1; returns (attach joint, end joint, radius).
    pub fn bone(&self, b: usize) -> (usize, usize, f64) {
        let k = b + 1;
        (self.joints[k].parent.unwrap(), k, self.radii[b])
    }

    pub fn mean_radius(&self) -> f64 {
        self.radii.iter().sum::<f64>() / self.radii.len() as f64
    }

    /// Canonical (rest) joint positions: offsets accumulated down the tree.
    pub fn canonical_joints(&self) -> Vec<Vec3> {
        let mut pos = vec![Vec3::ZERO; self.joints.len()];
        for (k, j) in self.joints.iter().enumerate() {
            pos[k] = match j.parent {
                None => j.offset,
                Some(p) => pos[p] + j.offset,
            };
        }
        pos
    }

    /// Default 10-joint, 9-bone humanoid: torso with head stub, two swinging
    /// arms off shoulder joints, two legs off hip joints.
    pub fn default_humanoid() -> Skeleton {
        let j = |parent: Option<usize>, x: f64, y: f64, z: f64| Joint {
            parent,
            offset: Vec3::new(x, y, z),
        };
        let joints = vec![
            j(None, 0.0, 0.0, 0.0),       // 0 pelvis (root)
            j(Some(0), 0.0, 0.55, 0.0),   // 1 neck        bone 0: torso
            j(Some(1), -0.18, -0.05, 0.0), // 2 l_shoulder  bone 1
            j(Some(2), -0.35, 0.0, 0.0),  // 3 l_hand      bone 2: left arm
            j(Some(1), 0.18, -0.05, 0.0), // 4 r_shoulder  bone 3
            j(Some(4), 0.35, 0.0, 0.0),   // 5 r_hand      bone 4: right arm
            j(Some(0), -0.14, -0.08, 0.0), // 6 l_hip       bone 5
            j(Some(6), -0.02, -0.68, 0.0), // 7 l_foot      bone 6: left leg
            j(Some(0), 0.14, -0.08, 0.0), // 8 r_hip       bone 7
            j(Some(8), 0.02, -0.68, 0.0), // 9 r_foot      bone 8: right leg
        ];
        let radii = vec![0.17, 0.07, 0.06, 0.07, 0.06, 0.08, 0.07, 0.08, 0.07];
        Skeleton::new(joints, radii).expect("builtin skeleton is valid")
    }

    /// Load from `joint.K = parent dx dy dz` and `radius.K = r` keys.
    pub fn from_config(cfg: &Config, prefix: &str) -> Result<Skeleton> {
        let mut joints = Vec::new();
        for (k, raw) in cfg.indexed(&format!("{prefix}joint")) {
            let vals: Vec<f64> = raw
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| Error::config(format!("joint.{k}: bad number `{t}`")))
                })
                .collect::<Result<_>>()?;
            if vals.len() != 4 {
                return Err(Error::config(format!(
                    "joint.{k}: expected `parent dx dy dz`"
                )));
            }
            let parent = if vals[0] < 0.0 { None } else { Some(vals[0] as usize) };
            joints.push(Joint { parent, offset: Vec3::new(vals[1], vals[2], vals[3]) });
        }
        if joints.is_empty() {
            return Err(Error::config("no skeleton joints in config"));
        }
        let mut radii = Vec::new();
        for k in 1..joints.len() {
            radii.push(cfg.f64(&format!("{prefix}radius.{k}"))?);
        }
        Skeleton::new(joints, radii)
    }

    /// Emit the config keys that `from_config` reads.
    pub fn to_config_lines(&self, prefix: &str) -> String {
        let mut out = String::new();
        for (k, j) in self.joints.iter().enumerate() {
            let parent = j.parent.map(|p| p as i64).unwrap_or(-1);
            out.push_str(&format!(
                "{prefix}joint.{k} = {parent} {} {} {}\n",
                j.offset.x, j.offset.y, j.offset.z
            ));
        }
        for (b, r) in self.radii.iter().enumerate() {
            out.push_str(&format!("{prefix}radius.{} = {r}\n", b + 1));
        }
        out
    }
}

/// Body configuration at one instant: root motion plus per-joint axis-angle
/// rotations (entry 0 belongs to the root joint's own local rotation).
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub root_rotation: Vec3,
    pub root_translation: Vec3,
    pub joint_rotations: Vec<Vec3>,
}

impl Pose {
    pub fn identity(joint_count: usize) -> Pose {
        Pose {
            root_rotation: Vec3::ZERO,
            root_translation: Vec3::ZERO,
            joint_rotations: vec![Vec3::ZERO; joint_count],
        }
    }

    pub fn joint_count(&self) -> usize {
        self.joint_rotations.len()
    }

    /// Flat vector layout: root rotation, root translation, joint rotations.
    pub fn dim(joint_count: usize) -> usize {
        6 + 3 * joint_count
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(Pose::dim(self.joint_count()));
        v.extend_from_slice(&self.root_rotation.to_array());
        v.extend_from_slice(&self.root_translation.to_array());
        for r in &self.joint_rotations {
            v.extend_from_slice(&r.to_array());
        }
        v
    }

    pub fn from_vec(joint_count: usize, v: &[f64]) -> Result<Pose> {
        if v.len() != Pose::dim(joint_count) {
            return Err(Error::usage(format!(
                "pose vector length {} does not match {} joints",
                v.len(),
                joint_count
            )));
        }
        let vec3 = |i: usize| Vec3::new(v[i], v[i + 1], v[i + 2]);
        Ok(Pose {
            root_rotation: vec3(0),
            root_translation: vec3(3),
            joint_rotations: (0..joint_count).map(|k| vec3(6 + 3 * k)).collect(),
        })
    }

    /// Wrap every axis-angle magnitude into [0, 2*pi) and reject non-finite
    /// components.
    pub fn canonicalized(mut self) -> Result<Pose> {
        let wrap = |v: Vec3| -> Result<Vec3> {
            if !v.is_finite() {
                return Err(Error::data("pose component is not finite"));
            }
            let theta = v.norm();
            if theta >= TAU_PI2 {
                let wrapped = theta % TAU_PI2;
                Ok(v * (wrapped / theta))
            } else {
                Ok(v)
            }
        };
        if !self.root_translation.is_finite() {
            return Err(Error::data("pose translation is not finite"));
        }
        self.root_rotation = wrap(self.root_rotation)?;
        for r in &mut self.joint_rotations {
            *r = wrap(*r)?;
        }
        Ok(self)
    }
}

/// Per-bone rigid transforms carrying the canonical bone frame into
/// observation space.
#[derive(Debug, Clone)]
pub struct BoneTransforms {
    pub bones: Vec<Rigid>,
}

/// Accumulated forward-kinematics state per joint.
#[derive(Debug, Clone)]
pub struct FkResult {
    pub rotations: Vec<Mat3>,
    pub positions: Vec<Vec3>,
}

/// Pose-independent capsule body: skeleton, canonical joint positions, and
/// the skinning temperature.
#[derive(Debug, Clone)]
pub struct CapsuleBody {
    skeleton: Skeleton,
    canonical: Vec<Vec3>,
    tau: f64,
}

impl CapsuleBody {
    pub fn new(skeleton: Skeleton) -> CapsuleBody {
        let canonical = skeleton.canonical_joints();
        let r = skeleton.mean_radius();
        CapsuleBody { skeleton, canonical, tau: r * r }
    }

    pub fn skeleton(&self) -> &Skeleton {
        &self.skeleton
    }

    pub fn canonical_joints(&self) -> &[Vec3] {
        &self.canonical
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Tight box around the canonical capsules.
    pub fn canonical_bounds(&self) -> Aabb {
        let mut min = Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut max = -min;
        for b in 0..self.skeleton.bone_count() {
            let (pj, k, r) = self.skeleton.bone(b);
            for p in [self.canonical[pj], self.canonical[k]] {
                let rad = Vec3::new(r, r, r);
                min = min.min_elem(p - rad);
                max = max.max_elem(p + rad);
            }
        }
        Aabb::new(min, max)
    }

    /// Forward kinematics: accumulated rotation and position per joint.
    pub fn forward_kinematics(&self, pose: &Pose) -> Result<FkResult> {
        let skel = &self.skeleton;
        if pose.joint_count() != skel.joint_count() {
            return Err(Error::config(format!(
                "pose has {} joint rotations, skeleton has {} joints",
                pose.joint_count(),
                skel.joint_count()
            )));
        }
        let n = skel.joint_count();
        let mut rotations = Vec::with_capacity(n);
        let mut positions = Vec::with_capacity(n);
        for k in 0..n {
            let local = rotation_from_axis_angle(pose.joint_rotations[k]);
            match skel.joint(k).parent {
                None => {
                    let root = rotation_from_axis_angle(pose.root_rotation);
                    rotations.push(root.mul_mat(local));
                    positions.push(skel.joint(k).offset + pose.root_translation);
                }
                Some(p) => {
                    rotations.push(rotations[p].mul_mat(local));
                    positions.push(positions[p] + rotations[p].mul_vec(skel.joint(k).offset));
                }
            }
        }
        Ok(FkResult { rotations, positions })
    }

    /// Canonical-to-observation rigid transform per bone. Bone b attaches at
    /// joint j = parent(b+1) and moves with that joint's accumulated frame:
    /// G_b(x) = R_j (x - C_j) + P_j.
    pub fn bone_transforms(&self, fk: &FkResult) -> BoneTransforms {
        let bones = (0..self.skeleton.bone_count())
            .map(|b| {
                let (j, _, _) = self.skeleton.bone(b);
                let rot = fk.rotations[j];
                let trans = fk.positions[j] - rot.mul_vec(self.canonical[j]);
                Rigid::new(rot, trans)
            })
            .collect();
        BoneTransforms { bones }
    }

    pub fn bone_transforms_for_pose(&self, pose: &Pose) -> Result<BoneTransforms> {
        Ok(self.bone_transforms(&self.forward_kinematics(pose)?))
    }

    /// Posed capsule axis endpoints per bone.
    pub fn posed_capsules(&self, transforms: &BoneTransforms) -> Vec<(Vec3, Vec3, f64)> {
        (0..self.skeleton.bone_count())
            .map(|b| {
                let (j, k, r) = self.skeleton.bone(b);
                let g = transforms.bones[b];
                (g.apply(self.canonical[j]), g.apply(self.canonical[k]), r)
            })
            .collect()
    }

    /// Squared distances from x to each posed capsule axis, plus the minimum.
    fn capsule_sq_distances(&self, x: Vec3, capsules: &[(Vec3, Vec3, f64)]) -> (Vec<f64>, f64) {
        let mut d2 = Vec::with_capacity(capsules.len());
        let mut min = f64::INFINITY;
        for &(a, b, _) in capsules {
            let ab = b - a;
            let len2 = ab.norm2();
            let u = if len2 == 0.0 {
                0.0
            } else {
                ((x - a).dot(ab) / len2).clamp(0.0, 1.0)
            };
            let diff = x - (a + ab * u);
            let v = diff.norm2();
            min = min.min(v);
            d2.push(v);
        }
        (d2, min)
    }

    /// Softmax skinning weights over posed capsule distances. Always a
    /// partition of unity; the subtracted minimum keeps far points stable
    /// (near-uniform tiny scores before normalization).
    pub fn skinning_weights(&self, x: Vec3, transforms: &BoneTransforms) -> Vec<f64> {
        let capsules = self.posed_capsules(transforms);
        let (d2, min) = self.capsule_sq_distances(x, &capsules);
        let mut w: Vec<f64> = d2.iter().map(|&v| ((min - v) / self.tau).exp()).collect();
        let total: f64 = w.iter().sum();
        for v in &mut w {
            *v /= total;
        }
        w
    }

    /// Observation-space point to canonical space under the given pose:
    /// the skinning-weighted blend of inverse bone transforms.
    pub fn deform_to_canonical(&self, x: Vec3, transforms: &BoneTransforms) -> Vec3 {
        let w = self.skinning_weights(x, transforms);
        let mut out = Vec3::ZERO;
        for (b, g) in transforms.bones.iter().enumerate() {
            out = out + g.inverse().apply(x) * w[b];
        }
        out
    }

    /// Batch deform. Skips the per-point transform-inverse recomputation.
    pub fn deform_points(&self, xs: &[Vec3], transforms: &BoneTransforms) -> Vec<Vec3> {
        let inv: Vec<Rigid> = transforms.bones.iter().map(|g| g.inverse()).collect();
        let capsules = self.posed_capsules(transforms);
        xs.iter()
            .map(|&x| {
                let (d2, min) = self.capsule_sq_distances(x, &capsules);
                let mut num = Vec3::ZERO;
                let mut den = 0.0;
                for (b, &v) in d2.iter().enumerate() {
                    let s = ((min - v) / self.tau).exp();
                    num = num + inv[b].apply(x) * s;
                    den += s;
                }
                num / den
            })
            .collect()
    }

    /// Unit normal of the nearest canonical capsule surface at x_hat, i.e.
    /// the gradient direction of the capsule distance field. Points exactly
    /// on a capsule axis have no defined direction; those return +z with the
    /// degenerate flag set.
    pub fn nearest_surface_normal(&self, x_hat: Vec3) -> (Vec3, bool) {
        let mut best = f64::INFINITY;
        let mut best_dir = Vec3::ZERO;
        for b in 0..self.skeleton.bone_count() {
            let (pj, k, r) = self.skeleton.bone(b);
            let (d, closest) = point_segment_distance(x_hat, self.canonical[pj], self.canonical[k]);
            let signed = d - r;
            if signed < best {
                best = signed;
                best_dir = x_hat - closest;
            }
        }
        let n = best_dir.norm();
        if n < 1e-12 {
            (Vec3::new(0.0, 0.0, 1.0), true)
        } else {
            (best_dir / n, false)
        }
    }

    /// Canonical capsule distance field (negative inside).
    pub fn capsule_distance(&self, x_hat: Vec3) -> f64 {
        let mut best = f64::INFINITY;
        for b in 0..self.skeleton.bone_count() {
            let (pj, k, r) = self.skeleton.bone(b);
            let (d, _) = point_segment_distance(x_hat, self.canonical[pj], self.canonical[k]);
            best = best.min(d - r);
        }
        best
    }
}

// ---------------------------------------------------------------------------
// Taped counterparts: same math recorded on a tape so pose gradients flow.
// ---------------------------------------------------------------------------

/// On-tape bone state produced by `fk_tape`.
pub struct TapeBone {
    /// Accumulated rotation of the attach joint, [3,3].
    pub rot: Var,
    /// Posed attach point, [3,1].
    pub start: Var,
    /// Posed bone end, [3,1].
    pub end: Var,
    pub canon_start: Vec3,
}

pub struct TapeBones {
    pub bones: Vec<TapeBone>,
    tau: f64,
}

const SKEW_BASIS: [[[f64; 3]; 3]; 3] = [
    [[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]],
    [[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],
    [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
];

fn mat3_tensor(m: Mat3) -> Tensor {
    Tensor::from_vec(3, 3, m.m.iter().flatten().copied().collect())
}

fn vec3_tensor(v: Vec3) -> Tensor {
    Tensor::col(&v.to_array())
}

/// Rotation matrix [3,3] from an axis-angle [3,1] var via Rodrigues. The
/// sinc/versinc primitives keep value and gradient exact at zero rotation.
pub fn rotation_tape(tape: &mut Tape, axis_angle: Var) -> Var {
    let aa_row = tape.transpose(axis_angle);
    let theta = tape.row_norm(aa_row);
    let a = tape.sinc(theta);
    let b = tape.versinc(theta);
    let mut k_mat: Option<Var> = None;
    for (i, basis) in SKEW_BASIS.iter().enumerate() {
        let e = tape.constant(Tensor::from_vec(3, 3, basis.iter().flatten().copied().collect()));
        let comp = tape.slice_rows(axis_angle, i, 1);
        let term = tape.scale_by(e, comp);
        k_mat = Some(match k_mat {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    let k = k_mat.unwrap();
    let k2 = tape.matmul(k, k);
    let ka = tape.scale_by(k, a);
    let k2b = tape.scale_by(k2, b);
    let eye = tape.constant(mat3_tensor(Mat3::IDENTITY));
    let partial = tape.add(eye, ka);
    tape.add(partial, k2b)
}

/// Forward kinematics on the tape. `pose_vec` is the flattened pose [dim,1].
pub fn fk_tape(tape: &mut Tape, body: &CapsuleBody, pose_vec: Var) -> TapeBones {
    let skel = body.skeleton();
    let n = skel.joint_count();
    assert_eq!(pose_vec.rows(), Pose::dim(n), "pose vector length mismatch");
    let mut rot_acc: Vec<Var> = Vec::with_capacity(n);
    let mut pos: Vec<Var> = Vec::with_capacity(n);
    for k in 0..n {
        let local_aa = tape.slice_rows(pose_vec, 6 + 3 * k, 3);
        let local = rotation_tape(tape, local_aa);
        match skel.joint(k).parent {
            None => {
                let root_aa = tape.slice_rows(pose_vec, 0, 3);
                let root = rotation_tape(tape, root_aa);
                rot_acc.push(tape.matmul(root, local));
                let trans = tape.slice_rows(pose_vec, 3, 3);
                let c0 = tape.constant(vec3_tensor(skel.joint(k).offset));
                pos.push(tape.add(c0, trans));
            }
            Some(p) => {
                rot_acc.push(tape.matmul(rot_acc[p], local));
                let off = tape.constant(vec3_tensor(skel.joint(k).offset));
                let moved = tape.matmul(rot_acc[p], off);
                pos.push(tape.add(pos[p], moved));
            }
        }
    }
    let bones = (0..skel.bone_count())
        .map(|b| {
            let (j, k, _) = skel.bone(b);
            TapeBone {
                rot: rot_acc[j],
                start: pos[j],
                end: pos[k],
                canon_start: body.canonical_joints()[j],
            }
        })
        .collect();
    TapeBones { bones, tau: body.tau() }
}

/// Deform observation points [n,3] to canonical space on the tape.
///
/// `softmax_shift` is the per-point minimum squared capsule distance from a
/// plain forward evaluation. Softmax is shift-invariant in both value and
/// gradient, so treating the shift as constant is exact while keeping the
/// exponentials bounded.
pub fn deform_points_tape(
    tape: &mut Tape,
    bones: &TapeBones,
    points: Var,
    softmax_shift: &[f64],
) -> Var {
    assert_eq!(points.cols(), 3, "points must be [n,3]");
    let n = points.rows();
    assert_eq!(softmax_shift.len(), n);
    let shift = tape.constant(Tensor::col(softmax_shift));
    let inv_tau = -1.0 / bones.tau;
    let mut num: Option<Var> = None;
    let mut den: Option<Var> = None;
    for bone in &bones.bones {
        let start_row = tape.transpose(bone.start);
        let start_b = tape.broadcast_rows(start_row, n);
        let xm = tape.sub(points, start_b);
        let ab_col = tape.sub(bone.end, bone.start);
        let ab_row = tape.transpose(ab_col);
        let ab_b = tape.broadcast_rows(ab_row, n);
        let ab_sq = tape.pow(ab_row, 2.0);
        let len2 = tape.row_sum(ab_sq);
        let inv_len2 = tape.pow(len2, -1.0);
        let dots = tape.mul(xm, ab_b);
        let u_num = tape.row_sum(dots);
        let u_scaled = tape.scale_by(u_num, inv_len2);
        let u = tape.clamp(u_scaled, 0.0, 1.0);
        let u3 = tape.repeat_cols(u, 3);
        let along = tape.mul(u3, ab_b);
        let diff = tape.sub(xm, along);
        let diff_sq = tape.pow(diff, 2.0);
        let d2 = tape.row_sum(diff_sq);
        let centered = tape.sub(d2, shift);
        let exponent = tape.scale(centered, inv_tau);
        let score = tape.exp(exponent);

        // G_b^{-1}(x) = R^T (x - P) + C, row form: (x - P^T) R + C^T.
        let rotated = tape.matmul(xm, bone.rot);
        let canon_row = tape.constant(Tensor::from_vec(1, 3, bone.canon_start.to_array().to_vec()));
        let canon_b = tape.broadcast_rows(canon_row, n);
        let canonical = tape.add(rotated, canon_b);

        let score3 = tape.repeat_cols(score, 3);
        let weighted = tape.mul(score3, canonical);
        num = Some(match num {
            None => weighted,
            Some(acc) => tape.add(acc, weighted),
        });
        den = Some(match den {
            None => score,
            Some(acc) => tape.add(acc, score),
        });
    }
    let den3 = tape.repeat_cols(den.unwrap(), 3);
    tape.div(num.unwrap(), den3)
}

/// Per-point minimum squared capsule distance for `deform_points_tape`.
pub fn softmax_shifts(body: &CapsuleBody, xs: &[Vec3], transforms: &BoneTransforms) -> Vec<f64> {
    let capsules = body.posed_capsules(transforms);
    xs.iter()
        .map(|&x| body.capsule_sq_distances(x, &capsules).1)
        .collect()
}
