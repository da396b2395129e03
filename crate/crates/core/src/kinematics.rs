//! Bone-length rescaling, forward kinematics and linear blend skinning.
//!
//! A pose is evaluated once into a [`PoseState`], which can then produce any
//! subset of posed vertices and back-propagate vertex gradients onto the
//! flat parameter vector.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rotation::axis_angle_with_jacobian;
use crate::template::{TemplateModel, NUM_BONES, NUM_POSE_PARAMS};

/// Offsets of each parameter group inside the flat parameter vector.
pub const ALPHA_OFFSET: usize = 0;
pub const THETA_OFFSET: usize = ALPHA_OFFSET + NUM_BONES;
pub const GAMMA_OFFSET: usize = THETA_OFFSET + NUM_POSE_PARAMS;
pub const SIGMA_OFFSET: usize = GAMMA_OFFSET + 3;
pub const PARAM_DIM: usize = SIGMA_OFFSET + 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicError {
    #[error("bone length {index} must be positive, got {value}")]
    NonPositiveBoneLength { index: usize, value: f64 },
    #[error("scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("{what}: expected {expected} values, found {found}")]
    Size { what: &'static str, expected: usize, found: usize },
}

/// Full optimizable state of one bird instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    /// One multiplier per non-root joint (joint `i + 1`).
    pub bone_lengths: Vec<f64>,
    /// Axis-angle triples; triple 0 is the global orientation.
    pub joint_rotations: Vec<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl PoseParams {
    /// Canonical pose (θ = 0), unit bone lengths and scale, zero translation.
    pub fn identity() -> Self {
        Self {
            bone_lengths: vec![1.0; NUM_BONES],
            joint_rotations: vec![0.0; NUM_POSE_PARAMS],
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), KinematicError> {
        self.validate_for(NUM_BONES + 1)
    }

    /// Checks sizes against a skeleton with `num_joints` joints.
    pub fn validate_for(&self, num_joints: usize) -> Result<(), KinematicError> {
        if self.bone_lengths.len() + 1 != num_joints {
            return Err(KinematicError::Size { what: "bone lengths", expected: num_joints - 1, found: self.bone_lengths.len() });
        }
        if self.joint_rotations.len() != 3 * num_joints {
            return Err(KinematicError::Size {
                what: "joint rotations",
                expected: 3 * num_joints,
                found: self.joint_rotations.len(),
            });
        }
        if let Some((index, &value)) = self.bone_lengths.iter().enumerate().find(|(_, a)| !(**a > 0.0)) {
            return Err(KinematicError::NonPositiveBoneLength { index, value });
        }
        if !(self.scale > 0.0) {
            return Err(KinematicError::NonPositiveScale(self.scale));
        }
        Ok(())
    }

    pub fn rotation(&self, joint: usize) -> Vector3<f64> {
        Vector3::new(
            self.joint_rotations[3 * joint],
            self.joint_rotations[3 * joint + 1],
            self.joint_rotations[3 * joint + 2],
        )
    }

    pub fn set_rotation(&mut self, joint: usize, aa: &Vector3<f64>) {
        self.joint_rotations[3 * joint..3 * joint + 3].copy_from_slice(aa.as_slice());
    }

    /// Layout: `[α (24) | θ (75) | γ (3) | σ]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(PARAM_DIM);
        v.extend_from_slice(&self.bone_lengths);
        v.extend_from_slice(&self.joint_rotations);
        v.extend_from_slice(self.translation.as_slice());
        v.push(self.scale);
        v
    }

    pub fn from_flat(v: &[f64]) -> Result<Self, KinematicError> {
        if v.len() != PARAM_DIM {
            return Err(KinematicError::Size { what: "flat parameters", expected: PARAM_DIM, found: v.len() });
        }
        Ok(Self {
            bone_lengths: v[ALPHA_OFFSET..THETA_OFFSET].to_vec(),
            joint_rotations: v[THETA_OFFSET..GAMMA_OFFSET].to_vec(),
            translation: Vector3::new(v[GAMMA_OFFSET], v[GAMMA_OFFSET + 1], v[GAMMA_OFFSET + 2]),
            scale: v[SIGMA_OFFSET],
        })
    }
}

/// Row `i` is the offset of joint `i + 1` from its parent.
pub fn relative_offsets(template: &TemplateModel) -> Vec<Vector3<f64>> {
    (1..template.num_joints())
        .map(|i| {
            let p = template.parent[i].expect("non-root joint has a parent");
            template.joints[i] - template.joints[p]
        })
        .collect()
}

/// Rest-pose joints after rescaling every bone by its multiplier: each joint is
/// the root position plus the scaled offsets of itself and all its ancestors.
pub fn compose_skeleton(template: &TemplateModel, bone_lengths: &[f64]) -> Result<Vec<Vector3<f64>>, KinematicError> {
    let j = template.num_joints();
    if bone_lengths.len() != j - 1 {
        return Err(KinematicError::Size { what: "bone lengths", expected: j - 1, found: bone_lengths.len() });
    }
    if let Some((index, &value)) = bone_lengths.iter().enumerate().find(|(_, a)| !(**a > 0.0)) {
        return Err(KinematicError::NonPositiveBoneLength { index, value });
    }
    let offsets = relative_offsets(template);
    let root = template.joints[0];
    Ok((0..j)
        .map(|i| {
            if i == 0 {
                return root;
            }
            let own = offsets[i - 1] * bone_lengths[i - 1];
            template
                .ancestors(i)
                .into_iter()
                .filter(|&a| a != 0)
                .fold(own + root, |acc, a| acc + offsets[a - 1] * bone_lengths[a - 1])
        })
        .collect())
}

/// Arithmetic mean of each keypoint's vertex group.
pub fn extract_keypoints(mesh: &[Vector3<f64>], template: &TemplateModel) -> Vec<Vector3<f64>> {
    template
        .keypoint_defs
        .iter()
        .map(|g| g.iter().map(|&v| mesh[v]).sum::<Vector3<f64>>() / g.len() as f64)
        .collect()
}

/// `σ·W(R_θ(J(α)); Mᵀ) + γ` for every template vertex.
pub fn pose_mesh(template: &TemplateModel, params: &PoseParams) -> Result<Vec<Vector3<f64>>, KinematicError> {
    Ok(PoseState::new(template, params)?.mesh())
}

/// Forward-kinematic state of one pose.
///
/// Joint `j` maps a rest point `x` to `G_j·x + b_j` with `b_j = q_j − G_j·J'_j`,
/// where `G_j` is the accumulated rotation and `q_j` the posed joint position.
/// The root rotates about the world origin; every other joint rotates about its
/// rescaled rest position.
#[derive(Debug, Clone)]
pub struct PoseState<'a> {
    template: &'a TemplateModel,
    scale: f64,
    translation: Vector3<f64>,
    skeleton: Vec<Vector3<f64>>,
    local: Vec<Matrix3<f64>>,
    local_jac: Vec<[Matrix3<f64>; 3]>,
    global: Vec<Matrix3<f64>>,
    posed: Vec<Vector3<f64>>,
    bias: Vec<Vector3<f64>>,
}

impl<'a> PoseState<'a> {
    pub fn new(template: &'a TemplateModel, params: &PoseParams) -> Result<Self, KinematicError> {
        let j = template.num_joints();
        params.validate_for(j)?;
        let skeleton = compose_skeleton(template, &params.bone_lengths)?;
        let mut local = Vec::with_capacity(j);
        let mut local_jac = Vec::with_capacity(j);
        for i in 0..j {
            let (r, d) = axis_angle_with_jacobian(&params.rotation(i));
            local.push(r);
            local_jac.push(d);
        }
        let mut global = vec![Matrix3::identity(); j];
        let mut posed = vec![Vector3::zeros(); j];
        for &i in template.topological_order() {
            match template.parent[i] {
                None => {
                    global[i] = local[i];
                    posed[i] = local[i] * skeleton[i];
                }
                Some(p) => {
                    global[i] = global[p] * local[i];
                    posed[i] = posed[p] + global[p] * (skeleton[i] - skeleton[p]);
                }
            }
        }
        let bias = (0..j).map(|i| posed[i] - global[i] * skeleton[i]).collect();
        Ok(Self {
            template,
            scale: params.scale,
            translation: params.translation,
            skeleton,
            local,
            local_jac,
            global,
            posed,
            bias,
        })
    }

    pub fn template(&self) -> &TemplateModel {
        self.template
    }

    /// Rescaled rest-pose skeleton `J(α)`.
    pub fn skeleton(&self) -> &[Vector3<f64>] {
        &self.skeleton
    }

    /// Posed joint positions in world coordinates.
    pub fn joints(&self) -> Vec<Vector3<f64>> {
        self.posed.iter().map(|q| q * self.scale + self.translation).collect()
    }

    fn skinned(&self, v: usize) -> Vector3<f64> {
        let x = &self.template.vertices[v];
        self.template
            .skin_weights
            .row(v)
            .iter()
            .fold(Vector3::zeros(), |acc, &(j, w)| acc + (self.global[j] * x + self.bias[j]) * w)
    }

    pub fn vertex(&self, v: usize) -> Vector3<f64> {
        self.skinned(v) * self.scale + self.translation
    }

    pub fn mesh(&self) -> Vec<Vector3<f64>> {
        (0..self.template.num_vertices()).map(|v| self.vertex(v)).collect()
    }

    pub fn keypoints(&self) -> Vec<Vector3<f64>> {
        self.template
            .keypoint_defs
            .iter()
            .map(|g| g.iter().map(|&v| self.vertex(v)).sum::<Vector3<f64>>() / g.len() as f64)
            .collect()
    }

    /// Back-propagates keypoint gradients onto the flat parameter vector.
    pub fn backward_keypoints(&self, grads: &[Vector3<f64>]) -> Vec<f64> {
        let mut acc = SkinGrad::new(self.template.num_joints());
        for (group, g) in self.template.keypoint_defs.iter().zip(grads) {
            let share = g / group.len() as f64;
            for &v in group {
                self.accumulate(&mut acc, v, &share);
            }
        }
        self.finish(acc)
    }

    /// Back-propagates per-vertex gradients (one per template vertex).
    pub fn backward_vertices(&self, grads: &[Vector3<f64>]) -> Vec<f64> {
        let mut acc = SkinGrad::new(self.template.num_joints());
        for (v, g) in grads.iter().enumerate() {
            if g.x != 0.0 || g.y != 0.0 || g.z != 0.0 {
                self.accumulate(&mut acc, v, g);
            }
        }
        self.finish(acc)
    }

    /// Back-propagates keypoint and per-vertex gradients together; either slice may be empty.
    pub fn backward(&self, keypoint_grads: &[Vector3<f64>], vertex_grads: &[Vector3<f64>]) -> Vec<f64> {
        let mut acc = SkinGrad::new(self.template.num_joints());
        for (group, g) in self.template.keypoint_defs.iter().zip(keypoint_grads) {
            let share = g / group.len() as f64;
            for &v in group {
                self.accumulate(&mut acc, v, &share);
            }
        }
        for (v, g) in vertex_grads.iter().enumerate() {
            if g.x != 0.0 || g.y != 0.0 || g.z != 0.0 {
                self.accumulate(&mut acc, v, g);
            }
        }
        self.finish(acc)
    }

    fn accumulate(&self, acc: &mut SkinGrad, v: usize, g: &Vector3<f64>) {
        let x = &self.template.vertices[v];
        let gs = g * self.scale;
        let mut skinned = Vector3::zeros();
        for &(j, w) in self.template.skin_weights.row(v) {
            skinned += (self.global[j] * x + self.bias[j]) * w;
            let gw = gs * w;
            acc.global[j] += gw * x.transpose();
            acc.bias[j] += gw;
        }
        acc.scale += g.dot(&skinned);
        acc.translation += g;
    }

    fn finish(&self, acc: SkinGrad) -> Vec<f64> {
        let t = self.template;
        let SkinGrad { mut global, bias, scale, translation } = acc;
        let j = t.num_joints();
        let mut d_posed = vec![Vector3::zeros(); j];
        let mut d_skel = vec![Vector3::zeros(); j];
        let mut d_local = vec![Matrix3::zeros(); j];

        for i in 0..j {
            d_posed[i] += bias[i];
            global[i] -= bias[i] * self.skeleton[i].transpose();
            d_skel[i] -= self.global[i].transpose() * bias[i];
        }
        for &i in t.topological_order().iter().rev() {
            match t.parent[i] {
                None => {
                    d_local[i] = global[i] + d_posed[i] * self.skeleton[i].transpose();
                }
                Some(p) => {
                    let rel = self.skeleton[i] - self.skeleton[p];
                    let dq = d_posed[i];
                    d_posed[p] += dq;
                    global[p] += dq * rel.transpose();
                    let back = self.global[p].transpose() * dq;
                    d_skel[i] += back;
                    d_skel[p] -= back;

                    let dg = global[i];
                    global[p] += dg * self.local[i].transpose();
                    d_local[i] = self.global[p].transpose() * dg;
                }
            }
        }

        let mut out = vec![0.0; PARAM_DIM];
        for i in 0..j {
            for k in 0..3 {
                out[THETA_OFFSET + 3 * i + k] = d_local[i].component_mul(&self.local_jac[i][k]).sum();
            }
        }
        let offsets = relative_offsets(t);
        for &i in t.topological_order().iter().rev() {
            if let Some(p) = t.parent[i] {
                out[ALPHA_OFFSET + i - 1] = d_skel[i].dot(&offsets[i - 1]);
                let d = d_skel[i];
                d_skel[p] += d;
            }
        }
        out[GAMMA_OFFSET..SIGMA_OFFSET].copy_from_slice(translation.as_slice());
        out[SIGMA_OFFSET] = scale;
        out
    }
}

struct SkinGrad {
    global: Vec<Matrix3<f64>>,
    bias: Vec<Vector3<f64>>,
    scale: f64,
    translation: Vector3<f64>,
}

impl SkinGrad {
    fn new(j: usize) -> Self {
        Self { global: vec![Matrix3::zeros(); j], bias: vec![Vector3::zeros(); j], scale: 0.0, translation: Vector3::zeros() }
    }
}
