//! The immutable bird rig: mesh, kinematic tree, skinning weights, keypoint
//! definitions and joint/bone limits, in two template postures.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NUM_JOINTS: usize = 25;
pub const NUM_BONES: usize = NUM_JOINTS - 1;
pub const NUM_POSE_PARAMS: usize = 3 * NUM_JOINTS;
pub const NUM_KEYPOINTS: usize = 12;

/// Annotated semantic keypoints, in file order.
pub const KEYPOINT_NAMES: [&str; NUM_KEYPOINTS] = [
    "bill_tip",
    "right_eye",
    "left_eye",
    "neck",
    "nape",
    "right_wrist",
    "left_wrist",
    "right_wing_tip",
    "left_wing_tip",
    "right_foot",
    "left_foot",
    "tail_tip",
];

const FORMAT_TAG: &str = "avimesh-template/1";
const WEIGHT_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed template file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported template format tag {0:?}")]
    Format(String),
    #[error("parent array does not encode a tree rooted at joint 0: {0}")]
    NotATree(String),
    #[error("skin weights of vertex {vertex} are invalid: {reason}")]
    BadWeights { vertex: usize, reason: String },
    #[error("keypoint group {group} is invalid: {reason}")]
    BadKeypoint { group: usize, reason: String },
    #[error("face {0} references a vertex out of range")]
    BadFace(usize),
    #[error("{what}: expected {expected} entries, found {found}")]
    Size { what: &'static str, expected: usize, found: usize },
    #[error("template variants disagree: {0}")]
    VariantMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    WingsFolded,
    WingsOutstretched,
}

impl Variant {
    pub const ALL: [Variant; 2] = [Variant::WingsFolded, Variant::WingsOutstretched];

    pub fn name(self) -> &'static str {
        match self {
            Variant::WingsFolded => "wings_folded",
            Variant::WingsOutstretched => "wings_outstretched",
        }
    }
}

/// Closed interval; either end may be unbounded (infinite).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Limit {
    #[serde(serialize_with = "unbounded::serialize", deserialize_with = "unbounded::below")]
    pub min: f64,
    #[serde(serialize_with = "unbounded::serialize", deserialize_with = "unbounded::above")]
    pub max: f64,
}

impl Limit {
    pub const UNBOUNDED: Limit = Limit { min: f64::NEG_INFINITY, max: f64::INFINITY };

    pub fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.min, self.max)
    }
}

/// Non-finite bounds are written as `null`.
mod unbounded {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn below<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }

    pub fn above<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Sparse per-vertex skinning weights: `(joint, weight)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinWeights {
    rows: Vec<Vec<(usize, f64)>>,
}

impl SkinWeights {
    pub fn from_sparse(rows: Vec<Vec<(usize, f64)>>) -> Self {
        Self { rows }
    }

    /// Builds sparse rows from a dense N×J table, dropping exact zeros.
    pub fn from_dense(dense: &[Vec<f64>]) -> Self {
        let rows = dense
            .iter()
            .map(|row| row.iter().enumerate().filter(|(_, w)| **w != 0.0).map(|(j, w)| (j, *w)).collect())
            .collect();
        Self { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, vertex: usize) -> &[(usize, f64)] {
        &self.rows[vertex]
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn dense(&self, num_joints: usize) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| {
                let mut d = vec![0.0; num_joints];
                for &(j, w) in r {
                    d[j] += w;
                }
                d
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TemplateModel {
    pub variant: Variant,
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[usize; 3]>,
    pub joints: Vec<Vector3<f64>>,
    /// `parent[0]` is `None`.
    pub parent: Vec<Option<usize>>,
    pub skin_weights: SkinWeights,
    pub keypoint_defs: Vec<Vec<usize>>,
    pub canonical_pose: Vec<f64>,
    pub joint_limits: Vec<Limit>,
    pub bone_limits: Vec<Limit>,
    order: Vec<usize>,
}

impl TemplateModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        variant: Variant,
        vertices: Vec<Vector3<f64>>,
        faces: Vec<[usize; 3]>,
        joints: Vec<Vector3<f64>>,
        parent: Vec<Option<usize>>,
        skin_weights: SkinWeights,
        keypoint_defs: Vec<Vec<usize>>,
        canonical_pose: Vec<f64>,
        joint_limits: Vec<Limit>,
        bone_limits: Vec<Limit>,
    ) -> Result<Self, TemplateError> {
        let order = topological_order(&parent)?;
        let model = Self {
            variant,
            vertices,
            faces,
            joints,
            parent,
            skin_weights,
            keypoint_defs,
            canonical_pose,
            joint_limits,
            bone_limits,
            order,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    /// Joints ordered so that every parent precedes its children (root first).
    pub fn topological_order(&self) -> &[usize] {
        &self.order
    }

    /// Ancestors of `joint`, nearest first, ending at the root.
    pub fn ancestors(&self, joint: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = self.parent[joint];
        while let Some(p) = cur {
            out.push(p);
            cur = self.parent[p];
        }
        out
    }

    fn validate(&self) -> Result<(), TemplateError> {
        let n = self.vertices.len();
        let j = self.joints.len();
        check_size("parent", j, self.parent.len())?;
        check_size("skin weight rows", n, self.skin_weights.len())?;
        check_size("canonical pose", 3 * j, self.canonical_pose.len())?;
        check_size("joint limits", 3 * j, self.joint_limits.len())?;
        check_size("bone limits", j.saturating_sub(1), self.bone_limits.len())?;
        for (fi, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&v| v >= n) {
                return Err(TemplateError::BadFace(fi));
            }
        }
        for (v, row) in self.skin_weights.rows().iter().enumerate() {
            let mut sum = 0.0;
            for &(jt, w) in row {
                if jt >= j {
                    return Err(TemplateError::BadWeights { vertex: v, reason: format!("joint {jt} out of range") });
                }
                if !(w >= 0.0) {
                    return Err(TemplateError::BadWeights { vertex: v, reason: format!("negative weight {w}") });
                }
                sum += w;
            }
            if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
                return Err(TemplateError::BadWeights { vertex: v, reason: format!("weights sum to {sum}") });
            }
        }
        for (g, group) in self.keypoint_defs.iter().enumerate() {
            if group.is_empty() {
                return Err(TemplateError::BadKeypoint { group: g, reason: "empty group".into() });
            }
            if let Some(&bad) = group.iter().find(|&&v| v >= n) {
                return Err(TemplateError::BadKeypoint { group: g, reason: format!("vertex {bad} out of range") });
            }
        }
        Ok(())
    }
}

fn check_size(what: &'static str, expected: usize, found: usize) -> Result<(), TemplateError> {
    if expected == found {
        Ok(())
    } else {
        Err(TemplateError::Size { what, expected, found })
    }
}

fn topological_order(parent: &[Option<usize>]) -> Result<Vec<usize>, TemplateError> {
    let j = parent.len();
    if j == 0 {
        return Err(TemplateError::NotATree("no joints".into()));
    }
    if parent[0].is_some() {
        return Err(TemplateError::NotATree("joint 0 has a parent".into()));
    }
    let mut children = vec![Vec::new(); j];
    for (i, p) in parent.iter().enumerate().skip(1) {
        match p {
            None => return Err(TemplateError::NotATree(format!("joint {i} has no parent"))),
            Some(p) if *p >= j => return Err(TemplateError::NotATree(format!("joint {i} has parent {p} out of range"))),
            Some(p) => children[*p].push(i),
        }
    }
    let mut order = Vec::with_capacity(j);
    let mut queue = std::collections::VecDeque::from([0usize]);
    while let Some(i) = queue.pop_front() {
        order.push(i);
        queue.extend(children[i].iter().copied());
    }
    if order.len() != j {
        return Err(TemplateError::NotATree("cycle or unreachable joint".into()));
    }
    Ok(order)
}

/// Both template postures of the rig.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    pub folded: TemplateModel,
    pub outstretched: TemplateModel,
}

impl TemplateSet {
    pub fn new(folded: TemplateModel, outstretched: TemplateModel) -> Result<Self, TemplateError> {
        let mismatch = |what: &str| Err(TemplateError::VariantMismatch(what.to_string()));
        if folded.variant != Variant::WingsFolded || outstretched.variant != Variant::WingsOutstretched {
            return mismatch("variant tags");
        }
        if folded.faces != outstretched.faces {
            return mismatch("faces");
        }
        if folded.parent != outstretched.parent {
            return mismatch("parent array");
        }
        if folded.skin_weights != outstretched.skin_weights {
            return mismatch("skin weights");
        }
        if folded.keypoint_defs != outstretched.keypoint_defs {
            return mismatch("keypoint definitions");
        }
        if folded.vertices.len() != outstretched.vertices.len() {
            return mismatch("vertex count");
        }
        Ok(Self { folded, outstretched })
    }

    pub fn get(&self, variant: Variant) -> &TemplateModel {
        match variant {
            Variant::WingsFolded => &self.folded,
            Variant::WingsOutstretched => &self.outstretched,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TemplateError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TemplateError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, TemplateError> {
        let base = &self.folded;
        let variant_file = |m: &TemplateModel| VariantFile {
            vertices: m.vertices.iter().map(|v| [v.x, v.y, v.z]).collect(),
            joints: m.joints.iter().map(|v| [v.x, v.y, v.z]).collect(),
            canonical_pose: m.canonical_pose.clone(),
        };
        let file = TemplateFile {
            format: FORMAT_TAG.to_string(),
            parent: base.parent.clone(),
            faces: base.faces.clone(),
            skin_weights: WeightsFile::Sparse(base.skin_weights.rows().to_vec()),
            keypoints: base
                .keypoint_defs
                .iter()
                .enumerate()
                .map(|(i, g)| KeypointFile {
                    name: KEYPOINT_NAMES.get(i).map(|s| s.to_string()).unwrap_or_else(|| format!("keypoint_{i}")),
                    vertices: g.clone(),
                })
                .collect(),
            joint_limits: base.joint_limits.clone(),
            bone_limits: base.bone_limits.clone(),
            wings_folded: variant_file(&self.folded),
            wings_outstretched: variant_file(&self.outstretched),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self, TemplateError> {
        let file: TemplateFile = serde_json::from_str(text)?;
        if file.format != FORMAT_TAG {
            return Err(TemplateError::Format(file.format));
        }
        let weights = match file.skin_weights {
            WeightsFile::Sparse(rows) => SkinWeights::from_sparse(rows),
            WeightsFile::Dense(rows) => SkinWeights::from_dense(&rows),
        };
        let keypoints: Vec<Vec<usize>> = file.keypoints.into_iter().map(|k| k.vertices).collect();
        let joint_limits = file.joint_limits;
        let bone_limits = file.bone_limits;
        let build = |variant: Variant, vf: VariantFile| {
            TemplateModel::new(
                variant,
                vf.vertices.iter().map(|v| Vector3::from(*v)).collect(),
                file.faces.clone(),
                vf.joints.iter().map(|v| Vector3::from(*v)).collect(),
                file.parent.clone(),
                weights.clone(),
                keypoints.clone(),
                vf.canonical_pose,
                joint_limits.clone(),
                bone_limits.clone(),
            )
        };
        let folded = build(Variant::WingsFolded, file.wings_folded)?;
        let outstretched = build(Variant::WingsOutstretched, file.wings_outstretched)?;
        Self::new(folded, outstretched)
    }
}

#[derive(Serialize, Deserialize)]
struct TemplateFile {
    format: String,
    parent: Vec<Option<usize>>,
    faces: Vec<[usize; 3]>,
    skin_weights: WeightsFile,
    keypoints: Vec<KeypointFile>,
    joint_limits: Vec<Limit>,
    bone_limits: Vec<Limit>,
    wings_folded: VariantFile,
    wings_outstretched: VariantFile,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum WeightsFile {
    Sparse(Vec<Vec<(usize, f64)>>),
    Dense(Vec<Vec<f64>>),
}

#[derive(Serialize, Deserialize)]
struct KeypointFile {
    name: String,
    vertices: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct VariantFile {
    vertices: Vec<[f64; 3]>,
    joints: Vec<[f64; 3]>,
    canonical_pose: Vec<f64>,
}

/// Writes a triangle mesh as Wavefront OBJ (1-based indices).
pub fn write_obj<W: Write>(mut out: W, vertices: &[Vector3<f64>], faces: &[[usize; 3]]) -> std::io::Result<()> {
    for v in vertices {
        writeln!(out, "v {} {} {}", v.x, v.y, v.z)?;
    }
    for f in faces {
        writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    Ok(())
}

pub fn save_obj(path: impl AsRef<Path>, vertices: &[Vector3<f64>], faces: &[[usize; 3]]) -> std::io::Result<()> {
    let file = std::io::BufWriter::new(fs::File::create(path)?);
    write_obj(file, vertices, faces)
}
