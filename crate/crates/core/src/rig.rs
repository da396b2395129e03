//! Procedurally generated stand-in bird rig.
//!
//! Dimensions match the production rig (3932 vertices, 5684 faces, 25 joints,
//! 12 keypoints) so every downstream computation runs at realistic size.
//! Geometry is in meters with x forward, y left and z up; the root joint sits
//! at the origin. The body, neck, head, bill and legs are closed tubes, the
//! wings and tail are fans of open feather strips.

use std::sync::OnceLock;

use nalgebra::{Matrix3, Vector3};

use crate::kinematics::{PoseParams, PoseState};
use crate::rotation::{axis_angle_to_matrix, matrix_to_axis_angle};
use crate::template::{Limit, SkinWeights, TemplateModel, TemplateSet, Variant, NUM_BONES, NUM_POSE_PARAMS};

pub const PROCEDURAL_VERTICES: usize = 3932;
pub const PROCEDURAL_FACES: usize = 5684;

/// Joint names of the stand-in rig, indexed like the parent array.
pub const JOINT_NAMES: [&str; 25] = [
    "root",
    "chest",
    "neck_base",
    "neck_mid",
    "head",
    "bill_tip",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "right_wing_tip",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "left_wing_tip",
    "right_hip",
    "right_knee",
    "right_ankle",
    "right_foot",
    "left_hip",
    "left_knee",
    "left_ankle",
    "left_foot",
    "tail_base",
    "tail_mid",
    "tail_tip",
];

pub const PARENTS: [Option<usize>; 25] = [
    None,
    Some(0),
    Some(1),
    Some(2),
    Some(3),
    Some(4),
    Some(1),
    Some(6),
    Some(7),
    Some(8),
    Some(1),
    Some(10),
    Some(11),
    Some(12),
    Some(0),
    Some(14),
    Some(15),
    Some(16),
    Some(0),
    Some(18),
    Some(19),
    Some(20),
    Some(0),
    Some(22),
    Some(23),
];

/// Editable default limits; these are not measured values.
pub const DEFAULT_ANGLE_LIMIT: f64 = std::f64::consts::FRAC_PI_2;
pub const DEFAULT_BONE_LIMITS: (f64, f64) = (0.5, 1.5);

/// Cached stand-in rig.
pub fn procedural_template_set() -> &'static TemplateSet {
    static SET: OnceLock<TemplateSet> = OnceLock::new();
    SET.get_or_init(build_procedural_template_set)
}

fn v(x: f64, y: f64, z: f64) -> Vector3<f64> {
    Vector3::new(x, y, z)
}

fn mirror(p: Vector3<f64>) -> Vector3<f64> {
    v(p.x, -p.y, p.z)
}

fn outstretched_joints() -> Vec<Vector3<f64>> {
    let r_shoulder = v(0.025, -0.016, 0.018);
    let r_elbow = v(0.018, -0.045, 0.02);
    let r_wrist = v(0.022, -0.072, 0.021);
    let r_tip = v(0.012, -0.125, 0.02);
    let r_hip = v(-0.002, -0.01, -0.012);
    let r_knee = v(0.004, -0.012, -0.026);
    let r_ankle = v(-0.004, -0.012, -0.04);
    let r_foot = v(0.006, -0.012, -0.05);
    vec![
        v(0.0, 0.0, 0.0),
        v(0.025, 0.0, 0.01),
        v(0.045, 0.0, 0.025),
        v(0.055, 0.0, 0.04),
        v(0.065, 0.0, 0.05),
        v(0.095, 0.0, 0.046),
        r_shoulder,
        r_elbow,
        r_wrist,
        r_tip,
        mirror(r_shoulder),
        mirror(r_elbow),
        mirror(r_wrist),
        mirror(r_tip),
        r_hip,
        r_knee,
        r_ankle,
        r_foot,
        mirror(r_hip),
        mirror(r_knee),
        mirror(r_ankle),
        mirror(r_foot),
        v(-0.03, 0.0, 0.0),
        v(-0.055, 0.0, -0.005),
        v(-0.085, 0.0, -0.012),
    ]
}

/// Segment of influence for one joint inside a body part.
struct Influence {
    joint: usize,
    a: Vector3<f64>,
    b: Vector3<f64>,
}

fn infl(joint: usize, a: Vector3<f64>, b: Vector3<f64>) -> Influence {
    Influence { joint, a, b }
}

fn segment_distance(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p - (a + ab * t)).norm()
}

/// Soft-min over segment distances, keeping the three strongest joints.
fn blend_weights(p: &Vector3<f64>, influences: &[Influence], temperature: f64) -> Vec<(usize, f64)> {
    let d: Vec<f64> = influences.iter().map(|i| segment_distance(p, &i.a, &i.b)).collect();
    let dmin = d.iter().copied().fold(f64::INFINITY, f64::min);
    let mut w: Vec<(usize, f64)> =
        influences.iter().zip(&d).map(|(i, di)| (i.joint, (-(di - dmin) / temperature).exp())).collect();
    w.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    w.truncate(3);
    w.retain(|(_, x)| *x > 1e-3);
    let sum: f64 = w.iter().map(|(_, x)| x).sum();
    for (_, x) in &mut w {
        *x /= sum;
    }
    w.sort_by_key(|(j, _)| *j);
    w
}

#[derive(Default)]
struct MeshBuilder {
    vertices: Vec<Vector3<f64>>,
    faces: Vec<[usize; 3]>,
    weights: Vec<Vec<(usize, f64)>>,
}

impl MeshBuilder {
    /// Capped tube around a centerline; `radius(t)` gives the two semi-axes.
    #[allow(clippy::too_many_arguments)]
    fn tube(
        &mut self,
        center: impl Fn(f64) -> Vector3<f64>,
        radius: impl Fn(f64) -> (f64, f64),
        up: Vector3<f64>,
        rings: usize,
        segments: usize,
        influences: &[Influence],
        temperature: f64,
    ) -> std::ops::Range<usize> {
        let start = self.vertices.len();
        let frame = |t: f64| {
            let h = 1e-4;
            let tangent = (center((t + h).min(1.0)) - center((t - h).max(0.0))).normalize();
            let n1 = up.cross(&tangent).normalize();
            let n2 = tangent.cross(&n1);
            (n1, n2)
        };
        for r in 0..rings {
            let t = (r + 1) as f64 / (rings + 1) as f64;
            let (n1, n2) = frame(t);
            let (ra, rb) = radius(t);
            let c = center(t);
            for s in 0..segments {
                let phi = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
                self.vertices.push(c + n1 * (ra * phi.cos()) + n2 * (rb * phi.sin()));
            }
        }
        let ring = |r: usize, s: usize| start + r * segments + (s % segments);
        for r in 0..rings - 1 {
            for s in 0..segments {
                self.faces.push([ring(r, s), ring(r + 1, s), ring(r + 1, s + 1)]);
                self.faces.push([ring(r, s), ring(r + 1, s + 1), ring(r, s + 1)]);
            }
        }
        let tail_cap = self.vertices.len();
        self.vertices.push(center(0.0));
        let head_cap = self.vertices.len();
        self.vertices.push(center(1.0));
        for s in 0..segments {
            self.faces.push([tail_cap, ring(0, s + 1), ring(0, s)]);
            self.faces.push([head_cap, ring(rings - 1, s), ring(rings - 1, s + 1)]);
        }
        let end = self.vertices.len();
        for i in start..end {
            let w = blend_weights(&self.vertices[i], influences, temperature);
            self.weights.push(w);
        }
        start..end
    }

    /// Open two-column strip from `base` along `dir`; `width_dir` spans the strip.
    #[allow(clippy::too_many_arguments)]
    fn feather(
        &mut self,
        base: Vector3<f64>,
        dir: Vector3<f64>,
        width_dir: Vector3<f64>,
        length: f64,
        width: f64,
        points: usize,
        weights: impl Fn(&Vector3<f64>) -> Vec<(usize, f64)>,
    ) -> std::ops::Range<usize> {
        let start = self.vertices.len();
        for l in 0..points {
            let u = l as f64 / (points - 1) as f64;
            let c = base + dir * (length * u);
            let half = 0.5 * width * (1.0 - 0.6 * u);
            self.vertices.push(c - width_dir * half);
            self.vertices.push(c + width_dir * half);
        }
        for l in 0..points - 1 {
            let a = start + 2 * l;
            self.faces.push([a, a + 2, a + 3]);
            self.faces.push([a, a + 3, a + 1]);
        }
        let end = self.vertices.len();
        for i in start..end {
            let w = weights(&self.vertices[i]);
            self.weights.push(w);
        }
        start..end
    }
}

fn ellipsoid(ra: f64, rb: f64) -> impl Fn(f64) -> (f64, f64) {
    move |t| {
        let s = (1.0 - (2.0 * t - 1.0).powi(2)).max(0.0).sqrt();
        (ra * s, rb * s)
    }
}

fn polyline(points: Vec<Vector3<f64>>) -> impl Fn(f64) -> Vector3<f64> {
    let lengths: Vec<f64> = points.windows(2).map(|w| (w[1] - w[0]).norm()).collect();
    let total: f64 = lengths.iter().sum();
    move |t| {
        let mut target = t.clamp(0.0, 1.0) * total;
        for (i, l) in lengths.iter().enumerate() {
            if target <= *l || i == lengths.len() - 1 {
                let u = if *l > 0.0 { (target / l).min(1.0) } else { 0.0 };
                return points[i] + (points[i + 1] - points[i]) * u;
            }
            target -= l;
        }
        points[points.len() - 1]
    }
}

fn nearest(vertices: &[Vector3<f64>], range: std::ops::Range<usize>, target: Vector3<f64>, count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = range.collect();
    idx.sort_by(|a, b| (vertices[*a] - target).norm().total_cmp(&(vertices[*b] - target).norm()).then(a.cmp(b)));
    idx.truncate(count);
    idx.sort_unstable();
    idx
}

struct Generated {
    vertices: Vec<Vector3<f64>>,
    faces: Vec<[usize; 3]>,
    weights: Vec<Vec<(usize, f64)>>,
    keypoints: Vec<Vec<usize>>,
}

fn generate(j: &[Vector3<f64>]) -> Generated {
    let mut mb = MeshBuilder::default();
    let x = Vector3::x();
    let y = Vector3::y();
    let z = Vector3::z();

    let body_a = v(-0.045, 0.0, 0.0);
    let body_b = v(0.05, 0.0, 0.02);
    mb.tube(
        |t| body_a + (body_b - body_a) * t,
        ellipsoid(0.024, 0.021),
        z,
        36,
        32,
        &[
            infl(22, v(-0.05, 0.0, 0.0), v(-0.032, 0.0, 0.0)),
            infl(0, v(-0.025, 0.0, 0.0), v(0.012, 0.0, 0.005)),
            infl(1, v(0.018, 0.0, 0.008), v(0.05, 0.0, 0.025)),
        ],
        0.004,
    );

    let neck_dir = (j[4] - j[2]).normalize();
    let neck_a = j[2] - neck_dir * 0.006;
    let neck_b = j[4];
    let neck = mb.tube(
        |t| neck_a + (neck_b - neck_a) * t,
        |t| {
            let r = 0.0095 - 0.002 * t;
            (r, r)
        },
        x,
        10,
        16,
        &[infl(2, j[2], j[3]), infl(3, j[3], j[4])],
        0.003,
    );

    let head_a = v(0.054, 0.0, 0.052);
    let head_b = v(0.082, 0.0, 0.051);
    let head = mb.tube(|t| head_a + (head_b - head_a) * t, ellipsoid(0.012, 0.012), z, 16, 20, &[infl(4, j[4], j[4])], 0.003);

    let bill_a = v(0.078, 0.0, 0.049);
    let bill_b = j[5];
    let bill = mb.tube(
        |t| bill_a + (bill_b - bill_a) * t,
        |t| {
            let r = 0.0045 * (1.0 - t) + 0.0006 * t;
            (r, r)
        },
        z,
        8,
        12,
        &[infl(4, bill_a, v(0.085, 0.0, 0.048)), infl(5, v(0.088, 0.0, 0.047), bill_b)],
        0.002,
    );

    let mut legs = Vec::new();
    for (hip, knee, ankle, foot) in [(14, 15, 16, 17), (18, 19, 20, 21)] {
        let toe = j[foot] + v(0.012, 0.0, 0.0);
        let range = mb.tube(
            polyline(vec![j[hip], j[knee], j[ankle], j[foot], toe]),
            |t| {
                let r = 0.0035 * (1.0 - t) + 0.0015 * t;
                (r, r)
            },
            y,
            12,
            8,
            &[
                infl(hip, j[hip], j[knee]),
                infl(knee, j[knee], j[ankle]),
                infl(ankle, j[ankle], j[foot]),
                infl(foot, j[foot], toe),
            ],
            0.002,
        );
        legs.push(range);
    }

    let mut wings = Vec::new();
    for (shoulder, elbow, wrist, tip, side) in [(6, 7, 8, 9, -1.0), (10, 11, 12, 13, 1.0)] {
        let tip_ext = j[tip] + (j[tip] - j[wrist]) * 0.15;
        let arm = polyline(vec![j[shoulder], j[elbow], j[wrist], j[tip]]);
        let influences = [
            infl(shoulder, j[shoulder], j[elbow]),
            infl(elbow, j[elbow], j[wrist]),
            infl(wrist, j[wrist], j[tip]),
            infl(tip, j[tip], tip_ext),
        ];
        let start = mb.vertices.len();
        let count = 30;
        for i in 0..count {
            let u = (i as f64 + 0.5) / count as f64;
            let base = arm(u) + v(0.0, 0.0, 0.0008 * (i % 2) as f64);
            let dir = v(-1.0, side * 0.6 * u * u, 0.0).normalize();
            let along = (arm((u + 0.01).min(1.0)) - arm((u - 0.01).max(0.0))).normalize();
            let length = 0.035 + 0.04 * u;
            let points = if i % 15 < 7 { 13 } else { 12 };
            let w = blend_weights(&base, &influences, 0.004);
            mb.feather(base, dir, along, length, 0.014, points, |_| w.clone());
        }
        wings.push(start..mb.vertices.len());
    }

    let tail_start = mb.vertices.len();
    let tail_tip_point = j[24] + v(-0.01, 0.0, -0.001);
    for i in 0..18 {
        let s = (i as f64 + 0.5) / 18.0 * 2.0 - 1.0;
        let base = j[22] + v(0.0, 0.012 * s, 0.001 * (i % 2) as f64);
        let dir = v(-1.0, 0.35 * s, -0.12).normalize();
        let tip_ext = j[24] + dir * 0.02;
        let influences = [infl(22, j[22], j[23]), infl(23, j[23], j[24]), infl(24, j[24], tip_ext)];
        mb.feather(base, dir, v(0.0, 1.0, 0.0), 0.065, 0.008, 14, |p| blend_weights(p, &influences, 0.004));
    }
    let tail = tail_start..mb.vertices.len();

    let vs = &mb.vertices;
    let throat = v(neck_dir.z, 0.0, -neck_dir.x);
    let bill_last_ring = bill.start + 7 * 12;
    let keypoints = vec![
        vec![bill_last_ring, bill_last_ring + 3, bill_last_ring + 6, bill_last_ring + 9],
        nearest(vs, head.clone(), v(0.074, -0.0095, 0.056), 4),
        nearest(vs, head.clone(), v(0.074, 0.0095, 0.056), 4),
        nearest(vs, neck.clone(), j[3] + throat * 0.0095, 4),
        nearest(vs, neck.clone(), j[3] - throat * 0.0095, 4),
        nearest(vs, wings[0].clone(), j[8], 4),
        nearest(vs, wings[1].clone(), j[12], 4),
        nearest(vs, wings[0].clone(), j[9], 4),
        nearest(vs, wings[1].clone(), j[13], 4),
        nearest(vs, legs[0].clone(), j[17], 4),
        nearest(vs, legs[1].clone(), j[21], 4),
        nearest(vs, tail, tail_tip_point, 4),
    ];

    Generated { vertices: mb.vertices, faces: mb.faces, weights: mb.weights, keypoints }
}

fn default_joint_limits() -> Vec<Limit> {
    (0..NUM_POSE_PARAMS)
        .map(|i| if i < 3 { Limit::UNBOUNDED } else { Limit::new(-DEFAULT_ANGLE_LIMIT, DEFAULT_ANGLE_LIMIT) })
        .collect()
}

fn default_bone_limits() -> Vec<Limit> {
    vec![Limit::new(DEFAULT_BONE_LIMITS.0, DEFAULT_BONE_LIMITS.1); NUM_BONES]
}

/// Shoulder rotations that fold the outstretched wings back along the flanks.
pub fn folding_pose() -> PoseParams {
    let mut p = PoseParams::identity();
    let ry = axis_angle_to_matrix(&v(0.0, -1.3, 0.0));
    for (joint, yaw) in [(6, -1.2), (10, 1.2)] {
        let rz = axis_angle_to_matrix(&v(0.0, 0.0, yaw));
        let m: Matrix3<f64> = rz * ry;
        p.set_rotation(joint, &matrix_to_axis_angle(&m));
    }
    p
}

pub fn build_procedural_template_set() -> TemplateSet {
    let joints = outstretched_joints();
    let g = generate(&joints);
    assert_eq!(g.vertices.len(), PROCEDURAL_VERTICES);
    assert_eq!(g.faces.len(), PROCEDURAL_FACES);
    let parent = PARENTS.to_vec();
    let weights = SkinWeights::from_sparse(g.weights);
    let outstretched = TemplateModel::new(
        Variant::WingsOutstretched,
        g.vertices,
        g.faces,
        joints,
        parent.clone(),
        weights.clone(),
        g.keypoints,
        vec![0.0; NUM_POSE_PARAMS],
        default_joint_limits(),
        default_bone_limits(),
    )
    .expect("procedural outstretched rig is valid");

    let state = PoseState::new(&outstretched, &folding_pose()).expect("folding pose is valid");
    let folded = TemplateModel::new(
        Variant::WingsFolded,
        state.mesh(),
        outstretched.faces.clone(),
        state.joints(),
        parent,
        weights,
        outstretched.keypoint_defs.clone(),
        vec![0.0; NUM_POSE_PARAMS],
        default_joint_limits(),
        default_bone_limits(),
    )
    .expect("procedural folded rig is valid");
    TemplateSet::new(folded, outstretched).expect("variants share topology")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::template::{NUM_JOINTS, NUM_KEYPOINTS};

    #[test]
    fn dimensions_match_production_rig() {
        let set = procedural_template_set();
        for t in [&set.folded, &set.outstretched] {
            assert_eq!(t.num_vertices(), 3932);
            assert_eq!(t.faces.len(), 5684);
            assert_eq!(t.num_joints(), NUM_JOINTS);
            assert_eq!(t.keypoint_defs.len(), NUM_KEYPOINTS);
            assert!(t.keypoint_defs.iter().all(|g| (1..=4).contains(&g.len())));
        }
    }

    #[test]
    fn every_joint_influences_some_vertex() {
        let set = procedural_template_set();
        let dense = set.folded.skin_weights.dense(NUM_JOINTS);
        for j in 0..NUM_JOINTS {
            assert!(dense.iter().any(|row| row[j] > 0.1), "joint {} ({}) drives nothing", j, JOINT_NAMES[j]);
        }
    }

    #[test]
    fn weights_are_normalized() {
        let set = procedural_template_set();
        for row in set.folded.skin_weights.rows() {
            let s: f64 = row.iter().map(|(_, w)| w).sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|(_, w)| *w >= 0.0));
        }
    }

    #[test]
    fn keypoints_are_left_right_symmetric_in_rest_pose() {
        let set = procedural_template_set();
        let t = &set.outstretched;
        let k = crate::kinematics::extract_keypoints(&t.vertices, t);
        for (r, l) in [(1, 2), (5, 6), (7, 8), (9, 10)] {
            assert!((k[r] - mirror(k[l])).norm() < 2e-3, "{r} vs {l}");
            assert!(k[r].y < 0.0 && k[l].y > 0.0);
        }
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let set = procedural_template_set();
        let text = set.to_json().unwrap();
        let back = TemplateSet::from_json(&text).unwrap();
        assert_eq!(back.folded.vertices, set.folded.vertices);
        assert_eq!(back.outstretched.joints, set.outstretched.joints);
        assert_eq!(back.folded.joint_limits, set.folded.joint_limits);
        assert_eq!(back.to_json().unwrap(), text);
    }
}
