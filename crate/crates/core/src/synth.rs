//! Synthetic observations: ground-truth pose sampling, projection of
//! keypoints and silhouettes, and the prior-driven training set.

use nalgebra::{Rotation3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::{AnnotatedInstance, ViewRecord};
use crate::camera::CameraView;
use crate::kinematics::{KinematicError, PoseParams, PoseState};
use crate::objective::{Keypoint2D, MaskTarget, ViewObservation};
use crate::regressor::{encode_input, encode_target, TrainingSample};
use crate::prior::{PosePrior, PriorError, PRIOR_GAMMA, PRIOR_THETA};
use crate::render::{rasterize_hard, BinaryMask, RenderWindow};
use crate::rotation::matrix_to_axis_angle;
use crate::template::TemplateModel;

/// Random stream for item `index` of a run seeded with `seed`.
pub fn item_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Ground-truth pose distribution for synthetic scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseSampler {
    /// Heading is uniform in `[-yaw_range, yaw_range]` about world z.
    pub yaw_range: f64,
    pub tilt_std: f64,
    pub joint_std: f64,
    pub bone_std: f64,
    pub scale_std: f64,
    pub region_min: [f64; 3],
    pub region_max: [f64; 3],
}

impl Default for PoseSampler {
    fn default() -> Self {
        Self {
            yaw_range: std::f64::consts::PI,
            tilt_std: 0.15,
            joint_std: 0.12,
            bone_std: 0.05,
            scale_std: 0.05,
            region_min: [1.8, 0.8, 0.7],
            region_max: [4.2, 1.7, 1.8],
        }
    }
}

impl PoseSampler {
    pub fn sample(&self, rng: &mut impl Rng, template: &TemplateModel) -> PoseParams {
        let mut gauss = |std: f64| -> f64 {
            let z: f64 = StandardNormal.sample(&mut *rng);
            std * z
        };
        let mut p = PoseParams::identity();
        let (pitch, roll) = (gauss(self.tilt_std), gauss(self.tilt_std));
        for j in 1..template.num_joints() {
            for k in 0..3 {
                let i = 3 * j + k;
                p.joint_rotations[i] = template.joint_limits[i].clamp(gauss(self.joint_std));
            }
        }
        for (b, a) in p.bone_lengths.iter_mut().enumerate() {
            *a = template.bone_limits[b].clamp(1.0 + gauss(self.bone_std));
        }
        p.scale = (1.0 + gauss(self.scale_std)).clamp(0.8, 1.2);
        let yaw = rng.random_range(-self.yaw_range..=self.yaw_range);
        let root = Rotation3::from_euler_angles(roll, pitch, yaw).into_inner();
        p.set_rotation(0, &matrix_to_axis_angle(&root));
        p.translation = Vector3::from_fn(|i, _| rng.random_range(self.region_min[i]..=self.region_max[i]));
        p
    }
}

/// Keypoints, box and silhouette of one posed model in one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSample {
    pub keypoints: Vec<Keypoint2D>,
    /// (x, y, w, h) in pixels, clipped to the image.
    pub bbox: [f64; 4],
    pub window: RenderWindow,
    pub mask: BinaryMask,
}

impl ViewSample {
    pub fn mask_target(&self) -> MaskTarget {
        MaskTarget { window: self.window, target: self.mask.to_silhouette() }
    }
}

/// Projects keypoints (visible = in front and inside the image) and
/// rasterizes the silhouette over a padded square window around the box.
/// Returns `None` when no vertex lands in the image.
pub fn observe(
    template: &TemplateModel,
    params: &PoseParams,
    cam: &CameraView,
    render_size: usize,
    padding: f64,
) -> Result<Option<ViewSample>, KinematicError> {
    let state = PoseState::new(template, params)?;
    let mesh = state.mesh();
    Ok(observe_mesh(&mesh, &state.keypoints(), &template.faces, cam, render_size, padding))
}

pub fn observe_mesh(
    mesh: &[Vector3<f64>],
    keypoints: &[Vector3<f64>],
    faces: &[[usize; 3]],
    cam: &CameraView,
    render_size: usize,
    padding: f64,
) -> Option<ViewSample> {
    let kps = keypoints
        .iter()
        .map(|x| {
            let p = cam.project_point(x);
            if p.behind {
                Keypoint2D::hidden()
            } else {
                Keypoint2D::new(p.pixel.x, p.pixel.y, cam.contains(&p.pixel))
            }
        })
        .collect();
    let (w, h) = (cam.width as f64, cam.height as f64);
    let mut lo = Vector2::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Vector2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for v in mesh {
        let p = cam.project_point(v);
        if p.behind {
            continue;
        }
        let q = Vector2::new(p.pixel.x.clamp(0.0, w), p.pixel.y.clamp(0.0, h));
        lo = lo.inf(&q);
        hi = hi.sup(&q);
    }
    if !(hi.x > lo.x && hi.y > lo.y) {
        return None;
    }
    let bbox = [lo.x, lo.y, hi.x - lo.x, hi.y - lo.y];
    let window = RenderWindow::around_bbox(bbox, padding);
    let mask = rasterize_hard(mesh, faces, cam, &window, render_size, render_size);
    Some(ViewSample { keypoints: kps, bbox, window, mask })
}

/// Adds isotropic Gaussian pixel noise to visible keypoints.
pub fn perturb_keypoints(kps: &[Keypoint2D], std: f64, rng: &mut impl Rng) -> Vec<Keypoint2D> {
    kps.iter()
        .map(|k| {
            if k.visible && std > 0.0 {
                let dx: f64 = StandardNormal.sample(&mut *rng);
                let dy: f64 = StandardNormal.sample(&mut *rng);
                Keypoint2D::new(k.x + std * dx, k.y + std * dy, true)
            } else {
                *k
            }
        })
        .collect()
}

/// One ground-truth bird seen by several cameras.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub id: String,
    pub params: PoseParams,
    /// Camera index into the rig and what that camera sees.
    pub views: Vec<(usize, ViewSample)>,
}

impl SyntheticScene {
    pub fn observations(&self, cams: &[CameraView], with_masks: bool) -> Vec<ViewObservation> {
        self.views
            .iter()
            .map(|(c, v)| ViewObservation {
                camera: cams[*c].clone(),
                keypoints: v.keypoints.clone(),
                mask: with_masks.then(|| v.mask_target()),
            })
            .collect()
    }
}

/// Scenes whose every chosen view sees all keypoints. Each scene is drawn
/// from its own random stream, so output does not depend on thread count.
pub fn generate_scenes(
    template: &TemplateModel,
    cams: &[CameraView],
    count: usize,
    views_per_scene: usize,
    sampler: &PoseSampler,
    seed: u64,
    render_size: usize,
    padding: f64,
) -> Result<Vec<SyntheticScene>, KinematicError> {
    assert!(views_per_scene <= cams.len(), "not enough cameras");
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = item_rng(seed, i as u64);
            loop {
                let params = sampler.sample(&mut rng, template);
                let mut order: Vec<usize> = (0..cams.len()).collect();
                for k in (1..order.len()).rev() {
                    order.swap(k, rng.random_range(0..=k));
                }
                let mut views = Vec::new();
                for &c in &order {
                    if views.len() == views_per_scene {
                        break;
                    }
                    if let Some(v) = observe(template, &params, &cams[c], render_size, padding)? {
                        if v.keypoints.iter().all(|k| k.visible) {
                            views.push((c, v));
                        }
                    }
                }
                if views.len() == views_per_scene {
                    views.sort_by_key(|(c, _)| *c);
                    return Ok(SyntheticScene { id: format!("scene-{i:05}"), params, views });
                }
            }
        })
        .collect()
}

/// One single-view training sample.
#[derive(Debug, Clone)]
pub struct SyntheticInstance {
    pub params: PoseParams,
    pub camera: usize,
    pub keypoints: Vec<Keypoint2D>,
    pub bbox: [f64; 4],
    pub window: RenderWindow,
    pub silhouette: BinaryMask,
    pub source_instance_id: String,
}

/// Settings for [`generate_synthetic`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthOptions {
    pub per_instance: usize,
    pub bone_noise_std: f64,
    pub render_size: usize,
    pub padding: f64,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self { per_instance: 100, bone_noise_std: 0.05, render_size: 64, padding: 0.1, seed: 0 }
    }
}

/// For every source fit, draws `per_instance` (θ, γ) samples from the prior,
/// keeps the fit's bone lengths with clamped Gaussian noise and its scale,
/// and projects the result into a camera chosen uniformly from the rig.
pub fn generate_synthetic(
    template: &TemplateModel,
    fits: &[(String, PoseParams)],
    prior: &PosePrior,
    cams: &[CameraView],
    opts: &SynthOptions,
) -> Result<Vec<SyntheticInstance>, PriorError> {
    assert!(!cams.is_empty(), "rig has no cameras");
    let pose_prior = prior.marginal(PRIOR_THETA.start..PRIOR_GAMMA.end)?;
    let factor = pose_prior.factor();
    let d = pose_prior.dim();
    let noise = Normal::new(0.0, opts.bone_noise_std.max(0.0)).expect("finite std");
    let total = fits.len() * opts.per_instance;
    let out = (0..total)
        .into_par_iter()
        .map(|i| {
            let (id, source) = &fits[i / opts.per_instance.max(1)];
            let mut rng = item_rng(opts.seed, i as u64);
            let z = nalgebra::DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
            let x = &pose_prior.mean + &factor * z;
            let mut params = source.clone();
            params.joint_rotations.copy_from_slice(x.rows(PRIOR_THETA.start, PRIOR_THETA.len()).as_slice());
            params.translation = x.fixed_rows::<3>(PRIOR_GAMMA.start).into_owned();
            for (b, a) in params.bone_lengths.iter_mut().enumerate() {
                *a = template.bone_limits[b].clamp(*a + noise.sample(&mut rng)).max(crate::prior::ALPHA_FLOOR);
            }
            let camera = rng.random_range(0..cams.len());
            let state = PoseState::new(template, &params).expect("sampled parameters are valid");
            let mesh = state.mesh();
            let keypoints = state.keypoints();
            let sample = observe_mesh(&mesh, &keypoints, &template.faces, &cams[camera], opts.render_size, opts.padding)
                .unwrap_or_else(|| ViewSample {
                    keypoints: keypoints
                        .iter()
                        .map(|x| {
                            let p = cams[camera].project_point(x);
                            Keypoint2D::new(if p.behind { 0.0 } else { p.pixel.x }, if p.behind { 0.0 } else { p.pixel.y }, false)
                        })
                        .collect(),
                    bbox: [0.0, 0.0, 0.0, 0.0],
                    window: RenderWindow { x: 0.0, y: 0.0, width: 1.0, height: 1.0 },
                    mask: BinaryMask::empty(opts.render_size, opts.render_size),
                });
            SyntheticInstance {
                params,
                camera,
                keypoints: sample.keypoints,
                bbox: sample.bbox,
                window: sample.window,
                silhouette: sample.mask,
                source_instance_id: id.clone(),
            }
        })
        .collect();
    Ok(out)
}

pub const SYNTHETIC_FORMAT: &str = "avimesh-synthetic/1";

/// Serialized form of a [`SyntheticInstance`] without its silhouette.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticRecord {
    pub source_instance_id: String,
    pub camera_id: String,
    pub params: PoseParams,
    /// `[x, y, visible]` per keypoint.
    pub keypoints: Vec<[f64; 3]>,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticFile {
    pub format: String,
    pub options: SynthOptions,
    pub records: Vec<SyntheticRecord>,
}

impl SyntheticInstance {
    pub fn to_record(&self, cams: &[CameraView]) -> SyntheticRecord {
        SyntheticRecord {
            source_instance_id: self.source_instance_id.clone(),
            camera_id: cams[self.camera].id.clone(),
            params: self.params.clone(),
            keypoints: self.keypoints.iter().map(|k| [k.x, k.y, k.visible as u8 as f64]).collect(),
            bbox: self.bbox,
        }
    }

    /// Encoded regressor pair, or `None` when the bird left the image or
    /// fewer than `min_visible` keypoints are visible.
    pub fn training_sample(&self, cams: &[CameraView], min_visible: usize) -> Option<TrainingSample> {
        training_sample(&self.params, &cams[self.camera], &self.keypoints, self.bbox, &self.source_instance_id, min_visible)
    }
}

impl SyntheticRecord {
    pub fn keypoints_2d(&self) -> Vec<Keypoint2D> {
        self.keypoints.iter().map(|k| Keypoint2D::new(k[0], k[1], k[2] != 0.0)).collect()
    }

    pub fn training_sample(&self, cams: &[CameraView], min_visible: usize) -> Option<TrainingSample> {
        let cam = cams.iter().find(|c| c.id == self.camera_id)?;
        training_sample(&self.params, cam, &self.keypoints_2d(), self.bbox, &self.source_instance_id, min_visible)
    }
}

fn training_sample(
    params: &PoseParams,
    cam: &CameraView,
    kps: &[Keypoint2D],
    bbox: [f64; 4],
    group: &str,
    min_visible: usize,
) -> Option<TrainingSample> {
    if kps.iter().filter(|k| k.visible).count() < min_visible.max(1) {
        return None;
    }
    Some(TrainingSample { input: encode_input(kps, bbox).ok()?, target: encode_target(params, cam, bbox).ok()?, group: group.to_string() })
}

impl SyntheticFile {
    pub fn new(options: SynthOptions, instances: &[SyntheticInstance], cams: &[CameraView]) -> Self {
        Self { format: SYNTHETIC_FORMAT.into(), options, records: instances.iter().map(|i| i.to_record(cams)).collect() }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("synthetic set serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let f: SyntheticFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if f.format != SYNTHETIC_FORMAT {
            return Err(format!("unsupported synthetic format {:?}", f.format));
        }
        Ok(f)
    }
}

/// Annotation record of a synthetic scene with full-resolution masks.
/// Masks are returned as `(relative path, mask)` pairs under `mask_dir`.
pub fn scene_annotation(
    scene: &SyntheticScene,
    template: &TemplateModel,
    cams: &[CameraView],
    mask_dir: Option<&str>,
) -> Result<(AnnotatedInstance, Vec<(String, BinaryMask)>), KinematicError> {
    let state = PoseState::new(template, &scene.params)?;
    let mesh = state.mesh();
    let mut masks = Vec::new();
    let views = scene
        .views
        .iter()
        .map(|(c, v)| {
            let cam = &cams[*c];
            let mask_path = mask_dir.map(|dir| {
                let (w, h) = (cam.width as usize, cam.height as usize);
                let full = RenderWindow { x: 0.0, y: 0.0, width: w as f64, height: h as f64 };
                let path = format!("{dir}/{}_{}.png", scene.id, cam.id);
                masks.push((path.clone(), rasterize_hard(&mesh, &template.faces, cam, &full, h, w)));
                path
            });
            ViewRecord::from_keypoints(cam.id.clone(), &v.keypoints, v.bbox, mask_path)
        })
        .collect();
    Ok((AnnotatedInstance { instance_id: scene.id.clone(), views }, masks))
}
