//! Adam minimization of the fitting objective, plus initializers.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::CameraView;
use crate::kinematics::{PoseParams, PoseState, ALPHA_OFFSET, GAMMA_OFFSET, PARAM_DIM, SIGMA_OFFSET, THETA_OFFSET};
use crate::objective::{evaluate, Keypoint2D, ObjectiveError, ViewObservation};
use crate::optim::{decayed_rate, Adam};
use crate::prior::PosePrior;
use crate::template::{TemplateModel, NUM_KEYPOINTS};

/// Lower bound kept on bone lengths and scale during optimization.
const POSITIVE_FLOOR: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("invalid fit configuration: {0}")]
    InvalidConfig(String),
    #[error("objective is not finite at the initial point")]
    NonFiniteInitial,
    #[error("need at least two views")]
    NeedsTwoViews,
    #[error("no keypoint is visible in two or more views")]
    NoSharedKeypoint,
    #[error("rays are parallel; triangulation is ill-conditioned")]
    Degenerate,
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    MultiView,
    SingleView,
}

/// Weights, robust scale, optimizer and renderer settings for one fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub lambda_theta: f64,
    pub lambda_pose_limit: f64,
    pub lambda_bone_limit: f64,
    pub lambda_mask: f64,
    pub lambda_mahal: f64,
    pub keypoint_weights: Vec<f64>,
    /// Geman–McClure scale in pixels.
    pub gm_scale: f64,
    pub iterations: usize,
    /// Leading iterations that move only root rotation, translation and scale.
    pub global_iterations: usize,
    pub learning_rate: f64,
    pub final_learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Step multipliers for bone lengths, translation and scale.
    pub bone_lr_scale: f64,
    pub translation_lr_scale: f64,
    pub scale_lr_scale: f64,
    pub mode: FitMode,
    pub seed: u64,
    /// Side of the square render grid used for mask targets.
    pub render_size: usize,
    pub sharpness: f64,
    pub render_cutoff: f64,
    /// Relative padding of the render window around the bounding box.
    pub mask_padding: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lambda_theta: 1e-3,
            lambda_pose_limit: 1.0,
            lambda_bone_limit: 1.0,
            lambda_mask: 0.1,
            lambda_mahal: 1e-2,
            keypoint_weights: vec![1.0; NUM_KEYPOINTS],
            gm_scale: 10.0,
            iterations: 500,
            global_iterations: 100,
            learning_rate: 0.05,
            final_learning_rate: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            bone_lr_scale: 0.1,
            translation_lr_scale: 0.2,
            scale_lr_scale: 0.2,
            mode: FitMode::MultiView,
            seed: 0,
            render_size: 128,
            sharpness: 6.0,
            render_cutoff: 10.0,
            mask_padding: 0.1,
        }
    }
}

impl FitConfig {
    pub fn keypoints_only() -> Self {
        Self { lambda_mask: 0.0, ..Self::default() }
    }

    /// Keypoint and mask weighted equally.
    pub fn equal_mask() -> Self {
        Self { lambda_mask: 1.0, ..Self::default() }
    }

    pub fn single_view() -> Self {
        Self { mode: FitMode::SingleView, lambda_mask: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), FitError> {
        let bad = |m: &str| Err(FitError::InvalidConfig(m.to_string()));
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if self.global_iterations > self.iterations {
            return bad("global_iterations cannot exceed iterations");
        }
        let weights = [self.lambda_theta, self.lambda_pose_limit, self.lambda_bone_limit, self.lambda_mask, self.lambda_mahal];
        if weights.iter().chain(&self.keypoint_weights).any(|w| !(*w >= 0.0 && w.is_finite())) {
            return bad("weights must be finite and nonnegative");
        }
        if self.keypoint_weights.len() != NUM_KEYPOINTS {
            return bad("keypoint_weights must have one entry per keypoint");
        }
        if !(self.gm_scale > 0.0) {
            return bad("gm_scale must be positive");
        }
        if !(self.learning_rate > 0.0 && self.final_learning_rate > 0.0) {
            return bad("learning rates must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("Adam decay rates must lie in [0, 1)");
        }
        if !(self.sharpness > 0.0) || self.render_size == 0 {
            return bad("renderer settings must be positive");
        }
        if [self.bone_lr_scale, self.translation_lr_scale, self.scale_lr_scale].iter().any(|s| !(*s >= 0.0)) {
            return bad("step multipliers must be nonnegative");
        }
        Ok(())
    }

    /// Per-coordinate Adam step multipliers. Scale is frozen in single-view mode.
    pub fn step_scales(&self) -> Vec<f64> {
        let mut s = vec![1.0; PARAM_DIM];
        s[ALPHA_OFFSET..THETA_OFFSET].fill(self.bone_lr_scale);
        s[GAMMA_OFFSET..SIGMA_OFFSET].fill(self.translation_lr_scale);
        s[SIGMA_OFFSET] = match self.mode {
            FitMode::MultiView => self.scale_lr_scale,
            FitMode::SingleView => 0.0,
        };
        s
    }

    /// Step multipliers during the global stage.
    pub fn global_step_scales(&self) -> Vec<f64> {
        let mut s = self.step_scales();
        s[ALPHA_OFFSET..THETA_OFFSET].fill(0.0);
        s[THETA_OFFSET + 3..GAMMA_OFFSET].fill(0.0);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: PoseParams,
    pub final_objective: f64,
    pub breakdown: BTreeMap<String, f64>,
    pub initial_objective: f64,
    pub iterations_run: usize,
    /// Iterate index (0 = initial point) of the returned parameters.
    pub best_iteration: usize,
    pub converged: bool,
    /// Objective at every iterate, starting with the initial point.
    pub history: Vec<f64>,
    pub config: FitConfig,
}

impl FitResult {
    /// Running minimum of [`FitResult::history`].
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.history
            .iter()
            .map(|&v| {
                if v < best {
                    best = v;
                }
                best
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fit result serializes")
    }
}

fn project_feasible(x: &mut [f64]) {
    for a in &mut x[ALPHA_OFFSET..THETA_OFFSET] {
        *a = a.max(POSITIVE_FLOOR);
    }
    x[SIGMA_OFFSET] = x[SIGMA_OFFSET].max(POSITIVE_FLOOR);
}

/// Runs `cfg.iterations` Adam steps from `initial` and returns the best iterate.
pub fn fit(
    initial: &PoseParams,
    template: &TemplateModel,
    views: &[ViewObservation],
    cfg: &FitConfig,
    prior: Option<&PosePrior>,
) -> Result<FitResult, FitError> {
    cfg.validate()?;
    let first = evaluate(initial, template, views, cfg, prior, true)?;
    if !first.total.is_finite() || first.gradient.iter().any(|g| !g.is_finite()) {
        return Err(FitError::NonFiniteInitial);
    }
    let scales = cfg.step_scales();
    let global_scales = cfg.global_step_scales();
    let mut adam = Adam::new(PARAM_DIM, cfg.beta1, cfg.beta2, cfg.adam_epsilon);
    let mut x = initial.to_flat();
    let mut history = Vec::with_capacity(cfg.iterations + 1);
    let mut best = (first.total, initial.clone(), first.breakdown.clone(), 0usize);
    let mut current = first;
    for it in 0..cfg.iterations {
        history.push(current.total);
        if current.total < best.0 {
            best = (current.total, PoseParams::from_flat(&x).expect("flat size"), current.breakdown.clone(), it);
        }
        if current.gradient.iter().all(|g| g.is_finite()) {
            let lr = decayed_rate(cfg.learning_rate, cfg.final_learning_rate, it, cfg.iterations);
            let s = if it < cfg.global_iterations { &global_scales } else { &scales };
            adam.step(&mut x, &current.gradient, lr, s);
            project_feasible(&mut x);
        }
        let params = PoseParams::from_flat(&x).expect("flat size");
        let last = it + 1 == cfg.iterations;
        current = match evaluate(&params, template, views, cfg, prior, !last) {
            Ok(e) if e.total.is_finite() => e,
            _ => crate::objective::Evaluation { total: f64::INFINITY, breakdown: BTreeMap::new(), gradient: vec![0.0; PARAM_DIM] },
        };
    }
    history.push(current.total);
    if current.total < best.0 {
        best = (current.total, PoseParams::from_flat(&x).expect("flat size"), current.breakdown.clone(), cfg.iterations);
    }
    let (final_objective, params, breakdown, best_iteration) = best;
    let tail_start = cfg.iterations - cfg.iterations / 10;
    let earlier = history[..=tail_start].iter().copied().fold(f64::INFINITY, f64::min);
    let converged = earlier - final_objective <= 1e-4 * (1.0 + final_objective.abs());
    Ok(FitResult {
        params,
        final_objective,
        breakdown,
        initial_objective: history[0],
        iterations_run: cfg.iterations,
        best_iteration,
        converged,
        history,
        config: cfg.clone(),
    })
}

/// Least-squares point closest to a set of rays `(origin, unit direction)`.
pub fn triangulate_rays(rays: &[(Vector3<f64>, Vector3<f64>)]) -> Result<Vector3<f64>, FitError> {
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for (o, d) in rays {
        let p = Matrix3::identity() - d * d.transpose();
        a += p;
        b += p * o;
    }
    if a.determinant().abs() < 1e-14 {
        return Err(FitError::Degenerate);
    }
    let inv = a.try_inverse().ok_or(FitError::Degenerate)?;
    Ok(inv * b)
}

/// Canonical pose, unit shape, translation at the triangulated centroid of
/// keypoints seen in two or more views.
pub fn initialize_multiview(views: &[(&CameraView, &[Keypoint2D])]) -> Result<PoseParams, FitError> {
    if views.len() < 2 {
        return Err(FitError::NeedsTwoViews);
    }
    let k = views.iter().map(|(_, kps)| kps.len()).max().unwrap_or(0);
    let mut points = Vec::new();
    for i in 0..k {
        let rays: Vec<_> = views
            .iter()
            .filter_map(|(cam, kps)| kps.get(i).filter(|kp| kp.visible).map(|kp| (cam.center(), cam.back_project(&Vector2::new(kp.x, kp.y)))))
            .collect();
        if rays.len() >= 2 {
            if let Ok(p) = triangulate_rays(&rays) {
                points.push(p);
            }
        }
    }
    if points.is_empty() {
        return Err(FitError::NoSharedKeypoint);
    }
    let mut params = PoseParams::identity();
    params.translation = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    Ok(params)
}

/// Canonical pose placed along the ray through the keypoint centroid, at the
/// depth where the template's keypoint spread matches the observed spread.
pub fn initialize_single_view(
    cam: &CameraView,
    kps: &[Keypoint2D],
    template: &TemplateModel,
    bone_lengths: Option<&[f64]>,
) -> Result<PoseParams, FitError> {
    let visible: Vec<Vector2<f64>> = kps.iter().filter(|k| k.visible).map(|k| Vector2::new(k.x, k.y)).collect();
    if visible.is_empty() {
        return Err(ObjectiveError::NoVisibleKeypoints.into());
    }
    let mut params = PoseParams::identity();
    if let Some(a) = bone_lengths {
        params.bone_lengths = a.to_vec();
    }
    let model = PoseState::new(template, &params).map_err(ObjectiveError::from)?.keypoints();
    let spread3 = max_pairwise(&model.iter().map(|p| (p.x, p.y, p.z)).collect::<Vec<_>>());
    let spread2 = max_pairwise(&visible.iter().map(|p| (p.x, p.y, 0.0)).collect::<Vec<_>>());
    let focal = 0.5 * (cam.intrinsics.fx + cam.intrinsics.fy);
    let depth = if spread2 > 1.0 { focal * spread3 / spread2 } else { focal * spread3 / 50.0 };
    let centroid = visible.iter().sum::<Vector2<f64>>() / visible.len() as f64;
    let ray = cam.back_project(&centroid);
    let forward = cam.rotation.row(2).transpose();
    params.translation = cam.center() + ray * (depth / ray.dot(&forward));
    Ok(params)
}

fn max_pairwise(p: &[(f64, f64, f64)]) -> f64 {
    let mut best: f64 = 0.0;
    for i in 0..p.len() {
        for j in i + 1..p.len() {
            let d = ((p[i].0 - p[j].0).powi(2) + (p[i].1 - p[j].1).powi(2) + (p[i].2 - p[j].2).powi(2)).sqrt();
            best = best.max(d);
        }
    }
    best
}
