//! Fitting objective: robust keypoint reprojection, silhouette discrepancy,
//! pose and limit priors, and the single-view Mahalanobis prior. Every term
//! comes with its exact gradient over the flat parameter vector.

use std::collections::BTreeMap;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::CameraView;
use crate::fit::{FitConfig, FitMode};
use crate::kinematics::{KinematicError, PoseParams, PoseState, ALPHA_OFFSET, PARAM_DIM, THETA_OFFSET};
use crate::prior::{stack_params, stacked_grad_to_flat, PosePrior, PriorError};
use crate::render::{mask_l2_with_grad, RenderError, RenderSettings, RenderWindow, Silhouette, SoftRender};
use crate::template::TemplateModel;

pub const TERM_KEYPOINT: &str = "keypoint";
pub const TERM_MASK: &str = "mask";
pub const TERM_POSE: &str = "pose_prior";
pub const TERM_JOINT_LIMIT: &str = "joint_limit";
pub const TERM_BONE_LIMIT: &str = "bone_limit";
pub const TERM_MAHALANOBIS: &str = "mahalanobis";

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("no visible keypoints")]
    NoVisibleKeypoints,
    #[error("single-view objective needs a pose prior")]
    MissingPrior,
    #[error("expected {expected} keypoints per view, got {found}")]
    KeypointCount { expected: usize, found: usize },
    #[error("expected {expected} keypoint weights, got {found}")]
    WeightCount { expected: usize, found: usize },
    #[error(transparent)]
    Kinematic(#[from] KinematicError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Prior(#[from] PriorError),
}

/// One 2D keypoint annotation in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint2D {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

impl Keypoint2D {
    pub fn new(x: f64, y: f64, visible: bool) -> Self {
        Self { x, y, visible }
    }

    pub fn hidden() -> Self {
        Self { x: 0.0, y: 0.0, visible: false }
    }
}

/// Target silhouette on the render grid of `window`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTarget {
    pub window: RenderWindow,
    pub target: Silhouette,
}

/// Everything observed in one camera.
#[derive(Debug, Clone)]
pub struct ViewObservation {
    pub camera: CameraView,
    pub keypoints: Vec<Keypoint2D>,
    pub mask: Option<MaskTarget>,
}

/// `ρ(e) = c²e²/(c² + e²)`.
pub fn geman_mcclure(e: f64, c: f64) -> f64 {
    let c2 = c * c;
    let s = e * e;
    c2 * s / (c2 + s)
}

/// `ρ` as a function of `s = e²`, with `dρ/ds`.
fn geman_mcclure_sq(s: f64, c: f64) -> (f64, f64) {
    let c2 = c * c;
    let den = c2 + s;
    (c2 * s / den, c2 * c2 / (den * den))
}

/// Keypoint reprojection term for one view given posed 3D keypoints. When
/// `grad` is given, `∂E/∂keypoint` is added to it.
pub fn keypoint_term_from_points(
    points: &[Vector3<f64>],
    cam: &CameraView,
    kps: &[Keypoint2D],
    weights: &[f64],
    c: f64,
    mut grad: Option<&mut [Vector3<f64>]>,
) -> Result<f64, ObjectiveError> {
    if kps.len() != points.len() {
        return Err(ObjectiveError::KeypointCount { expected: points.len(), found: kps.len() });
    }
    if weights.len() != points.len() {
        return Err(ObjectiveError::WeightCount { expected: points.len(), found: weights.len() });
    }
    if !kps.iter().any(|k| k.visible) {
        return Err(ObjectiveError::NoVisibleKeypoints);
    }
    let mut total = 0.0;
    for (k, kp) in kps.iter().enumerate() {
        if !kp.visible {
            continue;
        }
        let (proj, jac) = cam.project_with_jacobian(&points[k]);
        if proj.behind {
            total += weights[k] * c * c;
            continue;
        }
        let r = proj.pixel - Vector2::new(kp.x, kp.y);
        let (rho, drho) = geman_mcclure_sq(r.norm_squared(), c);
        total += weights[k] * rho;
        if let Some(g) = grad.as_deref_mut() {
            g[k] += jac.transpose() * (r * (2.0 * weights[k] * drho));
        }
    }
    Ok(total)
}

/// `Σ_k w_k·ρ(‖Π(P(M))_k − p_k‖)` over visible keypoints.
pub fn keypoint_term(
    params: &PoseParams,
    template: &TemplateModel,
    cam: &CameraView,
    kps: &[Keypoint2D],
    weights: &[f64],
    c: f64,
) -> Result<f64, ObjectiveError> {
    let state = PoseState::new(template, params)?;
    keypoint_term_from_points(&state.keypoints(), cam, kps, weights, c, None)
}

/// `(E_θ, E_p, E_b)`: L1 distance to the canonical pose and hinge penalties
/// outside the joint-angle and bone-length limits.
pub fn prior_terms(theta: &[f64], alpha: &[f64], template: &TemplateModel) -> (f64, f64, f64) {
    let e_theta = theta.iter().zip(&template.canonical_pose).map(|(t, o)| (t - o).abs()).sum();
    let hinge = |x: f64, lim: &crate::template::Limit| (x - lim.max).max(0.0) + (lim.min - x).max(0.0);
    let e_p = theta.iter().zip(&template.joint_limits).map(|(t, l)| hinge(*t, l)).sum();
    let e_b = alpha.iter().zip(&template.bone_limits).map(|(a, l)| hinge(*a, l)).sum();
    (e_theta, e_p, e_b)
}

fn hinge_grad(x: f64, lim: &crate::template::Limit) -> f64 {
    if x > lim.max {
        1.0
    } else if x < lim.min {
        -1.0
    } else {
        0.0
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Objective value, weighted per-term breakdown and (optionally) the gradient.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub total: f64,
    pub breakdown: BTreeMap<String, f64>,
    /// Flat gradient in [`PoseParams::to_flat`] layout; empty when not requested.
    pub gradient: Vec<f64>,
}

pub fn render_settings_for(cfg: &FitConfig, target: &Silhouette) -> RenderSettings {
    RenderSettings { height: target.height, width: target.width, sharpness: cfg.sharpness, cutoff: cfg.render_cutoff }
}

/// Evaluates the full objective. Views without a visible keypoint skip the
/// keypoint term; views without a mask skip the mask term.
pub fn evaluate(
    params: &PoseParams,
    template: &TemplateModel,
    views: &[ViewObservation],
    cfg: &FitConfig,
    prior: Option<&PosePrior>,
    with_grad: bool,
) -> Result<Evaluation, ObjectiveError> {
    if !views.iter().any(|v| v.keypoints.iter().any(|k| k.visible)) {
        return Err(ObjectiveError::NoVisibleKeypoints);
    }
    if cfg.mode == FitMode::SingleView && prior.is_none() {
        return Err(ObjectiveError::MissingPrior);
    }
    let state = PoseState::new(template, params)?;
    let points = state.keypoints();
    let mut kp_grad = vec![Vector3::zeros(); points.len()];
    let mut breakdown = BTreeMap::new();

    let mut e_kp = 0.0;
    for view in views {
        if !view.keypoints.iter().any(|k| k.visible) {
            continue;
        }
        let g = if with_grad { Some(kp_grad.as_mut_slice()) } else { None };
        e_kp += keypoint_term_from_points(&points, &view.camera, &view.keypoints, &cfg.keypoint_weights, cfg.gm_scale, g)?;
    }
    breakdown.insert(TERM_KEYPOINT.to_string(), e_kp);

    let mut vertex_grad: Vec<Vector3<f64>> = Vec::new();
    if cfg.lambda_mask != 0.0 && views.iter().any(|v| v.mask.is_some()) {
        let mesh = state.mesh();
        if with_grad {
            vertex_grad = vec![Vector3::zeros(); mesh.len()];
        }
        let mut e_msk = 0.0;
        for view in views {
            let Some(mask) = &view.mask else { continue };
            let settings = render_settings_for(cfg, &mask.target);
            let soft = SoftRender::new(&mesh, &template.faces, &view.camera, &mask.window, &settings)?;
            let (value, dsil) = mask_l2_with_grad(&soft.silhouette, &mask.target)?;
            e_msk += value;
            if with_grad && value > 0.0 {
                let scaled: Vec<f64> = dsil.iter().map(|g| g * cfg.lambda_mask).collect();
                for (acc, g) in vertex_grad.iter_mut().zip(soft.backward(&scaled)) {
                    *acc += g;
                }
            }
        }
        breakdown.insert(TERM_MASK.to_string(), cfg.lambda_mask * e_msk);
    }

    let mut gradient = if with_grad { state.backward(&kp_grad, &vertex_grad) } else { Vec::new() };

    match cfg.mode {
        FitMode::MultiView => {
            let (e_theta, e_p, e_b) = prior_terms(&params.joint_rotations, &params.bone_lengths, template);
            for (name, lambda, value) in
                [(TERM_POSE, cfg.lambda_theta, e_theta), (TERM_JOINT_LIMIT, cfg.lambda_pose_limit, e_p), (TERM_BONE_LIMIT, cfg.lambda_bone_limit, e_b)]
            {
                if lambda != 0.0 {
                    breakdown.insert(name.to_string(), lambda * value);
                }
            }
            if with_grad {
                for (i, (t, o)) in params.joint_rotations.iter().zip(&template.canonical_pose).enumerate() {
                    gradient[THETA_OFFSET + i] += cfg.lambda_theta * sign(t - o)
                        + cfg.lambda_pose_limit * hinge_grad(*t, &template.joint_limits[i]);
                }
                for (i, a) in params.bone_lengths.iter().enumerate() {
                    gradient[ALPHA_OFFSET + i] += cfg.lambda_bone_limit * hinge_grad(*a, &template.bone_limits[i]);
                }
            }
        }
        FitMode::SingleView => {
            if cfg.lambda_mahal != 0.0 {
                let prior = prior.ok_or(ObjectiveError::MissingPrior)?;
                let (d, g) = prior.mahalanobis_with_grad(&stack_params(params))?;
                breakdown.insert(TERM_MAHALANOBIS.to_string(), cfg.lambda_mahal * d);
                if with_grad {
                    stacked_grad_to_flat(&(g * cfg.lambda_mahal), &mut gradient);
                }
            }
        }
    }

    let total = breakdown.values().sum();
    debug_assert!(gradient.is_empty() || gradient.len() == PARAM_DIM);
    Ok(Evaluation { total, breakdown, gradient })
}

/// Objective value with its per-term breakdown.
pub fn total_objective(
    params: &PoseParams,
    template: &TemplateModel,
    views: &[ViewObservation],
    cfg: &FitConfig,
    prior: Option<&PosePrior>,
) -> Result<Evaluation, ObjectiveError> {
    evaluate(params, template, views, cfg, prior, false)
}

/// Mahalanobis distance of a parameter set's stacked vector.
pub fn mahalanobis_of(params: &PoseParams, prior: &PosePrior) -> Result<f64, PriorError> {
    Ok(prior.mahalanobis_with_grad(&stack_params(params))?.0)
}
