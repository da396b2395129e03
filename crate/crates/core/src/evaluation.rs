//! Same-view and cross-view evaluation of fitted meshes, and the ablation
//! harness that fits a suite under several configurations.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use crate::camera::CameraView;
use crate::fit::{fit, initialize_multiview, FitConfig, FitResult};
use crate::kinematics::{PoseParams, PoseState};
use crate::metrics::{iou, pck_with, EvalReport, InstanceRow, MetricError, PckNormalizer, ViewMetrics};
use crate::objective::{Keypoint2D, ViewObservation};
use crate::prior::PosePrior;
use crate::procrustes::{align_points, AlignOptions};
use crate::render::{rasterize_hard, BinaryMask, RenderWindow};
use crate::synth::{item_rng, perturb_keypoints, SyntheticScene};
use crate::template::TemplateModel;

/// Ground truth for one camera.
#[derive(Debug, Clone)]
pub struct EvalView {
    pub camera: CameraView,
    pub keypoints: Vec<Keypoint2D>,
    pub bbox: [f64; 4],
    pub window: RenderWindow,
    /// Target mask over `window`, if one exists.
    pub mask: Option<BinaryMask>,
}

/// PCK of projected keypoints and IoU of the hard-rasterized mesh.
pub fn evaluate_view(
    mesh: &[Vector3<f64>],
    keypoints: &[Vector3<f64>],
    faces: &[[usize; 3]],
    view: &EvalView,
    norm: PckNormalizer,
) -> Result<ViewMetrics, MetricError> {
    let pred: Vec<Vector2<f64>> = keypoints.iter().map(|x| view.camera.project_point(x).pixel).collect();
    let score = |m: &Option<BinaryMask>| -> Result<Option<f64>, MetricError> {
        m.as_ref()
            .map(|m| iou(&rasterize_hard(mesh, faces, &view.camera, &view.window, m.height, m.width), m))
            .transpose()
    };
    Ok(ViewMetrics {
        camera_id: view.camera.id.clone(),
        pck05: pck_with(&pred, &view.keypoints, view.bbox, 0.05, norm)?,
        pck10: pck_with(&pred, &view.keypoints, view.bbox, 0.10, norm)?,
        iou: score(&view.mask)?,
    })
}

/// Mean PCK@05 and PCK@10 over `views` after aligning the posed keypoints
/// to each view by a similarity transform. Views where alignment is
/// impossible are skipped.
pub fn cross_view_pck(keypoints: &[Vector3<f64>], views: &[EvalView], norm: PckNormalizer) -> Option<(f64, f64)> {
    let mut acc = (0.0, 0.0, 0usize);
    for v in views {
        let Ok(a) = align_points(keypoints, &v.camera, &v.keypoints, &AlignOptions::default()) else { continue };
        let (Ok(p5), Ok(p10)) = (
            pck_with(&a.pixels, &v.keypoints, v.bbox, 0.05, norm),
            pck_with(&a.pixels, &v.keypoints, v.bbox, 0.10, norm),
        ) else {
            continue;
        };
        acc = (acc.0 + p5, acc.1 + p10, acc.2 + 1);
    }
    (acc.2 > 0).then(|| (acc.0 / acc.2 as f64, acc.1 / acc.2 as f64))
}

/// Scores posed parameters on same-view and (optionally) cross-view ground truth.
pub fn evaluate_params(
    id: &str,
    params: &PoseParams,
    template: &TemplateModel,
    same: &[EvalView],
    cross: &[EvalView],
    objective: Option<f64>,
    norm: PckNormalizer,
) -> Result<InstanceRow, String> {
    let state = PoseState::new(template, params).map_err(|e| e.to_string())?;
    let mesh = state.mesh();
    let kps = state.keypoints();
    let views = same
        .iter()
        .map(|v| evaluate_view(&mesh, &kps, &template.faces, v, norm))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let mut row = InstanceRow::from_views(id, views, objective);
    if let Some((a, b)) = cross_view_pck(&kps, cross, norm) {
        row.cross_pck05 = Some(a);
        row.cross_pck10 = Some(b);
    }
    Ok(row)
}

/// One instance of an ablation suite.
#[derive(Debug, Clone)]
pub struct AblationCase {
    pub id: String,
    pub observations: Vec<ViewObservation>,
    /// Same-view ground truth, aligned with `observations`.
    pub eval: Vec<EvalView>,
    /// Other views of the same bird for cross-view scoring.
    pub cross: Vec<EvalView>,
    /// Named starting points; configurations pick one by key.
    pub inits: BTreeMap<String, PoseParams>,
}

pub const TRIANGULATED_INIT: &str = "triangulated";

impl AblationCase {
    /// Multi-view case from a synthetic scene. Inputs carry Gaussian pixel
    /// noise of `noise_std`; evaluation uses the noise-free keypoints.
    pub fn from_scene(scene: &SyntheticScene, cams: &[CameraView], noise_std: f64, with_masks: bool, seed: u64) -> Result<Self, String> {
        let mut rng = item_rng(seed, scene_index(&scene.id));
        let mut observations = scene.observations(cams, with_masks);
        for o in &mut observations {
            o.keypoints = perturb_keypoints(&o.keypoints, noise_std, &mut rng);
        }
        let eval = scene
            .views
            .iter()
            .map(|(c, v)| EvalView { camera: cams[*c].clone(), keypoints: v.keypoints.clone(), bbox: v.bbox, window: v.window, mask: Some(v.mask.clone()) })
            .collect();
        let views: Vec<(&CameraView, &[Keypoint2D])> = observations.iter().map(|o| (&o.camera, o.keypoints.as_slice())).collect();
        let init = initialize_multiview(&views).map_err(|e| e.to_string())?;
        Ok(Self {
            id: scene.id.clone(),
            observations,
            eval,
            cross: Vec::new(),
            inits: BTreeMap::from([(TRIANGULATED_INIT.to_string(), init)]),
        })
    }
}

fn scene_index(id: &str) -> u64 {
    id.bytes().fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

/// A named configuration. `fit: None` scores the starting point directly.
#[derive(Debug, Clone)]
pub struct AblationConfig {
    pub name: String,
    pub init: String,
    pub fit: Option<FitConfig>,
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub report: EvalReport,
    /// Fit results in case order; `None` for failures or unfitted configurations.
    pub fits: Vec<Option<FitResult>>,
}

/// Fits every case under every configuration. Cases run in parallel; rows
/// are assembled in case order, and per-case failures are counted rather
/// than aborting the suite.
pub fn run_ablation(
    template: &TemplateModel,
    cases: &[AblationCase],
    configs: &[AblationConfig],
    prior: Option<&PosePrior>,
    norm: PckNormalizer,
) -> Vec<AblationOutcome> {
    configs
        .iter()
        .map(|cfg| {
            let results: Vec<Result<(InstanceRow, Option<FitResult>), String>> = cases
                .par_iter()
                .map(|case| {
                    let init = case.inits.get(&cfg.init).ok_or_else(|| format!("no initialization named {:?}", cfg.init))?;
                    let (params, objective, result) = match &cfg.fit {
                        Some(fc) => {
                            let r = fit(init, template, &case.observations, fc, prior).map_err(|e| e.to_string())?;
                            (r.params.clone(), Some(r.final_objective), Some(r))
                        }
                        None => (init.clone(), None, None),
                    };
                    let row = evaluate_params(&case.id, &params, template, &case.eval, &case.cross, objective, norm)?;
                    Ok((row, result))
                })
                .collect();
            let mut rows = Vec::new();
            let mut fits = Vec::new();
            let mut failures = 0;
            for (case, r) in cases.iter().zip(results) {
                match r {
                    Ok((row, f)) => {
                        rows.push(row);
                        fits.push(f);
                    }
                    Err(e) => {
                        warn!("{} / {}: {e}", cfg.name, case.id);
                        failures += 1;
                        fits.push(None);
                    }
                }
            }
            AblationOutcome { report: EvalReport::from_rows(cfg.name.clone(), rows, failures), fits }
        })
        .collect()
}

/// Mean over runs of the best-so-far objective at each iteration.
pub fn mean_best_so_far(fits: &[Option<FitResult>]) -> Vec<f64> {
    let curves: Vec<Vec<f64>> = fits.iter().flatten().map(|f| f.best_so_far()).collect();
    let Some(len) = curves.iter().map(|c| c.len()).min() else { return Vec::new() };
    (0..len).map(|i| curves.iter().map(|c| c[i]).sum::<f64>() / curves.len() as f64).collect()
}

/// First iteration at which `curve` is at or below `level`.
pub fn iterations_to_reach(curve: &[f64], level: f64) -> Option<usize> {
    curve.iter().position(|v| *v <= level)
}
