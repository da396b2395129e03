//! End-to-end fitting of annotated instances: multi-view optimization, or
//! single-view regression with optional refinement.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{load_mask, AnnotatedInstance, ViewRecord};
use crate::camera::CameraView;
use crate::evaluation::{evaluate_params, EvalView};
use crate::fit::{fit, initialize_multiview, FitConfig, FitMode};
use crate::kinematics::PoseParams;
use crate::metrics::{EvalReport, InstanceRow, PckNormalizer};
use crate::objective::{Keypoint2D, MaskTarget, ViewObservation};
use crate::prior::PosePrior;
use crate::regressor::{forward, RegressorNet};
use crate::render::{resample_mask, BinaryMask, RenderWindow};
use crate::template::{TemplateModel, Variant, NUM_BONES};

pub const RESULTS_FORMAT: &str = "avimesh-results/1";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("single-view refinement needs a pose prior")]
    MissingPrior,
    #[error("single-view mode needs a regressor checkpoint")]
    MissingRegressor,
    #[error("mean bone lengths must have {expected} entries, got {got}")]
    BoneLengths { expected: usize, got: usize },
    #[error("no template variant selected")]
    NoTemplate,
    #[error(transparent)]
    Config(#[from] crate::fit::FitError),
    #[error("unsupported results format {0:?}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    MultiView,
    SingleView,
}

/// Everything the pipeline reads besides the annotations.
#[derive(Debug, Clone, Copy)]
pub struct PipelineResources<'a> {
    /// Candidate templates; each instance keeps the variant with the lowest
    /// final objective (the first one when nothing is optimized).
    pub templates: &'a [(Variant, &'a TemplateModel)],
    pub rig: &'a [CameraView],
    pub prior: Option<&'a PosePrior>,
    pub regressor: Option<&'a RegressorNet>,
    /// Bone lengths used to decode regressor output.
    pub mean_bone_lengths: Option<&'a [f64]>,
    /// Directory that relative mask paths resolve against.
    pub mask_root: &'a Path,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    pub mode: PipelineMode,
    pub refine: bool,
    pub fit: FitConfig,
    pub pck_normalizer: PckNormalizer,
}

/// Fit summary without the per-iteration history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub initial_objective: f64,
    pub final_objective: f64,
    pub iterations_run: usize,
    pub best_iteration: usize,
    pub converged: bool,
    pub breakdown: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRecord {
    /// Instance id, suffixed with `@camera` in single-view mode.
    pub id: String,
    pub instance_id: String,
    pub camera_id: Option<String>,
    pub variant: Variant,
    pub params: PoseParams,
    pub fit: Option<FitSummary>,
    pub metrics: InstanceRow,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub records: Vec<PipelineRecord>,
    pub failures: Vec<(String, String)>,
    pub report: EvalReport,
}

struct PreparedView {
    observation: ViewObservation,
    eval: EvalView,
}

fn prepare_view(record: &ViewRecord, rig: &[CameraView], root: &Path, cfg: &FitConfig) -> Result<PreparedView, String> {
    let camera = rig
        .iter()
        .find(|c| c.id == record.camera_id)
        .ok_or_else(|| format!("unknown camera {:?}", record.camera_id))?
        .clone();
    let keypoints: Vec<Keypoint2D> = record.keypoints_2d();
    let window = RenderWindow::around_bbox(record.bbox, cfg.mask_padding);
    let (target, eval_mask) = match &record.mask_path {
        Some(p) => {
            let path: PathBuf = root.join(p);
            let full = load_mask(&path).map_err(|e| e.to_string())?;
            if full.width != camera.width as usize || full.height != camera.height as usize {
                return Err(format!("mask {} is {}×{}, camera is {}×{}", path.display(), full.width, full.height, camera.width, camera.height));
            }
            let s = resample_mask(&full.data, full.width, full.height, &window, cfg.render_size, cfg.render_size);
            let hard = BinaryMask::from_silhouette(&s, 0.5);
            (Some(MaskTarget { window, target: s }), Some(hard))
        }
        None => (None, None),
    };
    Ok(PreparedView {
        observation: ViewObservation { camera: camera.clone(), keypoints: keypoints.clone(), mask: target },
        eval: EvalView { camera, keypoints, bbox: record.bbox, window, mask: eval_mask },
    })
}

fn summary(r: &crate::fit::FitResult) -> FitSummary {
    FitSummary {
        initial_objective: r.initial_objective,
        final_objective: r.final_objective,
        iterations_run: r.iterations_run,
        best_iteration: r.best_iteration,
        converged: r.converged,
        breakdown: r.breakdown.clone(),
    }
}

fn run_multi(inst: &AnnotatedInstance, res: &PipelineResources, opts: &PipelineOptions) -> Result<PipelineRecord, String> {
    let views = inst.views.iter().map(|v| prepare_view(v, res.rig, res.mask_root, &opts.fit)).collect::<Result<Vec<_>, _>>()?;
    let pairs: Vec<(&CameraView, &[Keypoint2D])> = views.iter().map(|v| (&v.observation.camera, v.observation.keypoints.as_slice())).collect();
    let init = initialize_multiview(&pairs).map_err(|e| e.to_string())?;
    let obs: Vec<ViewObservation> = views.iter().map(|v| v.observation.clone()).collect();
    let mut best: Option<(Variant, &TemplateModel, crate::fit::FitResult)> = None;
    for &(variant, template) in res.templates {
        let r = fit(&init, template, &obs, &opts.fit, res.prior).map_err(|e| e.to_string())?;
        if best.as_ref().is_none_or(|b| r.final_objective < b.2.final_objective) {
            best = Some((variant, template, r));
        }
    }
    let (variant, template, result) = best.ok_or("no template variant selected")?;
    let eval: Vec<EvalView> = views.into_iter().map(|v| v.eval).collect();
    let metrics = evaluate_params(&inst.instance_id, &result.params, template, &eval, &[], Some(result.final_objective), opts.pck_normalizer)?;
    Ok(PipelineRecord {
        id: inst.instance_id.clone(),
        instance_id: inst.instance_id.clone(),
        camera_id: None,
        variant,
        params: result.params.clone(),
        fit: Some(summary(&result)),
        metrics,
    })
}

fn run_single(
    inst: &AnnotatedInstance,
    view_index: usize,
    res: &PipelineResources,
    opts: &PipelineOptions,
) -> Result<PipelineRecord, String> {
    let net = res.regressor.ok_or("no regressor")?;
    let record = &inst.views[view_index];
    let view = prepare_view(record, res.rig, res.mask_root, &opts.fit)?;
    let bones = res.mean_bone_lengths.map(|b| b.to_vec()).unwrap_or_else(|| vec![1.0; NUM_BONES]);
    let pred = forward(net, &view.observation.keypoints, record.bbox).map_err(|e| e.to_string())?;
    let (init, _) = pred.to_params(&view.observation.camera, &bones).map_err(|e| e.to_string())?;
    let mut chosen: Option<(Variant, &TemplateModel, PoseParams, Option<FitSummary>)> = None;
    for &(variant, template) in res.templates {
        if !opts.refine {
            chosen = Some((variant, template, init.clone(), None));
            break;
        }
        let r = fit(&init, template, std::slice::from_ref(&view.observation), &opts.fit, res.prior).map_err(|e| e.to_string())?;
        if chosen.as_ref().and_then(|c| c.3.as_ref()).is_none_or(|b| r.final_objective < b.final_objective) {
            chosen = Some((variant, template, r.params.clone(), Some(summary(&r))));
        }
    }
    let (variant, template, params, fit_summary) = chosen.ok_or("no template variant selected")?;
    let cross: Vec<EvalView> = inst
        .views
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != view_index)
        .filter_map(|(_, v)| prepare_view(v, res.rig, res.mask_root, &opts.fit).ok().map(|p| p.eval))
        .collect();
    let id = format!("{}@{}", inst.instance_id, record.camera_id);
    let objective = fit_summary.as_ref().map(|s| s.final_objective);
    let metrics = evaluate_params(&id, &params, template, &[view.eval], &cross, objective, opts.pck_normalizer)?;
    Ok(PipelineRecord { id, instance_id: inst.instance_id.clone(), camera_id: Some(record.camera_id.clone()), variant, params, fit: fit_summary, metrics })
}

/// Runs every instance (every view, in single-view mode) in parallel.
/// Output order follows the input, so results do not depend on the number
/// of worker threads. Per-instance failures are logged and collected.
pub fn run_pipeline(
    instances: &[AnnotatedInstance],
    res: &PipelineResources,
    opts: &PipelineOptions,
) -> Result<PipelineOutput, PipelineError> {
    let mut fit_cfg = opts.fit.clone();
    if opts.mode == PipelineMode::SingleView {
        fit_cfg.mode = FitMode::SingleView;
        if res.regressor.is_none() {
            return Err(PipelineError::MissingRegressor);
        }
        if opts.refine && res.prior.is_none() {
            return Err(PipelineError::MissingPrior);
        }
    } else {
        fit_cfg.mode = FitMode::MultiView;
    }
    fit_cfg.validate()?;
    if res.templates.is_empty() {
        return Err(PipelineError::NoTemplate);
    }
    if let Some(b) = res.mean_bone_lengths {
        if b.len() != NUM_BONES {
            return Err(PipelineError::BoneLengths { expected: NUM_BONES, got: b.len() });
        }
    }
    let opts = PipelineOptions { fit: fit_cfg, ..opts.clone() };
    let jobs: Vec<(usize, Option<usize>)> = match opts.mode {
        PipelineMode::MultiView => (0..instances.len()).map(|i| (i, None)).collect(),
        PipelineMode::SingleView => instances
            .iter()
            .enumerate()
            .flat_map(|(i, inst)| {
                inst.views.iter().enumerate().filter(|(_, v)| v.keypoints.iter().any(|k| k[2] != 0.0)).map(move |(v, _)| (i, Some(v)))
            })
            .collect(),
    };
    let outcomes: Vec<(String, Result<PipelineRecord, String>)> = jobs
        .par_iter()
        .map(|&(i, v)| {
            let inst = &instances[i];
            match v {
                None => (inst.instance_id.clone(), run_multi(inst, res, &opts)),
                Some(v) => (format!("{}@{}", inst.instance_id, inst.views[v].camera_id), run_single(inst, v, res, &opts)),
            }
        })
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (id, r) in outcomes {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => {
                warn!("{id}: {e}");
                failures.push((id, e));
            }
        }
    }
    let split = match opts.mode {
        PipelineMode::MultiView => "multi_view",
        PipelineMode::SingleView if opts.refine => "single_view_refined",
        PipelineMode::SingleView => "single_view_regression",
    };
    let report = EvalReport::from_rows(split, records.iter().map(|r| r.metrics.clone()).collect(), failures.len());
    Ok(PipelineOutput { records, failures, report })
}

/// Serialized pipeline output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultFile {
    pub format: String,
    pub mode: PipelineMode,
    pub refine: bool,
    pub seed: u64,
    pub records: Vec<PipelineRecord>,
    pub failures: Vec<(String, String)>,
}

impl ResultFile {
    pub fn new(mode: PipelineMode, refine: bool, seed: u64, out: &PipelineOutput) -> Self {
        Self { format: RESULTS_FORMAT.into(), mode, refine, seed, records: out.records.clone(), failures: out.failures.clone() }
    }

    /// Canonical text form: pretty JSON with shortest round-trip floats.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("results serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let file: ResultFile = serde_json::from_str(text)?;
        if file.format != RESULTS_FORMAT {
            return Err(PipelineError::Format(file.format));
        }
        Ok(file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PipelineError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// Re-scores stored results against annotations. Records whose instance or
/// camera is missing from `instances` count as failures.
pub fn evaluate_records(
    records: &[PipelineRecord],
    instances: &[AnnotatedInstance],
    res: &PipelineResources,
    opts: &PipelineOptions,
    split_id: &str,
) -> EvalReport {
    let by_id: BTreeMap<&str, &AnnotatedInstance> = instances.iter().map(|i| (i.instance_id.as_str(), i)).collect();
    let rows: Vec<Result<InstanceRow, String>> = records
        .par_iter()
        .map(|rec| {
            let inst = by_id.get(rec.instance_id.as_str()).ok_or_else(|| format!("no annotation for {:?}", rec.instance_id))?;
            let template = res
                .templates
                .iter()
                .find(|(v, _)| *v == rec.variant)
                .map(|(_, t)| *t)
                .ok_or_else(|| format!("template variant {} not loaded", rec.variant.name()))?;
            let mut same = Vec::new();
            let mut cross = Vec::new();
            for v in &inst.views {
                let e = prepare_view(v, res.rig, res.mask_root, &opts.fit)?.eval;
                match &rec.camera_id {
                    Some(c) if *c != v.camera_id => cross.push(e),
                    _ => same.push(e),
                }
            }
            if same.is_empty() {
                return Err(format!("{}: camera not annotated", rec.id));
            }
            evaluate_params(&rec.id, &rec.params, template, &same, &cross, rec.fit.as_ref().map(|f| f.final_objective), opts.pck_normalizer)
        })
        .collect();
    let mut ok = Vec::new();
    let mut failures = 0;
    for r in rows {
        match r {
            Ok(row) => ok.push(row),
            Err(e) => {
                warn!("{e}");
                failures += 1;
            }
        }
    }
    EvalReport::from_rows(split_id, ok, failures)
}
