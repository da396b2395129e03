use std::path::Path;

use avimesh::annotations::{save_mask, AnnotatedInstance};
use avimesh::camera::aviary_rig;
use avimesh::metrics::PckNormalizer;
use avimesh::pipeline::{evaluate_records, run_pipeline, PipelineError, PipelineMode, PipelineOptions, PipelineResources, ResultFile};
use avimesh::prior::{fit_gaussian, stack_params};
use avimesh::regressor::{forward, RegressorNet};
use avimesh::rig::procedural_template_set;
use avimesh::synth::{generate_scenes, item_rng, scene_annotation, PoseSampler};
use avimesh::template::{Variant, NUM_BONES};
use avimesh::{CameraView, FitConfig, PosePrior, TemplateModel};

fn fast_config() -> FitConfig {
    FitConfig { iterations: 30, global_iterations: 10, render_size: 32, ..FitConfig::default() }
}

fn fixture(dir: &Path, count: usize) -> (Vec<AnnotatedInstance>, Vec<CameraView>) {
    let t = &procedural_template_set().folded;
    let cams = aviary_rig();
    let scenes = generate_scenes(t, &cams, count, 3, &PoseSampler::default(), 21, 32, 0.1).unwrap();
    std::fs::create_dir_all(dir.join("masks")).unwrap();
    let mut instances = Vec::new();
    for s in &scenes {
        let (inst, masks) = scene_annotation(s, t, &cams, Some("masks")).unwrap();
        for (path, m) in masks {
            save_mask(dir.join(path), &m).unwrap();
        }
        instances.push(inst);
    }
    (instances, cams)
}

fn prior(t: &TemplateModel) -> PosePrior {
    let samples: Vec<_> = (0..60).map(|i| stack_params(&PoseSampler::default().sample(&mut item_rng(8, i), t))).collect();
    fit_gaussian(&samples, None, None).unwrap()
}

fn options(mode: PipelineMode, refine: bool) -> PipelineOptions {
    PipelineOptions { mode, refine, fit: fast_config(), pck_normalizer: PckNormalizer::LargestSide }
}

#[test]
fn multi_view_fits_every_instance_and_is_thread_count_independent() {
    let dir = tempfile::tempdir().unwrap();
    let (instances, cams) = fixture(dir.path(), 2);
    let t = &procedural_template_set().folded;
    let templates = [(Variant::WingsFolded, t)];
    let res = PipelineResources { templates: &templates, rig: &cams, prior: None, regressor: None, mean_bone_lengths: None, mask_root: dir.path() };
    let opts = options(PipelineMode::MultiView, false);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_pipeline(&instances, &res, &opts).unwrap())
    };
    let one = run(1);
    let many = run(4);
    assert_eq!(one.records, many.records);
    assert_eq!(one.records.len(), 2);
    assert!(one.failures.is_empty());
    for r in &one.records {
        let f = r.fit.as_ref().unwrap();
        assert!(f.final_objective <= f.initial_objective);
        assert!(r.metrics.iou.is_some());
        assert_eq!(r.metrics.views.len(), 3);
    }

    let file = ResultFile::new(PipelineMode::MultiView, false, 0, &one);
    let back = ResultFile::from_json(&file.to_json()).unwrap();
    assert_eq!(back, file);
    let report = evaluate_records(&back.records, &instances, &res, &opts, "multi_view");
    assert_eq!(report.rows, one.report.rows);
}

#[test]
fn both_variants_keep_the_lower_objective() {
    let dir = tempfile::tempdir().unwrap();
    let (instances, cams) = fixture(dir.path(), 1);
    let set = procedural_template_set();
    let opts = options(PipelineMode::MultiView, false);
    let single = |v: Variant| {
        let templates = [(v, set.get(v))];
        let res = PipelineResources { templates: &templates, rig: &cams, prior: None, regressor: None, mean_bone_lengths: None, mask_root: dir.path() };
        run_pipeline(&instances, &res, &opts).unwrap().records.remove(0)
    };
    let (a, b) = (single(Variant::WingsFolded), single(Variant::WingsOutstretched));
    let templates = [(Variant::WingsFolded, &set.folded), (Variant::WingsOutstretched, &set.outstretched)];
    let res = PipelineResources { templates: &templates, rig: &cams, prior: None, regressor: None, mean_bone_lengths: None, mask_root: dir.path() };
    let both = run_pipeline(&instances, &res, &opts).unwrap().records.remove(0);
    let best = if b.fit.as_ref().unwrap().final_objective < a.fit.as_ref().unwrap().final_objective { b } else { a };
    assert_eq!(both, best);
}

#[test]
fn single_view_without_refinement_is_the_regressor_decode() {
    let dir = tempfile::tempdir().unwrap();
    let (instances, cams) = fixture(dir.path(), 1);
    let t = &procedural_template_set().folded;
    let templates = [(Variant::WingsFolded, t)];
    let net = RegressorNet::new(36, 32, 153, 1);
    let bones = vec![1.1; NUM_BONES];
    let res = PipelineResources {
        templates: &templates,
        rig: &cams,
        prior: None,
        regressor: Some(&net),
        mean_bone_lengths: Some(&bones),
        mask_root: dir.path(),
    };
    let out = run_pipeline(&instances, &res, &options(PipelineMode::SingleView, false)).unwrap();
    assert_eq!(out.records.len(), 3);
    assert_eq!(out.report.split_id, "single_view_regression");
    for (rec, view) in out.records.iter().zip(&instances[0].views) {
        let cam = cams.iter().find(|c| c.id == view.camera_id).unwrap();
        let (expected, _) = forward(&net, &view.keypoints_2d(), view.bbox).unwrap().to_params(cam, &bones).unwrap();
        assert_eq!(rec.params, expected);
        assert!(rec.fit.is_none());
        assert_eq!(rec.camera_id.as_deref(), Some(view.camera_id.as_str()));
        assert!(rec.metrics.cross_pck05.is_some());
    }
}

#[test]
fn single_view_refinement_uses_the_prior() {
    let dir = tempfile::tempdir().unwrap();
    let (instances, cams) = fixture(dir.path(), 1);
    let t = &procedural_template_set().folded;
    let templates = [(Variant::WingsFolded, t)];
    let net = RegressorNet::new(36, 32, 153, 1);
    let p = prior(t);
    let res = PipelineResources { templates: &templates, rig: &cams, prior: Some(&p), regressor: Some(&net), mean_bone_lengths: None, mask_root: dir.path() };
    let out = run_pipeline(&instances, &res, &options(PipelineMode::SingleView, true)).unwrap();
    assert_eq!(out.report.split_id, "single_view_refined");
    for r in &out.records {
        let f = r.fit.as_ref().unwrap();
        assert!(f.breakdown.contains_key("mahalanobis"));
        assert_eq!(r.params.scale, 1.0);
    }
}

#[test]
fn startup_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (instances, cams) = fixture(dir.path(), 1);
    let t = &procedural_template_set().folded;
    let templates = [(Variant::WingsFolded, t)];
    let net = RegressorNet::new(36, 8, 153, 1);
    let base = PipelineResources { templates: &templates, rig: &cams, prior: None, regressor: Some(&net), mean_bone_lengths: None, mask_root: dir.path() };

    let err = run_pipeline(&instances, &base, &options(PipelineMode::SingleView, true)).unwrap_err();
    assert!(matches!(err, PipelineError::MissingPrior));

    let res = PipelineResources { regressor: None, ..base };
    assert!(matches!(run_pipeline(&instances, &res, &options(PipelineMode::SingleView, false)), Err(PipelineError::MissingRegressor)));

    let res = PipelineResources { templates: &[], ..base };
    assert!(matches!(run_pipeline(&instances, &res, &options(PipelineMode::MultiView, false)), Err(PipelineError::NoTemplate)));

    let short = vec![1.0; 3];
    let res = PipelineResources { mean_bone_lengths: Some(&short), ..base };
    assert!(matches!(run_pipeline(&instances, &res, &options(PipelineMode::SingleView, false)), Err(PipelineError::BoneLengths { .. })));

    let mut opts = options(PipelineMode::MultiView, false);
    opts.fit.keypoint_weights = vec![1.0; 3];
    assert!(matches!(run_pipeline(&instances, &base, &opts), Err(PipelineError::Config(_))));
}

#[test]
fn bad_instances_are_reported_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let (mut instances, cams) = fixture(dir.path(), 2);
    instances[0].views[1].mask_path = Some("masks/missing.png".into());
    let t = &procedural_template_set().folded;
    let templates = [(Variant::WingsFolded, t)];
    let res = PipelineResources { templates: &templates, rig: &cams, prior: None, regressor: None, mean_bone_lengths: None, mask_root: dir.path() };
    let out = run_pipeline(&instances, &res, &options(PipelineMode::MultiView, false)).unwrap();
    assert_eq!(out.records.len(), 1);
    assert_eq!(out.failures.len(), 1);
    assert_eq!(out.failures[0].0, instances[0].instance_id);
    assert_eq!(out.report.failures, 1);
}
