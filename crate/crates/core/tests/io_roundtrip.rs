use nalgebra::DVector;

use avimesh::annotations::{annotations_to_json, load_mask, parse_annotations, save_mask, AnnotationError};
use avimesh::camera::{aviary_rig, parse_rig, rig_to_json};
use avimesh::prior::{fit_gaussian, stack_params, PosePrior};
use avimesh::regressor::{checkpoint_from_json, checkpoint_to_json, RegressorNet};
use avimesh::render::BinaryMask;
use avimesh::rig::procedural_template_set;
use avimesh::synth::{generate_scenes, item_rng, scene_annotation, PoseSampler, SyntheticFile, SynthOptions};
use avimesh::template::TemplateSet;

#[test]
fn annotations_round_trip_and_validate() {
    let t = &procedural_template_set().folded;
    let cams = aviary_rig();
    let scenes = generate_scenes(t, &cams, 2, 3, &PoseSampler::default(), 5, 32, 0.1).unwrap();
    let instances: Vec<_> = scenes.iter().map(|s| scene_annotation(s, t, &cams, None).unwrap().0).collect();
    let text = annotations_to_json(&instances);
    let back = parse_annotations(&text, &cams).unwrap();
    assert_eq!(back, instances);
    assert_eq!(annotations_to_json(&back), text);

    let mut bad = instances.clone();
    bad[0].views[0].camera_id = "nowhere".into();
    assert!(matches!(parse_annotations(&annotations_to_json(&bad), &cams), Err(AnnotationError::UnknownCamera { .. })));
    let mut bad = instances.clone();
    bad[1].views[0].keypoints.pop();
    assert!(matches!(parse_annotations(&annotations_to_json(&bad), &cams), Err(AnnotationError::Schema { .. })));
    let mut bad = instances;
    bad[0].views[1].keypoints[0] = [-50.0, 10.0, 1.0];
    assert!(matches!(parse_annotations(&annotations_to_json(&bad), &cams), Err(AnnotationError::Schema { .. })));
    let wrong_format = text.replace("avimesh-annotations/1", "other/9");
    assert!(matches!(parse_annotations(&wrong_format, &cams), Err(AnnotationError::Format(_))));
}

#[test]
fn mask_png_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.png");
    let mut m = BinaryMask::empty(7, 9);
    for i in (0..m.data.len()).step_by(3) {
        m.data[i] = 255;
    }
    save_mask(&path, &m).unwrap();
    assert_eq!(load_mask(&path).unwrap(), m);
    assert!(load_mask(dir.path().join("missing.png")).is_err());
}

#[test]
fn rig_round_trip() {
    let cams = aviary_rig();
    let back = parse_rig(&rig_to_json(&cams)).unwrap();
    assert_eq!(back.len(), cams.len());
    for (a, b) in cams.iter().zip(&back) {
        assert_eq!(a.id, b.id);
        assert_eq!((a.width, a.height), (b.width, b.height));
        assert!((a.rotation - b.rotation).abs().max() < 1e-15);
        assert!((a.translation - b.translation).abs().max() < 1e-15);
    }
}

#[test]
fn template_set_round_trip() {
    let set = procedural_template_set();
    let text = set.to_json().unwrap();
    let back = TemplateSet::from_json(&text).unwrap();
    for (a, b) in [(&set.folded, &back.folded), (&set.outstretched, &back.outstretched)] {
        assert_eq!(a.vertices, b.vertices);
        assert_eq!(a.faces, b.faces);
        assert_eq!(a.parent, b.parent);
        assert_eq!(a.canonical_pose, b.canonical_pose);
        assert_eq!(a.keypoint_defs, b.keypoint_defs);
    }
}

#[test]
fn prior_round_trip() {
    let t = &procedural_template_set().folded;
    let sampler = PoseSampler::default();
    let samples: Vec<DVector<f64>> = (0..40).map(|i| stack_params(&sampler.sample(&mut item_rng(1, i), t))).collect();
    let prior = fit_gaussian(&samples, None, None).unwrap();
    let back = PosePrior::from_json(&prior.to_json()).unwrap();
    assert_eq!(back.mean, prior.mean);
    assert_eq!(back.covariance, prior.covariance);
    assert_eq!(back.epsilon, prior.epsilon);
    assert_eq!(back.to_json(), prior.to_json());
}

#[test]
fn checkpoint_round_trip() {
    let net = RegressorNet::new(36, 16, 153, 4);
    let back = checkpoint_from_json(&checkpoint_to_json(&net, 4, 1)).unwrap();
    assert_eq!(back, net);
    assert!(checkpoint_from_json("{}").is_err());
}

#[test]
fn synthetic_file_round_trip() {
    let t = &procedural_template_set().folded;
    let cams = aviary_rig();
    let sampler = PoseSampler::default();
    let fits: Vec<(String, _)> = (0..2).map(|i| (format!("b{i}"), sampler.sample(&mut item_rng(2, i), t))).collect();
    let samples: Vec<DVector<f64>> = (0..30).map(|i| stack_params(&sampler.sample(&mut item_rng(3, i), t))).collect();
    let prior = fit_gaussian(&samples, None, None).unwrap();
    let opts = SynthOptions { per_instance: 5, seed: 9, ..SynthOptions::default() };
    let synth = avimesh::synth::generate_synthetic(t, &fits, &prior, &cams, &opts).unwrap();
    assert_eq!(synth.len(), 10);
    let file = SyntheticFile::new(opts, &synth, &cams);
    let back = SyntheticFile::from_json(&file.to_json()).unwrap();
    assert_eq!(back, file);
}
