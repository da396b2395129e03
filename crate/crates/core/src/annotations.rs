//! Multi-view keypoint and mask annotations.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::CameraView;
use crate::objective::Keypoint2D;
use crate::render::BinaryMask;
use crate::template::NUM_KEYPOINTS;

pub const ANNOTATION_FORMAT: &str = "avimesh-annotations/1";

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("{record}: {message}")]
    Schema { record: String, message: String },
    #[error("{record}: unknown camera {camera:?}")]
    UnknownCamera { record: String, camera: String },
    #[error("unsupported annotation format {0:?}")]
    Format(String),
    #[error("mask {path}: {message}")]
    Mask { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One camera's annotation of one bird.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewRecord {
    pub camera_id: String,
    /// `[x, y, visible]` per keypoint, visible as 0 or 1.
    pub keypoints: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    /// (x, y, w, h) in pixels.
    pub bbox: [f64; 4],
}

impl ViewRecord {
    pub fn keypoints_2d(&self) -> Vec<Keypoint2D> {
        self.keypoints.iter().map(|k| Keypoint2D::new(k[0], k[1], k[2] != 0.0)).collect()
    }

    pub fn from_keypoints(camera_id: impl Into<String>, kps: &[Keypoint2D], bbox: [f64; 4], mask_path: Option<String>) -> Self {
        Self {
            camera_id: camera_id.into(),
            keypoints: kps.iter().map(|k| if k.visible { [k.x, k.y, 1.0] } else { [0.0, 0.0, 0.0] }).collect(),
            mask_path,
            bbox,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatedInstance {
    pub instance_id: String,
    pub views: Vec<ViewRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationFile {
    format: String,
    instances: Vec<AnnotatedInstance>,
}

/// Checks record shape, camera ids and keypoint bounds against the rig.
pub fn validate(instances: &[AnnotatedInstance], rig: &[CameraView]) -> Result<(), AnnotationError> {
    let cams: BTreeMap<&str, &CameraView> = rig.iter().map(|c| (c.id.as_str(), c)).collect();
    for inst in instances {
        for (v, view) in inst.views.iter().enumerate() {
            let record = format!("instance {:?} view {} ({})", inst.instance_id, v, view.camera_id);
            let schema = |message: String| AnnotationError::Schema { record: record.clone(), message };
            if view.keypoints.len() != NUM_KEYPOINTS {
                return Err(schema(format!("expected {NUM_KEYPOINTS} keypoints, found {}", view.keypoints.len())));
            }
            let Some(cam) = cams.get(view.camera_id.as_str()) else {
                return Err(AnnotationError::UnknownCamera { record, camera: view.camera_id.clone() });
            };
            if !(view.bbox.iter().all(|b| b.is_finite()) && view.bbox[2] > 0.0 && view.bbox[3] > 0.0) {
                return Err(schema("bounding box must have positive size".into()));
            }
            for (k, kp) in view.keypoints.iter().enumerate() {
                if kp[2] != 0.0 && kp[2] != 1.0 {
                    return Err(schema(format!("keypoint {k} visibility must be 0 or 1")));
                }
                let inside = kp[0] >= 0.0 && kp[1] >= 0.0 && kp[0] <= cam.width as f64 && kp[1] <= cam.height as f64;
                if kp[2] == 1.0 && !inside {
                    return Err(schema(format!("visible keypoint {k} lies outside the image")));
                }
            }
        }
    }
    Ok(())
}

pub fn parse_annotations(text: &str, rig: &[CameraView]) -> Result<Vec<AnnotatedInstance>, AnnotationError> {
    let file: AnnotationFile = serde_json::from_str(text)?;
    if file.format != ANNOTATION_FORMAT {
        return Err(AnnotationError::Format(file.format));
    }
    validate(&file.instances, rig)?;
    Ok(file.instances)
}

pub fn load_annotations(path: impl AsRef<Path>, rig: &[CameraView]) -> Result<Vec<AnnotatedInstance>, AnnotationError> {
    parse_annotations(&std::fs::read_to_string(path)?, rig)
}

/// Canonical text form: pretty JSON with shortest round-trip floats.
pub fn annotations_to_json(instances: &[AnnotatedInstance]) -> String {
    let file = AnnotationFile { format: ANNOTATION_FORMAT.into(), instances: instances.to_vec() };
    let mut s = serde_json::to_string_pretty(&file).expect("annotations serialize");
    s.push('\n');
    s
}

pub fn save_annotations(path: impl AsRef<Path>, instances: &[AnnotatedInstance]) -> Result<(), AnnotationError> {
    std::fs::write(path, annotations_to_json(instances))?;
    Ok(())
}

/// Reads an 8-bit single-channel mask; nonzero pixels are foreground.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask, AnnotationError> {
    let p = path.as_ref();
    let err = |message: String| AnnotationError::Mask { path: p.display().to_string(), message };
    let img = image::open(p).map_err(|e| err(e.to_string()))?.into_luma8();
    let (w, h) = img.dimensions();
    Ok(BinaryMask { height: h as usize, width: w as usize, data: img.into_raw().into_iter().map(|v| if v > 127 { 255 } else { 0 }).collect() })
}

pub fn save_mask(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<(), AnnotationError> {
    let p = path.as_ref();
    let img = image::GrayImage::from_raw(mask.width as u32, mask.height as u32, mask.data.clone())
        .ok_or_else(|| AnnotationError::Mask { path: p.display().to_string(), message: "buffer size mismatch".into() })?;
    img.save(p).map_err(|e| AnnotationError::Mask { path: p.display().to_string(), message: e.to_string() })
}
