//! Keypoint and mask accuracy metrics.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objective::Keypoint2D;
use crate::render::BinaryMask;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("no visible ground-truth keypoints")]
    NoVisibleKeypoints,
    #[error("bounding box is empty")]
    EmptyBox,
    #[error("keypoint count mismatch: {pred} predicted, {gt} ground truth")]
    KeypointCount { pred: usize, gt: usize },
    #[error("mask resolution mismatch: {0:?} vs {1:?}")]
    Resolution((usize, usize), (usize, usize)),
}

/// Which bounding-box side scales the PCK threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PckNormalizer {
    #[default]
    LargestSide,
    Width,
}

impl PckNormalizer {
    pub fn length(self, bbox: [f64; 4]) -> f64 {
        match self {
            PckNormalizer::LargestSide => bbox[2].max(bbox[3]),
            PckNormalizer::Width => bbox[2],
        }
    }
}

/// Per-keypoint hits: `Some(hit)` for visible ground truth, `None` otherwise.
pub fn pck_hits(
    pred: &[Vector2<f64>],
    gt: &[Keypoint2D],
    bbox: [f64; 4],
    frac: f64,
    norm: PckNormalizer,
) -> Result<Vec<Option<bool>>, MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::KeypointCount { pred: pred.len(), gt: gt.len() });
    }
    let len = norm.length(bbox);
    if !(len > 0.0) {
        return Err(MetricError::EmptyBox);
    }
    if !gt.iter().any(|k| k.visible) {
        return Err(MetricError::NoVisibleKeypoints);
    }
    let thr = frac * len;
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| g.visible.then(|| (p - Vector2::new(g.x, g.y)).norm() <= thr))
        .collect())
}

/// Fraction of visible ground-truth keypoints within `frac` of the box size.
pub fn pck(pred: &[Vector2<f64>], gt: &[Keypoint2D], bbox: [f64; 4], frac: f64) -> Result<f64, MetricError> {
    pck_with(pred, gt, bbox, frac, PckNormalizer::LargestSide)
}

pub fn pck_with(
    pred: &[Vector2<f64>],
    gt: &[Keypoint2D],
    bbox: [f64; 4],
    frac: f64,
    norm: PckNormalizer,
) -> Result<f64, MetricError> {
    let hits = pck_hits(pred, gt, bbox, frac, norm)?;
    let (n, k) = hits.iter().flatten().fold((0usize, 0usize), |(n, k), h| (n + 1, k + *h as usize));
    Ok(k as f64 / n as f64)
}

/// Intersection over union; two empty masks score 1.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MetricError> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(MetricError::Resolution((a.height, a.width), (b.height, b.width)));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.data.iter().zip(&b.data) {
        let (x, y) = (*x != 0, *y != 0);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Same-view metrics for one camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub camera_id: String,
    pub pck05: f64,
    pub pck10: f64,
    pub iou: Option<f64>,
}

/// Metrics for one instance, averaged over its evaluated views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRow {
    pub instance_id: String,
    pub pck05: f64,
    pub pck10: f64,
    pub iou: Option<f64>,
    pub cross_pck05: Option<f64>,
    pub cross_pck10: Option<f64>,
    pub objective: Option<f64>,
    pub views: Vec<ViewMetrics>,
}

fn mean_of(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (n, s) = v.fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    (n > 0).then(|| s / n as f64)
}

impl InstanceRow {
    pub fn from_views(instance_id: impl Into<String>, views: Vec<ViewMetrics>, objective: Option<f64>) -> Self {
        Self {
            instance_id: instance_id.into(),
            pck05: mean_of(views.iter().map(|v| v.pck05)).unwrap_or(0.0),
            pck10: mean_of(views.iter().map(|v| v.pck10)).unwrap_or(0.0),
            iou: mean_of(views.iter().filter_map(|v| v.iou)),
            cross_pck05: None,
            cross_pck10: None,
            objective,
            views,
        }
    }

    pub fn min_pck05(&self) -> f64 {
        self.views.iter().map(|v| v.pck05).fold(1.0, f64::min)
    }

    pub fn min_iou(&self) -> Option<f64> {
        self.views.iter().filter_map(|v| v.iou).reduce(f64::min)
    }
}

/// Averages over a set of instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split_id: String,
    pub n_instances: usize,
    pub failures: usize,
    pub pck05: f64,
    pub pck10: f64,
    pub iou: Option<f64>,
    pub cross_pck05: Option<f64>,
    pub cross_pck10: Option<f64>,
    pub rows: Vec<InstanceRow>,
}

impl EvalReport {
    pub fn from_rows(split_id: impl Into<String>, rows: Vec<InstanceRow>, failures: usize) -> Self {
        Self {
            split_id: split_id.into(),
            n_instances: rows.len(),
            failures,
            pck05: mean_of(rows.iter().map(|r| r.pck05)).unwrap_or(0.0),
            pck10: mean_of(rows.iter().map(|r| r.pck10)).unwrap_or(0.0),
            iou: mean_of(rows.iter().filter_map(|r| r.iou)),
            cross_pck05: mean_of(rows.iter().filter_map(|r| r.cross_pck05)),
            cross_pck10: mean_of(rows.iter().filter_map(|r| r.cross_pck10)),
            rows,
        }
    }

    /// Header plus one tab-separated line per instance.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("split\tinstance\tpck05\tpck10\tiou\tcross_pck05\tcross_pck10\tobjective\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\t{}\t{}\t{}\t{}\n",
                self.split_id,
                r.instance_id,
                r.pck05,
                r.pck10,
                opt(r.iou),
                opt(r.cross_pck05),
                opt(r.cross_pck10),
                opt(r.objective)
            ));
        }
        s
    }

    /// One-line summary for console tables.
    pub fn summary_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
        format!(
            "{:<24} n={:<5} fail={:<3} PCK@05={:.3} PCK@10={:.3} IoU={} xPCK@05={} xPCK@10={}",
            self.split_id,
            self.n_instances,
            self.failures,
            self.pck05,
            self.pck10,
            opt(self.iou),
            opt(self.cross_pck05),
            opt(self.cross_pck10)
        )
    }
}
