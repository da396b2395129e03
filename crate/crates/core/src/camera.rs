//! Calibrated pinhole cameras and perspective projection.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix2x3, Matrix3, Matrix3x4, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Points with camera depth at or below this value are flagged as behind the camera.
pub const DEPTH_EPSILON: f64 = 1e-6;
const ROTATION_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed calibration file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("calibration file contains no cameras")]
    EmptyRig,
    #[error("camera {0:?}: rotation is not orthonormal with determinant +1")]
    BadRotation(String),
    #[error("camera {0:?}: focal lengths and image size must be positive")]
    BadIntrinsics(String),
    #[error("duplicate camera id {0:?}")]
    DuplicateId(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub skew: f64,
}

impl Intrinsics {
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, self.skew, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

/// One calibrated camera: `x_cam = R·x_world + t`, then `K·x_cam`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub id: String,
    pub intrinsics: Intrinsics,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub width: u32,
    pub height: u32,
}

/// Pixel position of one projected point. `behind` marks depth ≤ ε; the pixel
/// value is meaningless in that case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    pub pixel: Vector2<f64>,
    pub depth: f64,
    pub behind: bool,
}

impl CameraView {
    pub fn new(
        id: impl Into<String>,
        intrinsics: Intrinsics,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self, CameraError> {
        let cam = Self { id: id.into(), intrinsics, rotation, translation, width, height };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, image y pointing away from `up`.
    pub fn look_at(
        id: impl Into<String>,
        intrinsics: Intrinsics,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self, CameraError> {
        let f = (target - eye).normalize();
        let x = f.cross(&up).normalize();
        let y = f.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), f.transpose()]);
        let translation = -(rotation * eye);
        Self::new(id, intrinsics, rotation, translation, width, height)
    }

    fn validate(&self) -> Result<(), CameraError> {
        let r = &self.rotation;
        if (r.transpose() * r - Matrix3::identity()).abs().max() > ROTATION_TOL || (r.determinant() - 1.0).abs() > ROTATION_TOL {
            return Err(CameraError::BadRotation(self.id.clone()));
        }
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) || self.width == 0 || self.height == 0 {
            return Err(CameraError::BadIntrinsics(self.id.clone()));
        }
        Ok(())
    }

    /// World position of the optical center.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn project_point(&self, x: &Vector3<f64>) -> Projected {
        let p = self.to_camera(x);
        let k = &self.intrinsics;
        let pixel = Vector2::new((k.fx * p.x + k.skew * p.y) / p.z + k.cx, k.fy * p.y / p.z + k.cy);
        Projected { pixel, depth: p.z, behind: p.z <= DEPTH_EPSILON }
    }

    /// Projection together with `∂pixel/∂x_world`.
    pub fn project_with_jacobian(&self, x: &Vector3<f64>) -> (Projected, Matrix2x3<f64>) {
        let p = self.to_camera(x);
        let k = &self.intrinsics;
        let iz = 1.0 / p.z;
        let u = (k.fx * p.x + k.skew * p.y) * iz;
        let v = k.fy * p.y * iz;
        let d_cam = Matrix2x3::new(k.fx * iz, k.skew * iz, -u * iz, 0.0, k.fy * iz, -v * iz);
        let proj = Projected { pixel: Vector2::new(u + k.cx, v + k.cy), depth: p.z, behind: p.z <= DEPTH_EPSILON };
        (proj, d_cam * self.rotation)
    }

    /// `K·[R|t]`.
    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        rt.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        self.intrinsics.matrix() * rt
    }

    /// Unit ray direction in world coordinates through `pixel`.
    pub fn back_project(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        let k = &self.intrinsics;
        let y = (pixel.y - k.cy) / k.fy;
        let x = (pixel.x - k.cx - k.skew * y) / k.fx;
        (self.rotation.transpose() * Vector3::new(x, y, 1.0)).normalize()
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0 && pixel.y >= 0.0 && pixel.x < self.width as f64 && pixel.y < self.height as f64
    }
}

pub fn project(points: &[Vector3<f64>], cam: &CameraView) -> Vec<Projected> {
    points.iter().map(|x| cam.project_point(x)).collect()
}

#[derive(Serialize, Deserialize)]
struct RigFile {
    cameras: Vec<CameraRecord>,
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    id: String,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    #[serde(default)]
    skew: f64,
    /// Row-major world-to-camera rotation.
    #[serde(rename = "R")]
    rotation: [f64; 9],
    #[serde(rename = "t")]
    translation: [f64; 3],
    width: u32,
    height: u32,
}

pub fn parse_rig(text: &str) -> Result<Vec<CameraView>, CameraError> {
    let file: RigFile = serde_json::from_str(text)?;
    if file.cameras.is_empty() {
        return Err(CameraError::EmptyRig);
    }
    let mut seen = HashSet::new();
    file.cameras
        .into_iter()
        .map(|c| {
            if !seen.insert(c.id.clone()) {
                return Err(CameraError::DuplicateId(c.id));
            }
            CameraView::new(
                c.id,
                Intrinsics { fx: c.fx, fy: c.fy, cx: c.cx, cy: c.cy, skew: c.skew },
                Matrix3::from_row_slice(&c.rotation),
                Vector3::from(c.translation),
                c.width,
                c.height,
            )
        })
        .collect()
}

pub fn load_rig(path: impl AsRef<Path>) -> Result<Vec<CameraView>, CameraError> {
    parse_rig(&fs::read_to_string(path)?)
}

pub fn rig_to_json(cams: &[CameraView]) -> String {
    let file = RigFile {
        cameras: cams
            .iter()
            .map(|c| {
                let r = &c.rotation;
                CameraRecord {
                    id: c.id.clone(),
                    fx: c.intrinsics.fx,
                    fy: c.intrinsics.fy,
                    cx: c.intrinsics.cx,
                    cy: c.intrinsics.cy,
                    skew: c.intrinsics.skew,
                    rotation: [r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)]],
                    translation: [c.translation.x, c.translation.y, c.translation.z],
                    width: c.width,
                    height: c.height,
                }
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("rig serializes")
}

pub fn save_rig(path: impl AsRef<Path>, cams: &[CameraView]) -> std::io::Result<()> {
    fs::write(path, rig_to_json(cams))
}

/// Extent of the reference aviary in meters (length, width, height).
pub const AVIARY_SIZE: [f64; 3] = [6.0, 2.5, 2.5];

/// Eight 1920×1200 cameras in the corners of the aviary, aimed at its center.
pub fn aviary_rig() -> Vec<CameraView> {
    let [lx, ly, lz] = AVIARY_SIZE;
    let center = Vector3::new(lx / 2.0, ly / 2.0, lz / 2.0);
    let intrinsics = Intrinsics { fx: 1400.0, fy: 1400.0, cx: 959.5, cy: 599.5, skew: 0.0 };
    let mut cams = Vec::with_capacity(8);
    for (i, (x, y, z)) in [
        (0.1, 0.1, 2.3),
        (5.9, 0.1, 2.3),
        (5.9, 2.4, 2.3),
        (0.1, 2.4, 2.3),
        (0.1, 0.1, 0.3),
        (5.9, 0.1, 0.3),
        (5.9, 2.4, 0.3),
        (0.1, 2.4, 0.3),
    ]
    .into_iter()
    .enumerate()
    {
        let eye = Vector3::new(x, y, z);
        cams.push(
            CameraView::look_at(format!("cam{i}"), intrinsics, eye, center, Vector3::z(), 1920, 1200)
                .expect("aviary camera is valid"),
        );
    }
    cams
}
