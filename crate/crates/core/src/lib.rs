//! Articulated bird mesh model with bone-length shape parameters, and the
//! machinery to recover its shape and pose from calibrated multi-view or
//! single-view keypoint and silhouette observations.

pub mod annotations;
pub mod camera;
pub mod evaluation;
pub mod fit;
pub mod kinematics;
pub mod metrics;
pub mod objective;
pub mod optim;
pub mod pipeline;
pub mod prior;
pub mod procrustes;
pub mod regressor;
pub mod render;
pub mod rig;
pub mod rotation;
pub mod synth;
pub mod template;

pub use camera::{CameraView, Intrinsics};
pub use fit::{fit, initialize_multiview, FitConfig, FitMode, FitResult};
pub use kinematics::{compose_skeleton, extract_keypoints, pose_mesh, relative_offsets, PoseParams, PoseState};
pub use objective::{Keypoint2D, MaskTarget, ViewObservation};
pub use prior::PosePrior;
pub use render::{RenderSettings, RenderWindow, Silhouette};
pub use template::{TemplateModel, TemplateSet, Variant};
