//! Two-layer perceptron mapping 2D keypoints to 6D joint rotations and a
//! camera-relative translation.

use std::collections::BTreeSet;
use std::path::Path;

use log::warn;
use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::CameraView;
use crate::kinematics::PoseParams;
use crate::objective::Keypoint2D;
use crate::optim::Adam;
use crate::rotation::{axis_angle_to_matrix, matrix_to_axis_angle, matrix_to_rot6d, rot6d_to_matrix};
use crate::template::{NUM_JOINTS, NUM_KEYPOINTS};

pub const INPUT_DIM: usize = 3 * NUM_KEYPOINTS;
pub const OUTPUT_DIM: usize = 6 * NUM_JOINTS + 3;
pub const CHECKPOINT_FORMAT: &str = "avimesh-regressor/1";

#[derive(Debug, Error)]
pub enum RegressorError {
    #[error("bounding box is empty")]
    EmptyBox,
    #[error("expected {expected} keypoints, got {got}")]
    KeypointCount { expected: usize, got: usize },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("network shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite network parameters")]
    NonFinite,
    #[error("unsupported checkpoint format {0:?}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// `y = W₂·relu(W₁·x + b₁) + b₂`, weights stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorNet {
    pub input_dim: usize,
    pub hidden: usize,
    pub output_dim: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Gradient with the same layout as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrad {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl RegressorNet {
    /// He-initialized weights and zero biases.
    pub fn new(input_dim: usize, hidden: usize, output_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n1 = Normal::new(0.0, (2.0 / input_dim as f64).sqrt()).expect("positive std");
        let n2 = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).expect("positive std");
        Self {
            input_dim,
            hidden,
            output_dim,
            w1: (0..hidden * input_dim).map(|_| n1.sample(&mut rng)).collect(),
            b1: vec![0.0; hidden],
            w2: (0..output_dim * hidden).map(|_| n2.sample(&mut rng)).collect(),
            b2: vec![0.0; output_dim],
        }
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn check(&self) -> Result<(), RegressorError> {
        let (i, h, o) = (self.input_dim, self.hidden, self.output_dim);
        if self.w1.len() != h * i || self.b1.len() != h || self.w2.len() != o * h || self.b2.len() != o {
            return Err(RegressorError::Shape(format!("{i}→{h}→{o} with inconsistent arrays")));
        }
        if self.params().any(|v| !v.is_finite()) {
            return Err(RegressorError::NonFinite);
        }
        Ok(())
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2)
    }

    fn hidden_activations(&self, x: &[f64]) -> Vec<f64> {
        (0..self.hidden)
            .map(|h| {
                let row = &self.w1[h * self.input_dim..(h + 1) * self.input_dim];
                let z = self.b1[h] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
                z.max(0.0)
            })
            .collect()
    }

    fn output(&self, a: &[f64]) -> Vec<f64> {
        (0..self.output_dim)
            .map(|o| {
                let row = &self.w2[o * self.hidden..(o + 1) * self.hidden];
                self.b2[o] + row.iter().zip(a).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    pub fn forward_raw(&self, x: &[f64]) -> Vec<f64> {
        self.output(&self.hidden_activations(x))
    }

    /// Mean over samples and outputs of the squared error, and its gradient.
    pub fn loss_and_grad(&self, inputs: &[&[f64]], targets: &[&[f64]]) -> (f64, NetGrad) {
        let mut g = NetGrad {
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.b1.len()],
            w2: vec![0.0; self.w2.len()],
            b2: vec![0.0; self.b2.len()],
        };
        let norm = (inputs.len() * self.output_dim) as f64;
        let mut loss = 0.0;
        let mut ga = vec![0.0; self.hidden];
        for (x, t) in inputs.iter().zip(targets) {
            let a = self.hidden_activations(x);
            let y = self.output(&a);
            ga.fill(0.0);
            for o in 0..self.output_dim {
                let r = y[o] - t[o];
                loss += r * r;
                let gy = 2.0 * r / norm;
                g.b2[o] += gy;
                let row = o * self.hidden;
                for h in 0..self.hidden {
                    g.w2[row + h] += gy * a[h];
                    ga[h] += gy * self.w2[row + h];
                }
            }
            for h in 0..self.hidden {
                if a[h] <= 0.0 {
                    continue;
                }
                g.b1[h] += ga[h];
                let row = h * self.input_dim;
                for (i, xi) in x.iter().enumerate() {
                    g.w1[row + i] += ga[h] * xi;
                }
            }
        }
        (loss / norm, g)
    }

    pub fn loss(&self, inputs: &[&[f64]], targets: &[&[f64]]) -> f64 {
        let mut loss = 0.0;
        for (x, t) in inputs.iter().zip(targets) {
            loss += self.forward_raw(x).iter().zip(*t).map(|(y, t)| (y - t) * (y - t)).sum::<f64>();
        }
        loss / (inputs.len() * self.output_dim) as f64
    }

    fn flat_mut(&mut self) -> Vec<&mut f64> {
        self.w1.iter_mut().chain(&mut self.b1).chain(&mut self.w2).chain(&mut self.b2).collect()
    }
}

impl NetGrad {
    fn flat(&self) -> Vec<f64> {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2).copied().collect()
    }
}

/// Bounding-box center and largest side.
fn box_frame(bbox: [f64; 4]) -> Result<(f64, f64, f64), RegressorError> {
    let s = bbox[2].max(bbox[3]);
    if !(s > 0.0) || !s.is_finite() {
        return Err(RegressorError::EmptyBox);
    }
    Ok((bbox[0] + bbox[2] / 2.0, bbox[1] + bbox[3] / 2.0, s))
}

/// (x, y, visibility) per keypoint in box-centered units of the largest side;
/// hidden keypoints are zeroed.
pub fn encode_input(kps: &[Keypoint2D], bbox: [f64; 4]) -> Result<Vec<f64>, RegressorError> {
    if kps.len() != NUM_KEYPOINTS {
        return Err(RegressorError::KeypointCount { expected: NUM_KEYPOINTS, got: kps.len() });
    }
    let (cx, cy, s) = box_frame(bbox)?;
    let mut x = Vec::with_capacity(INPUT_DIM);
    for k in kps {
        if k.visible {
            x.extend([(k.x - cx) / s, (k.y - cy) / s, 1.0]);
        } else {
            x.extend([0.0, 0.0, 0.0]);
        }
    }
    Ok(x)
}

/// Regression target: 6D rotations (the root expressed in the camera frame)
/// followed by the root's image offset from the box center in units of the
/// box side and `ln(depth·side/f)`.
pub fn encode_target(params: &PoseParams, cam: &CameraView, bbox: [f64; 4]) -> Result<Vec<f64>, RegressorError> {
    let (cx, cy, s) = box_frame(bbox)?;
    let mut t = Vec::with_capacity(OUTPUT_DIM);
    for j in 0..NUM_JOINTS {
        let mut r = axis_angle_to_matrix(&params.rotation(j));
        if j == 0 {
            r = cam.rotation * r;
        }
        t.extend(matrix_to_rot6d(&r));
    }
    let p = cam.project_point(&params.translation);
    let f = 0.5 * (cam.intrinsics.fx + cam.intrinsics.fy);
    t.extend([(p.pixel.x - cx) / s, (p.pixel.y - cy) / s, (p.depth.max(1e-6) * s / f).ln()]);
    Ok(t)
}

/// Decoded network output.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub raw: Vec<f64>,
    pub bbox: [f64; 4],
}

impl Prediction {
    /// Pose parameters in world coordinates. Degenerate 6D blocks decode to
    /// the identity; the flag reports whether that happened.
    pub fn to_params(&self, cam: &CameraView, bone_lengths: &[f64]) -> Result<(PoseParams, bool), RegressorError> {
        let (cx, cy, s) = box_frame(self.bbox)?;
        let mut params = PoseParams::identity();
        params.bone_lengths = bone_lengths.to_vec();
        let mut degenerate = false;
        for j in 0..NUM_JOINTS {
            let r6: [f64; 6] = self.raw[6 * j..6 * j + 6].try_into().expect("six entries");
            let mut r = rot6d_to_matrix(&r6).unwrap_or_else(|_| {
                degenerate = true;
                Matrix3::identity()
            });
            if j == 0 {
                r = cam.rotation.transpose() * r;
            }
            params.set_rotation(j, &matrix_to_axis_angle(&r));
        }
        if degenerate {
            warn!("degenerate 6D rotation in regressor output replaced by identity");
        }
        let o = 6 * NUM_JOINTS;
        let f = 0.5 * (cam.intrinsics.fx + cam.intrinsics.fy);
        let depth = self.raw[o + 2].exp() * f / s;
        let pixel = nalgebra::Vector2::new(cx + self.raw[o] * s, cy + self.raw[o + 1] * s);
        let k_inv = cam.intrinsics.matrix().try_inverse().ok_or(RegressorError::NonFinite)?;
        let ray = k_inv * Vector3::new(pixel.x, pixel.y, 1.0);
        let x_cam = ray * (depth / ray.z);
        params.translation = cam.rotation.transpose() * (x_cam - cam.translation);
        Ok((params, degenerate))
    }
}

pub fn forward(net: &RegressorNet, kps: &[Keypoint2D], bbox: [f64; 4]) -> Result<Prediction, RegressorError> {
    let x = encode_input(kps, bbox)?;
    if net.input_dim != INPUT_DIM || net.output_dim != OUTPUT_DIM {
        return Err(RegressorError::Shape(format!("expected {INPUT_DIM}→·→{OUTPUT_DIM}")));
    }
    Ok(Prediction { raw: net.forward_raw(&x), bbox })
}

/// One encoded training pair and the real instance it was derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    pub group: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { hidden: 256, epochs: 20, batch_size: 64, learning_rate: 1e-3, validation_fraction: 0.1, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    /// Empty when no group was held out.
    pub validation_loss: Vec<f64>,
    pub train_groups: Vec<String>,
    pub validation_groups: Vec<String>,
}

/// Splits distinct group ids so that roughly `fraction` of them land in
/// validation; every group lands wholly on one side.
pub fn split_groups(groups: &[String], fraction: f64, seed: u64) -> (BTreeSet<String>, BTreeSet<String>) {
    let mut ids: Vec<String> = groups.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((ids.len() as f64) * fraction).round() as usize;
    let n_val = if ids.len() > 1 { n_val.min(ids.len() - 1) } else { 0 };
    let val = ids[..n_val].iter().cloned().collect();
    let train = ids[n_val..].iter().cloned().collect();
    (train, val)
}

/// Adam on mean squared error over shuffled mini-batches. Output biases
/// start at the mean training target.
pub fn train(samples: &[TrainingSample], cfg: &TrainConfig) -> Result<(RegressorNet, TrainReport), RegressorError> {
    if samples.is_empty() {
        return Err(RegressorError::EmptyDataset);
    }
    let groups: Vec<String> = samples.iter().map(|s| s.group.clone()).collect();
    let (train_ids, val_ids) = split_groups(&groups, cfg.validation_fraction, cfg.seed);
    let train_idx: Vec<usize> = (0..samples.len()).filter(|&i| train_ids.contains(&samples[i].group)).collect();
    let val_idx: Vec<usize> = (0..samples.len()).filter(|&i| val_ids.contains(&samples[i].group)).collect();
    let (input_dim, output_dim) = (samples[0].input.len(), samples[0].target.len());
    let mut net = RegressorNet::new(input_dim, cfg.hidden.max(1), output_dim, cfg.seed);
    for o in 0..output_dim {
        net.b2[o] = train_idx.iter().map(|&i| samples[i].target[o]).sum::<f64>() / train_idx.len() as f64;
    }
    let mut adam = Adam::new(net.num_params(), 0.9, 0.999, 1e-8);
    let ones = vec![1.0; net.num_params()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order = train_idx.clone();
    let mut report = TrainReport {
        train_loss: Vec::with_capacity(cfg.epochs),
        validation_loss: Vec::with_capacity(cfg.epochs),
        train_groups: train_ids.into_iter().collect(),
        validation_groups: val_ids.into_iter().collect(),
    };
    let eval = |net: &RegressorNet, idx: &[usize]| -> f64 {
        let xs: Vec<&[f64]> = idx.iter().map(|&i| samples[i].input.as_slice()).collect();
        let ts: Vec<&[f64]> = idx.iter().map(|&i| samples[i].target.as_slice()).collect();
        net.loss(&xs, &ts)
    };
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let xs: Vec<&[f64]> = batch.iter().map(|&i| samples[i].input.as_slice()).collect();
            let ts: Vec<&[f64]> = batch.iter().map(|&i| samples[i].target.as_slice()).collect();
            let (_, g) = net.loss_and_grad(&xs, &ts);
            let mut flat: Vec<f64> = net.params().copied().collect();
            adam.step(&mut flat, &g.flat(), cfg.learning_rate, &ones);
            for (p, v) in net.flat_mut().into_iter().zip(flat) {
                *p = v;
            }
        }
        report.train_loss.push(eval(&net, &train_idx));
        if !val_idx.is_empty() {
            report.validation_loss.push(eval(&net, &val_idx));
        }
    }
    net.check()?;
    Ok((net, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    input_normalization: String,
    seed: u64,
    epochs: usize,
    net: RegressorNet,
}

pub fn checkpoint_to_json(net: &RegressorNet, seed: u64, epochs: usize) -> String {
    let c = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        input_normalization: "bbox_center_largest_side".into(),
        seed,
        epochs,
        net: net.clone(),
    };
    serde_json::to_string(&c).expect("checkpoint serializes")
}

pub fn checkpoint_from_json(text: &str) -> Result<RegressorNet, RegressorError> {
    let c: Checkpoint = serde_json::from_str(text)?;
    if c.format != CHECKPOINT_FORMAT {
        return Err(RegressorError::Format(c.format));
    }
    c.net.check()?;
    Ok(c.net)
}

pub fn save_checkpoint(path: impl AsRef<Path>, net: &RegressorNet, seed: u64, epochs: usize) -> Result<(), RegressorError> {
    std::fs::write(path, checkpoint_to_json(net, seed, epochs))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<RegressorNet, RegressorError> {
    checkpoint_from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::aviary_rig;
    use crate::synth::{item_rng, PoseSampler};
    use rand::Rng;

    fn random_batch(n: usize, i: usize, o: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut rng = item_rng(seed, 0);
        let xs = (0..n).map(|_| (0..i).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let ts = (0..n).map(|_| (0..o).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        (xs, ts)
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = RegressorNet::new(5, 8, 4, 3);
        let (xs, ts) = random_batch(6, 5, 4, 1);
        let xr: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let tr: Vec<&[f64]> = ts.iter().map(|v| v.as_slice()).collect();
        let (_, g) = net.loss_and_grad(&xr, &tr);
        let analytic = g.flat();
        let h = 1e-6;
        let mut numeric = Vec::new();
        for k in 0..net.num_params() {
            let mut p = net.clone();
            *p.flat_mut()[k] += h;
            let up = p.loss(&xr, &tr);
            let mut m = net.clone();
            *m.flat_mut()[k] -= h;
            numeric.push((up - m.loss(&xr, &tr)) / (2.0 * h));
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let norm: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(diff / norm < 1e-5, "relative error {}", diff / norm);
    }

    #[test]
    fn output_width_and_determinism() {
        let net = RegressorNet::new(INPUT_DIM, 16, OUTPUT_DIM, 4);
        let kps: Vec<Keypoint2D> = (0..NUM_KEYPOINTS).map(|i| Keypoint2D::new(i as f64, 2.0 * i as f64, i % 3 != 0)).collect();
        let a = forward(&net, &kps, [0.0, 0.0, 20.0, 30.0]).unwrap();
        let b = forward(&net, &kps, [0.0, 0.0, 20.0, 30.0]).unwrap();
        assert_eq!(a.raw.len(), 153);
        assert_eq!(a, b);
        assert!(forward(&net, &kps, [0.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn target_encoding_round_trips() {
        let t = &crate::rig::procedural_template_set().folded;
        let cam = &aviary_rig()[2];
        let mut rng = item_rng(8, 0);
        let params = PoseSampler::default().sample(&mut rng, t);
        let bbox = [800.0, 500.0, 90.0, 70.0];
        let pred = Prediction { raw: encode_target(&params, cam, bbox).unwrap(), bbox };
        let (back, degenerate) = pred.to_params(cam, &params.bone_lengths).unwrap();
        assert!(!degenerate);
        assert!((back.translation - params.translation).norm() < 1e-9);
        for j in 0..NUM_JOINTS {
            let d = axis_angle_to_matrix(&back.rotation(j)) - axis_angle_to_matrix(&params.rotation(j));
            assert!(d.norm() < 1e-9);
        }
    }

    #[test]
    fn overfits_small_set() {
        let (xs, ts) = random_batch(10, INPUT_DIM, OUTPUT_DIM, 2);
        let samples: Vec<TrainingSample> = xs
            .into_iter()
            .zip(ts)
            .enumerate()
            .map(|(i, (input, target))| TrainingSample { input, target, group: format!("g{i}") })
            .collect();
        let cfg = TrainConfig { epochs: 400, batch_size: 10, validation_fraction: 0.0, hidden: 64, learning_rate: 3e-3, ..TrainConfig::default() };
        let (net, report) = train(&samples, &cfg).unwrap();
        assert!(report.train_loss.last().unwrap() < &1e-3, "{:?}", report.train_loss.last());
        assert!(report.train_loss[cfg.epochs - 1] < report.train_loss[0]);
        let again = train(&samples, &cfg).unwrap().0;
        assert_eq!(net, again);
        assert_eq!(checkpoint_from_json(&checkpoint_to_json(&net, 0, 400)).unwrap(), net);
    }

    #[test]
    fn groups_never_straddle_split() {
        let groups: Vec<String> = (0..200).map(|i| format!("bird{}", i % 20)).collect();
        let (train, val) = split_groups(&groups, 0.1, 5);
        assert_eq!(val.len(), 2);
        assert_eq!(train.len(), 18);
        assert!(train.is_disjoint(&val));
    }
}
