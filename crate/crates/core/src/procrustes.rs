//! Similarity alignment of a posed model to another view's 2D keypoints.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, SMatrix, SVector, Vector2, Vector3};
use thiserror::Error;

use crate::camera::CameraView;
use crate::kinematics::{KinematicError, PoseParams, PoseState};
use crate::objective::Keypoint2D;
use crate::optim::{decayed_rate, Adam};
use crate::rotation::{axis_angle_to_matrix, matrix_to_rot6d, rot6d_to_matrix, rot6d_vjp, skew};
use crate::template::TemplateModel;

#[derive(Debug, Error, PartialEq)]
pub enum ProcrustesError {
    #[error("need at least 3 visible keypoints, got {0}")]
    TooFewKeypoints(usize),
    #[error("{points} model points but {keypoints} keypoints")]
    KeypointCount { points: usize, keypoints: usize },
    #[error("all keypoints are behind the camera after alignment")]
    AllBehind,
    #[error(transparent)]
    Kinematic(#[from] KinematicError),
}

/// `x ↦ s·Q·x + d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Similarity {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Similarity {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros(), scale: 1.0 }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * x) + self.translation
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub transform: Similarity,
    /// Aligned model keypoints projected into the target view.
    pub pixels: Vec<Vector2<f64>>,
    /// Reprojection error per keypoint; `None` where the target is hidden.
    pub errors: Vec<Option<f64>>,
    /// Root mean square error over visible keypoints.
    pub rms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignOptions {
    pub adam_iterations: usize,
    pub learning_rate: f64,
    pub lm_iterations: usize,
}

impl Default for AlignOptions {
    fn default() -> Self {
        Self { adam_iterations: 200, learning_rate: 1e-3, lm_iterations: 100 }
    }
}

/// Holds shape and pose fixed and finds the similarity of the posed
/// keypoints that best reprojects onto `target` in `view`.
pub fn procrustes_reproject(
    params: &PoseParams,
    template: &TemplateModel,
    view: &CameraView,
    target: &[Keypoint2D],
) -> Result<Alignment, ProcrustesError> {
    let points = PoseState::new(template, params)?.keypoints();
    align_points(&points, view, target, &AlignOptions::default())
}

/// Linear initialization, Adam over (6D rotation, translation, log scale),
/// then a Levenberg–Marquardt polish. The returned transform is reported in
/// the unit-scale gauge (see [`unit_scale_gauge`]).
pub fn align_points(
    points: &[Vector3<f64>],
    view: &CameraView,
    target: &[Keypoint2D],
    opts: &AlignOptions,
) -> Result<Alignment, ProcrustesError> {
    if points.len() != target.len() {
        return Err(ProcrustesError::KeypointCount { points: points.len(), keypoints: target.len() });
    }
    let obs: Vec<(Vector3<f64>, Vector2<f64>)> =
        points.iter().zip(target).filter(|(_, k)| k.visible).map(|(x, k)| (*x, Vector2::new(k.x, k.y))).collect();
    if obs.len() < 3 {
        return Err(ProcrustesError::TooFewKeypoints(obs.len()));
    }
    let mut best = unit_scale_gauge(&linear_init(&obs, view), view);
    let mut best_cost = cost(&obs, view, &best);
    if opts.adam_iterations > 0 {
        let (t, c) = adam_refine(&obs, view, &best, opts);
        if c < best_cost {
            best = unit_scale_gauge(&t, view);
            best_cost = cost(&obs, view, &best);
        }
    }
    let (mut best, mut best_cost) = levenberg_marquardt(&obs, view, best, best_cost, opts.lm_iterations);
    // restarts from the 24 axis-aligned orientations guard against a
    // degenerate linear estimate (near-coplanar keypoints)
    for rotation in axis_rotations() {
        let start = placed_start(&obs, view, rotation);
        let c = cost(&obs, view, &start);
        if !c.is_finite() {
            continue;
        }
        let (t, c) = levenberg_marquardt(&obs, view, start, c, opts.lm_iterations);
        if c < best_cost {
            (best, best_cost) = (t, c);
        }
    }
    let mut errors = Vec::with_capacity(points.len());
    let mut pixels = Vec::with_capacity(points.len());
    let (mut sq, mut n, mut front) = (0.0, 0usize, 0usize);
    for (x, k) in points.iter().zip(target) {
        let p = view.project_point(&best.apply(x));
        pixels.push(p.pixel);
        if k.visible {
            let e = (p.pixel - Vector2::new(k.x, k.y)).norm();
            sq += e * e;
            n += 1;
            front += !p.behind as usize;
            errors.push(Some(e));
        } else {
            errors.push(None);
        }
    }
    if front == 0 {
        return Err(ProcrustesError::AllBehind);
    }
    Ok(Alignment { transform: best, pixels, errors, rms: (sq / n as f64).sqrt() })
}

fn cost(obs: &[(Vector3<f64>, Vector2<f64>)], view: &CameraView, t: &Similarity) -> f64 {
    let mut c = 0.0;
    for (x, u) in obs {
        let p = view.project_point(&t.apply(x));
        if p.behind {
            return f64::INFINITY;
        }
        c += (p.pixel - u).norm_squared();
    }
    c
}

/// Each correspondence gives two equations linear in `y = A·x + d`.
fn projection_rows(view: &CameraView, u: &Vector2<f64>) -> [(Vector3<f64>, f64); 2] {
    let p = view.projection_matrix();
    let m = |r: usize| Vector3::new(p[(r, 0)], p[(r, 1)], p[(r, 2)]);
    let row = |r: usize, coord: f64| (m(r) - coord * m(2), -(p[(r, 3)] - coord * p[(2, 3)]));
    [row(0, u.x), row(1, u.y)]
}

fn solve_translation(obs: &[(Vector3<f64>, Vector2<f64>)], view: &CameraView, rotation: &Matrix3<f64>, scale: f64) -> Vector3<f64> {
    let mut a = DMatrix::zeros(2 * obs.len(), 3);
    let mut b = DVector::zeros(2 * obs.len());
    for (i, (x, u)) in obs.iter().enumerate() {
        let y = scale * (rotation * x);
        for (k, (c, rhs)) in projection_rows(view, u).into_iter().enumerate() {
            let norm = c.norm().max(1e-12);
            a.row_mut(2 * i + k).copy_from(&(c.transpose() / norm));
            b[2 * i + k] = (rhs - c.dot(&y)) / norm;
        }
    }
    a.svd(true, true).solve(&b, 1e-12).map(|d| Vector3::new(d[0], d[1], d[2])).unwrap_or_else(|_| Vector3::zeros())
}

fn linear_init(obs: &[(Vector3<f64>, Vector2<f64>)], view: &CameraView) -> Similarity {
    let centroid = obs.iter().map(|(x, _)| x).sum::<Vector3<f64>>() / obs.len() as f64;
    let fallback = || Similarity {
        rotation: Matrix3::identity(),
        scale: 1.0,
        translation: solve_translation(obs, view, &Matrix3::identity(), 1.0),
    };
    if obs.len() < 6 {
        return fallback();
    }
    let mut a = DMatrix::zeros(2 * obs.len(), 12);
    let mut b = DVector::zeros(2 * obs.len());
    for (i, (x, u)) in obs.iter().enumerate() {
        let xc = x - centroid;
        for (k, (c, rhs)) in projection_rows(view, u).into_iter().enumerate() {
            let norm = c.norm().max(1e-12);
            let r = 2 * i + k;
            for p in 0..3 {
                for q in 0..3 {
                    a[(r, 3 * p + q)] = c[p] * xc[q] / norm;
                }
                a[(r, 9 + p)] = c[p] / norm;
            }
            b[r] = rhs / norm;
        }
    }
    let Ok(sol) = a.svd(true, true).solve(&b, 1e-12) else { return fallback() };
    let lin = Matrix3::from_fn(|p, q| sol[3 * p + q]);
    let svd = lin.svd(true, true);
    let (Some(u), Some(vt)) = (svd.u, svd.v_t) else { return fallback() };
    let det = (u * vt).determinant().signum();
    let rotation = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det)) * vt;
    let scale = (svd.singular_values[0] + svd.singular_values[1] + det * svd.singular_values[2]) / 3.0;
    if !(scale > 0.0) || !rotation.iter().all(|v| v.is_finite()) {
        return fallback();
    }
    let translation = solve_translation(obs, view, &rotation, scale);
    let t = Similarity { rotation, scale, translation };
    if cost(obs, view, &t).is_finite() {
        t
    } else {
        fallback()
    }
}

fn axis_rotations() -> Vec<Matrix3<f64>> {
    let mut out = Vec::with_capacity(24);
    for perm in [[0, 1, 2], [1, 2, 0], [2, 0, 1], [0, 2, 1], [2, 1, 0], [1, 0, 2]] {
        for signs in 0..8u8 {
            let m = Matrix3::from_fn(|r, c| if perm[r] == c { if signs >> r & 1 == 1 { -1.0 } else { 1.0 } } else { 0.0 });
            if m.determinant() > 0.0 {
                out.push(m);
            }
        }
    }
    out
}

/// Unit-scale start with the given orientation, translated so the points'
/// centroid sits on the ray through the target centroid at a depth that
/// matches the observed spread.
fn placed_start(obs: &[(Vector3<f64>, Vector2<f64>)], view: &CameraView, rotation: Matrix3<f64>) -> Similarity {
    let n = obs.len() as f64;
    let c3 = obs.iter().map(|(x, _)| x).sum::<Vector3<f64>>() / n;
    let c2 = obs.iter().map(|(_, u)| u).sum::<Vector2<f64>>() / n;
    let spread3 = obs.iter().map(|(x, _)| (x - c3).norm()).sum::<f64>() / n;
    let spread2 = obs.iter().map(|(_, u)| (u - c2).norm()).sum::<f64>() / n;
    let focal = 0.5 * (view.intrinsics.fx + view.intrinsics.fy);
    let depth = focal * spread3 / spread2.max(1e-9);
    let ray = view.back_project(&c2);
    let forward = view.rotation.row(2).transpose();
    let centre = view.center() + ray * (depth / ray.dot(&forward));
    let linear = Similarity { rotation, scale: 1.0, translation: solve_translation(obs, view, &rotation, 1.0) };
    if cost(obs, view, &linear).is_finite() {
        linear
    } else {
        Similarity { rotation, scale: 1.0, translation: centre - rotation * c3 }
    }
}

fn adam_refine(
    obs: &[(Vector3<f64>, Vector2<f64>)],
    view: &CameraView,
    start: &Similarity,
    opts: &AlignOptions,
) -> (Similarity, f64) {
    let mut x = [0.0; 10];
    x[..6].copy_from_slice(&matrix_to_rot6d(&start.rotation));
    x[6..9].copy_from_slice(start.translation.as_slice());
    x[9] = start.scale.ln();
    let decode = |x: &[f64; 10]| -> Option<Similarity> {
        let r: [f64; 6] = x[..6].try_into().expect("six entries");
        Some(Similarity {
            rotation: rot6d_to_matrix(&r).ok()?,
            translation: Vector3::new(x[6], x[7], x[8]),
            scale: x[9].exp(),
        })
    };
    let mut adam = Adam::new(10, 0.9, 0.999, 1e-8);
    let mut best = (start.clone(), cost(obs, view, start));
    let n = obs.len() as f64;
    for it in 0..opts.adam_iterations {
        let Some(t) = decode(&x) else { break };
        let mut g_rot = Matrix3::zeros();
        let mut g_d = Vector3::zeros();
        let mut g_ls = 0.0;
        let mut c = 0.0;
        for (p, u) in obs {
            let y = t.apply(p);
            let (proj, jac) = view.project_with_jacobian(&y);
            if proj.behind {
                c = f64::INFINITY;
                break;
            }
            let r = proj.pixel - u;
            c += r.norm_squared();
            let gy = 2.0 * jac.transpose() * r / n;
            g_rot += t.scale * gy * p.transpose();
            g_d += gy;
            g_ls += gy.dot(&(t.scale * (t.rotation * p)));
        }
        if !c.is_finite() {
            break;
        }
        if c < best.1 {
            best = (t.clone(), c);
        }
        let r6: [f64; 6] = x[..6].try_into().expect("six entries");
        let Ok(g6) = rot6d_vjp(&r6, &g_rot) else { break };
        let mut grad = [0.0; 10];
        grad[..6].copy_from_slice(&g6);
        grad[6..9].copy_from_slice(g_d.as_slice());
        grad[9] = g_ls;
        let lr = decayed_rate(opts.learning_rate, opts.learning_rate * 0.1, it, opts.adam_iterations);
        adam.step(&mut x, &grad, lr, &[1.0; 10]);
    }
    if let Some(t) = decode(&x) {
        let c = cost(obs, view, &t);
        if c < best.1 {
            best = (t, c);
        }
    }
    best
}

fn levenberg_marquardt(
    obs: &[(Vector3<f64>, Vector2<f64>)],
    view: &CameraView,
    mut t: Similarity,
    mut c: f64,
    iterations: usize,
) -> (Similarity, f64) {
    let mut mu = 1e-3;
    for _ in 0..iterations {
        if c < 1e-24 {
            break;
        }
        let mut jtj = SMatrix::<f64, 6, 6>::zeros();
        let mut jtr = SVector::<f64, 6>::zeros();
        for (p, u) in obs {
            let sq = t.scale * (t.rotation * p);
            let (proj, jac) = view.project_with_jacobian(&(sq + t.translation));
            let r = proj.pixel - u;
            let mut dy = SMatrix::<f64, 3, 6>::zeros();
            dy.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&sq)));
            dy.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
            let j: Matrix2x3<f64> = jac;
            let jr = j * dy;
            jtj += jr.transpose() * jr;
            jtr += jr.transpose() * r;
        }
        let mut improved = false;
        for _ in 0..10 {
            let mut a = jtj;
            for i in 0..6 {
                a[(i, i)] += mu * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|ch| ch.solve(&(-jtr))) else {
                mu *= 10.0;
                continue;
            };
            let cand = Similarity {
                rotation: axis_angle_to_matrix(&Vector3::new(step[0], step[1], step[2])) * t.rotation,
                translation: t.translation + Vector3::new(step[3], step[4], step[5]),
                scale: t.scale,
            };
            let cc = cost(obs, view, &cand);
            if cc < c {
                t = cand;
                mu = (mu * 0.3).max(1e-12);
                improved = c - cc > 1e-15 * c;
                c = cc;
                break;
            }
            mu *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (t, c)
}

/// Scaling about the camera center leaves every projection unchanged, so
/// the scale of a reprojection fit is a free gauge. This picks the member of
/// that family with unit scale.
pub fn unit_scale_gauge(t: &Similarity, view: &CameraView) -> Similarity {
    let c = view.center();
    Similarity { rotation: t.rotation, scale: 1.0, translation: c + (t.translation - c) / t.scale }
}
