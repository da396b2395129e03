//! Soft silhouette rasterizer with exact vertex gradients.
//!
//! Each face contributes `σ(s·d)` at a pixel, where `d` is the signed distance
//! (grid pixels, positive inside) from the pixel center to the projected
//! triangle. Faces are merged with a probabilistic OR, `S = 1 − Π(1 − σ)`.

use nalgebra::{Matrix2x3, Vector2, Vector3};
use thiserror::Error;

use crate::camera::CameraView;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("mesh has no faces")]
    EmptyMesh,
    #[error("sharpness must be positive and finite, got {0}")]
    BadSharpness(f64),
    #[error("render resolution must be nonzero")]
    EmptyResolution,
    #[error("render window must have positive size")]
    BadWindow,
    #[error("resolution mismatch: {0}x{1} vs {2}x{3}")]
    ResolutionMismatch(usize, usize, usize, usize),
    #[error("face {0} references a missing vertex")]
    BadFace(usize),
}

/// Per-pixel coverage in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Silhouette {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Silhouette {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, values: vec![0.0; height * width] }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, values: vec![value; height * width] }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Threshold at `level`; returns a row-major boolean mask.
    pub fn binarize(&self, level: f64) -> Vec<bool> {
        self.values.iter().map(|&v| v >= level).collect()
    }

    fn check_same_size(&self, other: &Silhouette) -> Result<(), RenderError> {
        if self.height != other.height || self.width != other.width {
            return Err(RenderError::ResolutionMismatch(self.height, self.width, other.height, other.width));
        }
        Ok(())
    }
}

/// Image-space rectangle (pixels) that the render grid covers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderWindow {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl RenderWindow {
    pub fn full_image(cam: &CameraView) -> Self {
        Self { x: 0.0, y: 0.0, width: cam.width as f64, height: cam.height as f64 }
    }

    /// Square window centered on `bbox` (x, y, w, h) with `pad` relative margin.
    pub fn around_bbox(bbox: [f64; 4], pad: f64) -> Self {
        let side = bbox[2].max(bbox[3]) * (1.0 + 2.0 * pad);
        let cx = bbox[0] + bbox[2] / 2.0;
        let cy = bbox[1] + bbox[3] / 2.0;
        Self { x: cx - side / 2.0, y: cy - side / 2.0, width: side, height: side }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    pub height: usize,
    pub width: usize,
    pub sharpness: f64,
    /// Faces are ignored at pixels where `s·d < −cutoff`.
    pub cutoff: f64,
}

impl RenderSettings {
    pub fn new(height: usize, width: usize, sharpness: f64) -> Self {
        Self { height, width, sharpness, cutoff: 30.0 }
    }
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self { height: 128, width: 128, sharpness: 3.0, cutoff: 12.0 }
    }
}

struct FaceGeom {
    index: usize,
    p: [Vector2<f64>; 3],
    /// Inward unit normals and offsets of the edge lines: `n·q + c` is the
    /// signed distance to the line of edge `e = (p[e], p[e+1])`.
    n: [Vector2<f64>; 3],
    c: [f64; 3],
    rows: (usize, usize),
    cols: (usize, usize),
}

impl FaceGeom {
    fn new(index: usize, p: [Vector2<f64>; 3], orient: f64, rows: (usize, usize), cols: (usize, usize)) -> Self {
        let mut n = [Vector2::zeros(); 3];
        let mut c = [0.0; 3];
        for e in 0..3 {
            let d = p[(e + 1) % 3] - p[e];
            let ne = Vector2::new(-d.y, d.x) * (orient / d.norm());
            n[e] = ne;
            c[e] = -ne.dot(&p[e]);
        }
        Self { index, p, n, c, rows, cols }
    }

    /// Columns of row `r` whose centers lie within `margin` of every edge line.
    #[inline]
    fn span(&self, r: usize, margin: f64) -> (usize, usize) {
        let y = r as f64 + 0.5;
        let (mut lo, mut hi) = (self.cols.0 as f64 + 0.5, self.cols.1 as f64 - 0.5);
        for e in 0..3 {
            let a = self.n[e].x;
            let b = self.n[e].y * y + self.c[e] + margin;
            if a > 1e-12 {
                lo = lo.max(-b / a);
            } else if a < -1e-12 {
                hi = hi.min(-b / a);
            } else if b < 0.0 {
                return (0, 0);
            }
        }
        if lo > hi {
            return (0, 0);
        }
        ((lo - 0.5).ceil() as usize, (hi - 0.5).floor() as usize + 1)
    }

    #[inline]
    fn line_distances(&self, q: &Vector2<f64>) -> [f64; 3] {
        [0, 1, 2].map(|e| self.n[e].x * q.x + self.n[e].y * q.y + self.c[e])
    }

    /// Signed distance only (positive inside).
    #[inline]
    fn distance(&self, q: &Vector2<f64>) -> f64 {
        let l = self.line_distances(q);
        if l[0] >= 0.0 && l[1] >= 0.0 && l[2] >= 0.0 {
            return l[0].min(l[1]).min(l[2]);
        }
        // For a convex polygon, the nearest boundary point of an outside
        // query lies on an edge whose line separates it.
        let mut best = f64::INFINITY;
        for e in 0..3 {
            if l[e] < 0.0 {
                best = best.min(segment_distance2(q, &self.p[e], &self.p[(e + 1) % 3]));
            }
        }
        -best.sqrt()
    }

    /// Signed distance and its gradients with respect to the three corners.
    #[inline]
    fn distance_with_grad(&self, q: &Vector2<f64>) -> (f64, [Vector2<f64>; 3]) {
        let l = self.line_distances(q);
        let inside = l[0] >= 0.0 && l[1] >= 0.0 && l[2] >= 0.0;
        let mut best = f64::INFINITY;
        let mut grads = [Vector2::zeros(); 3];
        for e in 0..3 {
            if inside || l[e] < 0.0 {
                let (a, b) = (&self.p[e], &self.p[(e + 1) % 3]);
                let d = if inside { l[e] } else { segment_distance2(q, a, b).sqrt() };
                if d < best {
                    best = d;
                    let (_, ga, gb) = segment_distance(q, a, b);
                    grads = [Vector2::zeros(); 3];
                    grads[e] = ga;
                    grads[(e + 1) % 3] = gb;
                }
            }
        }
        if inside {
            (best, grads)
        } else {
            (-best, [-grads[0], -grads[1], -grads[2]])
        }
    }
}

/// Forward render plus the intermediates needed by [`SoftRender::backward`].
pub struct SoftRender {
    pub silhouette: Silhouette,
    /// `Π(1 − σ)` per pixel.
    empty: Vec<f64>,
    faces: Vec<FaceGeom>,
    jac: Vec<Option<Matrix2x3<f64>>>,
    settings: RenderSettings,
    face_list: Vec<[usize; 3]>,
}

/// Products below this are flushed to zero; such pixels carry no gradient.
const SATURATED: f64 = 1e-30;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Distance from `q` to segment `ab` and its gradients with respect to `a`, `b`.
#[inline]
fn segment_distance(q: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> (f64, Vector2<f64>, Vector2<f64>) {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = ((q - a).dot(&ab) / len2).clamp(0.0, 1.0);
    let diff = q - (a + ab * t);
    let dist = diff.norm();
    if dist == 0.0 {
        return (0.0, Vector2::zeros(), Vector2::zeros());
    }
    let u = diff / dist;
    (dist, -u * (1.0 - t), -u * t)
}

#[inline]
fn segment_distance2(q: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let ab = b - a;
    let t = ((q - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    (q - (a + ab * t)).norm_squared()
}

#[inline]
fn cross2(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Pixel center of grid cell (row, col) in grid coordinates.
#[inline]
fn pixel_center(row: usize, col: usize) -> Vector2<f64> {
    Vector2::new(col as f64 + 0.5, row as f64 + 0.5)
}

impl SoftRender {
    pub fn new(
        vertices: &[Vector3<f64>],
        faces: &[[usize; 3]],
        cam: &CameraView,
        window: &RenderWindow,
        settings: &RenderSettings,
    ) -> Result<Self, RenderError> {
        if faces.is_empty() || vertices.is_empty() {
            return Err(RenderError::EmptyMesh);
        }
        if !(settings.sharpness > 0.0 && settings.sharpness.is_finite()) {
            return Err(RenderError::BadSharpness(settings.sharpness));
        }
        if settings.height == 0 || settings.width == 0 {
            return Err(RenderError::EmptyResolution);
        }
        if !(window.width > 0.0 && window.height > 0.0) {
            return Err(RenderError::BadWindow);
        }
        let (h, w) = (settings.height, settings.width);
        let sx = w as f64 / window.width;
        let sy = h as f64 / window.height;

        let mut grid = vec![Vector2::zeros(); vertices.len()];
        let mut jac = vec![None; vertices.len()];
        for (i, v) in vertices.iter().enumerate() {
            let (p, j) = cam.project_with_jacobian(v);
            if !p.behind {
                grid[i] = Vector2::new((p.pixel.x - window.x) * sx, (p.pixel.y - window.y) * sy);
                let mut j = j;
                j.row_mut(0).scale_mut(sx);
                j.row_mut(1).scale_mut(sy);
                jac[i] = Some(j);
            }
        }

        let s = settings.sharpness;
        let margin = settings.cutoff / s;
        let mut geoms = Vec::new();
        for (fi, f) in faces.iter().enumerate() {
            if f.iter().any(|&v| v >= vertices.len()) {
                return Err(RenderError::BadFace(fi));
            }
            if f.iter().any(|&v| jac[v].is_none()) {
                continue;
            }
            let p = [grid[f[0]], grid[f[1]], grid[f[2]]];
            let area = cross2(&(p[1] - p[0]), &(p[2] - p[0]));
            let scale2 = (p[1] - p[0]).norm_squared().max((p[2] - p[0]).norm_squared()).max((p[2] - p[1]).norm_squared());
            if !(area.abs() > 1e-12 * scale2) || !area.is_finite() {
                continue;
            }
            let lo_x = p.iter().map(|q| q.x).fold(f64::INFINITY, f64::min) - margin;
            let hi_x = p.iter().map(|q| q.x).fold(f64::NEG_INFINITY, f64::max) + margin;
            let lo_y = p.iter().map(|q| q.y).fold(f64::INFINITY, f64::min) - margin;
            let hi_y = p.iter().map(|q| q.y).fold(f64::NEG_INFINITY, f64::max) + margin;
            // pixel centers c + 0.5 inside [lo, hi]
            let c0 = (lo_x - 0.5).ceil().max(0.0);
            let c1 = (hi_x - 0.5).floor().min(w as f64 - 1.0);
            let r0 = (lo_y - 0.5).ceil().max(0.0);
            let r1 = (hi_y - 0.5).floor().min(h as f64 - 1.0);
            if c0 > c1 || r0 > r1 {
                continue;
            }
            geoms.push(FaceGeom::new(fi, p, area.signum(), (r0 as usize, r1 as usize + 1), (c0 as usize, c1 as usize + 1)));
        }

        // coverage is shifted and rescaled to reach zero exactly at the cutoff
        let floor = 1.0 - sigmoid(-settings.cutoff);
        let mut empty = vec![1.0; h * w];
        for f in &geoms {
            for r in f.rows.0..f.rows.1 {
                let (c0, c1) = f.span(r, margin);
                for c in c0..c1 {
                    let k = r * w + c;
                    if empty[k] == 0.0 {
                        continue;
                    }
                    let x = s * f.distance(&pixel_center(r, c));
                    if x >= -settings.cutoff {
                        let e = (empty[k] / (1.0 + x.exp()) / floor).min(empty[k]);
                        empty[k] = if e < SATURATED { 0.0 } else { e };
                    }
                }
            }
        }
        let values = empty.iter().map(|&e| 1.0 - e).collect();
        Ok(Self {
            silhouette: Silhouette { height: h, width: w, values },
            empty,
            faces: geoms,
            jac,
            settings: *settings,
            face_list: faces.to_vec(),
        })
    }

    /// Maps `∂L/∂S` (per pixel) to `∂L/∂vertex` for every mesh vertex.
    pub fn backward(&self, grad_pixels: &[f64]) -> Vec<Vector3<f64>> {
        let w = self.settings.width;
        let s = self.settings.sharpness;
        let mut grad_grid: Vec<Vector2<f64>> = vec![Vector2::zeros(); self.jac.len()];
        let margin = self.settings.cutoff / s;
        for f in &self.faces {
            let mut acc = [Vector2::zeros(); 3];
            for r in f.rows.0..f.rows.1 {
                let (c0, c1) = f.span(r, margin);
                for c in c0..c1 {
                    let k = r * w + c;
                    let g = grad_pixels[k];
                    let open = self.empty[k];
                    if g == 0.0 || open == 0.0 {
                        continue;
                    }
                    let (d, dd) = f.distance_with_grad(&pixel_center(r, c));
                    let x = s * d;
                    if x < -self.settings.cutoff {
                        continue;
                    }
                    // ∂S/∂x_f = Π_{g≠f}(1 − τ_g)·σ_f(1 − σ_f)/(1 − σ(−cutoff)) = Π·σ_f
                    let coef = g * open * sigmoid(x) * s;
                    for i in 0..3 {
                        acc[i] += dd[i] * coef;
                    }
                }
            }
            let vid = self.face_list[f.index];
            for i in 0..3 {
                grad_grid[vid[i]] += acc[i];
            }
        }
        grad_grid
            .iter()
            .zip(&self.jac)
            .map(|(g, j)| match j {
                Some(j) => j.transpose() * g,
                None => Vector3::zeros(),
            })
            .collect()
    }
}

pub fn render_silhouette(
    vertices: &[Vector3<f64>],
    faces: &[[usize; 3]],
    cam: &CameraView,
    window: &RenderWindow,
    settings: &RenderSettings,
) -> Result<Silhouette, RenderError> {
    Ok(SoftRender::new(vertices, faces, cam, window, settings)?.silhouette)
}

/// Binary image, row-major, one byte per pixel (0 = background).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn from_silhouette(s: &Silhouette, level: f64) -> Self {
        Self { height: s.height, width: s.width, data: s.values.iter().map(|&v| if v >= level { 255 } else { 0 }).collect() }
    }

    pub fn to_silhouette(&self) -> Silhouette {
        Silhouette {
            height: self.height,
            width: self.width,
            values: self.data.iter().map(|&v| if v != 0 { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

/// Exact point-in-any-triangle rasterization at pixel centers of the render
/// grid. Faces with a vertex behind the camera and zero-area faces are skipped.
pub fn rasterize_hard(
    vertices: &[Vector3<f64>],
    faces: &[[usize; 3]],
    cam: &CameraView,
    window: &RenderWindow,
    height: usize,
    width: usize,
) -> BinaryMask {
    let sx = width as f64 / window.width;
    let sy = height as f64 / window.height;
    let grid: Vec<Option<Vector2<f64>>> = vertices
        .iter()
        .map(|v| {
            let p = cam.project_point(v);
            (!p.behind).then(|| Vector2::new((p.pixel.x - window.x) * sx, (p.pixel.y - window.y) * sy))
        })
        .collect();
    let mut mask = BinaryMask::empty(height, width);
    for f in faces {
        let (Some(a), Some(b), Some(c)) = (grid[f[0]], grid[f[1]], grid[f[2]]) else { continue };
        let area = cross2(&(b - a), &(c - a));
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        let o = area.signum();
        let lo_x = a.x.min(b.x).min(c.x);
        let hi_x = a.x.max(b.x).max(c.x);
        let lo_y = a.y.min(b.y).min(c.y);
        let hi_y = a.y.max(b.y).max(c.y);
        let c0 = (lo_x - 0.5).ceil().max(0.0);
        let c1 = (hi_x - 0.5).floor().min(width as f64 - 1.0);
        let r0 = (lo_y - 0.5).ceil().max(0.0);
        let r1 = (hi_y - 0.5).floor().min(height as f64 - 1.0);
        if c0 > c1 || r0 > r1 {
            continue;
        }
        for r in r0 as usize..=r1 as usize {
            for col in c0 as usize..=c1 as usize {
                let q = pixel_center(r, col);
                if cross2(&(b - a), &(q - a)) * o >= 0.0 && cross2(&(c - b), &(q - b)) * o >= 0.0 && cross2(&(a - c), &(q - c)) * o >= 0.0 {
                    mask.data[r * width + col] = 255;
                }
            }
        }
    }
    mask
}

/// `‖R − T‖₂ / √(H·W)`.
pub fn mask_l2(rendered: &Silhouette, target: &Silhouette) -> Result<f64, RenderError> {
    rendered.check_same_size(target)?;
    let ss: f64 = rendered.values.iter().zip(&target.values).map(|(r, t)| (r - t) * (r - t)).sum();
    Ok((ss / (rendered.values.len() as f64)).sqrt())
}

/// [`mask_l2`] and its gradient with respect to the rendered values.
/// The subgradient at a perfect match is zero.
pub fn mask_l2_with_grad(rendered: &Silhouette, target: &Silhouette) -> Result<(f64, Vec<f64>), RenderError> {
    let value = mask_l2(rendered, target)?;
    let n = rendered.values.len() as f64;
    let grad = if value > 0.0 {
        let k = 1.0 / (value * n);
        rendered.values.iter().zip(&target.values).map(|(r, t)| (r - t) * k).collect()
    } else {
        vec![0.0; rendered.values.len()]
    };
    Ok((value, grad))
}

/// Overlap lengths of grid cells `[lo + i·step, lo + (i+1)·step)` with integer pixels.
fn axis_overlaps(lo: f64, step: f64, cells: usize, pixels: usize) -> Vec<Vec<(usize, f64)>> {
    (0..cells)
        .map(|i| {
            let a = lo + i as f64 * step;
            let b = a + step;
            let first = a.floor().max(0.0) as i64;
            let last = (b.ceil() as i64).min(pixels as i64);
            (first..last)
                .filter_map(|p| {
                    let o = (b.min(p as f64 + 1.0) - a.max(p as f64)).max(0.0);
                    (o > 0.0).then_some((p as usize, o / step))
                })
                .collect()
        })
        .collect()
}

/// Area-averaged foreground fraction of a binary image (nonzero = foreground)
/// over the render grid. Image area outside the frame counts as background.
pub fn resample_mask(
    mask: &[u8],
    image_width: usize,
    image_height: usize,
    window: &RenderWindow,
    height: usize,
    width: usize,
) -> Silhouette {
    let cols = axis_overlaps(window.x, window.width / width as f64, width, image_width);
    let rows = axis_overlaps(window.y, window.height / height as f64, height, image_height);
    let mut out = Silhouette::zeros(height, width);
    for (r, ry) in rows.iter().enumerate() {
        for (c, cx) in cols.iter().enumerate() {
            let mut acc = 0.0;
            for &(py, wy) in ry {
                let line = &mask[py * image_width..(py + 1) * image_width];
                for &(px, wx) in cx {
                    if line[px] != 0 {
                        acc += wy * wx;
                    }
                }
            }
            out.values[r * width + c] = acc.clamp(0.0, 1.0);
        }
    }
    out
}
