//! Pinhole projection, ray-segment sampling and cross-view visibility.

mod fusion;
mod pfm;
mod ply;

pub use fusion::{
    cross_view_depth_error, depth_average, depth_filter, fuse_to_pointcloud, fusion_reprojection,
    fusion_visibility, FusionThresholds,
};
pub use pfm::{read_pfm, write_pfm, PfmImage};
pub use ply::{read_ply, write_ply};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, CameraRig, Intrinsics, RIG_RADIUS};
use crate::error::{invalid, Error, Result};

/// Smallest depth a ray sample may take after clamping.
pub const MIN_DEPTH: f64 = 1e-3;

/// Normalized values at or above this are background. Rendered background
/// is exactly +1, but sampled maps only approach it, so the cut sits half a
/// unit-ball radius behind the object center where toy surfaces never reach.
pub const BACKGROUND_THRESHOLD: f64 = 0.5;

pub fn is_foreground(normalized: f64) -> bool {
    normalized < BACKGROUND_THRESHOLD
}

/// Affine map between world depth `[near, far]` and normalized `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthNormalization {
    pub near: f64,
    pub far: f64,
}

impl Default for DepthNormalization {
    fn default() -> Self {
        Self::for_radius(RIG_RADIUS)
    }
}

impl DepthNormalization {
    pub fn new(near: f64, far: f64) -> Result<Self> {
        if !(near < far) || !near.is_finite() || !far.is_finite() {
            return Err(invalid("depth normalization needs near < far"));
        }
        Ok(Self { near, far })
    }

    /// Range covering a unit-ball object seen from a sphere of `radius`.
    pub fn for_radius(radius: f64) -> Self {
        Self {
            near: radius - 1.0,
            far: radius + 1.0,
        }
    }

    /// World depth to normalized units, clipped to `[-1, 1]`.
    pub fn normalize(&self, depth: f64) -> f64 {
        (2.0 * (depth - self.near) / (self.far - self.near) - 1.0).clamp(-1.0, 1.0)
    }

    /// Normalized units to world depth; not clipped.
    pub fn denormalize(&self, value: f64) -> f64 {
        self.near + (value + 1.0) * 0.5 * (self.far - self.near)
    }

    pub fn unit_scale(&self) -> f64 {
        0.5 * (self.far - self.near)
    }
}

/// Normalizes a raw world-depth map; values at or beyond `far` become +1 exactly.
pub fn normalize_depth(raw: &[f64], norm: &DepthNormalization) -> Vec<f64> {
    raw.iter().map(|&d| if d >= norm.far { 1.0 } else { norm.normalize(d) }).collect()
}

pub fn denormalize_depth(values: &[f64], norm: &DepthNormalization) -> Vec<f64> {
    values.iter().map(|&v| norm.denormalize(v)).collect()
}

/// N depth maps in normalized units, tied to the rig that observes them.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMapSet {
    pub values: Vec<f64>,
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub rig: CameraRig,
    pub normalization: DepthNormalization,
}

impl DepthMapSet {
    pub fn new(values: Vec<f64>, rig: CameraRig, normalization: DepthNormalization) -> Result<Self> {
        let k = rig.intrinsics();
        let (views, height, width) = (rig.len(), k.height, k.width);
        if values.len() != views * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {views}×{height}×{width} maps",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("depth values must be finite"));
        }
        Ok(Self {
            values,
            views,
            height,
            width,
            rig,
            normalization,
        })
    }

    pub fn filled(rig: CameraRig, normalization: DepthNormalization, value: f64) -> Self {
        let k = rig.intrinsics();
        let len = rig.len() * k.height * k.width;
        Self::new(vec![value; len], rig, normalization).expect("consistent by construction")
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn view(&self, v: usize) -> &[f64] {
        let p = self.pixels();
        &self.values[v * p..(v + 1) * p]
    }

    pub fn view_mut(&mut self, v: usize) -> &mut [f64] {
        let p = self.pixels();
        &mut self.values[v * p..(v + 1) * p]
    }

    /// All views in world units.
    pub fn world_depths(&self) -> Vec<f64> {
        denormalize_depth(&self.values, &self.normalization)
    }

    pub fn clipped(mut self) -> Self {
        for v in &mut self.values {
            *v = v.clamp(-1.0, 1.0);
        }
        self
    }
}

/// Per-pixel boolean flags with the same layout as a [`DepthMapSet`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisibilityMask {
    pub flags: Vec<bool>,
    pub views: usize,
    pub height: usize,
    pub width: usize,
}

impl VisibilityMask {
    pub fn all(set: &DepthMapSet, value: bool) -> Self {
        Self {
            flags: vec![value; set.values.len()],
            views: set.views,
            height: set.height,
            width: set.width,
        }
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    fn matches(&self, set: &DepthMapSet) -> bool {
        (self.views, self.height, self.width) == (set.views, set.height, set.width)
    }
}

/// World-space points.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(invalid("point coordinates must be finite"));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Lifts pixel `(u, v)` at `depth` into camera coordinates; the result has `z = depth`.
pub fn back_project(u: f64, v: f64, depth: f64, k: &Intrinsics) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(invalid(format!("depth must be positive, got {depth}")));
    }
    Ok(back_project_unchecked(u, v, depth, k))
}

#[inline]
pub(crate) fn back_project_unchecked(u: f64, v: f64, depth: f64, k: &Intrinsics) -> Vector3<f64> {
    Vector3::new((u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth)
}

/// Perspective projection of a camera-space point to continuous pixel
/// coordinates; returns `(u, v, z)`.
pub fn project(point: &Vector3<f64>, k: &Intrinsics) -> Result<(f64, f64, f64)> {
    if !(point.z > 0.0) {
        return Err(Error::BehindCamera(point.z));
    }
    Ok(project_unchecked(point, k))
}

#[inline]
pub(crate) fn project_unchecked(p: &Vector3<f64>, k: &Intrinsics) -> (f64, f64, f64) {
    (k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy, p.z)
}

/// Depths of `k` evenly spaced samples over `[depth - δ, depth + δ]`,
/// each clamped to [`MIN_DEPTH`]. A single sample sits at the center.
pub fn segment_depths(depth: f64, count: usize, half_width: f64) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(invalid("segment sample count must be at least 1"));
    }
    if !(half_width >= 0.0) {
        return Err(invalid("segment half width must be nonnegative"));
    }
    Ok(segment_depths_unchecked(depth, count, half_width))
}

pub(crate) fn segment_depths_unchecked(depth: f64, count: usize, half_width: f64) -> Vec<f64> {
    if count == 1 {
        return vec![depth.max(MIN_DEPTH)];
    }
    let step = 2.0 * half_width / (count - 1) as f64;
    (0..count)
        .map(|i| (depth - half_width + step * i as f64).max(MIN_DEPTH))
        .collect()
}

/// Points along the viewing ray of pixel `(u, v)` around `depth`.
pub fn sample_ray_segment(
    u: f64,
    v: f64,
    depth: f64,
    count: usize,
    half_width: f64,
    k: &Intrinsics,
) -> Result<Vec<Vector3<f64>>> {
    Ok(segment_depths(depth, count, half_width)?
        .into_iter()
        .map(|d| back_project_unchecked(u, v, d, k))
        .collect())
}

/// Bilinear taps `(index, weight)` for continuous pixel `(u, v)`; `None`
/// when the position lies outside the pixel-center grid.
#[inline]
pub(crate) fn bilinear_taps(u: f64, v: f64, width: usize, height: usize) -> Option<[(usize, f64); 4]> {
    const SLACK: f64 = 1e-9;
    let (umax, vmax) = ((width - 1) as f64, (height - 1) as f64);
    if !(u >= -SLACK && v >= -SLACK && u <= umax + SLACK && v <= vmax + SLACK) {
        return None;
    }
    let (u, v) = (u.clamp(0.0, umax), v.clamp(0.0, vmax));
    let u0 = (u.floor() as usize).min(width.saturating_sub(2));
    let v0 = (v.floor() as usize).min(height.saturating_sub(2));
    let (u1, v1) = ((u0 + 1).min(width - 1), (v0 + 1).min(height - 1));
    let fu = u - u0 as f64;
    let fv = v - v0 as f64;
    Some([
        (v0 * width + u0, (1.0 - fu) * (1.0 - fv)),
        (v0 * width + u1, fu * (1.0 - fv)),
        (v1 * width + u0, (1.0 - fu) * fv),
        (v1 * width + u1, fu * fv),
    ])
}

/// Bilinear lookup of a row-major `width`×`height` map.
pub fn bilinear(map: &[f64], width: usize, height: usize, u: f64, v: f64) -> Option<f64> {
    bilinear_taps(u, v, width, height).map(|taps| taps.iter().map(|&(i, w)| w * map[i]).sum())
}

/// Attention visibility test: the source point, seen from the neighbor,
/// must lie within `tau` (world units) of the neighbor's depth at the
/// pixel it projects to. `point_src` is in source camera coordinates and
/// `neighbor_depth` is a world-unit map.
pub fn cross_view_visibility(
    point_src: &Vector3<f64>,
    source: &Camera,
    neighbor: &Camera,
    neighbor_depth: &[f64],
    tau: f64,
) -> bool {
    let rel = source.pose.relative_to(&neighbor.pose);
    let p = rel.apply(point_src);
    if !(p.z > 0.0) {
        return false;
    }
    let k = &neighbor.intrinsics;
    let (u, v, z) = project_unchecked(&p, k);
    match bilinear(neighbor_depth, k.width, k.height, u, v) {
        Some(d) => (z - d).abs() < tau,
        None => false,
    }
}
