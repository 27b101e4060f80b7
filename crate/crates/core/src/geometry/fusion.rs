//! Depth fusion: forward-project / reproject consistency, averaging and filtering.

use serde::{Deserialize, Serialize};

use super::{
    back_project_unchecked, bilinear_taps, project_unchecked, DepthMapSet, PointCloud, VisibilityMask,
    BACKGROUND_THRESHOLD,
};
use crate::camera::Camera;
use crate::error::{Error, Result};

/// Pixel (`psi_max`, pixels) and relative depth (`epsilon_rel`) thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionThresholds {
    pub psi_max: f64,
    pub epsilon_rel: f64,
}

impl Default for FusionThresholds {
    fn default() -> Self {
        Self {
            psi_max: 1.0,
            epsilon_rel: 0.01,
        }
    }
}

/// Outcome of the round trip source pixel → neighbor → source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reprojection {
    /// Depth of the reprojected point in the source camera.
    pub depth: f64,
    /// Distance between the original and reprojected source pixels.
    pub pixel_error: f64,
}

/// Forward-projects source pixel `(u, v)` into the neighbor, reads the
/// neighbor depth there and lifts it back into the source camera.
///
/// Depth maps are in world units; `far_limit` marks background. Returns
/// `None` when the source pixel is background, the projection leaves the
/// neighbor frame or touches neighbor background, or a point falls behind
/// a camera.
pub fn fusion_reprojection(
    u: usize,
    v: usize,
    source: &Camera,
    source_depth: &[f64],
    neighbor: &Camera,
    neighbor_depth: &[f64],
    far_limit: f64,
) -> Option<Reprojection> {
    let ks = &source.intrinsics;
    let kn = &neighbor.intrinsics;
    let d = source_depth[v * ks.width + u];
    if !(d > 0.0 && d < far_limit) {
        return None;
    }
    let to_nbr = source.pose.relative_to(&neighbor.pose);
    let p = to_nbr.apply(&back_project_unchecked(u as f64, v as f64, d, ks));
    if !(p.z > 0.0) {
        return None;
    }
    let (m, n, _) = project_unchecked(&p, kn);
    let taps = bilinear_taps(m, n, kn.width, kn.height)?;
    let mut dn = 0.0;
    for &(i, w) in &taps {
        if w > 0.0 {
            let z = neighbor_depth[i];
            if !(z > 0.0 && z < far_limit) {
                return None;
            }
            dn += w * z;
        }
    }
    let to_src = neighbor.pose.relative_to(&source.pose);
    let q = to_src.apply(&back_project_unchecked(m, n, dn, kn));
    if !(q.z > 0.0) {
        return None;
    }
    let (ur, vr, zr) = project_unchecked(&q, ks);
    Some(Reprojection {
        depth: zr,
        pixel_error: ((ur - u as f64).powi(2) + (vr - v as f64).powi(2)).sqrt(),
    })
}

impl FusionThresholds {
    fn accepts(&self, own: f64, r: &Reprojection) -> bool {
        r.pixel_error < self.psi_max && (own - r.depth).abs() / own < self.epsilon_rel
    }
}

/// Whether source pixel `(u, v)` is consistently seen by the neighbor.
pub fn fusion_visibility(
    u: usize,
    v: usize,
    source: &Camera,
    source_depth: &[f64],
    neighbor: &Camera,
    neighbor_depth: &[f64],
    far_limit: f64,
    thresholds: &FusionThresholds,
) -> bool {
    let own = source_depth[v * source.intrinsics.width + u];
    fusion_reprojection(u, v, source, source_depth, neighbor, neighbor_depth, far_limit)
        .is_some_and(|r| thresholds.accepts(own, &r))
}

fn far_limit(set: &DepthMapSet) -> f64 {
    set.normalization.denormalize(BACKGROUND_THRESHOLD)
}

/// Replaces each foreground depth by the mean of itself and the reprojected
/// depths from every other view that passes [`fusion_visibility`].
///
/// All reprojections read from the input snapshot; contributing views are
/// accumulated in ascending index order. Pixels without a visible
/// neighbor are copied unchanged.
pub fn depth_average(set: &DepthMapSet, thresholds: &FusionThresholds) -> DepthMapSet {
    let world = set.world_depths();
    let far = far_limit(set);
    let px = set.pixels();
    let mut out = set.clone();
    for v in 0..set.views {
        let src = &set.rig.cameras[v];
        let src_map = &world[v * px..(v + 1) * px];
        for row in 0..set.height {
            for col in 0..set.width {
                let own = src_map[row * set.width + col];
                let mut sum = own;
                let mut count = 1usize;
                for r in (0..set.views).filter(|&r| r != v) {
                    let nbr_map = &world[r * px..(r + 1) * px];
                    if let Some(rep) = fusion_reprojection(col, row, src, src_map, &set.rig.cameras[r], nbr_map, far) {
                        if thresholds.accepts(own, &rep) {
                            sum += rep.depth;
                            count += 1;
                        }
                    }
                }
                if count > 1 {
                    let mean = sum / count as f64;
                    out.values[v * px + row * set.width + col] = 2.0 * (mean - set.normalization.near)
                        / (set.normalization.far - set.normalization.near)
                        - 1.0;
                }
            }
        }
    }
    out
}

/// Marks pixels that pass [`fusion_visibility`] in at least `min_views` other views.
pub fn depth_filter(set: &DepthMapSet, thresholds: &FusionThresholds, min_views: usize) -> VisibilityMask {
    if min_views == 0 {
        return VisibilityMask::all(set, true);
    }
    let world = set.world_depths();
    let far = far_limit(set);
    let px = set.pixels();
    let mut mask = VisibilityMask::all(set, false);
    for v in 0..set.views {
        let src = &set.rig.cameras[v];
        let src_map = &world[v * px..(v + 1) * px];
        for row in 0..set.height {
            for col in 0..set.width {
                let supporting = (0..set.views)
                    .filter(|&r| r != v)
                    .filter(|&r| {
                        fusion_visibility(
                            col,
                            row,
                            src,
                            src_map,
                            &set.rig.cameras[r],
                            &world[r * px..(r + 1) * px],
                            far,
                            thresholds,
                        )
                    })
                    .count();
                mask.flags[v * px + row * set.width + col] = supporting >= min_views;
            }
        }
    }
    mask
}

/// One world-space point per foreground pixel kept by `mask`.
pub fn fuse_to_pointcloud(set: &DepthMapSet, mask: &VisibilityMask) -> Result<PointCloud> {
    if !mask.matches(set) {
        return Err(Error::ShapeMismatch("mask does not match depth map set".into()));
    }
    let px = set.pixels();
    let mut points = Vec::new();
    for v in 0..set.views {
        let cam = &set.rig.cameras[v];
        for row in 0..set.height {
            for col in 0..set.width {
                let i = v * px + row * set.width + col;
                let value = set.values[i];
                if !mask.flags[i] || !super::is_foreground(value) {
                    continue;
                }
                let d = set.normalization.denormalize(value);
                if d <= 0.0 {
                    continue;
                }
                let p = cam.pose.to_world(&back_project_unchecked(col as f64, row as f64, d, &cam.intrinsics));
                points.push([p.x, p.y, p.z]);
            }
        }
    }
    PointCloud::new(points)
}

/// Mean absolute disagreement (world units) between each kept foreground
/// point's depth in another view and that view's depth map at the
/// projected pixel. Pairs landing outside the frame or on background or
/// masked-out neighbor pixels are skipped. `None` if no pair qualifies.
pub fn cross_view_depth_error(set: &DepthMapSet, mask: Option<&VisibilityMask>) -> Option<f64> {
    let world = set.world_depths();
    let far = far_limit(set);
    let px = set.pixels();
    let kept = |i: usize| mask.is_none_or(|m| m.flags[i]);
    let (mut total, mut count) = (0.0, 0usize);
    for v in 0..set.views {
        let src = &set.rig.cameras[v];
        for row in 0..set.height {
            for col in 0..set.width {
                let i = v * px + row * set.width + col;
                let d = world[i];
                if !kept(i) || !(d > 0.0 && d < far) {
                    continue;
                }
                let p_src = back_project_unchecked(col as f64, row as f64, d, &src.intrinsics);
                for r in (0..set.views).filter(|&r| r != v) {
                    let nbr = &set.rig.cameras[r];
                    let p = src.pose.relative_to(&nbr.pose).apply(&p_src);
                    if !(p.z > 0.0) {
                        continue;
                    }
                    let k = &nbr.intrinsics;
                    let (m, n, z) = project_unchecked(&p, k);
                    let Some(taps) = bilinear_taps(m, n, k.width, k.height) else {
                        continue;
                    };
                    let usable = taps.iter().all(|&(j, w)| {
                        w == 0.0 || (kept(r * px + j) && world[r * px + j] < far && world[r * px + j] > 0.0)
                    });
                    if !usable {
                        continue;
                    }
                    let dn: f64 = taps.iter().map(|&(j, w)| w * world[r * px + j]).sum();
                    total += (z - dn).abs();
                    count += 1;
                }
            }
        }
    }
    (count > 0).then(|| total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{CameraRig, Intrinsics, Pose};
    use crate::geometry::DepthNormalization;
    use approx::assert_abs_diff_eq;
    use nalgebra::{Matrix3, Vector3};

    const FAR: f64 = 1e9;

    /// Two cameras with identical orientation looking down +z, `baseline` apart along x.
    fn stereo_pair(baseline: f64) -> (Camera, Camera) {
        let k = Intrinsics::centered(16, 16);
        let left = Camera {
            intrinsics: k,
            pose: Pose::identity(),
        };
        let right = Camera {
            intrinsics: k,
            pose: Pose::new(Matrix3::identity(), Vector3::new(-baseline, 0.0, 0.0)).unwrap(),
        };
        (left, right)
    }

    #[test]
    fn plane_is_consistent() {
        let (l, r) = stereo_pair(0.2);
        let depth = vec![1.5; 256];
        // disparity is 16*0.2/1.5 ≈ 2.1 px, so columns >= 3 land inside the right view
        assert!(fusion_visibility(8, 8, &l, &depth, &r, &depth, FAR, &FusionThresholds::default()));
        let rep = fusion_reprojection(8, 8, &l, &depth, &r, &depth, FAR).unwrap();
        assert_abs_diff_eq!(rep.depth, 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(rep.pixel_error, 0.0, epsilon = 1e-9);
        // leftmost columns of the left view map outside the right view
        assert!(!fusion_visibility(0, 8, &l, &depth, &r, &depth, FAR, &FusionThresholds::default()));
    }

    #[test]
    fn perturbed_neighbor_depth_rejected() {
        let (l, r) = stereo_pair(0.2);
        let depth = vec![1.5; 256];
        let off = vec![1.65; 256];
        let th = FusionThresholds {
            psi_max: 100.0,
            epsilon_rel: 0.01,
        };
        assert!(!fusion_visibility(8, 8, &l, &depth, &r, &off, FAR, &th));
    }

    #[test]
    fn pixel_threshold_rejects_multi_pixel_miss() {
        // Neighbor reports 2.0 where the plane is at 1.5; with a wide baseline
        // the round trip lands ~2.7 px away while the relative depth rule is
        // disabled, so only the pixel rule can reject.
        let (l, r) = stereo_pair(1.0);
        let depth = vec![1.5; 256];
        let deeper = vec![2.0; 256];
        let th = FusionThresholds {
            psi_max: 1.0,
            epsilon_rel: 1.0,
        };
        let rep = fusion_reprojection(15, 8, &l, &depth, &r, &deeper, FAR).unwrap();
        assert!(rep.pixel_error > 2.0 && rep.pixel_error < 3.0, "pixel error {}", rep.pixel_error);
        assert!(!fusion_visibility(15, 8, &l, &depth, &r, &deeper, FAR, &th));
        assert!(fusion_visibility(15, 8, &l, &depth, &r, &depth, FAR, &th));
    }

    fn stereo_set(left_depth: f64, right_depth: f64) -> DepthMapSet {
        let (l, r) = stereo_pair(0.2);
        let rig = CameraRig {
            cameras: vec![l, r],
            sphere_radius: 1.0,
        };
        let norm = DepthNormalization::new(0.5, 2.5).unwrap();
        let mut values = vec![norm.normalize(left_depth); 256];
        values.extend(vec![norm.normalize(right_depth); 256]);
        DepthMapSet::new(values, rig, norm).unwrap()
    }

    #[test]
    fn average_of_agreeing_views_is_identity() {
        let set = stereo_set(1.5, 1.5);
        let avg = depth_average(&set, &FusionThresholds::default());
        for (a, b) in avg.values.iter().zip(&set.values) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn average_collapses_double_layer_to_midpoint() {
        let delta = 0.005;
        let set = stereo_set(1.5 + delta, 1.5 - delta);
        let avg = depth_average(&set, &FusionThresholds::default());
        let world = avg.world_depths();
        let mut fused = 0;
        for (i, (&d, &orig)) in world.iter().zip(&set.world_depths()).enumerate() {
            if (d - orig).abs() > 1e-12 {
                assert_abs_diff_eq!(d, 1.5, epsilon = 1e-6);
                fused += 1;
            } else {
                // only border columns without a partner stay untouched
                let col = i % 16;
                assert!(!(3..=12).contains(&col), "unfused interior pixel {i}");
            }
        }
        assert!(fused > 300);
    }

    #[test]
    fn average_is_idempotent_on_consistent_sets() {
        let set = stereo_set(1.5, 1.5);
        let once = depth_average(&set, &FusionThresholds::default());
        let twice = depth_average(&once, &FusionThresholds::default());
        for (a, b) in once.values.iter().zip(&twice.values) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn isolated_pixel_unchanged() {
        let set = stereo_set(1.5, 2.4);
        let avg = depth_average(&set, &FusionThresholds::default());
        assert_eq!(avg.values, set.values);
    }

    #[test]
    fn filter_rules() {
        let set = stereo_set(1.5, 1.5);
        let th = FusionThresholds::default();
        assert_eq!(depth_filter(&set, &th, 0).count(), 512);
        let m = depth_filter(&set, &th, 1);
        // left view column 8 has a partner; column 0 does not
        assert!(m.flags[8 * 16 + 8]);
        assert!(!m.flags[8 * 16]);
        assert_eq!(depth_filter(&set, &th, 2).count(), 0);
    }

    #[test]
    fn spurious_pixel_filtered() {
        let mut set = stereo_set(1.5, 1.5);
        let norm = set.normalization;
        set.values[8 * 16 + 8] = norm.normalize(1.0);
        let m = depth_filter(&set, &FusionThresholds::default(), 1);
        assert!(!m.flags[8 * 16 + 8]);
        assert!(m.flags[8 * 16 + 9]);
    }

    #[test]
    fn pointcloud_counts() {
        let set = stereo_set(1.5, 1.5);
        let all = VisibilityMask::all(&set, true);
        assert_eq!(fuse_to_pointcloud(&set, &all).unwrap().len(), 512);
        let bg = stereo_set(2.5, 2.5);
        assert!(fuse_to_pointcloud(&bg, &all).unwrap().is_empty());
        let mut wrong = all.clone();
        wrong.views = 3;
        assert!(fuse_to_pointcloud(&set, &wrong).is_err());
    }

    #[test]
    fn depth_error_of_offset_layers() {
        let consistent = stereo_set(1.5, 1.5);
        assert_abs_diff_eq!(cross_view_depth_error(&consistent, None).unwrap(), 0.0, epsilon = 1e-12);
        let offset = stereo_set(1.6, 1.5);
        assert_abs_diff_eq!(cross_view_depth_error(&offset, None).unwrap(), 0.1, epsilon = 1e-9);
    }
}
