//! Independent reference code shared by the integration and acceptance tests.
//!
//! Nothing here calls the library's projection, sampling or masking
//! helpers; geometry goes through plain 4×4 homogeneous matrices.
#![allow(dead_code)]

use mvdd::camera::{fixed_cuboid_rig, CameraRig, Intrinsics};
use mvdd::dataset::{render_views, sample_shape_of};
use mvdd::geometry::{DepthMapSet, DepthNormalization};
use nalgebra::{Matrix4, Vector4};

pub fn rig(views: usize, res: usize) -> CameraRig {
    fixed_cuboid_rig(Intrinsics::centered(res, res)).truncated(views).unwrap()
}

pub fn rendered(views: usize, res: usize, seed: u64, kinds: &[&str]) -> DepthMapSet {
    render_views(&sample_shape_of(seed, kinds).unwrap(), &rig(views, res), DepthNormalization::default())
}

fn intrinsic4(k: &Intrinsics) -> Matrix4<f64> {
    Matrix4::new(
        k.fx, 0.0, k.cx, 0.0, //
        0.0, k.fy, k.cy, 0.0, //
        0.0, 0.0, 1.0, 0.0, //
        0.0, 0.0, 0.0, 1.0,
    )
}

/// Bilinear read at a continuous pixel-center position; `None` off the grid.
fn sample_bilinear(map: &[f64], w: usize, h: usize, u: f64, v: f64) -> Option<f64> {
    if u < 0.0 || v < 0.0 || u > (w - 1) as f64 || v > (h - 1) as f64 {
        return None;
    }
    let at = |x: usize, y: usize| map[y.min(h - 1) * w + x.min(w - 1)];
    let (x0, y0) = (u.floor() as usize, v.floor() as usize);
    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
    let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
    let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
    Some(top * (1.0 - fy) + bottom * fy)
}

/// Oracle verdict for one attention slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotVerdict {
    pub visible: bool,
    /// Within roundoff of the image border or the depth threshold, where
    /// either answer is acceptable.
    pub borderline: bool,
}

/// Visibility of every (query, slot) pair by direct enumeration: `k`
/// depths spread over ±δ around the query's depth, lifted through the
/// inverse homogeneous source matrix, mapped into the neighbor and
/// compared against its bilinearly read depth. Layout matches the plan,
/// including padding slots (never visible).
pub fn brute_force_visibility(depth: &DepthMapSet, lists: &[Vec<usize>], k: usize, delta: f64, tau: f64) -> Vec<SlotVerdict> {
    const EDGE: f64 = 1e-7;
    let (h, w) = (depth.height, depth.width);
    let px = h * w;
    let norm = depth.normalization;
    let per_query = lists.iter().map(Vec::len).max().unwrap_or(0) * k;
    let world: Vec<f64> = depth.values.iter().map(|&v| norm.denormalize(v)).collect();
    let mut out = Vec::new();
    for (s, list) in lists.iter().enumerate() {
        let cs = &depth.rig.cameras[s];
        let lift = (intrinsic4(&cs.intrinsics) * cs.pose.matrix()).try_inverse().unwrap();
        for p in 0..px {
            let (u, v) = ((p % w) as f64, (p / w) as f64);
            let rho = world[s * px + p];
            for &n in list {
                let cn = &depth.rig.cameras[n];
                let to_n = intrinsic4(&cn.intrinsics) * cn.pose.matrix();
                for i in 0..k {
                    let d = if k == 1 {
                        rho
                    } else {
                        rho - delta + 2.0 * delta * i as f64 / (k - 1) as f64
                    }
                    .max(1e-3);
                    let world_pt = lift * Vector4::new(u * d, v * d, d, 1.0);
                    let q = to_n * world_pt;
                    if q.z <= 0.0 {
                        out.push(SlotVerdict { visible: false, borderline: false });
                        continue;
                    }
                    let (pu, pv) = (q.x / q.z, q.y / q.z);
                    let near_edge = [pu, pv, (w - 1) as f64 - pu, (h - 1) as f64 - pv]
                        .iter()
                        .any(|e| e.abs() < EDGE);
                    let nmap = &world[n * px..(n + 1) * px];
                    match sample_bilinear(nmap, w, h, pu, pv) {
                        Some(nd) => {
                            let gap = (q.z - nd).abs();
                            out.push(SlotVerdict {
                                visible: gap < tau,
                                borderline: near_edge || (gap - tau).abs() < 1e-9,
                            });
                        }
                        None => out.push(SlotVerdict { visible: false, borderline: near_edge }),
                    }
                }
            }
            for _ in list.len() * k..per_query {
                out.push(SlotVerdict { visible: false, borderline: false });
            }
        }
    }
    out
}

/// Reorders the views of a set (and its rig) so new view `i` is old view `order[i]`.
pub fn permute_views(set: &DepthMapSet, order: &[usize]) -> DepthMapSet {
    let values = order.iter().flat_map(|&o| set.view(o).to_vec()).collect();
    DepthMapSet::new(values, set.rig.permuted(order), set.normalization).unwrap()
}
