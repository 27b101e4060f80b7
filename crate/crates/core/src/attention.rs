//! Epipolar line-segment cross-view attention.
//!
//! Each query pixel samples `k` depths on its viewing ray around the
//! current depth estimate, projects them into `R` neighbor views and
//! attends over the `R·k` bilinearly gathered features. Keys whose sample
//! point disagrees with the neighbor's own depth estimate are masked, and
//! every value row carries the sample's normalized depth as an extra
//! channel.
//!
//! Feature maps use the layout `[view][channel][row][column]`.

use serde::{Deserialize, Serialize};

use crate::camera::CameraRig;
use crate::error::{invalid, Error, Result};
use crate::geometry::{
    back_project_unchecked, bilinear_taps, project_unchecked, segment_depths, segment_depths_unchecked, DepthMapSet,
};

/// Logit written into masked slots before the softmax.
pub const MASKED_LOGIT: f64 = -1e4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpipolarConfig {
    /// Samples per segment.
    pub k: usize,
    /// Neighbor views per query.
    pub r: usize,
    /// Segment half width, world units.
    pub delta: f64,
    /// Visibility threshold, world units.
    pub tau: f64,
}

impl Default for EpipolarConfig {
    fn default() -> Self {
        Self {
            k: 10,
            r: 3,
            delta: 0.3,
            tau: 0.15,
        }
    }
}

impl EpipolarConfig {
    pub fn slots(&self) -> usize {
        self.k * self.r
    }
}

/// Which views each view attends to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighborhood {
    pub lists: Vec<Vec<usize>>,
}

impl Neighborhood {
    /// The `r` cameras closest to each camera by center distance. Ties go to the lower index.
    pub fn nearest(rig: &CameraRig, r: usize) -> Result<Self> {
        let n = rig.len();
        if r + 1 > n {
            return Err(invalid(format!("R = {r} neighbors need at least {} views, rig has {n}", r + 1)));
        }
        let centers: Vec<_> = rig.cameras.iter().map(|c| c.pose.center()).collect();
        let lists = (0..n)
            .map(|s| {
                let mut others: Vec<usize> = (0..n).filter(|&o| o != s).collect();
                others.sort_by(|&a, &b| {
                    let da = (centers[a] - centers[s]).norm();
                    let db = (centers[b] - centers[s]).norm();
                    da.total_cmp(&db).then(a.cmp(&b))
                });
                others.truncate(r);
                others
            })
            .collect();
        Ok(Self { lists })
    }

    /// Every view except `target` attends only to `target`; `target` keeps its lists from `base`.
    pub fn only(base: &Neighborhood, target: usize) -> Result<Self> {
        if target >= base.lists.len() {
            return Err(invalid(format!("view {target} out of range for {} views", base.lists.len())));
        }
        let lists = (0..base.lists.len())
            .map(|v| if v == target { base.lists[v].clone() } else { vec![target] })
            .collect();
        Ok(Self { lists })
    }

    /// No cross-view exchange.
    pub fn isolated(views: usize) -> Self {
        Self {
            lists: vec![Vec::new(); views],
        }
    }

    pub fn max_len(&self) -> usize {
        self.lists.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// One key/value position of a query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Slot {
    /// Bilinear taps as `(view·H·W + pixel, weight)`; `None` when the sample projects out of the image.
    pub taps: Option<[(usize, f64); 4]>,
    pub visible: bool,
    /// Normalized depth of the sample along the source ray.
    pub z: f64,
}

const EMPTY_SLOT: Slot = Slot {
    taps: None,
    visible: false,
    z: 0.0,
};

/// Sampling pattern for all `N·H·W` queries of a depth estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct EpipolarPlan {
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub slots_per_query: usize,
    pub slots: Vec<Slot>,
}

impl EpipolarPlan {
    pub fn queries(&self) -> usize {
        self.views * self.height * self.width
    }

    pub fn query_slots(&self, q: usize) -> &[Slot] {
        &self.slots[q * self.slots_per_query..(q + 1) * self.slots_per_query]
    }

    pub fn mask(&self) -> Vec<bool> {
        self.slots.iter().map(|s| s.visible).collect()
    }
}

/// Builds the segment samples, taps and visibility mask for every query pixel
/// of `depth` (whose rig fixes the cameras and resolution).
pub fn plan_epipolar(depth: &DepthMapSet, neighbors: &Neighborhood, k: usize, delta: f64, tau: f64) -> Result<EpipolarPlan> {
    if neighbors.lists.len() != depth.views {
        return Err(Error::ShapeMismatch(format!(
            "neighborhood covers {} views, depth set has {}",
            neighbors.lists.len(),
            depth.views
        )));
    }
    if neighbors.lists.iter().flatten().any(|&n| n >= depth.views) {
        return Err(invalid("neighbor index out of range"));
    }
    segment_depths(1.0, k, delta)?;
    let (h, w) = (depth.height, depth.width);
    let pixels = h * w;
    let per_query = neighbors.max_len() * k;
    let world = depth.world_depths();
    let norm = depth.normalization;
    let rig = &depth.rig;
    let mut slots = Vec::with_capacity(depth.views * pixels * per_query);
    for (s, list) in neighbors.lists.iter().enumerate() {
        let src = &rig.cameras[s];
        let rels: Vec<_> = list.iter().map(|&n| src.pose.relative_to(&rig.cameras[n].pose)).collect();
        for p in 0..pixels {
            let (u, v) = ((p % w) as f64, (p / w) as f64);
            let samples = segment_depths_unchecked(world[s * pixels + p], k, delta);
            for (&n, rel) in list.iter().zip(&rels) {
                let nk = &rig.cameras[n].intrinsics;
                let nmap = &world[n * pixels..(n + 1) * pixels];
                for &rho in &samples {
                    let z = norm.normalize(rho);
                    let x = rel.apply(&back_project_unchecked(u, v, rho, &src.intrinsics));
                    if !(x.z > 0.0) {
                        slots.push(Slot { z, ..EMPTY_SLOT });
                        continue;
                    }
                    let (pu, pv, pz) = project_unchecked(&x, nk);
                    match bilinear_taps(pu, pv, w, h) {
                        Some(mut taps) => {
                            let d: f64 = taps.iter().map(|&(i, wt)| wt * nmap[i]).sum();
                            for t in &mut taps {
                                t.0 += n * pixels;
                            }
                            slots.push(Slot {
                                taps: Some(taps),
                                visible: (pz - d).abs() < tau,
                                z,
                            });
                        }
                        None => slots.push(Slot { z, ..EMPTY_SLOT }),
                    }
                }
            }
            for _ in list.len() * k..per_query {
                slots.push(EMPTY_SLOT);
            }
        }
    }
    Ok(EpipolarPlan {
        views: depth.views,
        height: h,
        width: w,
        slots_per_query: per_query,
        slots,
    })
}

/// Query rows, gathered key/value rows and mask for one attention call.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBatch {
    pub queries: usize,
    pub slots: usize,
    pub features: usize,
    /// `queries × features`.
    pub q: Vec<f64>,
    /// `queries × slots × features`.
    pub k: Vec<f64>,
    /// `queries × slots × (features + 1)`; the last channel is the sample depth.
    pub v: Vec<f64>,
    /// `queries × slots`.
    pub mask: Vec<bool>,
}

impl AttentionBatch {
    pub fn validate(&self) -> Result<()> {
        let (q, s, f) = (self.queries, self.slots, self.features);
        if self.q.len() != q * f || self.k.len() != q * s * f || self.v.len() != q * s * (f + 1) || self.mask.len() != q * s {
            return Err(Error::ShapeMismatch("attention batch buffers disagree with its dimensions".into()));
        }
        Ok(())
    }
}

/// Reads one channel-first feature stack at every query pixel and slot tap.
/// Returns `(rows, gathered)` with layouts `Q×F` and `Q×S×F`.
pub fn gather(plan: &EpipolarPlan, features: &[f64], channels: usize) -> (Vec<f64>, Vec<f64>) {
    let pixels = plan.height * plan.width;
    let queries = plan.queries();
    let mut rows = vec![0.0; queries * channels];
    for q in 0..queries {
        let (view, p) = (q / pixels, q % pixels);
        for c in 0..channels {
            rows[q * channels + c] = features[(view * channels + c) * pixels + p];
        }
    }
    let mut out = vec![0.0; queries * plan.slots_per_query * channels];
    for (i, slot) in plan.slots.iter().enumerate() {
        if let Some(taps) = slot.taps {
            let dst = &mut out[i * channels..(i + 1) * channels];
            for (idx, wt) in taps {
                let (view, p) = (idx / pixels, idx % pixels);
                for (c, d) in dst.iter_mut().enumerate() {
                    *d += wt * features[(view * channels + c) * pixels + p];
                }
            }
        }
    }
    (rows, out)
}

/// Adjoint of the slot part of [`gather`]: accumulates `Q×S×F` gradients into a channel-first stack.
pub fn scatter_slots(plan: &EpipolarPlan, grad: &[f64], channels: usize, stride: usize, out: &mut [f64]) {
    let pixels = plan.height * plan.width;
    for (i, slot) in plan.slots.iter().enumerate() {
        if let Some(taps) = slot.taps {
            let src = &grad[i * stride..i * stride + channels];
            for (idx, wt) in taps {
                let (view, p) = (idx / pixels, idx % pixels);
                for (c, g) in src.iter().enumerate() {
                    out[(view * channels + c) * pixels + p] += wt * g;
                }
            }
        }
    }
}

/// Adjoint of the row part of [`gather`].
pub fn scatter_rows(plan: &EpipolarPlan, grad: &[f64], channels: usize, out: &mut [f64]) {
    let pixels = plan.height * plan.width;
    for q in 0..plan.queries() {
        let (view, p) = (q / pixels, q % pixels);
        for c in 0..channels {
            out[(view * channels + c) * pixels + p] += grad[q * channels + c];
        }
    }
}

/// Assembles the batch from separate query, key and value stacks.
pub fn assemble_batch(plan: &EpipolarPlan, q_maps: &[f64], k_maps: &[f64], v_maps: &[f64], channels: usize) -> AttentionBatch {
    let (q, _) = gather(plan, q_maps, channels);
    let (_, k) = gather(plan, k_maps, channels);
    let (_, v_plain) = gather(plan, v_maps, channels);
    let mut v = Vec::with_capacity(plan.slots.len() * (channels + 1));
    for (i, slot) in plan.slots.iter().enumerate() {
        v.extend_from_slice(&v_plain[i * channels..(i + 1) * channels]);
        v.push(slot.z);
    }
    AttentionBatch {
        queries: plan.queries(),
        slots: plan.slots_per_query,
        features: channels,
        q,
        k,
        v,
        mask: plan.mask(),
    }
}

/// Gathers keys and values from one feature stack around the depth estimate.
pub fn build_epipolar_kv(features: &[f64], channels: usize, depth: &DepthMapSet, config: &EpipolarConfig) -> Result<AttentionBatch> {
    if features.len() != depth.views * depth.pixels() * channels {
        return Err(Error::ShapeMismatch(format!(
            "{} feature values for {} views × {} pixels × {channels} channels",
            features.len(),
            depth.views,
            depth.pixels()
        )));
    }
    let neighbors = Neighborhood::nearest(&depth.rig, config.r)?;
    let plan = plan_epipolar(depth, &neighbors, config.k, config.delta, config.tau)?;
    Ok(assemble_batch(&plan, features, features, features, channels))
}

/// Head-wise softmax weights and the unfolded output of width `F + heads`
/// (each head's `d + 1` channels are its values followed by the depth).
#[derive(Debug, Clone, PartialEq)]
pub struct Attended {
    pub heads: usize,
    /// `queries × heads × slots`; all zero on fully masked rows.
    pub weights: Vec<f64>,
    /// `queries × (features + heads)`.
    pub output: Vec<f64>,
}

fn head_dim(features: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !features.is_multiple_of(heads) {
        return Err(invalid(format!("{features} features do not split into {heads} heads")));
    }
    Ok(features / heads)
}

/// Masked scaled dot-product attention before the output fold.
pub fn attend(batch: &AttentionBatch, heads: usize) -> Result<Attended> {
    batch.validate()?;
    let (nq, ns, f) = (batch.queries, batch.slots, batch.features);
    let d = head_dim(f, heads)?;
    let scale = 1.0 / (d as f64).sqrt();
    let vs = f + 1;
    let mut weights = vec![0.0; nq * heads * ns];
    let mut output = vec![0.0; nq * (f + heads)];
    let mut logits = vec![0.0; ns];
    for q in 0..nq {
        let mask = &batch.mask[q * ns..(q + 1) * ns];
        if !mask.iter().any(|&m| m) {
            continue;
        }
        let qrow = &batch.q[q * f..(q + 1) * f];
        for h in 0..heads {
            let qh = &qrow[h * d..(h + 1) * d];
            for j in 0..ns {
                logits[j] = if mask[j] {
                    let kh = &batch.k[(q * ns + j) * f + h * d..(q * ns + j) * f + (h + 1) * d];
                    qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale
                } else {
                    MASKED_LOGIT
                };
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let wrow = &mut weights[(q * heads + h) * ns..(q * heads + h + 1) * ns];
            let mut total = 0.0;
            for j in 0..ns {
                wrow[j] = (logits[j] - max).exp();
                total += wrow[j];
            }
            let out = &mut output[q * (f + heads) + h * (d + 1)..q * (f + heads) + (h + 1) * (d + 1)];
            for j in 0..ns {
                wrow[j] /= total;
                let vrow = &batch.v[(q * ns + j) * vs..(q * ns + j + 1) * vs];
                for c in 0..d {
                    out[c] += wrow[j] * vrow[h * d + c];
                }
                out[d] += wrow[j] * vrow[f];
            }
        }
    }
    Ok(Attended { heads, weights, output })
}

/// Gradients of [`attend`] with respect to the query, key and value rows.
/// The depth channel of `v` receives no gradient.
pub struct AttendGrads {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    /// Same layout as `AttentionBatch::v` minus the depth channel: `Q×S×F`.
    pub v: Vec<f64>,
}

pub fn attend_backward(batch: &AttentionBatch, attended: &Attended, grad_output: &[f64]) -> AttendGrads {
    let (nq, ns, f, heads) = (batch.queries, batch.slots, batch.features, attended.heads);
    let d = f / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let vs = f + 1;
    let mut gq = vec![0.0; nq * f];
    let mut gk = vec![0.0; nq * ns * f];
    let mut gv = vec![0.0; nq * ns * f];
    let mut ga = vec![0.0; ns];
    for q in 0..nq {
        let mask = &batch.mask[q * ns..(q + 1) * ns];
        if !mask.iter().any(|&m| m) {
            continue;
        }
        for h in 0..heads {
            let go = &grad_output[q * (f + heads) + h * (d + 1)..q * (f + heads) + (h + 1) * (d + 1)];
            let wrow = &attended.weights[(q * heads + h) * ns..(q * heads + h + 1) * ns];
            let mut dot = 0.0;
            for j in 0..ns {
                let vrow = &batch.v[(q * ns + j) * vs..(q * ns + j + 1) * vs];
                let mut g = go[d] * vrow[f];
                for c in 0..d {
                    g += go[c] * vrow[h * d + c];
                    gv[(q * ns + j) * f + h * d + c] += wrow[j] * go[c];
                }
                ga[j] = g;
                dot += wrow[j] * g;
            }
            for j in 0..ns {
                if !mask[j] {
                    continue;
                }
                let gl = wrow[j] * (ga[j] - dot) * scale;
                for c in 0..d {
                    let kc = (q * ns + j) * f + h * d + c;
                    gq[q * f + h * d + c] += gl * batch.k[kc];
                    gk[kc] += gl * batch.q[q * f + h * d + c];
                }
            }
        }
    }
    AttendGrads { q: gq, k: gk, v: gv }
}

/// Applies the bias-free `(F + heads) → F` fold, row-major `F × (F + heads)`.
pub fn fold(output: &[f64], fold_weight: &[f64], features: usize, heads: usize) -> Vec<f64> {
    let wide = features + heads;
    output
        .chunks_exact(wide)
        .flat_map(|row| {
            (0..features).map(move |o| {
                fold_weight[o * wide..(o + 1) * wide]
                    .iter()
                    .zip(row)
                    .map(|(w, x)| w * x)
                    .sum::<f64>()
            })
        })
        .collect()
}

/// Full kernel: attention followed by the fold; fully masked rows give zeros.
pub fn epipolar_attention(batch: &AttentionBatch, heads: usize, fold_weight: &[f64]) -> Result<Vec<f64>> {
    let f = batch.features;
    if fold_weight.len() != f * (f + heads) {
        return Err(Error::ShapeMismatch(format!(
            "fold weight has {} entries, expected {}",
            fold_weight.len(),
            f * (f + heads)
        )));
    }
    let attended = attend(batch, heads)?;
    Ok(fold(&attended.output, fold_weight, f, heads))
}

/// Average-pools a depth estimate by `factor` onto the correspondingly pooled rig.
pub fn pool_depth(depth: &DepthMapSet, factor: usize) -> Result<DepthMapSet> {
    if factor == 1 {
        return Ok(depth.clone());
    }
    if factor == 0 || !depth.height.is_multiple_of(factor) || !depth.width.is_multiple_of(factor) {
        return Err(invalid(format!("cannot pool {}×{} by {factor}", depth.height, depth.width)));
    }
    let (h, w) = (depth.height / factor, depth.width / factor);
    let rig = depth.rig.with_intrinsics(depth.rig.intrinsics().pooled(factor));
    let area = (factor * factor) as f64;
    let mut values = vec![0.0; depth.views * h * w];
    for v in 0..depth.views {
        let src = depth.view(v);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += src[(y * factor + dy) * depth.width + x * factor + dx];
                    }
                }
                values[(v * h + y) * w + x] = acc / area;
            }
        }
    }
    DepthMapSet::new(values, rig, depth.normalization)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{fixed_cuboid_rig, Camera, Intrinsics};
    use crate::dataset::{render_views, PrimitiveShape};
    use crate::geometry::DepthNormalization;
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sphere_set(n: usize, res: usize) -> DepthMapSet {
        let rig = fixed_cuboid_rig(Intrinsics::centered(res, res)).truncated(n).unwrap();
        let shape = PrimitiveShape::Sphere {
            center: [0.0; 3],
            radius: 0.7,
        };
        render_views(&shape, &rig, DepthNormalization::default())
    }

    fn random_batch(rng: &mut ChaCha8Rng, nq: usize, ns: usize, f: usize, masked_frac: f64) -> AttentionBatch {
        let mut r = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let q = r(nq * f);
        let k = r(nq * ns * f);
        let v = r(nq * ns * (f + 1));
        let mask = (0..nq * ns).map(|i| (i * 7919 % 100) as f64 / 100.0 >= masked_frac).collect();
        AttentionBatch {
            queries: nq,
            slots: ns,
            features: f,
            q,
            k,
            v,
            mask,
        }
    }

    #[test]
    fn nearest_neighbors_exclude_self() {
        let rig = fixed_cuboid_rig(Intrinsics::centered(8, 8));
        let nb = Neighborhood::nearest(&rig, 3).unwrap();
        for (s, l) in nb.lists.iter().enumerate() {
            assert_eq!(l.len(), 3);
            assert!(!l.contains(&s));
        }
        assert!(Neighborhood::nearest(&rig.truncated(4).unwrap(), 4).is_err());
        let only = Neighborhood::only(&nb, 2).unwrap();
        assert_eq!(only.lists[0], vec![2]);
        assert_eq!(only.lists[2], nb.lists[2]);
    }

    #[test]
    fn co_located_views_gather_source_features() {
        let k = Intrinsics::centered(6, 6);
        let base = fixed_cuboid_rig(k);
        let cam: Camera = base.cameras[0];
        let rig = CameraRig {
            cameras: vec![cam, cam],
            sphere_radius: base.sphere_radius,
        };
        let depth = DepthMapSet::filled(rig, DepthNormalization::default(), 0.0);
        let feats: Vec<f64> = (0..2 * 3 * 36).map(|i| (i as f64 * 0.37).sin()).collect();
        let cfg = EpipolarConfig {
            k: 3,
            r: 1,
            delta: 0.2,
            tau: 0.15,
        };
        let batch = build_epipolar_kv(&feats, 3, &depth, &cfg).unwrap();
        for q in 0..batch.queries {
            let (view, p) = (q / 36, q % 36);
            let other = 1 - view;
            for j in 0..3 {
                for c in 0..3 {
                    assert_abs_diff_eq!(batch.k[(q * 3 + j) * 3 + c], feats[(other * 3 + c) * 36 + p], epsilon = 1e-6);
                }
            }
        }
        assert!(batch.mask.iter().any(|&m| m));
    }

    #[test]
    fn inconsistent_neighbors_mask_everything() {
        let depth = sphere_set(4, 8);
        let nb = Neighborhood::nearest(&depth.rig, 3).unwrap();
        let plan = plan_epipolar(&depth, &nb, 4, 0.05, 0.15).unwrap();
        assert!(plan.slots.iter().any(|s| s.visible));

        // Neighbors report background everywhere, far behind any point on the sphere.
        let mut blank = depth.clone();
        for view in 1..4 {
            blank.view_mut(view).fill(1.0);
        }
        let plan = plan_epipolar(&blank, &nb, 4, 0.05, 0.15).unwrap();
        for p in 0..64 {
            if depth.values[p] < 1.0 {
                assert!(plan.query_slots(p).iter().all(|s| !s.visible));
            }
        }
    }

    #[test]
    fn single_sample_hits_true_correspondence() {
        let res = 16;
        let rig = fixed_cuboid_rig(Intrinsics::centered(res, res)).truncated(4).unwrap();
        let cube = PrimitiveShape::Box {
            center: [0.1, -0.05, 0.0],
            half_extents: [0.55, 0.4, 0.5],
        };
        let depth = render_views(&cube, &rig, DepthNormalization::default());
        let world = depth.world_depths();
        let pixels = res * res;
        // Two channels per view holding each pixel's own (u, v).
        let mut feats = vec![0.0; 4 * 2 * pixels];
        for v in 0..4 {
            for p in 0..pixels {
                feats[(v * 2) * pixels + p] = (p % res) as f64;
                feats[(v * 2 + 1) * pixels + p] = (p / res) as f64;
            }
        }
        let nb = Neighborhood::nearest(&rig, 3).unwrap();
        let plan = plan_epipolar(&depth, &nb, 1, 0.0, 0.15).unwrap();
        let (_, gathered) = gather(&plan, &feats, 2);
        let mut checked = 0;
        for q in 0..plan.queries() {
            let (s, p) = (q / pixels, q % pixels);
            if world[q] >= depth.normalization.far {
                continue;
            }
            // Surface point from the rendered depth, mapped with homogeneous matrices.
            let k = rig.cameras[s].intrinsics.matrix();
            let ray = k.try_inverse().unwrap() * Vector3::new((p % res) as f64, (p / res) as f64, 1.0);
            let cam_pt = ray * world[q];
            let world_pt = rig.cameras[s].pose.matrix().try_inverse().unwrap() * cam_pt.push(1.0);
            for (j, &n) in nb.lists[s].iter().enumerate() {
                let slot = plan.slots[q * plan.slots_per_query + j];
                if !slot.visible {
                    continue;
                }
                let in_n = rig.cameras[n].pose.matrix() * world_pt;
                let img = rig.cameras[n].intrinsics.matrix() * Vector3::new(in_n.x, in_n.y, in_n.z);
                let (u, v) = (img.x / img.z, img.y / img.z);
                let i = (q * plan.slots_per_query + j) * 2;
                assert!((gathered[i] - u).abs() < 1e-3 && (gathered[i + 1] - v).abs() < 1e-3);
                checked += 1;
            }
        }
        assert!(checked > 100, "{checked}");
    }

    #[test]
    fn single_key_and_symmetric_pair() {
        let batch = AttentionBatch {
            queries: 1,
            slots: 2,
            features: 2,
            q: vec![0.3, -0.2],
            k: vec![1.0, 0.5, 9.0, 9.0],
            v: vec![1.0, 2.0, 0.5, 7.0, 7.0, 7.0],
            mask: vec![true, false],
        };
        let identity = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let out = epipolar_attention(&batch, 1, &identity).unwrap();
        assert_abs_diff_eq!(out[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], 2.0, epsilon = 1e-12);

        let pair = AttentionBatch {
            k: vec![1.0, 1.0, 1.0, 1.0],
            v: vec![1.0, 2.0, 0.5, 3.0, 6.0, -0.5],
            mask: vec![true, true],
            ..batch.clone()
        };
        let fold_w = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let out = epipolar_attention(&pair, 1, &fold_w).unwrap();
        assert_abs_diff_eq!(out[0], 2.0 + 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(out[1], 4.0, epsilon = 1e-6);

        let none = AttentionBatch {
            mask: vec![false, false],
            ..batch
        };
        assert_eq!(epipolar_attention(&none, 1, &fold_w).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn weights_normalize_and_masked_values_do_not_leak() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = random_batch(&mut rng, 20, 12, 4, 0.5);
        let att = attend(&batch, 2).unwrap();
        for q in 0..20 {
            let any = batch.mask[q * 12..(q + 1) * 12].iter().any(|&m| m);
            for h in 0..2 {
                let s: f64 = att.weights[(q * 2 + h) * 12..(q * 2 + h + 1) * 12].iter().sum();
                assert_abs_diff_eq!(s, if any { 1.0 } else { 0.0 }, epsilon = 1e-6);
            }
        }
        let mut perturbed = batch.clone();
        for (i, m) in batch.mask.iter().enumerate() {
            if !m {
                for c in 0..5 {
                    perturbed.v[i * 5 + c] += 100.0;
                }
            }
        }
        let a = attend(&perturbed, 2).unwrap();
        for (x, y) in a.output.iter().zip(&att.output) {
            assert!((x - y).abs() <= 1e-4 * y.abs().max(1.0));
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = random_batch(&mut rng, 3, 5, 4, 0.3);
        let gout: Vec<f64> = (0..3 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |b: &AttentionBatch| -> f64 {
            attend(b, 2).unwrap().output.iter().zip(&gout).map(|(a, g)| a * g).sum()
        };
        let att = attend(&batch, 2).unwrap();
        let grads = attend_backward(&batch, &att, &gout);
        let h = 1e-6;
        for i in 0..batch.q.len() {
            let mut p = batch.clone();
            p.q[i] += h;
            let mut m = batch.clone();
            m.q[i] -= h;
            assert_abs_diff_eq!((loss(&p) - loss(&m)) / (2.0 * h), grads.q[i], epsilon = 1e-7);
        }
        for i in 0..batch.k.len() {
            let mut p = batch.clone();
            p.k[i] += h;
            let mut m = batch.clone();
            m.k[i] -= h;
            assert_abs_diff_eq!((loss(&p) - loss(&m)) / (2.0 * h), grads.k[i], epsilon = 1e-7);
        }
        for i in 0..batch.queries * batch.slots {
            for c in 0..4 {
                let mut p = batch.clone();
                p.v[i * 5 + c] += h;
                let mut m = batch.clone();
                m.v[i * 5 + c] -= h;
                assert_abs_diff_eq!((loss(&p) - loss(&m)) / (2.0 * h), grads.v[i * 4 + c], epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn pooled_depth_matches_pooled_intrinsics() {
        let depth = sphere_set(4, 16);
        let pooled = pool_depth(&depth, 2).unwrap();
        assert_eq!((pooled.height, pooled.width), (8, 8));
        assert_eq!(pooled.rig.intrinsics(), depth.rig.intrinsics().pooled(2));
        assert_abs_diff_eq!(pooled.values[0], depth.values[..2].iter().chain(&depth.values[16..18]).sum::<f64>() / 4.0);
        assert!(pool_depth(&depth, 3).is_err());
    }
}
