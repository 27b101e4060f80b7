//! Synthetic primitive shapes, analytic depth rendering and dataset files.

mod container;
mod shapes;

pub use container::{read_container, write_container, DepthContainer, Manifest, CONTAINER_VERSION, MAGIC};
pub use shapes::{sample_shape, sample_shape_of, shape_samplers, PrimitiveShape, ShapeSampler, ALL_KINDS};

use std::path::Path;

use nalgebra::Vector3;
use rand::RngCore;

use crate::camera::{Camera, CameraRig};
use crate::error::{invalid, Result};
use crate::geometry::{normalize_depth, DepthMapSet, DepthNormalization};
use crate::rng::{purpose, substream};

/// Renders z-depth in world units; pixels that miss the shape hold `f64::INFINITY`.
pub fn render_depth(shape: &PrimitiveShape, camera: &Camera) -> Vec<f64> {
    let k = &camera.intrinsics;
    let origin = camera.pose.center();
    let to_world = camera.pose.rotation.transpose();
    let mut out = Vec::with_capacity(k.width * k.height);
    for v in 0..k.height {
        for u in 0..k.width {
            // Camera-frame direction with unit z, so the ray parameter is the z-depth.
            let d_cam = Vector3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
            let d = to_world * d_cam;
            out.push(shape.intersect(&origin, &d).unwrap_or(f64::INFINITY));
        }
    }
    out
}

/// Renders every rig view and normalizes the result.
pub fn render_views(shape: &PrimitiveShape, rig: &CameraRig, normalization: DepthNormalization) -> DepthMapSet {
    let raw: Vec<f64> = rig.cameras.iter().flat_map(|c| render_depth(shape, c)).collect();
    DepthMapSet::new(normalize_depth(&raw, &normalization), rig.clone(), normalization)
        .expect("rendered maps match the rig")
}

/// Seed of the shape at `index` in a dataset built from `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    substream(seed, &[purpose::SHAPE, index as u64]).next_u64()
}

/// Renders `count` shapes drawn from `kinds` into a container.
pub fn generate(count: usize, rig: &CameraRig, seed: u64, kinds: &[&str]) -> Result<DepthContainer> {
    if count == 0 {
        return Err(invalid("dataset count must be at least 1"));
    }
    let normalization = DepthNormalization::for_radius(rig.sphere_radius);
    let mut seeds = Vec::with_capacity(count);
    let mut samples = Vec::with_capacity(count);
    let mut shape_kinds = Vec::with_capacity(count);
    for i in 0..count {
        let s = sample_seed(seed, i);
        let shape = sample_shape_of(s, kinds)?;
        samples.push(render_views(&shape, rig, normalization));
        shape_kinds.push(shape.kind().to_string());
        seeds.push(s);
    }
    let mut manifest = Manifest::for_rig(count, rig, normalization);
    manifest.seed = Some(seed);
    manifest.seeds = seeds;
    manifest.kinds = shape_kinds;
    Ok(DepthContainer {
        manifest,
        samples,
        masks: None,
    })
}

/// [`generate`] over all shape kinds, written to `out_path`.
pub fn build_dataset(count: usize, rig: &CameraRig, seed: u64, out_path: &Path) -> Result<Manifest> {
    build_dataset_of(count, rig, seed, &ALL_KINDS, out_path)
}

pub fn build_dataset_of(count: usize, rig: &CameraRig, seed: u64, kinds: &[&str], out_path: &Path) -> Result<Manifest> {
    let container = generate(count, rig, seed, kinds)?;
    let file = std::fs::File::create(out_path)?;
    write_container(&container, std::io::BufWriter::new(file))?;
    Ok(container.manifest)
}
