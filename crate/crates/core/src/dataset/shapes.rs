//! Analytic primitives inside the unit ball and their ray intersections.

use std::sync::{Arc, OnceLock};

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::registry::Registry;
use crate::rng::{purpose, substream, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PrimitiveShape {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    /// Axis-aligned box.
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
    },
    /// Cylinder along the world z axis; `height` is the full length.
    Cylinder {
        center: [f64; 3],
        radius: f64,
        height: f64,
    },
    Union {
        parts: Vec<PrimitiveShape>,
    },
}

impl PrimitiveShape {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Sphere { .. } => "sphere",
            Self::Box { .. } => "box",
            Self::Cylinder { .. } => "cylinder",
            Self::Union { .. } => "union",
        }
    }

    /// Radius of the smallest origin-centered ball containing the shape.
    pub fn max_extent(&self) -> f64 {
        match self {
            Self::Sphere { center, radius } => norm(center) + radius,
            Self::Box { center, half_extents } => norm(center) + norm(half_extents),
            Self::Cylinder { center, radius, height } => norm(center) + (radius * radius + height * height / 4.0).sqrt(),
            Self::Union { parts } => parts.iter().map(Self::max_extent).fold(0.0, f64::max),
        }
    }

    /// Smallest positive ray parameter `t` with `origin + t·dir` on the surface.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        match self {
            Self::Sphere { center, radius } => ray_sphere(origin, dir, &Vector3::from(*center), *radius),
            Self::Box { center, half_extents } => {
                ray_box(origin, dir, &Vector3::from(*center), &Vector3::from(*half_extents))
            }
            Self::Cylinder { center, radius, height } => {
                ray_cylinder(origin, dir, &Vector3::from(*center), *radius, height / 2.0)
            }
            Self::Union { parts } => parts
                .iter()
                .filter_map(|p| p.intersect(origin, dir))
                .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.min(t)))),
        }
    }

    /// Signed distance (negative inside).
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Self::Sphere { center, radius } => (p - Vector3::from(*center)).norm() - radius,
            Self::Box { center, half_extents } => {
                let q = (p - Vector3::from(*center)).abs() - Vector3::from(*half_extents);
                let outside = q.map(|c| c.max(0.0)).norm();
                outside + q.max().min(0.0)
            }
            Self::Cylinder { center, radius, height } => {
                let d = p - Vector3::from(*center);
                let radial = (d.x * d.x + d.y * d.y).sqrt() - radius;
                let axial = d.z.abs() - height / 2.0;
                let outside = (radial.max(0.0).powi(2) + axial.max(0.0).powi(2)).sqrt();
                outside + radial.max(axial).min(0.0)
            }
            Self::Union { parts } => parts
                .iter()
                .map(|s| s.signed_distance(p))
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// Uniformly shrinks the shape about the origin until it fits in `limit`.
    fn fit_within(self, limit: f64) -> Self {
        let extent = self.max_extent();
        if extent <= limit {
            return self;
        }
        let s = limit / extent;
        self.scaled(s)
    }

    fn scaled(self, s: f64) -> Self {
        let sc = |c: [f64; 3]| [c[0] * s, c[1] * s, c[2] * s];
        match self {
            Self::Sphere { center, radius } => Self::Sphere {
                center: sc(center),
                radius: radius * s,
            },
            Self::Box { center, half_extents } => Self::Box {
                center: sc(center),
                half_extents: sc(half_extents),
            },
            Self::Cylinder { center, radius, height } => Self::Cylinder {
                center: sc(center),
                radius: radius * s,
                height: height * s,
            },
            Self::Union { parts } => Self::Union {
                parts: parts.into_iter().map(|p| p.scaled(s)).collect(),
            },
        }
    }
}

fn norm(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn ray_sphere(o: &Vector3<f64>, d: &Vector3<f64>, c: &Vector3<f64>, r: f64) -> Option<f64> {
    if r <= 0.0 {
        return None;
    }
    let oc = o - c;
    let a = d.dot(d);
    let b = oc.dot(d);
    let cc = oc.dot(&oc) - r * r;
    let disc = b * b - a * cc;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = (-b - sq) / a;
    let t1 = (-b + sq) / a;
    [t0, t1].into_iter().find(|&t| t > 0.0)
}

fn ray_box(o: &Vector3<f64>, d: &Vector3<f64>, c: &Vector3<f64>, h: &Vector3<f64>) -> Option<f64> {
    if h.min() <= 0.0 {
        return None;
    }
    let (mut tmin, mut tmax) = (f64::NEG_INFINITY, f64::INFINITY);
    for i in 0..3 {
        let lo = c[i] - h[i];
        let hi = c[i] + h[i];
        if d[i].abs() < 1e-15 {
            if o[i] < lo || o[i] > hi {
                return None;
            }
            continue;
        }
        let (mut t1, mut t2) = ((lo - o[i]) / d[i], (hi - o[i]) / d[i]);
        if t1 > t2 {
            std::mem::swap(&mut t1, &mut t2);
        }
        tmin = tmin.max(t1);
        tmax = tmax.min(t2);
    }
    if tmin > tmax {
        return None;
    }
    [tmin, tmax].into_iter().find(|&t| t > 0.0)
}

fn ray_cylinder(o: &Vector3<f64>, d: &Vector3<f64>, c: &Vector3<f64>, r: f64, half_h: f64) -> Option<f64> {
    if r <= 0.0 || half_h <= 0.0 {
        return None;
    }
    let oc = o - c;
    let mut best: Option<f64> = None;
    let mut consider = |t: f64| {
        if t > 0.0 && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    };
    // lateral surface
    let a = d.x * d.x + d.y * d.y;
    if a > 1e-15 {
        let b = oc.x * d.x + oc.y * d.y;
        let cc = oc.x * oc.x + oc.y * oc.y - r * r;
        let disc = b * b - a * cc;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for t in [(-b - sq) / a, (-b + sq) / a] {
                let z = oc.z + t * d.z;
                if z.abs() <= half_h {
                    consider(t);
                }
            }
        }
    }
    // caps
    if d.z.abs() > 1e-15 {
        for cap in [-half_h, half_h] {
            let t = (cap - oc.z) / d.z;
            let (x, y) = (oc.x + t * d.x, oc.y + t * d.y);
            if x * x + y * y <= r * r {
                consider(t);
            }
        }
    }
    best
}

/// Draws random primitives of one kind.
pub trait ShapeSampler: Send + Sync {
    fn kind(&self) -> &'static str;
    fn sample(&self, rng: &mut StreamRng) -> PrimitiveShape;
}

fn ball_point(rng: &mut StreamRng, radius: f64) -> [f64; 3] {
    loop {
        let p: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        if norm(&p) <= 1.0 {
            return [p[0] * radius, p[1] * radius, p[2] * radius];
        }
    }
}

fn sphere_at(rng: &mut StreamRng, center: [f64; 3]) -> PrimitiveShape {
    PrimitiveShape::Sphere {
        center,
        radius: rng.gen_range(0.3..=0.8),
    }
}

fn box_at(rng: &mut StreamRng, center: [f64; 3]) -> PrimitiveShape {
    PrimitiveShape::Box {
        center,
        half_extents: [rng.gen_range(0.25..=0.7), rng.gen_range(0.25..=0.7), rng.gen_range(0.25..=0.7)],
    }
}

fn cylinder_at(rng: &mut StreamRng, center: [f64; 3]) -> PrimitiveShape {
    PrimitiveShape::Cylinder {
        center,
        radius: rng.gen_range(0.2..=0.5),
        height: rng.gen_range(0.4..=1.2),
    }
}

struct Spheres;
struct Boxes;
struct Cylinders;
struct Unions;

impl ShapeSampler for Spheres {
    fn kind(&self) -> &'static str {
        "sphere"
    }
    fn sample(&self, rng: &mut StreamRng) -> PrimitiveShape {
        sphere_at(rng, [0.0; 3])
    }
}

impl ShapeSampler for Boxes {
    fn kind(&self) -> &'static str {
        "box"
    }
    fn sample(&self, rng: &mut StreamRng) -> PrimitiveShape {
        box_at(rng, [0.0; 3]).fit_within(1.0)
    }
}

impl ShapeSampler for Cylinders {
    fn kind(&self) -> &'static str {
        "cylinder"
    }
    fn sample(&self, rng: &mut StreamRng) -> PrimitiveShape {
        cylinder_at(rng, [0.0; 3]).fit_within(1.0)
    }
}

impl ShapeSampler for Unions {
    fn kind(&self) -> &'static str {
        "union"
    }
    fn sample(&self, rng: &mut StreamRng) -> PrimitiveShape {
        let parts = (0..2)
            .map(|_| {
                let center = ball_point(rng, 0.3);
                match rng.gen_range(0..3) {
                    0 => sphere_at(rng, center),
                    1 => box_at(rng, center),
                    _ => cylinder_at(rng, center),
                }
            })
            .collect();
        PrimitiveShape::Union { parts }.fit_within(1.0)
    }
}

/// Registry of primitive samplers: `sphere`, `box`, `cylinder`, `union`.
pub fn shape_samplers() -> &'static Registry<dyn ShapeSampler> {
    static REGISTRY: OnceLock<Registry<dyn ShapeSampler>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut reg: Registry<dyn ShapeSampler> = Registry::new("shape kind");
        let all: [Arc<dyn ShapeSampler>; 4] = [Arc::new(Spheres), Arc::new(Boxes), Arc::new(Cylinders), Arc::new(Unions)];
        for s in all {
            reg.register(s.kind(), s);
        }
        reg
    })
}

/// All registered kinds, in the order used by [`sample_shape`].
pub const ALL_KINDS: [&str; 4] = ["sphere", "box", "cylinder", "union"];

/// Deterministic shape for `seed`, with the kind drawn uniformly from `kinds`.
pub fn sample_shape_of(seed: u64, kinds: &[&str]) -> crate::Result<PrimitiveShape> {
    if kinds.is_empty() {
        return Err(crate::error::invalid("at least one shape kind is required"));
    }
    let mut rng = substream(seed, &[purpose::SHAPE]);
    let kind = kinds[rng.gen_range(0..kinds.len())];
    let sampler = shape_samplers().get(kind)?;
    Ok(sampler.sample(&mut rng))
}

/// Deterministic shape for `seed` over every kind.
pub fn sample_shape(seed: u64) -> PrimitiveShape {
    sample_shape_of(seed, &ALL_KINDS).expect("built-in kinds are registered")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn deterministic_and_contained() {
        assert_eq!(sample_shape(11), sample_shape(11));
        for seed in 0..1000 {
            assert!(sample_shape(seed).max_extent() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn kinds_are_varied() {
        let kinds: std::collections::BTreeSet<_> = (0..100).map(|s| sample_shape(s).kind()).collect();
        assert!(kinds.len() >= 3, "{kinds:?}");
    }

    #[test]
    fn restricted_family() {
        for seed in 0..50 {
            let k = sample_shape_of(seed, &["sphere", "box"]).unwrap().kind();
            assert!(k == "sphere" || k == "box");
        }
        assert!(sample_shape_of(0, &["torus"]).is_err());
    }

    #[test]
    fn hits_lie_on_surface() {
        let o = Vector3::new(0.3, -2.0, 0.4);
        for seed in 0..200 {
            let shape = sample_shape(seed);
            let d = (Vector3::new(0.05, 0.0, -0.1) - o).normalize();
            if let Some(t) = shape.intersect(&o, &d) {
                let p = o + t * d;
                assert_abs_diff_eq!(shape.signed_distance(&p), 0.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn cylinder_cap_and_side() {
        let c = PrimitiveShape::Cylinder {
            center: [0.0; 3],
            radius: 0.5,
            height: 1.0,
        };
        let down = c.intersect(&Vector3::new(0.0, 0.0, 3.0), &Vector3::new(0.0, 0.0, -1.0)).unwrap();
        assert_abs_diff_eq!(down, 2.5, epsilon = 1e-12);
        let side = c.intersect(&Vector3::new(3.0, 0.0, 0.0), &Vector3::new(-1.0, 0.0, 0.0)).unwrap();
        assert_abs_diff_eq!(side, 2.5, epsilon = 1e-12);
        assert!(c.intersect(&Vector3::new(3.0, 0.0, 0.8), &Vector3::new(-1.0, 0.0, 0.0)).is_none());
    }

    #[test]
    fn degenerate_sphere_is_empty() {
        let s = PrimitiveShape::Sphere {
            center: [0.0; 3],
            radius: 0.0,
        };
        assert!(s.intersect(&Vector3::new(0.0, 0.0, 2.0), &Vector3::new(0.0, 0.0, -1.0)).is_none());
    }
}
