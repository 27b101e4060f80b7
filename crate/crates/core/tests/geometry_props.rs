mod common;

use mvdd::camera::{dynamic_cube_rig, fixed_cuboid_rig, rodrigues_rotation, Intrinsics, RIG_RADIUS};
use mvdd::dataset::{generate, sample_shape_of, ALL_KINDS};
use mvdd::geometry::{
    back_project, depth_average, depth_filter, fuse_to_pointcloud, is_foreground, project, DepthNormalization, FusionThresholds,
};
use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;

fn intrinsics() -> impl Strategy<Value = Intrinsics> {
    (4usize..64, 4usize..64, 0.5f64..80.0, 0.5f64..80.0).prop_map(|(w, h, fx, fy)| {
        Intrinsics::new(fx, fy, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, w, h).unwrap()
    })
}

fn axis() -> impl Strategy<Value = Vector3<f64>> {
    [-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0]
        .prop_filter("nonzero axis", |a| a.iter().map(|x| x * x).sum::<f64>() > 1e-4)
        .prop_map(Vector3::from)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn projection_round_trips(k in intrinsics(), u in -10.0f64..70.0, v in -10.0f64..70.0, d in 0.01f64..10.0) {
        let p = back_project(u, v, d, &k).unwrap();
        let (pu, pv, pz) = project(&p, &k).unwrap();
        prop_assert!((pu - u).abs() < 1e-6 && (pv - v).abs() < 1e-6 && (pz - d).abs() < 1e-6);
        let (u2, v2, z2) = project(&p, &k).unwrap();
        let q = back_project(u2, v2, z2, &k).unwrap();
        prop_assert!((q - p).norm() < 1e-6);
    }

    #[test]
    fn rodrigues_is_a_rotation(n in axis(), theta in -10.0f64..10.0) {
        let r = rodrigues_rotation(&n, theta).unwrap();
        prop_assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-9);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
        prop_assert!((r * n - n).norm() < 1e-9 * n.norm().max(1.0));
        let back = rodrigues_rotation(&n, -theta).unwrap();
        prop_assert!((r * back - Matrix3::identity()).abs().max() < 1e-9);
    }

    #[test]
    fn dynamic_rig_is_a_cube(dir in axis()) {
        prop_assume!(dir.x.abs() + dir.z.abs() > 1e-3);
        let rig = dynamic_cube_rig(&(dir.normalize() * RIG_RADIUS), Intrinsics::centered(16, 16)).unwrap();
        let centers: Vec<_> = rig.cameras.iter().map(|c| c.pose.center()).collect();
        let mut edges = 0;
        for (i, a) in centers.iter().enumerate() {
            prop_assert!((a.norm() - RIG_RADIUS).abs() < 1e-6);
            for b in &centers[i + 1..] {
                let d = (a - b).norm();
                if (d - 2.0).abs() < 1e-6 {
                    edges += 1;
                } else {
                    prop_assert!(d > 2.5, "pair at distance {}", d);
                }
            }
        }
        prop_assert_eq!(edges, 12);
    }

    #[test]
    fn normalization_is_monotone_and_invertible(a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let n = DepthNormalization::default();
        let (da, db) = (n.near + a * (n.far - n.near), n.near + b * (n.far - n.near));
        if da < db {
            prop_assert!(n.normalize(da) < n.normalize(db));
        }
        prop_assert!((n.denormalize(n.normalize(da)) - da).abs() < 1e-6);
    }

    #[test]
    fn depth_average_keeps_background_and_stays_finite(delta in 0.0f64..0.004) {
        // views 0 and 1 see the same plane; view 1 is offset by 2δ
        let set = common::rendered(2, 8, 0, &["box"]);
        let mut shifted = set.clone();
        let n = set.normalization;
        let px = set.pixels();
        for i in px..2 * px {
            if is_foreground(set.values[i]) {
                shifted.values[i] = n.normalize(n.denormalize(set.values[i]) + 2.0 * delta);
            }
        }
        let out = depth_average(&shifted, &FusionThresholds::default());
        prop_assert!(out.values.iter().all(|v| v.is_finite()));
        for (a, b) in shifted.values.iter().zip(&out.values) {
            if !is_foreground(*a) {
                prop_assert_eq!(a, b);
            }
        }
    }
}

#[test]
fn fixed_rig_matches_angle_table() {
    let table = [
        (30.0, 45.0),
        (-10.0, 225.0),
        (-10.0, 135.0),
        (30.0, 315.0),
        (-10.0, 315.0),
        (30.0, 135.0),
        (-10.0, 45.0),
        (30.0, 225.0),
    ];
    let rig = fixed_cuboid_rig(Intrinsics::centered(16, 16));
    for (cam, (el, az)) in rig.cameras.iter().zip(table) {
        let (el, az) = (f64::to_radians(el), f64::to_radians(az));
        let expected = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * RIG_RADIUS;
        assert!((cam.pose.center() - expected).norm() < 1e-9);
    }
}

/// Every filtered point of a rendered sample lies on the analytic surface.
/// Thin curved shapes can lose all their pixels to the filter at low
/// resolution, so non-emptiness is only required of most samples.
#[test]
fn fused_points_lie_on_the_shape_surface() {
    let rig = common::rig(8, 32);
    let data = generate(24, &rig, 3, &ALL_KINDS).unwrap();
    let mut nonempty = 0;
    for (set, &seed) in data.samples.iter().zip(&data.manifest.seeds) {
        let shape = sample_shape_of(seed, &ALL_KINDS).unwrap();
        let mask = depth_filter(set, &FusionThresholds::default(), 2);
        let cloud = fuse_to_pointcloud(set, &mask).unwrap();
        nonempty += !cloud.is_empty() as usize;
        for p in &cloud.points {
            let d = shape.signed_distance(&Vector3::from(*p));
            assert!(d.abs() < 1e-3, "{shape:?} point {p:?} off surface by {d}");
        }
    }
    assert!(nonempty >= 18, "only {nonempty} of 24 samples kept any point");
}
