//! Pinhole cameras and the two eight-view rig layouts.
//!
//! World frame is right-handed; azimuth is measured in the xy-plane from +x
//! and elevation toward +z. Camera frames use x right, y down, z forward, so
//! pixel `(u, v)` is column `u`, row `v`, with pixel centers at integer
//! coordinates.

use std::sync::{Arc, OnceLock};

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::registry::Registry;

/// Radius of the sphere every rig camera sits on.
pub const RIG_RADIUS: f64 = 1.732_050_807_568_877_2; // sqrt(3)

const ORTHO_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Focal length equal to the image height, principal point at the image center.
    pub fn centered(width: usize, height: usize) -> Self {
        Self {
            fx: height as f64,
            fy: height as f64,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(invalid("focal lengths must be finite and positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(invalid("image size must be nonzero"));
        }
        if self.cx < 0.0 || self.cx >= self.width as f64 || self.cy < 0.0 || self.cy >= self.height as f64 {
            return Err(invalid("principal point must lie inside the image"));
        }
        Ok(())
    }

    /// Intrinsics of the image obtained by `factor`×`factor` average pooling.
    ///
    /// A coarse pixel `c` covers fine pixels `factor*c .. factor*c + factor - 1`,
    /// so its center sits at fine coordinate `factor*c + (factor-1)/2`.
    pub fn pooled(&self, factor: usize) -> Self {
        let s = factor as f64;
        let off = (s - 1.0) / 2.0;
        Self {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: (self.cx - off) / s,
            cy: (self.cy - off) / s,
            width: self.width / factor,
            height: self.height / factor,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }
}

/// World-to-camera rigid transform: `x_cam = rotation * x_world + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if err > ORTHO_TOL || (rotation.determinant() - 1.0).abs() > ORTHO_TOL {
            return Err(invalid("rotation must be orthonormal with determinant +1"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera center in world coordinates, `-Rᵀt`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * world + self.translation
    }

    pub fn to_world(&self, cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (cam - self.translation)
    }

    /// Transform taking camera coordinates of `self` into camera coordinates of `other`.
    pub fn relative_to(&self, other: &Pose) -> Pose {
        let rotation = other.rotation * self.rotation.transpose();
        let translation = other.translation - rotation * self.translation;
        Pose {
            rotation,
            translation,
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
    pub sphere_radius: f64,
}

impl CameraRig {
    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn intrinsics(&self) -> Intrinsics {
        self.cameras[0].intrinsics
    }

    /// The first `n` cameras, for reduced-view toy runs.
    pub fn truncated(&self, n: usize) -> Result<CameraRig> {
        if n == 0 || n > self.cameras.len() {
            return Err(invalid(format!("cannot keep {n} of {} views", self.cameras.len())));
        }
        Ok(CameraRig {
            cameras: self.cameras[..n].to_vec(),
            sphere_radius: self.sphere_radius,
        })
    }

    pub fn with_intrinsics(&self, intrinsics: Intrinsics) -> CameraRig {
        CameraRig {
            cameras: self
                .cameras
                .iter()
                .map(|c| Camera {
                    intrinsics,
                    pose: c.pose,
                })
                .collect(),
            sphere_radius: self.sphere_radius,
        }
    }

    /// Applies a permutation: output view `i` is input view `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> CameraRig {
        CameraRig {
            cameras: order.iter().map(|&i| self.cameras[i]).collect(),
            sphere_radius: self.sphere_radius,
        }
    }

    pub fn to_json(&self) -> RigFile {
        RigFile {
            sphere_radius: self.sphere_radius,
            cameras: self
                .cameras
                .iter()
                .map(|c| CameraFile {
                    intrinsics: c.intrinsics,
                    rotation: c.pose.rotation.transpose().as_slice().try_into().unwrap(),
                    translation: [c.pose.translation.x, c.pose.translation.y, c.pose.translation.z],
                })
                .collect(),
        }
    }

    pub fn from_json(file: &RigFile) -> Result<CameraRig> {
        let cameras = file
            .cameras
            .iter()
            .map(|c| {
                c.intrinsics.validate()?;
                let rotation = Matrix3::from_row_slice(&c.rotation);
                let pose = Pose::new(rotation, Vector3::from_row_slice(&c.translation))?;
                Ok(Camera {
                    intrinsics: c.intrinsics,
                    pose,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if cameras.is_empty() {
            return Err(Error::Format("rig has no cameras".into()));
        }
        Ok(CameraRig {
            cameras,
            sphere_radius: file.sphere_radius,
        })
    }
}

/// JSON form of a rig. Rotations are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigFile {
    pub sphere_radius: f64,
    pub cameras: Vec<CameraFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraFile {
    pub intrinsics: Intrinsics,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

/// Rotation about `axis` by `angle` using the Euler–Rodrigues parameters
/// `a = cos(θ/2)`, `(b, c, d) = -n̂ sin(θ/2)`.
///
/// With this sign convention a positive angle turns clockwise when looking
/// down the axis (right-hand rule reversed).
pub fn rodrigues_rotation(axis: &Vector3<f64>, angle: f64) -> Result<Matrix3<f64>> {
    let norm = axis.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(invalid("rotation axis must have nonzero finite length"));
    }
    let n = axis / norm;
    let (s, a) = (angle / 2.0).sin_cos();
    let b = -n.x * s;
    let c = -n.y * s;
    let d = -n.z * s;
    Ok(Matrix3::new(
        a * a + b * b - c * c - d * d,
        2.0 * (b * c - a * d),
        2.0 * (b * d + a * c),
        2.0 * (b * c + a * d),
        a * a + c * c - b * b - d * d,
        2.0 * (c * d - a * b),
        2.0 * (b * d - a * c),
        2.0 * (c * d + a * b),
        a * a + d * d - b * b - c * c,
    ))
}

/// Result of [`look_at_pose`]; `fallback_used` is set when the primary up
/// hint was parallel to the viewing direction.
#[derive(Debug, Clone, Copy)]
pub struct LookAt {
    pub pose: Pose,
    pub fallback_used: bool,
}

/// Pose at `center` whose optical (+z) axis passes through `target`.
pub fn look_at_pose(center: &Vector3<f64>, target: &Vector3<f64>, up_hint: &Vector3<f64>) -> Result<LookAt> {
    let forward = target - center;
    let dist = forward.norm();
    if !(dist > 1e-12) {
        return Err(invalid("camera center coincides with target"));
    }
    let forward = forward / dist;
    let mut fallback_used = false;
    let mut right = forward.cross(up_hint);
    if right.norm() < 1e-9 {
        fallback_used = true;
        let secondary = if up_hint.y.abs() > 0.9 * up_hint.norm() {
            Vector3::z()
        } else {
            Vector3::y()
        };
        right = forward.cross(&secondary);
    }
    let right = right.normalize();
    let down = forward.cross(&right);
    let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    let translation = -(rotation * center);
    Ok(LookAt {
        pose: Pose {
            rotation,
            translation,
        },
        fallback_used,
    })
}

fn camera_facing_origin(center: Vector3<f64>, intrinsics: Intrinsics) -> Camera {
    let look = look_at_pose(&center, &Vector3::zeros(), &Vector3::z())
        .expect("rig cameras are never at the origin");
    Camera {
        intrinsics,
        pose: look.pose,
    }
}

fn spherical(radius: f64, elevation_deg: f64, azimuth_deg: f64) -> Vector3<f64> {
    let (el, az) = (elevation_deg.to_radians(), azimuth_deg.to_radians());
    radius * Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
}

/// Eight cameras at elevations 30°/−10° and azimuths 45°..315°, ordered A..H.
pub fn fixed_cuboid_rig(intrinsics: Intrinsics) -> CameraRig {
    // (label, elevation, azimuth)
    const TABLE: [(char, f64, f64); 8] = [
        ('A', 30.0, 45.0),
        ('B', -10.0, 225.0),
        ('C', -10.0, 135.0),
        ('D', 30.0, 315.0),
        ('E', -10.0, 315.0),
        ('F', 30.0, 135.0),
        ('G', -10.0, 45.0),
        ('H', 30.0, 225.0),
    ];
    let cameras = TABLE
        .iter()
        .map(|&(_, el, az)| camera_facing_origin(spherical(RIG_RADIUS, el, az), intrinsics))
        .collect();
    CameraRig {
        cameras,
        sphere_radius: RIG_RADIUS,
    }
}

/// Elevation/azimuth (degrees) of the fixed rig's cameras in A..H order.
pub fn fixed_cuboid_angles() -> [(f64, f64); 8] {
    [
        (30.0, 45.0),
        (-10.0, 225.0),
        (-10.0, 135.0),
        (30.0, 315.0),
        (-10.0, 315.0),
        (30.0, 135.0),
        (-10.0, 45.0),
        (30.0, 225.0),
    ]
}

/// Cube rig from a freely placed first camera `A`.
///
/// Plane ABCD is the plane `x/X = z/Z` through the origin; B, C, D follow by
/// rotating A about that plane's normal, and E..H complete the two faces
/// spanned by the diagonals AB and CD.
pub fn dynamic_cube_rig(first_center: &Vector3<f64>, intrinsics: Intrinsics) -> Result<CameraRig> {
    let norm = first_center.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(invalid("first camera center must be nonzero and finite"));
    }
    let a = if (norm - RIG_RADIUS).abs() > 1e-6 {
        log::warn!("first camera center has norm {norm}, rescaling onto the rig sphere");
        first_center * (RIG_RADIUS / norm)
    } else {
        *first_center
    };
    let normal = Vector3::new(a.z, 0.0, -a.x);
    if normal.norm() < 1e-9 * RIG_RADIUS {
        return Err(invalid("first camera lies on the y axis; plane x/X = z/Z is undefined"));
    }
    let wide = 2.0 * 2f64.sqrt().atan();
    let narrow = 2.0 * (1.0 / 2f64.sqrt()).atan();
    let b = rodrigues_rotation(&normal, wide)? * a;
    let c = rodrigues_rotation(&normal, wide + narrow)? * a;
    let d = rodrigues_rotation(&normal, 2.0 * wide + narrow)? * a;
    let ab = b - a;
    let ad = d - a;
    let offset = ab.cross(&ad).normalize() * (ab.norm() / 2.0);
    let e = (a + b) / 2.0 + offset;
    let f = (a + b) / 2.0 - offset;
    let g = (c + d) / 2.0 + offset;
    let h = (c + d) / 2.0 - offset;
    let cameras = [a, b, c, d, e, f, g, h]
        .into_iter()
        .map(|p| camera_facing_origin(p, intrinsics))
        .collect();
    Ok(CameraRig {
        cameras,
        sphere_radius: RIG_RADIUS,
    })
}

/// Per-view row-major 4×4 world-to-camera matrices.
pub fn flatten_extrinsics(rig: &CameraRig) -> Vec<[f64; 16]> {
    rig.cameras
        .iter()
        .map(|c| {
            let m = c.pose.matrix();
            let mut row = [0.0; 16];
            for r in 0..4 {
                for col in 0..4 {
                    row[r * 4 + col] = m[(r, col)];
                }
            }
            row
        })
        .collect()
}

/// Inputs shared by every rig layout.
#[derive(Debug, Clone, Copy)]
pub struct RigParams {
    pub intrinsics: Intrinsics,
    pub first_center: Option<Vector3<f64>>,
}

/// A named way of placing the rig cameras.
pub trait RigLayout: Send + Sync {
    fn name(&self) -> &'static str;
    fn build(&self, params: &RigParams) -> Result<CameraRig>;
}

struct FixedCuboid;

impl RigLayout for FixedCuboid {
    fn name(&self) -> &'static str {
        "fixed"
    }

    fn build(&self, params: &RigParams) -> Result<CameraRig> {
        Ok(fixed_cuboid_rig(params.intrinsics))
    }
}

struct DynamicCube;

impl RigLayout for DynamicCube {
    fn name(&self) -> &'static str {
        "dynamic"
    }

    fn build(&self, params: &RigParams) -> Result<CameraRig> {
        let first = params
            .first_center
            .ok_or_else(|| invalid("dynamic rig needs a first camera center"))?;
        dynamic_cube_rig(&first, params.intrinsics)
    }
}

/// Registry of rig layouts: `fixed` and `dynamic`.
pub fn rig_layouts() -> &'static Registry<dyn RigLayout> {
    static REGISTRY: OnceLock<Registry<dyn RigLayout>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut reg: Registry<dyn RigLayout> = Registry::new("rig layout");
        let layouts: [Arc<dyn RigLayout>; 2] = [Arc::new(FixedCuboid), Arc::new(DynamicCube)];
        for layout in layouts {
            reg.register(layout.name(), layout);
        }
        reg
    })
}
