//! Pinhole cameras, the camera rig, and the cross-camera transform chain.
//!
//! Extrinsics are stored camera-to-world. World-to-camera is always the rigid
//! inverse `(Rᵀ, -Rᵀt)`.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

const RIGID_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("unknown camera id `{0}`")]
    UnknownCamera(String),
    #[error("duplicate camera id `{0}`")]
    DuplicateCamera(String),
    #[error("invalid intrinsics for `{camera}`: {reason}")]
    Intrinsics { camera: String, reason: String },
    #[error("invalid extrinsics for `{camera}`: {reason}")]
    Extrinsics { camera: String, reason: String },
    #[error("backprojection needs positive depth, got {0}")]
    NonPositiveDepth(f64),
    #[error("rig file: {0}")]
    Io(#[from] std::io::Error),
    #[error("rig file: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraIntrinsics {
    pub k: Matrix3<f64>,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        Self {
            k: Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0),
            width,
            height,
        }
    }

    pub fn fx(&self) -> f64 {
        self.k[(0, 0)]
    }
    pub fn fy(&self) -> f64 {
        self.k[(1, 1)]
    }
    pub fn cx(&self) -> f64 {
        self.k[(0, 2)]
    }
    pub fn cy(&self) -> f64 {
        self.k[(1, 2)]
    }

    fn validate(&self, camera: &str) -> Result<(), GeometryError> {
        let fail = |reason: &str| GeometryError::Intrinsics {
            camera: camera.to_string(),
            reason: reason.to_string(),
        };
        if self.k[(2, 2)] != 1.0 || self.k[(2, 0)] != 0.0 || self.k[(2, 1)] != 0.0 {
            return Err(fail("last row must be [0, 0, 1]"));
        }
        if !(self.fx() > 0.0 && self.fy() > 0.0) {
            return Err(fail("focal lengths must be positive"));
        }
        let (w, h) = (self.width as f64, self.height as f64);
        if !(0.0..w).contains(&self.cx()) || !(0.0..h).contains(&self.cy()) {
            return Err(fail("principal point outside image"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraExtrinsics {
    pub cam_to_world: Matrix4<f64>,
}

impl CameraExtrinsics {
    pub fn from_rotation_translation(rotation: Matrix3<f64>, translation: Vec3) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Self { cam_to_world: m }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.cam_to_world.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vec3 {
        self.cam_to_world.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Rigid inverse of the camera-to-world transform.
    pub fn world_to_cam(&self) -> Matrix4<f64> {
        let rt = self.rotation().transpose();
        let t = -(rt * self.translation());
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        m
    }

    pub fn world_to_camera_point(&self, p: &Vec3) -> Vec3 {
        self.rotation().transpose() * (p - self.translation())
    }

    pub fn camera_to_world_point(&self, p: &Vec3) -> Vec3 {
        self.rotation() * p + self.translation()
    }

    fn validate(&self, camera: &str) -> Result<(), GeometryError> {
        let fail = |reason: String| GeometryError::Extrinsics {
            camera: camera.to_string(),
            reason,
        };
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > RIGID_TOL {
            return Err(fail(format!("rotation not orthonormal (error {err:e})")));
        }
        if (r.determinant() - 1.0).abs() > RIGID_TOL {
            return Err(fail("rotation determinant must be +1".into()));
        }
        let last = self.cam_to_world.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(fail("last row must be [0, 0, 0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub id: String,
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
}

/// A pixel hit from [`project_to_image`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl Camera {
    /// Pinhole projection of a world point, or `None` when behind the camera
    /// or outside `[0, width) x [0, height)`.
    pub fn project(&self, world: &Vec3) -> Option<Projection> {
        project_to_image(&self.intrinsics, &self.extrinsics, world)
    }

    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Result<Vec3, GeometryError> {
        backproject(&self.intrinsics, &self.extrinsics, u, v, depth)
    }

    /// Unit viewing direction of the optical axis in world coordinates.
    pub fn forward_axis(&self) -> Vec3 {
        self.extrinsics.rotation() * Vec3::z()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    cameras: Vec<Camera>,
    adjacency: BTreeSet<(String, String)>,
}

fn ordered_pair(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl CameraRig {
    pub fn new(cameras: Vec<Camera>, adjacency: &[(String, String)]) -> Result<Self, GeometryError> {
        let mut seen = BTreeSet::new();
        for cam in &cameras {
            if !seen.insert(cam.id.clone()) {
                return Err(GeometryError::DuplicateCamera(cam.id.clone()));
            }
            cam.intrinsics.validate(&cam.id)?;
            cam.extrinsics.validate(&cam.id)?;
        }
        let mut adj = BTreeSet::new();
        for (a, b) in adjacency {
            for id in [a, b] {
                if !seen.contains(id) {
                    return Err(GeometryError::UnknownCamera(id.clone()));
                }
            }
            if a != b {
                adj.insert(ordered_pair(a, b));
            }
        }
        Ok(Self {
            cameras,
            adjacency: adj,
        })
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn camera(&self, id: &str) -> Result<&Camera, GeometryError> {
        self.cameras
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| GeometryError::UnknownCamera(id.to_string()))
    }

    /// Position of the camera in rig order; used for one-hot camera encodings.
    pub fn index_of(&self, id: &str) -> Result<usize, GeometryError> {
        self.cameras
            .iter()
            .position(|c| c.id == id)
            .ok_or_else(|| GeometryError::UnknownCamera(id.to_string()))
    }

    pub fn are_adjacent(&self, a: &str, b: &str) -> bool {
        self.adjacency.contains(&ordered_pair(a, b))
    }

    /// Adjacency pairs in canonical (sorted) form.
    pub fn adjacency(&self) -> impl Iterator<Item = &(String, String)> {
        self.adjacency.iter()
    }

    /// Cameras adjacent to `id`, in rig order.
    pub fn neighbors(&self, id: &str) -> Vec<&Camera> {
        self.cameras
            .iter()
            .filter(|c| c.id != id && self.are_adjacent(id, &c.id))
            .collect()
    }

    /// Cameras whose image contains the projection of `world`, in rig order.
    pub fn visible_in(&self, world: &Vec3) -> Vec<(&Camera, Projection)> {
        self.cameras
            .iter()
            .filter_map(|c| c.project(world).map(|p| (c, p)))
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self, GeometryError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, GeometryError> {
        let file: RigFile = serde_json::from_str(text)?;
        Self::try_from(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&RigFile::from(self)).expect("rig serialises")
    }

    /// The default surround rig: six cameras on a ring at 60° spacing, each
    /// with an 85° horizontal field of view (25° overlap with each neighbour),
    /// 1600x900 images, mounted 1.5 m above the ground.
    pub fn default_ring() -> Self {
        Self::ring(6, 85f64.to_radians(), 1600, 900)
    }

    pub fn ring(count: usize, hfov: f64, width: u32, height: u32) -> Self {
        let fx = (width as f64 / 2.0) / (hfov / 2.0).tan();
        let intrinsics = CameraIntrinsics::new(fx, fx, width as f64 / 2.0, height as f64 / 2.0, width, height);
        let mut cameras = Vec::with_capacity(count);
        for i in 0..count {
            let theta = i as f64 * std::f64::consts::TAU / count as f64;
            let (s, c) = theta.sin_cos();
            // camera axes: x right, y down, z forward; world: x forward, y left, z up
            let x_axis = Vec3::new(s, -c, 0.0);
            let y_axis = Vec3::new(0.0, 0.0, -1.0);
            let z_axis = Vec3::new(c, s, 0.0);
            let rotation = Matrix3::from_columns(&[x_axis, y_axis, z_axis]);
            let translation = Vec3::new(0.5 * c, 0.5 * s, 1.5);
            cameras.push(Camera {
                id: format!("cam{i}"),
                intrinsics: intrinsics.clone(),
                extrinsics: CameraExtrinsics::from_rotation_translation(rotation, translation),
            });
        }
        let adjacency: Vec<(String, String)> = (0..count)
            .filter(|_| count > 1)
            .map(|i| (format!("cam{i}"), format!("cam{}", (i + 1) % count)))
            .collect();
        Self::new(cameras, &adjacency).expect("ring rig is valid")
    }
}

/// `M_kj = K_j · world_to_cam(j) · cam_to_world(k)`: maps homogeneous points
/// in camera-`from` coordinates to homogeneous pixels of camera `to`.
pub fn compose_cross_camera_transform(
    rig: &CameraRig,
    from: &str,
    to: &str,
) -> Result<Matrix3x4<f64>, GeometryError> {
    let src = rig.camera(from)?;
    let dst = rig.camera(to)?;
    let chain = dst.extrinsics.world_to_cam() * src.extrinsics.cam_to_world;
    let top: Matrix3x4<f64> = chain.fixed_view::<3, 4>(0, 0).into_owned();
    Ok(dst.intrinsics.k * top)
}

/// Applies a 3x4 projection to a 3D point; returns `(u, v, depth)` without any
/// visibility test.
pub fn apply_projection(m: &Matrix3x4<f64>, p: &Vec3) -> (f64, f64, f64) {
    let h = m * Vector4::new(p.x, p.y, p.z, 1.0);
    (h.x / h.z, h.y / h.z, h.z)
}

pub fn project_to_image(
    intrinsics: &CameraIntrinsics,
    extrinsics: &CameraExtrinsics,
    world: &Vec3,
) -> Option<Projection> {
    let p = extrinsics.world_to_camera_point(world);
    if p.z <= 0.0 {
        return None;
    }
    let u = intrinsics.fx() * p.x / p.z + intrinsics.cx();
    let v = intrinsics.fy() * p.y / p.z + intrinsics.cy();
    let inside = (0.0..intrinsics.width as f64).contains(&u) && (0.0..intrinsics.height as f64).contains(&v);
    inside.then_some(Projection { u, v, depth: p.z })
}

pub fn backproject(
    intrinsics: &CameraIntrinsics,
    extrinsics: &CameraExtrinsics,
    u: f64,
    v: f64,
    depth: f64,
) -> Result<Vec3, GeometryError> {
    if depth <= 0.0 || depth.is_nan() {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    let x = (u - intrinsics.cx()) / intrinsics.fx() * depth;
    let y = (v - intrinsics.cy()) / intrinsics.fy() * depth;
    Ok(extrinsics.camera_to_world_point(&Vec3::new(x, y, depth)))
}

pub fn euclidean_distance_3d(a: &Vec3, b: &Vec3) -> f64 {
    (a - b).norm()
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut w = a.rem_euclid(TAU);
    if w > PI {
        w -= TAU;
    }
    w
}

#[derive(Debug, Serialize, Deserialize)]
struct RigFile {
    cameras: Vec<CameraEntry>,
    adjacency: Vec<(String, String)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CameraEntry {
    id: String,
    width: u32,
    height: u32,
    intrinsics: [[f64; 3]; 3],
    extrinsics_cam_to_world: [[f64; 4]; 4],
}

impl TryFrom<RigFile> for CameraRig {
    type Error = GeometryError;

    fn try_from(file: RigFile) -> Result<Self, Self::Error> {
        let cameras = file
            .cameras
            .into_iter()
            .map(|e| Camera {
                id: e.id,
                intrinsics: CameraIntrinsics {
                    k: Matrix3::from_fn(|r, c| e.intrinsics[r][c]),
                    width: e.width,
                    height: e.height,
                },
                extrinsics: CameraExtrinsics {
                    cam_to_world: Matrix4::from_fn(|r, c| e.extrinsics_cam_to_world[r][c]),
                },
            })
            .collect();
        CameraRig::new(cameras, &file.adjacency)
    }
}

impl From<&CameraRig> for RigFile {
    fn from(rig: &CameraRig) -> Self {
        RigFile {
            cameras: rig
                .cameras
                .iter()
                .map(|c| CameraEntry {
                    id: c.id.clone(),
                    width: c.intrinsics.width,
                    height: c.intrinsics.height,
                    intrinsics: std::array::from_fn(|r| std::array::from_fn(|col| c.intrinsics.k[(r, col)])),
                    extrinsics_cam_to_world: std::array::from_fn(|r| {
                        std::array::from_fn(|col| c.extrinsics.cam_to_world[(r, col)])
                    }),
                })
                .collect(),
            adjacency: rig.adjacency.iter().cloned().collect(),
        }
    }
}

impl Serialize for CameraRig {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        RigFile::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for CameraRig {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let file = RigFile::deserialize(d)?;
        CameraRig::try_from(file).map_err(serde::de::Error::custom)
    }
}
