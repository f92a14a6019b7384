//! Pinhole cameras, billboards and the patch-plane to image homography.

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points closer to the camera plane than this are treated as behind it.
pub const MIN_DEPTH: f64 = 1e-6;

/// Pinhole intrinsics plus a world-to-camera rigid transform. Camera axes:
/// x right, y down, z forward. Pixel `(row, col)` has its centre at image
/// coordinates `(col + 0.5, row + 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Result of projecting a world point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    Visible { u: f64, v: f64, depth: f64 },
    BehindCamera { depth: f64 },
}

impl Projection {
    pub fn pixel(&self) -> Option<[f64; 2]> {
        match *self {
            Projection::Visible { u, v, .. } => Some([u, v]),
            Projection::BehindCamera { .. } => None,
        }
    }
}

impl CameraPose {
    pub fn new(
        [fx, fy, cx, cy]: [f64; 4],
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Config(format!("focal lengths must be positive, got {fx}, {fy}")));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if ortho > 1e-6 || (rotation.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "rotation is not a proper orthonormal matrix (|RtR - I| = {ortho:e})"
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("non-finite camera translation".into()));
        }
        Ok(CameraPose {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
        })
    }

    /// Camera at world `position` (world y is up), heading `yaw` radians
    /// from world +z towards world +x, tilted by `pitch` (positive looks up).
    pub fn from_heading(intrinsics: [f64; 4], position: Vector3<f64>, yaw: f64, pitch: f64) -> Result<Self> {
        let forward = Vector3::new(yaw.sin() * pitch.cos(), pitch.sin(), yaw.cos() * pitch.cos());
        let world_up = Vector3::new(0.0, 1.0, 0.0);
        let right = forward.cross(&world_up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        CameraPose::new(intrinsics, rotation, -(rotation * position))
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p_world + self.translation
    }

    pub fn project_point(&self, p_world: &Vector3<f64>) -> Projection {
        let p = self.to_camera(p_world);
        if p.z <= MIN_DEPTH {
            return Projection::BehindCamera { depth: p.z };
        }
        Projection::Visible {
            u: self.fx * p.x / p.z + self.cx,
            v: self.fy * p.y / p.z + self.cy,
            depth: p.z,
        }
    }

    /// World-space direction of the ray through image point `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        let d_cam = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        self.rotation.transpose() * d_cam
    }

    /// The same camera rotated by `angle` radians about its optical axis.
    pub fn rolled(&self, angle: f64) -> Self {
        let roll = Rotation3::from_axis_angle(&Vector3::z_axis(), angle).into_inner();
        CameraPose {
            rotation: roll * self.rotation,
            translation: roll * self.translation,
            ..*self
        }
    }
}

/// A flat rectangular billboard. `normal` points towards the viewing side;
/// the face's right axis is `up x normal`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Billboard {
    pub center: [f64; 3],
    pub normal: [f64; 3],
    pub up: [f64; 3],
    pub width: f64,
    pub height: f64,
}

impl Billboard {
    pub fn new(center: [f64; 3], normal: [f64; 3], up: [f64; 3], width: f64, height: f64) -> Result<Self> {
        let n = Vector3::from(normal);
        let u = Vector3::from(up);
        if (n.norm() - 1.0).abs() > 1e-6 || (u.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::Config("billboard normal and up must be unit vectors".into()));
        }
        if n.dot(&u).abs() > 1e-6 {
            return Err(Error::Config("billboard normal and up must be orthogonal".into()));
        }
        if !(width > 0.0 && height > 0.0) {
            return Err(Error::Config(format!("billboard size {width}x{height} must be positive")));
        }
        Ok(Billboard {
            center,
            normal,
            up,
            width,
            height,
        })
    }

    pub fn right(&self) -> Vector3<f64> {
        Vector3::from(self.up).cross(&Vector3::from(self.normal))
    }

    pub fn top_left(&self) -> Vector3<f64> {
        Vector3::from(self.center) - self.right() * (self.width / 2.0)
            + Vector3::from(self.up) * (self.height / 2.0)
    }

    /// Corners in patch order: top-left, top-right, bottom-right, bottom-left.
    pub fn corners(&self) -> [Vector3<f64>; 4] {
        let tl = self.top_left();
        let r = self.right() * self.width;
        let d = -Vector3::from(self.up) * self.height;
        [tl, tl + r, tl + r + d, tl + d]
    }

    /// World point at patch-plane coordinates `(u, v)` for a patch of
    /// `dims = (rows, cols)`; `(0, 0)` is the top-left corner.
    pub fn patch_point(&self, dims: (usize, usize), u: f64, v: f64) -> Vector3<f64> {
        self.top_left() + self.right() * (self.width * u / dims.1 as f64)
            - Vector3::from(self.up) * (self.height * v / dims.0 as f64)
    }
}

/// Projective map from patch-plane coordinates `(u, v)` (columns, rows in
/// texel-edge units) to image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography {
    pub matrix: Matrix3<f64>,
}

impl Homography {
    pub fn new(matrix: Matrix3<f64>) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) || matrix.determinant().abs() < 1e-300 {
            return Err(Error::Config("homography must be finite and invertible".into()));
        }
        Ok(Homography { matrix })
    }

    /// Maps `(x, y)`; `None` when the point lands on or behind the line at infinity.
    pub fn apply(&self, x: f64, y: f64) -> Option<[f64; 2]> {
        let p = self.matrix * Vector3::new(x, y, 1.0);
        if p.z.abs() < 1e-12 {
            return None;
        }
        Some([p.x / p.z, p.y / p.z])
    }

    /// Like [`Homography::apply`], also returning the homogeneous scale, which
    /// is positive for points in front of the camera.
    pub fn apply_with_w(&self, x: f64, y: f64) -> ([f64; 2], f64) {
        let p = self.matrix * Vector3::new(x, y, 1.0);
        ([p.x / p.z, p.y / p.z], p.z)
    }

    pub fn inverse(&self) -> Result<Homography> {
        self.matrix
            .try_inverse()
            .map(|m| Homography { matrix: m })
            .ok_or_else(|| Error::Config("singular homography".into()))
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let m = &self.matrix;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        Homography::new(Matrix3::from_row_slice(&rows.concat()))
    }
}

/// Homography taking patch coordinates of a `dims = (rows, cols)` patch
/// covering the whole billboard face to image coordinates.
pub fn billboard_homography(camera: &CameraPose, bb: &Billboard, dims: (usize, usize)) -> Result<Homography> {
    if dims.0 == 0 || dims.1 == 0 {
        return Err(Error::Dimension("patch dimensions must be positive".into()));
    }
    for (i, c) in bb.corners().iter().enumerate() {
        let depth = camera.to_camera(c).z;
        if depth <= MIN_DEPTH {
            return Err(Error::PlacementInfeasible(format!(
                "billboard corner {i} is behind the camera (depth {depth:.3})"
            )));
        }
    }
    let col_step = camera.rotation * (bb.right() * (bb.width / dims.1 as f64));
    let row_step = camera.rotation * (-Vector3::from(bb.up) * (bb.height / dims.0 as f64));
    let origin = camera.to_camera(&bb.top_left());
    let m = camera.intrinsics() * Matrix3::from_columns(&[col_step, row_step, origin]);
    Homography::new(m)
}
