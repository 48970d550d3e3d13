//! Points, the pinhole camera, the per-sequence absolute frame and the
//! projections into the two views.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum camera-frame depth of a visible point, meters.
pub const DEPTH_EPSILON: f64 = 0.1;
/// Height of the default front camera above the ground, meters.
pub const DEFAULT_CAMERA_HEIGHT: f64 = 1.6;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn ground(self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    pub fn distance(self, other: Point3) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2) + (self.z - other.z).powi(2)).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewId {
    Bev,
    Fpv,
}

impl ViewId {
    pub const ALL: [ViewId; 2] = [ViewId::Bev, ViewId::Fpv];

    pub fn as_str(self) -> &'static str {
        match self {
            ViewId::Bev => "bev",
            ViewId::Fpv => "fpv",
        }
    }

    pub fn index(self) -> usize {
        match self {
            ViewId::Bev => 0,
            ViewId::Fpv => 1,
        }
    }
}

/// Sequence-fixed frame at the target's first observed position, x along
/// its initial heading.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AbsoluteFrame {
    pub origin: Point3,
    heading: f64,
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    if (-PI..PI).contains(&a) {
        return a;
    }
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        -PI
    } else {
        w
    }
}

impl AbsoluteFrame {
    pub fn new(origin: Point3, heading: f64) -> Result<Self, GeometryError> {
        if !origin.is_finite() || !heading.is_finite() {
            return Err(GeometryError::InvalidFrame(format!(
                "non-finite origin {origin:?} or heading {heading}"
            )));
        }
        Ok(Self {
            origin,
            heading: wrap_angle(heading),
        })
    }

    pub fn heading(&self) -> f64 {
        self.heading
    }
}

/// Pinhole camera with a world-to-camera rigid transform `p_c = R p + t`.
/// Camera axes: x right, y down, z along the optical axis.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    pub focal_x: f64,
    pub focal_y: f64,
    pub principal_x: f64,
    pub principal_y: f64,
    pub image_width: f64,
    pub image_height: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl CameraModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        focal_x: f64,
        focal_y: f64,
        principal_x: f64,
        principal_y: f64,
        image_width: f64,
        image_height: f64,
        rotation: [[f64; 3]; 3],
        translation: [f64; 3],
    ) -> Result<Self, GeometryError> {
        let cam = Self {
            focal_x,
            focal_y,
            principal_x,
            principal_y,
            image_width,
            image_height,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let scalars = [
            self.focal_x,
            self.focal_y,
            self.principal_x,
            self.principal_y,
            self.image_width,
            self.image_height,
        ];
        if scalars
            .iter()
            .chain(self.translation.iter())
            .any(|v| !v.is_finite())
        {
            return Err(GeometryError::InvalidCamera("non-finite parameter".into()));
        }
        if !(self.focal_x > 0.0 && self.focal_y > 0.0) {
            return Err(GeometryError::InvalidCamera(format!(
                "focal lengths must be positive, got {} and {}",
                self.focal_x, self.focal_y
            )));
        }
        if !(self.image_width > 0.0 && self.image_height > 0.0) {
            return Err(GeometryError::InvalidCamera(format!(
                "image size must be positive, got {}x{}",
                self.image_width, self.image_height
            )));
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let rtr: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if !rtr.is_finite() || (rtr - expect).abs() > 1e-9 {
                    return Err(GeometryError::InvalidCamera("rotation is not orthonormal".into()));
                }
            }
        }
        Ok(())
    }

    /// The default front camera: 800 px focal lengths, principal point
    /// (640, 360), 1280x720 image, mounted 1.6 m above the frame origin and
    /// looking along the frame's +x axis.
    pub fn default_for_frame(frame: &AbsoluteFrame) -> Self {
        let (s, c) = frame.heading().sin_cos();
        let rotation = [[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]];
        let o = frame.origin;
        let centre = [o.x, o.y, o.z + DEFAULT_CAMERA_HEIGHT];
        let mut translation = [0.0; 3];
        for (i, row) in rotation.iter().enumerate() {
            translation[i] = -(row[0] * centre[0] + row[1] * centre[1] + row[2] * centre[2]);
        }
        Self {
            focal_x: 800.0,
            focal_y: 800.0,
            principal_x: 640.0,
            principal_y: 360.0,
            image_width: 1280.0,
            image_height: 720.0,
            rotation,
            translation,
        }
    }

    /// Camera centre in world coordinates, `-Rᵀ t`.
    pub fn centre(&self) -> Point3 {
        let (r, t) = (&self.rotation, &self.translation);
        let c = |i: usize| -(r[0][i] * t[0] + r[1][i] * t[1] + r[2][i] * t[2]);
        Point3::new(c(0), c(1), c(2))
    }
}

/// Orthographic ground-plane view: drops z.
pub fn project_to_bev(p: Point3) -> Point2 {
    Point2::new(p.x, p.y)
}

pub fn world_to_camera(p: Point3, cam: &CameraModel) -> Point3 {
    let r = &cam.rotation;
    let t = &cam.translation;
    Point3::new(
        r[0][0] * p.x + r[0][1] * p.y + r[0][2] * p.z + t[0],
        r[1][0] * p.x + r[1][1] * p.y + r[1][2] * p.z + t[1],
        r[2][0] * p.x + r[2][1] * p.y + r[2][2] * p.z + t[2],
    )
}

/// Pinhole projection of a camera-frame point, without visibility checks.
fn pinhole(pc: Point3, cam: &CameraModel) -> Point2 {
    Point2::new(
        cam.focal_x * pc.x / pc.z + cam.principal_x,
        cam.focal_y * pc.y / pc.z + cam.principal_y,
    )
}

fn visible_camera_point(pc: Point3, cam: &CameraModel) -> Option<Point2> {
    if !(pc.z >= DEPTH_EPSILON) {
        return None;
    }
    let px = pinhole(pc, cam);
    let inside = (0.0..=cam.image_width).contains(&px.x) && (0.0..=cam.image_height).contains(&px.y);
    inside.then_some(px)
}

/// Pixel coordinates of `p`, or `None` when it is not visible.
pub fn project_to_fpv(p: Point3, cam: &CameraModel) -> Option<Point2> {
    visible_camera_point(world_to_camera(p, cam), cam)
}

/// Depth at least [`DEPTH_EPSILON`] and pixel inside the closed image
/// rectangle.
pub fn is_visible(p: Point3, cam: &CameraModel) -> bool {
    project_to_fpv(p, cam).is_some()
}

/// Intersects the viewing ray through `pixel` with the plane `z = plane_z`.
/// `None` when the ray is parallel to the plane or meets it behind the camera.
pub fn backproject_to_plane(pixel: Point2, plane_z: f64, cam: &CameraModel) -> Option<Point3> {
    let d_cam = [
        (pixel.x - cam.principal_x) / cam.focal_x,
        (pixel.y - cam.principal_y) / cam.focal_y,
        1.0,
    ];
    let r = &cam.rotation;
    let dir: Vec<f64> = (0..3)
        .map(|i| r[0][i] * d_cam[0] + r[1][i] * d_cam[1] + r[2][i] * d_cam[2])
        .collect();
    let c = cam.centre();
    if dir[2].abs() < 1e-15 {
        return None;
    }
    let s = (plane_z - c.z) / dir[2];
    if s <= 0.0 {
        return None;
    }
    Some(Point3::new(c.x + s * dir[0], c.y + s * dir[1], plane_z))
}

/// Translates by `-origin`, then rotates by `-heading` about z.
pub fn to_absolute_frame(p: Point3, frame: &AbsoluteFrame) -> Point3 {
    let (s, c) = frame.heading().sin_cos();
    let (dx, dy) = (p.x - frame.origin.x, p.y - frame.origin.y);
    Point3::new(c * dx + s * dy, -s * dx + c * dy, p.z - frame.origin.z)
}

/// Inverse of [`to_absolute_frame`].
pub fn from_absolute_frame(p: Point3, frame: &AbsoluteFrame) -> Point3 {
    let (s, c) = frame.heading().sin_cos();
    Point3::new(
        c * p.x - s * p.y + frame.origin.x,
        s * p.x + c * p.y + frame.origin.y,
        p.z + frame.origin.z,
    )
}
