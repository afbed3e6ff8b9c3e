//! Camera projection and axis-aligned box geometry.
//!
//! Sensor frame: x forward, y left, z up (meters). Pixel frame: u to the
//! right, v down.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{AlignError, Result};

/// Minimum homogeneous depth for a point to count as in front of the camera.
pub const MIN_DEPTH: f64 = 1e-6;

/// 3×4 matrix mapping homogeneous sensor-frame points to homogeneous pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct CameraProjection {
    m: [[f64; 4]; 3],
}

impl CameraProjection {
    pub fn new(m: [[f64; 4]; 3]) -> Result<Self> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(AlignError::Config("projection matrix has non-finite entries".into()));
        }
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        if det <= 0.0 {
            return Err(AlignError::Config(format!(
                "projection matrix left block must have positive determinant, got {det}"
            )));
        }
        Ok(Self { m })
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 12 {
            return Err(AlignError::Config(format!("projection needs 12 numbers, got {}", v.len())));
        }
        let mut m = [[0.0; 4]; 3];
        for (i, x) in v.iter().enumerate() {
            m[i / 4][i % 4] = *x;
        }
        Self::new(m)
    }

    pub fn to_row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.m[i / 4][i % 4];
        }
        out
    }

    /// Forward-looking pinhole camera at the sensor origin: sensor x maps to
    /// optical depth, sensor y to −u, sensor z to −v.
    pub fn forward_pinhole(focal: f64, cu: f64, cv: f64) -> Self {
        Self::new([[cu, -focal, 0.0, 0.0], [cv, 0.0, -focal, 0.0], [1.0, 0.0, 0.0, 0.0]])
            .expect("forward pinhole is well formed")
    }

    pub fn matrix(&self) -> &[[f64; 4]; 3] {
        &self.m
    }

    /// Returns `(u, v, depth)`.
    pub fn project_point(&self, p: [f64; 3]) -> Result<(f64, f64, f64)> {
        let h = |r: usize| self.m[r][0] * p[0] + self.m[r][1] * p[1] + self.m[r][2] * p[2] + self.m[r][3];
        let depth = h(2);
        if depth <= MIN_DEPTH {
            return Err(AlignError::BehindCamera { depth });
        }
        Ok((h(0) / depth, h(1) / depth, depth))
    }
}

impl TryFrom<Vec<f64>> for CameraProjection {
    type Error = AlignError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::from_row_major(&v)
    }
}

impl From<CameraProjection> for Vec<f64> {
    fn from(p: CameraProjection) -> Self {
        p.to_row_major().to_vec()
    }
}

pub fn normalize_yaw(yaw: f64) -> f64 {
    let y = (yaw + PI).rem_euclid(2.0 * PI) - PI;
    if y >= PI {
        -PI
    } else {
        y
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    /// (l, w, h) along x, y, z at zero yaw.
    pub size: [f64; 3],
    pub yaw: f64,
    pub class_id: usize,
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64, class_id: usize) -> Result<Self> {
        if size.iter().any(|&s| !(s > 0.0)) || center.iter().any(|c| !c.is_finite()) {
            return Err(AlignError::DegenerateBox(format!("3D box size {size:?} center {center:?}")));
        }
        Ok(Self {
            center,
            size,
            yaw: normalize_yaw(yaw),
            class_id,
        })
    }

    pub fn axis_aligned(center: [f64; 3], size: [f64; 3], class_id: usize) -> Result<Self> {
        Self::new(center, size, 0.0, class_id)
    }

    pub fn min(&self) -> [f64; 3] {
        std::array::from_fn(|i| self.center[i] - self.size[i] / 2.0)
    }

    pub fn max(&self) -> [f64; 3] {
        std::array::from_fn(|i| self.center[i] + self.size[i] / 2.0)
    }

    pub fn volume(&self) -> f64 {
        self.size.iter().product()
    }

    pub fn corners(&self) -> [[f64; 3]; 8] {
        let (s, c) = self.yaw.sin_cos();
        std::array::from_fn(|i| {
            let dx = if i & 1 == 0 { -0.5 } else { 0.5 } * self.size[0];
            let dy = if i & 2 == 0 { -0.5 } else { 0.5 } * self.size[1];
            let dz = if i & 4 == 0 { -0.5 } else { 0.5 } * self.size[2];
            [
                self.center[0] + c * dx - s * dy,
                self.center[1] + s * dx + c * dy,
                self.center[2] + dz,
            ]
        })
    }

    /// Inclusive containment test for axis-aligned boxes.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (lo, hi) = (self.min(), self.max());
        (0..3).all(|i| p[i] >= lo[i] && p[i] <= hi[i])
    }

    fn require_axis_aligned(&self) -> Result<()> {
        if self.yaw != 0.0 {
            return Err(AlignError::UnsupportedRotation(self.yaw));
        }
        Ok(())
    }

    /// Footprint on the ground plane as a 2D box in (x, y).
    pub fn bev(&self) -> Result<Box2D> {
        self.require_axis_aligned()?;
        let (lo, hi) = (self.min(), self.max());
        Ok(Box2D {
            u_min: lo[0],
            v_min: lo[1],
            u_max: hi[0],
            v_max: hi[1],
            class_id: self.class_id,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub u_min: f64,
    pub v_min: f64,
    pub u_max: f64,
    pub v_max: f64,
    pub class_id: usize,
}

impl Box2D {
    pub fn new(u_min: f64, v_min: f64, u_max: f64, v_max: f64, class_id: usize) -> Result<Self> {
        if !(u_min < u_max && v_min < v_max) {
            return Err(AlignError::DegenerateBox(format!(
                "2D box ({u_min}, {v_min}, {u_max}, {v_max})"
            )));
        }
        Ok(Self {
            u_min,
            v_min,
            u_max,
            v_max,
            class_id,
        })
    }

    pub fn width(&self) -> f64 {
        self.u_max - self.u_min
    }

    pub fn height(&self) -> f64 {
        self.v_max - self.v_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.u_min + self.u_max) / 2.0, (self.v_min + self.v_max) / 2.0)
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.u_min && u <= self.u_max && v >= self.v_min && v <= self.v_max
    }

    pub fn dilate(&self, px: f64) -> Self {
        Self {
            u_min: self.u_min - px,
            v_min: self.v_min - px,
            u_max: self.u_max + px,
            v_max: self.v_max + px,
            class_id: self.class_id,
        }
    }

    /// Area of the intersection with another box.
    pub fn overlap(&self, o: &Box2D) -> f64 {
        let w = self.u_max.min(o.u_max) - self.u_min.max(o.u_min);
        let h = self.v_max.min(o.v_max) - self.v_min.max(o.v_min);
        w.max(0.0) * h.max(0.0)
    }
}

/// Axis-aligned hull of the projected corners that lie in front of the
/// camera, clipped to `[0, width] × [0, height]`.
pub fn project_box3d(proj: &CameraProjection, b: &Box3D, image_size: (usize, usize)) -> Result<Box2D> {
    let (w, h) = (image_size.0 as f64, image_size.1 as f64);
    let mut hull: Option<[f64; 4]> = None;
    for c in b.corners() {
        let Ok((u, v, _)) = proj.project_point(c) else { continue };
        let e = hull.get_or_insert([u, v, u, v]);
        e[0] = e[0].min(u);
        e[1] = e[1].min(v);
        e[2] = e[2].max(u);
        e[3] = e[3].max(v);
    }
    let Some([u0, v0, u1, v1]) = hull else {
        return Err(AlignError::BehindCamera { depth: 0.0 });
    };
    Box2D::new(u0.clamp(0.0, w), v0.clamp(0.0, h), u1.clamp(0.0, w), v1.clamp(0.0, h), b.class_id)
}

pub fn iou_2d(a: &Box2D, b: &Box2D) -> f64 {
    let inter = a.overlap(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

pub fn iou_3d(a: &Box3D, b: &Box3D) -> Result<f64> {
    a.require_axis_aligned()?;
    b.require_axis_aligned()?;
    let (alo, ahi, blo, bhi) = (a.min(), a.max(), b.min(), b.max());
    let inter: f64 = (0..3).map(|i| (ahi[i].min(bhi[i]) - alo[i].max(blo[i])).max(0.0)).product();
    // volumes from the same corner coordinates, so identical boxes give exactly 1
    let vol = |lo: [f64; 3], hi: [f64; 3]| (0..3).map(|i| hi[i] - lo[i]).product::<f64>();
    let union = vol(alo, ahi) + vol(blo, bhi) - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// IoU of the ground-plane footprints.
pub fn iou_bev(a: &Box3D, b: &Box3D) -> Result<f64> {
    Ok(iou_2d(&a.bev()?, &b.bev()?))
}
