//! Pinhole cameras (x right, y down, z forward in camera space).

use crate::error::{Error, Result};
use crate::math::{Mat3, Ray, Vec3};

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Camera-to-world rotation; columns are the camera axes in world space.
    pub rotation: Mat3,
    pub position: Vec3,
}

impl Camera {
    /// Camera at `eye` looking at `target`, with horizontal field of view
    /// `fov_x` (radians) and the principal point at the image center.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, width: usize, height: usize, fov_x: f64) -> Result<Self> {
        let forward = (target - eye).normalize();
        let mut right = forward.cross(&up);
        if right.norm() < 1e-9 {
            let (t, _) = crate::math::orthonormal_basis(&forward);
            right = t;
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let fx = width as f64 / 2.0 / (fov_x / 2.0).tan();
        let cam = Camera {
            width,
            height,
            fx,
            fy: fx,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation: Mat3::from_columns(&[right, down, forward]),
            position: eye,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn from_matrix(width: usize, height: usize, intr: [f64; 4], c2w: &[[f64; 4]; 4]) -> Result<Self> {
        let rotation = Mat3::from_fn(|r, c| c2w[r][c]);
        let cam = Camera {
            width,
            height,
            fx: intr[0],
            fy: intr[1],
            cx: intr[2],
            cy: intr[3],
            rotation,
            position: Vec3::new(c2w[0][3], c2w[1][3], c2w[2][3]),
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn to_matrix(&self) -> [[f64; 4]; 4] {
        let mut m = [[0.0; 4]; 4];
        for (r, row) in m.iter_mut().enumerate().take(3) {
            for (c, v) in row.iter_mut().enumerate().take(3) {
                *v = self.rotation[(r, c)];
            }
            row[3] = self.position[r];
        }
        m[3][3] = 1.0;
        m
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Invalid("camera image size must be positive".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Invalid("camera focal lengths must be positive".into()));
        }
        let err = (self.rotation.transpose() * self.rotation - Mat3::identity()).amax();
        if !(err < 1e-6) {
            return Err(Error::Invalid(format!(
                "camera rotation is not orthonormal (error {err:.2e})"
            )));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Ray through pixel `(px, py)`; the pixel center is at `+0.5`.
    pub fn ray(&self, px: f64, py: f64) -> Ray {
        let d = Vec3::new(
            (px + 0.5 - self.cx) / self.fx,
            (py + 0.5 - self.cy) / self.fy,
            1.0,
        );
        Ray::new(self.position, (self.rotation * d).normalize())
    }

    /// Ray through the center of pixel index `i` (row-major).
    pub fn pixel_ray(&self, i: usize) -> Ray {
        self.ray((i % self.width) as f64, (i / self.width) as f64)
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.position)
    }

    /// Continuous pixel coordinates (inverse of [`ray`](Self::ray)) and
    /// camera-space depth, or `None` behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64, f64)> {
        let q = self.to_camera(p);
        if q.z <= 0.0 {
            return None;
        }
        Some((
            self.fx * q.x / q.z + self.cx - 0.5,
            self.fy * q.y / q.z + self.cy - 0.5,
            q.z,
        ))
    }

    /// Jacobian of [`project`](Self::project)'s `(u, v)` with respect to the
    /// world-space point, as two gradient rows.
    pub fn project_jacobian(&self, p: &Vec3) -> Option<[Vec3; 2]> {
        let q = self.to_camera(p);
        if q.z <= 0.0 {
            return None;
        }
        let rt = self.rotation.transpose();
        let du = Vec3::new(self.fx / q.z, 0.0, -self.fx * q.x / (q.z * q.z));
        let dv = Vec3::new(0.0, self.fy / q.z, -self.fy * q.y / (q.z * q.z));
        Some([rt.transpose() * du, rt.transpose() * dv])
    }

    /// True when `p` projects inside the image in front of the camera.
    pub fn in_frustum(&self, p: &Vec3) -> bool {
        match self.project(p) {
            Some((u, v, _)) => {
                u >= -0.5 && v >= -0.5 && u < self.width as f64 - 0.5 && v < self.height as f64 - 0.5
            }
            None => false,
        }
    }

    /// Pixel index containing `p`, if any.
    pub fn pixel_of(&self, p: &Vec3) -> Option<(usize, usize)> {
        let (u, v, _) = self.project(p)?;
        let x = (u + 0.5).floor();
        let y = (v + 0.5).floor();
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return None;
        }
        Some((x as usize, y as usize))
    }
}
