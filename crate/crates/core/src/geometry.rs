//! Pinhole cameras, Plücker ray maps, pose normalization and trajectory
//! alignment.
//!
//! Convention: x right, y down, z forward. Extrinsics are camera-to-world,
//! so a pixel ray is `R * normalize(K^-1 (u + 0.5, v + 0.5, 1))` starting at
//! `t`.

use nalgebra::{Matrix3, Vector3, SVD};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Number of channels in a ray map: direction, moment, visibility.
pub const RAY_CHANNELS: usize = 7;

const ORTHO_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Camera-to-world rotation.
    pub rotation: Mat3,
    /// Camera center in world coordinates.
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Identity pose with the given intrinsics.
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
            width,
            height,
        }
    }

    /// Centered principal point with a horizontal field of view in degrees.
    pub fn with_fov(width: usize, height: usize, fov_x_deg: f64) -> Self {
        let f = 0.5 * width as f64 / (0.5 * fov_x_deg.to_radians()).tan();
        Self::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn with_pose(mut self, rotation: Mat3, translation: Vec3) -> Self {
        self.rotation = rotation;
        self.translation = translation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::validation(format!(
                "focal lengths must be positive, got ({}, {})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::validation("image size must be positive"));
        }
        check_rotation(&self.rotation)?;
        if !self.translation.iter().all(|x| x.is_finite()) {
            return Err(Error::validation("non-finite translation"));
        }
        Ok(())
    }

    pub fn center(&self) -> Vec3 {
        self.translation
    }

    /// Unit world-space direction through continuous pixel coordinates.
    pub fn ray_through(&self, px: f64, py: f64) -> Vec3 {
        let local = Vec3::new((px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0).normalize();
        (self.rotation * local).normalize()
    }

    /// Ray through the center of pixel `(u, v)`.
    pub fn pixel_ray(&self, u: usize, v: usize) -> Vec3 {
        self.ray_through(u as f64 + 0.5, v as f64 + 0.5)
    }

    /// Continuous pixel coordinates and camera-frame depth of a world point.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64, f64)> {
        let local = self.rotation.transpose() * (p - self.translation);
        if local.z <= 1e-12 {
            return None;
        }
        Some((
            self.fx * local.x / local.z + self.cx,
            self.fy * local.y / local.z + self.cy,
            local.z,
        ))
    }

    /// World point at camera-frame depth `z` along pixel `(u, v)`.
    pub fn unproject(&self, u: usize, v: usize, z: f64) -> Vec3 {
        let local = Vec3::new(
            (u as f64 + 0.5 - self.cx) / self.fx * z,
            (v as f64 + 0.5 - self.cy) / self.fy * z,
            z,
        );
        self.rotation * local + self.translation
    }

    /// Apply a rigid world transform `x -> r x + t` to the camera.
    pub fn transformed(&self, r: &Mat3, t: &Vec3) -> Self {
        let mut c = self.clone();
        c.rotation = r * self.rotation;
        c.translation = r * self.translation + t;
        c
    }

    /// Same pose, intrinsics rescaled to a new resolution.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        let mut c = self.clone();
        c.fx *= sx;
        c.fy *= sy;
        c.cx *= sx;
        c.cy *= sy;
        c.width = width;
        c.height = height;
        c
    }
}

fn check_rotation(r: &Mat3) -> Result<()> {
    let err = (r.transpose() * r - Mat3::identity()).abs().max();
    if !(err <= ORTHO_TOL) {
        return Err(Error::validation(format!(
            "rotation is not orthonormal (max |R^T R - I| = {err:e})"
        )));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > ORTHO_TOL {
        return Err(Error::validation(format!("rotation determinant {det} != +1")));
    }
    Ok(())
}

/// Camera-to-world rotation looking from `eye` towards `target`; `up` is the
/// world direction that should appear towards the top of the image.
pub fn look_at(eye: &Vec3, target: &Vec3, up: &Vec3) -> Result<Mat3> {
    let f = target - eye;
    if f.norm() < 1e-12 {
        return Err(Error::validation("look_at: eye coincides with target"));
    }
    let f = f.normalize();
    let right = f.cross(up);
    if right.norm() < 1e-9 {
        return Err(Error::validation("look_at: up is parallel to the view direction"));
    }
    let right = right.normalize();
    let down = f.cross(&right);
    Ok(Mat3::from_columns(&[right, down, f]))
}

/// Rotation about a unit axis by `angle` radians (Rodrigues).
pub fn axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    let k = axis.normalize();
    let kx = Mat3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    Mat3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
}

/// Geodesic distance between two rotations in radians.
pub fn rotation_angle(a: &Mat3, b: &Mat3) -> f64 {
    let rel = a.transpose() * b;
    // atan2 keeps precision near 0 and pi, where acos of the trace does not
    let s = Vec3::new(rel[(2, 1)] - rel[(1, 2)], rel[(0, 2)] - rel[(2, 0)], rel[(1, 0)] - rel[(0, 1)]).norm();
    s.atan2(rel.trace() - 1.0)
}

/// Per-pixel Plücker coordinates plus a visibility channel, row-major
/// `height × width × 7`.
#[derive(Clone, Debug, PartialEq)]
pub struct RayMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl RayMap {
    pub fn pixel(&self, u: usize, v: usize) -> &[f64] {
        let o = (v * self.width + u) * RAY_CHANNELS;
        &self.data[o..o + RAY_CHANNELS]
    }
}

/// Ray map for a camera. Invisible views keep their geometry channels and
/// carry an all-zero mask.
pub fn plucker_ray_map(camera: &Camera, visible: bool) -> Result<RayMap> {
    camera.validate()?;
    let (w, h) = (camera.width, camera.height);
    let o = camera.center();
    let mask = if visible { 1.0 } else { 0.0 };
    let mut data = Vec::with_capacity(w * h * RAY_CHANNELS);
    for v in 0..h {
        for u in 0..w {
            let d = camera.pixel_ray(u, v);
            let m = o.cross(&d);
            data.extend_from_slice(&[d.x, d.y, d.z, m.x, m.y, m.z, mask]);
        }
    }
    Ok(RayMap {
        height: h,
        width: w,
        data,
    })
}

/// Rigid map from an input world frame to the normalized frame anchored at
/// the first camera: `x -> (R0^T (x - t0)) / scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseNormalization {
    pub r0: Mat3,
    pub t0: Vec3,
    pub scale: f64,
}

impl PoseNormalization {
    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.r0.transpose() * (p - self.t0) / self.scale
    }

    pub fn apply_camera(&self, c: &Camera) -> Camera {
        let mut out = c.clone();
        out.rotation = self.r0.transpose() * c.rotation;
        out.translation = self.apply_point(&c.translation);
        out
    }
}

/// Express all poses in the first camera's frame and divide translations by
/// the distance of the farthest camera from the first.
pub fn normalize_poses(cameras: &[Camera]) -> Result<(Vec<Camera>, f64)> {
    let (cams, norm) = normalize_poses_with_transform(cameras)?;
    Ok((cams, norm.scale))
}

pub fn normalize_poses_with_transform(
    cameras: &[Camera],
) -> Result<(Vec<Camera>, PoseNormalization)> {
    let first = cameras
        .first()
        .ok_or_else(|| Error::validation("normalize_poses needs at least one camera"))?;
    let r0 = first.rotation;
    let t0 = first.translation;
    let far = cameras
        .iter()
        .map(|c| (c.translation - t0).norm())
        .fold(0.0, f64::max);
    let scale = if far < 1e-9 { 1.0 } else { far };
    let norm = PoseNormalization { r0, t0, scale };
    let mut out: Vec<Camera> = cameras.iter().map(|c| norm.apply_camera(c)).collect();
    // first pose is the identity by construction; pin it exactly
    out[0].rotation = Mat3::identity();
    out[0].translation = Vec3::zeros();
    Ok((out, norm))
}

/// Similarity transform `x -> s R x + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sim3 {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Sim3 {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p * self.scale + self.translation
    }

    pub fn apply_camera(&self, c: &Camera) -> Camera {
        let mut out = c.clone();
        out.rotation = self.rotation * c.rotation;
        out.translation = self.apply(&c.translation);
        out
    }
}

/// Least-squares similarity aligning `src` onto `dst` (Umeyama).
pub fn umeyama_align(src: &[Vec3], dst: &[Vec3]) -> Result<Sim3> {
    if src.len() != dst.len() {
        return Err(Error::validation(format!(
            "point count mismatch {} vs {}",
            src.len(),
            dst.len()
        )));
    }
    let n = src.len();
    if n < 3 {
        return Err(Error::Degenerate(format!("need >= 3 point pairs, got {n}")));
    }
    let nf = n as f64;
    let mu_s = src.iter().fold(Vec3::zeros(), |a, p| a + p) / nf;
    let mu_d = dst.iter().fold(Vec3::zeros(), |a, p| a + p) / nf;
    let var_s = src.iter().map(|p| (p - mu_s).norm_squared()).sum::<f64>() / nf;
    let mut cov = Mat3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - mu_d) * (s - mu_s).transpose();
    }
    cov /= nf;
    let svd = SVD::new(cov, true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::Degenerate("SVD failed".into())),
    };
    let sv = svd.singular_values;
    let top = sv.max();
    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    if !(var_s > 1e-18) || !(top > 1e-18) || sorted[1] <= 1e-10 * top {
        return Err(Error::Degenerate(
            "points are collinear or coincident; rank-deficient covariance".into(),
        ));
    }
    let mut s_diag = Vec3::new(1.0, 1.0, 1.0);
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s_diag[2] = -1.0;
    }
    let rotation = u * Mat3::from_diagonal(&s_diag) * v_t;
    let trace_ds: f64 = (0..3).map(|i| sv[i] * s_diag[i]).sum();
    let scale = trace_ds / var_s;
    let translation = mu_d - rotation * mu_s * scale;
    Ok(Sim3 {
        scale,
        rotation,
        translation,
    })
}

/// Absolute trajectory error after aligning predicted camera centers onto
/// ground truth. Returns `(rotation RMSE in degrees, translation RMSE)`.
pub fn ate(pred: &[Camera], gt: &[Camera]) -> Result<(f64, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::validation(format!(
            "trajectory length mismatch {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    if pred.len() < 3 {
        return Err(Error::validation("ATE needs at least 3 poses"));
    }
    let src: Vec<Vec3> = pred.iter().map(Camera::center).collect();
    let dst: Vec<Vec3> = gt.iter().map(Camera::center).collect();
    let sim = umeyama_align(&src, &dst)?;
    let n = pred.len() as f64;
    let mut t_sq = 0.0;
    let mut r_sq = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        t_sq += (sim.apply(&p.center()) - g.center()).norm_squared();
        let ang = rotation_angle(&(sim.rotation * p.rotation), &g.rotation).to_degrees();
        r_sq += ang * ang;
    }
    Ok(((r_sq / n).sqrt(), (t_sq / n).sqrt()))
}
