//! Scene parameterization: splats with activated parameters, raw (stored)
//! parameters and their activations, and the pinhole camera.

use alloc::vec::Vec;
use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};

/// Number of SH coefficients per channel at degree 3.
pub const SH_COEFFS: usize = 16;
/// Scalars per splat in the flat parameter layout
/// (mean 3, scale 3, rotation 4, opacity 1, sh 48).
pub const PARAMS_PER_SPLAT: usize = 59;

/// One Gaussian primitive with activated parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSplat {
    pub mean: Vector3<f64>,
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub scale: Vector3<f64>,
    pub opacity: f64,
    /// `sh[k][channel]`, band 0 is the DC term.
    pub sh: [[f64; 3]; SH_COEFFS],
}

impl GaussianSplat {
    pub fn isotropic(mean: Vector3<f64>, scale: f64, opacity: f64, rgb: [f64; 3]) -> Self {
        let mut sh = [[0.0; 3]; SH_COEFFS];
        for c in 0..3 {
            sh[0][c] = crate::sh::rgb_to_dc(rgb[c]);
        }
        Self {
            mean,
            rotation: [1.0, 0.0, 0.0, 0.0],
            scale: Vector3::new(scale, scale, scale),
            opacity,
            sh,
        }
    }

    /// Checks the activated-parameter invariants.
    pub fn validate(&self, index: usize) -> Result<()> {
        let finite = |v: f64| v.is_finite();
        if !self.mean.iter().copied().all(finite) {
            return Err(Error::NonFinite { index, field: "mean" });
        }
        if !self.rotation.iter().copied().all(finite) {
            return Err(Error::NonFinite { index, field: "rotation" });
        }
        if !self.scale.iter().copied().all(finite) {
            return Err(Error::NonFinite { index, field: "scale" });
        }
        if !self.opacity.is_finite() {
            return Err(Error::NonFinite { index, field: "opacity" });
        }
        if !self.sh.iter().flatten().copied().all(finite) {
            return Err(Error::NonFinite { index, field: "sh" });
        }
        if (quat_norm(self.rotation) - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidSplat { index, reason: "rotation is not a unit quaternion" });
        }
        if self.scale.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidSplat { index, reason: "scale must be positive" });
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::InvalidSplat { index, reason: "opacity outside [0, 1]" });
        }
        Ok(())
    }

    /// World-space covariance `R diag(s)^2 R^T`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let m = self.rotation_matrix() * Matrix3::from_diagonal(&self.scale);
        m * m.transpose()
    }

    /// Rotation matrix of the normalized quaternion.
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(quat_normalize(self.rotation))
    }

    /// Flat parameter vector in the canonical order.
    pub fn to_params(&self) -> [f64; PARAMS_PER_SPLAT] {
        let mut p = [0.0; PARAMS_PER_SPLAT];
        p[0..3].copy_from_slice(self.mean.as_slice());
        p[3..6].copy_from_slice(self.scale.as_slice());
        p[6..10].copy_from_slice(&self.rotation);
        p[10] = self.opacity;
        for (k, coeffs) in self.sh.iter().enumerate() {
            p[11 + 3 * k..14 + 3 * k].copy_from_slice(coeffs);
        }
        p
    }

    pub fn from_params(p: &[f64; PARAMS_PER_SPLAT]) -> Self {
        let mut sh = [[0.0; 3]; SH_COEFFS];
        for (k, coeffs) in sh.iter_mut().enumerate() {
            coeffs.copy_from_slice(&p[11 + 3 * k..14 + 3 * k]);
        }
        Self {
            mean: Vector3::new(p[0], p[1], p[2]),
            scale: Vector3::new(p[3], p[4], p[5]),
            rotation: [p[6], p[7], p[8], p[9]],
            opacity: p[10],
            sh,
        }
    }
}

/// Parameter group a flat index belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Mean,
    Scale,
    Rotation,
    Opacity,
    Sh,
}

impl ParamGroup {
    pub fn of(index: usize) -> Self {
        match index {
            0..=2 => Self::Mean,
            3..=5 => Self::Scale,
            6..=9 => Self::Rotation,
            10 => Self::Opacity,
            _ => Self::Sh,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Mean => "mean",
            Self::Scale => "scale",
            Self::Rotation => "rotation",
            Self::Opacity => "opacity",
            Self::Sh => "sh",
        }
    }
}

/// A list of splats plus the SH degree used to shade them.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub splats: Vec<GaussianSplat>,
    pub sh_degree: u8,
}

impl Scene {
    pub fn new(splats: Vec<GaussianSplat>, sh_degree: u8) -> Self {
        Self { splats, sh_degree: sh_degree.min(3) }
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.splats.iter().enumerate().try_for_each(|(i, s)| s.validate(i))
    }
}

/// Parameters as stored by the 3DGS trainer, before activation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSplat {
    pub mean: [f64; 3],
    pub rotation: [f64; 4],
    /// Log-scale.
    pub scale: [f64; 3],
    /// Logit of opacity.
    pub opacity: f64,
    pub sh: [[f64; 3]; SH_COEFFS],
}

impl RawSplat {
    pub fn activate(&self) -> GaussianSplat {
        GaussianSplat {
            mean: Vector3::from(self.mean),
            rotation: quat_normalize(self.rotation),
            scale: Vector3::new(libm::exp(self.scale[0]), libm::exp(self.scale[1]), libm::exp(self.scale[2])),
            opacity: logistic(self.opacity),
            sh: self.sh,
        }
    }

    /// Inverse of [`RawSplat::activate`] (the quaternion stays unit length).
    pub fn deactivate(splat: &GaussianSplat) -> Self {
        Self {
            mean: [splat.mean.x, splat.mean.y, splat.mean.z],
            rotation: splat.rotation,
            scale: [libm::log(splat.scale.x), libm::log(splat.scale.y), libm::log(splat.scale.z)],
            opacity: logit(splat.opacity),
            sh: splat.sh,
        }
    }
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

pub fn logit(p: f64) -> f64 {
    libm::log(p / (1.0 - p))
}

pub fn quat_norm(q: [f64; 4]) -> f64 {
    libm::sqrt(q.iter().map(|v| v * v).sum())
}

pub fn quat_normalize(q: [f64; 4]) -> [f64; 4] {
    let n = quat_norm(q);
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Gradient w.r.t. `q` of `L(R(q / |q|))` at unit `q`, given `dL/dR`.
///
/// The polynomial gradient is projected onto the tangent space of the unit
/// sphere, which is the derivative through normalization.
pub fn quat_backward(q: [f64; 4], d_rot: &Matrix3<f64>) -> [f64; 4] {
    let n = quat_norm(q);
    let u = quat_normalize(q);
    let [w, x, y, z] = u;
    let g = d_rot;
    let dw = 2.0 * (z * (g[(1, 0)] - g[(0, 1)]) + y * (g[(0, 2)] - g[(2, 0)]) + x * (g[(2, 1)] - g[(1, 2)]));
    let dx = 2.0
        * (y * (g[(1, 0)] + g[(0, 1)]) + z * (g[(2, 0)] + g[(0, 2)]) + w * (g[(2, 1)] - g[(1, 2)])
            - 2.0 * x * (g[(1, 1)] + g[(2, 2)]));
    let dy = 2.0
        * (x * (g[(1, 0)] + g[(0, 1)]) + w * (g[(0, 2)] - g[(2, 0)]) + z * (g[(2, 1)] + g[(1, 2)])
            - 2.0 * y * (g[(0, 0)] + g[(2, 2)]));
    let dz = 2.0
        * (w * (g[(1, 0)] - g[(0, 1)]) + x * (g[(2, 0)] + g[(0, 2)]) + y * (g[(2, 1)] + g[(1, 2)])
            - 2.0 * z * (g[(0, 0)] + g[(1, 1)]));
    let poly = [dw, dx, dy, dz];
    let radial: f64 = (0..4).map(|i| poly[i] * u[i]).sum();
    [
        (poly[0] - radial * u[0]) / n,
        (poly[1] - radial * u[1]) / n,
        (poly[2] - radial * u[2]) / n,
        (poly[3] - radial * u[3]) / n,
    ]
}

/// Pinhole camera with an OpenCV-style view frame (+z forward, +y down).
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub world_to_view: Matrix4<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub znear: f64,
    pub zfar: f64,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        world_to_view: Matrix4<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        znear: f64,
        zfar: f64,
    ) -> Result<Self> {
        let cam = Self { world_to_view, fx, fy, cx, cy, width, height, znear, zfar };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidCamera("focal lengths must be positive"));
        }
        if !(self.znear > 0.0 && self.znear < self.zfar) {
            return Err(Error::InvalidCamera("require 0 < znear < zfar"));
        }
        if self.width < 4 || self.height < 4 || self.width % 2 != 0 || self.height % 2 != 0 {
            return Err(Error::InvalidCamera("width and height must be even and at least 4"));
        }
        if !self.world_to_view.iter().all(|v| v.is_finite()) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::InvalidCamera("non-finite camera parameter"));
        }
        Ok(())
    }

    /// Camera looking from `eye` towards `target`, principal point at the
    /// image center and square pixels.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>, focal: f64, width: u32, height: u32) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(rot * eye);
        let mut w2v = Matrix4::identity();
        w2v.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        w2v.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self::new(w2v, focal, focal, width as f64 / 2.0, height as f64 / 2.0, width, height, 0.01, 100.0)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_view.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_view.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera center in world space.
    pub fn position(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn to_view(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Same view at `factor` times the resolution.
    pub fn scaled(&self, factor: u32) -> Self {
        let f = factor as f64;
        Self {
            fx: self.fx * f,
            fy: self.fy * f,
            cx: self.cx * f,
            cy: self.cy * f,
            width: self.width * factor,
            height: self.height * factor,
            ..self.clone()
        }
    }
}
