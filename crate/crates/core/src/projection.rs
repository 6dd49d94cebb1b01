//! World-to-screen transformation of splats: EWA covariance projection,
//! conic, oriented quad extents and frustum culling, plus the reverse-mode
//! chain back to the 3D parameters.

use alloc::vec::Vec;
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use serde::Serialize;

use crate::error::Result;
use crate::scene::{quat_backward, quat_normalize, Camera, GaussianSplat, Scene};
use crate::sh::{eval_sh_color, sh_color_backward};
use crate::{COV_DILATION, QUAD_EXTENT_SIGMAS};

/// Determinants at or below this are treated as singular.
pub const DET_EPSILON: f64 = 1e-12;

/// Screen-space form of a splat.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedSplat {
    pub splat_id: u32,
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub color: Vector3<f64>,
    pub clamp_mask: [bool; 3],
    /// Half-extent axes of the oriented quad, major axis first.
    pub quad_axes: [Vector2<f64>; 2],
    pub opacity: f64,
}

impl ProjectedSplat {
    /// Quad corners in counter-clockwise order; the quad is drawn as
    /// triangles `(0, 1, 2)` and `(0, 2, 3)`.
    pub fn corners(&self) -> [Vector2<f64>; 4] {
        let [a, b] = self.quad_axes;
        let m = self.mean2d;
        [m - a - b, m + a - b, m + a + b, m - a + b]
    }

    /// Half-size of the axis-aligned box around the quad.
    pub fn half_extent(&self) -> Vector2<f64> {
        let [a, b] = self.quad_axes;
        Vector2::new(a.x.abs() + b.x.abs(), a.y.abs() + b.y.abs())
    }

    /// Whether `point` lies inside the oriented quad (boundary included).
    pub fn covers(&self, point: Vector2<f64>) -> bool {
        let r = point - self.mean2d;
        self.quad_axes.iter().all(|axis| {
            let len2 = axis.norm_squared();
            len2 > 0.0 && (r.dot(axis)).abs() <= len2
        })
    }

    /// Inclusive pixel bounds `(x0, y0, x1, y1)` of the quad clipped to the
    /// image, or `None` when no pixel center can be covered.
    pub fn pixel_bounds(&self, width: u32, height: u32) -> Option<(u32, u32, u32, u32)> {
        let h = self.half_extent();
        let lo = self.mean2d - h;
        let hi = self.mean2d + h;
        // pixel centers sit at integer + 0.5
        let x0 = libm::ceil(lo.x - 0.5).max(0.0);
        let y0 = libm::ceil(lo.y - 0.5).max(0.0);
        let x1 = libm::floor(hi.x - 0.5).min(width as f64 - 1.0);
        let y1 = libm::floor(hi.y - 0.5).min(height as f64 - 1.0);
        if !(x0 <= x1 && y0 <= y1) {
            return None;
        }
        Some((x0 as u32, y0 as u32, x1 as u32, y1 as u32))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CullReason {
    Frustum,
    Degenerate,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ProjectionStats {
    pub visible: u64,
    pub culled_frustum: u64,
    pub culled_degenerate: u64,
}

/// Exact inverse of a symmetric 2x2 matrix; `None` when near-singular.
pub fn compute_conic(cov: &Matrix2<f64>) -> Option<Matrix2<f64>> {
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    if !(det > DET_EPSILON) || !det.is_finite() {
        return None;
    }
    let inv = 1.0 / det;
    Some(Matrix2::new(cov[(1, 1)] * inv, -cov[(0, 1)] * inv, -cov[(1, 0)] * inv, cov[(0, 0)] * inv))
}

/// Eigen-decomposition of a symmetric 2x2 matrix, eigenvalues descending.
pub fn sym_eigen2(m: &Matrix2<f64>) -> ([f64; 2], [Vector2<f64>; 2]) {
    let (a, b, c) = (m[(0, 0)], 0.5 * (m[(0, 1)] + m[(1, 0)]), m[(1, 1)]);
    let mid = 0.5 * (a + c);
    let r = libm::hypot(0.5 * (a - c), b);
    let (l1, l2) = (mid + r, mid - r);
    let v1 = if b == 0.0 {
        if a >= c {
            Vector2::new(1.0, 0.0)
        } else {
            Vector2::new(0.0, 1.0)
        }
    } else if a >= c {
        Vector2::new(l1 - c, b).normalize()
    } else {
        Vector2::new(b, l1 - a).normalize()
    };
    let v2 = Vector2::new(-v1.y, v1.x);
    ([l1, l2], [v1, v2])
}

/// Oriented quad half-axes `k * sqrt(lambda_i) * q_i`.
pub fn compute_quad_extent(cov: &Matrix2<f64>) -> [Vector2<f64>; 2] {
    let (l, q) = sym_eigen2(cov);
    [
        q[0] * (QUAD_EXTENT_SIGMAS * libm::sqrt(l[0].max(0.0))),
        q[1] * (QUAD_EXTENT_SIGMAS * libm::sqrt(l[1].max(0.0))),
    ]
}

/// Affine Jacobian of the perspective projection at view-space point `p`.
pub fn projection_jacobian(cam: &Camera, p: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    Matrix2x3::new(cam.fx * iz, 0.0, -cam.fx * p.x * iz2, 0.0, cam.fy * iz, -cam.fy * p.y * iz2)
}

/// Projected covariance before dilation, `J W Sigma W^T J^T`.
pub fn undilated_cov2d(splat: &GaussianSplat, cam: &Camera) -> Matrix2<f64> {
    let p = cam.to_view(&splat.mean);
    let t = projection_jacobian(cam, &p) * cam.rotation();
    t * splat.covariance() * t.transpose()
}

fn finite2(m: &Matrix2<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn project_splat(
    splat: &GaussianSplat,
    splat_id: u32,
    cam: &Camera,
    sh_degree: u8,
) -> core::result::Result<ProjectedSplat, CullReason> {
    let p = cam.to_view(&splat.mean);
    if !p.iter().all(|v| v.is_finite()) {
        return Err(CullReason::Degenerate);
    }
    if p.z <= cam.znear || p.z >= cam.zfar {
        return Err(CullReason::Frustum);
    }
    let mean2d = Vector2::new(cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy);
    let cov2d = undilated_cov2d(splat, cam) + Matrix2::identity() * COV_DILATION;
    if !finite2(&cov2d) || !mean2d.iter().all(|v| v.is_finite()) {
        return Err(CullReason::Degenerate);
    }
    let conic = compute_conic(&cov2d).ok_or(CullReason::Degenerate)?;
    let quad_axes = compute_quad_extent(&cov2d);
    let sh = eval_sh_color(splat, &cam.position(), sh_degree).map_err(|_| CullReason::Degenerate)?;
    let projected = ProjectedSplat {
        splat_id,
        mean2d,
        cov2d,
        conic,
        depth: p.z,
        color: sh.color,
        clamp_mask: sh.clamp_mask,
        quad_axes,
        opacity: splat.opacity,
    };
    let h = projected.half_extent();
    let (w, hgt) = (cam.width as f64, cam.height as f64);
    if mean2d.x + h.x < 0.0 || mean2d.x - h.x > w || mean2d.y + h.y < 0.0 || mean2d.y - h.y > hgt {
        return Err(CullReason::Frustum);
    }
    Ok(projected)
}

/// All visible splats of a scene (in scene order) plus cull counters.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedScene {
    pub splats: Vec<ProjectedSplat>,
    pub stats: ProjectionStats,
}

pub fn project_scene(scene: &Scene, cam: &Camera) -> Result<ProjectedScene> {
    cam.validate()?;
    let mut splats = Vec::with_capacity(scene.len());
    let mut stats = ProjectionStats::default();
    for (i, s) in scene.splats.iter().enumerate() {
        match project_splat(s, i as u32, cam, scene.sh_degree) {
            Ok(p) => {
                stats.visible += 1;
                splats.push(p);
            }
            Err(CullReason::Frustum) => stats.culled_frustum += 1,
            Err(CullReason::Degenerate) => stats.culled_degenerate += 1,
        }
    }
    Ok(ProjectedScene { splats, stats })
}

/// Screen-space gradients accumulated for one splat.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ScreenGradients {
    pub d_color: Vector3<f64>,
    pub d_opacity: f64,
    pub d_mean2d: Vector2<f64>,
    /// `dL/dA` for the conic `A`, as a full symmetric matrix.
    pub d_conic: Matrix2<f64>,
}

/// Gradients w.r.t. the activated 3D parameters of one splat.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatGradients {
    pub mean: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub rotation: [f64; 4],
    pub opacity: f64,
    pub sh: [[f64; 3]; crate::scene::SH_COEFFS],
}

impl Default for SplatGradients {
    fn default() -> Self {
        Self {
            mean: Vector3::zeros(),
            scale: Vector3::zeros(),
            rotation: [0.0; 4],
            opacity: 0.0,
            sh: [[0.0; 3]; crate::scene::SH_COEFFS],
        }
    }
}

impl SplatGradients {
    /// Flat layout matching [`GaussianSplat::to_params`].
    pub fn to_flat(&self) -> [f64; crate::scene::PARAMS_PER_SPLAT] {
        GaussianSplat {
            mean: self.mean,
            rotation: self.rotation,
            scale: self.scale,
            opacity: self.opacity,
            sh: self.sh,
        }
        .to_params()
    }
}

/// Reverse-mode chain from accumulated screen-space gradients to the 3D
/// parameters of `splat`, run once per splat after the fragment pass.
pub fn projection_backward(
    splat: &GaussianSplat,
    cam: &Camera,
    sh_degree: u8,
    grads: &ScreenGradients,
    color_gate: [bool; 3],
) -> SplatGradients {
    let w = cam.rotation();
    let p = cam.to_view(&splat.mean);
    let j = projection_jacobian(cam, &p);
    let t = j * w;
    let rot = quat_to_matrix_normalized(splat.rotation);
    let m = rot * Matrix3::from_diagonal(&splat.scale);
    let sigma3 = m * m.transpose();
    let cov2d = t * sigma3 * t.transpose() + Matrix2::identity() * COV_DILATION;
    let conic = compute_conic(&cov2d).unwrap_or_else(Matrix2::zeros);

    // conic = cov2d^-1  =>  dL/dcov2d = -A G A
    let d_cov2d = -(conic * grads.d_conic * conic);
    let d_cov2d = 0.5 * (d_cov2d + d_cov2d.transpose());
    // cov2d = T S T^T
    let d_sigma3 = t.transpose() * d_cov2d * t;
    let d_t = 2.0 * d_cov2d * t * sigma3;
    let d_j = d_t * w.transpose();

    // mean2d = (fx x/z + cx, fy y/z + cy)
    let (iz, fx, fy) = (1.0 / p.z, cam.fx, cam.fy);
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let g = grads.d_mean2d;
    let mut d_p = Vector3::new(fx * iz * g.x, fy * iz * g.y, -fx * p.x * iz2 * g.x - fy * p.y * iz2 * g.y);
    // J's dependence on the view-space position
    d_p.x += -fx * iz2 * d_j[(0, 2)];
    d_p.y += -fy * iz2 * d_j[(1, 2)];
    d_p.z += -fx * iz2 * d_j[(0, 0)] + 2.0 * fx * p.x * iz3 * d_j[(0, 2)] - fy * iz2 * d_j[(1, 1)]
        + 2.0 * fy * p.y * iz3 * d_j[(1, 2)];
    let mut d_mean = w.transpose() * d_p;

    // Sigma3 = M M^T, M = R diag(s)
    let d_m = 2.0 * d_sigma3 * m;
    let mut d_scale = Vector3::zeros();
    let mut d_rot = Matrix3::zeros();
    for col in 0..3 {
        for row in 0..3 {
            d_scale[col] += d_m[(row, col)] * rot[(row, col)];
            d_rot[(row, col)] = d_m[(row, col)] * splat.scale[col];
        }
    }
    let d_rotation = quat_backward(splat.rotation, &d_rot);

    let mut d_color = grads.d_color;
    for ch in 0..3 {
        if !color_gate[ch] {
            d_color[ch] = 0.0;
        }
    }
    let sh = eval_sh_color(splat, &cam.position(), sh_degree);
    let (d_sh, d_mean_sh) = match sh {
        Ok(c) => sh_color_backward(splat, &cam.position(), sh_degree, &d_color, c.clamp_mask)
            .unwrap_or(([[0.0; 3]; crate::scene::SH_COEFFS], Vector3::zeros())),
        Err(_) => ([[0.0; 3]; crate::scene::SH_COEFFS], Vector3::zeros()),
    };
    d_mean += d_mean_sh;

    SplatGradients { mean: d_mean, scale: d_scale, rotation: d_rotation, opacity: grads.d_opacity, sh: d_sh }
}

fn quat_to_matrix_normalized(q: [f64; 4]) -> Matrix3<f64> {
    crate::scene::quat_to_matrix(quat_normalize(q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix4;

    fn camera(fx: f64, w: u32) -> Camera {
        Camera::new(Matrix4::identity(), fx, fx, w as f64 / 2.0, w as f64 / 2.0, w, w, 0.1, 100.0).unwrap()
    }

    #[test]
    fn diagonal_projection() {
        let cam = camera(100.0, 128);
        let s = GaussianSplat::isotropic(Vector3::new(0.0, 0.0, 2.0), 1.0, 1.0, [0.5; 3]);
        let p = project_splat(&s, 0, &cam, 0).unwrap();
        assert_eq!(p.mean2d, Vector2::new(64.0, 64.0));
        let j = projection_jacobian(&cam, &Vector3::new(0.0, 0.0, 2.0));
        assert_eq!(j.fixed_view::<2, 2>(0, 0).into_owned(), Matrix2::new(50.0, 0.0, 0.0, 50.0));
        assert!((p.cov2d - Matrix2::new(2500.3, 0.0, 0.0, 2500.3)).norm() < 1e-9);
        assert_eq!(p.depth, 2.0);
    }

    #[test]
    fn near_plane_cull() {
        let cam = camera(100.0, 128);
        let s = GaussianSplat::isotropic(Vector3::new(0.0, 0.0, 0.05), 0.01, 1.0, [0.5; 3]);
        assert_eq!(project_splat(&s, 0, &cam, 0), Err(CullReason::Frustum));
    }

    #[test]
    fn offscreen_cull() {
        let cam = camera(100.0, 128);
        let s = GaussianSplat::isotropic(Vector3::new(50.0, 0.0, 2.0), 0.01, 1.0, [0.5; 3]);
        assert_eq!(project_splat(&s, 0, &cam, 0), Err(CullReason::Frustum));
    }

    #[test]
    fn conic_closed_forms() {
        let c = compute_conic(&Matrix2::new(4.0, 0.0, 0.0, 1.0)).unwrap();
        assert_eq!(c, Matrix2::new(0.25, 0.0, 0.0, 1.0));
        let c = compute_conic(&Matrix2::new(2.0, 1.0, 1.0, 2.0)).unwrap();
        assert!((c - Matrix2::new(2.0, -1.0, -1.0, 2.0) / 3.0).norm() < 1e-15);
        assert!(compute_conic(&Matrix2::new(1.0, 1.0, 1.0, 1.0)).is_none());
    }

    #[test]
    fn quad_extent_axis_aligned() {
        let [a, b] = compute_quad_extent(&Matrix2::new(4.0, 0.0, 0.0, 1.0));
        assert!((a - Vector2::new(6.66, 0.0)).norm() < 1e-12);
        assert!((b - Vector2::new(0.0, 3.33)).norm() < 1e-12);
    }

    #[test]
    fn quad_extent_rotates_with_covariance() {
        let base = Matrix2::new(4.0, 0.0, 0.0, 1.0);
        let (s, c) = (libm::sin(core::f64::consts::FRAC_PI_4), libm::cos(core::f64::consts::FRAC_PI_4));
        let r = Matrix2::new(c, -s, s, c);
        let [a, b] = compute_quad_extent(&(r * base * r.transpose()));
        let [a0, b0] = compute_quad_extent(&base);
        // eigenvectors are defined up to sign
        assert!((a - r * a0).norm() < 1e-12 || (a + r * a0).norm() < 1e-12);
        assert!((b - r * b0).norm() < 1e-12 || (b + r * b0).norm() < 1e-12);
    }

    #[test]
    fn isotropic_on_axis_mean_gradient() {
        let cam = camera(100.0, 128);
        let s = GaussianSplat::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.1, 1.0, [0.5; 3]);
        let grads = ScreenGradients { d_mean2d: Vector2::new(1.0, 0.0), ..Default::default() };
        let g = projection_backward(&s, &cam, 0, &grads, [true; 3]);
        assert!((g.mean - Vector3::new(50.0, 0.0, 0.0)).norm() < 1e-12);
        assert_eq!(g.scale, Vector3::zeros());
    }

    #[test]
    fn zero_screen_gradients_give_zero_geometry_gradients() {
        let cam = camera(80.0, 64);
        let mut s = GaussianSplat::isotropic(Vector3::new(0.3, -0.2, 3.0), 0.2, 0.8, [0.2, 0.4, 0.9]);
        s.rotation = quat_normalize([0.9, 0.2, -0.3, 0.1]);
        let g = projection_backward(&s, &cam, 3, &ScreenGradients::default(), [true; 3]);
        assert_eq!(g.mean, Vector3::zeros());
        assert_eq!(g.scale, Vector3::zeros());
        assert_eq!(g.rotation, [0.0; 4]);
    }
}
