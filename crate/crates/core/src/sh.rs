//! View-dependent color from real spherical harmonics (degree <= 3), using the
//! basis constants and `+0.5` offset of the reference 3DGS trainer.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::scene::{GaussianSplat, SH_COEFFS};

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub const fn coeffs_for_degree(degree: u8) -> usize {
    (degree as usize + 1) * (degree as usize + 1)
}

pub fn rgb_to_dc(rgb: f64) -> f64 {
    (rgb - 0.5) / SH_C0
}

/// Basis values at unit direction `d`; entries past the degree are zero.
pub fn basis(degree: u8, d: &Vector3<f64>) -> [f64; SH_COEFFS] {
    basis_with_grad(degree, d).0
}

/// Basis values and their gradients w.r.t. the (unnormalized) components of `d`.
pub fn basis_with_grad(degree: u8, d: &Vector3<f64>) -> ([f64; SH_COEFFS], [[f64; 3]; SH_COEFFS]) {
    let (x, y, z) = (d.x, d.y, d.z);
    let mut v = [0.0; SH_COEFFS];
    let mut g = [[0.0; 3]; SH_COEFFS];
    v[0] = SH_C0;
    if degree == 0 {
        return (v, g);
    }
    v[1] = -SH_C1 * y;
    v[2] = SH_C1 * z;
    v[3] = -SH_C1 * x;
    g[1] = [0.0, -SH_C1, 0.0];
    g[2] = [0.0, 0.0, SH_C1];
    g[3] = [-SH_C1, 0.0, 0.0];
    if degree == 1 {
        return (v, g);
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    v[4] = SH_C2[0] * x * y;
    v[5] = SH_C2[1] * y * z;
    v[6] = SH_C2[2] * (2.0 * zz - xx - yy);
    v[7] = SH_C2[3] * x * z;
    v[8] = SH_C2[4] * (xx - yy);
    g[4] = [SH_C2[0] * y, SH_C2[0] * x, 0.0];
    g[5] = [0.0, SH_C2[1] * z, SH_C2[1] * y];
    g[6] = [-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z];
    g[7] = [SH_C2[3] * z, 0.0, SH_C2[3] * x];
    g[8] = [2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0];
    if degree == 2 {
        return (v, g);
    }
    v[9] = SH_C3[0] * y * (3.0 * xx - yy);
    v[10] = SH_C3[1] * x * y * z;
    v[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
    v[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    v[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
    v[14] = SH_C3[5] * z * (xx - yy);
    v[15] = SH_C3[6] * x * (xx - 3.0 * yy);
    g[9] = [SH_C3[0] * 6.0 * x * y, SH_C3[0] * (3.0 * xx - 3.0 * yy), 0.0];
    g[10] = [SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y];
    g[11] = [-2.0 * SH_C3[2] * x * y, SH_C3[2] * (4.0 * zz - xx - 3.0 * yy), 8.0 * SH_C3[2] * y * z];
    g[12] = [-6.0 * SH_C3[3] * x * z, -6.0 * SH_C3[3] * y * z, SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)];
    g[13] = [SH_C3[4] * (4.0 * zz - 3.0 * xx - yy), -2.0 * SH_C3[4] * x * y, 8.0 * SH_C3[4] * x * z];
    g[14] = [2.0 * SH_C3[5] * x * z, -2.0 * SH_C3[5] * y * z, SH_C3[5] * (xx - yy)];
    g[15] = [SH_C3[6] * (3.0 * xx - 3.0 * yy), -6.0 * SH_C3[6] * x * y, 0.0];
    (v, g)
}

/// Evaluated color plus the channels that were clamped at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShColor {
    pub color: Vector3<f64>,
    pub clamp_mask: [bool; 3],
}

fn view_dir(splat: &GaussianSplat, cam_pos: &Vector3<f64>) -> Result<(Vector3<f64>, f64)> {
    let v = splat.mean - cam_pos;
    let n = v.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::DegenerateDirection);
    }
    Ok((v / n, n))
}

pub fn eval_sh_color(splat: &GaussianSplat, cam_pos: &Vector3<f64>, degree: u8) -> Result<ShColor> {
    let (dir, _) = view_dir(splat, cam_pos)?;
    let y = basis(degree, &dir);
    let mut color = Vector3::zeros();
    let mut clamp_mask = [false; 3];
    for ch in 0..3 {
        let raw: f64 = (0..coeffs_for_degree(degree)).map(|k| y[k] * splat.sh[k][ch]).sum::<f64>() + 0.5;
        clamp_mask[ch] = raw < 0.0;
        color[ch] = raw.max(0.0);
    }
    Ok(ShColor { color, clamp_mask })
}

/// Gradients of `eval_sh_color` for an upstream `d_color`: w.r.t. the SH
/// coefficients and, through the view direction, w.r.t. the splat mean.
pub fn sh_color_backward(
    splat: &GaussianSplat,
    cam_pos: &Vector3<f64>,
    degree: u8,
    d_color: &Vector3<f64>,
    clamp_mask: [bool; 3],
) -> Result<([[f64; 3]; SH_COEFFS], Vector3<f64>)> {
    let (dir, dist) = view_dir(splat, cam_pos)?;
    let (y, dy) = basis_with_grad(degree, &dir);
    let mut d_sh = [[0.0; 3]; SH_COEFFS];
    let mut d_dir = Vector3::zeros();
    for ch in 0..3 {
        if clamp_mask[ch] {
            continue;
        }
        let g = d_color[ch];
        for k in 0..coeffs_for_degree(degree) {
            d_sh[k][ch] = y[k] * g;
            for a in 0..3 {
                d_dir[a] += dy[k][a] * splat.sh[k][ch] * g;
            }
        }
    }
    // d(v/|v|)/dv = (I - dir dir^T) / |v|
    let proj = (Matrix3::identity() - dir * dir.transpose()) / dist;
    Ok((d_sh, proj * d_dir))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    fn splat_with_sh(sh: [[f64; 3]; SH_COEFFS]) -> GaussianSplat {
        GaussianSplat {
            mean: Vector3::new(0.0, 0.0, 5.0),
            rotation: [1.0, 0.0, 0.0, 0.0],
            scale: Vector3::new(1.0, 1.0, 1.0),
            opacity: 1.0,
            sh,
        }
    }

    #[test]
    fn zero_coefficients_give_half_grey() {
        let s = splat_with_sh([[0.0; 3]; SH_COEFFS]);
        let c = eval_sh_color(&s, &Vector3::zeros(), 3).unwrap();
        assert_eq!(c.color, Vector3::new(0.5, 0.5, 0.5));
        assert_eq!(c.clamp_mask, [false; 3]);
    }

    #[test]
    fn negative_dc_is_clamped() {
        let mut sh = [[0.0; 3]; SH_COEFFS];
        sh[0][0] = -2.0;
        let c = eval_sh_color(&splat_with_sh(sh), &Vector3::zeros(), 3).unwrap();
        assert_eq!(c.color[0], 0.0);
        assert_eq!(c.clamp_mask, [true, false, false]);
    }

    #[test]
    fn degree_one_on_optical_axis() {
        // dir = (0,0,1): only the z-linear band responds.
        let mut sh = [[0.0; 3]; SH_COEFFS];
        sh[2] = [1.0, 0.0, 0.0];
        sh[1] = [0.0, 1.0, 0.0];
        let c = eval_sh_color(&splat_with_sh(sh), &Vector3::zeros(), 1).unwrap();
        assert!((c.color[0] - (0.5 + SH_C1)).abs() < 1e-15);
        assert_eq!(c.color[1], 0.5);
    }

    #[test]
    fn degenerate_direction_is_rejected() {
        let s = splat_with_sh([[0.0; 3]; SH_COEFFS]);
        assert_eq!(eval_sh_color(&s, &s.mean, 3), Err(Error::DegenerateDirection));
    }

    #[test]
    fn basis_gradient_matches_finite_differences() {
        let d = Vector3::new(0.3, -0.6, 0.74);
        let (_, g) = basis_with_grad(3, &d);
        let h = 1e-6;
        for a in 0..3 {
            let mut dp = d;
            let mut dm = d;
            dp[a] += h;
            dm[a] -= h;
            let (vp, vm) = (basis(3, &dp), basis(3, &dm));
            for k in 0..SH_COEFFS {
                let fd = (vp[k] - vm[k]) / (2.0 * h);
                assert!((fd - g[k][a]).abs() < 1e-8, "k={k} a={a}");
            }
        }
    }

    #[test]
    fn mean_gradient_through_direction() {
        let mut sh = [[0.0; 3]; SH_COEFFS];
        let vals: Vec<f64> = (0..48).map(|i| ((i * 37 % 17) as f64 - 8.0) / 20.0).collect();
        for k in 0..SH_COEFFS {
            for ch in 0..3 {
                sh[k][ch] = vals[k * 3 + ch];
            }
        }
        sh[0] = [1.0, 1.0, 1.0];
        let mut s = splat_with_sh(sh);
        s.mean = Vector3::new(0.4, -0.2, 3.0);
        let cam = Vector3::new(0.1, 0.3, -0.5);
        let w = Vector3::new(0.7, -0.4, 1.1);
        let c = eval_sh_color(&s, &cam, 3).unwrap();
        assert_eq!(c.clamp_mask, [false; 3]);
        let (_, d_mean) = sh_color_backward(&s, &cam, 3, &w, c.clamp_mask).unwrap();
        let h = 1e-6;
        for a in 0..3 {
            let mut sp = s.clone();
            let mut sm = s.clone();
            sp.mean[a] += h;
            sm.mean[a] -= h;
            let lp = eval_sh_color(&sp, &cam, 3).unwrap().color.dot(&w);
            let lm = eval_sh_color(&sm, &cam, 3).unwrap().color.dot(&w);
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - d_mean[a]).abs() < 1e-8, "axis {a}: {fd} vs {}", d_mean[a]);
        }
    }
}
