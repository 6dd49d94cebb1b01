//! Forward pass: per-fragment alpha and fixed-function front-to-back "under"
//! blending into a quantized render target holding color and transmittance.

use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{Vector2, Vector3};
use serde::Serialize;

use crate::error::Result;
use crate::precision::StorageFormat;
use crate::projection::ProjectedSplat;
use crate::sim::{FragmentStream, PixelInterlock};
use crate::{ALPHA_CULL, ALPHA_MAX};

/// Unclamped alpha `o * G` and the Gaussian falloff `G` at `point`.
pub fn eval_alpha_raw(p: &ProjectedSplat, point: Vector2<f64>) -> (f64, f64) {
    let d = point - p.mean2d;
    let power = -0.5 * (d.transpose() * p.conic * d)[(0, 0)];
    let g = libm::exp(power);
    (p.opacity * g, g)
}

/// Fragment alpha at `point` (a pixel center), clamped to [`ALPHA_MAX`].
pub fn eval_alpha(p: &ProjectedSplat, point: Vector2<f64>) -> f64 {
    eval_alpha_raw(p, point).0.min(ALPHA_MAX)
}

/// Color as written by the blend unit: saturated for unorm targets.
pub fn saturate_color(c: &Vector3<f64>, format: StorageFormat) -> Vector3<f64> {
    if format.is_unorm() {
        c.map(|v| v.clamp(0.0, 1.0))
    } else {
        *c
    }
}

/// Per-pixel `(color, T)` storage in a declared format.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderTarget {
    pub width: u32,
    pub height: u32,
    pub format: StorageFormat,
    pub color: Vec<[f64; 3]>,
    pub transmittance: Vec<f64>,
}

impl RenderTarget {
    /// Transparent black with `T = 1` everywhere.
    pub fn new(width: u32, height: u32, format: StorageFormat) -> Self {
        let n = width as usize * height as usize;
        Self { width, height, format, color: vec![[0.0; 3]; n], transmittance: vec![1.0; n] }
    }

    pub fn index(&self, pixel: [u32; 2]) -> usize {
        pixel[1] as usize * self.width as usize + pixel[0] as usize
    }

    pub fn get(&self, pixel: [u32; 2]) -> ([f64; 3], f64) {
        let i = self.index(pixel);
        (self.color[i], self.transmittance[i])
    }
}

/// One read-modify-write of the blend unit:
/// `color += T * alpha * c`, `T *= 1 - alpha`, re-quantized on store.
pub fn blend_under(state: ([f64; 3], f64), alpha: f64, c: &Vector3<f64>, format: StorageFormat) -> ([f64; 3], f64) {
    let (color, t) = state;
    let c = saturate_color(c, format);
    let w = t * alpha;
    let out = [
        format.quantize(color[0] + w * c[0]),
        format.quantize(color[1] + w * c[1]),
        format.quantize(color[2] + w * c[2]),
    ];
    (out, format.quantize(t * (1.0 - alpha)))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ForwardStats {
    pub subgroups: u64,
    pub lanes: u64,
    pub helper_lanes: u64,
    pub fragments: u64,
    pub blended: u64,
    pub boundary_culled: u64,
}

/// Blends the fragment stream into a fresh target. `projected` is indexed by
/// the stream's splat ids through `lookup`.
pub fn render_stream(
    projected: &[ProjectedSplat],
    lookup: &[u32],
    stream: &FragmentStream,
    width: u32,
    height: u32,
    format: StorageFormat,
    check_interlock: bool,
) -> Result<(RenderTarget, ForwardStats)> {
    let mut target = RenderTarget::new(width, height, format);
    let mut stats = ForwardStats { subgroups: stream.subgroups.len() as u64, ..Default::default() };
    let mut lock = check_interlock.then(|| PixelInterlock::new(width, height));
    for lane in stream.lanes() {
        stats.lanes += 1;
        if lane.helper {
            stats.helper_lanes += 1;
            continue;
        }
        stats.fragments += 1;
        if lane.alpha < ALPHA_CULL {
            stats.boundary_culled += 1;
            continue;
        }
        if let Some(lock) = lock.as_mut() {
            lock.enter(lane)?;
        }
        let p = &projected[lookup[lane.splat_id as usize] as usize];
        let i = target.index(lane.pixel);
        let (c, t) = blend_under((target.color[i], target.transmittance[i]), lane.alpha, &p.color, format);
        target.color[i] = c;
        target.transmittance[i] = t;
        stats.blended += 1;
    }
    Ok((target, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix2;

    fn unit_splat(opacity: f64) -> ProjectedSplat {
        ProjectedSplat {
            splat_id: 0,
            mean2d: Vector2::new(0.0, 0.0),
            cov2d: Matrix2::identity(),
            conic: Matrix2::identity(),
            depth: 1.0,
            color: Vector3::new(1.0, 0.0, 0.0),
            clamp_mask: [false; 3],
            quad_axes: [Vector2::new(3.33, 0.0), Vector2::new(0.0, 3.33)],
            opacity,
        }
    }

    #[test]
    fn alpha_at_center_and_half_max() {
        let p = unit_splat(0.7);
        assert_eq!(eval_alpha(&p, Vector2::zeros()), 0.7);
        let p = unit_splat(1.0);
        let a = eval_alpha(&p, Vector2::new(1.17741, 0.0));
        assert!((a - 0.5).abs() < 1e-5);
        // clamped
        assert_eq!(eval_alpha(&p, Vector2::zeros()), ALPHA_MAX);
    }

    #[test]
    fn opaque_single_splat() {
        let s = blend_under(([0.0; 3], 1.0), 1.0, &Vector3::new(1.0, 0.0, 0.0), StorageFormat::Float32);
        assert_eq!(s, ([1.0, 0.0, 0.0], 0.0));
    }

    #[test]
    fn two_half_transparent_splats() {
        let f = StorageFormat::Float32;
        let s = blend_under(([0.0; 3], 1.0), 0.5, &Vector3::new(1.0, 0.0, 0.0), f);
        let s = blend_under(s, 0.5, &Vector3::new(0.0, 1.0, 0.0), f);
        assert_eq!(s, ([0.5, 0.25, 0.0], 0.25));
    }

    #[test]
    fn unorm_saturates_color() {
        let s = blend_under(([0.0; 3], 1.0), 0.5, &Vector3::new(3.0, 0.4, 0.0), StorageFormat::Unorm8);
        assert_eq!(s.0[0], 128.0 / 255.0);
        assert_eq!(s.0[1], 51.0 / 255.0);
        assert_eq!(s.1, 128.0 / 255.0);
    }
}
