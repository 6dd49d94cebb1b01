//! Seeded synthetic scenes: random splats in a shell of the view frustum with
//! log-normal scales, plus stochastic gradient images.

use alloc::vec::Vec;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::Serialize;

use crate::backward::GradientImage;
use crate::error::Result;
use crate::scene::{quat_normalize, Camera, GaussianSplat, Scene, SH_COEFFS};
use crate::sh::{coeffs_for_degree, rgb_to_dc};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SyntheticConfig {
    pub splats: usize,
    pub width: u32,
    pub height: u32,
    pub sh_degree: u8,
    /// View-space depth range of the shell.
    pub depth: (f64, f64),
    /// Lateral extent relative to the image border (1.0 = exactly the frustum).
    pub spread: f64,
    /// Median per-axis standard deviation in pixels at the reference resolution.
    pub scale_px: f64,
    /// Log-space standard deviation of the scales.
    pub scale_sigma: f64,
    pub opacity: (f64, f64),
    /// Magnitude of the non-DC SH coefficients.
    pub sh_rest: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            splats: 500,
            width: 128,
            height: 128,
            sh_degree: 3,
            depth: (2.0, 6.0),
            spread: 1.1,
            scale_px: 3.0,
            scale_sigma: 0.5,
            opacity: (0.1, 0.95),
            sh_rest: 0.05,
        }
    }
}

impl SyntheticConfig {
    pub fn with_size(mut self, splats: usize, width: u32, height: u32) -> Self {
        self.splats = splats;
        self.width = width;
        self.height = height;
        self
    }

    /// Camera at the origin looking down +z; focal length equals the width.
    pub fn camera(&self) -> Result<Camera> {
        Camera::look_at(
            Vector3::zeros(),
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.0, -1.0, 0.0),
            self.width as f64,
            self.width,
            self.height,
        )
    }

    pub fn generate(&self, seed: u64) -> Result<(Scene, Camera)> {
        let cam = self.camera()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let log_scale = LogNormal::new(0.0, self.scale_sigma.max(0.0)).expect("finite sigma");
        let n_rest = coeffs_for_degree(self.sh_degree);
        let splats = (0..self.splats)
            .map(|_| {
                let z = rng.random_range(self.depth.0..=self.depth.1);
                let u: f64 = rng.random_range(-1.0..=1.0);
                let v: f64 = rng.random_range(-1.0..=1.0);
                let x = u * self.spread * z * (cam.width as f64 / 2.0) / cam.fx;
                let y = v * self.spread * z * (cam.height as f64 / 2.0) / cam.fy;
                let px = z / cam.fx;
                let scale = Vector3::from_fn(|_, _| self.scale_px * px * log_scale.sample(&mut rng));
                let q: [f64; 4] = core::array::from_fn(|_| StandardNormal.sample(&mut rng));
                let mut sh = [[0.0; 3]; SH_COEFFS];
                for c in 0..3 {
                    sh[0][c] = rgb_to_dc(rng.random_range(0.15..=0.85));
                }
                for coeff in sh.iter_mut().take(n_rest).skip(1) {
                    for c in coeff.iter_mut() {
                        *c = self.sh_rest * rng.random_range(-1.0..=1.0);
                    }
                }
                GaussianSplat {
                    mean: Vector3::new(x, y, z),
                    rotation: quat_normalize(q),
                    scale,
                    opacity: rng.random_range(self.opacity.0..=self.opacity.1),
                    sh,
                }
            })
            .collect();
        Ok((Scene::new(splats, self.sh_degree), cam))
    }
}

/// `dL/dC` drawn uniformly from `[-1, 1]` per pixel and channel.
pub fn random_gradient_image(width: u32, height: u32, seed: u64) -> GradientImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<[f64; 3]> = (0..width as usize * height as usize)
        .map(|_| core::array::from_fn(|_| rng.random_range(-1.0..=1.0)))
        .collect();
    GradientImage { width, height, data }
}
