//! Reference software rasterizer over exact per-pixel splat lists, evaluated
//! in f64 by direct summation, and a finite-difference gradient checker.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::Vector3;
use serde::Serialize;

use crate::backward::{backprop_alpha_to_screen_params, backprop_to_3d, GradientImage};
use crate::error::Result;
use crate::forward::eval_alpha;
use crate::precision::StorageFormat;
use crate::projection::{project_scene, project_splat, ProjectedSplat, ScreenGradients, SplatGradients};
use crate::reduction::LaneGradient;
use crate::scene::{Camera, GaussianSplat, ParamGroup, Scene, PARAMS_PER_SPLAT};
use crate::sim::pixel_center;
use crate::sort::depth_sort;
use crate::{ALPHA_CULL, T_CULL};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ListEntry {
    pub splat_id: u32,
    pub alpha: f64,
}

/// Depth-ordered `(splat, alpha)` lists per pixel, `alpha >= 1/255` only.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelSplatList {
    pub width: u32,
    pub height: u32,
    pub lists: Vec<Vec<ListEntry>>,
    /// Projected splats indexed by scene id (`None` when culled).
    pub projected: Vec<Option<ProjectedSplat>>,
}

impl PixelSplatList {
    pub fn build(scene: &Scene, cam: &Camera) -> Result<Self> {
        let projected = project_scene(scene, cam)?;
        let order = depth_sort(&projected.splats);
        let (w, h) = (cam.width, cam.height);
        let mut lists = vec![Vec::new(); w as usize * h as usize];
        for &pos in &order.order {
            let p = &projected.splats[pos as usize];
            let Some((x0, y0, x1, y1)) = p.pixel_bounds(w, h) else { continue };
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let c = pixel_center([x, y]);
                    if !p.covers(c) {
                        continue;
                    }
                    let alpha = eval_alpha(p, c);
                    if alpha >= ALPHA_CULL {
                        lists[y as usize * w as usize + x as usize].push(ListEntry { splat_id: p.splat_id, alpha });
                    }
                }
            }
        }
        let mut by_id = vec![None; scene.len()];
        for p in projected.splats {
            let id = p.splat_id as usize;
            by_id[id] = Some(p);
        }
        Ok(Self { width: w, height: h, lists, projected: by_id })
    }

    pub fn color(&self, id: u32) -> Vector3<f64> {
        self.projected[id as usize].as_ref().expect("listed splats are visible").color
    }

    pub fn entries(&self) -> usize {
        self.lists.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleImage {
    pub width: u32,
    pub height: u32,
    pub color: Vec<[f64; 3]>,
    pub transmittance: Vec<f64>,
}

/// Direct front-to-back sum `C = sum T_i alpha_i c_i`. With `t_culling`
/// traversal stops once `T < 1e-4`.
pub fn tile_forward(lists: &PixelSplatList, t_culling: bool) -> OracleImage {
    let mut color = Vec::with_capacity(lists.lists.len());
    let mut transmittance = Vec::with_capacity(lists.lists.len());
    for list in &lists.lists {
        let mut c = Vector3::zeros();
        let mut t = 1.0;
        for e in list {
            if t_culling && t < T_CULL {
                break;
            }
            c += lists.color(e.splat_id) * (t * e.alpha);
            t *= 1.0 - e.alpha;
        }
        color.push([c.x, c.y, c.z]);
        transmittance.push(t);
    }
    OracleImage { width: lists.width, height: lists.height, color, transmittance }
}

/// Transmittance in front of every entry of a list.
fn prefix_transmittance(list: &[ListEntry]) -> Vec<f64> {
    let mut t = 1.0;
    list.iter()
        .map(|e| {
            let before = t;
            t *= 1.0 - e.alpha;
            before
        })
        .collect()
}

/// `S_i = sum_{k>i} T_k alpha_k c_k` by explicit summation.
fn suffix_sums(lists: &PixelSplatList, list: &[ListEntry], t: &[f64]) -> Vec<Vector3<f64>> {
    (0..list.len())
        .map(|i| {
            ((i + 1)..list.len())
                .map(|k| lists.color(list[k].splat_id) * (t[k] * list[k].alpha))
                .fold(Vector3::zeros(), |a, b| a + b)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct OracleGradients {
    /// Screen-space sums per scene splat, in the reduction buffer layout.
    pub screen: Vec<LaneGradient>,
    pub splats: Vec<SplatGradients>,
}

/// Backward pass by direct summation:
/// `dC/dc_i = alpha_i T_i` and `dC/dalpha_i = c_i T_i - S_i / (1 - alpha_i)`.
pub fn tile_backward(scene: &Scene, cam: &Camera, lists: &PixelSplatList, grad: &GradientImage, t_culling: bool) -> OracleGradients {
    let mut screen = vec![LaneGradient::ZERO; scene.len()];
    for (pix, list) in lists.lists.iter().enumerate() {
        if list.is_empty() {
            continue;
        }
        let pixel = [(pix % lists.width as usize) as u32, (pix / lists.width as usize) as u32];
        let dl_dc = grad.data[pix];
        let t = prefix_transmittance(list);
        let s = suffix_sums(lists, list, &t);
        for (i, e) in list.iter().enumerate() {
            if t_culling && t[i] < T_CULL {
                break;
            }
            let p = lists.projected[e.splat_id as usize].as_ref().expect("listed splats are visible");
            let w = e.alpha * t[i];
            let d_color = Vector3::new(dl_dc[0] * w, dl_dc[1] * w, dl_dc[2] * w);
            let d_alpha: f64 = (0..3).map(|ch| dl_dc[ch] * (p.color[ch] * t[i] - s[i][ch] / (1.0 - e.alpha))).sum();
            let (d_opacity, d_mean2d, d_conic) = backprop_alpha_to_screen_params(d_alpha, pixel_center(pixel), p);
            let g = LaneGradient::from_screen(&ScreenGradients { d_color, d_opacity, d_mean2d, d_conic });
            screen[e.splat_id as usize] = screen[e.splat_id as usize] + g;
        }
    }
    let splats = backprop_to_3d(scene, cam, &screen, StorageFormat::Float32);
    OracleGradients { screen, splats }
}

/// Largest per-fragment deviation between the recurrence value
/// `C'_i - T_i alpha_i c_i` (starting from `C'_1 = C`) and the explicit
/// suffix sum `S_i`, over all pixels and channels.
pub fn recurrence_identity_error(lists: &PixelSplatList) -> f64 {
    let image = tile_forward(lists, false);
    let mut worst = 0.0f64;
    for (pix, list) in lists.lists.iter().enumerate() {
        let t = prefix_transmittance(list);
        let s = suffix_sums(lists, list, &t);
        let mut c_prime = Vector3::from(image.color[pix]);
        for (i, e) in list.iter().enumerate() {
            c_prime -= lists.color(e.splat_id) * (t[i] * e.alpha);
            worst = worst.max((c_prime - s[i]).amax());
        }
    }
    worst
}

/// Per-pixel splat ids of a nominal evaluation. Perturbed losses reuse them
/// so boundary culls and depth order cannot flip between `theta +- h`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenStructure {
    pub width: u32,
    pub lists: Vec<Vec<u32>>,
}

impl FrozenStructure {
    pub fn from_lists(lists: &PixelSplatList) -> Self {
        Self { width: lists.width, lists: lists.lists.iter().map(|l| l.iter().map(|e| e.splat_id).collect()).collect() }
    }
}

/// `L = sum_pixels sum_ch w * C` over a frozen structure; `None` if a listed
/// splat no longer projects.
pub fn frozen_loss(scene: &Scene, cam: &Camera, frozen: &FrozenStructure, weights: &GradientImage) -> Option<f64> {
    let mut projected: Vec<Option<ProjectedSplat>> = vec![None; scene.len()];
    let mut loss = 0.0;
    for (pix, list) in frozen.lists.iter().enumerate() {
        let pixel = [(pix % frozen.width as usize) as u32, (pix / frozen.width as usize) as u32];
        let center = pixel_center(pixel);
        let mut t = 1.0;
        for &id in list {
            let slot = &mut projected[id as usize];
            if slot.is_none() {
                *slot = Some(project_splat(&scene.splats[id as usize], id, cam, scene.sh_degree).ok()?);
            }
            let p = slot.as_ref().expect("just filled");
            let alpha = eval_alpha(p, center);
            let w = weights.data[pix];
            loss += t * alpha * (w[0] * p.color[0] + w[1] * p.color[1] + w[2] * p.color[2]);
            t *= 1.0 - alpha;
        }
    }
    Some(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FdEntry {
    pub splat: u32,
    pub param: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `|analytic - numeric| / max(|analytic|, |numeric|)`; zero when both vanish.
    pub rel_error: f64,
    pub skipped: Option<&'static str>,
}

impl FdEntry {
    pub fn group(&self) -> ParamGroup {
        ParamGroup::of(self.param)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
}

impl FdReport {
    /// Entries with `|analytic| > min_grad` that were actually checked.
    pub fn significant(&self, min_grad: f64) -> impl Iterator<Item = &FdEntry> {
        self.entries.iter().filter(move |e| e.skipped.is_none() && e.analytic.abs() > min_grad)
    }

    /// `(passed, checked)` at `tol` among significant entries.
    pub fn tally(&self, min_grad: f64, tol: f64) -> (usize, usize) {
        let mut passed = 0;
        let mut checked = 0;
        for e in self.significant(min_grad) {
            checked += 1;
            if e.rel_error <= tol {
                passed += 1;
            }
        }
        (passed, checked)
    }

    pub fn pass_rate(&self, min_grad: f64, tol: f64) -> f64 {
        let (p, c) = self.tally(min_grad, tol);
        if c == 0 {
            1.0
        } else {
            p as f64 / c as f64
        }
    }

    pub fn worst(&self, min_grad: f64) -> Option<&FdEntry> {
        self.significant(min_grad).max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Every parameter of every splat, restricted to the active SH bands.
pub fn all_params(scene: &Scene) -> Vec<(u32, usize)> {
    let sh_used = 11 + 3 * crate::sh::coeffs_for_degree(scene.sh_degree);
    (0..scene.len() as u32).flat_map(|s| (0..sh_used).map(move |k| (s, k))).collect()
}

fn in_domain(splat: &GaussianSplat) -> Option<&'static str> {
    if splat.scale.iter().any(|&s| s <= 0.0) {
        return Some("scale left the positive domain");
    }
    if !(splat.opacity > 0.0 && splat.opacity <= 1.0) {
        return Some("opacity left (0, 1]");
    }
    None
}

/// Central differences of the frozen-structure loss against analytic
/// gradients from [`tile_backward`] (without T-culling).
pub fn finite_difference_check(
    scene: &Scene,
    cam: &Camera,
    weights: &GradientImage,
    params: &[(u32, usize)],
    h: f64,
) -> Result<FdReport> {
    let lists = PixelSplatList::build(scene, cam)?;
    let analytic = tile_backward(scene, cam, &lists, weights, false);
    let frozen = FrozenStructure::from_lists(&lists);
    let mut work = scene.clone();
    let mut entries = Vec::with_capacity(params.len());
    for &(s, k) in params {
        let a = analytic.splats[s as usize].to_flat()[k];
        let nominal = scene.splats[s as usize].to_params();
        let mut eval = |delta: f64| -> core::result::Result<f64, &'static str> {
            let mut p: [f64; PARAMS_PER_SPLAT] = nominal;
            p[k] += delta;
            let perturbed = GaussianSplat::from_params(&p);
            if let Some(why) = in_domain(&perturbed) {
                return Err(why);
            }
            work.splats[s as usize] = perturbed;
            let l = frozen_loss(&work, cam, &frozen, weights).ok_or("splat stopped projecting");
            work.splats[s as usize] = scene.splats[s as usize].clone();
            l
        };
        let entry = match (eval(h), eval(-h)) {
            (Ok(lp), Ok(lm)) => {
                let numeric = (lp - lm) / (2.0 * h);
                let denom = a.abs().max(numeric.abs());
                let rel_error = if denom == 0.0 { 0.0 } else { (a - numeric).abs() / denom };
                FdEntry { splat: s, param: k, analytic: a, numeric, rel_error, skipped: None }
            }
            (Err(why), _) | (_, Err(why)) => {
                FdEntry { splat: s, param: k, analytic: a, numeric: f64::NAN, rel_error: f64::NAN, skipped: Some(why) }
            }
        };
        entries.push(entry);
    }
    Ok(FdReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::GaussianSplat;
    use nalgebra::Vector3;

    fn cam() -> Camera {
        Camera::look_at(Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.0, -1.0, 0.0), 32.0, 32, 32).unwrap()
    }

    #[test]
    fn identity_holds_on_overlap() {
        let scene = Scene::new(
            vec![
                GaussianSplat::isotropic(Vector3::new(0.0, 0.0, 3.0), 0.4, 0.8, [0.9, 0.2, 0.1]),
                GaussianSplat::isotropic(Vector3::new(0.1, 0.0, 4.0), 0.5, 0.6, [0.1, 0.7, 0.3]),
            ],
            0,
        );
        let lists = PixelSplatList::build(&scene, &cam()).unwrap();
        assert!(lists.entries() > 0);
        assert!(recurrence_identity_error(&lists) < 1e-12);
    }

    #[test]
    fn zero_gradient_image_gives_zero_gradients() {
        let scene = Scene::new(vec![GaussianSplat::isotropic(Vector3::new(0.0, 0.0, 3.0), 0.4, 0.8, [0.9, 0.2, 0.1])], 0);
        let c = cam();
        let lists = PixelSplatList::build(&scene, &c).unwrap();
        let g = tile_backward(&scene, &c, &lists, &GradientImage::zeros(32, 32), true);
        assert!(g.splats[0].to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_splat_finite_differences() {
        let mut s = GaussianSplat::isotropic(Vector3::new(0.1, -0.05, 3.0), 0.3, 0.7, [0.6, 0.4, 0.5]);
        s.scale = Vector3::new(0.3, 0.2, 0.25);
        s.rotation = crate::scene::quat_normalize([0.9, 0.2, -0.3, 0.1]);
        let scene = Scene::new(vec![s], 0);
        let w = crate::synthetic::random_gradient_image(32, 32, 3);
        let r = finite_difference_check(&scene, &cam(), &w, &all_params(&scene), 1e-4).unwrap();
        let (p, c) = r.tally(1e-6, 1e-3);
        assert_eq!(p, c, "{:?}", r.worst(1e-6));
        assert!(c >= 10);
    }
}
