//! Backward pass: front-to-back recurrence of `(C', T)` inside the per-pixel
//! ordered critical section, per-fragment color/alpha gradients, the chain to
//! screen-space splat parameters, and the per-splat pass to 3D parameters.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use nalgebra::{Matrix2, Vector2, Vector3};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::forward::{eval_alpha_raw, saturate_color, RenderTarget};
use crate::pipeline::Frame;
use crate::precision::StorageFormat;
use crate::projection::{projection_backward, ProjectedSplat, ScreenGradients, SplatGradients};
use crate::reduction::{reduce_gradient, LaneGradient, ReductionConfig, SplatGradientBuffer};
use crate::scene::{Camera, Scene};
use crate::sim::{pixel_center, FragmentLane, PixelInterlock, QUAD_LANES};
use crate::{ALPHA_CULL, ALPHA_MAX, T_CULL};

/// Per-pixel backward state: the remaining color `C'` and transmittance `T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelState {
    pub c_prime: [f64; 3],
    pub t: f64,
}

/// `(C', T)` texture in the render target's storage format.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTexture {
    pub width: u32,
    pub height: u32,
    pub format: StorageFormat,
    pub texels: Vec<PixelState>,
}

impl StateTexture {
    /// `(C'_1, T_1) = (C, 1)` from a forward target.
    pub fn from_target(target: &RenderTarget) -> Self {
        let texels = target.color.iter().map(|&c| PixelState { c_prime: c, t: 1.0 }).collect();
        Self { width: target.width, height: target.height, format: target.format, texels }
    }
}

/// Read-only per-pixel `dL/dC`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<[f64; 3]>,
}

impl GradientImage {
    pub fn zeros(width: u32, height: u32) -> Self {
        Self { width, height, data: vec![[0.0; 3]; width as usize * height as usize] }
    }

    pub fn uniform(width: u32, height: u32, value: [f64; 3]) -> Self {
        Self { width, height, data: vec![value; width as usize * height as usize] }
    }

    pub fn get(&self, pixel: [u32; 2]) -> [f64; 3] {
        self.data[pixel[1] as usize * self.width as usize + pixel[0] as usize]
    }
}

/// Why a fragment produced no gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Culling {
    None,
    Boundary,
    Transmittance,
}

impl Culling {
    pub fn is_culled(self) -> bool {
        self != Self::None
    }
}

/// Per-fragment gradients of one lane.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct IntermediateGradients {
    pub d_color: Vector3<f64>,
    pub d_alpha: f64,
    pub d_opacity: f64,
    pub d_mean2d: Vector2<f64>,
    pub d_conic: Matrix2<f64>,
}

impl IntermediateGradients {
    pub fn to_lane(&self) -> LaneGradient {
        LaneGradient::from_screen(&ScreenGradients {
            d_color: self.d_color,
            d_opacity: self.d_opacity,
            d_mean2d: self.d_mean2d,
            d_conic: self.d_conic,
        })
    }
}

/// State values read inside the critical section.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateRead {
    pub c_prime: [f64; 3],
    pub t: f64,
}

/// The ordered critical section for one fragment.
///
/// Returns the `(C'_i, T_i)` that were read, or the culling reason. Boundary-
/// and T-culled fragments leave the state untouched; helpers may read but
/// never store.
pub fn interlocked_update(
    alpha: f64,
    color: &Vector3<f64>,
    helper: bool,
    state: &mut PixelState,
    format: StorageFormat,
    t_culling: bool,
) -> core::result::Result<StateRead, Culling> {
    if alpha < ALPHA_CULL {
        return Err(Culling::Boundary);
    }
    let read = StateRead { c_prime: state.c_prime, t: state.t };
    if t_culling && read.t < T_CULL {
        return Err(Culling::Transmittance);
    }
    if !helper {
        let c = saturate_color(color, format);
        let w = read.t * alpha;
        for ch in 0..3 {
            state.c_prime[ch] = format.quantize(read.c_prime[ch] - w * c[ch]);
        }
        state.t = format.quantize(read.t * (1.0 - alpha));
    }
    Ok(read)
}

/// `dL/dc_i = dL/dC * alpha * T_i` and
/// `dL/dalpha_i = sum_ch dL/dC * (c_i T_i - C'_i) / (1 - alpha_i)`.
pub fn color_alpha_gradients(alpha: f64, color: &Vector3<f64>, read: &StateRead, dl_dc: [f64; 3], format: StorageFormat) -> (Vector3<f64>, f64) {
    let c = saturate_color(color, format);
    let w = alpha * read.t;
    let d_color = Vector3::new(dl_dc[0] * w, dl_dc[1] * w, dl_dc[2] * w);
    let inv = 1.0 / (1.0 - alpha);
    let d_alpha = (0..3).map(|ch| dl_dc[ch] * (c[ch] * read.t - read.c_prime[ch])).sum::<f64>() * inv;
    (d_color, d_alpha)
}

/// Chain from `dL/dalpha` to opacity, 2D mean and conic at `point`.
pub fn backprop_alpha_to_screen_params(d_alpha: f64, point: Vector2<f64>, p: &ProjectedSplat) -> (f64, Vector2<f64>, Matrix2<f64>) {
    let (alpha, g) = eval_alpha_raw(p, point);
    if alpha > ALPHA_MAX {
        // clamped: alpha is locally constant
        return (0.0, Vector2::zeros(), Matrix2::zeros());
    }
    let d = point - p.mean2d;
    let d_opacity = d_alpha * g;
    let d_mean2d = (p.conic * d) * (d_alpha * alpha);
    let d_conic = (d * d.transpose()) * (-0.5 * alpha * d_alpha);
    (d_opacity, d_mean2d, d_conic)
}

/// Full per-fragment computation: critical section followed by gradient math.
pub fn compute_pixel_gradients(
    lane: &FragmentLane,
    p: &ProjectedSplat,
    state: &mut PixelState,
    dl_dc: [f64; 3],
    format: StorageFormat,
    t_culling: bool,
) -> (IntermediateGradients, Culling) {
    match interlocked_update(lane.alpha, &p.color, lane.helper, state, format, t_culling) {
        Err(c) => (IntermediateGradients::default(), c),
        Ok(read) => (fragment_gradients(lane, p, &read, dl_dc, format), Culling::None),
    }
}

fn fragment_gradients(lane: &FragmentLane, p: &ProjectedSplat, read: &StateRead, dl_dc: [f64; 3], format: StorageFormat) -> IntermediateGradients {
    let (d_color, d_alpha) = color_alpha_gradients(lane.alpha, &p.color, read, dl_dc, format);
    let (d_opacity, d_mean2d, d_conic) = backprop_alpha_to_screen_params(d_alpha, pixel_center(lane.pixel), p);
    IntermediateGradients { d_color, d_alpha, d_opacity, d_mean2d, d_conic }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BackwardOptions {
    pub format: StorageFormat,
    pub reduction: ReductionConfig,
    pub t_culling: bool,
    pub early_quad_termination: bool,
    pub check_interlock: bool,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        Self {
            format: StorageFormat::Float32,
            reduction: ReductionConfig::default(),
            t_culling: true,
            early_quad_termination: true,
            check_interlock: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct BackwardStats {
    /// Non-helper lanes.
    pub fragments: u64,
    pub boundary_culled: u64,
    pub t_culled: u64,
    /// Fragments that produced gradients.
    pub shaded: u64,
    pub quads_terminated: u64,
    pub non_finite: u64,
}

impl BackwardStats {
    pub fn merge(&mut self, o: &Self) {
        self.fragments += o.fragments;
        self.boundary_culled += o.boundary_culled;
        self.t_culled += o.t_culled;
        self.shaded += o.shaded;
        self.quads_terminated += o.quads_terminated;
        self.non_finite += o.non_finite;
    }

    /// Share of in-boundary fragments removed by T-culling.
    pub fn t_cull_rate(&self) -> f64 {
        let n = self.fragments - self.boundary_culled;
        if n == 0 {
            0.0
        } else {
            self.t_culled as f64 / n as f64
        }
    }
}

/// Per-lane outputs of the fragment phase, indexed by
/// `subgroup * subgroup_size + lane`.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneResults {
    pub grads: Vec<LaneGradient>,
    pub culled: Vec<bool>,
}

impl LaneResults {
    pub fn new(frame: &Frame) -> Self {
        let n = frame.stream.subgroups.len() * frame.stream.subgroup_size;
        Self { grads: vec![LaneGradient::ZERO; n], culled: vec![true; n] }
    }
}

pub fn check_backward_inputs(frame: &Frame, target: &RenderTarget, grad: &GradientImage, format: StorageFormat) -> Result<()> {
    let cam = &frame.camera;
    if target.format != format {
        return Err(Error::ForwardTargetMismatch("storage format differs"));
    }
    if target.width != cam.width || target.height != cam.height {
        return Err(Error::ForwardTargetMismatch("image size differs"));
    }
    if grad.width != cam.width || grad.height != cam.height {
        return Err(Error::GradientImageSize { got_w: grad.width, got_h: grad.height, want_w: cam.width, want_h: cam.height });
    }
    Ok(())
}

/// Fragment phase restricted to pixel rows `rows` (bounds must be even so
/// every quad falls in exactly one band). `state` holds exactly those rows.
/// Results are handed to `sink(global_lane, gradient, culled)`.
pub fn shade_band(
    frame: &Frame,
    grad: &GradientImage,
    opts: &BackwardOptions,
    rows: Range<u32>,
    state: &mut [PixelState],
    mut sink: impl FnMut(usize, LaneGradient, bool),
) -> Result<BackwardStats> {
    let width = frame.camera.width as usize;
    debug_assert_eq!(state.len(), (rows.end - rows.start) as usize * width);
    let mut stats = BackwardStats::default();
    let mut lock = opts.check_interlock.then(|| PixelInterlock::new(frame.camera.width, frame.camera.height));
    let size = frame.stream.subgroup_size;
    for (s, sg) in frame.stream.subgroups.iter().enumerate() {
        for q in 0..sg.quads() {
            let base = q * QUAD_LANES;
            if !sg.is_active(base) {
                continue;
            }
            let y = sg.lanes[base].pixel[1];
            if !rows.contains(&y) {
                continue;
            }
            let p = frame.projected_for(sg.lanes[base].splat_id);
            let mut reads: [Option<StateRead>; QUAD_LANES] = [None; QUAD_LANES];
            for j in 0..QUAD_LANES {
                let lane = &sg.lanes[base + j];
                if !lane.helper {
                    stats.fragments += 1;
                }
                let idx = (lane.pixel[1] - rows.start) as usize * width + lane.pixel[0] as usize;
                if !lane.helper && lane.alpha >= ALPHA_CULL {
                    if let Some(lock) = lock.as_mut() {
                        lock.enter(lane)?;
                    }
                }
                match interlocked_update(lane.alpha, &p.color, lane.helper, &mut state[idx], opts.format, opts.t_culling) {
                    Ok(read) => reads[j] = Some(read),
                    Err(Culling::Boundary) if !lane.helper => stats.boundary_culled += 1,
                    Err(Culling::Transmittance) if !lane.helper => stats.t_culled += 1,
                    Err(_) => {}
                }
            }
            // quad_all(cullingFlag): the whole quad returns before any gradient math
            if opts.early_quad_termination && reads.iter().all(Option::is_none) {
                stats.quads_terminated += 1;
                continue;
            }
            for j in 0..QUAD_LANES {
                let lane = &sg.lanes[base + j];
                let Some(read) = reads[j] else { continue };
                let g = fragment_gradients(lane, p, &read, grad.get(lane.pixel), opts.format).to_lane();
                if !lane.helper {
                    stats.shaded += 1;
                    if !g.0.iter().all(|v| v.is_finite()) {
                        stats.non_finite += 1;
                    }
                }
                sink(s * size + base + j, g, false);
            }
        }
    }
    Ok(stats)
}

/// Reduction phase over subgroups `range`.
pub fn reduce_subgroups(frame: &Frame, results: &LaneResults, config: &ReductionConfig, buffer: &SplatGradientBuffer, range: Range<usize>) {
    let size = frame.stream.subgroup_size;
    for s in range {
        let lanes = s * size..(s + 1) * size;
        reduce_gradient(&frame.stream.subgroups[s], &results.grads[lanes.clone()], &results.culled[lanes], config, buffer);
    }
}

pub struct BackwardOutput {
    pub buffer: SplatGradientBuffer,
    pub stats: BackwardStats,
}

/// Single-threaded backward pass over the whole frame.
pub fn render_backward(frame: &Frame, target: &RenderTarget, grad: &GradientImage, opts: &BackwardOptions) -> Result<BackwardOutput> {
    check_backward_inputs(frame, target, grad, opts.format)?;
    let mut state = StateTexture::from_target(target);
    let mut results = LaneResults::new(frame);
    let stats = shade_band(frame, grad, opts, 0..frame.camera.height, &mut state.texels, |i, g, culled| {
        results.grads[i] = g;
        results.culled[i] = culled;
    })?;
    let buffer = SplatGradientBuffer::new(frame.scene_len);
    reduce_subgroups(frame, &results, &opts.reduction, &buffer, 0..frame.stream.subgroups.len());
    Ok(BackwardOutput { buffer, stats })
}

/// Per-splat pass from accumulated screen-space gradients to the activated
/// 3D parameters. Splats that were not visible get zero gradients.
pub fn backprop_to_3d(scene: &Scene, cam: &Camera, screen: &[LaneGradient], format: StorageFormat) -> Vec<SplatGradients> {
    let cam_pos = cam.position();
    scene
        .splats
        .iter()
        .zip(screen)
        .map(|(splat, g)| {
            if g.0.iter().all(|&v| v == 0.0) {
                return SplatGradients::default();
            }
            let mut gate = [true; 3];
            if format.is_unorm() {
                // saturation is pass-through up to 1 and flat above it
                if let Ok(c) = crate::sh::eval_sh_color(splat, &cam_pos, scene.sh_degree) {
                    for ch in 0..3 {
                        gate[ch] = c.color[ch] <= 1.0;
                    }
                }
            }
            projection_backward(splat, cam, scene.sh_degree, &g.to_screen(), gate)
        })
        .collect()
}

/// Screen-space slots of every splat in a buffer.
pub fn buffer_slots(buffer: &SplatGradientBuffer) -> Vec<LaneGradient> {
    (0..buffer.splats() as u32).map(|i| buffer.get(i)).collect()
}
