//! Frame setup shared by the forward and backward passes: projection, depth
//! sort, rasterization and subgroup packing.

use alloc::vec;
use alloc::vec::Vec;

use crate::backward::{self, BackwardOptions, BackwardOutput, GradientImage};
use crate::error::Result;
use crate::forward::{render_stream, ForwardStats, RenderTarget};
use crate::precision::StorageFormat;
use crate::projection::{project_scene, ProjectedScene, ProjectedSplat, SplatGradients};
use crate::scene::{Camera, Scene};
use crate::sim::{FragmentStream, PackingPolicy, DEFAULT_SUBGROUP_SIZE};
use crate::sort::{depth_sort, SortedSplatList};

/// Sentinel in [`Frame::lookup`] for splats that were culled.
pub const NOT_VISIBLE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamConfig {
    pub subgroup_size: usize,
    pub packing: PackingPolicy,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self { subgroup_size: DEFAULT_SUBGROUP_SIZE, packing: PackingPolicy::default() }
    }
}

/// Everything derived from `(scene, camera)` before any pixel is shaded.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub camera: Camera,
    pub projected: ProjectedScene,
    pub sorted: SortedSplatList,
    /// Scene index to position in `projected.splats`.
    pub lookup: Vec<u32>,
    pub stream: FragmentStream,
    pub scene_len: usize,
}

impl Frame {
    pub fn prepare(scene: &Scene, camera: &Camera, config: StreamConfig) -> Result<Self> {
        scene.validate()?;
        let projected = project_scene(scene, camera)?;
        let sorted = depth_sort(&projected.splats);
        let mut lookup = vec![NOT_VISIBLE; scene.len()];
        for (pos, p) in projected.splats.iter().enumerate() {
            lookup[p.splat_id as usize] = pos as u32;
        }
        let stream = FragmentStream::build(
            &projected.splats,
            &sorted.order,
            camera.width,
            camera.height,
            config.subgroup_size,
            config.packing,
        )?;
        Ok(Self { camera: camera.clone(), projected, sorted, lookup, stream, scene_len: scene.len() })
    }

    /// Projected data of a visible splat.
    pub fn projected_for(&self, splat_id: u32) -> &ProjectedSplat {
        &self.projected.splats[self.lookup[splat_id as usize] as usize]
    }

    /// Visible splats in front-to-back order.
    pub fn sorted_splats(&self) -> impl Iterator<Item = &ProjectedSplat> {
        self.sorted.order.iter().map(|&i| &self.projected.splats[i as usize])
    }

    pub fn render(&self, format: StorageFormat, check_interlock: bool) -> Result<(RenderTarget, ForwardStats)> {
        let cam = &self.camera;
        render_stream(&self.projected.splats, &self.lookup, &self.stream, cam.width, cam.height, format, check_interlock)
    }

    pub fn backward(&self, target: &RenderTarget, grad: &GradientImage, opts: &BackwardOptions) -> Result<BackwardOutput> {
        backward::render_backward(self, target, grad, opts)
    }
}

/// Forward plus backward to 3D parameter gradients in one call.
pub struct Gradients {
    pub target: RenderTarget,
    pub backward: BackwardOutput,
    pub splats: Vec<SplatGradients>,
}

pub fn render_and_backprop(
    scene: &Scene,
    camera: &Camera,
    grad: &GradientImage,
    stream: StreamConfig,
    opts: &BackwardOptions,
) -> Result<Gradients> {
    let frame = Frame::prepare(scene, camera, stream)?;
    let (target, _) = frame.render(opts.format, opts.check_interlock)?;
    let out = frame.backward(&target, grad, opts)?;
    let slots = backward::buffer_slots(&out.buffer);
    let splats = backward::backprop_to_3d(scene, camera, &slots, opts.format);
    Ok(Gradients { target, backward: out, splats })
}
