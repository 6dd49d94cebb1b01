//! Sorting-stage memory accounting: one key/index pair per visible splat for
//! the hardware path versus one pair per splat-tile intersection for a
//! tile-based rasterizer.

use serde::Serialize;

use crate::projection::ProjectedSplat;

/// Depth key of the hardware path (32-bit float depth).
pub const HW_KEY_BYTES: u64 = 4;
/// Tile path key: 32-bit tile id packed above 32-bit depth.
pub const TILE_KEY_BYTES: u64 = 8;
pub const INDEX_BYTES: u64 = 4;
/// Ping-pong buffers of a radix sort.
pub const SORT_BUFFERS: u64 = 2;
pub const TILE_SIZE: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MemoryReport {
    pub splats: u64,
    pub tile_pairs: u64,
    pub hardware_bytes: u64,
    pub tile_bytes: u64,
    /// `tile_bytes / hardware_bytes`; `None` when nothing is sorted.
    pub reduction: Option<f64>,
}

pub fn sorting_memory_report(n_splats: u64, tile_pairs: u64) -> MemoryReport {
    let hardware_bytes = n_splats * (HW_KEY_BYTES + INDEX_BYTES) * SORT_BUFFERS;
    let tile_bytes = tile_pairs * (TILE_KEY_BYTES + INDEX_BYTES) * SORT_BUFFERS;
    let reduction = (hardware_bytes > 0).then(|| tile_bytes as f64 / hardware_bytes as f64);
    MemoryReport { splats: n_splats, tile_pairs, hardware_bytes, tile_bytes, reduction }
}

/// Number of 16x16 tiles touched by the splat's screen-space bounding box.
pub fn tiles_touched(p: &ProjectedSplat, width: u32, height: u32) -> u64 {
    let h = p.half_extent();
    let tiles_x = width.div_ceil(TILE_SIZE) as i64;
    let tiles_y = height.div_ceil(TILE_SIZE) as i64;
    let ts = TILE_SIZE as f64;
    let x0 = (libm::floor((p.mean2d.x - h.x) / ts) as i64).clamp(0, tiles_x);
    let x1 = (libm::ceil((p.mean2d.x + h.x) / ts) as i64).clamp(0, tiles_x);
    let y0 = (libm::floor((p.mean2d.y - h.y) / ts) as i64).clamp(0, tiles_y);
    let y1 = (libm::ceil((p.mean2d.y + h.y) / ts) as i64).clamp(0, tiles_y);
    ((x1 - x0).max(0) * (y1 - y0).max(0)) as u64
}

/// Analytic splat-tile pair count of a frame.
pub fn tile_pair_count(projected: &[ProjectedSplat], width: u32, height: u32) -> u64 {
    projected.iter().map(|p| tiles_touched(p, width, height)).sum()
}
