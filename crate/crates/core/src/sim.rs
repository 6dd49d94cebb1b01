//! Software model of the fragment stage: 2x2 quad generation with helper
//! invocations, packing of quads into fixed-width subgroups, the subgroup and
//! quad collectives used by gradient reduction, and the per-pixel ordered
//! critical section ("interlock").
//!
//! Lane `4k + j` of a subgroup is lane `j` of quad `k`; within a quad lane 0 is
//! the top-left pixel, lane 1 top-right, lane 2 bottom-left, lane 3
//! bottom-right, so a horizontal swap is `lane ^ 1` and a vertical swap is
//! `lane ^ 2`.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::ops::{Add, BitOr};
use core::str::FromStr;

use nalgebra::Vector2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::forward::eval_alpha;
use crate::projection::ProjectedSplat;

pub const QUAD_LANES: usize = 4;
pub const DEFAULT_SUBGROUP_SIZE: usize = 32;

/// One fragment shader invocation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FragmentLane {
    pub pixel: [u32; 2],
    pub splat_id: u32,
    /// Position of the splat in the global front-to-back order.
    pub rank: u32,
    pub alpha: f64,
    pub helper: bool,
    pub lane: u8,
}

impl FragmentLane {
    fn inactive(lane: u8) -> Self {
        Self { pixel: [0, 0], splat_id: u32::MAX, rank: u32::MAX, alpha: 0.0, helper: true, lane }
    }
}

/// A 2x2 pixel block of one primitive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quad {
    /// Top-left pixel, always at even coordinates.
    pub origin: [u32; 2],
    pub splat_id: u32,
    pub rank: u32,
    pub covered: [bool; QUAD_LANES],
    pub alpha: [f64; QUAD_LANES],
}

impl Quad {
    pub fn pixel(&self, j: usize) -> [u32; 2] {
        [self.origin[0] + (j as u32 & 1), self.origin[1] + (j as u32 >> 1)]
    }
}

pub fn pixel_center(pixel: [u32; 2]) -> Vector2<f64> {
    Vector2::new(pixel[0] as f64 + 0.5, pixel[1] as f64 + 0.5)
}

/// Emits every 2x2 block with at least one pixel center inside the splat's
/// oriented quad, row-major over the quad's clipped bounding box. Uncovered
/// lanes of an emitted block are helpers.
pub fn rasterize_primitive(p: &ProjectedSplat, rank: u32, width: u32, height: u32) -> Vec<Quad> {
    let mut out = Vec::new();
    rasterize_into(p, rank, width, height, &mut out);
    out
}

fn rasterize_into(p: &ProjectedSplat, rank: u32, width: u32, height: u32, out: &mut Vec<Quad>) {
    let Some((x0, y0, x1, y1)) = p.pixel_bounds(width, height) else {
        return;
    };
    for qy in (y0 / 2)..=(y1 / 2) {
        for qx in (x0 / 2)..=(x1 / 2) {
            let origin = [qx * 2, qy * 2];
            let mut quad = Quad { origin, splat_id: p.splat_id, rank, covered: [false; 4], alpha: [0.0; 4] };
            for j in 0..QUAD_LANES {
                let px = quad.pixel(j);
                let c = pixel_center(px);
                quad.covered[j] = p.covers(c);
                // helpers run the same arithmetic
                quad.alpha[j] = eval_alpha(p, c);
            }
            if quad.covered.iter().any(|&c| c) {
                out.push(quad);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PackingPolicy {
    /// Subgroups are padded at primitive boundaries.
    PrimitiveExclusive,
    /// Quads fill subgroups in submission order regardless of primitive.
    #[default]
    GreedyShared,
}

impl FromStr for PackingPolicy {
    type Err = &'static str;

    fn from_str(s: &str) -> core::result::Result<Self, Self::Err> {
        match s {
            "exclusive" | "primitive-exclusive" => Ok(Self::PrimitiveExclusive),
            "shared" | "greedy-shared" => Ok(Self::GreedyShared),
            _ => Err("expected exclusive or shared"),
        }
    }
}

impl fmt::Display for PackingPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PrimitiveExclusive => "exclusive",
            Self::GreedyShared => "shared",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subgroup {
    pub lanes: Vec<FragmentLane>,
    /// Bit `i` set when lane `i` holds a fragment.
    pub occupancy: u64,
}

impl Subgroup {
    pub fn size(&self) -> usize {
        self.lanes.len()
    }

    pub fn quads(&self) -> usize {
        self.lanes.len() / QUAD_LANES
    }

    pub fn is_active(&self, lane: usize) -> bool {
        self.occupancy >> lane & 1 == 1
    }

    pub fn helper_mask(&self) -> u64 {
        self.mask_where(|l| l.helper)
    }

    pub fn mask_where(&self, f: impl Fn(&FragmentLane) -> bool) -> u64 {
        self.lanes
            .iter()
            .enumerate()
            .filter(|(i, l)| self.is_active(*i) && f(l))
            .fold(0, |m, (i, _)| m | 1 << i)
    }

    /// All occupied lanes belong to one splat.
    pub fn is_single_splat(&self) -> bool {
        let ids: Vec<u32> = self.active_lanes().map(|l| l.splat_id).collect();
        all_equal(&ids)
    }

    pub fn active_lanes(&self) -> impl Iterator<Item = &FragmentLane> {
        self.lanes.iter().enumerate().filter(|(i, _)| self.is_active(*i)).map(|(_, l)| l)
    }
}

pub fn check_subgroup_size(size: usize) -> Result<()> {
    if size == 0 || size % QUAD_LANES != 0 || size > 64 {
        return Err(Error::SubgroupSize(size));
    }
    Ok(())
}

/// Packs quads (in submission order) into subgroups of `size` lanes.
pub fn pack_subgroups(quads: &[Quad], size: usize, policy: PackingPolicy) -> Result<Vec<Subgroup>> {
    check_subgroup_size(size)?;
    let per_group = size / QUAD_LANES;
    let mut out = Vec::new();
    let mut current: Vec<&Quad> = Vec::with_capacity(per_group);
    let flush = |current: &mut Vec<&Quad>, out: &mut Vec<Subgroup>| {
        if current.is_empty() {
            return;
        }
        let mut lanes: Vec<FragmentLane> = (0..size).map(|i| FragmentLane::inactive(i as u8)).collect();
        let mut occupancy = 0u64;
        for (k, q) in current.iter().enumerate() {
            for j in 0..QUAD_LANES {
                let i = k * QUAD_LANES + j;
                lanes[i] = FragmentLane {
                    pixel: q.pixel(j),
                    splat_id: q.splat_id,
                    rank: q.rank,
                    alpha: q.alpha[j],
                    helper: !q.covered[j],
                    lane: i as u8,
                };
                occupancy |= 1 << i;
            }
        }
        out.push(Subgroup { lanes, occupancy });
        current.clear();
    };
    for q in quads {
        let boundary = matches!(policy, PackingPolicy::PrimitiveExclusive)
            && current.last().is_some_and(|prev| prev.rank != q.rank);
        if boundary || current.len() == per_group {
            flush(&mut current, &mut out);
        }
        current.push(q);
    }
    flush(&mut current, &mut out);
    Ok(out)
}

/// The fragment workload of one frame, in submission order.
#[derive(Debug, Clone, PartialEq)]
pub struct FragmentStream {
    pub subgroup_size: usize,
    pub policy: PackingPolicy,
    pub subgroups: Vec<Subgroup>,
}

impl FragmentStream {
    /// Rasterizes `projected` in the given front-to-back `order` and packs
    /// the quads.
    pub fn build(
        projected: &[ProjectedSplat],
        order: &[u32],
        width: u32,
        height: u32,
        subgroup_size: usize,
        policy: PackingPolicy,
    ) -> Result<Self> {
        let mut quads = Vec::new();
        for (rank, &pos) in order.iter().enumerate() {
            rasterize_into(&projected[pos as usize], rank as u32, width, height, &mut quads);
        }
        let subgroups = pack_subgroups(&quads, subgroup_size, policy)?;
        Ok(Self { subgroup_size, policy, subgroups })
    }

    pub fn lanes(&self) -> impl Iterator<Item = &FragmentLane> {
        self.subgroups.iter().flat_map(|s| s.active_lanes())
    }

    pub fn cohesion(&self) -> CohesionStats {
        let mut stats = CohesionStats::default();
        for sg in &self.subgroups {
            let n = sg.active_lanes().filter(|l| !l.helper).count() as u64;
            stats.fragments += n;
            if sg.is_single_splat() {
                stats.coherent_fragments += n;
            }
        }
        stats
    }

    pub fn trace(&self) -> Vec<TraceRecord> {
        self.subgroups
            .iter()
            .enumerate()
            .map(|(i, sg)| {
                let mut splat_ids: Vec<u32> = Vec::new();
                for l in sg.active_lanes() {
                    if splat_ids.last() != Some(&l.splat_id) {
                        splat_ids.push(l.splat_id);
                    }
                }
                TraceRecord {
                    subgroup: i as u32,
                    cohesive: splat_ids.len() <= 1,
                    splat_ids,
                    occupancy: sg.occupancy,
                    helper_mask: sg.helper_mask(),
                }
            })
            .collect()
    }
}

/// Non-helper fragments in single-splat subgroups over all non-helper
/// fragments.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CohesionStats {
    pub coherent_fragments: u64,
    pub fragments: u64,
}

impl CohesionStats {
    pub fn rate(&self) -> f64 {
        if self.fragments == 0 {
            1.0
        } else {
            self.coherent_fragments as f64 / self.fragments as f64
        }
    }
}

/// Debug record for one subgroup.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceRecord {
    pub subgroup: u32,
    /// Distinct splat ids in lane order.
    pub splat_ids: Vec<u32>,
    pub cohesive: bool,
    pub occupancy: u64,
    pub helper_mask: u64,
}

// ---- subgroup collectives -------------------------------------------------

/// Bitmask of lanes whose flag is set, restricted to `occupancy`.
pub fn ballot(flags: &[bool], occupancy: u64) -> u64 {
    flags.iter().enumerate().filter(|(i, &f)| f && occupancy >> i & 1 == 1).fold(0, |m, (i, _)| m | 1 << i)
}

pub fn ballot_bit_count(mask: u64) -> u32 {
    mask.count_ones()
}

pub fn ballot_find_lsb(mask: u64) -> Option<u32> {
    (mask != 0).then(|| mask.trailing_zeros())
}

/// True when every value is the same (vacuously true when empty).
pub fn all_equal<T: PartialEq>(values: &[T]) -> bool {
    values.windows(2).all(|w| w[0] == w[1])
}

/// `all_equal` over the lanes selected by `mask`.
pub fn all_equal_masked<T: PartialEq>(values: &[T], mask: u64) -> bool {
    let mut first: Option<&T> = None;
    for (i, v) in values.iter().enumerate() {
        if mask >> i & 1 == 0 {
            continue;
        }
        match first {
            None => first = Some(v),
            Some(f) if f != v => return false,
            _ => {}
        }
    }
    true
}

/// Sum over the lanes in `mask`, in lane order; every lane receives it.
pub fn subgroup_add<T: Copy + Add<Output = T>>(values: &[T], mask: u64, zero: T) -> T {
    values.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).fold(zero, |acc, (_, &v)| acc + v)
}

pub fn quad_swap_horizontal<T: Copy>(values: &[T]) -> Vec<T> {
    (0..values.len()).map(|i| values[i ^ 1]).collect()
}

pub fn quad_swap_vertical<T: Copy>(values: &[T]) -> Vec<T> {
    (0..values.len()).map(|i| values[i ^ 2]).collect()
}

/// `a + swapH(a)`, then `+ swapV(.)`: every lane ends with its quad's total.
pub fn quad_add<T: Copy + Add<Output = T>>(values: &[T]) -> Vec<T> {
    let h: Vec<T> = values.iter().zip(quad_swap_horizontal(values)).map(|(&a, b)| a + b).collect();
    h.iter().zip(quad_swap_vertical(&h)).map(|(&a, b)| a + b).collect()
}

pub fn quad_or<T: Copy + BitOr<Output = T>>(values: &[T]) -> Vec<T> {
    let h: Vec<T> = values.iter().zip(quad_swap_horizontal(values)).map(|(&a, b)| a | b).collect();
    h.iter().zip(quad_swap_vertical(&h)).map(|(&a, b)| a | b).collect()
}

/// Per lane: whether all four lanes of its quad have the flag set.
pub fn quad_all(flags: &[bool]) -> Vec<bool> {
    flags.chunks(QUAD_LANES).flat_map(|q| {
        let all = q.iter().all(|&f| f);
        core::iter::repeat_n(all, q.len())
    }).collect()
}

/// Mask with only `lane` set (`gl_SubgroupEqMask`).
pub fn lane_eq_mask(lane: usize) -> u64 {
    1 << lane
}

// ---- interlock --------------------------------------------------------------

/// Tracks the per-pixel ordered critical section: each pixel must see its
/// covering fragments once each, in submission (rank) order.
#[derive(Debug, Clone)]
pub struct PixelInterlock {
    width: u32,
    /// Rank of the last fragment that entered, plus one; zero when none.
    last: Vec<u32>,
    last_splat: Vec<u32>,
}

impl PixelInterlock {
    pub fn new(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        Self { width, last: vec![0; n], last_splat: vec![u32::MAX; n] }
    }

    pub fn enter(&mut self, lane: &FragmentLane) -> Result<()> {
        let idx = lane.pixel[1] as usize * self.width as usize + lane.pixel[0] as usize;
        if lane.rank.wrapping_add(1) <= self.last[idx] {
            return Err(Error::InterlockViolation {
                x: lane.pixel[0],
                y: lane.pixel[1],
                splat: lane.splat_id,
                previous: self.last_splat[idx],
            });
        }
        self.last[idx] = lane.rank + 1;
        self.last_splat[idx] = lane.splat_id;
        Ok(())
    }
}
