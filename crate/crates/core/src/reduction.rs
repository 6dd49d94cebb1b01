//! Accumulation of per-fragment gradients into per-splat slots: naive
//! per-lane atomics, quad reduction, subgroup reduction, and the hybrid of
//! the two gated by a balancing threshold on the active-lane count.

use alloc::vec::Vec;
use core::fmt;
use core::ops::Add;
use core::str::FromStr;
use core::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{Matrix2, Vector2, Vector3};
use serde::Serialize;

use crate::projection::ScreenGradients;
use crate::sim::{
    all_equal_masked, ballot, ballot_bit_count, ballot_find_lsb, lane_eq_mask, quad_add, quad_or, subgroup_add,
    Subgroup,
};

/// Scalars per splat slot: color 3, opacity 1, mean2d 2, conic 3.
pub const GRAD_SCALARS: usize = 9;
/// Parameter groups written by one atomic issue (color, opacity, mean2d, conic).
pub const PARAM_GROUPS: u64 = 4;

/// Per-lane screen-space gradient in slot layout
/// `[dc.r, dc.g, dc.b, d_opacity, dmu.x, dmu.y, dA00, dA01, dA11]`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LaneGradient(pub [f64; GRAD_SCALARS]);

impl Add for LaneGradient {
    type Output = Self;

    fn add(mut self, rhs: Self) -> Self {
        for (a, b) in self.0.iter_mut().zip(rhs.0) {
            *a += b;
        }
        self
    }
}

impl LaneGradient {
    pub const ZERO: Self = Self([0.0; GRAD_SCALARS]);

    pub fn from_screen(g: &ScreenGradients) -> Self {
        Self([
            g.d_color.x,
            g.d_color.y,
            g.d_color.z,
            g.d_opacity,
            g.d_mean2d.x,
            g.d_mean2d.y,
            g.d_conic[(0, 0)],
            g.d_conic[(0, 1)],
            g.d_conic[(1, 1)],
        ])
    }

    pub fn to_screen(&self) -> ScreenGradients {
        let v = &self.0;
        ScreenGradients {
            d_color: Vector3::new(v[0], v[1], v[2]),
            d_opacity: v[3],
            d_mean2d: Vector2::new(v[4], v[5]),
            d_conic: Matrix2::new(v[6], v[7], v[7], v[8]),
        }
    }
}

fn atomic_add_f64(cell: &AtomicU64, v: f64) {
    let mut cur = cell.load(Ordering::Relaxed);
    loop {
        let new = (f64::from_bits(cur) + v).to_bits();
        match cell.compare_exchange_weak(cur, new, Ordering::Relaxed, Ordering::Relaxed) {
            Ok(_) => return,
            Err(actual) => cur = actual,
        }
    }
}

/// Per-splat gradient slots with lock-free scalar atomics and counters.
#[derive(Debug)]
pub struct SplatGradientBuffer {
    slots: Vec<AtomicU64>,
    atomic_adds: AtomicU64,
    fragments: AtomicU64,
}

impl SplatGradientBuffer {
    pub fn new(splats: usize) -> Self {
        Self {
            slots: (0..splats * GRAD_SCALARS).map(|_| AtomicU64::new(0f64.to_bits())).collect(),
            atomic_adds: AtomicU64::new(0),
            fragments: AtomicU64::new(0),
        }
    }

    pub fn splats(&self) -> usize {
        self.slots.len() / GRAD_SCALARS
    }

    /// One `atomicAdd` of a whole slot.
    pub fn atomic_add(&self, splat: u32, g: &LaneGradient) {
        let base = splat as usize * GRAD_SCALARS;
        for (k, &v) in g.0.iter().enumerate() {
            atomic_add_f64(&self.slots[base + k], v);
        }
        self.atomic_adds.fetch_add(PARAM_GROUPS, Ordering::Relaxed);
    }

    pub fn record_fragments(&self, n: u64) {
        self.fragments.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self, splat: u32) -> LaneGradient {
        let base = splat as usize * GRAD_SCALARS;
        let mut out = [0.0; GRAD_SCALARS];
        for (k, v) in out.iter_mut().enumerate() {
            *v = f64::from_bits(self.slots[base + k].load(Ordering::Relaxed));
        }
        LaneGradient(out)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.slots.iter().map(|s| f64::from_bits(s.load(Ordering::Relaxed))).collect()
    }

    /// Issued atomics, counted once per parameter group.
    pub fn atomic_add_count(&self) -> u64 {
        self.atomic_adds.load(Ordering::Relaxed)
    }

    /// Fragments that carried a gradient (the naive strategy's atomic count).
    pub fn fragment_count(&self) -> u64 {
        self.fragments.load(Ordering::Relaxed)
    }

    pub fn atomic_add_rate(&self) -> f64 {
        atomic_add_rate(self.atomic_add_count(), self.fragment_count())
    }
}

/// Issued atomics relative to one atomic per active fragment and group.
pub fn atomic_add_rate(atomic_adds: u64, fragments: u64) -> f64 {
    if fragments == 0 {
        return 0.0;
    }
    atomic_adds as f64 / (fragments * PARAM_GROUPS) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Naive,
    Quad,
    Subgroup,
    Hybrid,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Self::Naive, Self::Quad, Self::Subgroup, Self::Hybrid];

    pub fn name(self) -> &'static str {
        match self {
            Self::Naive => "naive",
            Self::Quad => "quad",
            Self::Subgroup => "subgroup",
            Self::Hybrid => "hybrid",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = &'static str;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "naive" => Ok(Self::Naive),
            "quad" => Ok(Self::Quad),
            "subgroup" => Ok(Self::Subgroup),
            "hybrid" => Ok(Self::Hybrid),
            _ => Err("expected naive, quad, subgroup or hybrid"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ReductionConfig {
    pub strategy: Strategy,
    /// Minimum active lanes for the subgroup branch; ignored by naive/quad.
    pub threshold_x: u32,
}

impl Default for ReductionConfig {
    fn default() -> Self {
        Self { strategy: Strategy::Hybrid, threshold_x: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ReductionPath {
    /// Nothing to reduce.
    Empty,
    PerLane,
    Quad,
    Subgroup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReduceOutcome {
    pub path: ReductionPath,
    pub reduce_mask: u64,
    /// Lanes that issued an atomic.
    pub issuing_mask: u64,
}

/// Reduces the gradients of one subgroup into `buffer`.
///
/// `grads[i]` and `culled[i]` belong to lane `i`. Lanes that are helpers,
/// culled, or unoccupied are excluded through the reduce flag, and their
/// gradient values are never read.
pub fn reduce_gradient(
    sg: &Subgroup,
    grads: &[LaneGradient],
    culled: &[bool],
    config: &ReductionConfig,
    buffer: &SplatGradientBuffer,
) -> ReduceOutcome {
    let size = sg.size();
    debug_assert_eq!(grads.len(), size);
    debug_assert_eq!(culled.len(), size);
    let reduce_flag: Vec<bool> = (0..size).map(|i| !(culled[i] || sg.lanes[i].helper)).collect();
    let reduce_mask = ballot(&reduce_flag, sg.occupancy);
    buffer.record_fragments(ballot_bit_count(reduce_mask) as u64);
    if reduce_mask == 0 {
        return ReduceOutcome { path: ReductionPath::Empty, reduce_mask, issuing_mask: 0 };
    }
    let values: Vec<LaneGradient> =
        (0..size).map(|i| if reduce_mask >> i & 1 == 1 { grads[i] } else { LaneGradient::ZERO }).collect();
    let ids: Vec<u32> = sg.lanes.iter().map(|l| l.splat_id).collect();
    let non_helper = sg.occupancy & !sg.helper_mask();
    let subgroup_ok = all_equal_masked(&ids, non_helper) && ballot_bit_count(reduce_mask) >= config.threshold_x;

    let path = match config.strategy {
        Strategy::Naive => ReductionPath::PerLane,
        Strategy::Quad => ReductionPath::Quad,
        Strategy::Subgroup if subgroup_ok => ReductionPath::Subgroup,
        Strategy::Subgroup => ReductionPath::PerLane,
        Strategy::Hybrid if subgroup_ok => ReductionPath::Subgroup,
        Strategy::Hybrid => ReductionPath::Quad,
    };

    let mut issuing_mask = 0u64;
    match path {
        ReductionPath::PerLane => {
            for i in 0..size {
                if reduce_mask >> i & 1 == 1 {
                    buffer.atomic_add(ids[i], &values[i]);
                    issuing_mask |= 1 << i;
                }
            }
        }
        ReductionPath::Subgroup => {
            let total = subgroup_add(&values, sg.occupancy, LaneGradient::ZERO);
            if let Some(lsb) = ballot_find_lsb(reduce_mask) {
                buffer.atomic_add(ids[lsb as usize], &total);
                issuing_mask |= 1 << lsb;
            }
        }
        ReductionPath::Quad => {
            let sums = quad_add(&values);
            let own: Vec<u64> = (0..size).map(|i| reduce_mask & lane_eq_mask(i)).collect();
            let quad_masks = quad_or(&own);
            for i in 0..size {
                if ballot_find_lsb(quad_masks[i]) == Some(i as u32) {
                    buffer.atomic_add(ids[i], &sums[i]);
                    issuing_mask |= 1 << i;
                }
            }
        }
        ReductionPath::Empty => {}
    }
    ReduceOutcome { path, reduce_mask, issuing_mask }
}
