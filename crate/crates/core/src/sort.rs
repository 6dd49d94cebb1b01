//! Global depth ordering with a stable LSD radix sort on order-preserving
//! integer keys.

use alloc::vec;
use alloc::vec::Vec;

use crate::projection::ProjectedSplat;

/// Maps a float to an integer whose unsigned order matches the float order
/// (`-0.0` sorts before `+0.0`).
pub fn float_key(v: f64) -> u64 {
    let bits = v.to_bits();
    if bits >> 63 == 1 {
        !bits
    } else {
        bits | (1 << 63)
    }
}

pub fn float_from_key(key: u64) -> f64 {
    if key >> 63 == 1 {
        f64::from_bits(key & !(1 << 63))
    } else {
        f64::from_bits(!key)
    }
}

/// Stable LSD radix argsort of `keys`, 8 bits per pass.
pub fn radix_argsort(keys: &[u64]) -> Vec<u32> {
    let n = keys.len();
    let mut idx: Vec<u32> = (0..n as u32).collect();
    let mut tmp = vec![0u32; n];
    for pass in 0..8 {
        let shift = pass * 8;
        let mut counts = [0usize; 256];
        for &i in &idx {
            counts[((keys[i as usize] >> shift) & 0xff) as usize] += 1;
        }
        // a pass where every key shares the digit is a no-op
        if counts.iter().any(|&c| c == n) {
            continue;
        }
        let mut offsets = [0usize; 256];
        let mut sum = 0;
        for (o, c) in offsets.iter_mut().zip(counts) {
            *o = sum;
            sum += c;
        }
        for &i in &idx {
            let d = ((keys[i as usize] >> shift) & 0xff) as usize;
            tmp[offsets[d]] = i;
            offsets[d] += 1;
        }
        core::mem::swap(&mut idx, &mut tmp);
    }
    idx
}

/// Visible splats in front-to-back order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SortedSplatList {
    /// Positions into the projected splat list, ascending by depth.
    pub order: Vec<u32>,
}

impl SortedSplatList {
    pub fn visible(&self) -> usize {
        self.order.len()
    }
}

pub fn depth_sort(projected: &[ProjectedSplat]) -> SortedSplatList {
    let keys: Vec<u64> = projected.iter().map(|p| float_key(p.depth)).collect();
    SortedSplatList { order: radix_argsort(&keys) }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_preserves_order() {
        let vals = [-f64::INFINITY, -3.5, -1e-300, -0.0, 0.0, 1e-300, 2.0, 7.25, f64::INFINITY];
        for w in vals.windows(2) {
            assert!(float_key(w[0]) < float_key(w[1]), "{} vs {}", w[0], w[1]);
        }
        for v in vals {
            assert_eq!(float_from_key(float_key(v)).to_bits(), v.to_bits());
        }
    }

    #[test]
    fn small_orders() {
        let keys: Vec<u64> = [3.0, 1.0, 2.0].iter().map(|&d| float_key(d)).collect();
        assert_eq!(radix_argsort(&keys), [1, 2, 0]);
        let keys: Vec<u64> = [1.0, 1.0, 1.0].iter().map(|&d| float_key(d)).collect();
        assert_eq!(radix_argsort(&keys), [0, 1, 2]);
        assert!(radix_argsort(&[]).is_empty());
    }
}
