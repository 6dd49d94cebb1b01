//! Threaded backward pass.
//!
//! The fragment phase is split into horizontal bands of whole quad rows, so
//! each pixel's ordered critical section stays on one thread and the `(C', T)`
//! state needs no locking. The reduction phase then runs subgroup chunks in
//! parallel against the shared atomic buffer; only the order of the atomic
//! float adds differs from the sequential pass.

use std::thread;

use hwsplat_core::backward::{
    check_backward_inputs, reduce_subgroups, render_backward, shade_band, BackwardOptions, BackwardOutput, BackwardStats,
    GradientImage, LaneResults, StateTexture,
};
use hwsplat_core::forward::RenderTarget;
use hwsplat_core::pipeline::Frame;
use hwsplat_core::reduction::{LaneGradient, SplatGradientBuffer};
use hwsplat_core::Result;

/// Even row boundaries splitting `height` into at most `parts` bands.
fn bands(height: u32, parts: usize) -> Vec<(u32, u32)> {
    let quad_rows = height.div_ceil(2) as usize;
    let parts = parts.clamp(1, quad_rows.max(1));
    (0..parts)
        .map(|i| {
            let lo = (quad_rows * i / parts) as u32 * 2;
            let hi = ((quad_rows * (i + 1) / parts) as u32 * 2).min(height);
            (lo, hi)
        })
        .filter(|(lo, hi)| lo < hi)
        .collect()
}

/// Backward pass on `threads` workers. `threads <= 1` is the sequential pass,
/// bit for bit.
pub fn render_backward_threaded(
    frame: &Frame,
    target: &RenderTarget,
    grad: &GradientImage,
    opts: &BackwardOptions,
    threads: usize,
) -> Result<BackwardOutput> {
    if threads <= 1 {
        return render_backward(frame, target, grad, opts);
    }
    check_backward_inputs(frame, target, grad, opts.format)?;
    let width = frame.camera.width as usize;
    let mut state = StateTexture::from_target(target);
    let bands = bands(frame.camera.height, threads);

    let mut slices = Vec::with_capacity(bands.len());
    let mut rest = state.texels.as_mut_slice();
    for &(lo, hi) in &bands {
        let (head, tail) = rest.split_at_mut((hi - lo) as usize * width);
        slices.push(head);
        rest = tail;
    }

    type BandOut = Result<(BackwardStats, Vec<(usize, LaneGradient)>)>;
    let outputs: Vec<BandOut> = thread::scope(|s| {
        let handles: Vec<_> = bands
            .iter()
            .zip(slices)
            .map(|(&(lo, hi), slice)| {
                s.spawn(move || {
                    let mut shaded = Vec::new();
                    let stats = shade_band(frame, grad, opts, lo..hi, slice, |i, g, _| shaded.push((i, g)))?;
                    Ok((stats, shaded))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("backward worker panicked")).collect()
    });

    let mut results = LaneResults::new(frame);
    let mut stats = BackwardStats::default();
    for out in outputs {
        let (band_stats, shaded) = out?;
        stats.merge(&band_stats);
        for (i, g) in shaded {
            results.grads[i] = g;
            results.culled[i] = false;
        }
    }

    let buffer = SplatGradientBuffer::new(frame.scene_len);
    let n = frame.stream.subgroups.len();
    let chunk = n.div_ceil(threads).max(1);
    thread::scope(|s| {
        for start in (0..n).step_by(chunk) {
            let (results, buffer) = (&results, &buffer);
            s.spawn(move || reduce_subgroups(frame, results, &opts.reduction, buffer, start..(start + chunk).min(n)));
        }
    });
    Ok(BackwardOutput { buffer, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use hwsplat_core::pipeline::StreamConfig;
    use hwsplat_core::precision::StorageFormat;
    use hwsplat_core::synthetic::{random_gradient_image, SyntheticConfig};

    #[test]
    fn bands_cover_rows_on_quad_boundaries() {
        for (h, p) in [(4, 1), (4, 8), (64, 3), (130, 7)] {
            let b = bands(h, p);
            assert_eq!(b.first().unwrap().0, 0);
            assert_eq!(b.last().unwrap().1, h);
            assert!(b.windows(2).all(|w| w[0].1 == w[1].0));
            assert!(b.iter().all(|&(lo, _)| lo % 2 == 0));
        }
    }

    #[test]
    fn threaded_matches_sequential() {
        let (scene, cam) = SyntheticConfig::default().with_size(300, 64, 64).generate(2).unwrap();
        let frame = Frame::prepare(&scene, &cam, StreamConfig::default()).unwrap();
        let (target, _) = frame.render(StorageFormat::Float32, false).unwrap();
        let grad = random_gradient_image(64, 64, 5);
        let opts = BackwardOptions::default();
        let seq = render_backward(&frame, &target, &grad, &opts).unwrap();
        let par = render_backward_threaded(&frame, &target, &grad, &opts, 4).unwrap();
        assert_eq!(seq.stats, par.stats);
        assert_eq!(seq.buffer.atomic_add_count(), par.buffer.atomic_add_count());
        for (a, b) in seq.buffer.to_vec().iter().zip(par.buffer.to_vec()) {
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1e-8), "{a} vs {b}");
        }
    }
}
