//! Hardware-path simulation against the per-pixel reference rasterizer.

use hwsplat_core::backward::{backprop_to_3d, buffer_slots, BackwardOptions, GradientImage};
use hwsplat_core::oracle::{recurrence_identity_error, tile_backward, tile_forward, PixelSplatList};
use hwsplat_core::pipeline::{Frame, StreamConfig};
use hwsplat_core::precision::StorageFormat;
use hwsplat_core::reduction::{ReductionConfig, Strategy};
use hwsplat_core::sim::PackingPolicy;
use hwsplat_core::synthetic::{random_gradient_image, SyntheticConfig};

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-8)
}

#[test]
fn forward_matches_reference() {
    for seed in 0..3 {
        let (scene, cam) = SyntheticConfig::default().with_size(500, 128, 128).generate(seed).unwrap();
        let frame = Frame::prepare(&scene, &cam, StreamConfig::default()).unwrap();
        let (target, _) = frame.render(StorageFormat::Float32, true).unwrap();
        let reference = tile_forward(&PixelSplatList::build(&scene, &cam).unwrap(), false);
        let mut worst = 0.0f64;
        for (a, b) in target.color.iter().zip(&reference.color) {
            for ch in 0..3 {
                worst = worst.max((a[ch] - b[ch]).abs());
            }
        }
        for (a, b) in target.transmittance.iter().zip(&reference.transmittance) {
            worst = worst.max((a - b).abs());
        }
        assert!(worst <= 1e-12, "seed {seed}: {worst}");
    }
}

#[test]
fn backward_matches_reference_for_every_strategy() {
    let (scene, cam) = SyntheticConfig::default().with_size(500, 128, 128).generate(11).unwrap();
    let grad = random_gradient_image(128, 128, 5);
    let lists = PixelSplatList::build(&scene, &cam).unwrap();
    let reference = tile_backward(&scene, &cam, &lists, &grad, true);
    for packing in [PackingPolicy::GreedyShared, PackingPolicy::PrimitiveExclusive] {
        let frame = Frame::prepare(&scene, &cam, StreamConfig { subgroup_size: 32, packing }).unwrap();
        let (target, _) = frame.render(StorageFormat::Float32, false).unwrap();
        for strategy in Strategy::ALL {
            let opts = BackwardOptions { reduction: ReductionConfig { strategy, threshold_x: 8 }, check_interlock: true, ..Default::default() };
            let out = frame.backward(&target, &grad, &opts).unwrap();
            let slots = buffer_slots(&out.buffer);
            for (s, (a, b)) in slots.iter().zip(&reference.screen).enumerate() {
                for k in 0..a.0.len() {
                    assert!(rel(a.0[k], b.0[k]) <= 1e-5, "{strategy} splat {s} slot {k}: {} vs {}", a.0[k], b.0[k]);
                }
            }
            let g3 = backprop_to_3d(&scene, &cam, &slots, StorageFormat::Float32);
            for (s, (a, b)) in g3.iter().zip(&reference.splats).enumerate() {
                let (a, b) = (a.to_flat(), b.to_flat());
                for k in 0..a.len() {
                    assert!(rel(a[k], b[k]) <= 1e-5, "{strategy} splat {s} param {k}: {} vs {}", a[k], b[k]);
                }
            }
        }
    }
}

#[test]
fn recurrence_identity_on_synthetic_scenes() {
    for seed in 0..3 {
        let (scene, cam) = SyntheticConfig::default().with_size(300, 64, 64).generate(seed).unwrap();
        let lists = PixelSplatList::build(&scene, &cam).unwrap();
        assert!(recurrence_identity_error(&lists) <= 1e-10);
    }
}

#[test]
fn zero_gradient_image_gives_zero_buffer() {
    let (scene, cam) = SyntheticConfig::default().with_size(100, 64, 64).generate(2).unwrap();
    let frame = Frame::prepare(&scene, &cam, StreamConfig::default()).unwrap();
    let (target, _) = frame.render(StorageFormat::Float32, false).unwrap();
    let out = frame.backward(&target, &GradientImage::zeros(64, 64), &BackwardOptions::default()).unwrap();
    assert!(out.buffer.to_vec().iter().all(|&v| v == 0.0));
}
