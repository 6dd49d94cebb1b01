//! Properties of the simulated fragment pipeline: ordering, reduction,
//! culling options, cohesion and mixed precision.

use hwsplat_core::backward::{
    backprop_to_3d, buffer_slots, color_alpha_gradients, shade_band, BackwardOptions, GradientImage, StateRead, StateTexture,
};
use hwsplat_core::forward::blend_under;
use hwsplat_core::oracle::PixelSplatList;
use hwsplat_core::pipeline::{Frame, StreamConfig};
use hwsplat_core::precision::{gradient_error_report, StorageFormat};
use hwsplat_core::reduction::{ReductionConfig, Strategy};
use hwsplat_core::scene::{Camera, GaussianSplat, Scene};
use hwsplat_core::sim::{FragmentLane, PackingPolicy, PixelInterlock};
use hwsplat_core::synthetic::{random_gradient_image, SyntheticConfig};
use hwsplat_core::{Error, ALPHA_CULL, T_CULL};
use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn frame(cfg: SyntheticConfig, seed: u64, stream: StreamConfig) -> (Scene, Camera, Frame) {
    let (scene, cam) = cfg.generate(seed).unwrap();
    let f = Frame::prepare(&scene, &cam, stream).unwrap();
    (scene, cam, f)
}

fn opts(strategy: Strategy) -> BackwardOptions {
    BackwardOptions { reduction: ReductionConfig { strategy, threshold_x: 8 }, ..Default::default() }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-8)
}

/// Dense, nearly opaque layers so that transmittance runs out.
fn opaque_config() -> SyntheticConfig {
    SyntheticConfig { opacity: (0.7, 0.99), scale_px: 6.0, depth: (2.0, 3.0), spread: 0.8, ..Default::default() }.with_size(400, 64, 64)
}

#[test]
fn permuted_schedules_give_identical_state() {
    let (_, cam, f) = frame(SyntheticConfig::default().with_size(150, 64, 64), 1, StreamConfig::default());
    let (reference, _) = f.render(StorageFormat::Unorm8, true).unwrap();
    let lanes: Vec<&FragmentLane> = f.stream.lanes().filter(|l| !l.helper && l.alpha >= ALPHA_CULL).collect();
    let mut queues = vec![std::collections::VecDeque::new(); cam.pixel_count()];
    for l in &lanes {
        queues[(l.pixel[1] * cam.width + l.pixel[0]) as usize].push_back(*l);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..5 {
        // any interleaving that keeps each pixel's own order
        let mut q = queues.clone();
        let mut live: Vec<usize> = (0..q.len()).filter(|&i| !q[i].is_empty()).collect();
        let mut color = vec![[0.0; 3]; cam.pixel_count()];
        let mut t = vec![1.0; cam.pixel_count()];
        let mut lock = PixelInterlock::new(cam.width, cam.height);
        while !live.is_empty() {
            let k = rng.random_range(0..live.len());
            let pix = live[k];
            let lane = q[pix].pop_front().unwrap();
            lock.enter(lane).unwrap();
            let p = f.projected_for(lane.splat_id);
            (color[pix], t[pix]) = blend_under((color[pix], t[pix]), lane.alpha, &p.color, StorageFormat::Unorm8);
            if q[pix].is_empty() {
                live.swap_remove(k);
            }
        }
        assert_eq!(color, reference.color);
        assert_eq!(t, reference.transmittance);
    }
    // out-of-order entry is detected
    let pix = queues.iter().find(|q| q.len() >= 2).unwrap();
    let mut lock = PixelInterlock::new(cam.width, cam.height);
    lock.enter(pix[1]).unwrap();
    assert!(matches!(lock.enter(pix[0]), Err(Error::InterlockViolation { .. })));
}

#[test]
fn strategies_agree_and_rates_are_ordered() {
    for (seed, packing) in [(1, PackingPolicy::GreedyShared), (2, PackingPolicy::PrimitiveExclusive)] {
        let (_, _, f) = frame(SyntheticConfig::default().with_size(300, 96, 96), seed, StreamConfig { subgroup_size: 32, packing });
        let (target, _) = f.render(StorageFormat::Float32, false).unwrap();
        let grad = random_gradient_image(96, 96, seed);
        let run = |o: &BackwardOptions| f.backward(&target, &grad, o).unwrap();
        let naive = run(&opts(Strategy::Naive));
        let quad = run(&opts(Strategy::Quad));
        let subgroup = run(&opts(Strategy::Subgroup));
        let hybrid = run(&opts(Strategy::Hybrid));
        let base = naive.buffer.to_vec();
        for out in [&quad, &subgroup, &hybrid] {
            for (a, b) in out.buffer.to_vec().iter().zip(&base) {
                assert!(rel(*a, *b) <= 1e-9);
            }
            assert_eq!(out.buffer.fragment_count(), naive.buffer.fragment_count());
        }
        assert_eq!(naive.buffer.atomic_add_rate(), 1.0);
        let q = quad.buffer.atomic_add_rate();
        assert!((0.25..=1.0).contains(&q));
        assert!(hybrid.buffer.atomic_add_rate() <= q);
        assert!(subgroup.buffer.atomic_add_rate() <= 1.0);
        // the threshold only moves work between the subgroup and quad branches
        let mut last = 0.0;
        for x in [0, 8, 16, 32, 33] {
            let o = BackwardOptions { reduction: ReductionConfig { strategy: Strategy::Hybrid, threshold_x: x }, ..Default::default() };
            let r = run(&o).buffer.atomic_add_rate();
            assert!(r >= last - 1e-15 && r <= q + 1e-15, "X={x}: {r}");
            last = r;
        }
        assert!((last - q).abs() < 1e-15, "X above the subgroup size is the quad strategy");
    }
}

#[test]
fn early_quad_termination_is_bitwise_neutral() {
    let (_, _, f) = frame(opaque_config(), 3, StreamConfig::default());
    let (target, _) = f.render(StorageFormat::Float16, false).unwrap();
    let grad = random_gradient_image(64, 64, 3);
    for strategy in Strategy::ALL {
        for t_culling in [true, false] {
            let on = BackwardOptions { format: StorageFormat::Float16, t_culling, ..opts(strategy) };
            let off = BackwardOptions { early_quad_termination: false, ..on };
            let a = f.backward(&target, &grad, &on).unwrap();
            let b = f.backward(&target, &grad, &off).unwrap();
            let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
            assert_eq!(bits(a.buffer.to_vec()), bits(b.buffer.to_vec()));
            assert_eq!(a.buffer.atomic_add_count(), b.buffer.atomic_add_count());
            assert!(a.stats.quads_terminated > 0);
            assert_eq!(b.stats.quads_terminated, 0);
        }
    }
}

#[test]
fn t_culling_perturbation_is_bounded() {
    let (scene, cam, f) = frame(opaque_config(), 4, StreamConfig::default());
    let (target, _) = f.render(StorageFormat::Float32, false).unwrap();
    let grad = random_gradient_image(64, 64, 4);
    let on = f.backward(&target, &grad, &opts(Strategy::Hybrid)).unwrap();
    let off = f.backward(&target, &grad, &BackwardOptions { t_culling: false, ..opts(Strategy::Hybrid) }).unwrap();
    assert!(on.stats.t_culled > 100, "scene does not exercise T-culling");
    assert_eq!(off.stats.t_culled, 0);

    // per-fragment bounds on what the culled fragments would have contributed
    let lists = PixelSplatList::build(&scene, &cam).unwrap();
    let mut touched = vec![false; scene.len()];
    let mut color_budget = 0.0;
    for (pix, list) in lists.lists.iter().enumerate() {
        let dl = grad.data[pix];
        let dl_sum: f64 = dl.iter().map(|v| v.abs()).sum();
        let mut c_prime = Vector3::from(target.color[pix]);
        let mut t = 1.0;
        let mut culled_here = false;
        // the suffix in C' mixes every later splat's color
        let max_c = list.iter().map(|e| lists.color(e.splat_id).amax()).fold(0.0, f64::max);
        for e in list {
            let c = lists.color(e.splat_id);
            if t < T_CULL {
                culled_here = true;
                touched[e.splat_id as usize] = true;
                let read = StateRead { c_prime: c_prime.into(), t };
                let (dc, da) = color_alpha_gradients(e.alpha, &c, &read, dl, StorageFormat::Float32);
                for ch in 0..3 {
                    assert!(dc[ch].abs() <= T_CULL * dl[ch].abs());
                }
                assert!(da.abs() * (1.0 - e.alpha) <= T_CULL * dl_sum * max_c * (1.0 + 1e-9));
            }
            c_prime -= c * (t * e.alpha);
            t *= 1.0 - e.alpha;
        }
        if culled_here {
            color_budget += T_CULL * dl_sum;
        }
    }
    let a = buffer_slots(&on.buffer);
    let b = buffer_slots(&off.buffer);
    let mut color_change = 0.0;
    for s in 0..scene.len() {
        for ch in 0..3 {
            color_change += (a[s].0[ch] - b[s].0[ch]).abs();
        }
        if !touched[s] {
            for k in 0..a[s].0.len() {
                assert!(rel(a[s].0[k], b[s].0[k]) <= 1e-12, "splat {s} changed without culled fragments");
            }
        }
    }
    assert!(touched.iter().any(|&t| t));
    assert!(color_change <= color_budget, "{color_change} > {color_budget}");
}

#[test]
fn backward_state_returns_to_zero() {
    let (_, cam, f) = frame(SyntheticConfig::default().with_size(200, 64, 64), 5, StreamConfig::default());
    for format in StorageFormat::ALL {
        let (target, _) = f.render(format, false).unwrap();
        let mut state = StateTexture::from_target(&target);
        let o = BackwardOptions { format, t_culling: false, ..Default::default() };
        shade_band(&f, &GradientImage::uniform(64, 64, [1.0; 3]), &o, 0..cam.height, &mut state.texels, |_, _, _| {}).unwrap();
        let bound = match format {
            StorageFormat::Float32 => 1e-12,
            StorageFormat::Float16 => 2e-2,
            StorageFormat::Unorm16 => 1e-3,
            StorageFormat::Unorm8 => 0.15,
        };
        for (s, t) in state.texels.iter().zip(&target.transmittance) {
            assert!(s.c_prime.iter().all(|v| v.abs() <= bound), "{format}: {:?}", s.c_prime);
            assert!((s.t - t).abs() <= bound, "{format}: {} vs {t}", s.t);
        }
    }
}

#[test]
fn worked_two_splat_example() {
    let cam = Camera::look_at(Vector3::zeros(), Vector3::z(), -Vector3::y(), 8.0, 8, 8).unwrap();
    // two wide splats nearly constant over the center pixel
    let mut front = GaussianSplat::isotropic(Vector3::new(0.0, 0.0, 2.0), 50.0, 0.5, [1.0, 0.0, 0.0]);
    let mut back = GaussianSplat::isotropic(Vector3::new(0.0, 0.0, 3.0), 75.0, 0.5, [0.0, 1.0, 0.0]);
    // center the Gaussians exactly on pixel (4,4)
    front.mean.x = 0.5 * 2.0 / 8.0;
    front.mean.y = 0.5 * 2.0 / 8.0;
    back.mean.x = 0.5 * 3.0 / 8.0;
    back.mean.y = 0.5 * 3.0 / 8.0;
    let scene = Scene::new(vec![front, back], 0);
    let f = Frame::prepare(&scene, &cam, StreamConfig::default()).unwrap();
    let (target, _) = f.render(StorageFormat::Float32, true).unwrap();
    let (c, t) = target.get([4, 4]);
    assert!((c[0] - 0.5).abs() < 1e-12 && (c[1] - 0.25).abs() < 1e-12 && c[2].abs() < 1e-12);
    assert!((t - 0.25).abs() < 1e-12);
    let mut grad = GradientImage::zeros(8, 8);
    grad.data[4 * 8 + 4] = [1.0; 3];
    let out = f.backward(&target, &grad, &BackwardOptions::default()).unwrap();
    let g = out.buffer.get(0).to_screen();
    assert!((g.d_color - Vector3::new(0.5, 0.5, 0.5)).norm() < 1e-12);
    // d_opacity = dL/dalpha * G with G = 1 at the center
    assert!((g.d_opacity - 0.5).abs() < 1e-12);
}

#[test]
fn single_splat_color_gradient_is_alpha_sum() {
    let cam = Camera::look_at(Vector3::zeros(), Vector3::z(), -Vector3::y(), 32.0, 32, 32).unwrap();
    let scene = Scene::new(vec![GaussianSplat::isotropic(Vector3::new(0.05, -0.1, 3.0), 0.3, 0.8, [0.2, 0.5, 0.7])], 0);
    let f = Frame::prepare(&scene, &cam, StreamConfig::default()).unwrap();
    let (target, _) = f.render(StorageFormat::Float32, false).unwrap();
    let out = f.backward(&target, &GradientImage::uniform(32, 32, [1.0; 3]), &BackwardOptions::default()).unwrap();
    let lists = PixelSplatList::build(&scene, &cam).unwrap();
    let want: f64 = lists.lists.iter().flatten().map(|e| e.alpha).sum();
    let got = out.buffer.get(0).to_screen().d_color;
    for ch in 0..3 {
        assert!(rel(got[ch], want) < 1e-12);
    }
}

#[test]
fn cohesion_trend_and_exclusive_packing() {
    let (scene, cam) = SyntheticConfig::default().with_size(500, 64, 64).generate(6).unwrap();
    let mut last = 0.0;
    for factor in [1, 2, 4] {
        let c = cam.scaled(factor);
        let shared = Frame::prepare(&scene, &c, StreamConfig::default()).unwrap().stream.cohesion().rate();
        assert!(shared >= last, "x{factor}: {shared} < {last}");
        last = shared;
        let exclusive = Frame::prepare(&scene, &c, StreamConfig { packing: PackingPolicy::PrimitiveExclusive, ..Default::default() }).unwrap();
        assert_eq!(exclusive.stream.cohesion().rate(), 1.0);
    }
}

#[test]
fn packing_is_deterministic_and_sizes_validate() {
    let (scene, cam) = SyntheticConfig::default().with_size(80, 32, 32).generate(7).unwrap();
    let a = Frame::prepare(&scene, &cam, StreamConfig::default()).unwrap();
    let b = Frame::prepare(&scene, &cam, StreamConfig::default()).unwrap();
    assert_eq!(a.stream, b.stream);
    for size in [4, 8, 16, 64] {
        Frame::prepare(&scene, &cam, StreamConfig { subgroup_size: size, ..Default::default() }).unwrap();
    }
    for size in [0, 6, 128] {
        assert!(matches!(Frame::prepare(&scene, &cam, StreamConfig { subgroup_size: size, ..Default::default() }), Err(Error::SubgroupSize(_))));
    }
}

/// Rounding on every store compounds with depth: after `n` blends the
/// transmittance is off by at most `n/2` steps and the color by at most
/// `(n + n(n-1)/2 * max(alpha c)) / 2` steps.
#[test]
fn unorm8_render_error_grows_with_depth() {
    let (_, cam, f) = frame(SyntheticConfig::default().with_size(200, 128, 128), 8, StreamConfig::default());
    let (a, _) = f.render(StorageFormat::Float32, false).unwrap();
    let (b, _) = f.render(StorageFormat::Unorm8, false).unwrap();
    let mut depth = vec![0u32; cam.pixel_count()];
    let mut max_ac = vec![0.0f64; cam.pixel_count()];
    for l in f.stream.lanes().filter(|l| !l.helper && l.alpha >= ALPHA_CULL) {
        let i = (l.pixel[1] * cam.width + l.pixel[0]) as usize;
        depth[i] += 1;
        max_ac[i] = max_ac[i].max(l.alpha * f.projected_for(l.splat_id).color.amax());
    }
    let step = 1.0 / 255.0;
    let mut shallow = 0;
    for i in 0..cam.pixel_count() {
        let n = depth[i] as f64;
        let bound = 0.5 * step * (n + 0.5 * n * (n - 1.0) * max_ac[i]) + 1e-12;
        assert!((a.transmittance[i] - b.transmittance[i]).abs() <= 0.5 * step * n + 1e-12);
        for ch in 0..3 {
            let d = (a.color[i][ch] - b.color[i][ch]).abs();
            assert!(d <= bound, "pixel {i}: {d} > {bound} at depth {n}");
            if depth[i] <= 2 {
                assert!(d <= 2.0 * step);
            }
        }
        shallow += (depth[i] <= 2) as u32;
    }
    assert!(shallow > 20, "{shallow} shallow pixels");
}

#[test]
fn precision_error_ordering() {
    for seed in 0..3 {
        let (scene, cam, f) = frame(SyntheticConfig::default().with_size(300, 64, 64), seed, StreamConfig::default());
        let grad = random_gradient_image(64, 64, seed);
        let grads = |format: StorageFormat| -> Vec<f64> {
            let (t, _) = f.render(format, false).unwrap();
            let out = f.backward(&t, &grad, &BackwardOptions { format, ..Default::default() }).unwrap();
            backprop_to_3d(&scene, &cam, &buffer_slots(&out.buffer), format).iter().flat_map(|g| g.to_flat()).collect()
        };
        let reference = grads(StorageFormat::Float32);
        let same = gradient_error_report(&reference, &reference);
        assert_eq!(same.rmse, 0.0);
        let rmse = |f| gradient_error_report(&reference, &grads(f)).rmse;
        let (h, u16_, u8_) = (rmse(StorageFormat::Float16), rmse(StorageFormat::Unorm16), rmse(StorageFormat::Unorm8));
        assert!(u8_ > u16_ && u8_ > h, "seed {seed}: f16 {h} unorm16 {u16_} unorm8 {u8_}");
    }
}

#[test]
fn shuffled_disjoint_splats_render_identically() {
    let cam = Camera::look_at(Vector3::zeros(), Vector3::z(), -Vector3::y(), 64.0, 64, 64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut splats: Vec<GaussianSplat> = (0..16)
        .map(|i| {
            let (x, y) = ((i % 4) as f64 * 0.2 - 0.3, (i / 4) as f64 * 0.2 - 0.3);
            GaussianSplat::isotropic(Vector3::new(x * 3.0, y * 3.0, 3.0), 0.05, rng.random_range(0.2..0.9), [0.3, 0.6, 0.9])
        })
        .collect();
    let render = |s: &[GaussianSplat]| Frame::prepare(&Scene::new(s.to_vec(), 0), &cam, StreamConfig::default()).unwrap().render(StorageFormat::Float32, true).unwrap().0;
    let a = render(&splats);
    splats.shuffle(&mut rng);
    assert_eq!(render(&splats).color, a.color);
}
