//! Command-line front end. Every command writes its artifacts and a text +
//! CSV report into `--out`; exit status 0 is success, 1 a failed check and
//! 2 bad input.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use hwsplat_core::backward::{backprop_to_3d, buffer_slots, BackwardOptions, GradientImage};
use hwsplat_core::memory::{sorting_memory_report, tile_pair_count};
use hwsplat_core::oracle::{all_params, finite_difference_check, tile_backward, PixelSplatList};
use hwsplat_core::pipeline::{Frame, StreamConfig};
use hwsplat_core::precision::{gradient_error_report, StorageFormat, MRE_BIN_LABELS};
use hwsplat_core::projection::project_scene;
use hwsplat_core::reduction::{LaneGradient, ReductionConfig, Strategy};
use hwsplat_core::scene::{Camera, Scene, PARAMS_PER_SPLAT};
use hwsplat_core::sim::PackingPolicy;
use hwsplat_core::synthetic::{random_gradient_image, SyntheticConfig};
use serde::Serialize;

use crate::camera::{read_camera, with_resolution, write_camera};
use crate::error::IoError;
use crate::gradfile::GradientFile;
use crate::image::{read_pfm, write_pfm, write_png, FloatImage};
use crate::parallel::render_backward_threaded;
use crate::ply::{read_ply, write_ply};
use crate::report::{Report, RunConfig, Table};

#[derive(Debug, Parser)]
#[command(name = "hwsplat", version, about = "Differentiable Gaussian splat rasterization on a simulated GPU fragment pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Forward render: PNG + PFM image, transmittance map, frame stats.
    Render(Common),
    /// Backward pass into per-splat gradient buffers.
    Backward(BackwardArgs),
    /// Oracle equivalence and finite-difference check.
    Gradcheck(GradcheckArgs),
    /// Atomic-add rates of the reduction strategies.
    ReduceBench(ReduceBenchArgs),
    /// Subgroup cohesion across resolutions, with incoherence maps.
    Cohesion(CohesionArgs),
    /// Gradient error of reduced-precision state textures against float32.
    PrecisionEval(PrecisionArgs),
    /// Sorting memory of the hardware path against a 16x16 tile rasterizer.
    MemoryReport(Common),
    /// Write a synthetic scene as PLY + camera TOML.
    Synth(Common),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Binary PLY scene; a seeded synthetic scene is generated when absent.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Camera TOML, required with --scene.
    #[arg(long)]
    pub camera: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, default_value = "f32", value_parser = parse_format)]
    pub format: StorageFormat,
    #[arg(long, default_value = "hybrid", value_parser = parse_strategy)]
    pub reduction: Strategy,
    /// Minimum active lanes for the subgroup reduction branch.
    #[arg(long = "x", default_value_t = 8)]
    pub threshold_x: u32,
    #[arg(long, default_value = "shared", value_parser = parse_packing)]
    pub packing: PackingPolicy,
    #[arg(long, default_value_t = 32)]
    pub subgroup_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long)]
    pub no_t_culling: bool,
    #[arg(long)]
    pub no_early_quad: bool,
    /// Resolution override; intrinsics are rescaled with it.
    #[arg(long, requires = "height")]
    pub width: Option<u32>,
    #[arg(long, requires = "width")]
    pub height: Option<u32>,
    /// Splat count of the synthetic scene.
    #[arg(long)]
    pub splats: Option<usize>,
    /// Dump per-subgroup records as JSON lines to `trace.jsonl`.
    #[arg(long)]
    pub trace: bool,
}

#[derive(Debug, Clone, Args)]
pub struct BackwardArgs {
    #[command(flatten)]
    pub common: Common,
    /// dL/dC image (PFM); otherwise seeded uniform noise in [-1, 1].
    #[arg(long, conflicts_with = "zero_grad")]
    pub grad_image: Option<PathBuf>,
    /// Use an all-zero dL/dC image.
    #[arg(long)]
    pub zero_grad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Fault {
    Color,
    Opacity,
    Mean2d,
    Conic,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    /// Splats whose parameters are finite-differenced.
    #[arg(long, default_value_t = 50)]
    pub fd_splats: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub fd_step: f64,
    /// Relative tolerance for a finite-difference match.
    #[arg(long, default_value_t = 1e-3)]
    pub fd_tolerance: f64,
    /// Required share of matching parameters.
    #[arg(long, default_value_t = 0.99)]
    pub fd_pass_rate: f64,
    /// Corrupt one screen-space gradient group before checking.
    #[arg(long, value_enum)]
    pub inject_fault: Option<Fault>,
}

#[derive(Debug, Clone, Args)]
pub struct ReduceBenchArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_delimiter = ',', default_value = "naive,quad,subgroup,hybrid", value_parser = parse_strategy)]
    pub strategies: Vec<Strategy>,
    /// Thresholds swept for the subgroup and hybrid strategies.
    #[arg(long, value_delimiter = ',', default_value = "8")]
    pub x_values: Vec<u32>,
}

#[derive(Debug, Clone, Args)]
pub struct CohesionArgs {
    #[command(flatten)]
    pub common: Common,
    /// Resolution multipliers of the base camera.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    pub scales: Vec<u32>,
}

#[derive(Debug, Clone, Args)]
pub struct PrecisionArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_delimiter = ',', default_value = "f32,f16,unorm16,unorm8", value_parser = parse_format)]
    pub formats: Vec<StorageFormat>,
}

fn parse_format(s: &str) -> Result<StorageFormat, String> {
    s.parse().map_err(|e: hwsplat_core::precision::ParseFormatError| e.to_string())
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: &str| e.to_string())
}

fn parse_packing(s: &str) -> Result<PackingPolicy, String> {
    s.parse().map_err(|e: &str| e.to_string())
}

/// Why a command did not succeed; decides the exit status.
#[derive(Debug)]
pub enum Failure {
    Input(String),
    Check(Vec<String>),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Check(_) => 1,
            Self::Input(_) => 2,
        }
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        Self::Input(e.to_string())
    }
}

impl From<hwsplat_core::Error> for Failure {
    fn from(e: hwsplat_core::Error) -> Self {
        Self::Input(e.to_string())
    }
}

/// Seed of the stochastic gradient image, decorrelated from the scene seed.
pub fn gradient_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

struct Setup {
    scene: Scene,
    camera: Camera,
    config: RunConfig,
}

impl Common {
    fn load(&self, command: &str, synth_default: (usize, u32, u32)) -> Result<Setup, Failure> {
        let resolution = self.width.zip(self.height);
        let (scene, camera, splats) = match (&self.scene, &self.camera) {
            (Some(scene), Some(cam)) => {
                let scene = read_ply(scene)?;
                let mut camera = read_camera(cam)?;
                if let Some((w, h)) = resolution {
                    camera = with_resolution(&camera, w, h)?;
                }
                (scene, camera, None)
            }
            (Some(_), None) => return Err(Failure::Input("--camera is required with --scene".into())),
            (None, Some(_)) => return Err(Failure::Input("--camera needs a --scene".into())),
            (None, None) => {
                let (n, w, h) = synth_default;
                let (w, h) = resolution.unwrap_or((w, h));
                let n = self.splats.unwrap_or(n);
                let (scene, camera) = SyntheticConfig::default().with_size(n, w, h).generate(self.seed)?;
                (scene, camera, Some(n))
            }
        };
        fs::create_dir_all(&self.out).map_err(|e| IoError::io(&self.out, e))?;
        let config = RunConfig {
            command: command.to_string(),
            scene: self.scene.as_ref().map_or("synthetic".into(), |p| p.display().to_string()),
            camera: self.camera.clone(),
            out: self.out.clone(),
            format: self.format,
            reduction: self.reduction_config(),
            packing: self.packing,
            subgroup_size: self.subgroup_size,
            resolution,
            seed: self.seed,
            threads: self.threads,
            t_culling: !self.no_t_culling,
            early_quad_termination: !self.no_early_quad,
            splats,
        };
        Ok(Setup { scene, camera, config })
    }

    fn reduction_config(&self) -> ReductionConfig {
        ReductionConfig { strategy: self.reduction, threshold_x: self.threshold_x }
    }

    fn stream(&self) -> StreamConfig {
        StreamConfig { subgroup_size: self.subgroup_size, packing: self.packing }
    }

    fn backward_options(&self, format: StorageFormat) -> BackwardOptions {
        BackwardOptions {
            format,
            reduction: self.reduction_config(),
            t_culling: !self.no_t_culling,
            early_quad_termination: !self.no_early_quad,
            check_interlock: false,
        }
    }
}

const SYNTH_DEFAULT: (usize, u32, u32) = (500, 128, 128);

fn stat_rows(table: &mut Table, prefix: &str, stats: &impl Serialize) {
    if let serde_json::Value::Object(map) = serde_json::to_value(stats).expect("stats serialize") {
        for (k, v) in map {
            table.push(vec![format!("{prefix}{k}"), v.to_string()]);
        }
    }
}

fn write_trace(frame: &Frame, out: &Path) -> Result<(), Failure> {
    let path = out.join("trace.jsonl");
    let mut text = String::new();
    for rec in frame.stream.trace() {
        text += &serde_json::to_string(&rec).expect("trace serializes");
        text.push('\n');
    }
    fs::write(&path, text).map_err(|e| IoError::io(&path, e).into())
}

fn luma(c: &[f64; 3]) -> f64 {
    0.2126 * c[0] + 0.7152 * c[1] + 0.0722 * c[2]
}

/// Runs one command; the returned lines are the console summary.
pub fn run(cli: Cli) -> Result<Vec<String>, Failure> {
    match cli.command {
        Command::Render(c) => render(&c),
        Command::Backward(a) => backward(&a),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::ReduceBench(a) => reduce_bench(&a),
        Command::Cohesion(a) => cohesion(&a),
        Command::PrecisionEval(a) => precision_eval(&a),
        Command::MemoryReport(c) => memory_report(&c),
        Command::Synth(c) => synth(&c),
    }
}

fn render(c: &Common) -> Result<Vec<String>, Failure> {
    let s = c.load("render", SYNTH_DEFAULT)?;
    let frame = Frame::prepare(&s.scene, &s.camera, c.stream())?;
    let (target, stats) = frame.render(c.format, false)?;
    let (w, h) = (target.width, target.height);
    write_pfm(&c.out.join("render.pfm"), &FloatImage::rgb(w, h, &target.color))?;
    write_pfm(&c.out.join("transmittance.pfm"), &FloatImage::gray(w, h, &target.transmittance))?;
    write_png(&c.out.join("render.png"), w, h, &target.color)?;
    if c.trace {
        write_trace(&frame, &c.out)?;
    }
    let mut table = Table::new(&["quantity", "value"]);
    table.push(vec!["splats".into(), s.scene.len().to_string()]);
    stat_rows(&mut table, "projection.", &frame.projected.stats);
    stat_rows(&mut table, "forward.", &stats);
    let coh = frame.stream.cohesion();
    table.push(vec!["cohesion_rate".into(), format!("{:.6}", coh.rate())]);
    Report::new("render", &s.config, table).write(&c.out, "render")?;
    Ok(vec![format!("rendered {w}x{h} ({} splats, {} fragments) into {}", s.scene.len(), stats.fragments, c.out.display())])
}

fn gradient_image(a: &BackwardArgs, cam: &Camera) -> Result<GradientImage, Failure> {
    let (w, h) = (cam.width, cam.height);
    if a.zero_grad {
        return Ok(GradientImage::zeros(w, h));
    }
    let Some(path) = &a.grad_image else {
        return Ok(random_gradient_image(w, h, gradient_seed(a.common.seed)));
    };
    let img = read_pfm(path)?;
    if (img.width, img.height) != (w, h) {
        return Err(Failure::Input(format!(
            "{}: gradient image is {}x{}, camera is {w}x{h}",
            path.display(),
            img.width,
            img.height
        )));
    }
    Ok(GradientImage { width: w, height: h, data: img.to_rgb() })
}

fn backward(a: &BackwardArgs) -> Result<Vec<String>, Failure> {
    let c = &a.common;
    let s = c.load("backward", SYNTH_DEFAULT)?;
    let grad = gradient_image(a, &s.camera)?;
    let frame = Frame::prepare(&s.scene, &s.camera, c.stream())?;
    let (target, fstats) = frame.render(c.format, false)?;
    let out = render_backward_threaded(&frame, &target, &grad, &c.backward_options(c.format), c.threads)?;
    let screen = buffer_slots(&out.buffer);
    let splats = backprop_to_3d(&s.scene, &s.camera, &screen, c.format);
    let screen_rows: Vec<[f64; 9]> = screen.iter().map(|g| g.0).collect();
    let splat_rows: Vec<[f64; PARAMS_PER_SPLAT]> = splats.iter().map(|g| g.to_flat()).collect();
    GradientFile::from_rows(&screen_rows).write(&c.out.join("screen_grads.bin"))?;
    GradientFile::from_rows(&splat_rows).write(&c.out.join("splat_grads.bin"))?;
    if c.trace {
        write_trace(&frame, &c.out)?;
    }
    let mut table = Table::new(&["quantity", "value"]);
    table.push(vec!["splats".into(), s.scene.len().to_string()]);
    stat_rows(&mut table, "forward.", &fstats);
    stat_rows(&mut table, "backward.", &out.stats);
    let rows = [
        ("atomic_adds", out.buffer.atomic_add_count().to_string()),
        ("reduced_fragments", out.buffer.fragment_count().to_string()),
        ("atomic_add_rate", format!("{:.6}", out.buffer.atomic_add_rate())),
        ("t_cull_rate", format!("{:.6}", out.stats.t_cull_rate())),
        ("gradient_l1", format!("{:.9e}", splat_rows.iter().flatten().map(|v| v.abs()).sum::<f64>())),
    ];
    for (k, v) in rows {
        table.push(vec![k.into(), v]);
    }
    Report::new("backward", &s.config, table).write(&c.out, "backward")?;
    Ok(vec![format!(
        "backward: {} splats, {} fragments shaded, atomic-add rate {:.4}",
        s.scene.len(),
        out.stats.shaded,
        out.buffer.atomic_add_rate()
    )])
}

const SCREEN_NAMES: [&str; 9] =
    ["color.r", "color.g", "color.b", "opacity", "mean2d.x", "mean2d.y", "conic.a00", "conic.a01", "conic.a11"];

/// Name of a flat 3D parameter index.
pub fn param_name(k: usize) -> String {
    const XYZ: [&str; 3] = ["x", "y", "z"];
    const WXYZ: [&str; 4] = ["w", "x", "y", "z"];
    const RGB: [&str; 3] = ["r", "g", "b"];
    match k {
        0..=2 => format!("mean.{}", XYZ[k]),
        3..=5 => format!("scale.{}", XYZ[k - 3]),
        6..=9 => format!("rotation.{}", WXYZ[k - 6]),
        10 => "opacity".into(),
        _ => format!("sh[{}].{}", (k - 11) / 3, RGB[(k - 11) % 3]),
    }
}

fn fault_slots(f: Fault) -> std::ops::Range<usize> {
    match f {
        Fault::Color => 0..3,
        Fault::Opacity => 3..4,
        Fault::Mean2d => 4..6,
        Fault::Conic => 6..9,
    }
}

fn inject(screen: &mut [LaneGradient], fault: Option<Fault>) {
    if let Some(f) = fault {
        for g in screen.iter_mut() {
            for v in &mut g.0[fault_slots(f)] {
                *v *= 1.5;
            }
        }
    }
}

/// Worst relative disagreement `|a - r| / max(|r|, 1e-8)` and where it is.
fn worst_disagreement(test: &[f64], reference: &[f64], per: usize) -> (f64, usize, usize) {
    let mut worst = (0.0, 0, 0);
    for (i, (a, r)) in test.iter().zip(reference).enumerate() {
        let e = (a - r).abs() / r.abs().max(1e-8);
        if e > worst.0 || e.is_nan() {
            worst = (e, i / per, i % per);
        }
    }
    worst
}

const EQUIV_TOL: f64 = 1e-5;

fn gradcheck(a: &GradcheckArgs) -> Result<Vec<String>, Failure> {
    let c = &a.common;
    let s = c.load("gradcheck", (50, 32, 32))?;
    let (scene, cam) = (&s.scene, &s.camera);
    let grad = random_gradient_image(cam.width, cam.height, gradient_seed(c.seed));
    let frame = Frame::prepare(scene, cam, c.stream())?;
    let (target, _) = frame.render(StorageFormat::Float32, false)?;
    let hardware = |t_culling: bool| -> Result<Vec<LaneGradient>, Failure> {
        let opts = BackwardOptions { t_culling, ..c.backward_options(StorageFormat::Float32) };
        let out = render_backward_threaded(&frame, &target, &grad, &opts, c.threads)?;
        let mut screen = buffer_slots(&out.buffer);
        inject(&mut screen, a.inject_fault);
        Ok(screen)
    };

    let mut table = Table::new(&["check", "result", "detail"]);
    let mut failures = Vec::new();
    let mut record = |name: &str, ok: bool, detail: String| {
        if !ok {
            failures.push(format!("FAIL {name}: {detail}"));
        }
        table.push(vec![name.into(), if ok { "PASS" } else { "FAIL" }.into(), detail]);
    };

    // oracle equivalence, screen space and 3D
    let t_culling = !c.no_t_culling;
    let lists = PixelSplatList::build(scene, cam)?;
    let oracle = tile_backward(scene, cam, &lists, &grad, t_culling);
    let hw_screen = hardware(t_culling)?;
    let flat = |v: &[LaneGradient]| -> Vec<f64> { v.iter().flat_map(|g| g.0).collect() };
    let (e, splat, k) = worst_disagreement(&flat(&hw_screen), &flat(&oracle.screen), 9);
    record(
        "oracle_screen",
        e <= EQUIV_TOL,
        format!("worst relative error {e:.3e} at splat {splat} parameter {} (tolerance {EQUIV_TOL:.0e})", SCREEN_NAMES[k]),
    );
    let hw_3d: Vec<f64> =
        backprop_to_3d(scene, cam, &hw_screen, StorageFormat::Float32).iter().flat_map(|g| g.to_flat()).collect();
    let oracle_3d: Vec<f64> = oracle.splats.iter().flat_map(|g| g.to_flat()).collect();
    let (e, splat, k) = worst_disagreement(&hw_3d, &oracle_3d, PARAMS_PER_SPLAT);
    record(
        "oracle_3d",
        e <= EQUIV_TOL,
        format!("worst relative error {e:.3e} at splat {splat} parameter {} (tolerance {EQUIV_TOL:.0e})", param_name(k)),
    );

    // finite differences against the simulator's own gradients (no T-culling,
    // matching the frozen-structure loss)
    let fd_screen = if t_culling { hardware(false)? } else { hw_screen };
    let fd_3d = backprop_to_3d(scene, cam, &fd_screen, StorageFormat::Float32);
    let params: Vec<_> = all_params(scene).into_iter().filter(|&(sp, _)| (sp as usize) < a.fd_splats).collect();
    let mut fd = finite_difference_check(scene, cam, &grad, &params, a.fd_step)?;
    for e in &mut fd.entries {
        e.analytic = fd_3d[e.splat as usize].to_flat()[e.param];
        let denom = e.analytic.abs().max(e.numeric.abs());
        e.rel_error = if denom == 0.0 { 0.0 } else { (e.analytic - e.numeric).abs() / denom };
    }
    let (passed, checked) = fd.tally(1e-6, a.fd_tolerance);
    let rate = fd.pass_rate(1e-6, a.fd_tolerance);
    let worst = fd
        .worst(1e-6)
        .map(|w| {
            format!(
                "; worst splat {} parameter {}: analytic {:.6e} numeric {:.6e}",
                w.splat,
                param_name(w.param),
                w.analytic,
                w.numeric
            )
        })
        .unwrap_or_default();
    record(
        "finite_differences",
        rate >= a.fd_pass_rate,
        format!("{passed}/{checked} within {:.0e} (required {:.1}%){worst}", a.fd_tolerance, 100.0 * a.fd_pass_rate),
    );

    let mut fd_table = Table::new(&["splat", "parameter", "analytic", "numeric", "rel_error", "skipped"]);
    for e in &fd.entries {
        fd_table.push(vec![
            e.splat.to_string(),
            param_name(e.param),
            format!("{:.9e}", e.analytic),
            format!("{:.9e}", e.numeric),
            format!("{:.3e}", e.rel_error),
            e.skipped.unwrap_or("").into(),
        ]);
    }
    let mut report = Report::new("gradcheck", &s.config, table);
    if let Some(f) = a.inject_fault {
        report.note("injected_fault", format!("{f:?}").to_lowercase());
    }
    report.write(&c.out, "gradcheck")?;
    Report::new("gradcheck finite differences", &s.config, fd_table).write(&c.out, "gradcheck_fd")?;
    if failures.is_empty() {
        Ok(vec![format!("gradcheck passed ({} splats, {checked} parameters finite-differenced)", scene.len())])
    } else {
        Err(Failure::Check(failures))
    }
}

fn reduce_bench(a: &ReduceBenchArgs) -> Result<Vec<String>, Failure> {
    let c = &a.common;
    let s = c.load("reduce-bench", SYNTH_DEFAULT)?;
    let frame = Frame::prepare(&s.scene, &s.camera, c.stream())?;
    let (target, _) = frame.render(c.format, false)?;
    let grad = random_gradient_image(s.camera.width, s.camera.height, gradient_seed(c.seed));
    let run = |strategy: Strategy, x: u32| {
        let opts = BackwardOptions { reduction: ReductionConfig { strategy, threshold_x: x }, ..c.backward_options(c.format) };
        render_backward_threaded(&frame, &target, &grad, &opts, c.threads)
    };
    let naive = run(Strategy::Naive, c.threshold_x)?.buffer.to_vec();
    let mut table = Table::new(&["strategy", "x", "atomic_adds", "fragments", "atomic_add_rate", "max_rel_diff_vs_naive"]);
    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    for &strategy in &a.strategies {
        let xs: Vec<Option<u32>> = match strategy {
            Strategy::Naive | Strategy::Quad => vec![None],
            _ => a.x_values.iter().map(|&x| Some(x)).collect(),
        };
        for x in xs {
            let out = run(strategy, x.unwrap_or(c.threshold_x))?;
            let (diff, _, _) = worst_disagreement(&out.buffer.to_vec(), &naive, 9);
            worst = worst.max(diff);
            let rate = out.buffer.atomic_add_rate();
            let xs = x.map_or("-".into(), |x| x.to_string());
            lines.push(format!("{strategy:>8} x={xs:>2}  rate {rate:.4}"));
            table.push(vec![
                strategy.to_string(),
                xs,
                out.buffer.atomic_add_count().to_string(),
                out.buffer.fragment_count().to_string(),
                format!("{rate:.6}"),
                format!("{diff:.3e}"),
            ]);
        }
    }
    let mut report = Report::new("reduce-bench", &s.config, table);
    report.note("equivalence_tolerance", "1e-4");
    report.note("max_rel_diff_vs_naive", format!("{worst:.3e}"));
    report.write(&c.out, "reduce_bench")?;
    if worst > 1e-4 {
        return Err(Failure::Check(vec![format!("FAIL reduction equivalence: max relative difference {worst:.3e} > 1e-4")]));
    }
    Ok(lines)
}

/// Greyscale render with pixels touched by fragments of mixed-splat
/// subgroups painted red.
fn incoherence_map(frame: &Frame, color: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let width = frame.camera.width as usize;
    let mut img: Vec<[f64; 3]> = color.iter().map(|c| [luma(c).clamp(0.0, 1.0); 3]).collect();
    for sg in frame.stream.subgroups.iter().filter(|sg| !sg.is_single_splat()) {
        for lane in sg.active_lanes().filter(|l| !l.helper) {
            img[lane.pixel[1] as usize * width + lane.pixel[0] as usize] = [1.0, 0.0, 0.0];
        }
    }
    img
}

fn cohesion(a: &CohesionArgs) -> Result<Vec<String>, Failure> {
    let c = &a.common;
    let s = c.load("cohesion", SYNTH_DEFAULT)?;
    let mut table = Table::new(&["scale", "width", "height", "fragments", "coherent_fragments", "cohesion_rate"]);
    let mut lines = Vec::new();
    let mut rates = Vec::new();
    for &f in &a.scales {
        if f == 0 {
            return Err(Failure::Input("resolution scales must be positive".into()));
        }
        let cam = s.camera.scaled(f);
        let frame = Frame::prepare(&s.scene, &cam, c.stream())?;
        let stats = frame.stream.cohesion();
        let (target, _) = frame.render(StorageFormat::Float32, false)?;
        write_png(&c.out.join(format!("incoherence_{f}x.png")), cam.width, cam.height, &incoherence_map(&frame, &target.color))?;
        rates.push(stats.rate());
        lines.push(format!("{f}x ({}x{}): cohesion {:.2}%", cam.width, cam.height, 100.0 * stats.rate()));
        table.push(vec![
            format!("{f}x"),
            cam.width.to_string(),
            cam.height.to_string(),
            stats.fragments.to_string(),
            stats.coherent_fragments.to_string(),
            format!("{:.6}", stats.rate()),
        ]);
    }
    let mut report = Report::new("cohesion", &s.config, table);
    report.note("non_decreasing", rates.windows(2).all(|w| w[0] <= w[1]));
    report.write(&c.out, "cohesion")?;
    Ok(lines)
}

fn precision_eval(a: &PrecisionArgs) -> Result<Vec<String>, Failure> {
    let c = &a.common;
    let s = c.load("precision-eval", SYNTH_DEFAULT)?;
    let frame = Frame::prepare(&s.scene, &s.camera, c.stream())?;
    let grad = random_gradient_image(s.camera.width, s.camera.height, gradient_seed(c.seed));
    let grads = |format: StorageFormat| -> Result<Vec<f64>, Failure> {
        let (target, _) = frame.render(format, false)?;
        let out = render_backward_threaded(&frame, &target, &grad, &c.backward_options(format), c.threads)?;
        let screen = buffer_slots(&out.buffer);
        Ok(backprop_to_3d(&s.scene, &s.camera, &screen, format).iter().flat_map(|g| g.to_flat()).collect())
    };
    let reference = grads(StorageFormat::Float32)?;
    let mut headers = vec!["format".to_string(), "rmse".to_string()];
    for label in MRE_BIN_LABELS {
        headers.push(format!("mre {label}"));
        headers.push(format!("count {label}"));
    }
    let mut table = Table { headers, rows: Vec::new() };
    let mut lines = Vec::new();
    for &format in &a.formats {
        let r = gradient_error_report(&reference, &grads(format)?);
        let mut row = vec![format.to_string(), format!("{:.6e}", r.rmse)];
        for b in 0..3 {
            row.push(r.mre[b].map_or("-".into(), |m| format!("{m:.6e}")));
            row.push(r.bin_counts[b].to_string());
        }
        lines.push(format!("{format:>8}: rmse {:.3e}", r.rmse));
        table.push(row);
    }
    let mut report = Report::new("precision-eval", &s.config, table);
    report.note("reference", "f32");
    report.note("scalars", reference.len());
    report.write(&c.out, "precision")?;
    Ok(lines)
}

fn memory_report(c: &Common) -> Result<Vec<String>, Failure> {
    let s = c.load("memory-report", SYNTH_DEFAULT)?;
    let projected = project_scene(&s.scene, &s.camera)?;
    let pairs = tile_pair_count(&projected.splats, s.camera.width, s.camera.height);
    let r = sorting_memory_report(projected.splats.len() as u64, pairs);
    let mut table = Table::new(&["quantity", "value"]);
    table.push(vec!["scene_splats".into(), s.scene.len().to_string()]);
    // `splats` is the visible count that gets sorted
    stat_rows(&mut table, "", &r);
    Report::new("memory-report", &s.config, table).write(&c.out, "memory")?;
    let ratio = r.reduction.map_or("n/a".into(), |x| format!("{x:.2}x"));
    Ok(vec![format!(
        "sort memory: hardware {} B, tile {} B ({} pairs), ratio {ratio}",
        r.hardware_bytes, r.tile_bytes, r.tile_pairs
    )])
}

fn synth(c: &Common) -> Result<Vec<String>, Failure> {
    if c.scene.is_some() {
        return Err(Failure::Input("synth generates its own scene; drop --scene".into()));
    }
    let s = c.load("synth", SYNTH_DEFAULT)?;
    write_ply(&c.out.join("scene.ply"), &s.scene)?;
    write_camera(&c.out.join("camera.toml"), &s.camera)?;
    Ok(vec![format!("wrote {} splats to {}", s.scene.len(), c.out.join("scene.ply").display())])
}
