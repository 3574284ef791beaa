//! `bevss`: generate scenes, build supervision, fit and score BEV motion fields.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bevss::eval::{evaluate, interpolate_flow, EvalReport, SpeedBuckets};
use bevss::gradcheck::{run_gradcheck, GradcheckConfig};
use bevss::io::{field_file_name, frame_tag, load_field, load_scene, save_field, save_mask, save_pieces, save_scene, write_file};
use bevss::optimizer::{ChamferMode, Coupling, Objective, Smoothness};
use bevss::pieces::oversegment;
use bevss::render;
use bevss::synth::{generate, preset, Preset};
use bevss::{
    build_supervision, BevMotionField, FrameSet, LabelConfig, OptimConfig, SceneBundle, StaticDynamicMask, SupervisionBundle,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "bevss", version, about = "Self-supervised BEV motion fields from LiDAR and camera flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene.
    Synth(SynthArgs),
    /// Build pseudo masks and rigid pieces.
    Labels(LabelsArgs),
    /// Print the loss components of a predicted field set.
    Loss(LossArgs),
    /// Fit motion fields to a scene.
    Optimize(OptimizeArgs),
    /// Score predicted fields against ground truth.
    Eval(EvalArgs),
    /// Compare analytic loss gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Write PPM images of a scene, its labels and predictions.
    Render(RenderArgs),
}

/// Comma-separated prediction offsets.
#[derive(Clone, Debug)]
struct Offsets(Vec<i32>);

fn parse_frames(s: &str) -> Result<Offsets, String> {
    let offsets = s
        .split(',')
        .map(|t| t.trim().parse::<i32>().map_err(|e| format!("bad offset {t:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    FrameSet::new(offsets.clone(), 0.5).map_err(|e| e.to_string())?;
    Ok(Offsets(offsets))
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, value_parser = |s: &str| s.parse::<Preset>().map_err(|e| e.to_string()))]
    preset: Preset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Prediction offsets, e.g. "-1,1,2".
    #[arg(long, value_parser = parse_frames, allow_hyphen_values = true)]
    frames: Option<Offsets>,
    /// Return every LiDAR sample in range, including ones hidden behind boxes.
    #[arg(long)]
    no_lidar_occlusion: bool,
}

#[derive(Args, Debug)]
struct LabelArgs {
    /// Flow threshold in pixels.
    #[arg(long, default_value_t = 5.0)]
    tau2d: f64,
    /// Scene-flow threshold in meters.
    #[arg(long, default_value_t = 1.0)]
    tau3d: f64,
    /// Occlusion margin in meters.
    #[arg(long, default_value_t = 0.5)]
    delta_d: f64,
}

impl LabelArgs {
    fn config(&self) -> LabelConfig {
        let mut cfg = LabelConfig::default();
        cfg.thresholds.tau_2d = self.tau2d;
        cfg.thresholds.tau_3d = self.tau3d;
        cfg.pieces.delta_d = self.delta_d;
        cfg
    }
}

#[derive(Args, Debug)]
struct LabelsArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    labels: LabelArgs,
    /// Also write superpixel, mask and piece images.
    #[arg(long)]
    render: bool,
}

#[derive(Args, Debug)]
struct WeightArgs {
    #[arg(long, default_value_t = 1.0)]
    lambda_mc: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda_pr: f64,
    #[arg(long, default_value_t = 0.4)]
    lambda_tc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ChamferArg {
    Masked,
    Full,
}

#[derive(Args, Debug)]
struct LossArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Directory holding one field file per offset.
    #[arg(long)]
    pred: PathBuf,
    #[command(flatten)]
    labels: LabelArgs,
    #[command(flatten)]
    weights: WeightArgs,
    /// Use the scene's ground-truth masks instead of pseudo masks.
    #[arg(long)]
    gt_masks: bool,
}

#[derive(Args, Debug)]
struct OptimizeArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    labels: LabelArgs,
    #[command(flatten)]
    weights: WeightArgs,
    /// Prediction offsets, e.g. "-1,1,2"; defaults to the scene's.
    #[arg(long, value_parser = parse_frames, allow_hyphen_values = true)]
    frames: Option<Offsets>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum, default_value_t = ChamferArg::Masked)]
    chamfer: ChamferArg,
    /// Plain gradient steps without the rigidity/temporal preconditioner.
    #[arg(long)]
    no_coupling: bool,
    /// Weight of an optional k-NN smoothness term.
    #[arg(long)]
    smoothness: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    gt_masks: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    /// Offset to score; defaults to the one that spans the horizon.
    #[arg(long, allow_hyphen_values = true)]
    offset: Option<i32>,
    /// Horizon in seconds over which speeds are measured.
    #[arg(long, default_value_t = 1.0)]
    horizon: f64,
    /// Static-bucket speed threshold in m/s.
    #[arg(long, default_value_t = 0.0)]
    static_eps: f64,
    /// Append a key=value block.
    #[arg(long)]
    kv: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 50)]
    points: usize,
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Predicted fields to draw next to the ground truth.
    #[arg(long)]
    pred: Option<PathBuf>,
    #[command(flatten)]
    labels: LabelArgs,
}

enum Failure {
    Args(String),
    Module(bevss::Error),
}

impl From<bevss::Error> for Failure {
    fn from(e: bevss::Error) -> Self {
        Failure::Module(e)
    }
}

type CmdResult = Result<(), Failure>;

/// `x` with nine significant digits, in positional notation where that is
/// reasonable.
fn sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let sci = format!("{x:.8e}");
    let exp: i32 = sci.rsplit('e').next().and_then(|e| e.parse().ok()).unwrap_or(0);
    if (-5..=15).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        sci
    }
}

fn configure_threads() -> CmdResult {
    let Ok(v) = std::env::var("BEVSS_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Args(format!("BEVSS_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Args(format!("cannot set thread count: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Synth(a) => synth(a),
        Command::Labels(a) => labels(a),
        Command::Loss(a) => loss(a),
        Command::Optimize(a) => optimize(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Render(a) => render_cmd(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Args(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Module(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn synth(a: SynthArgs) -> CmdResult {
    let mut spec = preset(a.preset, a.seed);
    if let Some(f) = a.frames {
        spec.frame_set = FrameSet::new(f.0, spec.frame_set.frame_interval_s)?;
    }
    spec.lidar_occlusion = !a.no_lidar_occlusion;
    let scene = generate(&spec)?;
    let manifest = save_scene(&scene, &a.out)?;
    println!("manifest={}", manifest.display());
    println!("points={}", scene.cloud(0)?.len());
    Ok(())
}

fn supervision(scene: &SceneBundle, labels: &LabelArgs, gt_masks: bool) -> Result<SupervisionBundle, Failure> {
    let mut sup = build_supervision(scene, &labels.config())?;
    if gt_masks {
        let gt = scene
            .ground_truth
            .as_ref()
            .ok_or_else(|| Failure::Args("scene has no ground truth".into()))?;
        for (t, m) in sup.masks.iter_mut() {
            *m = gt
                .masks
                .get(t)
                .cloned()
                .ok_or_else(|| Failure::Args(format!("scene has no ground-truth mask for frame {t}")))?;
        }
    }
    Ok(sup)
}

fn labels(a: LabelsArgs) -> CmdResult {
    let scene = load_scene(&a.scene)?;
    let sup = supervision(&scene, &a.labels, false)?;
    for (t, m) in &sup.masks {
        save_mask(&a.out.join(format!("mask_{}.msk", frame_tag(*t))), m)?;
    }
    save_pieces(&a.out.join("pieces_0.seg"), &sup.pieces)?;
    if a.render {
        let cloud0 = scene.cloud(0)?;
        render::render_mask(&scene.grid, cloud0, &sup.masks[&0])?.save(&a.out.join("mask_0.ppm"))?;
        render::render_pieces(&scene.grid, cloud0, &sup.pieces)?.save(&a.out.join("pieces_0.ppm"))?;
        let cfg = a.labels.config();
        for rig in &scene.cameras {
            if let Some(flow) = rig.flows.get(&0) {
                let seg = oversegment(flow, &cfg.pieces)?;
                render::render_segmentation(&seg).save(&a.out.join(format!("superpixels_cam{}.ppm", rig.camera_id)))?;
            }
        }
    }
    for (t, m) in &sup.masks {
        let dynamic = m.count(bevss::PointStatus::Dynamic);
        println!("mask_{}_dynamic={dynamic}", frame_tag(*t));
    }
    println!("pieces={}", sup.pieces.piece_count);
    Ok(())
}

fn load_fields(dir: &Path, scene: &SceneBundle, offsets: &[i32]) -> Result<Vec<BevMotionField>, Failure> {
    offsets
        .iter()
        .map(|&t| {
            let f = load_field(&dir.join(field_file_name(t)), &scene.grid)?;
            if f.time_offset != t {
                return Err(Failure::Args(format!("field file for offset {t} holds offset {}", f.time_offset)));
            }
            Ok(f)
        })
        .collect()
}

fn base_config(scene: &SceneBundle, w: &WeightArgs) -> OptimConfig {
    let mut cfg = OptimConfig {
        frame_set: scene.frame_set.clone(),
        ..OptimConfig::default()
    };
    cfg.weights.lambda_mc = w.lambda_mc;
    cfg.weights.lambda_pr = w.lambda_pr;
    cfg.weights.lambda_tc = w.lambda_tc;
    cfg
}

fn loss(a: LossArgs) -> CmdResult {
    let scene = load_scene(&a.scene)?;
    let sup = supervision(&scene, &a.labels, a.gt_masks)?;
    let cfg = base_config(&scene, &a.weights);
    // Report every component even when its weight is zero.
    let mut all = cfg.clone();
    all.weights.lambda_mc = 1.0;
    all.weights.lambda_pr = 1.0;
    all.weights.lambda_tc = 1.0;
    let objective = Objective::new(&scene, &sup, &all)?;
    let fields = load_fields(&a.pred, &scene, objective.offsets())?;
    let params = objective.params_from_fields(&fields)?;
    let e = objective.evaluate(&params, false)?;
    let c = &e.components;
    let w = cfg.weights;
    let total = w.lambda_mc * c.masked_chamfer.value + w.lambda_pr * c.rigidity.value + w.lambda_tc * c.temporal.value;
    println!("masked_chamfer={}", sig9(c.masked_chamfer.value));
    println!("rigidity={}", sig9(c.rigidity.value));
    println!("temporal_consistency={}", sig9(c.temporal.value));
    println!("total={}", sig9(total));
    Ok(())
}

fn optimize(a: OptimizeArgs) -> CmdResult {
    let scene = load_scene(&a.scene)?;
    let sup = supervision(&scene, &a.labels, a.gt_masks)?;
    let mut cfg = base_config(&scene, &a.weights);
    if let Some(f) = a.frames {
        cfg.frame_set = FrameSet::new(f.0, scene.frame_set.frame_interval_s)?;
    }
    if let Some(n) = a.iters {
        cfg.max_iters = n;
    }
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    cfg.chamfer = match a.chamfer {
        ChamferArg::Masked => ChamferMode::Masked,
        ChamferArg::Full => ChamferMode::Full,
    };
    if a.no_coupling {
        cfg.coupling = None;
    } else {
        cfg.coupling = Some(Coupling::default());
    }
    cfg.smoothness = a.smoothness.map(|weight| Smoothness { weight, k: 8 });
    cfg.seed = a.seed;
    let report = bevss::optimize(&scene, &sup, &cfg)?;
    log::info!("optimization took {:.2} s", report.wall_time_s);
    for f in &report.fields {
        save_field(&a.out.join(field_file_name(f.time_offset)), f)?;
    }
    let mut text = String::new();
    let last = report.final_record();
    let first = report.trajectory.first();
    let _ = writeln!(text, "iterations={}", report.iterations);
    let _ = writeln!(text, "converged={}", report.converged);
    let _ = writeln!(text, "initial_total={}", sig9(first.map_or(f64::NAN, |r| r.total)));
    if let Some(r) = last {
        let _ = writeln!(text, "total={}", sig9(r.total));
        let _ = writeln!(text, "masked_chamfer={}", sig9(r.masked_chamfer));
        let _ = writeln!(text, "rigidity={}", sig9(r.rigidity));
        let _ = writeln!(text, "temporal_consistency={}", sig9(r.temporal));
        let _ = writeln!(text, "smoothness={}", sig9(r.smoothness));
    }
    for f in &report.fields {
        let _ = writeln!(text, "field_{}={}", frame_tag(f.time_offset), field_file_name(f.time_offset));
    }
    write_file(&a.out.join("report.txt"), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

fn format_report(r: &EvalReport, kv: bool) -> String {
    let mut s = String::new();
    let rows = [("static", &r.static_), ("slow", &r.slow), ("fast", &r.fast)];
    let _ = writeln!(s, "{:<8} {:>16} {:>16} {:>8}", "bucket", "mean", "median", "cells");
    for (name, b) in rows {
        let _ = writeln!(s, "{name:<8} {:>16} {:>16} {:>8}", sig9(b.mean), sig9(b.median), b.count);
    }
    if kv {
        for (name, b) in rows {
            let _ = writeln!(s, "{name}_mean={}", sig9(b.mean));
            let _ = writeln!(s, "{name}_median={}", sig9(b.median));
            let _ = writeln!(s, "{name}_count={}", b.count);
        }
    }
    s
}

fn eval(a: EvalArgs) -> CmdResult {
    if !(a.horizon > 0.0) || !(a.static_eps >= 0.0) {
        return Err(Failure::Args("horizon must be positive and the static threshold non-negative".into()));
    }
    let scene = load_scene(&a.scene)?;
    let gt = scene
        .ground_truth
        .as_ref()
        .ok_or_else(|| Failure::Args("scene has no ground truth".into()))?;
    let dt = scene.frame_set.frame_interval_s;
    let horizon_offset = (a.horizon / dt).round() as i32;
    if horizon_offset == 0 || ((horizon_offset as f64) * dt - a.horizon).abs() > 1e-9 {
        return Err(Failure::Args(format!("horizon {} s is not a whole number of {dt} s frames", a.horizon)));
    }
    let offset = a.offset.unwrap_or_else(|| {
        if scene.frame_set.offsets.contains(&horizon_offset) {
            horizon_offset
        } else {
            scene.frame_set.offsets.iter().copied().max().unwrap_or(horizon_offset)
        }
    });
    let pred = load_fields(&a.pred, &scene, &[offset])?.remove(0);
    let truth = gt
        .fields
        .get(&offset)
        .ok_or_else(|| Failure::Args(format!("scene has no ground-truth field for offset {offset}")))?;
    let pred = interpolate_flow(&pred, horizon_offset)?;
    let truth = interpolate_flow(truth, horizon_offset)?;
    let buckets = SpeedBuckets {
        static_eps: a.static_eps,
        horizon_s: a.horizon,
        ..SpeedBuckets::default()
    };
    let report = evaluate(&pred, &truth, scene.cloud(0)?, &buckets)?;
    print!("{}", format_report(&report, a.kv));
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let cfg = GradcheckConfig {
        instances: a.instances,
        points: a.points,
        step: a.step,
        seed: a.seed,
    };
    let mut worst = 0.0f64;
    for c in run_gradcheck(&cfg)? {
        worst = worst.max(c.max_rel_error);
        println!("{}_max_rel_error={}", c.loss, sig9(c.max_rel_error));
        println!("{}_checked={}", c.loss, c.checked);
        println!("{}_skipped={}", c.loss, c.skipped);
    }
    println!("max_rel_error={}", sig9(worst));
    Ok(())
}

fn render_cmd(a: RenderArgs) -> CmdResult {
    let scene = load_scene(&a.scene)?;
    let cloud0 = scene.cloud(0)?;
    let mut written = Vec::new();
    let mut save = |img: render::RgbImage, name: String| -> CmdResult {
        let path = a.out.join(name);
        img.save(&path)?;
        written.push(path);
        Ok(())
    };
    let gt = scene.ground_truth.as_ref();
    // One color scale per offset, so ground truth and prediction compare.
    let mut scales = std::collections::BTreeMap::new();
    if let Some(gt) = gt {
        for (t, f) in &gt.fields {
            scales.insert(*t, f.max_magnitude());
            save(render::render_field(f, Some(cloud0), Some(f.max_magnitude())), format!("gt_field_{}.ppm", frame_tag(*t)))?;
        }
        if let Some(m) = gt.masks.get(&0) {
            save(render::render_mask(&scene.grid, cloud0, m)?, "gt_mask_0.ppm".into())?;
        }
    }
    if let Some(dir) = &a.pred {
        let fields = load_fields(dir, &scene, &scene.frame_set.offsets)?;
        for f in &fields {
            let scale = scales.get(&f.time_offset).copied().filter(|s| *s > 0.0);
            save(render::render_field(f, Some(cloud0), scale), format!("pred_field_{}.ppm", frame_tag(f.time_offset)))?;
        }
    }
    let sup = supervision(&scene, &a.labels, false)?;
    let mask0: &StaticDynamicMask = &sup.masks[&0];
    save(render::render_mask(&scene.grid, cloud0, mask0)?, "mask_0.ppm".into())?;
    save(render::render_pieces(&scene.grid, cloud0, &sup.pieces)?, "pieces_0.ppm".into())?;
    for rig in &scene.cameras {
        if let Some(flow) = rig.flows.get(&0) {
            save(render::render_flow_image(flow, None), format!("flow_cam{}.ppm", rig.camera_id))?;
        }
    }
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}
