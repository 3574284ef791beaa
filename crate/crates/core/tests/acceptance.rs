//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::time::Instant;

use bevss::eval::{cell_errors, evaluate, interpolate_flow, Bucket, SpeedBuckets};
use bevss::gradcheck::{run_gradcheck, GradcheckConfig};
use bevss::io;
use bevss::losses::{chamfer, rigidity, smoothness, temporal_consistency, LossWeights, Norm};
use bevss::masks::mask_quality;
use bevss::optimizer::ChamferMode;
use bevss::pieces::{label_points, occlusion_filter, oversegment};
use bevss::projection::lift_flow;
use bevss::synth::{generate, preset, Preset};
use bevss::{
    build_supervision, optimize, BevGridSpec, BevMotionField, CalibratedCamera, LabelConfig, OptimConfig, Point3, PointCloud,
    PointFlowSet, PointStatus, RigidPieces, SceneBundle, Vec2, Vec3,
};
use nalgebra::{Matrix3, Matrix3x4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

const SEEDS: std::ops::Range<u64> = 0..5;

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient correctness", gradients),
        ("loss fixed points", fixed_points),
        ("flow lift round trip", lift_round_trip),
        ("mask quality", masks),
        ("piece quality", pieces),
        ("end-to-end motion recovery", motion_recovery),
        ("ablation ordering", ablation),
        ("metric protocol", metric_protocol),
        ("determinism and I/O", determinism_and_io),
    ];
    let only: Option<usize> = std::env::var("BEVSS_CRITERION").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let id = k + 1;
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("[{status}] {id}. {name} ({:.1} s): {}", start.elapsed().as_secs_f64(), o.detail);
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        eprintln!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let checks = run_gradcheck(&GradcheckConfig {
        instances: 20,
        points: 50,
        step: 1e-4,
        seed: 7,
    })
    .expect("gradcheck runs");
    let secs = start.elapsed().as_secs_f64();
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let all_five = checks.len() == 5 && checks.iter().all(|c| c.checked > 0);
    let parts: Vec<String> = checks.iter().map(|c| format!("{} {:.1e}", c.loss, c.max_rel_error)).collect();
    outcome(
        all_five && worst < 1e-3 && secs < 10.0,
        format!("max rel error {worst:.2e} (< 1e-3), {secs:.2} s (< 10 s); {}", parts.join(", ")),
    )
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, frame: i32) -> PointCloud {
    let pts = (0..n)
        .map(|_| Point3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-1.0..1.0)))
        .collect();
    PointCloud::new(frame, pts).unwrap()
}

fn random_vec(rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-0.5..0.5))
}

fn fixed_points() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 200;
    let a = random_cloud(&mut rng, n, 0);
    let c = chamfer(&a, &a, false).unwrap().value;

    let pieces = RigidPieces {
        frame_index: 0,
        labels: (0..n).map(|_| rng.random_range(-1..6)).collect(),
        piece_count: 6,
    };
    let offsets = [-1, 1, 2];
    let piece_flows: Vec<Vec<Vec3>> = offsets.iter().map(|_| (0..6).map(|_| random_vec(&mut rng)).collect()).collect();
    let uniform: Vec<PointFlowSet> = offsets
        .iter()
        .zip(&piece_flows)
        .map(|(&t, per_piece)| PointFlowSet {
            time_offset: t,
            flows: pieces
                .labels
                .iter()
                .map(|&l| if l >= 0 { per_piece[l as usize] } else { random_vec(&mut ChaCha8Rng::seed_from_u64(t as u64)) })
                .collect(),
        })
        .collect();
    let r = [Norm::L1, Norm::L2]
        .iter()
        .map(|&norm| rigidity(&pieces, &uniform, norm, false).unwrap().value.abs())
        .fold(0.0, f64::max);

    let velocity: Vec<Vec3> = (0..n).map(|_| random_vec(&mut rng)).collect();
    let constant: Vec<PointFlowSet> = offsets
        .iter()
        .map(|&t| PointFlowSet {
            time_offset: t,
            flows: velocity.iter().map(|v| v * t as f64).collect(),
        })
        .collect();
    let tc = [Norm::L1, Norm::L2]
        .iter()
        .map(|&norm| temporal_consistency(&constant, norm, false).unwrap().value.abs())
        .fold(0.0, f64::max);

    let v = random_vec(&mut rng);
    let same = PointFlowSet {
        time_offset: 1,
        flows: vec![v; n],
    };
    let sm = smoothness(&a, &same, 8, false).unwrap().value;

    let worst = c.abs().max(r).max(tc).max(sm.abs());
    outcome(
        worst <= 1e-12,
        format!("chamfer {c:.1e}, rigidity {r:.1e}, temporal {tc:.1e}, smoothness {sm:.1e} (all <= 1e-12)"),
    )
}

/// `K [R | -R c]` for a camera at `c` looking along `yaw`, pitched down by
/// `pitch`.
fn look_camera(c: Vector3<f64>, yaw: f64, pitch: f64, focal: f64) -> CalibratedCamera {
    let forward = Vector3::new(yaw.cos() * pitch.cos(), yaw.sin() * pitch.cos(), -pitch.sin());
    let right = Vector3::new(yaw.sin(), -yaw.cos(), 0.0);
    let down = forward.cross(&right);
    let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    let k = Matrix3::new(focal, 0.0, 320.0, 0.0, focal, 240.0, 0.0, 0.0, 1.0);
    let mut rt = Matrix3x4::zeros();
    rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    rt.set_column(3, &(-(r * c)));
    CalibratedCamera::new(0, 0, k * rt, 640, 480).unwrap()
}

fn lift_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let start = Instant::now();
    let (mut done, mut tried, mut worst, mut failures) = (0, 0, 0.0f64, 0);
    while done < 1000 {
        tried += 1;
        let cam_pos = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(1.0..2.0));
        let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let cam = look_camera(cam_pos, yaw, rng.random_range(0.0..0.2), rng.random_range(200.0..800.0));
        let range = rng.random_range(4.0..30.0);
        let bearing = yaw + rng.random_range(-0.5..0.5);
        let z = rng.random_range(-1.8..0.0);
        let p = Point3::new(cam_pos.x + range * bearing.cos(), cam_pos.y + range * bearing.sin(), z);
        let d = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), 0.0);
        let q = p + d;
        // Well-conditioned: both ends in front of the camera and the height
        // plane well away from the optical center.
        let (Some(a), Some(b)) = (cam.project_unbounded(&p), cam.project_unbounded(&q)) else {
            continue;
        };
        if a.w < 2.0 || b.w < 2.0 || (cam_pos.z - z).abs() < 0.5 {
            continue;
        }
        let f2d: Vec2 = b.uv() - a.uv();
        match lift_flow(f2d, &p, &cam) {
            Ok(lifted) => worst = worst.max((lifted - d).norm()),
            Err(_) => failures += 1,
        }
        done += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures == 0 && worst < 1e-6 && secs < 1.0,
        format!("{done} triples ({tried} drawn), max error {worst:.2e} m (< 1e-6), {failures} lift failures, {secs:.3} s (< 1 s)"),
    )
}

fn masks() -> Outcome {
    let cfg = LabelConfig::default();
    let mut worst = [1.0f64; 4];
    for seed in SEEDS {
        let scene = generate(&preset(Preset::OneBox, seed)).unwrap();
        let gt = scene.ground_truth.as_ref().unwrap();
        let sup = build_supervision(&scene, &cfg).unwrap();
        // Frame-0 points that some camera actually sees.
        let mut truth = gt.masks[&0].clone();
        for (s, &hidden) in truth.status.iter_mut().zip(gt.camera_occluded.as_ref().unwrap()) {
            if hidden {
                *s = PointStatus::Unknown;
            }
        }
        let q = mask_quality(&sup.masks[&0], &truth).unwrap();
        let vals = [q.dynamic_precision, q.dynamic_recall, q.static_precision, q.static_recall];
        for (w, v) in worst.iter_mut().zip(vals) {
            *w = w.min(v);
        }
    }
    let mut false_dynamic = 0;
    let mut static_points = 0;
    for seed in SEEDS {
        let scene = generate(&preset(Preset::Static, seed)).unwrap();
        let sup = build_supervision(&scene, &cfg).unwrap();
        for m in sup.masks.values() {
            false_dynamic += m.count(PointStatus::Dynamic);
            static_points += m.len();
        }
    }
    let pass = worst.iter().all(|&v| v >= 0.95) && false_dynamic == 0;
    outcome(
        pass,
        format!(
            "one-box seeds 0-4 min dyn P/R {:.3}/{:.3}, static P/R {:.3}/{:.3} (>= 0.95); static preset {false_dynamic} false dynamic of {static_points}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn pieces() -> Outcome {
    let cfg = LabelConfig::default();
    let mut mixed = 0;
    let mut min_share = 1.0f64;
    let mut min_removed = 1.0f64;
    let (mut bleed_all, mut removed_all) = (0, 0);
    for seed in SEEDS {
        let scene = generate(&preset(Preset::TwoBox, seed)).unwrap();
        let gt = scene.ground_truth.as_ref().unwrap();
        let ids = &gt.instances[&0];
        let sup = build_supervision(&scene, &cfg).unwrap();
        let labels = &sup.pieces.labels;

        let mut owners: BTreeMap<i32, std::collections::BTreeSet<i32>> = BTreeMap::new();
        let mut per_actor: BTreeMap<i32, BTreeMap<i32, usize>> = BTreeMap::new();
        for (&l, &a) in labels.iter().zip(ids) {
            if l >= 0 && a >= 0 {
                owners.entry(l).or_default().insert(a);
            }
            if a >= 0 {
                *per_actor.entry(a).or_default().entry(l).or_default() += 1;
            }
        }
        mixed += owners.values().filter(|s| s.len() > 1).count();
        for counts in per_actor.values() {
            let total: usize = counts.values().sum();
            let majority = counts.iter().filter(|(l, _)| **l >= 0).map(|(_, c)| *c).max().unwrap_or(0);
            min_share = min_share.min(majority as f64 / total as f64);
        }

        let cloud = scene.cloud(0).unwrap();
        let views = scene.views(0).unwrap();
        let cams: Vec<&CalibratedCamera> = views.iter().map(|v| v.cam_t).collect();
        let segs: Vec<_> = views.iter().map(|v| oversegment(v.flow, &cfg.pieces).unwrap()).collect();
        let raw = label_points(cloud, &segs, &cams, &cfg.pieces).unwrap();
        let kept = occlusion_filter(cloud, &raw, &cams, cfg.pieces.delta_d).unwrap();
        let hidden = gt.camera_occluded.as_ref().unwrap();
        let bleed: Vec<usize> = (0..cloud.len()).filter(|&i| hidden[i] && raw.labels[i] >= 0).collect();
        let removed = bleed.iter().filter(|&&i| kept.labels[i] < 0).count();
        bleed_all += bleed.len();
        removed_all += removed;
        if !bleed.is_empty() {
            min_removed = min_removed.min(removed as f64 / bleed.len() as f64);
        }
    }
    outcome(
        mixed == 0 && min_share >= 0.95 && min_removed >= 0.9 && bleed_all > 0,
        format!(
            "two-box seeds 0-4: {mixed} mixed pieces, min majority share {min_share:.3} (>= 0.95), bleed-through removed {removed_all}/{bleed_all}, worst seed {min_removed:.3} (>= 0.9)"
        ),
    )
}

fn occupied_cells(spec: &BevGridSpec, cloud: &PointCloud) -> Vec<bool> {
    let mut occ = vec![false; spec.num_cells()];
    for p in &cloud.points {
        if let Some(c) = spec.cell_index(p) {
            occ[c] = true;
        }
    }
    occ
}

fn motion_recovery() -> Outcome {
    let bounds = [(-1, 0.15), (1, 0.15), (2, 0.3)];
    let mut worst_actor: BTreeMap<i32, f64> = BTreeMap::new();
    let (mut worst_static, mut slowest) = (0.0f64, 0.0f64);
    for seed in SEEDS {
        let scene = generate(&preset(Preset::OneBox, seed)).unwrap();
        let gt = scene.ground_truth.as_ref().unwrap();
        let start = Instant::now();
        let sup = build_supervision(&scene, &LabelConfig::default()).unwrap();
        let report = optimize(&scene, &sup, &OptimConfig::default()).unwrap();
        slowest = slowest.max(start.elapsed().as_secs_f64());
        let occ = occupied_cells(&scene.grid, scene.cloud(0).unwrap());
        for (t, _) in bounds {
            let (pred, truth) = (report.field(t).unwrap(), &gt.fields[&t]);
            let (mut actor, mut na, mut stat, mut ns) = (0.0, 0, 0.0, 0);
            for c in (0..occ.len()).filter(|&c| occ[c]) {
                if truth.values[c].norm() > 0.0 {
                    actor += (pred.values[c] - truth.values[c]).norm();
                    na += 1;
                } else {
                    stat += pred.values[c].norm();
                    ns += 1;
                }
            }
            let e = worst_actor.entry(t).or_insert(0.0);
            *e = e.max(actor / na.max(1) as f64);
            worst_static = worst_static.max(stat / ns.max(1) as f64);
        }
    }
    let pass = bounds.iter().all(|(t, b)| worst_actor[t] < *b) && worst_static < 0.05 && slowest < 60.0;
    let parts: Vec<String> = bounds.iter().map(|(t, b)| format!("t={t} {:.3} (< {b})", worst_actor[t])).collect();
    outcome(
        pass,
        format!(
            "one-box seeds 0-4 worst actor-cell error {}; static {worst_static:.4} (< 0.05); slowest run {slowest:.1} s (< 60 s)",
            parts.join(", ")
        ),
    )
}

struct Variant {
    name: &'static str,
    chamfer: ChamferMode,
    lambda_pr: f64,
    lambda_tc: f64,
}

const VARIANTS: [Variant; 4] = [
    Variant { name: "chamfer", chamfer: ChamferMode::Full, lambda_pr: 0.0, lambda_tc: 0.0 },
    Variant { name: "+mask", chamfer: ChamferMode::Masked, lambda_pr: 0.0, lambda_tc: 0.0 },
    Variant { name: "+mask+rigidity", chamfer: ChamferMode::Masked, lambda_pr: 0.1, lambda_tc: 0.0 },
    Variant { name: "+mask+rigidity+temporal", chamfer: ChamferMode::Masked, lambda_pr: 0.1, lambda_tc: 0.4 },
];

fn ablation() -> Outcome {
    let buckets = SpeedBuckets::default();
    let mut sums = [0.0f64; 4];
    let mut cells = 0usize;
    let mut scenes = 0;
    for p in Preset::ALL {
        for seed in SEEDS {
            let scene = generate(&preset(p, seed)).unwrap();
            let gt = scene.ground_truth.as_ref().unwrap();
            let cloud = scene.cloud(0).unwrap();
            let truth = &gt.fields[&2];
            let fast = |pred: &BevMotionField| -> Vec<f64> {
                cell_errors(pred, truth, cloud, &buckets)
                    .unwrap()
                    .into_iter()
                    .filter(|e| e.1 == Bucket::Fast)
                    .map(|e| e.2)
                    .collect()
            };
            // Scenes without fast cells add nothing to the pooled bucket.
            let n = fast(truth).len();
            if n == 0 {
                continue;
            }
            scenes += 1;
            cells += n;
            let sup = build_supervision(&scene, &LabelConfig::default()).unwrap();
            for (k, v) in VARIANTS.iter().enumerate() {
                let cfg = OptimConfig {
                    chamfer: v.chamfer,
                    weights: LossWeights {
                        lambda_mc: 1.0,
                        lambda_pr: v.lambda_pr,
                        lambda_tc: v.lambda_tc,
                    },
                    ..OptimConfig::default()
                };
                let report = optimize(&scene, &sup, &cfg).unwrap();
                sums[k] += fast(report.field(2).unwrap()).iter().sum::<f64>();
            }
        }
    }
    let means: Vec<f64> = sums.iter().map(|s| s / cells.max(1) as f64).collect();
    let pass = cells > 0 && means[0] > means[1] && means[1] > means[2] && means[2] > means[3];
    let parts: Vec<String> = VARIANTS.iter().zip(&means).map(|(v, m)| format!("{} {m:.3}", v.name)).collect();
    outcome(
        pass,
        format!("pooled fast-bucket mean error at t=2 over {scenes} scenes, {cells} cells: {}", parts.join(" > ")),
    )
}

fn metric_protocol() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();

    let scene = generate(&preset(Preset::TwoBox, 0)).unwrap();
    let gt = scene.ground_truth.as_ref().unwrap();
    let cloud = scene.cloud(0).unwrap();
    let f = &gt.fields[&2];
    let r = evaluate(f, f, cloud, &SpeedBuckets::default()).unwrap();
    let zeros = [r.static_, r.slow, r.fast].iter().all(|b| b.mean == 0.0 && b.median == 0.0);
    ok &= zeros && r.static_.count > 0 && r.fast.count > 0;
    notes.push(format!("pred=GT all zero: {zeros}"));

    // One cell exactly at 5 m/s, one just above.
    let spec = BevGridSpec::new((0.0, 3.0), (0.0, 1.0), (-1.0, 1.0), 1.0).unwrap();
    let mut truth = BevMotionField::zeros(spec, 2);
    truth.set(0, 0, Vec2::new(3.0, 4.0));
    truth.set(1, 0, Vec2::new(5.0 + 1e-9, 0.0));
    let pts = (0..3).map(|i| Point3::new(i as f64 + 0.5, 0.5, 0.0)).collect();
    let cells = PointCloud::new(0, pts).unwrap();
    let pred = BevMotionField::zeros(spec, 2);
    let r = evaluate(&pred, &truth, &cells, &SpeedBuckets::default()).unwrap();
    let boundary = r.static_.count == 1 && r.slow.count == 1 && r.fast.count == 1 && r.slow.mean == 5.0;
    ok &= boundary;
    notes.push(format!("5 m/s boundary: {boundary}"));

    let mut half = BevMotionField::zeros(spec, 1);
    half.set(0, 0, Vec2::new(1.25, -0.5));
    let full = interpolate_flow(&half, 2).unwrap();
    let doubled = full.time_offset == 2 && full.get(0, 0) == Vec2::new(2.5, -1.0);
    ok &= doubled;
    notes.push(format!("0.5 s field doubled for 1 s: {doubled}"));
    outcome(ok, notes.join(", "))
}

fn dir_bytes(dir: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism_and_io() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let spec = preset(Preset::TwoBox, 2);
    let save = |scene: &SceneBundle, name: &str| {
        let dir = tmp.path().join(name);
        io::save_scene(scene, &dir).unwrap();
        dir
    };
    let a = generate(&spec).unwrap();
    let b = generate(&spec).unwrap();
    let scenes_equal = dir_bytes(&save(&a, "a")) == dir_bytes(&save(&b, "b"));

    let loaded = io::load_scene(&tmp.path().join("a")).unwrap();
    let again = io::load_scene(&save(&loaded, "c")).unwrap();
    let scene_round_trip = loaded == again && dir_bytes(&tmp.path().join("a")) == dir_bytes(&tmp.path().join("c"));

    let cfg = OptimConfig {
        max_iters: 40,
        ..OptimConfig::default()
    };
    let run = || {
        let sup = build_supervision(&loaded, &LabelConfig::default()).unwrap();
        let r = optimize(&loaded, &sup, &cfg).unwrap();
        let mut bytes: Vec<u8> = r.fields.iter().flat_map(io::encode_field).collect();
        bytes.extend(io::encode_pieces(&sup.pieces));
        for m in sup.masks.values() {
            bytes.extend(io::encode_mask(m));
        }
        (bytes, sup, r.fields)
    };
    let (x, sup, fields) = run();
    let (y, _, _) = run();
    let outputs_equal = x == y;

    let p = std::path::Path::new("mem");
    let formats = {
        let cloud = loaded.cloud(0).unwrap();
        let flow = loaded.cameras[0].flows[&0].clone();
        let mask = &sup.masks[&0];
        let pts_ok = io::decode_cloud(&io::encode_cloud(cloud), 0, p).unwrap() == *cloud;
        let flow_ok = io::decode_flow(&io::encode_flow(&flow), flow.camera_id, flow.frame, p).unwrap() == flow;
        let mask_ok = io::decode_mask(&io::encode_mask(mask), 0, p).unwrap() == *mask;
        let seg_ok = io::decode_pieces(&io::encode_pieces(&sup.pieces), 0, p).unwrap() == sup.pieces;
        let field_ok = fields.iter().all(|f| {
            let back = io::decode_field(&io::encode_field(f), &f.spec, p).unwrap();
            io::encode_field(&back) == io::encode_field(f)
        });
        pts_ok && flow_ok && mask_ok && seg_ok && field_ok
    };
    outcome(
        scenes_equal && scene_round_trip && outputs_equal && formats,
        format!(
            "scene files identical: {scenes_equal}, labels and fields identical: {outputs_equal}, scene round trip: {scene_round_trip}, PCB1/FLW1/MSK1/SEG1/BEV1 round trip: {formats}"
        ),
    )
}
