use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bevss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bevss"))
        .args(args)
        .env_remove("BEVSS_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = bevss(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn key_values(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn number(kv: &BTreeMap<String, String>, key: &str) -> f64 {
    kv.get(key).unwrap_or_else(|| panic!("missing {key}")).parse().unwrap()
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_optimize_eval_recovers_the_actor() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    let flow = tmp.path().join("flow");
    ok(&["synth", "--preset", "one-box", "--seed", "0", "--out", s(&scene)]);
    let report = key_values(&ok(&["optimize", "--scene", s(&scene.join("manifest")), "--out", s(&flow)]));
    assert!(number(&report, "total") < number(&report, "initial_total"));
    assert!(flow.join("report.txt").exists());
    let kv = key_values(&ok(&["eval", "--scene", s(&scene.join("manifest")), "--pred", s(&flow), "--kv"]));
    // The one-box actor moves at 1 m/s, so its cells land in the slow bucket.
    let moving = number(&kv, "slow_count") + number(&kv, "fast_count");
    assert!(moving > 0.0);
    let mean = (number(&kv, "slow_mean") * number(&kv, "slow_count") + number(&kv, "fast_mean") * number(&kv, "fast_count")) / moving;
    assert!(mean < 0.3, "moving-cell error {mean}");
    assert!(number(&kv, "static_mean") < 0.05);
}

#[test]
fn loss_vanishes_at_ground_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    ok(&["synth", "--preset", "one-box", "--seed", "1", "--out", s(&scene)]);
    let kv = key_values(&ok(&["loss", "--scene", s(&scene), "--pred", s(&scene.join("gt")), "--gt-masks"]));
    assert!(number(&kv, "masked_chamfer") < 1e-3, "{kv:?}");
    assert_eq!(number(&kv, "rigidity"), 0.0);
    assert_eq!(number(&kv, "temporal_consistency"), 0.0);
}

#[test]
fn gradcheck_passes() {
    let kv = key_values(&ok(&["gradcheck", "--seed", "7"]));
    for loss in ["chamfer", "masked_chamfer", "rigidity", "temporal_consistency", "smoothness"] {
        assert!(number(&kv, &format!("{loss}_max_rel_error")) < 1e-3, "{loss}");
    }
    assert!(number(&kv, "max_rel_error") < 1e-3);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let code = |o: Output| o.status.code();
    assert_eq!(code(bevss(&["synth", "--preset", "bogus", "--out", s(&out)])), Some(2));
    assert_eq!(code(bevss(&["synth", "--out", s(&out)])), Some(2));
    assert_eq!(code(bevss(&["frobnicate"])), Some(2));
    assert_eq!(code(bevss(&["optimize", "--scene", s(&out), "--out", s(&out), "--frames", "1,1"])), Some(2));
    let missing = bevss(&["eval", "--scene", s(&tmp.path().join("nothing")), "--pred", s(&out)]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("not found"));
    assert!(missing.stdout.is_empty());

    let threads = Command::new(env!("CARGO_BIN_EXE_bevss"))
        .args(["gradcheck", "--instances", "1"])
        .env("BEVSS_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(2));
}

#[test]
fn outputs_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let scene = tmp.path().join(name).join("scene");
        let flow = tmp.path().join(name).join("flow");
        let labels = tmp.path().join(name).join("labels");
        ok(&["synth", "--preset", "two-box", "--seed", "4", "--out", s(&scene)]);
        ok(&["labels", "--scene", s(&scene), "--out", s(&labels), "--render"]);
        let report = ok(&["optimize", "--scene", s(&scene), "--out", s(&flow), "--iters", "30"]);
        let eval = ok(&["eval", "--scene", s(&scene), "--pred", s(&flow), "--kv"]);
        (files(&tmp.path().join(name)), report, eval)
    };
    let a = run("a");
    let b = run("b");
    assert!(a.0.keys().any(|k| k.ends_with(".bev")));
    assert!(a.0.keys().any(|k| k.ends_with(".ppm")));
    assert_eq!(a.0.keys().collect::<Vec<_>>(), b.0.keys().collect::<Vec<_>>());
    for (k, v) in &a.0 {
        assert!(v == &b.0[k], "{k} differs");
    }
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

#[test]
fn render_writes_ppm_files() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    let img = tmp.path().join("img");
    ok(&["synth", "--preset", "static", "--out", s(&scene), "--frames=-1,1"]);
    let listed = ok(&["render", "--scene", s(&scene), "--out", s(&img)]);
    assert!(listed.lines().count() >= 3);
    for line in listed.lines() {
        let bytes = fs::read(line).unwrap();
        assert!(bytes.starts_with(b"P6\n"), "{line}");
    }
    assert!(img.join("mask_0.ppm").exists());
}
