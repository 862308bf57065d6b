use serde_json::Value;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn crossview(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crossview"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn pngs(dir: &Path, suffix: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.display().to_string().ends_with(suffix))
        .collect();
    v.sort();
    v
}

fn synth(dir: &Path, count: usize, seed: u64) -> Output {
    crossview(&["synth", "--count", &count.to_string(), "--seed", &seed.to_string(), "--out", &s(dir)])
}

#[test]
fn synth_writes_pairs_and_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    assert!(synth(&a, 5, 3).status.success());
    assert!(synth(&b, 5, 3).status.success());
    assert_eq!(pngs(&a, "_sat.png").len(), 5);
    assert_eq!(pngs(&a, "_ground.png").len(), 5);
    let m = json(&a.join("pairs.json"));
    assert_eq!(m["records"].as_array().unwrap().len(), 5);
    for (x, y) in pngs(&a, ".png").iter().zip(pngs(&b, ".png")) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
}

#[test]
fn synth_zero_count_writes_empty_manifest() {
    let t = tempfile::tempdir().unwrap();
    assert!(synth(t.path(), 0, 0).status.success());
    assert!(pngs(t.path(), ".png").is_empty());
    assert!(json(&t.path().join("pairs.json"))["records"].as_array().unwrap().is_empty());
}

#[test]
fn project_writes_one_image_per_height() {
    let t = tempfile::tempdir().unwrap();
    assert!(synth(&t.path().join("p"), 1, 0).status.success());
    let sat = s(&t.path().join("p/pair_0000_sat.png"));
    let out = t.path().join("proj");
    let o = crossview(&[
        "project",
        "--sat",
        &sat,
        "--pose",
        "128,128,45",
        "--heights",
        "-2,-1.5,-1,-0.5,0.5,1,2,4",
        "--out",
        &s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(pngs(&out, ".png").len(), 8);
    assert!(out.join("manifest.json").exists());

    let o = crossview(&["project", "--sat", &sat, "--pose", "900,128,0", "--out", &s(&t.path().join("bad"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sample_defaults_prompt_and_determinism() {
    let t = tempfile::tempdir().unwrap();
    assert!(synth(&t.path().join("p"), 1, 1).status.success());
    let sat = s(&t.path().join("p/pair_0000_sat.png"));
    let run = |name: &str| {
        let out = t.path().join(name);
        let o = crossview(&[
            "sample", "--sat", &sat, "--pose", "128,128,30", "--iha", "--trace", "--prompt", "red", "--seed", "4",
            "--out", &s(&out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let (a, b) = (run("a"), run("b"));
    let m = json(&a.join("manifest.json"));
    assert_eq!(m["config"]["diffusion"]["steps"], 50);
    assert_eq!(m["config"]["iha"]["iha_steps"], 40);
    let rec = &m["records"][0];
    assert_eq!(rec["prompt"], "red");
    assert!(rec["text_loss"].as_f64().unwrap().is_finite());
    let trace = std::fs::read_to_string(a.join("sample.trace.jsonl")).unwrap();
    let lines: Vec<Value> = trace.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 50);
    assert_eq!(lines.iter().filter(|l| l["loss"].is_number()).count(), 40);
    assert_eq!(std::fs::read(a.join("sample.png")).unwrap(), std::fs::read(b.join("sample.png")).unwrap());
}

#[test]
fn eval_identical_copies_and_missing_files() {
    let t = tempfile::tempdir().unwrap();
    let pairs = t.path().join("p");
    assert!(synth(&pairs, 2, 2).status.success());
    let gen = t.path().join("gen");
    std::fs::create_dir(&gen).unwrap();
    for i in 0..2 {
        std::fs::copy(pairs.join(format!("pair_{i:04}_ground.png")), gen.join(format!("pair_{i:04}.png"))).unwrap();
    }
    let out = t.path().join("eval");
    let manifest = s(&pairs.join("pairs.json"));
    let o = crossview(&["eval", "--pairs", &manifest, "--generated", &s(&gen), "--sky-crop", "0.25", "--out", &s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&out.join("report.json"));
    assert_eq!(r["sky_crop"], 0.25);
    assert!((r["aggregate"]["ssim"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(r["aggregate"]["rmse"].as_f64().unwrap(), 0.0);
    assert!(out.join("report.csv").exists());

    std::fs::remove_file(gen.join("pair_0001.png")).unwrap();
    let o = crossview(&["eval", "--pairs", &manifest, "--generated", &s(&gen), "--out", &s(&t.path().join("e2"))]);
    assert_eq!(o.status.code(), Some(2));
    let r = json(&t.path().join("e2/report.json"));
    assert_eq!(r["missing"].as_array().unwrap().len(), 1);
}

#[test]
fn selfcheck_passes_and_detects_faults() {
    let o = crossview(&["selfcheck"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let o = crossview(&["selfcheck", "--inject-projection-fault", "0.05"]);
    assert!(!o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    let line = text.lines().find(|l| l.contains("FAIL")).expect("a failing oracle");
    assert!(line.starts_with("projection_roundtrip"), "{line}");
}

#[test]
fn invalid_configs_exit_with_usage_code() {
    let t = tempfile::tempdir().unwrap();
    assert!(synth(&t.path().join("p"), 1, 0).status.success());
    let sat = s(&t.path().join("p/pair_0000_sat.png"));
    let write = |name: &str, body: &str| {
        let p = t.path().join(name);
        std::fs::write(&p, body).unwrap();
        s(&p)
    };
    let too_long = write("a.json", r#"{"diffusion": {"steps": 20}, "iha": {"iha_steps": 30}}"#);
    let o = crossview(&["--config", &too_long, "sample", "--sat", &sat, "--pose", "128,128,0", "--out", &s(&t.path().join("o1"))]);
    assert_eq!(o.status.code(), Some(1));

    let unknown = write("b.json", r#"{"gca": {"hieghts": [1.0]}}"#);
    let o = crossview(&["--config", &unknown, "synth", "--out", &s(&t.path().join("o2"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gca.hieghts"));
}
