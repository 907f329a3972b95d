use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn neuroflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neuroflow")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = neuroflow(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn table2() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/table2.json")
}

/// Synthesizes a model and compiles it; returns (dir, image path).
fn compiled(extra: &[&str]) -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap().to_string();
    ok(&["synth", "--out-dir", &d, "--seed", "4", "--calib-samples", "32"]);
    let img = format!("{d}/m.s2img");
    let mut args = vec!["compile", "--model", &*format!("{d}/mlp.json"), "--calib", &*format!("{d}/calib.json"), "--out", &img]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    args.extend(extra.iter().map(|s| s.to_string()));
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    (dir, img)
}

#[test]
fn compile_writes_image_and_sidecars() {
    let (_d, img) = compiled(&[]);
    for suffix in ["", ".manifest.json", ".plan.json", ".qmodel.json", ".qmodel.bin"] {
        assert!(Path::new(&format!("{img}{suffix}")).exists(), "missing {suffix}");
    }
    let plan: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(format!("{img}.plan.json")).unwrap()).unwrap();
    let workers: Vec<u64> = plan["layers"].as_array().unwrap().iter().map(|l| l["workers"].as_u64().unwrap()).collect();
    assert_eq!(workers, [8, 4, 1, 1]);
}

#[test]
fn compile_is_byte_identical_across_runs() {
    let (_a, first) = compiled(&[]);
    let (_b, second) = compiled(&[]);
    assert_eq!(std::fs::read(first).unwrap(), std::fs::read(second).unwrap());
}

#[test]
fn verify_reports_zero_mismatches() {
    let (_d, img) = compiled(&["--tile-target", "32"]);
    let out = ok(&["verify", "--image", &img, "--model", &format!("{img}.qmodel.json"), "--n", "50", "--seed", "9"]);
    assert_eq!(out.trim(), "0/50 mismatches");
}

#[test]
fn verify_against_another_model_fails_with_index() {
    let (_d, img) = compiled(&[]);
    let (_e, other) = compiled(&["--no-cle"]);
    let out = neuroflow(&["verify", "--image", &img, "--model", &format!("{other}.qmodel.json"), "--n", "20"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("first divergence: input"));
}

#[test]
fn run_writes_output_and_timing_csv() {
    let (d, img) = compiled(&[]);
    let dir = d.path();
    std::fs::write(dir.join("x.bin"), vec![7u8; 784]).unwrap();
    let (y, t) = (dir.join("y.bin"), dir.join("t.csv"));
    ok(&["run", "--image", &img, "--input", dir.join("x.bin").to_str().unwrap(), "--output", y.to_str().unwrap(), "--timing", t.to_str().unwrap(), "--overlap"]);
    assert_eq!(std::fs::read(y).unwrap().len(), 16);
    let csv = std::fs::read_to_string(t).unwrap();
    assert!(csv.starts_with("layer,name,kind,"));
}

#[test]
fn run_rejects_wrong_input_length() {
    let (d, img) = compiled(&[]);
    let x = d.path().join("short.bin");
    std::fs::write(&x, [0u8; 10]).unwrap();
    let out = neuroflow(&["run", "--image", &img, "--input", x.to_str().unwrap(), "--output", "/dev/null"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("expects 784"));
}

#[test]
fn calibrate_then_profile_prints_the_table() {
    let (d, img) = compiled(&[]);
    let tm = d.path().join("tm.json");
    let fit = ok(&["calibrate", "--targets", table2().to_str().unwrap(), "--out", tm.to_str().unwrap()]);
    assert!(fit.contains("setup@151"));
    let table = ok(&["profile", "--image", &img, "--timing-model", tm.to_str().unwrap()]);
    let total = table.lines().find(|l| l.starts_with("Total")).unwrap();
    let us: f64 = total.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!((us - 688.0).abs() <= 0.2 * 688.0, "{total}");
    let json = ok(&["profile", "--image", &img, "--timing-model", tm.to_str().unwrap(), "--format", "json"]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["layers"].as_array().unwrap().len(), 4);
}

#[test]
fn missing_calibration_file_fails_before_compiling() {
    let (d, _) = compiled(&[]);
    let p = d.path();
    let out = neuroflow(&[
        "compile",
        "--model", p.join("mlp.json").to_str().unwrap(),
        "--calib", p.join("nope.json").to_str().unwrap(),
        "--out", p.join("x.s2img").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));
    assert!(!p.join("x.s2img").exists());
}

#[test]
fn unsupported_layer_kind_is_reported() {
    let (d, _) = compiled(&[]);
    let p = d.path();
    let text = std::fs::read_to_string(p.join("mlp.json")).unwrap().replacen("\"Softmax\"", "\"Conv2d\"", 1);
    std::fs::write(p.join("mlp.json"), text).unwrap();
    let out = neuroflow(&["compile", "--model", p.join("mlp.json").to_str().unwrap(), "--calib", p.join("calib.json").to_str().unwrap(), "--out", p.join("x.s2img").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unsupported layer"), "{}", String::from_utf8_lossy(&out.stderr));
}
