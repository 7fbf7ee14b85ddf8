use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.toml")
}

fn canongen(root: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_canongen"))
        .arg("--config")
        .arg(fixture())
        .arg("--out")
        .arg(root)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    out
}

fn ok(root: &Path, args: &[&str]) -> String {
    let out = canongen(root, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

/// Files below `dir` other than manifests of nested stages.
fn files(dir: &Path, base: &Path, out: &mut BTreeSet<String>) {
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files(&p, base, out);
        } else {
            out.insert(p.strip_prefix(base).unwrap().to_string_lossy().replace('\\', "/"));
        }
    }
}

fn assert_no_orphans(stage: &Path) {
    let m = manifest(stage);
    let listed: BTreeSet<String> = m["artifacts"].as_object().unwrap().keys().cloned().collect();
    let mut present = BTreeSet::new();
    files(stage, stage, &mut present);
    present.remove("manifest.json");
    assert_eq!(listed, present, "{}", stage.display());
}

#[test]
fn simulator_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("run");

    // Nothing exists yet.
    let out = canongen(&root, &["train-recon"]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));

    let first = ok(&root, &["gen-data"]);
    assert!(first.contains("done") && first.contains("data"), "{first}");
    assert!(ok(&root, &["gen-data"]).contains("up-to-date"));
    let data = manifest(&root.join("data"));
    let scenes = data["artifacts"]
        .as_object()
        .unwrap()
        .keys()
        .filter(|k| k.ends_with("scene.json"))
        .count();
    assert_eq!(scenes, 6);
    assert_no_orphans(&root.join("data"));

    // The generator needs a trained reconstructor unless simulator mode is on.
    let out = canongen(&root, &["train-gen"]);
    assert_eq!(code(&out), 4);

    ok(&root, &["train-gen", "--simulator", "--conditioning", "point-guided"]);
    let gen_dir = root.join("gen-point-guided-sim");
    assert!(gen_dir.join("curves.jsonl").is_file());
    assert_no_orphans(&gen_dir);
    assert_no_orphans(&root.join("ae"));

    ok(&root, &["generate", "--simulator", "--conditioning", "point-guided"]);
    let scene0 = root.join("generate/point-guided-sim/scene-0000");
    for f in ["alignment.json", "canonical_cloud.ply", "depths.raw", "manifest.json"] {
        assert!(scene0.join(f).is_file(), "{f}");
    }
    let m = manifest(&scene0);
    if m.get("failure").is_none() {
        assert!(scene0.join("mesh.obj").is_file() && scene0.join("mesh.ply").is_file());
    }
    assert_no_orphans(&scene0);
    assert!(ok(&root, &["generate", "--simulator", "--conditioning", "point-guided"]).contains("up-to-date"));

    let out = canongen(&root, &["eval", "--simulator"]);
    assert_eq!(code(&out), 4, "latent-augmented outputs were never generated");
    ok(&root, &["eval", "--simulator", "--conditioning", "point-guided"]);
    let eval = root.join("eval/point-guided-sim");
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["scenes"].as_array().unwrap().len(), 2);
    let summary = fs::read_to_string(eval.join("summary.md")).unwrap();
    for col in ["Chamfer-L2", "F-score", "NC", "IoU", "ATE", "AbsRel"] {
        assert!(summary.contains(col), "{col}");
    }
    assert_no_orphans(&eval);
}

#[test]
fn generate_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut meshes = Vec::new();
    for run in ["a", "b"] {
        let root = tmp.path().join(run);
        ok(&root, &["gen-data"]);
        ok(&root, &["train-gen", "--simulator"]);
        ok(&root, &["generate", "--simulator", "--scene", "1"]);
        let dir = root.join("generate/latent-augmented-sim/scene-0001");
        let mut bytes = Vec::new();
        for f in [
            "mesh.obj",
            "mesh.ply",
            "canonical_cloud.ply",
            "alignment.json",
            "depths.raw",
        ] {
            bytes.push(fs::read(dir.join(f)).unwrap());
        }
        meshes.push(bytes);
    }
    assert_eq!(meshes[0], meshes[1]);
}

#[test]
fn config_errors_and_conflicts_have_distinct_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("run");

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[data]\nunknown_key = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_canongen"))
        .args(["gen-data", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(&root)
        .output()
        .unwrap();
    assert_eq!(code(&out), 3);

    let out = canongen(&root, &["gen-data", "--strategy", "sideways"]);
    assert_eq!(code(&out), 2);

    let missing = canongen(&root, &["gen-data", "--config", "/nonexistent/cfg.toml"]);
    assert_ne!(code(&missing), 0);

    ok(&root, &["gen-data"]);
    // A different seed changes the stage configuration.
    let out = canongen(&root, &["gen-data", "--seed", "8"]);
    assert_eq!(code(&out), 8);
    ok(&root, &["gen-data", "--seed", "8", "--force"]);
    assert_eq!(manifest(&root.join("data"))["config"]["seed"], 8);

    // A partial stage is a conflict unless resumed.
    fs::create_dir_all(root.join("recon-branch")).unwrap();
    fs::write(root.join("recon-branch/curves.jsonl"), "").unwrap();
    let out = canongen(&root, &["train-recon", "--seed", "8"]);
    assert_eq!(code(&out), 8);
    ok(&root, &["train-recon", "--seed", "8", "--resume"]);
    assert_no_orphans(&root.join("recon-branch"));
}

#[test]
fn run_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("env-root");
    let out = Command::new(env!("CARGO_BIN_EXE_canongen"))
        .args(["gen-data", "--config"])
        .arg(fixture())
        .env("CANONGEN_RUN_ROOT", &root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("data/manifest.json").is_file());
}

#[test]
fn ablate_reports_both_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("run");
    let stdout = ok(&root, &["ablate", "--simulator"]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("ablate/sim/report.json")).unwrap()).unwrap();
    assert_eq!(report["strategies"].as_array().unwrap().len(), 3);
    assert_eq!(report["conditioning"].as_array().unwrap().len(), 2);
    let md = fs::read_to_string(root.join("ablate/sim/report.md")).unwrap();
    for col in [
        "ATE",
        "RPE-t",
        "RPE-r",
        "AbsRel",
        "RMSE",
        "Chamfer-L2",
        "F-score",
        "IoU",
    ] {
        assert!(md.contains(col), "{col}");
    }
    assert!(stdout.contains("branch") && stdout.contains("latent-augmented"));
    let again = ok(&root, &["ablate", "--simulator"]);
    assert!(!again.contains("done "), "{again}");
    assert_eq!(fs::read_to_string(root.join("ablate/sim/report.md")).unwrap(), md);
}
