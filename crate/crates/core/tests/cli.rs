use std::path::Path;
use std::process::{Command, Output};

fn primscene(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_primscene"))
        .args(args)
        .env_remove("PRIMSCENE_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SUBCOMMANDS: [&str; 13] = [
    "synth",
    "rasterize",
    "voxelize",
    "export-mesh",
    "render-bev",
    "eval-recon",
    "eval-gen",
    "edit",
    "sample",
    "inpaint",
    "outpaint",
    "stats",
    "featurize",
];

#[test]
fn every_subcommand_has_help() {
    let top = primscene(&["--help"]);
    assert!(top.status.success());
    let text = String::from_utf8_lossy(&top.stdout);
    for sub in SUBCOMMANDS {
        assert!(text.contains(sub), "{sub} missing from --help");
        assert!(primscene(&[sub, "--help"]).status.success(), "{sub} --help");
    }
}

#[test]
fn exit_codes() {
    assert_eq!(primscene(&["no-such-command"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a.json");
    assert_eq!(primscene(&["synth", "--out", path(&out)]).status.code(), Some(1));
    let missing = dir.path().join("missing.json");
    assert_eq!(
        primscene(&["rasterize", path(&missing), "--out", path(&out)])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn synth_is_deterministic_and_evaluates_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    assert!(primscene(&["synth", "--seed", "17", "--out", path(&a)])
        .status
        .success());
    assert!(primscene(&["synth", "--seed", "17", "--out", path(&b)])
        .status
        .success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let report = stdout_json(&primscene(&[
        "eval-recon",
        path(&a),
        path(&b),
        "--dims",
        "64,64,8",
        "--voxel",
        "1.0",
    ]));
    assert_eq!(report["iou"], 100.0);
    assert_eq!(report["miou"], 100.0);
    assert_eq!(report["ap"], 100.0);
}

#[test]
fn stats_reports_two_decimals() {
    let out = primscene(&["stats", "--repr", "voxel", "--dims", "256,256,32"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("\"mib\": 8.00"), "{text}");
    let prims = String::from_utf8(primscene(&["stats", "--repr", "primitives"]).stdout).unwrap();
    assert!(prims.contains("2.52"), "{prims}");
}

#[test]
fn geometry_pipeline_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let layout = dir.path().join("l.json");
    assert!(primscene(&["synth", "--seed", "3", "--out", path(&layout)])
        .status
        .success());
    let obj = dir.path().join("m.obj");
    let pgm = dir.path().join("m.pgm");
    let vox = dir.path().join("m.vox");
    assert!(primscene(&["export-mesh", path(&layout), "--out", path(&obj)])
        .status
        .success());
    assert!(std::fs::read_to_string(&obj)
        .unwrap()
        .lines()
        .any(|l| l.starts_with("f ")));
    assert!(primscene(&["render-bev", path(&layout), "--out", path(&pgm)])
        .status
        .success());
    assert!(std::fs::read(&pgm).unwrap().starts_with(b"P5"));
    assert!(primscene(&[
        "voxelize",
        path(&layout),
        "--out",
        path(&vox),
        "--dims",
        "64,64,8",
        "--voxel",
        "1.0"
    ])
    .status
    .success());
    assert!(vox.exists());
}

#[test]
fn diffusion_commands_are_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.latent"), dir.path().join("b.latent"));
    let base = ["--shape", "4,4,2", "--steps", "20", "--seed", "5"];
    for p in [&a, &b] {
        let mut args = vec!["sample", "--out", path(p)];
        args.extend(base);
        assert!(primscene(&args).status.success());
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let filled = dir.path().join("f.latent");
    let out = primscene(&[
        "inpaint",
        "--latent",
        path(&a),
        "--mask",
        "half:right",
        "--out",
        path(&filled),
        "--steps",
        "20",
        "--seed",
        "6",
        "--jump",
        "2",
        "--resample",
        "2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (za, zf) = (std::fs::read(&a).unwrap(), std::fs::read(&filled).unwrap());
    assert_eq!(za.len(), zf.len());
    assert_ne!(za, zf);
}
