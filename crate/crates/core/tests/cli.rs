use std::path::Path;
use std::process::{Command, Output};

use tactile_servo::descriptor::DescriptorParams;
use tactile_servo::gel_sim::ScenePreset;
use tactile_servo::goal::{build_goal_spec, Thresholds};
use tactile_servo::sensor::SensorCalibration;

fn tactile(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tactile"))
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_gear_keypoints(path: &Path) {
    let cal = SensorCalibration::working();
    let kps = ScenePreset::by_name("gear").unwrap().keypoints_px(&cal);
    let json: Vec<[f64; 2]> = kps.iter().map(|&(u, v)| [u, v]).collect();
    std::fs::write(path, serde_json::to_string(&json).unwrap()).unwrap();
}

#[test]
fn help_and_usage_exit_codes() {
    assert_eq!(code(&tactile(&["--help"])), 0);
    assert_eq!(code(&tactile(&[])), 1);
    assert_eq!(code(&tactile(&["frobnicate"])), 1);
    assert_eq!(code(&tactile(&["scenario", "peg_in_hole"])), 1);
    assert_eq!(
        code(&tactile(&["extract", "--image", "/nonexistent/x.png"])),
        1
    );
}

#[test]
fn bad_config_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"trial_count": 0}"#).unwrap();
    assert_eq!(code(&tactile(&["--config", s(&cfg), "experiment"])), 1);
    std::fs::write(&cfg, "{not json").unwrap();
    assert_eq!(code(&tactile(&["--config", s(&cfg), "experiment"])), 1);
}

#[test]
fn render_extract_match_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    for (name, offset) in [("goal.png", "0,0"), ("cur.png", "1.0,-0.5,0.05")] {
        let out = tactile(&[
            "render",
            "--scene",
            "gear",
            "--noise",
            "0",
            "--offset",
            offset,
            "--output",
            s(&p(name)),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let out = tactile(&[
        "extract",
        "--image",
        s(&p("cur.png")),
        "--output",
        s(&p("cur.tdsc")),
    ]);
    assert_eq!(code(&out), 0);
    assert!(std::fs::read(p("cur.tdsc")).unwrap().starts_with(b"TDSC"));

    write_gear_keypoints(&p("kps.json"));
    let out = tactile(&[
        "match",
        "--goal",
        s(&p("goal.png")),
        "--current",
        s(&p("cur.tdsc")),
        "--keypoints",
        s(&p("kps.json")),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    std::fs::write(p("matches.json"), &out.stdout).unwrap();

    let out = tactile(&["estimate", "--matches", s(&p("matches.json"))]);
    assert_eq!(code(&out), 0);
    let est: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((est["dx_mm"].as_f64().unwrap() - 1.0).abs() < 0.2, "{est}");
    assert!((est["dz_mm"].as_f64().unwrap() + 0.5).abs() < 0.2, "{est}");
    assert!(
        (est["dtheta_rad"].as_f64().unwrap() - 0.05).abs() < 0.02,
        "{est}"
    );
}

#[test]
fn no_contact_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    for (name, offset) in [("goal.png", "0,0"), ("away.png", "60,60")] {
        let out = tactile(&[
            "render",
            "--scene",
            "gear",
            "--noise",
            "0",
            "--offset",
            offset,
            "--output",
            s(&p(name)),
        ]);
        assert_eq!(code(&out), 0);
    }
    write_gear_keypoints(&p("kps.json"));
    let out = tactile(&[
        "match",
        "--goal",
        s(&p("goal.png")),
        "--current",
        s(&p("away.png")),
        "--keypoints",
        s(&p("kps.json")),
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn experiment_output_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"trial_count": 6, "noise_sigma": 0.0}"#).unwrap();
    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|n| {
            let out_dir = dir.path().join("runs").join(n);
            let out = tactile(&[
                "--config",
                s(&cfg),
                "--seed",
                "7",
                "--out",
                s(&out_dir),
                "experiment",
            ]);
            assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
            out_dir
        })
        .collect();
    for f in ["trials.csv", "summary.json"] {
        let a = std::fs::read(runs[0].join(f)).unwrap();
        let b = std::fs::read(runs[1].join(f)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{f} differs");
    }

    let out = tactile(&["--format", "csv", "summarize", s(&runs[0]), s(&runs[1])]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "2");
    assert_eq!(row[1], "12");
}

#[test]
fn summarize_empty_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&tactile(&["summarize", s(dir.path())])), 1);
}

#[test]
fn servo_dumps_images() {
    let dir = tempfile::tempdir().unwrap();
    let cal = SensorCalibration::working();
    let preset = ScenePreset::by_name("gear").unwrap();
    let goal = build_goal_spec(
        &preset.scene.clone().with_noise(0.0),
        &cal,
        preset.keypoints_px(&cal),
        30.0,
        Thresholds::default(),
        &DescriptorParams::default(),
    )
    .unwrap();
    let goal_json = dir.path().join("goal.json");
    goal.save(&goal_json, &dir.path().join("goal.png")).unwrap();

    let out_dir = dir.path().join("run");
    let out = tactile(&[
        "--out",
        s(&out_dir),
        "servo",
        "--goal",
        s(&goal_json),
        "--scene",
        "gear",
        "--offset",
        "2.0,-1.5,0.08",
        "--dump-images",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let result: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_dir.join("servo_result.json")).unwrap()).unwrap();
    assert_eq!(result["outcome"], "success");
    let n = result["iterations"].as_array().unwrap().len();
    assert!((1..=5).contains(&n));
    for i in 1..=n {
        assert!(out_dir.join(format!("iter_{i}.png")).exists());
    }
}
