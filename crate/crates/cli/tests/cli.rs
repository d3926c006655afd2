use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pipescope_cli::pipeline::{layout, RunReport, StageStatus};
use pipescope_cli::scenario::{load_scenario, ScenarioError};
use pipescope_cli::{train_junctions, CliError, EXIT_CONFIG, EXIT_STAGE};

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn pipescope(args: &[&str], scenario: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pipescope"))
        .args(args)
        .arg("--scenario")
        .arg(scenario)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn report(out: &Path) -> RunReport {
    serde_json::from_slice(&fs::read(out.join(layout::REPORT)).unwrap()).unwrap()
}

/// Copy of fig3 with one line edited.
fn edited_fig3(dir: &Path, from: &str, to: &str) -> PathBuf {
    let text = fs::read_to_string(scenario("fig3.scenario")).unwrap();
    assert!(text.contains(from));
    let path = dir.join("edited.scenario");
    fs::write(&path, text.replacen(from, to, 1)).unwrap();
    path
}

#[test]
fn bundled_scenarios_load() {
    let y = load_scenario(&scenario("fig3.scenario")).unwrap();
    assert_eq!(y.node_names().unwrap(), ["IM1", "IM2", "IM3"]);
    assert_eq!(y.build_network().unwrap().junctions.len(), 1);
    let leak = load_scenario(&scenario("fig7.scenario")).unwrap();
    let net = leak.build_network().unwrap();
    let im1 = net.terminal_by_name("IM1").unwrap().id;
    let d = net.path_distance(net.terminal_point(im1), net.leak_point(net.leaks[0].id)).unwrap();
    assert!((d - 2.6).abs() < 1e-12);
}

#[test]
fn missing_sample_rate_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = edited_fig3(dir.path(), "fs_hz = 48000.0", "");
    match load_scenario(&path) {
        Err(ScenarioError::Validation { field, .. }) => assert_eq!(field, "sim.fs_hz"),
        other => panic!("{other:?}"),
    }
    let o = pipescope(&["run"], &path, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    assert!(stderr(&o).contains("sim.fs_hz"), "{}", stderr(&o));
}

#[test]
fn syntax_error_reports_position() {
    let dir = tempfile::tempdir().unwrap();
    let path = edited_fig3(dir.path(), "length_m = 3.0", "length_m = 3.0.0");
    let o = pipescope(&["simulate"], &path, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    let text = fs::read_to_string(&path).unwrap();
    let line = text.lines().position(|l| l.contains("3.0.0")).unwrap() + 1;
    assert!(stderr(&o).contains(&format!("line {line}, column")), "{}", stderr(&o));
}

#[test]
fn discover_without_probe_data_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = pipescope(&["discover"], &scenario("fig3.scenario"), &out);
    assert_eq!(o.status.code(), Some(EXIT_STAGE));
    let err = stderr(&o);
    assert!(err.contains("stage discover failed") && err.contains("missing dependency"), "{err}");
    let r = report(&out);
    let discover = r.stages.iter().find(|s| s.stage.name() == "discover").unwrap();
    assert_eq!(discover.status, StageStatus::Failed);
    assert!(r.stages.iter().filter(|s| s.stage.name() != "discover").all(|s| s.status == StageStatus::NotRequested));
}

#[test]
fn image_needs_topology_or_override() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let fig3 = scenario("fig3.scenario");
    assert!(pipescope(&["simulate"], &fig3, &out).status.success());
    let o = pipescope(&["image"], &fig3, &out);
    assert_eq!(o.status.code(), Some(EXIT_STAGE));
    assert!(stderr(&o).contains("topology.json"), "{}", stderr(&o));
    let o = pipescope(&["image", "--ground-truth-topology"], &fig3, &out);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join(layout::IMAGE_CSV).exists());
}

#[test]
fn later_stage_fails_and_rest_is_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = pipescope(&["run", "--stages", "image,detect"], &scenario("fig3.scenario"), &out);
    assert_eq!(o.status.code(), Some(EXIT_STAGE));
    let r = report(&out);
    assert_eq!(r.failed_stage().map(|s| s.name()), Some("image"));
    let detect = r.stages.iter().find(|s| s.stage.name() == "detect").unwrap();
    assert_eq!(detect.status, StageStatus::Skipped);
}

#[test]
fn stages_rerun_alone_reproduce_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let fig3 = scenario("fig3.scenario");
    let o = pipescope(&["run", "--dump-traces"], &fig3, &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = report(&out);
    assert!(r.stages.iter().all(|s| s.status == StageStatus::Ok));
    for s in &r.stages {
        for a in &s.artifacts {
            assert!(out.join(a).exists(), "{a}");
        }
    }
    // Three nodes, four repeats: every recorder hears every prober.
    let raw = fs::read_dir(out.join("probe/raw")).unwrap().count();
    assert_eq!(raw, 2 * 3 * 3 * 4);
    let topo = r.topology.as_ref().unwrap();
    assert_eq!(topo.terminal_names, ["IM1", "IM2", "IM3"]);
    assert_eq!(topo.junctions.len(), 1);

    let files = [layout::TOPOLOGY, layout::MODELS, layout::IMAGE_CSV, layout::IMAGE_JSON, layout::LEAKS];
    let before: Vec<Vec<u8>> = files.iter().map(|f| fs::read(out.join(f)).unwrap()).collect();
    for stage in ["discover", "image", "detect"] {
        let o = pipescope(&[stage], &fig3, &out);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    for (f, b) in files.iter().zip(&before) {
        assert_eq!(&fs::read(out.join(f)).unwrap(), b, "{f} changed");
    }
}

#[test]
fn seed_override_changes_noise_only() {
    let dir = tempfile::tempdir().unwrap();
    let fig3 = scenario("fig3.scenario");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(pipescope(&["simulate"], &fig3, &a).status.success());
    assert!(pipescope(&["simulate", "--seed", "99"], &fig3, &b).status.success());
    let x = fs::read(a.join("listen/IM1.f32")).unwrap();
    let y = fs::read(b.join("listen/IM1.f32")).unwrap();
    assert_eq!(x.len(), y.len());
    assert_ne!(x, y);
    assert_eq!(report(&b).seed, 99);
}

#[test]
fn train_junctions_writes_five_classes() {
    let dir = tempfile::tempdir().unwrap();
    let fig3 = scenario("fig3.scenario");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = pipescope(&["train-junctions"], &fig3, &a);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(pipescope(&["train-junctions"], &fig3, &b).status.success());
    let text = fs::read_to_string(a.join(layout::MODELS)).unwrap();
    assert_eq!(text, fs::read_to_string(b.join(layout::MODELS)).unwrap());
    let rows: Vec<&str> = text.lines().filter(|l| l.starts_with("[classes.")).collect();
    assert_eq!(rows.len(), 5, "{text}");
    for class in ["L_BEND_1x1", "T_1x1", "T_1x1_5", "T_1x2", "CROSS_1x1"] {
        assert!(rows.contains(&format!("[classes.{class}]").as_str()), "{class}");
    }
    assert_eq!(text.matches("alpha = ").count(), 5);
    assert_eq!(text.matches("beta = ").count(), 5);
}

#[test]
fn single_distance_sweep_is_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let path = edited_fig3(
        dir.path(),
        "distances_m = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]",
        "distances_m = [3.0]",
    );
    let scn = load_scenario(&path).unwrap();
    let err = train_junctions(&scn, &dir.path().join("m")).unwrap_err();
    assert!(matches!(err, CliError::Training(_)));
    assert!(err.to_string().contains("two distinct distances"), "{err}");
    let o = pipescope(&["train-junctions"], &path, &dir.path().join("m"));
    assert_eq!(o.status.code(), Some(EXIT_STAGE));
}

#[test]
fn pretrained_model_file_is_used() {
    let dir = tempfile::tempdir().unwrap();
    let fig3 = scenario("fig3.scenario");
    let models = dir.path().join("models");
    assert!(pipescope(&["train-junctions"], &fig3, &models).status.success());
    let path = edited_fig3(
        dir.path(),
        "[junction_models]",
        &format!("[junction_models]\npath = \"{}\"", models.join(layout::MODELS).display()),
    );
    let out = dir.path().join("out");
    let o = pipescope(&["run", "--stages", "probe,discover"], &path, &out);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(out.join(layout::MODELS)).unwrap(),
        fs::read(models.join(layout::MODELS)).unwrap()
    );
    let topo = report(&out).topology.unwrap();
    assert_eq!(topo.junctions[0].class.map(|k| k.label()), Some("T_1x1"));
}
