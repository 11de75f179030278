use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tcmap_core::ntg1;
use tcmap_core::raster::{Grid, GridTransform};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn tcmap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tcmap")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = tcmap(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tf() -> GridTransform {
    GridTransform::new(0.0, 1_000.0, 10.0, "test").unwrap()
}

/// Disc of tree crop in a 32x32 map.
fn write_map(dir: &Path, name: &str, cx: f64, cy: f64, radius: f64) -> PathBuf {
    let values = (0..32 * 32)
        .map(|i| {
            let (r, c) = ((i / 32) as f64 + 0.5, (i % 32) as f64 + 0.5);
            ((r - cy).powi(2) + (c - cx).powi(2) <= radius * radius) as u8
        })
        .collect();
    let path = dir.join(name);
    ntg1::write_grid(&Grid::from_u8(32, 32, tf(), values).unwrap(), &path).unwrap();
    path
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    path
}

fn error_of(out: &Output) -> Value {
    let line = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str::<Value>(line.trim()).expect("stderr is one JSON object")["error"].clone()
}

#[test]
fn assess_reproduces_table3_overall_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    ok(&["assess", "--strata", s(&fixture("table3_strata.csv")), "--counts", s(&fixture("table3_counts.csv")), "--out", s(&out)]);
    let report = json(out.join("assessment.json"));
    let oa = report["accuracies"]["overall"].as_f64().unwrap();
    assert!((oa - 0.9957).abs() < 5e-4, "{oa}");
    let run = json(out.join("run.json"));
    assert_eq!(run["command"], "assess");
    let digests = run["inputs"].as_object().unwrap();
    assert_eq!(digests.len(), 2);
    assert!(digests.values().all(|d| d.as_str().unwrap().len() == 64));
}

#[test]
fn area_scaling_reproduces_continental_total() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    ok(&["area", "--scale", s(&fixture("table_e1_regions.csv")), "--out", s(&out)]);
    let r = json(out.join("scaling.json"));
    let factor = r["factor"].as_f64().unwrap();
    let total = r["total_ha"].as_f64().unwrap();
    assert_eq!((factor * 100.0).round() / 100.0, 1.26);
    assert!((total / 1e6 - 10.99).abs() < 0.02, "{total}");
}

#[test]
fn area_from_error_matrix_partitions_total() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    ok(&["area", "--strata", s(&fixture("table3_strata.csv")), "--counts", s(&fixture("table3_counts.csv")), "--out", s(&out)]);
    let areas = json(out.join("areas.json"));
    let sum: f64 = areas.as_array().unwrap().iter().map(|a| a["adjusted_area_ha"].as_f64().unwrap()).sum();
    assert!((sum / 1_852_913_982.0 - 1.0).abs() < 1e-12, "{sum}");
}

#[test]
fn invalid_config_key_fails_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), r#"{"sample": {"buffer_radius": 30}}"#);
    let out = dir.path().join("out");
    let res = tcmap(&["--config", s(&config), "assess", "--strata", s(&fixture("table3_strata.csv")), "--counts", s(&fixture("table3_counts.csv")), "--out", s(&out)]);
    assert!(!res.status.success());
    assert_eq!(error_of(&res)["category"], "config");
    assert!(!out.exists());
}

#[test]
fn module_failure_reports_category_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let counts = dir.path().join("counts.csv");
    std::fs::write(&counts, "stratum_id,ref_class,count\ntree_crop,tree_crop,-3\n").unwrap();
    let out = dir.path().join("out");
    let res = tcmap(&["assess", "--strata", s(&fixture("table3_strata.csv")), "--counts", s(&counts), "--out", s(&out)]);
    assert!(!res.status.success());
    assert_eq!(error_of(&res)["category"], "assess");
    assert!(!out.exists());
}

#[test]
fn same_seed_gives_identical_artifacts_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let map = write_map(dir.path(), "map.ntg1", 16.0, 16.0, 7.0);
    let config = write_config(dir.path(), r#"{"sample": {"buffer_radius_m": 20, "tree_crop": 25, "non_tree_crop": 25, "buffer": 10}, "split": {"cell_km": 0.05}}"#);
    let run = |name: &str, seed: &str, threads: &str| -> PathBuf {
        let out = dir.path().join(name);
        ok(&["--config", s(&config), "--seed", seed, "--threads", threads, "sample", "--map", s(&map), "--out", s(&out)]);
        let split = dir.path().join(format!("{name}_split"));
        ok(&["--config", s(&config), "--seed", seed, "--threads", threads, "split", "--samples", s(&out.join("samples.csv")), "--out", s(&split)]);
        split
    };
    let a = run("a", "7", "1");
    let b = run("b", "7", "3");
    let c = run("c", "8", "1");
    let read = |p: &Path| std::fs::read(p.join("samples.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    assert_eq!(std::fs::read(a.join("run.json")).unwrap().len(), std::fs::read(b.join("run.json")).unwrap().len());
    let text = String::from_utf8(read(&a)).unwrap();
    assert_eq!(text.lines().count(), 61);
    let counts = json(a.join("split.json"));
    let total: u64 = counts.as_object().unwrap().values().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(total, 60);
}

#[test]
fn sampled_strata_feed_assessment() {
    let dir = tempfile::tempdir().unwrap();
    let map = write_map(dir.path(), "map.ntg1", 12.0, 20.0, 6.0);
    let config = write_config(dir.path(), r#"{"sample": {"buffer_radius_m": 20, "tree_crop": 10, "non_tree_crop": 10, "buffer": 5}}"#);
    let out = dir.path().join("s");
    ok(&["--config", s(&config), "sample", "--map", s(&map), "--out", s(&out)]);
    // unlabelled samples cannot be assessed
    let res = tcmap(&["assess", "--strata", s(&out.join("strata.csv")), "--samples", s(&out.join("samples.csv")), "--out", s(&dir.path().join("x"))]);
    assert_eq!(error_of(&res)["category"], "config");
    // label every sample with its map class: a perfect map
    let text = std::fs::read_to_string(out.join("samples.csv")).unwrap();
    let mut labelled = String::new();
    for (k, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if k == 0 {
            labelled.push_str(line);
        } else {
            labelled.push_str(&[f[0], f[1], f[2], f[3], f[4], f[4], f[6]].join(","));
        }
        labelled.push('\n');
    }
    let samples = dir.path().join("labelled.csv");
    std::fs::write(&samples, labelled).unwrap();
    let a = dir.path().join("a");
    ok(&["assess", "--strata", s(&out.join("strata.csv")), "--samples", s(&samples), "--out", s(&a)]);
    let report = json(a.join("assessment.json"));
    assert!((report["accuracies"]["overall"].as_f64().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn analytics_commands_run_on_binary_maps() {
    let dir = tempfile::tempdir().unwrap();
    let map = write_map(dir.path(), "map.ntg1", 16.0, 16.0, 8.0);
    let other = write_map(dir.path(), "other.ntg1", 20.0, 16.0, 8.0);
    let pa = write_map(dir.path(), "pa.ntg1", 8.0, 8.0, 5.0);
    let loss = dir.path().join("loss.ntg1");
    ntg1::write_grid(&Grid::from_u8(32, 32, tf(), (0..1024).map(|i| (i % 21) as u8).collect()).unwrap(), &loss).unwrap();
    let config = write_config(dir.path(), r#"{"analytics": {"band_width_m": 20, "max_dist_m": 100, "hex_side_m": 50}}"#);
    let out = dir.path().join("out");
    let c = s(&config);
    ok(&["--config", c, "loss-overlap", "--map", s(&map), "--loss", s(&loss), "--out", s(&out)]);
    ok(&["--config", c, "pa-profile", "--map", s(&map), "--pa", s(&pa), "--out", s(&out)]);
    ok(&["--config", c, "hex", "--map", s(&map), "--out", s(&out)]);
    ok(&["--config", c, "agree", "--a", s(&map), "--b", s(&other), "--out", s(&out)]);

    let overlap = json(out.join("loss_overlap.json"));
    let by_year: u64 = overlap["per_year"].as_array().unwrap().iter().map(|y| y["pixels"].as_u64().unwrap()).sum();
    assert_eq!(by_year, overlap["total_overlap_pixels"].as_u64().unwrap());
    assert!(by_year > 0);
    let agree = json(out.join("agreement.json"));
    let pixels: u64 = ["pixels_11", "pixels_10", "pixels_01", "pixels_00"].iter().map(|k| agree[k].as_u64().unwrap()).sum();
    assert_eq!(pixels, 1024);
    let hex = std::fs::read_to_string(out.join("hex.csv")).unwrap();
    assert!(hex.starts_with("q,r,density\n") && hex.lines().count() > 2);
    let profile = json(out.join("pa_profile.json"));
    assert_eq!(profile["domain_pixels"].as_u64().unwrap(), 1024);

    let res = tcmap(&["loss-overlap", "--map", s(&loss), "--loss", s(&loss), "--out", s(&dir.path().join("bad"))]);
    assert_eq!(error_of(&res)["category"], "raster");
}

fn small_model(dir: &Path) -> PathBuf {
    let path = dir.join("model.json");
    std::fs::write(&path, r#"{"embed_dim": 16, "heads": 2, "spatial_layers": 1, "temporal_layers": 1, "decoder_layers": 1, "image_size": 16}"#).unwrap();
    path
}

fn write_stack(dir: &Path, prefix: &str, n: usize) -> String {
    (0..n)
        .map(|j| {
            let p = dir.join(format!("{prefix}{j}.ntg1"));
            let values = (0..32 * 32).map(|i| ((i * 7 + j * 13) % 17) as f32 / 17.0 - 0.5).collect();
            ntg1::write_grid(&Grid::from_f32(32, 32, tf(), values).unwrap(), &p).unwrap();
            p.to_str().unwrap().to_string()
        })
        .collect::<Vec<_>>()
        .join(",")
}

#[test]
fn model_forward_and_calibrate_chain() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_model(dir.path());
    let config = write_config(dir.path(), &format!(r#"{{"model": {{"config": "{}"}}}}"#, model.file_name().unwrap().to_str().unwrap()));
    let s1 = write_stack(dir.path(), "s1_", 4 * 5);
    let s2 = write_stack(dir.path(), "s2_", 4 * 10);
    let mut members = Vec::new();
    for seed in ["1", "2"] {
        let out = dir.path().join(format!("m{seed}"));
        ok(&["--config", s(&config), "--seed", seed, "model-forward", "--s1", &s1, "--s2", &s2, "--out", s(&out)]);
        let logits: Vec<String> = tcmap_core::labels::LAND_COVER_CLASSES
            .iter()
            .map(|c| out.join(format!("logits_{c}.ntg1")).to_str().unwrap().to_string())
            .collect();
        let g = ntg1::read_grid(&logits[0]).unwrap();
        assert_eq!((g.width(), g.height()), (32, 32));
        members.push(logits.join(","));
    }
    let reference = dir.path().join("ref.ntg1");
    ntg1::write_grid(&Grid::from_u8(32, 32, tf(), (0..1024).map(|i| (i % 8) as u8).collect()).unwrap(), &reference).unwrap();
    let out = dir.path().join("cal");
    ok(&["calibrate", "--member", &members[0], "--member", &members[1], "--reference", s(&reference), "--format", "csv", "--out", s(&out)]);
    let report = json(out.join("calibration.json"));
    assert_eq!(report["members"], 2);
    assert_eq!(report["pixels"], 1024);
    let ece = report["ece"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&ece));
    let entropy = std::fs::read_to_string(out.join("entropy.csv")).unwrap();
    assert_eq!(entropy.lines().count(), 1025);
    assert!(out.join("tree_crop_map.csv").exists());

    let res = tcmap(&["--config", s(&config), "model-forward", "--s1", &s1, "--s2", &s1, "--out", s(&dir.path().join("bad"))]);
    assert_eq!(error_of(&res)["category"], "config");
}

#[test]
fn param_count_of_default_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    ok(&["param-count", "--out", s(&out)]);
    let n = json(out.join("param_count.json"))["parameters"].as_u64().unwrap();
    assert!((n as f64 / 3.4e6 - 1.0).abs() <= 0.15, "{n}");
}

#[test]
fn composite_from_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut obs = Vec::new();
    for (k, date) in ["2021-02-01", "2021-02-15", "2021-05-01", "2021-08-01", "2021-11-01"].iter().enumerate() {
        let p = dir.path().join(format!("b{k}.ntg1"));
        ntg1::write_grid(&Grid::from_f32(32, 32, tf(), vec![k as f32; 1024]).unwrap(), &p).unwrap();
        obs.push(format!(r#"{{"date": "{date}", "bands": [{{"name": "B1", "path": "b{k}.ntg1"}}]}}"#));
    }
    let manifest = dir.path().join("optical.json");
    std::fs::write(&manifest, format!(r#"{{"modality": "optical", "band_names": ["B1"], "observations": [{}]}}"#, obs.join(","))).unwrap();
    let out = dir.path().join("out");
    ok(&["composite", "--manifest", s(&manifest), "--out", s(&out)]);
    let g = ntg1::read_grid(out.join("season0_B1.ntg1")).unwrap();
    assert_eq!(g.get_f64(0), 0.5);
    assert_eq!(ntg1::read_grid(out.join("season3_B1.ntg1")).unwrap().get_f64(100), 4.0);
    assert_eq!(json(out.join("composite.json"))["observations_kept"], 5);
}
