use std::path::Path;
use std::process::{Command, Output};

fn cli(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tilewise-xai"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn small_config() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures/small.toml")
        .display()
        .to_string()
}

#[test]
fn help_lists_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(dir.path(), &["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for sub in ["gen-data", "train-seg", "train-mil", "explain", "evaluate", "stability", "baseline", "run"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn baseline_prints_closed_forms() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(dir.path(), &["baseline", "--t", "0.9,0.5", "--trials", "20", "--side", "16"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("t=0.9 iou=0.052632 precision=0.100000 "), "{}", lines[0]);
    assert!(lines[1].starts_with("t=0.5 iou=0.333333 precision=0.500000 "), "{}", lines[1]);
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[data]\nno_such_key = 1\n").unwrap();
    let out = cli(dir.path(), &["--config", bad.to_str().unwrap(), "gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[config]"));

    let out = cli(dir.path(), &["--t", "1.5", "gen-data"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let tile = dir.path().join("tile.png");
    image::RgbImage::new(64, 64).save(&tile).unwrap();
    let out = cli(dir.path(), &["explain", "--tile", tile.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_then_explain_writes_heatmaps_masks_and_record() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config();
    let out = cli(dir.path(), &["--config", &config, "train-mil"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("checkpoints/classifier.json").exists());
    assert!(dir.path().join("logs/mil.csv").exists());

    let tile = dir.path().join("tile.png");
    let img = image::RgbImage::from_fn(64, 64, |x, y| image::Rgb([(x * 4) as u8, (y * 4) as u8, 180]));
    img.save(&tile).unwrap();
    let out = cli(
        dir.path(),
        &["--config", &config, "--agg", "abs,var", "--t", "0.9", "explain", "--tile", tile.to_str().unwrap()],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let explain = dir.path().join("explain");
    for agg in ["abs", "var"] {
        assert!(explain.join(format!("tile_{agg}.png")).exists());
        let (w, h, px) = tilewise_core::xai::read_pgm(&explain.join(format!("tile_{agg}_t90.pgm"))).unwrap();
        assert_eq!((w, h), (64, 64));
        // top 10% of 4096 pixels
        assert!((px.iter().filter(|&&p| p > 0).count() as i64 - 410).abs() <= 1);
        let record: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(explain.join(format!("tile_{agg}.json"))).unwrap()).unwrap();
        assert_eq!(record["aggregator"], agg);
        let s = record["prediction"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&s));
    }

    let wrong = dir.path().join("small.png");
    image::RgbImage::new(32, 32).save(&wrong).unwrap();
    let out = cli(dir.path(), &["--config", &config, "explain", "--tile", wrong.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}
