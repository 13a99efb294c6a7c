use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gsrc::cli::{BenchRow, HISTOGRAM_HEADER, SUMMARY_IMAGE};
use gsrc::{load_image, save_image};

fn gsrc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsrc"))
        .args(args)
        .env_remove("GSRC_THREADS")
        .output()
        .expect("run gsrc")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn small_clean(dir: &Path, name: &str) -> PathBuf {
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/bench/camera.pgm");
    let img = load_image(src).unwrap().crop(100, 100, 48, 40).unwrap();
    let path = dir.join(name);
    save_image(&img, &path).unwrap();
    path
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn field(line: &str, key: &str) -> f64 {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing in {line:?}"))
        .parse()
        .unwrap()
}

#[test]
fn missing_input_fails_with_reason() {
    let dir = tempfile::tempdir().unwrap();
    let out = gsrc(&[
        "denoise",
        "--input",
        p(&dir.path().join("absent.png")),
        "--sigma",
        "30",
        "--output",
        p(&dir.path().join("o.png")),
    ]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("input not found"), "{err}");
    assert_eq!(err.trim().lines().count(), 1);
}

#[test]
fn denoise_is_repeatable_and_writes_telemetry() {
    let dir = tempfile::tempdir().unwrap();
    let clean = small_clean(dir.path(), "clean.pgm");
    let run = |name: &str| {
        let output = dir.path().join(name);
        let out = gsrc(&[
            "denoise", "--input", p(&clean), "--sigma", "30", "--seed", "7", "--iterations", "2",
            "--output", p(&output),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        let telemetry =
            std::fs::read_to_string(gsrc::cli::default_telemetry_path(&output)).unwrap();
        (std::fs::read(&output).unwrap(), telemetry, stdout(&out))
    };
    let (a, ta, sa) = run("a.png");
    let (b, _, _) = run("b.png");
    assert_eq!(a, b);
    let records: Vec<serde_json::Value> =
        ta.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 2);
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r["t"], i + 1);
        for key in ["sigma_t", "ssim_gate_value", "wall_ms", "psnr"] {
            assert!(r[key].is_number(), "{key} in {r}");
        }
        assert!(r["gate_choice"].is_string());
    }
    assert!(field(&sa, "psnr") > field(&sa, "psnr_noisy"));
}

#[test]
fn zero_shrinkage_single_iteration_reproduces_noisy_psnr() {
    let dir = tempfile::tempdir().unwrap();
    let clean = small_clean(dir.path(), "clean.png");
    let out = gsrc(&[
        "denoise", "--input", p(&clean), "--sigma", "25", "--seed", "3", "--c", "0",
        "--iterations", "1", "--output", p(&dir.path().join("o.png")),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let line = stdout(&out);
    assert!((field(&line, "psnr") - field(&line, "psnr_noisy")).abs() < 0.01, "{line}");
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let clean = small_clean(dir.path(), "clean.pgm");
    let output = dir.path().join("o.pgm");
    let telemetry = dir.path().join("t.jsonl");
    let config = dir.path().join("run.json");
    let json = serde_json::json!({
        "input": clean,
        "output": output,
        "telemetry": telemetry,
        "sigma": [20.0],
        "seed": 1,
        "iterations": 3,
        "threads": 2,
    });
    std::fs::write(&config, json.to_string()).unwrap();
    let out = gsrc(&["denoise", "--config", p(&config), "--iterations", "1"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let lines = std::fs::read_to_string(&telemetry).unwrap();
    assert_eq!(lines.lines().count(), 1);
    assert!(output.exists());

    std::fs::write(&config, r#"{"sigma": [20.0], "bogus": 1}"#).unwrap();
    let out = gsrc(&["denoise", "--config", p(&config)]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("bogus"));
}

#[test]
fn invalid_flags_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let clean = small_clean(dir.path(), "clean.pgm");
    let o = dir.path().join("o.pgm");
    for extra in [
        vec!["--first-pass", "bm3d"],
        vec!["--delta", "0"],
        vec!["--patch-side", "0"],
        vec!["--sigma", "10,20"],
    ] {
        let mut args = vec!["denoise", "--input", p(&clean), "--output", p(&o), "--sigma", "30"];
        if extra[0] == "--sigma" {
            args.truncate(5);
        }
        args.extend(extra.iter().copied());
        let out = gsrc(&args);
        assert!(!out.status.success(), "{extra:?}");
        assert!(stderr(&out).starts_with("error: "), "{extra:?}");
    }
    let out = Command::new(env!("CARGO_BIN_EXE_gsrc"))
        .args(["denoise", "--input", p(&clean), "--output", p(&o), "--sigma", "30"])
        .env("GSRC_THREADS", "many")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(stderr(&out).contains("GSRC_THREADS"));
}

#[test]
fn bench_rows_parse_and_summaries_follow() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    std::fs::create_dir(&images).unwrap();
    small_clean(&images, "one.pgm");
    let csv_path = dir.path().join("bench.csv");
    let out = gsrc(&[
        "bench", "--input", p(&images), "--sigma", "30", "--iterations", "1", "--csv",
        p(&csv_path),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let rows: Vec<BenchRow> = csv::Reader::from_path(&csv_path)
        .unwrap()
        .deserialize()
        .collect::<Result<_, _>>()
        .unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].image, "one");
    assert_eq!(rows[0].status, "ok");
    assert!(rows[0].psnr_gsrc.unwrap() > rows[0].psnr_noisy.unwrap());
    assert_eq!(rows[1].image, SUMMARY_IMAGE);
    assert_eq!(rows[1].psnr_gsrc, rows[0].psnr_gsrc);
    assert_eq!(rows[1].seconds_std, Some(0.0));

    let header = std::fs::read_to_string(&csv_path).unwrap();
    assert!(header.starts_with(
        "image,sigma,psnr_noisy,psnr_firstpass,psnr_gsrc,ssim_gsrc,seconds,"
    ));

    std::fs::write(images.join("broken.pgm"), b"P5\n4 4\n255\n").unwrap();
    let out = gsrc(&[
        "bench", "--input", p(&images), "--sigma", "30", "--iterations", "1", "--csv",
        p(&csv_path),
    ]);
    assert!(!out.status.success());
    let rows: Vec<BenchRow> = csv::Reader::from_path(&csv_path)
        .unwrap()
        .deserialize()
        .collect::<Result<_, _>>()
        .unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0].image, "broken");
    assert_eq!(rows[0].status, "FAILED");
    assert!(!rows[0].error.is_empty());
    assert_eq!(rows[2].status, "1/2");
}

#[test]
fn bench_with_no_images_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = gsrc(&["bench", "--input", p(dir.path()), "--sigma", "30"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("no images"));
}

#[test]
fn residual_report_and_histogram() {
    let dir = tempfile::tempdir().unwrap();
    let clean = small_clean(dir.path(), "clean.pgm");
    let report = dir.path().join("r.json");
    let out = gsrc(&["residual", "--input", p(&clean), "--sigma", "30", "--output", p(&report)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    for model in ["gaussian", "laplacian", "hyper_laplacian"] {
        assert!(json["models"][model]["loglik"].is_number());
    }
    let hist = std::fs::read_to_string(gsrc::cli::default_histogram_path(&report)).unwrap();
    assert!(hist.starts_with(HISTOGRAM_HEADER));
    let total: u64 = hist
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(3).unwrap().parse::<u64>().unwrap())
        .sum();
    assert_eq!(total, json["sample_count"].as_u64().unwrap());
}

#[test]
fn residual_degenerate_input_warns() {
    let dir = tempfile::tempdir().unwrap();
    let clean = small_clean(dir.path(), "clean.pgm");
    let report = dir.path().join("r.json");
    let first = format!("external:{}", p(&clean));
    let out = gsrc(&[
        "residual", "--input", p(&clean), "--sigma", "0", "--first-pass", &first, "--output",
        p(&report),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stderr(&out).contains("warning: degenerate input"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(!json["warnings"].as_array().unwrap().is_empty());
}
