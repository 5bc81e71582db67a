//! End-to-end checks of the `ddcnet` binary: exit codes, the
//! machine-parseable summary lines, and determinism of emitted files.

use std::path::Path;
use std::process::{Command, Output};

use ddcnet::flow::{write_flo, FlowField};

fn ddcnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddcnet"))
        .args(args)
        .env_remove("DDCNET_OUT")
        .output()
        .expect("spawn ddcnet")
}

fn stdout_lines(out: &Output) -> Vec<String> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(str::to_owned)
        .collect()
}

/// Last stdout line, asserting the command succeeded.
fn summary_line(out: &Output) -> String {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    stdout_lines(out).last().expect("no output").clone()
}

/// Parse `key=value` tokens from a summary line.
fn fields(line: &str) -> Vec<(String, String)> {
    line.split_whitespace()
        .filter_map(|tok| tok.split_once('='))
        .map(|(k, v)| (k.to_owned(), v.to_owned()))
        .collect()
}

fn field<'a>(pairs: &'a [(String, String)], key: &str) -> &'a str {
    &pairs
        .iter()
        .find(|(k, _)| k == key)
        .unwrap_or_else(|| panic!("missing field {key}"))
        .1
}

#[test]
fn info_summary_line_reports_builder_counts() {
    let out = ddcnet(&["info", "--net", "b0"]);
    let line = summary_line(&out);
    assert!(line.starts_with("INFO "), "got {line:?}");
    let pairs = fields(&line);
    assert_eq!(field(&pairs, "net"), "ddcnet-b0");
    assert_eq!(field(&pairs, "convs"), "30");
    assert_eq!(field(&pairs, "params"), "1037634");
    assert_eq!(field(&pairs, "rf"), "695");
    assert_eq!(field(&pairs, "published"), "1030000");
}

#[test]
fn linear_nets_report_closed_form_receptive_fields() {
    let out = ddcnet(&["info", "--net", "linear:30:1"]);
    assert_eq!(field(&fields(&summary_line(&out)), "rf"), "931");
    let out = ddcnet(&["info", "--net", "linear:1:1"]);
    assert_eq!(field(&fields(&summary_line(&out)), "rf"), "3");
}

#[test]
fn malformed_spec_file_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("broken.net");
    std::fs::write(&spec, "name broken\ninput_channels 3\ntrunk conv what\n").unwrap();
    let out = ddcnet(&["info", "--net", spec.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line"), "no line number in: {err}");
}

#[test]
fn unknown_net_is_a_usage_error() {
    let out = ddcnet(&["info", "--net", "linear:zero"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

#[test]
fn missing_out_dir_is_a_usage_error() {
    let out = ddcnet(&[
        "erf",
        "--net",
        "linear:2:1:4",
        "--size",
        "17",
        "--out",
        "/nonexistent/definitely/not-here",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("does not exist"), "stderr: {err}");
}

#[test]
fn corrupt_flo_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.flo");
    std::fs::write(&bad, b"JUNKJUNKJUNKJUNK").unwrap();
    let out = ddcnet(&[
        "viz",
        "--flo",
        bad.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn erf_emits_all_four_files_and_a_stats_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = ddcnet(&[
        "erf",
        "--net",
        "linear:3:1:4",
        "--size",
        "33",
        "--prefix",
        "probe",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let line = summary_line(&out);
    assert!(line.starts_with("ERF "), "got {line:?}");
    let pairs = fields(&line);
    assert_eq!(field(&pairs, "h"), "33");
    assert!(field(&pairs, "fwhm_row").parse::<f64>().unwrap() > 1.0);
    for name in ["probe-map.pgm", "probe-map.csv", "probe-row.csv", "probe-stats.txt"] {
        assert!(dir.path().join(name).is_file(), "missing {name}");
    }
    let stats = std::fs::read_to_string(dir.path().join("probe-stats.txt")).unwrap();
    assert!(line.contains(stats.trim()), "stats file disagrees with summary");
}

#[test]
fn identical_invocations_emit_identical_files() {
    let run = |dir: &Path| {
        let out = ddcnet(&[
            "erf",
            "--net",
            "linear:2:1:4",
            "--size",
            "25",
            "--out",
            dir.to_str().unwrap(),
        ]);
        summary_line(&out);
        std::fs::read(dir.join("erf-map.pgm")).unwrap()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(run(a.path()), run(b.path()));
}

#[test]
fn train_runs_are_bitwise_reproducible() {
    let run = |dir: &Path| {
        let out = ddcnet(&[
            "train",
            "--net",
            "linear:2:1:4",
            "--steps",
            "4",
            "--size",
            "24",
            "--seed",
            "11",
            "--out",
            dir.to_str().unwrap(),
        ]);
        let line = summary_line(&out);
        // the checkpoint token carries the temp dir, so drop it before comparing
        let stable: Vec<String> = line
            .split_whitespace()
            .filter(|tok| !tok.starts_with("checkpoint="))
            .map(str::to_owned)
            .collect();
        (stable, std::fs::read(dir.join("final.ckpt")).unwrap())
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(run(a.path()), run(b.path()));
}

#[test]
fn viz_zero_flow_renders_white() {
    let dir = tempfile::tempdir().unwrap();
    let field = FlowField::zeros(4, 6).unwrap();
    let flo = dir.path().join("still.flo");
    write_flo(&field, &flo).unwrap();
    let out = ddcnet(&[
        "viz",
        "--flo",
        flo.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let line = summary_line(&out);
    let pairs = fields(&line);
    assert_eq!(field_of(&pairs, "w"), "6");
    assert_eq!(field_of(&pairs, "h"), "4");
    let ppm = std::fs::read(dir.path().join("still.ppm")).unwrap();
    let header_end = find_pixels(&ppm);
    assert_eq!(&ppm[header_end..], vec![255u8; 4 * 6 * 3].as_slice());
}

// local alias so the borrow in viz test reads clearly
fn field_of<'a>(pairs: &'a [(String, String)], key: &str) -> &'a str {
    field(pairs, key)
}

/// Byte offset of the pixel payload in a binary PPM (after 3 header lines).
fn find_pixels(ppm: &[u8]) -> usize {
    let mut newlines = 0;
    for (i, &b) in ppm.iter().enumerate() {
        if b == b'\n' {
            newlines += 1;
            if newlines == 3 {
                return i + 1;
            }
        }
    }
    panic!("not a binary PPM");
}

#[test]
fn eval_of_identical_directories_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let est = dir.path().join("est");
    let gt = dir.path().join("gt");
    std::fs::create_dir(&est).unwrap();
    std::fs::create_dir(&gt).unwrap();
    for k in 0..3 {
        let mut f = FlowField::constant(5, 7, k as f32, -0.5 * k as f32).unwrap();
        f.set_invalid(0, 0);
        let name = format!("pair-{k}.flo");
        write_flo(&f, &est.join(&name)).unwrap();
        write_flo(&f, &gt.join(&name)).unwrap();
    }
    let out = ddcnet(&[
        "eval",
        "--est",
        est.to_str().unwrap(),
        "--gt",
        gt.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let line = summary_line(&out);
    let pairs = fields(&line);
    assert_eq!(field(&pairs, "pairs"), "3");
    assert_eq!(field(&pairs, "aee"), "0.000000");
    assert_eq!(field(&pairs, "fl_all"), "0.000000");
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    // 3 per-pair rows + header + mean
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().next().unwrap().starts_with("name,aee,fl_all"));
}

#[test]
fn eval_reports_missing_estimate_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let est = dir.path().join("est");
    let gt = dir.path().join("gt");
    std::fs::create_dir(&est).unwrap();
    std::fs::create_dir(&gt).unwrap();
    let f = FlowField::constant(3, 3, 1.0, 0.0).unwrap();
    write_flo(&f, &gt.join("only-gt.flo")).unwrap();
    let out = ddcnet(&[
        "eval",
        "--est",
        est.to_str().unwrap(),
        "--gt",
        gt.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("only-gt.flo"));
}

#[test]
fn design_table_has_nondecreasing_fwhm_and_a_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = ddcnet(&[
        "design",
        "--magnitude",
        "4",
        "--max-depth",
        "10",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let line = summary_line(&out);
    let pairs = fields(&line);
    assert_eq!(field(&pairs, "coverage"), "4");
    assert_eq!(field(&pairs, "target_fwhm"), "8");
    let chosen: usize = field(&pairs, "chosen_depth").parse().unwrap();
    assert!(chosen >= 1);
    let csv = std::fs::read_to_string(dir.path().join("design.csv")).unwrap();
    let fwhms: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(fwhms.len(), chosen);
    assert!(fwhms.windows(2).all(|w| w[1] >= w[0]), "fwhm not monotone: {fwhms:?}");
    assert!(dir.path().join("design-strip.pgm").is_file());
}

#[test]
fn design_requires_a_histogram_source_or_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let out = ddcnet(&["design", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn schedule_comparison_emits_three_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = ddcnet(&[
        "design",
        "--compare-depth",
        "4",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let line = summary_line(&out);
    let pairs = fields(&line);
    assert_eq!(field(&pairs, "schedules"), "3");
    let csv = std::fs::read_to_string(dir.path().join("schedules.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn trained_checkpoint_round_trips_through_eval() {
    let dir = tempfile::tempdir().unwrap();
    let train_out = ddcnet(&[
        "train",
        "--net",
        "linear:2:1:4",
        "--steps",
        "3",
        "--size",
        "24",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    summary_line(&train_out);
    let ckpt = dir.path().join("final.ckpt");
    let out = ddcnet(&[
        "eval",
        "--net",
        "linear:2:1:4",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--samples",
        "2",
        "--size",
        "24",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let line = summary_line(&out);
    let pairs = fields(&line);
    assert_eq!(field(&pairs, "pairs"), "2");
    assert!(field(&pairs, "aee").parse::<f64>().unwrap().is_finite());
}
