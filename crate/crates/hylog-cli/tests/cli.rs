//! End-to-end checks of the command-line contract: subcommand plumbing,
//! exit codes and artifact determinism.

use std::path::Path;
use std::process::{Command, Output};

fn hylog(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hylog"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn dir_digest(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    entries
        .into_iter()
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}

#[test]
fn unknown_flag_prints_usage_and_exits_one() {
    let out = hylog(&["--definitely-not-a-flag"]);
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stderr);
    assert!(text.contains("Usage"), "{text}");
}

#[test]
fn help_exits_zero() {
    let out = hylog(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn synth_is_deterministic_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let out = hylog(&[
            "synth",
            "--out",
            d.to_str().unwrap(),
            "--count",
            "3",
            "--test-count",
            "1",
            "--size",
            "16x16",
            "--seed",
            "7",
        ]);
        assert_eq!(out.status.code(), Some(0), "{:?}", out);
    }
    assert_eq!(dir_digest(&a), dir_digest(&b));
}

#[test]
fn gradcheck_prints_pass_lines_and_exits_zero() {
    let out = hylog(&["gradcheck", "--module", "matmul"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().any(|l| l.starts_with("PASS matmul")), "{text}");
}

#[test]
fn gradcheck_with_unmatched_filter_fails_cleanly() {
    let out = hylog(&["gradcheck", "--module", "no-such-op"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corrupt_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bad.bin");
    std::fs::write(&ckpt, b"XXXXnotacheckpoint").unwrap();
    let img = dir.path().join("img.ppm");
    std::fs::write(&img, b"P6\n1 1\n255\n\x00\x00\x00").unwrap();
    let out = hylog(&[
        "infer",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--in",
        img.to_str().unwrap(),
        "--out",
        dir.path().join("out.ppm").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let text = String::from_utf8_lossy(&out.stderr);
    assert!(text.contains("error:"), "{text}");
}

#[test]
fn train_infer_eval_pipeline_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    assert_eq!(
        hylog(&[
            "synth",
            "--out",
            data.to_str().unwrap(),
            "--count",
            "4",
            "--test-count",
            "2",
            "--size",
            "16x16",
            "--seed",
            "3",
        ])
        .status
        .code(),
        Some(0)
    );
    let cfg = dir.path().join("cfg.txt");
    std::fs::write(
        &cfg,
        "stages=1\nbase_channels=4\ncfsm_reduction=2\nheads=2\nmlp_ratio=2\nsteps=3\nseed=1\n",
    )
    .unwrap();
    let out = hylog(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{:?}", out);
    assert!(run.join("final.bin").exists());
    assert!(run.join("metrics.csv").exists());
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,L,L_R,L_S,L_D,psnr,ssim\n"));

    // infer keeps the input extent
    let input = data.join("sample_00004_hazy.ppm");
    let result = dir.path().join("dehazed.ppm");
    let out = hylog(&[
        "infer",
        "--checkpoint",
        run.join("final.bin").to_str().unwrap(),
        "--in",
        input.to_str().unwrap(),
        "--out",
        result.to_str().unwrap(),
        "--emit-reflectance",
    ]);
    assert_eq!(out.status.code(), Some(0), "{:?}", out);
    let in_bytes = std::fs::read(&input).unwrap();
    let out_bytes = std::fs::read(&result).unwrap();
    assert_eq!(&out_bytes[..11], &in_bytes[..11], "same P6 header");
    assert!(dir.path().join("dehazed_refl.ppm").exists());

    // eval prints one machine-greppable line and is bit-stable
    let eval = |out_csv: &Path| {
        let out = hylog(&[
            "eval",
            "--checkpoint",
            run.join("final.bin").to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--split",
            "test",
            "--csv",
            out_csv.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "{:?}", out);
        String::from_utf8(out.stdout).unwrap()
    };
    let csv1 = dir.path().join("eval1.csv");
    let csv2 = dir.path().join("eval2.csv");
    let line1 = eval(&csv1);
    let line2 = eval(&csv2);
    assert!(line1.starts_with("mean_psnr="), "{line1}");
    assert_eq!(line1, line2);
    assert_eq!(
        std::fs::read(&csv1).unwrap(),
        std::fs::read(&csv2).unwrap()
    );
}

#[test]
fn bench_attn_writes_the_csv_contract() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let out = hylog(&[
        "bench-attn",
        "--sizes",
        "16x16x4",
        "--csv",
        csv.to_str().unwrap(),
        "--variants",
        "hybrid,standard",
        "--runs",
        "3",
        "--heads",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(0), "{:?}", out);
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("variant,H,W,C,macs,ns_median,runs"));
    assert_eq!(text.lines().count(), 3);
    assert!(text.contains("\nvit,16,16,4,"));
}
