//! End-to-end command tests: exit codes, effective-config echo, and the
//! command-surface error messages.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_inbetween"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// synth + preprocess into a temp dir; returns (dir, dataset path).
fn prepared_dataset() -> (TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let clips = dir.path().join("clips");
    ok(
        &cli(&[
            "synth",
            "--out",
            clips.to_str().unwrap(),
            "--count",
            "4",
            "--frames",
            "1300",
            "--fps",
            "60",
            "--seed",
            "3",
        ]),
        "synth",
    );
    let dataset = dir.path().join("data/chunks.mstch");
    ok(
        &cli(&[
            "preprocess",
            "--src",
            clips.to_str().unwrap(),
            "--out",
            dataset.to_str().unwrap(),
            "--split-seed",
            "1",
        ]),
        "preprocess",
    );
    (dir, dataset)
}

fn train_tiny(dataset: &Path, out: &Path, epochs: &str) -> Output {
    cli(&[
        "train",
        "--dataset",
        dataset.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--batch",
        "4",
        "--timesteps",
        "10",
        "--epochs",
        epochs,
        "--seed",
        "5",
        "--lr",
        "1e-3",
        "--layers",
        "1",
        "--model-dim",
        "16",
        "--ff-dim",
        "32",
        "--heads",
        "4",
    ])
}

#[test]
fn usage_errors_exit_with_code_one() {
    // unknown flag: argument parsing failure
    let out = cli(&["preprocess", "--nonsense"]);
    assert_eq!(out.status.code(), Some(1));

    // semantic validation failure
    let out = cli(&["export-plot", "--input", "x.bvh", "--out", "y.svg", "--stride", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("usage error"));
}

#[test]
fn runtime_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("does-not-exist");
    let out = cli(&[
        "preprocess",
        "--src",
        missing.to_str().unwrap(),
        "--out",
        dir.path().join("out.mstch").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    // no partial outputs
    assert!(!dir.path().join("out.mstch").exists());
}

#[test]
fn preprocess_defaults_echoed_and_inputs_untouched() {
    let (dir, dataset) = prepared_dataset();
    // effective config records the defaults from the preprocessing pipeline
    let echoed =
        std::fs::read_to_string(dir.path().join("data/preprocess.effective.toml")).unwrap();
    assert!(echoed.contains("fps = 15"));
    assert!(echoed.contains("block = 75"));
    assert!(echoed.contains("augment = 2"));
    // manifest sits next to the dataset
    assert!(dataset.with_file_name("chunks.mstch.manifest.toml").exists());
    // source clips untouched by the run
    let clip = dir.path().join("clips/synthetic_000.bvh");
    let before = std::fs::read(&clip).unwrap();
    ok(
        &cli(&[
            "preprocess",
            "--src",
            dir.path().join("clips").to_str().unwrap(),
            "--out",
            dir.path().join("data2/chunks.mstch").to_str().unwrap(),
        ]),
        "second preprocess",
    );
    assert_eq!(before, std::fs::read(&clip).unwrap());
}

#[test]
fn config_file_provides_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let clips = dir.path().join("clips");
    ok(
        &cli(&["synth", "--out", clips.to_str().unwrap(), "--count", "4", "--frames", "1300", "--fps", "60"]),
        "synth",
    );
    let config = dir.path().join("run.toml");
    std::fs::write(&config, "[preprocess]\nfps = 15.0\nblock = 30\naugment = 1\n").unwrap();
    let dataset = dir.path().join("data/chunks.mstch");
    // --block on the command line beats the file's 30
    ok(
        &cli(&[
            "preprocess",
            "--src",
            clips.to_str().unwrap(),
            "--out",
            dataset.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--block",
            "75",
        ]),
        "preprocess with config",
    );
    let echoed =
        std::fs::read_to_string(dir.path().join("data/preprocess.effective.toml")).unwrap();
    assert!(echoed.contains("block = 75"), "flag must override the file");
    assert!(echoed.contains("augment = 1"), "file value must apply when no flag is given");
}

#[test]
fn train_epochs_zero_writes_initial_checkpoint_only() {
    let (dir, dataset) = prepared_dataset();
    let run = dir.path().join("run0");
    ok(&train_tiny(&dataset, &run, "0"), "train --epochs 0");
    assert!(run.join("checkpoint.msdnz").exists());
    assert!(!run.join("train.log.csv").exists(), "no training happened, no log");
    assert!(run.join("train.effective.toml").exists());
}

#[test]
fn generate_rejects_oversized_context_citing_the_bound() {
    let (dir, dataset) = prepared_dataset();
    let run = dir.path().join("run");
    ok(&train_tiny(&dataset, &run, "0"), "train");
    let out = cli(&[
        "generate",
        "--checkpoint",
        run.join("checkpoint.msdnz").to_str().unwrap(),
        "--context",
        dataset.to_str().unwrap(),
        "--context-len",
        "38",
        "--out",
        dir.path().join("gen.bvh").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let msg = stderr(&out);
    assert!(
        msg.contains("between 1 and 37") && msg.contains("half the block"),
        "message must cite the half-block bound: {msg}"
    );
}

#[test]
fn generate_produces_a_full_block_at_dataset_rate() {
    let (dir, dataset) = prepared_dataset();
    let run = dir.path().join("run");
    ok(&train_tiny(&dataset, &run, "0"), "train");
    let out_bvh = dir.path().join("gen.bvh");
    ok(
        &cli(&[
            "generate",
            "--checkpoint",
            run.join("checkpoint.msdnz").to_str().unwrap(),
            "--context",
            dataset.to_str().unwrap(),
            "--context-len",
            "20",
            "--seed",
            "9",
            "--out",
            out_bvh.to_str().unwrap(),
        ]),
        "generate |c|=20",
    );
    let text = std::fs::read_to_string(&out_bvh).unwrap();
    let (_, motion) = inbetween_core::data::parse_bvh(&text).unwrap();
    assert_eq!(motion.frame_count(), 75);
    assert!((motion.fps - 15.0).abs() < 1e-3, "fps {}", motion.fps);

    // the |c|=10 setting also runs, and the context echo sidecar exists
    ok(
        &cli(&[
            "generate",
            "--checkpoint",
            run.join("checkpoint.msdnz").to_str().unwrap(),
            "--context",
            dataset.to_str().unwrap(),
            "--context-len",
            "10",
            "--seed",
            "9",
            "--out",
            dir.path().join("gen10.bvh").to_str().unwrap(),
        ]),
        "generate |c|=10",
    );
    let meta = std::fs::read_to_string(dir.path().join("gen10.bvh.meta.toml")).unwrap();
    assert!(meta.contains("context_indices"));
    assert!(meta.contains("seed = 9"));
}

#[test]
fn generate_same_seed_identical_bytes() {
    let (dir, dataset) = prepared_dataset();
    let run = dir.path().join("run");
    ok(&train_tiny(&dataset, &run, "0"), "train");
    let gen = |name: &str| -> Vec<u8> {
        let path = dir.path().join(name);
        ok(
            &cli(&[
                "generate",
                "--checkpoint",
                run.join("checkpoint.msdnz").to_str().unwrap(),
                "--context",
                dataset.to_str().unwrap(),
                "--indices",
                "0,7,30,74",
                "--seed",
                "21",
                "--out",
                path.to_str().unwrap(),
            ]),
            "generate",
        );
        std::fs::read(path).unwrap()
    };
    assert_eq!(gen("a.bvh"), gen("b.bvh"));
}

#[test]
fn evaluate_without_extractor_names_the_training_subcommand() {
    let (dir, dataset) = prepared_dataset();
    let run = dir.path().join("run");
    ok(&train_tiny(&dataset, &run, "0"), "train");
    let out = cli(&[
        "evaluate",
        "--checkpoint",
        run.join("checkpoint.msdnz").to_str().unwrap(),
        "--dataset",
        dataset.to_str().unwrap(),
        "--extractor",
        dir.path().join("missing.msfex").to_str().unwrap(),
        "--out",
        dir.path().join("report.txt").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("train-extractor"), "{}", stderr(&out));
}

#[test]
fn evaluate_emits_table_rows_with_spreads() {
    let (dir, dataset) = prepared_dataset();
    let run = dir.path().join("run");
    ok(&train_tiny(&dataset, &run, "0"), "train");
    let extractor = dir.path().join("extractor.msfex");
    ok(
        &cli(&[
            "train-extractor",
            "--dataset",
            dataset.to_str().unwrap(),
            "--out",
            extractor.to_str().unwrap(),
            "--epochs",
            "5",
        ]),
        "train-extractor",
    );
    let report_path = dir.path().join("report.txt");
    ok(
        &cli(&[
            "evaluate",
            "--checkpoint",
            run.join("checkpoint.msdnz").to_str().unwrap(),
            "--dataset",
            dataset.to_str().unwrap(),
            "--split",
            "train",
            "--extractor",
            extractor.to_str().unwrap(),
            "--out",
            report_path.to_str().unwrap(),
            "--context-lens",
            "10,20",
            "--reps",
            "2",
            "--conditions",
            "2",
            "--pairs",
            "40",
            "--bootstrap",
            "3",
        ]),
        "evaluate",
    );
    let report = std::fs::read_to_string(&report_path).unwrap();
    assert!(report.contains("FID"));
    assert!(report.contains("+-"), "spread columns required: {report}");
    assert!(report.contains("|c|=10"));
    assert!(report.contains("|c|=20"));
    assert!(report.contains("Real"));
}

#[test]
fn export_plot_renders_downsampled_strip() {
    let (dir, dataset) = prepared_dataset();
    let run = dir.path().join("run");
    ok(&train_tiny(&dataset, &run, "0"), "train");
    let gen = dir.path().join("gen.bvh");
    ok(
        &cli(&[
            "generate",
            "--checkpoint",
            run.join("checkpoint.msdnz").to_str().unwrap(),
            "--context",
            dataset.to_str().unwrap(),
            "--indices",
            "0,10,20",
            "--out",
            gen.to_str().unwrap(),
        ]),
        "generate",
    );
    let svg_path = dir.path().join("strip.svg");
    let out = cli(&[
        "export-plot",
        "--input",
        gen.to_str().unwrap(),
        "--out",
        svg_path.to_str().unwrap(),
        "--stride",
        "5",
        "--context",
        "0,10,20",
    ]);
    ok(&out, "export-plot");
    assert!(String::from_utf8_lossy(&out.stdout).contains("rendered 15 frames"));
    let svg = std::fs::read_to_string(&svg_path).unwrap();
    // highlighted context frames use the accent color
    assert!(svg.contains("#cc2222"));
    assert!(svg.contains("#333333"));
    // deterministic rendering
    let svg_again_path = dir.path().join("strip2.svg");
    ok(
        &cli(&[
            "export-plot",
            "--input",
            gen.to_str().unwrap(),
            "--out",
            svg_again_path.to_str().unwrap(),
            "--stride",
            "5",
            "--context",
            "0,10,20",
        ]),
        "export-plot again",
    );
    assert_eq!(svg, std::fs::read_to_string(&svg_again_path).unwrap());
}

#[test]
fn train_resume_matches_uninterrupted_run() {
    let (dir, dataset) = prepared_dataset();
    // uninterrupted: 2 epochs in one go
    let full = dir.path().join("full");
    ok(&train_tiny(&dataset, &full, "2"), "full train");
    // interrupted: 1 epoch, then resume for 1 more
    let part = dir.path().join("part");
    ok(&train_tiny(&dataset, &part, "1"), "first half");
    let out = cli(&[
        "train",
        "--dataset",
        dataset.to_str().unwrap(),
        "--out",
        part.to_str().unwrap(),
        "--batch",
        "4",
        "--timesteps",
        "10",
        "--epochs",
        "1",
        "--lr",
        "1e-3",
        "--resume",
        part.join("checkpoint.msdnz").to_str().unwrap(),
    ]);
    ok(&out, "resume");
    let full_log = std::fs::read_to_string(full.join("train.log.csv")).unwrap();
    let part_log = std::fs::read_to_string(part.join("train.log.csv")).unwrap();
    assert_eq!(full_log, part_log, "resumed loss trajectory must match");
    assert_eq!(
        std::fs::read(full.join("checkpoint.msdnz")).unwrap(),
        std::fs::read(part.join("checkpoint.msdnz")).unwrap(),
        "resumed final checkpoint must match"
    );
}
