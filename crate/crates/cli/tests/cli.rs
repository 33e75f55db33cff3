use std::path::Path;
use std::process::{Command, Output};

use simreg::trainer::TrainingHistory;

const SMALL: &[&str] = &[
    "--set",
    "synth.n_per_class=30",
    "--image-size",
    "16",
    "--backbone",
    "tiny",
    "--batch-size",
    "16",
    "--epochs",
    "6",
    "--seeds",
    "1",
];

fn simreg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simreg"))
        .current_dir(dir)
        .env("SIMREG_OUT", dir.join("root"))
        .arg("-q")
        .args(args)
        .output()
        .expect("binary runs")
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().chain(SMALL).copied().collect()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn column(rows: &[Vec<String>], name: &str) -> Vec<String> {
    let i = rows[0]
        .iter()
        .position(|c| c == name)
        .unwrap_or_else(|| panic!("no column {name}"));
    rows[1..].iter().map(|r| r[i].clone()).collect()
}

#[test]
fn sr_at_level_zero_is_rejected_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = simreg(
        dir.path(),
        &with_small(&["train", "--mode", "sr", "--aug-level", "0", "--out", "run"]),
    );
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stderr(&out).contains("level 0"));
    assert!(!dir.path().join("run").exists());
    assert!(!dir.path().join("root").exists());
}

#[test]
fn two_stage_without_pretrained_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = simreg(dir.path(), &with_small(&["two-stage"]));
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("--pretrained"));
    let missing = simreg(dir.path(), &with_small(&["linear-eval", "--pretrained", "nope.ckpt"]));
    assert_eq!(code(&missing), 1);
}

#[test]
fn bad_flags_exit_one_and_help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&simreg(dir.path(), &["train", "--no-such-flag"])), 1);
    assert_eq!(code(&simreg(dir.path(), &["frobnicate"])), 1);
    assert_eq!(
        code(&simreg(dir.path(), &with_small(&["train", "--set", "nonsense=1"]))),
        1
    );
    assert_eq!(code(&simreg(dir.path(), &["--help"])), 0);
}

#[test]
fn gamma_sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = simreg(
        dir.path(),
        &with_small(&[
            "train",
            "--mode",
            "sr",
            "--aug-level",
            "2",
            "--gamma-sweep",
            "0.1,0.5,0.9",
            "--out",
            "sweep",
        ]),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = csv_rows(&dir.path().join("sweep/summary.csv"));
    assert_eq!(rows.len(), 4);
    assert_eq!(column(&rows, "gamma"), ["0.1", "0.5", "0.9"]);
    assert_eq!(column(&rows, "trials"), ["1", "1", "1"]);
    assert!(dir.path().join("sweep/gamma-0.5/seed-1/model.sri").is_file());
    assert_eq!(csv_rows(&dir.path().join("sweep/trials.csv")).len(), 4);
}

#[test]
fn projection_size_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let out = simreg(
        dir.path(),
        &with_small(&[
            "train",
            "--mode",
            "sr",
            "--aug-level",
            "1",
            "--projection-size",
            "24",
            "--out",
            "p",
        ]),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = csv_rows(&dir.path().join("p/summary.csv"));
    assert_eq!(column(&rows, "projection_size"), ["24"]);
    let snapshot = std::fs::read_to_string(dir.path().join("p/seed-1/config.txt")).unwrap();
    assert!(snapshot.lines().any(|l| l == "projection_size=24"));
}

#[test]
fn seeds_are_averaged_and_output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let args: Vec<&str> = with_small(&["train", "--mode", "baseline", "--aug-level", "0"])
        .into_iter()
        .filter(|a| *a != "--seeds" && *a != "1")
        .chain(["--seeds", "1,2"])
        .collect();
    let out = simreg(dir.path(), &args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let run = dir.path().join("root/baseline");
    let trials = csv_rows(&run.join("trials.csv"));
    let accs: Vec<f64> = column(&trials, "accuracy").iter().map(|a| a.parse().unwrap()).collect();
    let summary = csv_rows(&run.join("summary.csv"));
    let mean: f64 = column(&summary, "accuracy")[0].parse().unwrap();
    assert!((mean - (accs[0] + accs[1]) / 2.0).abs() <= 0.01);
    let report = std::fs::read_to_string(run.join("report.txt")).unwrap();
    for c in 0..3 {
        assert!(report.contains(&format!("sensitivity.class{c}=")));
    }
    // A second run gets a fresh directory.
    assert_eq!(code(&simreg(dir.path(), &args)), 0);
    assert!(dir.path().join("root/baseline-2/summary.csv").is_file());
}

#[test]
fn config_snapshot_replays_identically() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("base.cfg"), "mode=sr\naug.level=2\nepochs=20\n").unwrap();
    let first = simreg(
        dir.path(),
        &with_small(&["train", "--config", "base.cfg", "--out", "a"]),
    );
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    let snapshot = std::fs::read_to_string(dir.path().join("a/seed-1/config.txt")).unwrap();
    assert!(snapshot.lines().any(|l| l == "epochs=6"), "flags override the file");
    let again = simreg(
        dir.path(),
        &["train", "--config", "a/seed-1/config.txt", "--seeds", "1", "--out", "b"],
    );
    assert_eq!(code(&again), 0, "{}", stderr(&again));
    let load = |p: &str| {
        TrainingHistory::parse_jsonl(&std::fs::read_to_string(dir.path().join(p)).unwrap())
            .unwrap()
            .without_timing()
    };
    assert_eq!(load("a/seed-1/history.jsonl"), load("b/seed-1/history.jsonl"));
}

#[test]
fn pretrain_then_linear_eval_and_two_stage() {
    let dir = tempfile::tempdir().unwrap();
    let pre = simreg(
        dir.path(),
        &with_small(&["pretrain", "--aug-level", "2", "--out", "pre"]),
    );
    assert_eq!(code(&pre), 0, "{}", stderr(&pre));
    let rows = csv_rows(&dir.path().join("pre/summary.csv"));
    let sr: f64 = column(&rows, "heldout_sr")[0].parse().unwrap();
    assert!((0.0..=4.0).contains(&sr));
    let ckpt = "pre/seed-1/final.ckpt";
    for cmd in ["linear-eval", "two-stage"] {
        let out = simreg(dir.path(), &with_small(&[cmd, "--pretrained", ckpt, "--out", cmd]));
        assert_eq!(code(&out), 0, "{cmd}: {}", stderr(&out));
        let rows = csv_rows(&dir.path().join(cmd).join("summary.csv"));
        assert_eq!(column(&rows, "mode"), [cmd.replace('-', "_")]);
    }
}

#[test]
fn exported_model_and_checkpoint_evaluate_identically() {
    let dir = tempfile::tempdir().unwrap();
    let out = simreg(
        dir.path(),
        &with_small(&["train", "--mode", "baseline", "--aug-level", "1", "--out", "r"]),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let exported = simreg(
        dir.path(),
        &["eval", "--model", "r/seed-1/model.sri", "--set", "synth.n_per_class=30"],
    );
    let full = simreg(dir.path(), &["eval", "--model", "r/seed-1/best.ckpt"]);
    assert_eq!(code(&exported), 0, "{}", stderr(&exported));
    assert_eq!(code(&full), 0, "{}", stderr(&full));
    assert_eq!(exported.stdout, full.stdout);
    let text = String::from_utf8(full.stdout).unwrap();
    assert!(text.contains("accuracy=") && text.contains("specificity.class2="));
}

#[test]
fn evaluating_an_empty_test_split_fails() {
    let dir = tempfile::tempdir().unwrap();
    let synth = simreg(
        dir.path(),
        &["synth", "--out", "data", "--n-per-class", "20", "--size", "16"],
    );
    assert_eq!(code(&synth), 0, "{}", stderr(&synth));
    let manifest = dir.path().join("data/manifest.csv");
    let text = std::fs::read_to_string(&manifest).unwrap();
    let kept: Vec<&str> = text.lines().filter(|l| !l.ends_with(",test")).collect();
    std::fs::write(dir.path().join("data/no_test.csv"), kept.join("\n") + "\n").unwrap();

    let train = simreg(
        dir.path(),
        &with_small(&[
            "train",
            "--mode",
            "baseline",
            "--aug-level",
            "0",
            "--dataset",
            "data/manifest.csv",
            "--out",
            "r",
        ]),
    );
    assert_eq!(code(&train), 0, "{}", stderr(&train));
    let out = simreg(
        dir.path(),
        &["eval", "--model", "r/seed-1/model.sri", "--dataset", "data/no_test.csv"],
    );
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("test split"), "{}", stderr(&out));
}

#[test]
fn augment_preview_writes_a_png_for_every_level() {
    let dir = tempfile::tempdir().unwrap();
    for level in ["0", "1", "4", "5", "6"] {
        let out = simreg(
            dir.path(),
            &[
                "augment-preview",
                "--level",
                level,
                "--size",
                "24",
                "--views",
                "3",
                "--out",
                "prev",
            ],
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let png = dir.path().join(format!("prev/augment_level{level}_seed0.png"));
        let img = simreg::image::Image::load(&png).unwrap();
        assert_eq!((img.height(), img.width()), (24, 4 * 24 + 3 * 2));
    }
    assert_eq!(code(&simreg(dir.path(), &["augment-preview", "--level", "7"])), 1);
}
