use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_istseg");

/// Small enough that a full pipeline finishes in seconds.
const TINY_CONFIG: &str = "\
synth.width = 24
synth.height = 24
synth.num_unlabeled = 2
synth.num_test = 2
pipeline.iterations = 2
reg.steps_per_level = 20
reg.levels = 2
seg.steps = 30
seg.copies_per_unlabeled = 2
";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.cfg"), TINY_CONFIG).unwrap();
    ok(dir.path(), &["--config", "tiny.cfg", "--seed", "4", "synth", "--out-dir", "data"]);
    dir
}

#[test]
fn subcommands_chain_end_to_end() {
    let dir = setup();
    let d = dir.path();
    assert!(d.join("data/manifest.json").exists());
    let c = ["--config", "tiny.cfg"];
    let with = |rest: &[&str]| -> Vec<String> { c.iter().chain(rest).map(|s| s.to_string()).collect() };
    let call = |rest: &[&str]| {
        let args = with(rest);
        ok(d, &args.iter().map(String::as_str).collect::<Vec<_>>())
    };
    call(&[
        "register",
        "--atlas",
        "data/atlas_image.fvol",
        "--target",
        "data/unlabeled_000_image.fvol",
        "--out-disp",
        "disp.fvol",
        "--out-trace",
        "trace.csv",
        "--out-warped",
        "warped.fvol",
    ]);
    call(&[
        "ist",
        "--warped",
        "warped.fvol",
        "--target",
        "data/unlabeled_000_image.fvol",
        "--out",
        "ist.fvol",
    ]);
    call(&["features", "--in", "ist.fvol", "--out", "features.fvol"]);
    call(&["seg-train", "--pairs", "data/atlas_pairs.json", "--out", "m.segm"]);
    call(&["seg-predict", "--model", "m.segm", "--in", "data/test_000_image.fvol", "--out", "p.fvol"]);
    call(&[
        "seg-predict",
        "--model",
        "m.segm",
        "--in",
        "data/test_000_image.fvol",
        "--out",
        "l.fvol",
        "--argmax",
    ]);
    let eval = call(&["eval", "--pred", "p.fvol", "--truth", "data/test_000_labels.fvol"]);
    let text = String::from_utf8(eval.stdout).unwrap();
    assert!(text.starts_with("class,dice\n") && text.contains("\nmean,"), "{text}");
    let trace = std::fs::read_to_string(d.join("trace.csv")).unwrap();
    assert!(trace.starts_with("step,level,loss\n"));
    for f in ["disp.fvol", "warped.fvol", "ist.fvol", "features.fvol", "m.segm", "p.fvol", "l.fvol"] {
        assert!(d.join(f).exists(), "{f}");
    }
}

#[test]
fn pipeline_output_is_identical_across_thread_counts() {
    let dir = setup();
    let d = dir.path();
    for threads in ["1", "3"] {
        ok(
            d,
            &[
                "--config",
                "tiny.cfg",
                "--threads",
                threads,
                "pipeline",
                "--manifest",
                "data/manifest.json",
                "--out-dir",
                &format!("run{threads}"),
            ],
        );
    }
    for f in ["round_0_report.csv", "round_1_report.csv", "model.segm"] {
        let a = std::fs::read(d.join("run1").join(f)).unwrap();
        let b = std::fs::read(d.join("run3").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
    assert!(d.join("run1/test_000_prediction.png").exists());
    assert!(d.join("run1/unlabeled_001_pseudo.png").exists());
}

#[test]
fn failures_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = run(d, &["features", "--in", "nope.fvol", "--out", "x.fvol"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.fvol"));

    std::fs::write(d.join("bad.cfg"), "reg.lambda_smooth = 1\nnot.a.key = 3\n").unwrap();
    let bad = run(d, &["--config", "bad.cfg", "--print-config", "synth", "--out-dir", "x"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("line 2"));

    std::fs::write(d.join("short.fvol"), b"FVOL1 4 4 1 f32 1\n\0\0\0\0").unwrap();
    let short = run(d, &["features", "--in", "short.fvol", "--out", "x.fvol"]);
    assert!(!short.status.success());

    assert!(!run(d, &["no-such-command"]).status.success());
}

#[test]
fn print_config_reflects_overrides() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.cfg"), "seg.steps = 12\n").unwrap();
    let out = ok(
        dir.path(),
        &["--config", "c.cfg", "--seed", "9", "--print-config", "synth", "--out-dir", "unused"],
    );
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("seg.steps = 12"), "{text}");
    assert!(text.contains("pipeline.seed = 9"), "{text}");
    assert!(!dir.path().join("unused").exists());
}
