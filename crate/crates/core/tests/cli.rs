//! Drives the `cdface` binary through the whole pipeline on a tiny corpus.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cdface::trainer::TrainConfig;

fn cdface(data_root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdface"))
        .env("CDFACE_DATA_ROOT", data_root)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(data_root: &Path, args: &[&str]) {
    let out = cdface(data_root, args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn sample_dirs(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("sample_"))
        .collect();
    names.sort();
    names
}

#[test]
fn pipeline_runs_end_to_end_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("data");
    let p = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();

    let mut cfg = TrainConfig::toy();
    cfg.prior.epochs = 2;
    cfg.query.epochs = 1;
    fs::write(p("tiny.toml"), cfg.to_toml()).unwrap();

    ok(&root, &["gen-corpus", "--sentences", "5", "--frames", "12"]);
    assert!(root.join("corpus/manifest.json").is_file());

    ok(&root, &["train-prior", "--config", &p("tiny.toml"), "--out", &p("prior")]);
    ok(&root, &["train-query", "--config", &p("tiny.toml"), "--prior", &p("prior"), "--out", &p("query")]);

    let clips: Vec<String> = {
        let mut v: Vec<String> = fs::read_dir(root.join("corpus/clips"))
            .unwrap()
            .map(|e| e.unwrap().path().to_string_lossy().into_owned())
            .collect();
        v.sort();
        v
    };
    let clip = clips.last().unwrap();

    ok(&root, &["synthesize", "--checkpoint", &p("query"), "--audio", clip, "--nl", "2", "--nu", "2", "--out", &p("synth")]);
    assert_eq!(sample_dirs(&tmp.path().join("synth")), ["sample_0_0", "sample_0_1", "sample_1_0", "sample_1_1"]);

    ok(&root, &["synthesize", "--checkpoint", &p("query"), "--audio", clip, "--out", &p("one")]);
    assert_eq!(sample_dirs(&tmp.path().join("one")), ["sample_0_0"]);

    let fixed = tmp.path().join("synth/sample_1_0").to_string_lossy().into_owned();
    ok(&root, &["control", "--checkpoint", &p("query"), "--audio", clip, "--fix-lip-from", &fixed, "--out", &p("control")]);
    ok(&root, &["control", "--checkpoint", &p("query"), "--audio", clip, "--fix-lip-from", "0", "--out", &p("control0")]);

    ok(&root, &["evaluate", "--checkpoint", &p("query"), "--split", "test", "--threads", "2", "--out", &p("eval")]);
    for f in ["report.json", "report.tsv", "clips.tsv", "apertures.tsv"] {
        assert!(tmp.path().join("eval").join(f).is_file(), "missing {f}");
    }

    let eval_run = format!("eval={}", p("eval"));
    let log_run = format!("log={}", p("query"));
    ok(&root, &["report", "--run", &eval_run, "--run", &log_run, "--out", &p("report")]);
    let metrics = fs::read_to_string(tmp.path().join("report/metrics.tsv")).unwrap();
    assert!(metrics.starts_with("metric\tunit\teval"));
    let losses = fs::read_to_string(tmp.path().join("report/loss_curves.tsv")).unwrap();
    assert!(losses.lines().count() > 1);

    // A sample count above the trained one is a contract violation.
    let out = cdface(&root, &["synthesize", "--checkpoint", &p("query"), "--audio", clip, "--nl", "5", "--out", &p("bad")]);
    assert_eq!(out.status.code(), Some(1));

    // A prior-only checkpoint cannot be evaluated.
    let out = cdface(&root, &["evaluate", "--checkpoint", &p("prior"), "--out", &p("bad_eval")]);
    assert_eq!(out.status.code(), Some(2));

    let out = cdface(&root, &["synthesize", "--nl", "two"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cdface(tmp.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["gen-corpus", "train-prior", "train-query", "synthesize", "control", "evaluate", "report"] {
        assert!(text.contains(cmd), "help lacks {cmd}");
    }
}
