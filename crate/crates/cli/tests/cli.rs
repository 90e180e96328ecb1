use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn ssr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssr")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_writes_splits_and_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let o = ssr(&["synth", "--out", s(d.path()), "--seed", "3"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["train.txt", "val.txt", "test.txt", "corpus.txt", "test.meta.csv"] {
        let (x, y) = (std::fs::read(a.path().join("data").join(f)).unwrap(), std::fs::read(b.path().join("data").join(f)).unwrap());
        assert!(!x.is_empty());
        assert_eq!(x, y, "{f}");
    }
    // Refuses to overwrite without --force.
    assert_eq!(code(&ssr(&["synth", "--out", s(a.path())])), 2);
    assert_eq!(code(&ssr(&["synth", "--out", s(a.path()), "--force"])), 0);
}

#[test]
fn config_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    let missing = d.path().join("nope.spec");
    let o = ssr(&["synth", "--spec", s(&missing), "--out", s(d.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nope.spec"));

    let cfg = d.path().join("bad.cfg");
    std::fs::write(&cfg, "d_model = 32\nwidth = 9\n").unwrap();
    let o = ssr(&["--config", s(&cfg), "--run", s(d.path()), "train-encoder"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("width"));
}

#[test]
fn missing_upstream_artifacts_exit_3() {
    let d = tempfile::tempdir().unwrap();
    let o = ssr(&["--run", s(d.path()), "train-ssr"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("vectors_train.bin"));
    let o = ssr(&["--run", s(d.path()), "encode-corpus"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("encoder.ckpt"));
    let o = ssr(&["--run", s(d.path()), "generate", "--mode", "baseline"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn malformed_arguments_exit_4() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&ssr(&["--run", s(d.path()), "sweep-k", "--grid", "1,five"])), 4);
    assert_eq!(code(&ssr(&["--run", s(d.path()), "sweep-k", "--grid", ""])), 4);
    assert_eq!(code(&ssr(&["--run", s(d.path()), "generate", "--mode", "sideways"])), 4);
    assert_eq!(code(&ssr(&["--run", s(d.path()), "train-ssr", "--mode", "sideways"])), 4);
    assert_eq!(code(&ssr(&["no-such-command"])), 4);
    assert_eq!(code(&ssr(&["generate", "--k", "many"])), 4);
    assert_eq!(code(&ssr(&["--help"])), 0);
}

fn line_count(p: &Path) -> usize {
    std::fs::read_to_string(p).unwrap().lines().count()
}

/// Every stage on the default 64-story corpus with the default config.
#[test]
fn full_pipeline_on_default_corpus() {
    let start = Instant::now();
    let d = tempfile::tempdir().unwrap();
    let run = d.path();
    let r = s(run);
    let ok = |args: &[&str]| {
        let mut full = vec!["--run", r];
        full.extend_from_slice(args);
        let o = ssr(&full);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
        String::from_utf8_lossy(&o.stdout).into_owned()
    };
    ok(&["synth"]);
    ok(&["train-encoder"]);
    ok(&["encode-corpus"]);
    ok(&["train-ssr", "--mode", "ar"]);
    ok(&["train-ssr", "--mode", "nonar"]);
    ok(&["train-decoder", "--variant", "vanilla"]);
    ok(&["train-decoder", "--variant", "mixed"]);
    ok(&["train-baseline"]);
    for f in ["encoder.ckpt", "vectors_train.bin", "ssr_ar.ckpt", "ssr_nonar.ckpt", "decoder_mixed.ckpt", "baseline.ckpt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert!(run.join("config/train-encoder.txt").exists());
    assert!(line_count(&run.join("logs/encoder_loss.csv")) > 0);

    let tests = line_count(&run.join("data/test.txt"));
    ok(&["generate", "--mode", "ssr-mixed", "--k", "1", "--seed", "2"]);
    let gen = run.join("generations/ssr-mixed_k1_s2.txt");
    let first = std::fs::read(&gen).unwrap();
    assert_eq!(line_count(&gen), tests);
    ok(&["--force", "generate", "--mode", "ssr-mixed", "--k", "1", "--seed", "2"]);
    assert_eq!(std::fs::read(&gen).unwrap(), first);

    let eval = ok(&["evaluate", "--mode", "ssr-mixed", "--k", "1", "--seed", "2"]);
    for col in ["B-1", "B-4", "D-1", "D-4"] {
        assert!(eval.contains(col), "{eval}");
    }
    assert_eq!(ok(&["--force", "evaluate", "--mode", "ssr-mixed", "--k", "1", "--seed", "2"]), eval);

    for m in ["ssr-ar", "ssr-nonar", "ppl"] {
        let out = ok(&["select-ending", "--method", m]);
        assert!(out.contains("accuracy"), "{out}");
    }
    ok(&["sweep-k", "--grid", "1,5,10,20,50"]);
    let csv = std::fs::read_to_string(run.join("metrics/sweep_k.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("generator,k,bleu1,bleu2,distinct1,distinct2"));
    assert_eq!(csv.lines().count(), 1 + 10);
    assert!(start.elapsed().as_secs() < 600, "pipeline took {:?}", start.elapsed());
}
