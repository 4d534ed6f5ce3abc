use std::path::Path;
use std::process::{Command, Output};

fn stp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = stp(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = "\
# tiny end-to-end run
variant = stlstm
layers = 1
channels = 4
T = 3
K = 2
batch = 2
iters = 4
height = 16
width = 16
sprite-size = 5
speed-min = 1
speed-max = 2
eval-interval = 2
eval-size = 2
num-sequences = 3
";

#[test]
fn end_to_end_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let data = d.join("data.stpd");
    let run = d.join("run");

    let out = ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    assert!(out.contains("3 sequences of 5 frames"), "{out}");

    // the flag overrides the file's iteration count
    ok(&["train", "--config", s(&cfg), "--iters", "3", "--out", s(&run)]);
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.starts_with("k,epsilon,eta,recon,decouple,total,grad_norm"));
    assert!(run.join("eval_2.csv").exists() && run.join("ckpt_2.stpc").exists());
    let ckpt = run.join("latest.stpc");

    let csv = d.join("m.csv");
    let out = ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--csv", s(&csv)]);
    assert!(out.starts_with("mse="), "{out}");
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("t,mse,psnr,ssim,csi@0.25"));
    assert_eq!(text.lines().count(), 3);
    ok(&["eval", "--ckpt", s(&ckpt), "--synthetic", "--count", "3", "--K", "4", "--csv", s(&csv)]);
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 5);

    let frames = d.join("frames");
    ok(&["generate", "--ckpt", s(&ckpt), "--context", s(&data), "--T", "3", "--horizon", "2", "--out", s(&frames)]);
    assert!(frames.join("pred_001.pgm").exists() && frames.join("pred_002.pgm").exists());

    for (probe, head) in [("gradients", "position,norm"), ("saturation", "gate,fraction_below"), ("cosine", "metric,value")] {
        let out = d.join(format!("{probe}.csv"));
        ok(&["diag", "--ckpt", s(&ckpt), "--probe", probe, "--csv", s(&out), "--count", "2"]);
        let text = std::fs::read_to_string(&out).unwrap();
        assert!(text.starts_with(head), "{probe}: {text}");
    }
    let acc = d.join("acc.csv");
    ok(&["diag", "--ckpt", s(&ckpt), "--probe", "gradients", "--mode", "accumulated", "--csv", s(&acc)]);
    assert_eq!(std::fs::read_to_string(&acc).unwrap().lines().count(), 3);

    // resuming after two iterations runs the last one again and appends it
    ok(&["train", "--resume", s(&run.join("ckpt_2.stpc"))]);
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[3], lines[4]);
}

fn assert_one_line_error(out: &Output, kind: &str) {
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with(&format!("error kind={kind} message=\"")), "{err}");
}

#[test]
fn failures_exit_nonzero_with_one_parseable_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = d.join("nope.stpc");
    let csv = d.join("x.csv");
    assert_one_line_error(&stp(&["eval", "--ckpt", s(&missing), "--synthetic", "--csv", s(&csv)]), "io");

    let bogus = d.join("bogus.stpc");
    std::fs::write(&bogus, b"XXXX\x01\x00\x00\x00").unwrap();
    assert_one_line_error(&stp(&["eval", "--ckpt", s(&bogus), "--synthetic", "--csv", s(&csv)]), "format");

    assert_one_line_error(&stp(&["train", "--iters", "0"]), "config");
    assert_one_line_error(&stp(&["train", "--variant", "transformer"]), "config");

    let cfg = d.join("bad.cfg");
    std::fs::write(&cfg, "layers = 2\nwhat = 3\n").unwrap();
    assert_one_line_error(&stp(&["gen-data", "--config", s(&cfg), "--out", s(&d.join("o"))]), "config");

    // argument errors come from the parser
    assert!(!stp(&["eval", "--ckpt", "x"]).status.success());
}
