use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn stseq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stseq2seq")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = stseq(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

const SMALL: &str = "\
# tiny model so the whole pipeline runs in seconds
window = 6
horizon = 6
horizons = 1,3,6
hidden = 8
embed_dim = 8
epochs = 2
max_batches = 3
batch_size = 8
";

#[test]
fn gen_synth_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["gen-synth", "--regime", "twin-pattern", "--nodes", "5", "--steps", "300", "--seed", "3", "--out-dir", d.to_str().unwrap()]);
    }
    for f in ["series.csv", "adjacency.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let header = read(&a.join("series.csv")).lines().next().unwrap().to_string();
    assert_eq!(header, "timestamp,node_0,node_1,node_2,node_3,node_4");
    assert!(read(&a.join("adjacency.csv")).starts_with("from,to,distance"));
}

#[test]
fn full_pipeline_and_echo_reproduction() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["gen-synth", "--regime", "twin-pattern", "--nodes", "4", "--steps", "2600", "--seed", "1", "--out-dir", data.to_str().unwrap()]);
    let conf = dir.path().join("small.conf");
    fs::write(&conf, SMALL).unwrap();
    let series = data.join("series.csv");
    let adjacency = data.join("adjacency.csv");
    let common = |out: &Path| -> Vec<String> {
        [
            "--config", conf.to_str().unwrap(),
            "--series", series.to_str().unwrap(),
            "--adjacency", adjacency.to_str().unwrap(),
            "--out-dir", out.to_str().unwrap(),
            "--seed", "7",
        ]
        .map(String::from)
        .to_vec()
    };
    let with = |cmd: &[&str], out: &Path| -> String {
        let mut args: Vec<String> = cmd.iter().map(|s| s.to_string()).collect();
        args.extend(common(out));
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>())
    };

    with(&["train"], &run);
    assert!(run.join("model.ckpt").exists());
    assert_eq!(read(&run.join("history.csv")).lines().count(), 3);
    assert!(fs::read(run.join("model.ckpt")).unwrap().starts_with(b"STSQ"));

    let text = with(&["evaluate"], &run);
    assert!(text.contains("horizon"));
    let report = read(&run.join("report.csv"));
    let mut lines = report.lines();
    assert_eq!(lines.next(), Some("horizon,mae,rmse,mape,count"));
    assert_eq!(lines.map(|l| l.split(',').next().unwrap().to_string()).collect::<Vec<_>>(), ["1", "3", "6"]);
    assert!(run.join("report_ha.csv").exists());

    with(&["forecast"], &run);
    let forecast = read(&run.join("forecast.csv"));
    assert_eq!(forecast.lines().count(), 7);
    assert!(forecast.starts_with("timestamp,node_0"));

    let series_text = read(&series);
    let at = series_text.lines().nth(100).unwrap().split(',').next().unwrap();
    with(&["export-pam", "--at", at], &run);
    for f in ["adjacency.csv", "m_forward.csv", "m_backward.csv", "windows.csv", "pam_000.csv", "attention_000.csv"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    for line in read(&run.join("pam_000.csv")).lines() {
        let total: f64 = line.split(',').map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    // the echoed config alone reproduces the training run
    let echo = run.join("config.txt");
    let again = dir.path().join("again");
    ok(&["train", "--config", echo.to_str().unwrap(), "--out-dir", again.to_str().unwrap()]);
    assert_eq!(read(&run.join("history.csv")), read(&again.join("history.csv")));
    assert_eq!(fs::read(run.join("model.ckpt")).unwrap(), fs::read(again.join("model.ckpt")).unwrap());
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = stseq(&["train", "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = stseq(&["gen-synth", "--variant", "nonsense", "--out-dir", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn help_lists_subcommands_and_core_flags() {
    let help = ok(&["--help"]);
    for word in ["train", "evaluate", "forecast", "export-pam", "gen-synth", "--seed", "--out-dir", "--variant", "--horizons"] {
        assert!(help.contains(word), "help lacks {word}");
    }
}
