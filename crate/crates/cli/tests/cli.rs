use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ssmil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssmil")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ssmil(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    ssmil(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SPEC: &str = "height = 4\nwidth = 4\ndim = 6\n";
const CONFIG: &str = "# tiny\nd_model = 8\nstate_dim = 4\nn_blocks = 1\nattn_dim = 4\nepochs = 2\nlocal_channels = 2\n";

/// Dataset and tiny config in a fresh directory.
fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("spec.txt"), SPEC).unwrap();
    fs::write(dir.path().join("model.cfg"), CONFIG).unwrap();
    let p = dir.path();
    ok(&["generate", "--spec", s(&p.join("spec.txt")), "--out", s(&p.join("data")), "--seed", "3", "--n", "6"]);
    dir
}

#[test]
fn generate_is_deterministic() {
    let d = setup();
    let p = d.path();
    ok(&["generate", "--spec", s(&p.join("spec.txt")), "--out", s(&p.join("again")), "--seed", "3", "--n", "6"]);
    let manifest = fs::read_to_string(p.join("data/manifest.json")).unwrap();
    assert_eq!(manifest, fs::read_to_string(p.join("again/manifest.json")).unwrap());
    assert_eq!(fs::read_dir(p.join("data")).unwrap().count(), 13);
    for e in fs::read_dir(p.join("data")).unwrap() {
        let name = e.unwrap().file_name();
        assert_eq!(fs::read(p.join("data").join(&name)).unwrap(), fs::read(p.join("again").join(&name)).unwrap());
    }
}

#[test]
fn train_then_eval_reproduces_metrics() {
    let d = setup();
    let p = d.path();
    let (data, cfg) = (p.join("data"), p.join("model.cfg"));
    let train_args = |ckpt: &str, report: &str, hist: &str| {
        ok(&[
            "train", "--data", s(&data), "--config", s(&cfg), "--out", s(&p.join(ckpt)), "--seed", "5",
            "--report", s(&p.join(report)), "--history", s(&p.join(hist)),
        ])
    };
    let stdout = train_args("a.ckpt", "train.csv", "hist.csv");
    assert!(stdout.contains("metric,value\nauc,"));
    ok(&["eval", "--data", s(&data), "--ckpt", s(&p.join("a.ckpt")), "--split", "test", "--report", s(&p.join("eval.csv"))]);
    let in_run = fs::read_to_string(p.join("train.csv")).unwrap();
    assert_eq!(in_run, fs::read_to_string(p.join("eval.csv")).unwrap());
    assert!(in_run.contains("seed,5\n"));

    train_args("b.ckpt", "train_b.csv", "hist_b.csv");
    assert_eq!(fs::read(p.join("a.ckpt")).unwrap(), fs::read(p.join("b.ckpt")).unwrap());
    let hist = fs::read_to_string(p.join("hist.csv")).unwrap();
    assert_eq!(hist, fs::read_to_string(p.join("hist_b.csv")).unwrap());
    assert!(hist.starts_with("epoch,mean_loss,train_acc\n1,"));
    assert_eq!(hist.lines().count(), 3);
}

#[test]
fn analyses_write_stable_csv() {
    let d = setup();
    let p = d.path();
    let (data, ckpt) = (p.join("data"), p.join("m.ckpt"));
    ok(&["train", "--data", s(&data), "--config", s(&p.join("model.cfg")), "--out", s(&ckpt)]);
    for (cts, name) in [("on", "on.csv"), ("off", "off.csv"), ("off", "off2.csv")] {
        ok(&["analyze-decay", "--ckpt", s(&ckpt), "--data", s(&data), "--cts", cts, "--out", s(&p.join(name))]);
    }
    let off = fs::read_to_string(p.join("off.csv")).unwrap();
    assert_eq!(off, fs::read_to_string(p.join("off2.csv")).unwrap());
    assert!(off.starts_with("distance,min,mean,max\n0,1,1,1\n"));
    assert!(fs::read_to_string(p.join("on.csv")).unwrap().starts_with("distance,min,mean,max\n"));

    ok(&["analyze-locality", "--ckpt", s(&ckpt), "--data", s(&data), "--k", "0,2,8", "--out", s(&p.join("loc.csv"))]);
    let loc = fs::read_to_string(p.join("loc.csv")).unwrap();
    assert!(loc.starts_with("block,channel,alpha,rank,top_0,top_2,top_8\n"));
    assert_eq!(loc.lines().count(), 9);

    ok(&["analyze-anchor", "--data", s(&data), "--bag", "bag-1-00000", "--out", s(&p.join("anchor.csv"))]);
    let anchor = fs::read_to_string(p.join("anchor.csv")).unwrap();
    assert!(anchor.starts_with("token,row,col,distance,score\n"));
}

#[test]
fn ablate_writes_one_row_per_value() {
    let d = setup();
    let p = d.path();
    ok(&[
        "ablate", "--data", s(&p.join("data")), "--config", s(&p.join("model.cfg")), "--grid", "r=0,0.3",
        "--report", s(&p.join("grid.csv")),
    ]);
    let csv = fs::read_to_string(p.join("grid.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "cts_ratio,auc,acc,macro_f1");
    assert!(lines[1].starts_with("0,") && lines[2].starts_with("0.3,"));
    assert_eq!(lines.len(), 3);
}

#[test]
fn exit_codes() {
    let d = setup();
    let p = d.path();
    let data = p.join("data");
    assert_eq!(code(&["train", "--data", s(&p.join("missing")), "--out", s(&p.join("x.ckpt"))]), 2);
    fs::write(p.join("bad.cfg"), "dropout = 0.1\n").unwrap();
    assert_eq!(code(&["train", "--data", s(&data), "--config", s(&p.join("bad.cfg")), "--out", s(&p.join("x.ckpt"))]), 2);
    fs::write(p.join("junk.ckpt"), b"SSMPjunk").unwrap();
    assert_eq!(code(&["eval", "--data", s(&data), "--ckpt", s(&p.join("junk.ckpt")), "--report", s(&p.join("r.csv"))]), 2);
    assert_eq!(code(&["analyze-anchor", "--data", s(&data), "--bag", "nope", "--out", s(&p.join("a.csv"))]), 1);
    assert_eq!(code(&["analyze-anchor", "--data", s(&data), "--bag", "bag-0-00000", "--out", s(&p.join("a.csv"))]), 1);
    assert_eq!(
        code(&["analyze-anchor", "--data", s(&data), "--bag", "bag-0-00000", "--anchor", "9999", "--out", s(&p.join("a.csv"))]),
        1
    );
    assert_eq!(code(&["generate", "--out", s(&p.join("g")), "--n", "0"]), 1);
    fs::write(p.join("quiet.txt"), "noise = 0\n").unwrap();
    assert_eq!(code(&["generate", "--spec", s(&p.join("quiet.txt")), "--out", s(&p.join("g")), "--n", "1"]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
}
