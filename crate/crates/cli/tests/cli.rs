use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use diffgda::checkpoint::Checkpoint;
use diffgda::graph::load_graph;
use diffgda::pipeline::{GuidanceStage, ScoreStage, TargetGnn};
use diffgda_cli::config::{parse_config, RunConfig};

fn diffgda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffgda"))
        .args(args)
        .env_remove("DIFFGDA_THREADS")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small enough that every stage finishes in about a second.
const QUICK: &[&str] = &[
    "--set", "synth.n=30",
    "--set", "epochs=10",
    "--set", "rounds=2",
    "--set", "score_epochs=10",
    "--set", "classifier_epochs=10",
    "--set", "guidance_epochs=5",
    "--set", "s_mc=2",
    "--set", "t_steps=5",
];

fn quick(cmd: &str, out: &Path) -> Output {
    let mut args = vec![cmd, "--seed", "3", "--out", out.to_str().unwrap()];
    args.extend_from_slice(QUICK);
    diffgda(&args)
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn empty_file_gives_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "empty.cfg", "");
    let cfg = parse_config(Some(&p), &[]).unwrap();
    assert_eq!(cfg, RunConfig::default());
    let t = cfg.train;
    assert_eq!((t.alpha, t.eta, t.t_steps, t.lr), (0.5, 0.1, 50, 1e-3));
    assert_eq!((t.hidden, t.dropout, t.epochs, t.rounds, t.s_mc), (64, 0.2, 150, 5, 16));
    assert_eq!((t.sigma_min, t.sigma_max), (0.001, 0.01));
}

#[test]
fn flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "a.cfg", "# comment\nalpha = 0.2  # trailing\n\nrounds=3\n");
    let cfg = parse_config(Some(&p), &[]).unwrap();
    assert_eq!((cfg.train.alpha, cfg.train.rounds), (0.2, 3));
    let cfg = parse_config(Some(&p), &[("alpha".into(), "0.8".into())]).unwrap();
    assert_eq!((cfg.train.alpha, cfg.train.rounds), (0.8, 3));
}

#[test]
fn out_of_range_values_name_key_and_range() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "bad.cfg", "alpha = 0.3\neta = 0.6\n");
    let err = format!("{:#}", parse_config(Some(&p), &[]).unwrap_err());
    assert!(err.contains("eta") && err.contains("[0, 0.5]") && err.contains("bad.cfg:2"), "{err}");

    let p = write(dir.path(), "unknown.cfg", "colour = red\n");
    let err = format!("{:#}", parse_config(Some(&p), &[]).unwrap_err());
    assert!(err.contains("colour"), "{err}");

    for (k, v) in [("lr", "0.5"), ("t_steps", "151"), ("alpha", "1.5"), ("dropout", "1")] {
        let err = format!("{:#}", parse_config(None, &[(k.into(), v.into())]).unwrap_err());
        assert!(err.contains(k), "{err}");
    }
    let err = format!("{:#}", parse_config(None, &[("sigma_min".into(), "0.5".into())]).unwrap_err());
    assert!(err.contains("sigma"), "{err}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = diffgda(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));

    assert_eq!(diffgda(&["--help"]).status.code(), Some(0));

    let o = diffgda(&["run", "--set", "eta=0.6", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("[0, 0.5]"));

    let o = diffgda(&["run", "--set", "eta"]);
    assert_eq!(o.status.code(), Some(1));

    let missing = dir.path().join("nope.graph");
    let o = diffgda(&["run", "--source", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error: run:"), "{}", stderr(&o));

    let o = Command::new(env!("CARGO_BIN_EXE_diffgda"))
        .args(["gen-synth", "--out", dir.path().to_str().unwrap()])
        .env("DIFFGDA_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gen_synth_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = diffgda(&["gen-synth", "--seed", "7", "--out", d.path().to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["source.graph", "target.graph"] {
        let x = fs::read(a.path().join(f)).unwrap();
        assert_eq!(x, fs::read(b.path().join(f)).unwrap());
        let g = load_graph(a.path().join(f)).unwrap();
        assert_eq!((g.n(), g.f(), g.c()), (300, 4, 2));
    }
    let c = tempfile::tempdir().unwrap();
    diffgda(&["gen-synth", "--seed", "8", "--out", c.path().to_str().unwrap()]);
    assert_ne!(fs::read(a.path().join("source.graph")).unwrap(), fs::read(c.path().join("source.graph")).unwrap());
}

#[test]
fn stage_commands_need_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    assert!(quick("gen-synth", dir.path()).status.success());
    for (cmd, what) in [
        ("train-guidance", "score.ckpt"),
        ("generate", "score.ckpt"),
        ("adapt", "generated.graph"),
        ("eval", "gnn.ckpt"),
    ] {
        let o = quick(cmd, dir.path());
        assert_eq!(o.status.code(), Some(2), "{cmd}");
        let err = stderr(&o);
        assert!(err.starts_with(&format!("error: {cmd}:")) && err.contains(what), "{err}");
    }
}

#[test]
fn staged_artifacts_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for cmd in ["gen-synth", "train-score", "train-guidance", "generate", "adapt", "eval"] {
        let o = quick(cmd, d);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    let source = load_graph(d.join("source.graph")).unwrap();
    let target = load_graph(d.join("target.graph")).unwrap();
    let generated = load_graph(d.join("generated.graph")).unwrap();
    assert_eq!((generated.n(), generated.f(), generated.c()), (source.n(), source.f(), source.c()));
    assert!(generated.is_fully_labeled());

    let score = ScoreStage::from_checkpoint(&Checkpoint::load(d.join("score.ckpt")).unwrap()).unwrap();
    assert_eq!(score.frame.f(), source.f());
    GuidanceStage::from_checkpoint(&Checkpoint::load(d.join("guidance.ckpt")).unwrap()).unwrap();
    let gnn = TargetGnn::from_checkpoint(&Checkpoint::load(d.join("gnn.ckpt")).unwrap()).unwrap();
    assert_eq!((gnn.f(), gnn.c()), (target.f(), target.c()));

    let metrics = fs::read_to_string(d.join("metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2 * 10 + 1);
    assert_eq!(lines[0]["round"], 0);
    assert!(lines[0]["loss_mmd"].is_number());
    assert_eq!(lines.last().unwrap()["rounds"], 2);

    let emb = fs::read_to_string(d.join("embeddings.txt")).unwrap();
    assert_eq!(emb.lines().count(), target.n());
    assert!(emb.lines().all(|l| l.split(' ').count() == 64 && l.split(' ').all(|v| v.parse::<f64>().is_ok())));

    for f in ["score_loss.jsonl", "guidance_loss.jsonl"] {
        let text = fs::read_to_string(d.join(f)).unwrap();
        assert!(text.lines().count() > 0);
        for l in text.lines() {
            let _: serde_json::Value = serde_json::from_str(l).unwrap();
        }
    }
    let clf: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("classifier.json")).unwrap()).unwrap();
    assert!(clf["accuracy"].as_f64().unwrap() <= 1.0);
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["nodes"], target.n());
    assert!((0.0..=1.0).contains(&eval["micro_f1"].as_f64().unwrap()));
}

#[test]
fn run_writes_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    assert!(quick("gen-synth", dir.path()).status.success());
    let o = quick("run", dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let last: serde_json::Value = serde_json::from_str(metrics.lines().last().unwrap()).unwrap();
    assert_eq!(last["rounds"], 2);
    for k in ["mi_mean", "mi_std", "ma_mean", "ma_std"] {
        assert!(last[k].is_number(), "{k}");
    }
    for f in ["score.ckpt", "guidance.ckpt", "gnn.ckpt", "generated.graph", "embeddings.txt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}
