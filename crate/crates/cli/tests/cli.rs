use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 4

[model.backbone]
embed_dim = 16
heads = 2
mlp_hidden = 32
patch_size = 32
image_depth = 1
text_depth = 1

[model.pfm]
n_heads = 2
mlp_hidden = 16

[model.decoder]
n_blocks = 1
n_heads = 2
mlp_hidden = 16

[train]
epochs = 1
batch_size = 16
"#;

fn lreid(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lreid")).args(args).env("LREID_OUT", out).output().unwrap()
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn synth(out: &Path, domains: &str) {
    ok(&lreid(&["make-synth", "--domains", domains, "--identities", "6", "--images-per-identity", "4", "--cameras", "2"], out));
}

#[test]
fn help_lists_defaults_for_every_command() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["make-synth", "train", "eval", "curves", "dump-features"] {
        let text = ok(&lreid(&[cmd, "--help"], dir.path()));
        assert!(text.contains("[default:"), "{cmd} help lacks defaults:\n{text}");
    }
    let train = ok(&lreid(&["train", "--help"], dir.path()));
    for flag in ["--ablate", "--n-views", "--threshold", "--seed", "--epochs", "--config", "--out"] {
        assert!(train.contains(flag), "train help lacks {flag}");
    }
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(lreid(&["nonsense"], dir.path()).status.code(), Some(1));
    assert_eq!(lreid(&["train", "--ablate", "no-such"], dir.path()).status.code(), Some(1));
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nepochz = 3\n").unwrap();
    let o = lreid(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochz"));
}

#[test]
fn make_synth_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    synth(&a, "5");
    synth(&b, "5");
    let stream = fs::read_to_string(a.join("stream.txt")).unwrap();
    assert_eq!(stream.lines().filter(|l| l.starts_with("seen")).count(), 4);
    assert_eq!(stream.lines().filter(|l| l.starts_with("unseen")).count(), 1);
    for i in 0..5 {
        let d = format!("synth{i}");
        assert!(a.join(&d).is_dir());
        for f in ["all.tsv", "train.tsv", "query.tsv", "gallery.tsv"] {
            assert_eq!(fs::read(a.join(&d).join(f)).unwrap(), fs::read(b.join(&d).join(f)).unwrap());
        }
    }
    let blocked = dir.path().join("file");
    fs::write(&blocked, "x").unwrap();
    assert_eq!(lreid(&["make-synth", "--domains", "2"], &blocked).status.code(), Some(2));
}

#[test]
fn train_eval_curves_and_dump() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    synth(out, "3");
    let cfg = out.join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let cfg = cfg.to_str().unwrap();

    let stdout = ok(&lreid(&["train", "--config", cfg], out));
    let run = out.join("run");
    let ckpts: Vec<_> = fs::read_dir(&run).unwrap().filter_map(|e| e.ok()).filter(|e| e.path().extension().is_some_and(|x| x == "ckpt")).collect();
    assert_eq!(ckpts.len(), 2);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("checkpoint ")).count(), 2);
    assert_eq!(fs::read_to_string(run.join("train_log.jsonl")).unwrap().lines().count(), 2);
    let report = fs::read_to_string(run.join("report.txt")).unwrap();
    assert!(report.contains("seen-avg") && report.contains("unseen-avg"));

    let again = ok(&lreid(&["train", "--config", cfg, "--name", "again"], out));
    assert_eq!(report, fs::read_to_string(out.join("again/report.txt")).unwrap());
    assert_eq!(stdout.replace("/run/", "/again/"), again);

    ok(&lreid(&["train", "--config", cfg, "--name", "noaf", "--ablate", "no-af", "--epochs", "2"], out));
    for line in fs::read_to_string(out.join("noaf/train_log.jsonl")).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["losses"]["anti_forgetting"].as_f64(), Some(0.0));
    }

    let mut last = ckpts.iter().map(|e| e.path()).collect::<Vec<_>>();
    last.sort();
    let last = last.pop().unwrap();
    let stream = out.join("stream.txt");
    let stream = stream.to_str().unwrap();
    let rep_path = out.join("eval/report.txt");
    let eval = ok(&lreid(&["eval", "--checkpoint", last.to_str().unwrap(), "--stream", stream, "--report", rep_path.to_str().unwrap()], out));
    assert_eq!(eval, report);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(json["datasets"].as_array().unwrap().len(), 3);
    let seen: Vec<f64> = json["datasets"].as_array().unwrap()[..2].iter().map(|d| d["map"].as_f64().unwrap()).collect();
    assert!((json["seen_avg"]["map"].as_f64().unwrap() - (seen[0] + seen[1]) / 2.0).abs() < 1e-12);
    let missing = lreid(&["eval", "--checkpoint", "nowhere.ckpt", "--stream", stream], out);
    assert_eq!(missing.status.code(), Some(2));

    let curves = ok(&lreid(&["curves", "--run-dir", run.to_str().unwrap(), "--stream", stream], out));
    let sections: Vec<&str> = curves.split("# ").filter(|s| !s.is_empty()).collect();
    assert_eq!(sections.len(), 3);
    for s in &sections {
        let rows: Vec<&str> = s.lines().skip(1).filter(|l| !l.is_empty()).collect();
        assert_eq!(rows[0], "step\tmap\trank1");
        assert_eq!(rows.len(), 3);
    }
    let empty = out.join("empty");
    fs::create_dir_all(&empty).unwrap();
    assert_eq!(lreid(&["curves", "--run-dir", empty.to_str().unwrap(), "--stream", stream], out).status.code(), Some(2));

    let dump = out.join("feats.tsv");
    let msg = ok(&lreid(&["dump-features", "--checkpoint", last.to_str().unwrap(), "--stream", stream, "--output", dump.to_str().unwrap(), "--split", "query"], out));
    let lines = fs::read_to_string(&dump).unwrap().lines().count();
    assert!(msg.starts_with(&format!("{lines} features")));
}
