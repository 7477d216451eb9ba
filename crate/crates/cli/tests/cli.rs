use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

fn songshield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_songshield"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = songshield(args);
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

/// Generated corpus plus trained encoders, shared by the pipeline tests.
struct Trained {
    _dir: TempDir,
    root: PathBuf,
    manifest: PathBuf,
    encoders: PathBuf,
}

fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let root = dir.path().to_path_buf();
        let corpus = root.join("corpus");
        let encoders = root.join("encoders");
        ok(&["gen-corpus", "--out", s(&corpus)]);
        let manifest = corpus.join("manifest.csv");
        ok(&["train", "--manifest", s(&manifest), "--out", s(&encoders), "--seed", "1"]);
        Trained {
            _dir: dir,
            root,
            manifest,
            encoders,
        }
    })
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn gen_corpus_writes_forty_clips_deterministically() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["gen-corpus", "--out", s(&a), "--seed", "3"]);
    ok(&["gen-corpus", "--out", s(&b), "--seed", "3"]);
    let voices: Vec<_> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".wav") && !n.ends_with("_backing.wav"))
        .collect();
    assert_eq!(voices.len(), 40);
    assert_eq!(csv_rows(&a.join("manifest.csv")).len(), 41);
    for name in voices.iter().chain(["manifest.csv".to_string()].iter()) {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn too_few_singers_is_a_validation_error() {
    let dir = TempDir::new().unwrap();
    let out = songshield(&["gen-corpus", "--out", s(dir.path()), "--singers", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[protection]\niteratons = 3\n").unwrap();
    let out = songshield(&["evaluate", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("iteratons"));
}

#[test]
fn missing_paths_are_validation_errors() {
    assert_eq!(songshield(&["evaluate"]).status.code(), Some(2));
    assert_eq!(songshield(&["protect", "--out", "x.wav"]).status.code(), Some(2));
}

#[test]
fn training_report_lists_ensembles_and_held_out_encoders() {
    let t = trained();
    let rows = csv_rows(&t.encoders.join("train_report.csv"));
    for kind in ["identity", "lyric"] {
        let of_kind: Vec<_> = rows.iter().filter(|r| r[1] == kind).collect();
        assert!(of_kind.iter().filter(|r| r[2] == "false").count() >= 2);
        assert_eq!(of_kind.iter().filter(|r| r[2] == "true").count(), 1);
    }
}

#[test]
fn protect_with_every_flag_off_returns_the_input() {
    let t = trained();
    let out = t.root.join("noop.wav");
    ok(&[
        "protect", "--manifest", s(&t.manifest), "--encoders", s(&t.encoders), "--clip", "F0_2",
        "--out", s(&out), "--iterations", "5",
        "--protect-target", "false", "--protect-source", "false",
    ]);
    let input = fs::read(t.manifest.parent().unwrap().join("F0_2.wav")).unwrap();
    assert_eq!(fs::read(&out).unwrap(), input);
}

#[test]
fn default_flags_trace_five_losses_and_repeat_exactly() {
    let t = trained();
    let run = |name: &str| {
        let out = t.root.join(name);
        ok(&[
            "protect", "--manifest", s(&t.manifest), "--encoders", s(&t.encoders), "--clip", "M1_3",
            "--out", s(&out), "--iterations", "3", "--seed", "4",
        ]);
        out
    };
    let (a, b) = (run("a.wav"), run("b.wav"));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let trace = csv_rows(&t.root.join("a_trace.csv"));
    assert_eq!(
        trace[0],
        ["iteration", "identity_untargeted", "identity_targeted", "lyric_high", "lyric_low", "utility"]
    );
    assert_eq!(trace.len(), 4);
}

#[test]
fn protect_external_voice() {
    let t = trained();
    let out = t.root.join("ext.wav");
    let voice = t.manifest.parent().unwrap().join("F3_4.wav");
    ok(&[
        "protect", "--manifest", s(&t.manifest), "--encoders", s(&t.encoders), "--voice", s(&voice),
        "--gender", "F", "--lyrics", "a e", "--out", s(&out), "--iterations", "2",
    ]);
    assert!(out.exists());
    let bad = songshield(&[
        "protect", "--manifest", s(&t.manifest), "--encoders", s(&t.encoders), "--voice", s(&voice),
        "--gender", "F", "--lyrics", "zz", "--out", s(&out), "--iterations", "2",
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn batch_evaluate_and_attack() {
    let t = trained();
    let prot = t.root.join("protected");
    let common = ["--manifest", s(&t.manifest), "--encoders", s(&t.encoders)];
    let missing = songshield(&[&["evaluate"][..], &common, &["--protected", s(&t.root.join("nowhere")), "--out", s(&t.root)]].concat());
    assert_eq!(missing.status.code(), Some(3));

    ok(&[&["protect"][..], &common, &["--batch", "--out", s(&prot), "--iterations", "2"]].concat());
    assert_eq!(csv_rows(&prot.join("summary.csv")).len(), 25);

    let eval = t.root.join("eval");
    let text = ok(&[&["evaluate"][..], &common, &["--protected", s(&prot), "--out", s(&eval), "--protect-ratio", "0,1"]].concat());
    assert!(text.contains("xi_i: 0.41"));
    let sweep = csv_rows(&eval.join("sweep.csv"));
    assert_eq!(sweep.len(), 3);
    let col = |name: &str| sweep[0].iter().position(|c| c == name).unwrap();
    assert_eq!(sweep[1][col("protect_ratio")], "0.0");
    assert_eq!(sweep[1][col("srr_i")], "0.0");
    assert_eq!(sweep[1][col("pairs")], "64");
    assert_eq!(csv_rows(&eval.join("report_r1.csv")).len(), 65);

    let cfg = t.root.join("attack.toml");
    fs::write(
        &cfg,
        "[attack]\ntransforms = []\nnes = true\nnes_clips = [\"F0_2\"]\nfinetune = true\n\
         [nes]\niterations = 2\n[finetune]\nepochs = 2\nhead_epochs = 20\n",
    )
    .unwrap();
    let atk = t.root.join("attack");
    let run = |out: &Path| {
        ok(&[&["attack"][..], &common, &["--protected", s(&prot), "--out", s(out), "--config", s(&cfg)]].concat());
        fs::read_to_string(out.join("attack.csv")).unwrap()
    };
    let first = run(&atk);
    let rows = csv_rows(&atk.join("attack.csv"));
    let names: Vec<&str> = rows[1..].iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names, ["none", "nes", "finetune"]);
    assert_eq!(rows[2].last().unwrap(), "100");
    assert_eq!(run(&t.root.join("attack2")), first);

    fs::write(&cfg, "[attack]\ntransforms = []\n").unwrap();
    run(&atk);
    assert_eq!(csv_rows(&atk.join("attack.csv")).len(), 2);
}
