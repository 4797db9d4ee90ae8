use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use objaoa::data::{join, load_captions, load_features};
use objaoa::metrics::evaluate;
use objaoa::model::{greedy_decode, load_checkpoint};
use objaoa::Vocabulary;
use objaoa_cli::parse_report;

const SMALL: &str = "d_model=16\nn_heads=2\nn_enc_layers=1\nn_dec_layers=1\nd_ffn=32\nd_g=16\n\
max_caption_len=12\nbatch_size=8\nxe_max_epochs=3\ndev_count=4\n";

fn objaoa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_objaoa")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    features: PathBuf,
    captions: PathBuf,
    config: PathBuf,
}

fn fixture(images: &str) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let data = root.join("data");
    let o = objaoa(&["synth", "--out", s(&data), "--images", images, "--seed", "7", "--d-feat", "12"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let config = root.join("small.cfg");
    std::fs::write(&config, SMALL).unwrap();
    Fixture {
        features: data.join("features.jsonl"),
        captions: data.join("captions.jsonl"),
        _dir: dir,
        root,
        config,
    }
}

fn train(f: &Fixture, out: &str, extra: &[&str]) -> Output {
    let out = f.root.join(out);
    let mut args = vec![
        "train",
        "--config",
        s(&f.config),
        "--features",
        s(&f.features),
        "--captions",
        s(&f.captions),
        "--out",
        s(&out),
    ];
    args.extend_from_slice(extra);
    objaoa(&args)
}

#[test]
fn synth_is_deterministic_and_rejects_zero_images() {
    let a = fixture("6");
    let b = fixture("6");
    for name in ["features.jsonl", "captions.jsonl"] {
        let x = std::fs::read(a.root.join("data").join(name)).unwrap();
        let y = std::fs::read(b.root.join("data").join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
    let o = objaoa(&["synth", "--out", s(&a.root.join("z")), "--images", "0"]);
    assert_eq!(code(&o), 1);
    assert!(!a.root.join("z").exists());
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&objaoa(&["verify", "--suite", "nonsense"])), 1);
    assert_eq!(code(&objaoa(&["train", "--out", "/nonexistent/never"])), 1);
    assert_eq!(code(&objaoa(&["frobnicate"])), 1);
    assert_eq!(code(&objaoa(&["--help"])), 0);
    let f = fixture("6");
    let o = train(&f, "bad", &["--set", "colour=red"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));
}

#[test]
fn train_writes_run_directory_and_reruns_identically() {
    let f = fixture("16");
    let o = train(&f, "run", &["--no-aoa"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run = f.root.join("run");
    for name in ["config.txt", "vocab.txt", "train.log", "best.ckpt", "last.ckpt"] {
        assert!(run.join(name).is_file(), "{name}");
    }
    let resolved = std::fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(resolved.contains("aoa_enabled=false\n"));
    assert!(resolved.contains(&format!("features={}\n", f.features.display())));
    let best = load_checkpoint(run.join("best.ckpt")).unwrap();
    assert!(!best.config.aoa_enabled);
    assert!(best.params.get("enc.0.attn.out.w").is_some());
    assert!(best.params.get("enc.0.attn.aoa.w_q_gate").is_none());

    // the resolved config alone reproduces the run
    let again = f.root.join("again");
    let o = objaoa(&["train", "--config", s(&run.join("config.txt")), "--out", s(&again)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["train.log", "best.ckpt", "last.ckpt", "vocab.txt", "config.txt"] {
        assert_eq!(std::fs::read(run.join(name)).unwrap(), std::fs::read(again.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn scst_stage_needs_a_trained_checkpoint() {
    let f = fixture("12");
    let o = train(&f, "fresh", &["--stage", "scst"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("cross-entropy"));
    assert!(!f.root.join("fresh").join("best.ckpt").exists());

    assert_eq!(code(&train(&f, "xe", &["--stage", "xe"])), 0);
    let init = f.root.join("xe").join("best.ckpt");
    let o = train(&f, "scst", &["--stage", "scst", "--init", s(&init), "--set", "scst_max_steps=3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(f.root.join("scst").join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.lines().all(|l| l.starts_with("stage=scst ")));
    let last = load_checkpoint(f.root.join("scst").join("last.ckpt")).unwrap();
    assert_eq!(last.state.step, load_checkpoint(&init).unwrap().state.step + 3);
}

#[test]
fn eval_report_matches_printout_and_beam_one_is_greedy() {
    let f = fixture("12");
    assert_eq!(code(&train(&f, "run", &[])), 0);
    let ckpt = f.root.join("run").join("best.ckpt");
    let report = f.root.join("beam1.txt");
    let o = objaoa(&[
        "eval",
        "--ckpt",
        s(&ckpt),
        "--features",
        s(&f.features),
        "--captions",
        s(&f.captions),
        "--beam",
        "1",
        "--report",
        s(&report),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let parsed = parse_report(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let printed: Vec<(String, f64)> = stdout(&o)
        .lines()
        .skip(1)
        .map(|l| {
            let mut it = l.split_whitespace();
            (it.next().unwrap().to_string(), it.next().unwrap().parse().unwrap())
        })
        .collect();
    assert_eq!(parsed, printed);

    // independent greedy scoring through the library
    let ck = load_checkpoint(&ckpt).unwrap();
    let vocab = Vocabulary::load(f.root.join("run").join("vocab.txt")).unwrap();
    let examples = join(load_features(&f.features).unwrap(), load_captions(&f.captions).unwrap()).unwrap();
    let cands: Vec<_> = examples
        .iter()
        .map(|e| vocab.tokens_of(&greedy_decode(&e.image, &ck).unwrap()))
        .collect();
    let refs: Vec<Vec<Vec<String>>> = examples
        .iter()
        .map(|e| e.captions.iter().map(|c| objaoa::metrics::tokenize(c)).collect())
        .collect();
    let greedy = evaluate(&cands, &refs, None).unwrap();
    let greedy: Vec<f64> = greedy.values().to_vec();
    assert_eq!(parsed.iter().map(|(_, v)| *v).collect::<Vec<_>>(), greedy);

    // default report location is beside the checkpoint
    let o = objaoa(&["eval", "--ckpt", s(&ckpt), "--features", s(&f.features), "--captions", s(&f.captions)]);
    assert_eq!(code(&o), 0);
    assert!(f.root.join("run").join("eval_report.txt").is_file());
}

#[test]
fn eval_with_mismatched_ids_is_a_data_error() {
    let f = fixture("8");
    assert_eq!(code(&train(&f, "run", &["--set", "dev_count=2"])), 0);
    let other = f.root.join("other");
    assert_eq!(code(&objaoa(&["synth", "--out", s(&other), "--images", "9", "--d-feat", "12"])), 0);
    let o = objaoa(&[
        "eval",
        "--ckpt",
        s(&f.root.join("run").join("best.ckpt")),
        "--features",
        s(&other.join("features.jsonl")),
        "--captions",
        s(&f.captions),
    ]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn caption_output_is_ordered_and_repeatable() {
    let f = fixture("8");
    assert_eq!(code(&train(&f, "run", &["--set", "dev_count=2"])), 0);
    let ckpt = f.root.join("run").join("best.ckpt");
    let a = objaoa(&["caption", "--ckpt", s(&ckpt), "--features", s(&f.features)]);
    let b = objaoa(&["caption", "--ckpt", s(&ckpt), "--features", s(&f.features)]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    let ids: Vec<String> = stdout(&a).lines().map(|l| l.split('\t').next().unwrap().to_string()).collect();
    let expected: Vec<String> = load_features(&f.features).unwrap().into_iter().map(|r| r.id).collect();
    assert_eq!(ids, expected);

    let empty = f.root.join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let o = objaoa(&["caption", "--ckpt", s(&ckpt), "--features", s(&empty)]);
    assert_eq!(code(&o), 0);
    assert!(o.stdout.is_empty());
}

#[test]
fn verify_metrics_suite_passes() {
    let o = objaoa(&["verify", "--suite", "metrics-oracle"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.lines().filter(|l| l.starts_with("[PASS]")).count() >= 6);
    assert!(!out.contains("[FAIL]"));
}
