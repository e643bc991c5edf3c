mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::{figure_one, toy_corpus};
use mtxl::codec::{read_tokens, write_tokens, CodecConfig};
use mtxl::midi::parse_midi;

fn mtxl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtxl"))
        .args(args)
        .env("MTXL_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: [&str; 12] = [
    "--set",
    "model.d_model=16",
    "--set",
    "model.head_dim=8",
    "--set",
    "model.d_ff=32",
    "--set",
    "model.segment_len=8",
    "--set",
    "model.mem_len=8",
    "--set",
    "train.steps=200",
];

fn write_toy_corpus(dir: &Path, files: usize) {
    fs::create_dir_all(dir).unwrap();
    for (i, t) in toy_corpus().iter().take(files).enumerate() {
        let f = fs::File::create(dir.join(format!("toy{i}.tokens.jsonl"))).unwrap();
        write_tokens(f, t, &CodecConfig::default()).unwrap();
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&mtxl(&[])), 1);
    assert_eq!(code(&mtxl(&["frobnicate"])), 1);
    assert_eq!(code(&mtxl(&["eval"])), 1);
    assert_eq!(code(&mtxl(&["--help"])), 0);
}

#[test]
fn unknown_config_key_lists_valid_keys() {
    let o = mtxl(&["--set", "train.learning_rate=1", "config"]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("train.learning_rate") && err.contains("train.lr") && err.contains("model.mem_len"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[model]\nwidth = 3\n").unwrap();
    let o = mtxl(&["--config", p(&cfg), "config"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("model.width"));
}

#[test]
fn config_prints_effective_values() {
    let o = mtxl(&["--seed", "9", "--set", "train.lr=0.001", "config"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let c = mtxl::config::Config::from_toml(&text).unwrap();
    assert_eq!(c.train.lr, 0.001);
    assert_eq!(c.train.seed, 9);
    assert_eq!(c.sampler.seed, 9);
}

#[test]
fn missing_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let o = mtxl(&["encode", p(&empty), "--out", p(&dir.path().join("tok"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no input files"), "{}", stderr(&o));
    assert_eq!(code(&mtxl(&["--config", "/nonexistent.toml", "config"])), 2);
    assert_eq!(code(&mtxl(&["generate", "/nonexistent.ckpt", "--out", "x.jsonl"])), 2);
}

#[test]
fn encode_decode_stats_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let midi = dir.path().join("midi");
    fs::create_dir(&midi).unwrap();
    fs::write(midi.join("figure.mid"), figure_one().bytes()).unwrap();
    fs::write(midi.join("broken.mid"), b"MThd junk").unwrap();
    let tok = dir.path().join("tok");
    let o = mtxl(&["encode", p(&midi), "--out", p(&tok)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (_, streams) = read_tokens(std::io::BufReader::new(fs::File::open(tok.join("figure.tokens.jsonl")).unwrap())).unwrap();
    let tuples: Vec<[u32; 4]> = streams.tuples().map(|t| t.to_array()).collect();
    assert_eq!(tuples, vec![[0, 384, 60, 80], [96, 288, 64, 80], [96, 192, 67, 80], [384, 96, 65, 100]]);
    let report = fs::read_to_string(tok.join("report.json")).unwrap();
    assert!(report.contains("broken.mid"), "{report}");

    let back = dir.path().join("figure.mid");
    let o = mtxl(&["decode", p(&tok.join("figure.tokens.jsonl")), "--out", p(&back), "--tempo", "60"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let score = parse_midi(&fs::read(&back).unwrap()).unwrap();
    let onsets: Vec<f64> = score.notes.iter().map(|n| n.onset).collect();
    let want = [0.0, 1.0, 2.0, 6.0];
    assert!(onsets.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-3), "{onsets:?}");

    let stats = dir.path().join("stats.json");
    let o = mtxl(&["stats", p(&tok), "--out", p(&stats)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(fs::read_to_string(stats).unwrap().contains('4'));
}

#[test]
fn eval_matches_hand_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mid = dir.path().join("figure.mid");
    fs::write(&mid, figure_one().bytes()).unwrap();
    let out = dir.path().join("eval");
    let o = mtxl(&["eval", p(&mid), "--out", p(&out), "--window", "1", "--horizon", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    // Onsets at 0, 0.5, 1 and 3 s; the last note ends at 4 s.
    assert_eq!(
        fs::read_to_string(out.join("figure.density.csv")).unwrap(),
        "window_index,t_start_seconds,count\n0,0,2\n1,1,1\n2,2,0\n3,3,1\n"
    );
    let mut want = String::from("pitch,frequency\n");
    for pitch in 60..=71 {
        let f = if [60, 64, 65, 67].contains(&pitch) { "0.25" } else { "0" };
        want.push_str(&format!("{pitch},{f}\n"));
    }
    assert_eq!(fs::read_to_string(out.join("pitch.csv")).unwrap(), want);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary[0]["stability_ratio"], 0.5);

    let svg = dir.path().join("density.svg");
    let o = mtxl(&["plot", p(&out.join("figure.density.csv")), "--out", p(&svg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(fs::read_to_string(svg).unwrap().starts_with("<svg"));

    let o = mtxl(&["eval", p(&mid), "--out", p(&out), "--window", "0"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn train_then_generate() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    write_toy_corpus(&corpus, 2);
    let run = dir.path().join("run");
    let mut args = vec!["train", p(&corpus), "--out", p(&run), "--seed", "3"];
    args.extend(TINY);
    let o = mtxl(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["last.ckpt", "best.ckpt", "loss.csv", "config.toml"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let loss = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 201, "{loss}");

    // Resuming past the end is a no-op that keeps the history.
    let mut args = vec!["train", p(&corpus), "--out", p(&run), "--resume"];
    args.extend(TINY);
    assert_eq!(code(&mtxl(&args)), 0);
    assert_eq!(fs::read_to_string(run.join("loss.csv")).unwrap(), loss);

    let ckpt = run.join("last.ckpt");
    let prime = corpus.join("toy0.tokens.jsonl");
    let (_, prime_tokens) = read_tokens(std::io::BufReader::new(fs::File::open(&prime).unwrap())).unwrap();

    let out = dir.path().join("zero.tokens.jsonl");
    let o = mtxl(&["generate", p(&ckpt), "--out", p(&out), "--prime", p(&prime), "--notes", "0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (_, got) = read_tokens(std::io::BufReader::new(fs::File::open(&out).unwrap())).unwrap();
    assert_eq!(got, prime_tokens);

    let zero_mid = dir.path().join("zero.mid");
    let o = mtxl(&["generate", p(&ckpt), "--out", p(&zero_mid), "--prime", p(&prime), "--notes", "0"]);
    assert_eq!(code(&o), 0);
    let decoded = mtxl::codec::decode(&prime_tokens, &CodecConfig::default());
    let written = parse_midi(&fs::read(&zero_mid).unwrap()).unwrap();
    assert_eq!(written.notes.len(), decoded.notes.len());

    let gen = dir.path().join("gen.tokens.jsonl");
    let o = mtxl(&["generate", p(&ckpt), "--out", p(&gen), "--notes", "30", "--seed", "5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (_, a) = read_tokens(std::io::BufReader::new(fs::File::open(&gen).unwrap())).unwrap();
    assert_eq!(a.len(), 31);
    let o = mtxl(&["generate", p(&ckpt), "--out", p(&gen), "--notes", "30", "--seed", "5"]);
    assert_eq!(code(&o), 0);
    let (_, b) = read_tokens(std::io::BufReader::new(fs::File::open(&gen).unwrap())).unwrap();
    assert_eq!(a, b);
}

#[test]
fn diverging_training_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    write_toy_corpus(&corpus, 2);
    let run = dir.path().join("run");
    let mut args = vec!["train", p(&corpus), "--out", p(&run)];
    args.extend(TINY);
    args.extend(["--set", "train.lr=1e38", "--set", "train.clip_norm=1e38", "--set", "train.warmup_frac=0"]);
    let o = mtxl(&args);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}
