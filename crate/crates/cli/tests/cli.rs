use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mfmasc"));
    c.env_remove("MFMASC_CACHE").env("RUST_LOG", "off");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Asserts failure with a single `error[class]: ...` line; returns it.
fn fails(dir: &Path, args: &[&str], class: &str) -> String {
    let out = run(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error[{class}]: ")), "{err}");
    err
}

/// A small corpus (2 train + 1 test clips per class, 3 s each) with index.
fn corpus() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "5", "synth", "--out", "corpus", "--per-class", "2", "--test-per-class", "1", "--duration", "3"]);
    ok(d, &["ingest", "--meta", "corpus/metadata.tsv", "--out", "index.tsv"]);
    dir
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn train_small(d: &Path, cfg: &str, log: &str, model: &str) -> Output {
    write(d, "run.cfg", cfg);
    bin()
        .current_dir(d)
        .env("MFMASC_CACHE", d.join("cache"))
        .args(["--config", "run.cfg", "train", "--index", "index.tsv", "--model", model, "--log", log])
        .output()
        .unwrap()
}

#[test]
fn synth_writes_corpus_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "9", "synth", "--out", "a", "--per-class", "10", "--duration", "0.2"]);
    ok(d, &["--seed", "9", "synth", "--out", "b", "--per-class", "10", "--duration", "0.2"]);
    let wavs = |p: &str| {
        let mut v: Vec<_> = fs::read_dir(d.join(p).join("audio")).unwrap().map(|e| e.unwrap().path()).collect();
        v.sort();
        v
    };
    let (a, b) = (wavs("a"), wavs("b"));
    assert_eq!(a.len(), 100);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }
    let meta = fs::read_to_string(d.join("a/metadata.tsv")).unwrap();
    assert_eq!(meta, fs::read_to_string(d.join("b/metadata.tsv")).unwrap());
    assert_eq!(meta.lines().count(), 101);
    assert!(!meta.contains('\r'));
}

#[test]
fn synth_full_length_clip_format() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--out", "c", "--per-class", "1"]);
    let r = hound::WavReader::open(d.join("c/audio/park-train-000.wav")).unwrap();
    let spec = r.spec();
    assert_eq!((spec.sample_rate, spec.bits_per_sample, spec.channels), (44100, 16, 1));
    assert_eq!(r.duration(), 441_000);
}

#[test]
fn synth_unwritable_dir() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "file", "");
    fails(dir.path(), &["synth", "--out", "file/sub", "--per-class", "1", "--duration", "0.1"], "io");
}

#[test]
fn ingest_valid_and_invalid_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::create_dir(d.join("audio")).unwrap();
    for f in ["airport-lisbon-1000-40000-a.wav", "bus-1.wav", "tram-1.wav"] {
        write(&d.join("audio"), f, "");
    }
    write(
        d,
        "meta.tsv",
        "filename\tscene_label\naudio/airport-lisbon-1000-40000-a.wav\tairport\naudio/bus-1.wav\tbus\naudio/tram-1.wav\ttram\n",
    );
    let out = ok(d, &["ingest", "--meta", "meta.tsv", "--out", "idx.tsv"]);
    assert!(out.contains("airport\t1\t0"), "{out}");
    let idx = fs::read_to_string(d.join("idx.tsv")).unwrap();
    assert_eq!(idx.lines().count(), 4);
    assert!(idx.starts_with("path\tlabel\tsplit\n"));

    write(d, "bad.tsv", "filename\tscene_label\naudio/bus-1.wav\tbus\naudio/gone.wav\tbus\naudio/tram-1.wav\tbeach\n");
    let err = fails(d, &["ingest", "--meta", "bad.tsv", "--out", "idx2.tsv"], "data");
    assert!(err.contains("line 3: missing audio file") && err.contains("unknown label \"beach\""), "{err}");
    assert!(!d.join("idx2.tsv").exists());
    fails(d, &["ingest", "--meta", "nope.tsv"], "io");
}

#[test]
fn features_are_idempotent() {
    let dir = corpus();
    let d = dir.path();
    write(d, "empty.tsv", "path\tlabel\tsplit\n");
    assert!(ok(d, &["features", "--index", "empty.tsv", "--cache", "c"]).contains("0 extracted"));

    let out = ok(d, &["--threads", "3", "features", "--index", "index.tsv", "--cache", "c"]);
    assert!(out.starts_with("30 extracted, 0 already cached"), "{out}");
    let stamp = |p: &Path| {
        let mut v: Vec<_> = fs::read_dir(p)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.path(), e.metadata().unwrap().modified().unwrap())
            })
            .collect();
        v.sort();
        v
    };
    let before = stamp(&d.join("c"));
    assert_eq!(before.len(), 30);
    let out = ok(d, &["features", "--index", "index.tsv", "--cache", "c"]);
    assert!(out.starts_with("0 extracted, 30 already cached"), "{out}");
    assert_eq!(stamp(&d.join("c")), before);

    // the environment variable redirects the cache
    let out = bin().current_dir(d).env("MFMASC_CACHE", d.join("env")).args(["features", "--index", "index.tsv"]).output().unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read_dir(d.join("env")).unwrap().count(), 30);
}

#[test]
fn ten_second_clip_has_499_frames() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--out", "s", "--per-class", "1"]);
    ok(d, &["ingest", "--meta", "s/metadata.tsv", "--out", "i.tsv"]);
    ok(d, &["--threads", "2", "features", "--index", "i.tsv", "--cache", "c"]);
    for e in fs::read_dir(d.join("c")).unwrap() {
        let bytes = fs::read(e.unwrap().path()).unwrap();
        assert_eq!(&bytes[..4], b"MSP1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 499);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 128);
    }
}

#[test]
fn decode_failures_are_summarized() {
    let dir = corpus();
    let d = dir.path();
    let idx = fs::read_to_string(d.join("index.tsv")).unwrap();
    let mut lines: Vec<String> = idx.lines().map(String::from).collect();
    for (i, l) in lines.iter_mut().enumerate().skip(1).take(2) {
        let p = d.join(format!("broken{i}.wav"));
        fs::write(&p, b"not a wav").unwrap();
        *l = format!("{}\tbus\ttrain", p.display());
    }
    write(d, "broken.tsv", &(lines.join("\n") + "\n"));
    let err = fails(d, &["features", "--index", "broken.tsv", "--cache", "c"], "data");
    assert!(err.contains("2 clips failed"), "{err}");
}

#[test]
fn train_is_seed_deterministic_and_snapshots() {
    let dir = corpus();
    let d = dir.path();
    let cfg = "train.epochs=1\nmodel.attention=none\n";
    assert!(train_small(d, cfg, "a.log", "a.lcn").status.success());
    assert!(train_small(d, cfg, "b.log", "b.lcn").status.success());
    let a = fs::read_to_string(d.join("a.log")).unwrap();
    let b = fs::read_to_string(d.join("b.log")).unwrap();
    assert_eq!(a.lines().next(), Some("epoch\tlr\ttrain_loss\ttrain_acc\tval_acc"));
    assert_eq!(a.lines().nth(1), b.lines().nth(1));
    assert_eq!(a.lines().nth(1).unwrap().split('\t').count(), 5);
    assert_eq!(fs::read(d.join("a.lcn")).unwrap(), fs::read(d.join("b.lcn")).unwrap());

    // a one-epoch cycle ends every epoch
    assert!(train_small(d, "train.epochs=2\ntrain.t0=1\ntrain.t_mult=1\n", "c.log", "c.lcn").status.success());
    assert!(d.join("c.lcn.cycle1").is_file() && d.join("c.lcn.cycle2").is_file());
}

#[test]
fn train_rejects_bad_config_before_work() {
    let dir = corpus();
    let d = dir.path();
    let out = train_small(d, "train.batch_size=1\n", "x.log", "x.lcn");
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error[config]: ") && err.contains("batch_size"), "{err}");
    assert!(!d.join("x.log").exists() && !d.join("cache").exists());
    let out = train_small(d, "model.attention=transformer\n", "x.log", "x.lcn");
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error[config]: "));
}

#[test]
fn evaluate_and_predict() {
    let dir = corpus();
    let d = dir.path();
    assert!(train_small(d, "train.epochs=1\nmodel.attention=cbam\n", "t.log", "m.lcn").status.success());
    let cache = d.join("cache");
    let cache = cache.to_str().unwrap();

    let report = ok(d, &["evaluate", "--model", "m.lcn", "--index", "index.tsv", "--cache", cache]);
    let lines: Vec<&str> = report.lines().collect();
    let start = lines.iter().position(|l| l.starts_with("confusion")).unwrap();
    let matrix: Vec<Vec<u64>> = lines[start + 2..start + 12]
        .iter()
        .map(|l| l.split('\t').skip(1).map(|c| c.parse().unwrap()).collect())
        .collect();
    assert!(matrix.iter().all(|r| r.len() == 10));
    let total: u64 = matrix.iter().flatten().sum();
    let trace: u64 = (0..10).map(|i| matrix[i][i]).sum();
    assert_eq!(total, 10);
    let acc: f64 = lines[0].split('\t').nth(1).unwrap().parse().unwrap();
    assert!((acc - trace as f64 / total as f64).abs() < 1e-4);
    let pairs = lines.iter().position(|l| *l == "pair\tcount").unwrap();
    assert_eq!(lines.len() - pairs - 1, 5);

    write(d, "trainonly.tsv", &fs::read_to_string(d.join("index.tsv")).unwrap().replace("\ttest\n", "\ttrain\n"));
    fails(d, &["evaluate", "--model", "m.lcn", "--index", "trainonly.tsv", "--cache", cache], "data");

    let wav = "corpus/audio/metro-test-000.wav";
    let first = ok(d, &["predict", "--model", "m.lcn", wav]);
    assert_eq!(first, ok(d, &["predict", "--model", "m.lcn", wav]));
    let (label, probs) = first.trim_end().split_once('\t').unwrap();
    let probs: Vec<f64> = probs.split(',').map(|p| p.parse().unwrap()).collect();
    assert_eq!(probs.len(), 10);
    assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert!(mfmasc_core::dataset::DEFAULT_LABELS.contains(&label));

    let spec = hound::WavSpec { channels: 1, sample_rate: 16000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(d.join("16k.wav"), spec).unwrap();
    for _ in 0..16000 {
        w.write_sample(0i16).unwrap();
    }
    w.finalize().unwrap();
    let err = fails(d, &["predict", "--model", "m.lcn", "16k.wav"], "data");
    assert!(err.contains("44100"), "{err}");

    write(d, "mels.cfg", "features.n_mels=64\nmodel.bins=64\n");
    let err = fails(d, &["--config", "mels.cfg", "predict", "--model", "m.lcn", wav], "config");
    assert!(err.contains("128 mel bins"), "{err}");
    fails(d, &["predict", "--model", "missing.lcn", wav], "io");
    write(d, "junk.lcn", "LCN1junk");
    fails(d, &["predict", "--model", "junk.lcn", wav], "format");
}

#[test]
fn usage_errors_are_single_line() {
    let dir = tempfile::tempdir().unwrap();
    fails(dir.path(), &["frobnicate"], "usage");
    fails(dir.path(), &["--threads", "x", "synth", "--out", "o"], "usage");
    fails(dir.path(), &["--threads", "0", "synth", "--out", "o"], "config");
    let out = run(dir.path(), &["--help"]);
    assert!(out.status.success());
    let help = String::from_utf8(out.stdout).unwrap();
    for cmd in ["ingest", "features", "train", "evaluate", "predict", "synth", "--config", "--seed", "--threads"] {
        assert!(help.contains(cmd), "{cmd}");
    }
}
