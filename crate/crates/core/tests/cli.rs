//! The `aetsep` binary end to end on a small synthetic corpus.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aetsep::corpus::{
    band_limited_noise, read_manifest, read_wav, write_wav, Role, SampleFormat, Waveform,
};
use tempfile::TempDir;

const RATE: u32 = 8000;

fn aetsep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aetsep"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// `speakers` directories (alternating f/m prefixes) of `sentences` short
/// band-limited noise "utterances" each.
fn write_corpus(root: &Path, speakers: usize, sentences: usize) {
    for sp in 0..speakers {
        let dir = root.join(format!("{}{:02}", if sp % 2 == 0 { 'f' } else { 'm' }, sp));
        fs::create_dir_all(&dir).unwrap();
        let (lo, hi) = if sp % 2 == 0 {
            (100.0, 1000.0)
        } else {
            (1500.0, 3000.0)
        };
        for k in 0..sentences {
            let len = 1200 + 37 * ((sp * sentences + k) % 11);
            let w = band_limited_noise(len, RATE, lo, hi, (sp * 100 + k) as u64).unwrap();
            write_wav(&dir.join(format!("sa{k:02}.wav")), &w, SampleFormat::Pcm16).unwrap();
        }
    }
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new(pairs: usize, sentences: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(&dir.path().join("corpus"), 2 * pairs, sentences);
        let f = Fixture { dir };
        let o = aetsep(&[
            "mix",
            "--corpus",
            s(&f.path("corpus")),
            "--out",
            s(&f.path("mix")),
            "--pairs",
            &pairs.to_string(),
            "--sentences",
            &sentences.to_string(),
            "--seed",
            "5",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        f
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn manifest(&self) -> PathBuf {
        self.path("mix/manifest.tsv")
    }

    fn write_config(&self, name: &str, frontend: &str, epochs: usize) -> PathBuf {
        let cfg = format!(
            r#"{{
  "manifest": "mix/manifest.tsv",
  "output_dir": "run_{name}",
  "frontend": "{frontend}",
  "aet": {{"num_filters": 32, "filter_width": 32, "pool": 4, "smoothing_length": 3}},
  "stft": {{"n_fft": 64, "hop": 16}},
  "separator": {{"hidden": 16, "hidden_layers": 2}},
  "train": {{"epochs": {epochs}, "batch_size": 2, "segment_len": 256, "batches_per_epoch": 2,
            "learning_rate": 0.001, "dropout": 0.1, "seed": 3}}
}}"#
        );
        let p = self.path(&format!("{name}.json"));
        fs::write(&p, cfg).unwrap();
        p
    }

    /// Trains and returns the checkpoint path.
    fn train(&self, name: &str, frontend: &str, epochs: usize) -> PathBuf {
        let cfg = self.write_config(name, frontend, epochs);
        let o = aetsep(&["train", s(&cfg)]);
        assert!(o.status.success(), "{}", stderr(&o));
        self.path(&format!("run_{name}/checkpoint.bin"))
    }
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    (header, rows)
}

#[test]
fn mix_counts_and_split() {
    let f = Fixture::new(10, 10);
    let entries = read_manifest(&f.manifest()).unwrap();
    assert_eq!(entries.len(), 100);
    assert_eq!(entries.iter().filter(|e| e.role == Role::Train).count(), 80);
    assert_eq!(entries.iter().filter(|e| e.role == Role::Test).count(), 20);
    for e in &entries {
        assert!(e.path.is_file());
    }

    let small = Fixture::new(1, 2);
    let entries = read_manifest(&small.manifest()).unwrap();
    assert_eq!(entries.len(), 2);
    assert_eq!(entries.iter().filter(|e| e.role == Role::Test).count(), 1);
}

#[test]
fn mix_is_reproducible_per_seed() {
    let f = Fixture::new(2, 3);
    let again = f.path("again");
    let o = aetsep(&[
        "mix",
        "--corpus",
        s(&f.path("corpus")),
        "--out",
        s(&again),
        "--pairs",
        "2",
        "--sentences",
        "3",
        "--seed",
        "5",
    ]);
    assert!(o.status.success());
    let first = read_manifest(&f.manifest()).unwrap();
    let second = read_manifest(&again.join("manifest.tsv")).unwrap();
    assert_eq!(first.len(), second.len());
    for (a, b) in first.iter().zip(&second) {
        assert_eq!(a.role, b.role);
        assert_eq!(fs::read(&a.path).unwrap(), fs::read(&b.path).unwrap());
    }
}

#[test]
fn mix_rejects_a_small_corpus() {
    let f = Fixture::new(1, 2);
    let o = aetsep(&[
        "mix",
        "--corpus",
        s(&f.path("corpus")),
        "--out",
        s(&f.path("x")),
        "--pairs",
        "3",
        "--sentences",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = aetsep(&[
        "mix",
        "--corpus",
        s(&f.path("nope")),
        "--out",
        s(&f.path("x")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope"));
}

#[test]
fn train_separate_evaluate_inspect() {
    let f = Fixture::new(2, 5);
    let ckpt = f.train("orth", "aet_orthogonal", 3);
    let (header, rows) = read_csv(&f.path("run_orth/train_log.csv"));
    assert_eq!(header, ["epoch", "train_loss", "val_sdr_db"]);
    assert_eq!(rows.len(), 3);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[0], (i + 1).to_string());
        assert!(r[1].parse::<f64>().unwrap().is_finite());
    }

    // separate: equal length, deterministic, silent input stays bounded
    let entries = read_manifest(&f.manifest()).unwrap();
    let mixture = &entries[0].path;
    let out1 = f.path("sep1.wav");
    let out2 = f.path("sep2.wav");
    for out in [&out1, &out2] {
        let o = aetsep(&[
            "separate",
            "--checkpoint",
            s(&ckpt),
            "--input",
            s(mixture),
            "--output",
            s(out),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let input = read_wav(mixture).unwrap();
    let y = read_wav(&out1).unwrap();
    assert_eq!(y.len(), input.len());
    assert_eq!(y.sample_rate(), RATE);
    assert_eq!(fs::read(&out1).unwrap(), fs::read(&out2).unwrap());

    let silent = f.path("silent.wav");
    write_wav(
        &silent,
        &Waveform::new(vec![0.0; 900], RATE).unwrap(),
        SampleFormat::Pcm16,
    )
    .unwrap();
    let o = aetsep(&[
        "separate",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&silent),
        "--output",
        s(&out1),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let y = read_wav(&out1).unwrap();
    assert_eq!(y.len(), 900);
    assert!(y.samples().iter().all(|v| v.abs() < 1.0));

    let short = f.path("short.wav");
    write_wav(
        &short,
        &Waveform::new(vec![0.1; 10], RATE).unwrap(),
        SampleFormat::Pcm16,
    )
    .unwrap();
    let o = aetsep(&[
        "separate",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&short),
        "--output",
        s(&out1),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read_wav(&out1).unwrap().len(), 10);

    let wrong_rate = f.path("rate.wav");
    write_wav(
        &wrong_rate,
        &Waveform::new(vec![0.1; 900], 16_000).unwrap(),
        SampleFormat::Pcm16,
    )
    .unwrap();
    let o = aetsep(&[
        "separate",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&wrong_rate),
        "--output",
        s(&out1),
    ]);
    assert_eq!(o.status.code(), Some(2));

    // evaluate: one row per test mixture, summary medians from the rows
    let csv = f.path("eval/scores.csv");
    let o = aetsep(&[
        "evaluate",
        "--checkpoint",
        s(&ckpt),
        "--manifest",
        s(&f.manifest()),
        "--out",
        s(&csv),
        "--filter-len",
        "16",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = read_csv(&csv);
    assert_eq!(
        header,
        ["pair", "sentence", "sdr_db", "sir_db", "sar_db", "L"]
    );
    let tests = entries.iter().filter(|e| e.role == Role::Test).count();
    assert_eq!(rows.len(), tests);
    let (sum_header, summary) = read_csv(&f.path("eval/scores_summary.csv"));
    assert_eq!(sum_header, ["metric", "median", "q1", "q3", "iqr"]);
    for (col, metric) in [(2, "sdr_db"), (3, "sir_db"), (4, "sar_db")] {
        let values: Vec<f64> = rows.iter().map(|r| r[col].parse().unwrap()).collect();
        let line = summary.iter().find(|r| r[0] == metric).unwrap();
        let got: f64 = line[1].parse().unwrap();
        let want = common::median(&values);
        assert!(
            (got - want).abs() <= 1e-12 * (1.0 + want.abs()),
            "{metric}: {got} vs {want}"
        );
    }

    // same scores whatever the thread count
    let csv1 = f.path("eval/one_thread.csv");
    let o = Command::new(env!("CARGO_BIN_EXE_aetsep"))
        .env("AETSEP_THREADS", "1")
        .args([
            "evaluate",
            "--checkpoint",
            s(&ckpt),
            "--manifest",
            s(&f.manifest()),
            "--out",
            s(&csv1),
            "--filter-len",
            "16",
        ])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(&csv).unwrap(), fs::read(&csv1).unwrap());

    // inspect: 32 filters, sorted dominant bins, peak-normalized spectra
    let dir = f.path("inspect");
    let o = aetsep(&["inspect", "--checkpoint", s(&ckpt), "--out", s(&dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (_, filters) = read_csv(&dir.join("filters.csv"));
    assert_eq!(filters.len(), 32);
    let (_, bins) = read_csv(&dir.join("dominant_bins.csv"));
    let bins: Vec<usize> = bins.iter().map(|r| r[2].parse().unwrap()).collect();
    assert_eq!(bins.len(), 32);
    assert!(bins.windows(2).all(|w| w[0] <= w[1]));
    let (header, spectra) = read_csv(&dir.join("spectra.csv"));
    assert_eq!(header.len(), 2 + 513);
    for row in &spectra {
        let vals: Vec<f64> = row[2..].iter().map(|v| v.parse().unwrap()).collect();
        let peak = vals.iter().cloned().fold(f64::MIN, f64::max);
        assert!((peak - 1.0).abs() < 1e-12);
    }
    let (_, flat) = read_csv(&dir.join("flatness.csv"));
    assert_eq!(flat.len(), 2);
}

#[test]
fn stft_checkpoint_has_nothing_to_inspect() {
    let f = Fixture::new(1, 3);
    let ckpt = f.train("stft", "stft", 1);
    let o = aetsep(&[
        "inspect",
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&f.path("i")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("STFT"));
}

#[test]
fn missing_manifest_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(
        &cfg,
        r#"{"manifest": "absent/manifest.tsv", "output_dir": "out", "frontend": "aet"}"#,
    )
    .unwrap();
    let o = aetsep(&["--config", s(&cfg), "train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent/manifest.tsv"), "{}", stderr(&o));
}

#[test]
fn bad_configs_are_rejected_before_work() {
    let dir = tempfile::tempdir().unwrap();
    for (name, text) in [
        (
            "unknown_top",
            r#"{"manifest": "m", "output_dir": "o", "frontend": "aet", "learning_rate": 1}"#,
        ),
        (
            "unknown_nested",
            r#"{"manifest": "m", "output_dir": "o", "frontend": "aet", "train": {"lr": 1}}"#,
        ),
        (
            "bad_frontend",
            r#"{"manifest": "m", "output_dir": "o", "frontend": "wavelet"}"#,
        ),
        (
            "bad_dropout",
            r#"{"manifest": "m", "output_dir": "o", "frontend": "aet", "train": {"dropout": 1.0}}"#,
        ),
        (
            "bad_geometry",
            r#"{"manifest": "m", "output_dir": "o", "frontend": "aet", "aet": {"pool": 0}}"#,
        ),
        ("not_json", "manifest = m"),
    ] {
        let cfg = dir.path().join(format!("{name}.json"));
        fs::write(&cfg, text).unwrap();
        let o = aetsep(&["train", s(&cfg)]);
        assert_eq!(o.status.code(), Some(2), "{name}: {}", stderr(&o));
        assert!(!dir.path().join("o").exists());
    }
    assert_eq!(aetsep(&["train"]).status.code(), Some(2));
    assert_eq!(aetsep(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(aetsep(&["--help"]).status.code(), Some(0));
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let f = Fixture::new(1, 3);
    let ckpt = f.train("c", "aet", 1);
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&ckpt, bytes).unwrap();
    let entries = read_manifest(&f.manifest()).unwrap();
    let o = aetsep(&[
        "separate",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&entries[0].path),
        "--output",
        s(&f.path("o.wav")),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(
        stderr(&o).to_lowercase().contains("checksum"),
        "{}",
        stderr(&o)
    );
    let o = aetsep(&[
        "separate",
        "--checkpoint",
        s(&f.path("none.bin")),
        "--input",
        s(&entries[0].path),
        "--output",
        s(&f.path("o.wav")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn seed_flag_overrides_config_and_training_is_reproducible() {
    let f = Fixture::new(1, 3);
    let cfg = f.write_config("r", "aet", 1);
    let run = |seed: &str| {
        let o = aetsep(&["--seed", seed, "train", s(&cfg)]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(f.path("run_r/checkpoint.bin")).unwrap()
    };
    let a = run("7");
    let b = run("7");
    let c = run("8");
    assert_eq!(a, b);
    assert_ne!(a, c);
}
