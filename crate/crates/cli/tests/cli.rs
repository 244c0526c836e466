use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mused::model::ModelConfig;
use mused::synth::{CorpusManifest, InterferenceMode};
use mused::train::RunConfig;

fn mused(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mused")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Toy {
    dir: tempfile::TempDir,
    manifest: PathBuf,
    noise: PathBuf,
    config: PathBuf,
}

fn toy() -> Toy {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = mused(&["make-toy-data", "--out-dir", s(&data), "--num-clips", "2", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let line = |key: &str| {
        let l = stdout.lines().find(|l| l.starts_with(key)).unwrap();
        PathBuf::from(l.split_once(": ").unwrap().1)
    };
    let run = RunConfig {
        model: ModelConfig::tiny(),
        epochs: 1,
        batch_size: 2,
        samples_per_epoch: 2,
        val_fraction: 0.0,
        pretrain_mode: InterferenceMode::S,
        ..RunConfig::default()
    };
    let config = dir.path().join("tiny.cfg");
    run.save(&config).unwrap();
    Toy { manifest: line("corpus manifest"), noise: line("noise bank"), config, dir }
}

#[test]
fn usage_errors_exit_1() {
    let o = mused(&["evaluate", "--ckpt", "missing.bin", "--corpus", "x.jsonl"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("missing.bin"));
    assert_eq!(code(&mused(&["frobnicate"])), 1);
    assert_eq!(code(&mused(&["pretrain", "--bogus"])), 1);
    assert_eq!(code(&mused(&["generate-mixtures", "--corpus", "c", "--out-dir", "o", "--mode", "XX"])), 1);
    assert_eq!(code(&mused(&["--help"])), 0);
}

#[test]
fn unwritable_output_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain");
    fs::write(&file, "x").unwrap();
    let o = mused(&["make-toy-data", "--out-dir", s(&file.join("sub")), "--num-clips", "1"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn toy_data_is_rerunnable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("a2"));
    for d in [&a, &b, &a] {
        assert_eq!(code(&mused(&["make-toy-data", "--out-dir", s(d), "--num-clips", "2"])), 0);
    }
    let read = |root: &Path| {
        let mut files: Vec<(PathBuf, Vec<u8>)> = walk(root)
            .into_iter()
            .map(|p| (p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()))
            .collect();
        files.sort();
        files
    };
    assert_eq!(read(&a), read(&b));
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn generate_mixtures_writes_index() {
    let t = toy();
    let out = t.dir.path().join("mix");
    let o = mused(&[
        "generate-mixtures",
        "--corpus",
        s(&t.manifest),
        "--noise-bank",
        s(&t.noise),
        "--out-dir",
        s(&out),
        "--mode",
        "SN",
        "--count",
        "3",
        "--duration",
        "1.0",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("index.jsonl")).unwrap().lines().count(), 3);
    let o = mused(&["generate-mixtures", "--corpus", s(&t.manifest), "--out-dir", s(&out), "--mode", "N"]);
    assert_eq!(code(&o), 1, "noise mode without a bank");
}

#[test]
fn pipeline_end_to_end() {
    let t = toy();
    let pre = t.dir.path().join("pre");
    let o = mused(&[
        "pretrain",
        "--config",
        s(&t.config),
        "--corpus",
        s(&t.manifest),
        "--out-dir",
        s(&pre),
        "--seed",
        "4",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(pre.join("best.ckpt").is_file());
    assert!(pre.join("run.cfg").is_file());
    let log = fs::read_to_string(pre.join("pretrain_log.jsonl")).unwrap();
    assert!(log.lines().any(|l| l.contains("\"epoch\"")));

    let fine = t.dir.path().join("fine");
    let o = mused(&[
        "finetune",
        "--config",
        s(&t.config),
        "--corpus",
        s(&t.manifest),
        "--noise-bank",
        s(&t.noise),
        "--ckpt",
        s(&pre.join("best.ckpt")),
        "--out-dir",
        s(&fine),
        "--no-augment",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = fine.join("best.ckpt");

    let report = t.dir.path().join("report");
    let o = mused(&["evaluate", "--ckpt", s(&ckpt), "--corpus", s(&t.manifest), "--out-dir", s(&report)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("map_pct"));
    assert!(report.join("report.jsonl").is_file());
    let o = mused(&["evaluate", "--ckpt", s(&pre.join("best.ckpt")), "--corpus", s(&t.manifest)]);
    assert_eq!(code(&o), 1);

    let m = CorpusManifest::load(&t.manifest).unwrap();
    let e = &m.entries[0];
    let o = mused(&[
        "predict",
        "--ckpt",
        s(&ckpt),
        "--audio",
        s(&m.resolve(&e.audio_path)),
        "--frames",
        s(&m.resolve(&e.frames_path)),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "frame_index,prob");
    assert_eq!(rows.len(), e.num_frames + 1);
    for (i, r) in rows[1..].iter().enumerate() {
        let (idx, p) = r.split_once(',').unwrap();
        assert_eq!(idx.parse::<usize>().unwrap(), i);
        assert!((0.0..=1.0).contains(&p.parse::<f64>().unwrap()));
    }
}

#[test]
fn bad_worker_count_is_a_usage_error() {
    let t = toy();
    let o = Command::new(env!("CARGO_BIN_EXE_mused"))
        .args([
            "pretrain",
            "--config",
            s(&t.config),
            "--corpus",
            s(&t.manifest),
            "--out-dir",
            s(t.dir.path()),
        ])
        .env("MUSED_NUM_WORKERS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("MUSED_NUM_WORKERS"));
}
