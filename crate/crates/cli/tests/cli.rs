use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use afm_core::checkpoint::load_checkpoint;
use afm_core::config::RunConfig;
use afm_core::signal::load_manifest;
use afm_core::train::CurvePoint;
use tempfile::TempDir;

const TINY: &str = "\
[signal]
windows_per_class = 40
stride = 48
max_offset = 96

[augment]
strong_zero_seg_len = 4
mild_zero_seg_len = 4

[encoder]
window_len = 48
d_model = 8
num_blocks = 1
num_heads = 2
proj_dim = 16

[contrastive]
support_capacity = 64

[al]
rounds = 2

[training]
batch_size = 16
pretrain_epochs = 2
head_epochs = 2
head_min_steps = 20
head_views = 2
head_hidden = 8

[eval]
fractions = 0.1, 0.2
";

struct Env {
    dir: TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("tiny.ini"), TINY).unwrap();
        Self { dir }
    }

    fn config(&self) -> PathBuf {
        self.dir.path().join("tiny.ini")
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn afm(&self, out: &str, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_afm"))
            .args(args)
            .arg("--config")
            .arg(self.config())
            .arg("--out")
            .arg(self.out(out))
            .env_remove("AFM_OUT_DIR")
            .output()
            .unwrap()
    }
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn print_config_round_trips() {
    let env = Env::new();
    let o = env.afm("o", &["print-config"]);
    ok(&o);
    let printed = String::from_utf8(o.stdout).unwrap();
    let parsed = RunConfig::parse(&printed).unwrap();
    assert_eq!(parsed.encoder.d_model, 8);
    assert_eq!(parsed.to_ini(), printed);
}

#[test]
fn synth_is_reproducible_and_loadable() {
    let env = Env::new();
    ok(&env.afm("a", &["synth", "--seed", "4"]));
    ok(&env.afm("b", &["synth", "--seed", "4"]));
    let manifest = env.out("a").join("data/manifest.tsv");
    let recordings = load_manifest(&manifest).unwrap();
    assert_eq!(recordings.len(), 4);
    for entry in fs::read_dir(env.out("a").join("data")).unwrap() {
        let path = entry.unwrap().path();
        let twin = env.out("b").join("data").join(path.file_name().unwrap());
        assert_eq!(read(&path), read(&twin), "{}", path.display());
    }

    ok(&env.afm("c", &["synth", "--classes", "2"]));
    let two = load_manifest(&env.out("c").join("data/manifest.tsv")).unwrap();
    let labels: std::collections::BTreeSet<Option<usize>> = two.iter().map(|r| r.class_label).collect();
    assert_eq!(labels.into_iter().collect::<Vec<_>>(), vec![Some(0), Some(1)]);
}

#[test]
fn pretrain_writes_checkpoint_and_losses() {
    let env = Env::new();
    ok(&env.afm("o", &["pretrain"]));
    let ckpt = load_checkpoint(&env.out("o").join("backbone.ckpt")).unwrap();
    assert_eq!(ckpt.losses("pretrain").len(), 2);
    let losses = fs::read_to_string(env.out("o").join("pretrain_losses.jsonl")).unwrap();
    assert_eq!(losses.lines().count(), 2);
}

fn curve(path: &Path) -> Vec<CurvePoint> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn al_train_curves_are_byte_identical_across_runs() {
    let env = Env::new();
    ok(&env.afm("a", &["al-train", "--seed", "2"]));
    ok(&env.afm("b", &["al-train", "--seed", "2"]));
    let name = "curve-al.jsonl";
    assert_eq!(read(&env.out("a").join(name)), read(&env.out("b").join(name)));
    let points = curve(&env.out("a").join(name));
    assert_eq!(points.len(), 3);
    let timing = fs::read_to_string(env.out("a").join("curve-al.timing")).unwrap();
    assert_eq!(timing.lines().count(), 3);

    ok(&env.afm("a", &["al-train", "--seed", "2", "--strategy", "random"]));
    let random = curve(&env.out("a").join("curve-random.jsonl"));
    assert_eq!(random[0], points[0]);
    let seed = points[0].oracle_count;
    let n = (points[0].labeled as f64 / points[0].label_fraction).round() as usize;
    let k = ((0.05 * n as f64).round() as usize).max(1);
    for (r, (a, b)) in points.iter().zip(&random).enumerate() {
        assert_eq!(a.oracle_count, seed + r * 2 * k);
        assert_eq!(b.oracle_count, seed + r * k);
        assert_eq!(a.labeled, b.labeled);
    }
}

#[test]
fn finetune_report_and_errors() {
    let env = Env::new();
    let o = env.afm("o", &["finetune", "--task", "nope", "--fraction", "0.1"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("detect") && err.contains("locate"), "{err}");

    ok(&env.afm("o", &["finetune", "--task", "detect", "--fraction", "0.1"]));
    ok(&env.afm("o", &["finetune", "--task", "detect", "--fraction", "0.1"]));
    let store = fs::read_to_string(env.out("o").join("results.jsonl")).unwrap();
    let accs: Vec<f64> = store
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["accuracy"].as_f64().unwrap())
        .collect();
    assert_eq!(accs.len(), 2);
    assert_eq!(accs[0].to_bits(), accs[1].to_bits());

    ok(&env.afm("o", &["eval", "--task", "locate"]));
    let o = env.afm("o", &["report", "--format", "csv"]);
    ok(&o);
    let csv = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "{csv}");
    assert!(lines[0].contains("10%") && lines[0].contains("20%"));
    assert!(lines[1].starts_with("detect") && lines[1].ends_with("—"));
}

#[test]
fn exit_codes() {
    let env = Env::new();
    assert_eq!(env.afm("o", &["no-such-command"]).status.code(), Some(1));
    assert_eq!(env.afm("o", &["al-train", "--strategy", "greedy"]).status.code(), Some(1));

    fs::write(env.out("bad.ini"), "[encoder]\nwidth = 3\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_afm"))
        .args(["print-config", "--config"])
        .arg(env.out("bad.ini"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));

    fs::write(env.out("missing.ini"), format!("{TINY}\n[signal]\nmanifest = /nonexistent/m.tsv\n")).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_afm"))
        .args(["pretrain", "--config"])
        .arg(env.out("missing.ini"))
        .arg("--out")
        .arg(env.out("m"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));

    assert_eq!(env.afm("empty", &["report"]).status.code(), Some(2));
}

#[test]
fn out_dir_env_overrides_flag() {
    let env = Env::new();
    let o = Command::new(env!("CARGO_BIN_EXE_afm"))
        .args(["synth", "--config"])
        .arg(env.config())
        .arg("--out")
        .arg(env.out("flag"))
        .env("AFM_OUT_DIR", env.out("from-env"))
        .output()
        .unwrap();
    ok(&o);
    assert!(env.out("from-env").join("data/manifest.tsv").exists());
    assert!(!env.out("flag").exists());
}
