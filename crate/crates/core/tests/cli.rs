//! End-to-end command tests on a tiny configuration.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use panotok::cli::{run, Manifest};
use panotok::error::Error;

struct Env {
    dir: tempfile::TempDir,
    config: PathBuf,
}

const TINY: &str = r#"
rows = 3
cols = 4
patch = 4
vocab = 256
tile = 2
train_count = 24
test_count = 24
layers = 1
heads = 2
model_dim = 16
sem_dim = 8
batch_size = 4
steps = 6
warmup = 2
decode_steps = 2
count = 3
"#;

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("run.toml");
        let p = |s: &str| dir.path().join(s).display().to_string();
        let text = format!(
            "{TINY}data_dir = {:?}\ncheckpoint = {:?}\ntrace = {:?}\nout_dir = {:?}\n",
            p("data"),
            p("model.ckpt"),
            p("trace.jsonl"),
            p("out")
        );
        fs::write(&config, text).unwrap();
        Self { dir, config }
    }

    fn path(&self, s: &str) -> PathBuf {
        self.dir.path().join(s)
    }

    fn run(&self, cmd: &str, extra: &[&str]) -> Result<(), Error> {
        let mut args = vec!["panotok".to_string(), cmd.to_string(), "--config".into(), self.config.display().to_string()];
        args.extend(extra.iter().map(|s| s.to_string()));
        run(args)
    }

    fn ok(&self, cmd: &str, extra: &[&str]) {
        self.run(cmd, extra).unwrap_or_else(|e| panic!("{cmd} {extra:?}: {e}"));
    }

    fn trained() -> Self {
        let env = Self::new();
        env.ok("synth-data", &[]);
        env.ok("train", &[]);
        env
    }
}

/// Every file under `dir`, relative path to contents.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_data_is_reproducible_and_matches_manifest() {
    let a = Env::new();
    let b = Env::new();
    a.ok("synth-data", &[]);
    b.ok("synth-data", &[]);
    let sa = snapshot(&a.path("data"));
    assert_eq!(sa, snapshot(&b.path("data")));
    let m: Manifest = serde_json::from_slice(&fs::read(a.path("data/manifest.json")).unwrap()).unwrap();
    assert_eq!(m.train.len(), 24);
    assert_eq!(m.test.len(), 24);
    assert_eq!(fs::read_dir(a.path("data/train")).unwrap().count(), 24);
    a.ok("synth-data", &[]);
    assert_eq!(sa, snapshot(&a.path("data")));
}

#[test]
fn corrupted_grid_header_is_rejected() {
    let env = Env::new();
    env.ok("synth-data", &[]);
    let p = env.path("data/train/000003.htg");
    let mut bytes = fs::read(&p).unwrap();
    bytes[0] = b'X';
    fs::write(&p, bytes).unwrap();
    let e = env.run("train", &[]).unwrap_err();
    assert!(matches!(e, Error::BadHeader { format: "HTG1", .. }), "{e}");
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let whole = Env::new();
    whole.ok("synth-data", &[]);
    whole.ok("train", &[]);

    let split = Env::new();
    split.ok("synth-data", &[]);
    split.ok("train", &["--stop-after", "3"]);
    let partial = fs::read_to_string(split.path("trace.jsonl")).unwrap();
    assert_eq!(partial.lines().count(), 3);
    split.ok("train", &["--resume"]);

    assert_eq!(fs::read(whole.path("model.ckpt")).unwrap(), fs::read(split.path("model.ckpt")).unwrap());
    let trace = fs::read_to_string(whole.path("trace.jsonl")).unwrap();
    assert_eq!(trace, fs::read_to_string(split.path("trace.jsonl")).unwrap());
    for line in trace.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["loss"].as_f64().unwrap().is_finite());
    }
}

#[test]
fn mismatched_vocab_is_rejected() {
    let env = Env::trained();
    let e = env.run("generate", &["--set", "vocab=128"]).unwrap_err();
    assert!(matches!(e, Error::CheckpointMismatch(_)), "{e}");
    assert_eq!(e.exit_code(), 1);
    let e = env.run("train", &["--resume", "--set", "model_dim=32"]).unwrap_err();
    assert!(matches!(e, Error::CheckpointMismatch(_)), "{e}");
}

#[test]
fn spm_needs_a_two_pass_checkpoint() {
    let env = Env::new();
    env.ok("synth-data", &[]);
    env.ok("train", &["--set", "sc=false"]);
    let e = env.run("generate", &["--regime", "spm"]).unwrap_err();
    assert_eq!(e.exit_code(), 1, "{e}");
    env.ok("generate", &["--regime", "lpm"]);
}

#[test]
fn generate_writes_reproducible_artifacts() {
    let env = Env::trained();
    env.ok("generate", &[]);
    let first = snapshot(&env.path("out"));
    env.ok("generate", &[]);
    assert_eq!(first, snapshot(&env.path("out")));

    let names: BTreeSet<String> = first.iter().map(|(p, _)| p.display().to_string()).collect();
    for i in 0..3 {
        assert!(names.contains(&format!("{i:06}.htg")));
        assert!(names.contains(&format!("{i:06}.pgm")));
    }
    let pgm = fs::read(env.path("out/000000.pgm")).unwrap();
    // 3*4 rows and 4*4 cols of tokens, 2 px per token.
    assert!(pgm.starts_with(b"P5\n32 24\n255\n"));

    let runs = fs::read_to_string(env.path("out/runs.jsonl")).unwrap();
    assert_eq!(runs.lines().count(), 3);
    for line in runs.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["regime"], "spm");
        assert_eq!(v["forward_passes_per_patch"], 4);
        assert_eq!(v["forward_passes"], 4 * 12);
        assert!(v.get("wall_seconds").is_none());
    }

    env.ok("generate", &["--semantic-from", env.path("data/test/000001.htg").to_str().unwrap(), "--out", env.path("guided").to_str().unwrap()]);
    let g1 = snapshot(&env.path("guided"));
    env.ok("generate", &["--semantic-from", env.path("data/test/000001.htg").to_str().unwrap(), "--out", env.path("guided").to_str().unwrap()]);
    assert_eq!(g1, snapshot(&env.path("guided")));
    assert_eq!(g1.len(), first.len());
}

#[test]
fn extrapolate_reports_metrics_only_with_truth() {
    let env = Env::trained();
    let input = env.path("data/test/000002.htg");
    let input = input.to_str().unwrap();

    env.ok("extrapolate", &["--input", input, "--observed-cols", "4"]);
    assert_eq!(fs::read(env.path("out/extrapolated.htg")).unwrap(), fs::read(input).unwrap());

    env.ok("extrapolate", &["--input", input, "--truth", input]);
    let first = snapshot(&env.path("out"));
    let half: serde_json::Value = serde_json::from_slice(&fs::read(env.path("out/extrapolate.json")).unwrap()).unwrap();
    assert_eq!(half["observed_cols"], 2);
    assert_eq!(half["patches_decoded"], 6);
    assert!(half["ssim"].is_f64());
    assert!(half["psnr"].is_number() || half["psnr"] == "identical");
    env.ok("extrapolate", &["--input", input, "--truth", input]);
    assert_eq!(first, snapshot(&env.path("out")));

    env.ok("extrapolate", &["--input", input]);
    let bare: serde_json::Value = serde_json::from_slice(&fs::read(env.path("out/extrapolate.json")).unwrap()).unwrap();
    assert!(bare.get("ssim").is_none());
    assert!(bare.get("psnr").is_none());

    // An image input goes through the codebook first.
    let pgm = env.path("out/extrapolated.pgm");
    let pgm = pgm.to_str().unwrap();
    env.ok("extrapolate", &["--input", pgm, "--observed-cols", "4", "--out", env.path("img").to_str().unwrap()]);
    assert_eq!(fs::read(env.path("img/extrapolated.pgm")).unwrap(), fs::read(pgm).unwrap());
}

#[test]
fn eval_of_a_set_against_itself() {
    let env = Env::new();
    env.ok("synth-data", &[]);
    let test = env.path("data/test");
    let test = test.to_str().unwrap();
    let report = env.path("report.json");
    env.ok("eval", &["--real", test, "--fake", test, "--report", report.to_str().unwrap()]);
    let raw = fs::read(&report).unwrap();
    let v: serde_json::Value = serde_json::from_slice(&raw).unwrap();
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
    let mut want = vec!["fid", "sfid_top", "sfid_middle", "sfid_bottom", "sfid_mean", "lrcs", "ssim", "psnr"];
    want.sort();
    let mut got = keys.clone();
    got.sort();
    assert_eq!(got, want);
    assert!(v["fid"].as_f64().unwrap() <= 1e-6);
    assert_eq!(v["lrcs"].as_f64().unwrap(), 0.0);
    assert_eq!(v["psnr"], "identical");

    env.ok("eval", &["--real", test, "--fake", test, "--report", report.to_str().unwrap()]);
    assert_eq!(raw, fs::read(&report).unwrap());
}

#[test]
fn eval_rejects_sets_smaller_than_feature_dim() {
    let env = Env::new();
    env.ok("synth-data", &["--set", "test_count=5"]);
    let test = env.path("data/test");
    let e = env
        .run("eval", &["--real", test.to_str().unwrap(), "--fake", test.to_str().unwrap()])
        .unwrap_err();
    assert!(matches!(e, Error::TooFewSamples { needed: 9, got: 5 }), "{e}");
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn usage_errors_exit_with_one() {
    let env = Env::new();
    assert_eq!(env.run("train", &["--set", "no_such_key=1"]).unwrap_err().exit_code(), 1);
    assert_eq!(run(["panotok", "frobnicate"]).unwrap_err().exit_code(), 1);
    assert_eq!(env.run("eval", &[]).unwrap_err().exit_code(), 1);
}
