use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = "\
seed = 3
world.image_captions = 40
world.parallel_pairs = 60
world.target_captions = 30
world.eval_scenes = 4
world.image_feature = 8
world.min_freq = 1
model.width = 8
model.attention = 8
pretrain.batch = 8
pretrain.epochs = 2
joint.batch = 8
joint.epochs = 2
decode.pivot_beam = 2
decode.target_beam = 2
";

struct Project {
    dir: TempDir,
}

impl Project {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("pivotcap.conf"), config).unwrap();
        Project { dir }
    }

    fn tiny() -> Self {
        Project::new(TINY)
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_pivotcap"))
            .current_dir(self.dir.path())
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn pretrained(&self) {
        self.ok(&["gen-data"]);
        for which in ["captioner", "translator", "autoencoder"] {
            self.ok(&["pretrain", "--which", which]);
        }
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Every file under `root` except wall-clock timings, by relative path.
fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else if path.file_name().unwrap() != "timing.txt" {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn gen_data_twice_gives_identical_files() {
    let p = Project::tiny();
    p.ok(&["gen-data"]);
    let first = snapshot(&p.path("out"));
    p.ok(&["gen-data"]);
    assert_eq!(snapshot(&p.path("out")), first);
    for name in ["images.feat", "images.feat.index", "parallel.src", "parallel.tgt", "eval.ref4", "config.resolved"] {
        assert!(first.contains_key(&format!("data/{name}")), "missing {name}");
    }
}

#[test]
fn pipeline_runs_end_to_end() {
    let p = Project::tiny();
    p.pretrained();
    p.ok(&["joint-train", "--variant", "lower-bound"]);
    let full = p.ok(&["joint-train"]);
    assert!(full.starts_with("full: best epoch"), "{full}");

    let log = fs::read_to_string(p.path("out/joint-full/train.log")).unwrap();
    assert!(log.lines().next().unwrap().contains("\"record\":\"header\""));
    assert!(log.contains("\"record\":\"joint_step\"") && log.contains("\"record\":\"joint_epoch\""));
    let hash = fs::read_to_string(p.path("out/joint-full/config.resolved")).unwrap();
    assert!(hash.contains("joint.lambda = 1.0"), "defaults are written out");

    let report = p.ok(&[
        "evaluate",
        "--ckpt",
        "out/joint-lower-bound/model.ckpt",
        "out/joint-full/model.ckpt",
    ]);
    let rows: Vec<&str> = report.lines().collect();
    assert_eq!(rows.len(), 3, "{report}");
    assert!(rows[0].contains("B@4") && rows[0].contains("CIDEr"));
    assert!(rows[1].starts_with("joint-lower-bound") && rows[2].starts_with("joint-full"));
    assert_eq!(fs::read_to_string(p.path("out/evaluate/report.txt")).unwrap(), report);

    let one = p.ok(&["caption", "--ckpt", "out/joint-full/model.ckpt", "--feature-index", "1"]);
    let all = p.ok(&["caption", "--ckpt", "out/joint-full/model.ckpt", "--all"]);
    assert_eq!(all.lines().count(), 4);
    assert_eq!(all.lines().nth(1).unwrap(), one.trim_end_matches('\n'));
    assert!(one.starts_with("1\t"));
}

#[test]
fn reruns_reproduce_every_file() {
    let a = Project::tiny();
    let b = Project::tiny();
    for p in [&a, &b] {
        p.pretrained();
        p.ok(&["joint-train", "--variant", "pivot-only"]);
        p.ok(&["evaluate", "--ckpt", "out/joint-pivot-only/model.ckpt"]);
    }
    let (sa, sb) = (snapshot(&a.path("out")), snapshot(&b.path("out")));
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (k, v) in &sa {
        assert!(sb[k] == *v, "{k} differs between runs");
    }
}

#[test]
fn resumed_joint_training_matches_an_uninterrupted_run() {
    let whole = Project::tiny();
    whole.pretrained();
    whole.ok(&["joint-train"]);

    let split = Project::tiny();
    split.pretrained();
    let paused = split.ok(&["joint-train", "--max-steps", "7"]);
    assert!(paused.contains("paused at step 7"), "{paused}");
    assert!(!split.path("out/joint-full/model.ckpt").exists());
    split.ok(&["joint-train", "--resume", "--max-steps", "3"]);
    split.ok(&["joint-train", "--resume"]);

    for file in ["model.ckpt", "model.ckpt.bin", "state.ckpt", "state.ckpt.bin", "train.log"] {
        let rel = format!("out/joint-full/{file}");
        assert!(
            fs::read(whole.path(&rel)).unwrap() == fs::read(split.path(&rel)).unwrap(),
            "{file} differs"
        );
    }
}

#[test]
fn usage_errors_exit_with_one() {
    let p = Project::tiny();
    for args in [
        &["caption", "--ckpt", "x.ckpt"][..],
        &["caption", "--ckpt", "x.ckpt", "--all", "--feature-index", "0"],
        &["pretrain"],
        &["pretrain", "--which", "painter"],
        &["joint-train", "--variant", "half"],
        &["evaluate"],
        &["no-such-command"],
    ] {
        let out = p.run(args);
        assert_eq!(code(&out), 1, "{args:?}: {}", stderr(&out));
    }
    let out = p.run(&["--config", "missing.conf", "gen-data"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("missing.conf"), "{}", stderr(&out));
    assert_eq!(code(&p.run(&["--help"])), 0);
}

#[test]
fn unknown_or_malformed_config_keys_are_usage_errors() {
    let p = Project::new("seed = 1\nmodel.depth = 4\n");
    let out = p.run(&["gen-data"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("model.depth"), "{}", stderr(&out));

    let p = Project::new("joint.lambda = -1\n");
    let out = p.run(&["gen-data"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("joint.lambda"), "{}", stderr(&out));
}

#[test]
fn runtime_failures_exit_with_two_and_name_the_path() {
    let p = Project::tiny();
    let out = p.run(&["pretrain", "--which", "captioner"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("config.resolved"), "{}", stderr(&out));

    p.pretrained();
    p.ok(&["joint-train", "--variant", "lower-bound"]);
    let out = p.run(&["evaluate", "--ckpt", "out/nowhere/model.ckpt"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("out/nowhere/model.ckpt"), "{}", stderr(&out));

    let out = p.run(&["caption", "--ckpt", "out/joint-lower-bound/model.ckpt", "--feature-index", "99"]);
    assert_eq!(code(&out), 2);

    // Flip one payload byte: the manifest digest no longer matches.
    let bin = p.path("out/joint-lower-bound/model.ckpt.bin");
    let mut bytes = fs::read(&bin).unwrap();
    bytes[10] ^= 1;
    fs::write(&bin, bytes).unwrap();
    let out = p.run(&["evaluate", "--ckpt", "out/joint-lower-bound/model.ckpt"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("model.ckpt"), "{}", stderr(&out));
}

#[test]
fn artifacts_from_another_config_are_rejected() {
    let p = Project::tiny();
    p.pretrained();
    fs::write(p.path("pivotcap.conf"), format!("{TINY}joint.lambda = 0.5\n")).unwrap();
    let out = p.run(&["joint-train"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("config.resolved"), "{}", stderr(&out));
}

#[test]
fn a_held_lock_blocks_a_second_writer() {
    let p = Project::tiny();
    fs::create_dir_all(p.path("out/data")).unwrap();
    fs::write(p.path("out/data/.lock"), "").unwrap();
    let out = p.run(&["gen-data"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains(".lock"), "{}", stderr(&out));
    fs::remove_file(p.path("out/data/.lock")).unwrap();
    p.ok(&["gen-data"]);
    assert!(!p.path("out/data/.lock").exists(), "released on exit");
}

#[test]
fn gradcheck_passes_and_reports_every_suite() {
    let p = Project::tiny();
    let report = p.ok(&["gradcheck"]);
    let suites: Vec<&str> = report.lines().skip(1).collect();
    assert!(suites.len() >= 5, "{report}");
    assert!(suites.iter().all(|l| l.ends_with("ok")), "{report}");
}

#[test]
fn keys_lists_every_default() {
    let p = Project::tiny();
    let keys = p.ok(&["keys"]);
    for k in ["joint.lambda = 1.0", "pretrain.lr = 4e-4", "decode.pivot_beam = 5", "decode.target_beam = 10"] {
        assert!(keys.contains(k), "{k}");
    }
}
