use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use corrlab::config::RunConfig;
use corrlab::trainer::TrainConfig;

const SMALL: &[&str] = &[
    "--set",
    "synth.num_classes=2",
    "--set",
    "synth.images_per_class=6",
    "--set",
    "synth.val_per_class=2",
    "--set",
    "synth.test_per_class=2",
    "--set",
    "synth.width=40",
    "--set",
    "synth.height=40",
    "--set",
    "synth.object_half_size=14.0",
    "--set",
    "train.epochs_per_iteration=1",
    "--set",
    "train.steps_per_epoch=2",
    "--set",
    "train.num_iterations=1",
    "--set",
    "labeled_fraction=0.5",
];

fn corrlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_corrlab"))
        .args(args)
        .args(SMALL)
        .current_dir(dir)
        .env_remove("CORRLAB_DATA_ROOT")
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out
}

#[test]
fn benchmark_config_matches_the_benchmark_recipe() {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/benchmark.toml");
    let cfg = RunConfig::layered(Some(&p), &[]).unwrap();
    assert_eq!(cfg.train, TrainConfig { seed: 0, ..TrainConfig::benchmark() });
    assert_eq!(cfg.labeled_fraction, 0.2);
}

#[test]
fn synth_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = corrlab(tmp.path(), &["synth", "--data-root", "a", "--seed", "5"]);
    let b = corrlab(tmp.path(), &["synth", "--data-root", "b", "--seed", "5"]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let hash = |d: &str| std::fs::read_to_string(tmp.path().join(d).join("dataset.sha256")).unwrap();
    assert!(stdout(&b).contains(hash("a").trim()));
    assert_eq!(hash("a"), hash("b"));
    assert!(tmp.path().join("a/resolved_config.toml").exists());
    let c = corrlab(tmp.path(), &["synth", "--data-root", "c", "--seed", "6"]);
    assert_ne!(hash("a"), std::fs::read_to_string(tmp.path().join("c/dataset.sha256")).unwrap());
    assert!(c.status.success());
}

#[test]
fn corrupt_writes_every_variant_of_every_test_image() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(corrlab(tmp.path(), &["synth"]).status.success());
    let o = corrlab(tmp.path(), &["corrupt"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let root = tmp.path().join("runs/corrupted");
    let images = files_under(&root).into_iter().filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("png" | "jpg"))).count();
    assert_eq!(images, 4 * 15 * 5);
    assert!(root.join("manifest.json").exists());
    assert!(root.join("jpeg/3").read_dir().unwrap().all(|e| e.unwrap().path().extension().unwrap() == "jpg"));
}

#[test]
fn sweep_writes_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(corrlab(tmp.path(), &["synth"]).status.success());
    let o = corrlab(tmp.path(), &["sweep", "--param", "tau", "--values", "0.3,0.9"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("runs/sweep_tau/sweep_tau.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "tau,val_pck,test_pck");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0.3,") && lines[2].starts_with("0.9,"));
}

#[test]
fn train_eval_and_annotate_produce_their_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(corrlab(tmp.path(), &["synth"]).status.success());
    assert!(corrlab(tmp.path(), &["mine-pairs"]).status.success());
    assert!(tmp.path().join("runs/pairs/pair_counts.csv").exists());
    let t = corrlab(tmp.path(), &["train"]);
    assert!(t.status.success(), "{}", String::from_utf8_lossy(&t.stderr));
    assert!(tmp.path().join("runs/train/metrics.csv").exists());
    let e = corrlab(tmp.path(), &["eval", "--checkpoint", "runs/train/final.bin"]);
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    let report = std::fs::read_to_string(tmp.path().join("runs/eval/eval.csv")).unwrap();
    assert!(report.lines().count() > 1);
    let a = corrlab(tmp.path(), &["annotate", "--checkpoint", "runs/train/final.bin"]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert!(files_under(&tmp.path().join("runs/labels")).iter().any(|p| p.extension().is_some_and(|e| e == "plbl")));
}

#[test]
fn exit_codes_distinguish_usage_from_runtime_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| corrlab(tmp.path(), args).status.code();
    assert_eq!(Command::new(env!("CARGO_BIN_EXE_corrlab")).arg("--help").output().unwrap().status.code(), Some(0));
    assert_eq!(Command::new(env!("CARGO_BIN_EXE_corrlab")).arg("frobnicate").output().unwrap().status.code(), Some(2));
    assert_eq!(code(&["synth", "--set", "train.bogus=1"]), Some(2));
    assert_eq!(code(&["synth", "--set", "train.tau=3"]), Some(2));
    assert_eq!(code(&["eval", "--checkpoint", "missing.bin"]), Some(1));
}
