use std::path::{Path, PathBuf};
use std::process::Command;

use digitwin_cli::config::{resolve, Config};
use digitwin_cli::manifest::RunManifest;
use digitwin_cli::run;
use proptest::prelude::*;

fn argv<S: AsRef<str>>(args: &[S], out: &Path) -> Vec<String> {
    let mut v = vec!["digitwin".to_string()];
    v.extend(args.iter().map(|s| s.as_ref().to_string()));
    v.push("--out".into());
    v.push(out.display().to_string());
    v
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("cfg.toml");
    std::fs::write(&path, text).unwrap();
    path
}

/// Small enough that every command finishes in seconds.
const SMALL: &[&str] = &[
    "--set",
    "data.frames=40",
    "--set",
    "data.probe_per_subset=3",
    "--set",
    "vit.train.batch_size=4",
    "--set",
    "vit.train.epochs=1",
];

fn small(args: &[&str]) -> Vec<String> {
    args.iter().chain(SMALL).map(|s| s.to_string()).collect()
}

#[test]
fn defaults_then_file_then_overrides() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(resolve(None, &[]).unwrap(), Config::default());
    let file = write_config(
        dir.path(),
        "seed = 5\n[vit.train]\nepochs = 3\n[data]\nframes = 100\n",
    );
    let from_file = resolve(Some(&file), &[]).unwrap();
    assert_eq!((from_file.seed, from_file.vit.train.epochs, from_file.data.frames), (5, 3, 100));
    assert_eq!(from_file.vit.train.lr, Config::default().vit.train.lr);
    let overridden = resolve(Some(&file), &["seed=9".into(), "vit.train.lr=0.01".into()]).unwrap();
    assert_eq!(overridden.seed, 9);
    assert_eq!(overridden.vit.train.lr, 0.01);
    assert_eq!(overridden.vit.train.epochs, 3);
    assert_eq!(overridden.data.frames, 100);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn later_layers_win(file_seed in proptest::option::of(0u64..1000), cli_seed in proptest::option::of(0u64..1000)) {
        let dir = tempfile::tempdir().unwrap();
        let text = file_seed.map(|s| format!("seed = {s}\n")).unwrap_or_default();
        let file = write_config(dir.path(), &text);
        let overrides: Vec<String> = cli_seed.map(|s| format!("seed={s}")).into_iter().collect();
        let cfg = resolve(Some(&file), &overrides).unwrap();
        let want = cli_seed.or(file_seed).unwrap_or(Config::default().seed);
        prop_assert_eq!(cfg.seed, want);
    }
}

#[test]
fn resolved_config_round_trips_through_toml() {
    let cfg = resolve(None, &["data.condition=3".into(), "probe.mode=\"train1\"".into()]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let file = write_config(dir.path(), &cfg.to_toml());
    assert_eq!(resolve(Some(&file), &[]).unwrap(), cfg);
}

#[test]
fn unknown_and_invalid_keys_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    let file = write_config(dir.path(), "[vit]\nbogus = 1\n[data]\nnope = 2\n");
    let err = resolve(Some(&file), &[]).unwrap_err();
    assert_eq!(err.keys, vec!["data.nope".to_string(), "vit.bogus".to_string()]);

    let err = resolve(None, &["data.condition=9".into(), "heatmap.frames_per_viewpoint=0".into()]).unwrap_err();
    assert_eq!(err.keys, vec!["data.condition", "heatmap.frames_per_viewpoint"]);

    let err = resolve(None, &["seed=\"seven\"".into()]).unwrap_err();
    assert!(!err.keys.is_empty(), "{err}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(run(argv(&["frobnicate"], &out)), 2);
    assert_eq!(run(argv(&["generate-data", "--bogus"], &out)), 2);
    assert_eq!(run(argv(&["train"], &out)), 2);
    assert_eq!(run(argv(&["train", "--model", "resnet"], &out)), 2);
    assert_eq!(run(argv(&["generate-data", "--set", "vit.nope=1"], &out)), 3);
    assert_eq!(run(argv(&["generate-data", "--condition", "7"], &out)), 3);
    assert_eq!(run(argv(&["generate-data", "--set", "seed"], &out)), 3);
    // Validation failures happen before anything is written.
    assert!(!out.exists());
    assert_eq!(run(["digitwin", "--help"]), 0);
}

#[test]
fn generate_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["generate-data", "--condition", "1", "--frames", "1", "--seed", "7"];
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run(argv(&args, &a)), 0);
    assert_eq!(run(argv(&args, &b)), 0);
    let (ma, mb) = (RunManifest::read(&a).unwrap(), RunManifest::read(&b).unwrap());
    assert!(!ma.artifacts.is_empty());
    assert_eq!(ma.artifacts, mb.artifacts);
    assert_eq!(ma.seed, 7);
    assert_eq!(ma.config.data.frames, 1);
    assert_eq!(ma.status, "ok");
    assert!(ma.threads >= 1);
}

#[test]
fn artifacts_are_reproducible_from_the_manifest_alone() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    assert_eq!(
        run(argv(&["generate-data", "--frames", "5", "--seed", "3", "--probe", "--set", "data.probe_per_subset=1"], &first)),
        0
    );
    let m = RunManifest::read(&first).unwrap();
    let file = write_config(dir.path(), &m.config.to_toml());
    let again = dir.path().join("again");
    let cfg = file.display().to_string();
    assert_eq!(run(argv(&["generate-data", "--probe", "--config", &cfg], &again)), 0);
    assert_eq!(RunManifest::read(&again).unwrap().artifacts, m.artifacts);
    assert_eq!(m.artifacts.iter().filter(|a| a.path.starts_with("probe/")).count() % 24, 0);
}

#[test]
fn outputs_are_never_overwritten_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let args = ["generate-data", "--frames", "1"];
    assert_eq!(run(argv(&args, &out)), 0);
    let before = std::fs::read(out.join("run.toml")).unwrap();
    assert_eq!(run(argv(&["generate-data", "--frames", "2"], &out)), 1);
    assert_eq!(std::fs::read(out.join("run.toml")).unwrap(), before);
    let mut forced = argv(&["generate-data", "--frames", "2"], &out);
    forced.push("--force".into());
    assert_eq!(run(forced), 0);
    assert_eq!(RunManifest::read(&out).unwrap().config.data.frames, 2);
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_digitwin"))
        .args(["generate-data", "--frames", "1"])
        .env(digitwin_cli::OUT_ENV, dir.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(dir.path().join("generate-data").join("run.toml").exists());
    let status = Command::new(env!("CARGO_BIN_EXE_digitwin"))
        .args(["generate-data", "--condition", "0"])
        .env(digitwin_cli::OUT_ENV, dir.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn zero_epoch_training_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("train");
    assert_eq!(
        run(argv(&small(&["train", "--model", "vit-cot", "--epochs", "0"]), &out)),
        0
    );
    let init = std::fs::read(out.join("init.ckpt")).unwrap();
    assert_eq!(std::fs::read(out.join("final.ckpt")).unwrap(), init);
    let m = RunManifest::read(&out).unwrap();
    assert_eq!(m.artifact("init.ckpt").unwrap().sha256, m.artifact("final.ckpt").unwrap().sha256);
    assert_eq!(m.config.vit.train.epochs, 0);
}

#[test]
fn evaluation_commands_run_on_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train");
    assert_eq!(run(argv(&small(&["train", "--model", "vit-cot"]), &train)), 0);
    let ckpt = train.join("final.ckpt").display().to_string();

    let probe = dir.path().join("probe");
    assert_eq!(
        run(argv(&small(&["probe", "--checkpoint", &ckpt, "--mode", "train1"]), &probe)),
        0
    );
    let report = std::fs::read_to_string(probe.join("probe.toml")).unwrap();
    assert!(report.contains("mode = \"train1\""), "{report}");
    let m = RunManifest::read(&probe).unwrap();
    assert_eq!(m.inputs.len(), 1);
    assert_eq!(
        m.inputs[0].sha256,
        RunManifest::read(&train).unwrap().artifact("final.ckpt").unwrap().sha256
    );

    let heat = dir.path().join("heat");
    assert_eq!(run(argv(&small(&["heatmap", "--checkpoint", &ckpt]), &heat)), 0);
    let index = std::fs::read_to_string(heat.join("heatmaps/index.csv")).unwrap();
    // 24 subsets x 2 frames x 1 head, plus the header.
    assert_eq!(index.lines().count(), 49);

    let emb = dir.path().join("emb");
    assert_eq!(run(argv(&small(&["export-embeddings", "--checkpoint", &ckpt]), &emb)), 0);
    let pca = std::fs::read_to_string(emb.join("pca.csv")).unwrap();
    assert_eq!(pca.lines().count(), 1 + 24 * 3);

    let afc = dir.path().join("afc");
    let mut args = small(&["eval-2afc", "--checkpoint", &ckpt]);
    args.extend(["--set", "twoafc.decoder.epochs=1", "--set", "twoafc.trials.trials_per_viewpoint=2"].map(String::from));
    assert_eq!(run(argv(&args, &afc)), 0);
    assert_eq!(std::fs::read_to_string(afc.join("trials.csv")).unwrap().lines().count(), 1 + 24);

    // A checkpoint is tied to its architecture and kind.
    let other = dir.path().join("other");
    let mut args = small(&["probe", "--checkpoint", &ckpt]);
    args.extend(["--set", "vit.projection_dim=32"].map(String::from));
    assert_eq!(run(argv(&args, &other)), 1);
    let mismatch = dir.path().join("mismatch");
    assert_eq!(run(argv(&small(&["probe", "--checkpoint", &ckpt, "--model", "cnn"]), &mismatch)), 2);
    // Every run leaves a manifest, failed ones included.
    assert!(RunManifest::read(&other).unwrap().status.starts_with("error"));
}

#[test]
fn heatmaps_need_a_transformer() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("heat");
    assert_eq!(run(argv(&small(&["heatmap", "--model", "cnn"]), &out)), 1);
}

#[test]
fn sweep_reports_every_size() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let mut args = small(&["sweep"]);
    args.extend(["--set", "sweep.sizes=[0, 20, 40]"].map(String::from));
    assert_eq!(run(argv(&args, &out)), 0);
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let frames: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(frames, ["0", "20", "40"]);
}

#[test]
fn smoke_reproduce_prints_the_full_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("repro");
    let code = run(argv(&["reproduce", "--scale", "smoke"], &out));
    let report = std::fs::read_to_string(out.join("report.txt")).unwrap();
    let lines: Vec<&str> = report.lines().filter(|l| l.starts_with("criterion")).collect();
    assert_eq!(lines.len(), 10, "{report}");
    for (i, l) in lines.iter().enumerate() {
        assert!(l.starts_with(&format!("criterion {:>2} ", i + 1)), "{l}");
        assert!(l.contains(" PASS ") || l.contains(" FAIL "), "{l}");
    }
    // Scale-independent criteria hold even at smoke sizes.
    for id in [1, 2, 3, 9] {
        assert!(lines[id - 1].contains(" PASS "), "{}", lines[id - 1]);
    }
    let failed = lines.iter().any(|l| l.contains(" FAIL "));
    assert_eq!(code, if failed { 1 } else { 0 });
    let m = RunManifest::read(&out).unwrap();
    assert!(m.artifact("report.txt").is_some());
}
