use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use modnet::data::{build_rotated_envs, Interpolation, MnistSet, Split};
use modnet::nn::{init_parameters, ModelConfig};
use modnet::subnet::{export_subnetwork, load_subnetwork, ArtifactMeta};

fn modnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_modnet"))
        .args(args)
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SYNTHETIC: &str = r#"
[model]
hidden = [16]

[data]
dataset = "synthetic"
synthetic_train = 400
synthetic_test = 200

[train]
steps = 60
lr = 0.01
eval_interval = 20
"#;

/// Trains the small synthetic model into `dir` and returns the artifact path.
fn train_synthetic(dir: &Path, extra: &[&str]) -> PathBuf {
    let cfg = dir.join("synthetic.toml");
    std::fs::write(&cfg, SYNTHETIC).unwrap();
    let out = dir.join("run");
    let mut args = vec!["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = modnet(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    out.join("model.subnet.json")
}

fn mnist_root() -> PathBuf {
    std::env::var_os("MODNET_DATA_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

#[test]
fn train_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let artifact = train_synthetic(dir.path(), &["--set", "reg.alpha=1e-5"]);
    let run = artifact.parent().unwrap();
    for f in ["metrics.csv", "model.subnet.json", "resolved.cfg"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("step,risk,irm,l2,s1,s2,temperature,acc_train,acc_test,density_fc1,density_fc2\n"));
    assert_eq!(csv.lines().count(), 1 + 4);
    let resolved = std::fs::read_to_string(run.join("resolved.cfg")).unwrap();
    assert!(resolved.contains("alpha = 0.00001"), "{resolved}");
    let art = load_subnetwork(&artifact).unwrap();
    assert_eq!(art.meta.seed, Some(0));
    assert_eq!(art.meta.config_hash.as_deref(), Some(modnet::subnet::sha256_hex(&resolved).as_str()));
    assert!(art.meta.final_metrics.contains_key("acc_test"));
}

#[test]
fn training_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let snapshot = |p: &Path| {
        let run = p.parent().unwrap();
        ["model.subnet.json", "metrics.csv", "resolved.cfg"].map(|f| std::fs::read(run.join(f)).unwrap())
    };
    let first = snapshot(&train_synthetic(dir.path(), &[]));
    let second = snapshot(&train_synthetic(dir.path(), &[]));
    assert_eq!(first, second);
}

#[test]
fn sweep_trains_one_run_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("synthetic.toml");
    std::fs::write(&cfg, SYNTHETIC).unwrap();
    let out = dir.path().join("sweep");
    let o = modnet(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "train.steps=5",
        "--sweep",
        "reg.beta=0,1e-3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for (sub, echoed) in [("reg.beta=0", "beta = 0.0\n"), ("reg.beta=1e-3", "beta = 0.001")] {
        let resolved = std::fs::read_to_string(out.join(sub).join("resolved.cfg")).unwrap();
        assert!(resolved.contains(echoed), "{resolved}");
        assert!(out.join(sub).join("model.subnet.json").is_file());
    }
}

#[test]
fn last_seed_override_wins() {
    let dir = tempfile::tempdir().unwrap();
    let artifact = train_synthetic(dir.path(), &["--set", "seed=3", "--set", "seed=7"]);
    let resolved = std::fs::read_to_string(artifact.parent().unwrap().join("resolved.cfg")).unwrap();
    assert!(resolved.contains("seed = 7"), "{resolved}");
}

#[test]
fn missing_data_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no-such-mnist");
    let o = modnet(&[
        "train",
        "--data-root",
        missing.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(missing.to_str().unwrap()), "{}", stderr(&o));
}

#[test]
fn invalid_config_names_the_key() {
    let o = modnet(&["train", "--set", "train.stepz=3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.stepz"), "{}", stderr(&o));
    let o = modnet(&["train", "--set", "reg.alpha=-1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("alpha"), "{}", stderr(&o));
}

#[test]
fn eval_is_deterministic_and_csv_has_header() {
    let dir = tempfile::tempdir().unwrap();
    let artifact = train_synthetic(dir.path(), &[]);
    let cfg = dir.path().join("synthetic.toml");
    let args = ["eval", artifact.to_str().unwrap(), "--config", cfg.to_str().unwrap()];
    let first = modnet(&args);
    let second = modnet(&args);
    assert!(first.status.success(), "{}", stderr(&first));
    assert_eq!(first.stdout, second.stdout);
    let mut csv_args = args.to_vec();
    csv_args.push("--csv");
    let csv = stdout(&modnet(&csv_args));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "env_id,accuracy");
    assert_eq!(lines.len(), 3);
    // Matches the accuracy the trainer logged on the same environment.
    let art = load_subnetwork(&artifact).unwrap();
    let logged = art.meta.final_metrics["acc_test"];
    let printed: f64 = lines[2].strip_prefix("test,").unwrap().parse().unwrap();
    assert_eq!(printed, logged);
}

#[test]
fn eval_rejects_corrupt_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"format_version\": 1").unwrap();
    let o = modnet(&["eval", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn analyze_summarizes_every_layer() {
    let dir = tempfile::tempdir().unwrap();
    let artifact = train_synthetic(dir.path(), &["--set", "reg.beta=0.05", "--set", "train.mask_lr=0.05"]);
    let o = modnet(&["analyze", artifact.to_str().unwrap()]);
    assert!(o.status.success());
    let text = stdout(&o);
    let report = load_subnetwork(&artifact).unwrap().analyze();
    let density_lines: Vec<&str> = text.lines().filter(|l| l.starts_with("layer ")).collect();
    assert_eq!(density_lines.len(), report.layers.len());
    for (line, layer) in density_lines.iter().zip(&report.layers) {
        let pruned = format!("pruned features {}/{}", layer.pruned_features.len(), layer.reuse_counts.len());
        assert!(line.contains(&pruned), "{line} vs {pruned}");
    }
}

#[test]
fn analyze_writes_dot_or_refuses_oversized_graphs() {
    let dir = tempfile::tempdir().unwrap();
    let artifact = train_synthetic(dir.path(), &[]);
    let dot = dir.path().join("g.gv");
    let o = modnet(&["analyze", artifact.to_str().unwrap(), "--dot", dot.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&dot).unwrap();
    let art = load_subnetwork(&artifact).unwrap();
    let alive: usize = art.layers.iter().map(|l| l.mask.iter().map(|&b| b as usize).sum::<usize>()).sum();
    assert_eq!(text.matches(" -> ").count(), alive);

    let o = modnet(&["analyze", artifact.to_str().unwrap(), "--dot", dot.to_str().unwrap(), "--max-units", "10"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("10"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_by_default() {
    let o = modnet(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    let last = text.lines().last().unwrap();
    assert!(last.starts_with("PASS"), "{last}");
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).count(), 1);
}

#[test]
fn gradcheck_catches_injected_s2_fault() {
    let o = modnet(&["gradcheck", "--inject-fault", "s2"]);
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    let last = text.lines().last().unwrap();
    assert!(last.starts_with("FAIL") && last.contains("S2"), "{last}");
}

#[test]
fn data_build_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("envs");
    let o = modnet(&[
        "data-build",
        "--set",
        "data.dataset=\"synthetic\"",
        "--set",
        "data.synthetic_train=50",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let envs = manifest["environments"].as_array().unwrap();
    assert_eq!(envs.len(), 2);
    assert_eq!(envs[0]["env_id"], "train");
    assert_eq!(envs[0]["count"], 50);
    let counts: u64 = envs[0]["label_counts"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(counts, 50);
}

#[test]
fn data_build_previews_mnist_environments() {
    let root = mnist_root();
    if MnistSet::load(&root, Split::Train).is_err() {
        eprintln!("skipping: no MNIST under {}", root.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("envs");
    let o = modnet(&[
        "data-build",
        "--data-root",
        root.to_str().unwrap(),
        "--set",
        "data.dataset=\"rmnist\"",
        "--set",
        "data.per_env_count=20",
        "--preview",
        "9",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ppm = std::fs::read(out.join("rot30.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n84 84\n255\n"));
    assert_eq!(ppm.len(), "P6\n84 84\n255\n".len() + 84 * 84 * 3);
}

#[test]
fn constant_predictor_scores_class_frequency_on_rotated_mnist() {
    let root = mnist_root();
    let Ok(train) = MnistSet::load(&root, Split::Train) else {
        eprintln!("skipping: no MNIST under {}", root.display());
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let mut model = init_parameters(&ModelConfig::mlp(&[1, 28, 28], &[8], 10), 0).unwrap();
    for layer in &mut model.layers {
        layer.param_mut().mask_logits = layer.param().mask_logits.map(|_| -1.0);
    }
    // Every mask is off, so the output is the last bias: always class 3.
    *model.layers[1].bias_mut() = modnet::tensor::Tensor::from_fn(&[10], |i| if i == 3 { 1.0 } else { 0.0 });
    let artifact = dir.path().join("const.subnet.json");
    export_subnetwork(&model, ArtifactMeta::default(), &artifact).unwrap();
    let o = modnet(&[
        "eval",
        artifact.to_str().unwrap(),
        "--data-root",
        root.to_str().unwrap(),
        "--set",
        "data.dataset=\"rmnist\"",
        "--csv",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let envs = build_rotated_envs(&train, &[0.0, 15.0, 30.0, 45.0, 60.0, 75.0], 0.0, 1000, Interpolation::Bilinear, 0).unwrap();
    for (line, env) in stdout(&o).lines().skip(1).zip(&envs) {
        let (id, acc) = line.split_once(',').unwrap();
        assert_eq!(id, env.env_id);
        let acc: f64 = acc.parse().unwrap();
        let freq = env.labels.iter().filter(|&&y| y == 3).count() as f64 / env.len() as f64;
        assert_eq!(acc, freq);
        // Balanced digits: about one in ten, within four binomial standard errors.
        assert!((acc - 0.1).abs() < 4.0 * (0.09f64 / 1000.0).sqrt(), "{id}: {acc}");
    }
}
