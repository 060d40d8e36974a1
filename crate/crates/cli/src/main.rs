//! `modnet`: train, evaluate, analyze and inspect masked modular networks.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use modnet::config::TrainConfig;
use modnet::data::{Dataset, Environment};
use modnet::error::Error;
use modnet::gradcheck::{run_suite, Fault, SuiteOptions};
use modnet::subnet::{export_subnetwork, load_subnetwork, sha256_hex, ArtifactMeta, DEFAULT_MAX_UNITS};
use modnet::trainer::{argmax_rows, train_with_observer, write_metrics_csv, MetricsRow};

#[derive(Parser, Debug)]
#[command(name = "modnet", version, about = "Masked modular networks for out-of-distribution generalization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct ConfigArgs {
    /// TOML configuration file; every key has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `section.key=value` override, applied after the file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Directory with the MNIST IDX files (same as `--set data.root=...`).
    #[arg(long)]
    data_root: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write metrics.csv, model.subnet.json and resolved.cfg.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (same as `--set output.dir=...`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// `section.key=v1,v2,...`: one run per value, each in a
        /// `key=value` subdirectory of the output directory.
        #[arg(long, value_name = "KEY=V1,V2,...")]
        sweep: Option<String>,
    },
    /// Accuracy of an exported subnetwork on every environment.
    Eval {
        artifact: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Print `env_id,accuracy` CSV instead of a table.
        #[arg(long)]
        csv: bool,
    },
    /// Density, reuse and overlap summary of an exported subnetwork.
    Analyze {
        artifact: PathBuf,
        /// Also write the pruned connectivity graph in DOT format.
        #[arg(long)]
        dot: Option<PathBuf>,
        /// Refuse DOT output for networks with more units than this.
        #[arg(long, default_value_t = DEFAULT_MAX_UNITS)]
        max_units: usize,
    },
    /// Finite-difference checks of every gradient path.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Deliberately break one backward pass (test hook).
        #[arg(long, value_enum)]
        inject_fault: Option<FaultArg>,
    },
    /// Build the configured environments and write a manifest plus previews.
    DataBuild {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "data/envs")]
        out: PathBuf,
        /// Images per preview grid.
        #[arg(long, default_value_t = 64)]
        preview: usize,
    },
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum FaultArg {
    /// Negate the gradient of the reuse penalty S2.
    S2,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { cfg, out, sweep: None } => cmd_train(&cfg, out),
        Command::Train {
            cfg,
            out,
            sweep: Some(sweep),
        } => cmd_sweep(&cfg, out, &sweep),
        Command::Eval { artifact, cfg, csv } => cmd_eval(&artifact, &cfg, csv),
        Command::Analyze { artifact, dot, max_units } => cmd_analyze(&artifact, dot.as_deref(), max_units),
        Command::Gradcheck {
            eps,
            tol,
            seed,
            inject_fault,
        } => cmd_gradcheck(eps, tol, seed, inject_fault),
        Command::DataBuild { cfg, out, preview } => cmd_data_build(&cfg, &out, preview),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Data(_) | Error::Io { .. } | Error::Format(_) => 2,
        Error::ResourceLimit(_) => 3,
        Error::Dimension { .. } | Error::Contract(_) | Error::NonFiniteGradient { .. } => 1,
    }
}

fn resolve(args: &ConfigArgs, leading: &[String], trailing: &[String]) -> Result<TrainConfig, Error> {
    let text = match &args.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut overrides = leading.to_vec();
    if let Some(root) = &args.data_root {
        overrides.push(format!("data.root={}", toml_string(&root.to_string_lossy())));
    }
    overrides.extend(args.sets.iter().cloned());
    overrides.extend(trailing.iter().cloned());
    TrainConfig::from_toml_with_overrides(&text, &overrides)
}

fn toml_string(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

fn build_envs(cfg: &TrainConfig) -> Result<Vec<Environment>, Error> {
    cfg.data.build(cfg.train.seed)
}

fn cmd_train(args: &ConfigArgs, out: Option<PathBuf>) -> Result<u8, Error> {
    let trailing: Vec<String> = out
        .map(|o| format!("output.dir={}", toml_string(&o.to_string_lossy())))
        .into_iter()
        .collect();
    let cfg = resolve(args, &[], &trailing)?;
    let resolved = cfg.to_toml();
    let dir = &cfg.output.dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create output dir {}: {e}", dir.display())))?;
    write_file(&dir.join("resolved.cfg"), &resolved)?;

    let envs = build_envs(&cfg)?;
    let outcome = train_with_observer(&cfg, &envs, |row| println!("{}", progress_line(row)))?;
    write_metrics_csv(&dir.join("metrics.csv"), &outcome.metrics)?;
    let meta = ArtifactMeta {
        seed: Some(cfg.train.seed),
        config_hash: Some(sha256_hex(&resolved)),
        final_metrics: final_metrics(outcome.final_row()),
    };
    export_subnetwork(&outcome.model, meta, &dir.join("model.subnet.json"))?;
    println!("wrote metrics.csv, model.subnet.json and resolved.cfg to {}", dir.display());
    Ok(0)
}

fn cmd_sweep(args: &ConfigArgs, out: Option<PathBuf>, sweep: &str) -> Result<u8, Error> {
    let (key, values) = sweep
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("sweep `{sweep}` is not of the form key=v1,v2,...")))?;
    let base = match out {
        Some(o) => o,
        None => resolve(args, &[], &[])?.output.dir,
    };
    for value in values.split(',').map(str::trim).filter(|v| !v.is_empty()) {
        let dir = base.join(format!("{key}={value}"));
        println!("== {key} = {value}");
        let mut run = ConfigArgs {
            config: args.config.clone(),
            sets: args.sets.clone(),
            data_root: args.data_root.clone(),
        };
        run.sets.push(format!("{key}={value}"));
        cmd_train(&run, Some(dir))?;
    }
    Ok(0)
}

fn progress_line(row: &MetricsRow) -> String {
    let mut s = format!(
        "step {:>6}  risk {:.4}  irm {:.3e}  s1 {:.3e}  s2 {:.3e}  tau {:.3}",
        row.step, row.risk, row.irm, row.s1, row.s2, row.temperature
    );
    for (env, acc) in &row.accuracies {
        write!(s, "  {env} {acc:.4}").unwrap();
    }
    let mean = row.densities.iter().map(|(_, d)| d).sum::<f64>() / row.densities.len().max(1) as f64;
    write!(s, "  density {mean:.4}").unwrap();
    s
}

fn final_metrics(row: &MetricsRow) -> std::collections::BTreeMap<String, f64> {
    let mut m = std::collections::BTreeMap::new();
    for (k, v) in [("risk", row.risk), ("irm", row.irm), ("l2", row.l2), ("s1", row.s1), ("s2", row.s2)] {
        m.insert(k.to_string(), v);
    }
    for (env, acc) in &row.accuracies {
        m.insert(format!("acc_{env}"), *acc);
    }
    for (layer, d) in &row.densities {
        m.insert(format!("density_{layer}"), *d);
    }
    m
}

fn cmd_eval(artifact: &Path, args: &ConfigArgs, csv: bool) -> Result<u8, Error> {
    let art = load_subnetwork(artifact)?;
    // Without a config file, rebuild the environments from the training seed.
    let leading: Vec<String> = match (&args.config, art.meta.seed) {
        (None, Some(seed)) => vec![format!("train.seed={seed}")],
        _ => Vec::new(),
    };
    let cfg = resolve(args, &leading, &[])?;
    let (shape, classes) = cfg.data.input_signature();
    if shape != art.arch.input_shape || classes != art.arch.num_classes {
        return Err(Error::Config(format!(
            "artifact expects inputs {:?} with {} classes, dataset gives {:?} with {}",
            art.arch.input_shape, art.arch.num_classes, shape, classes
        )));
    }
    let envs = build_envs(&cfg)?;
    let mut out = String::new();
    if csv {
        out.push_str("env_id,accuracy\n");
    } else {
        writeln!(out, "{:<16} {:>8}", "env_id", "accuracy").unwrap();
    }
    for env in &envs {
        let logits = art.predict_logits(&env.inputs, cfg.train.eval_batch_size)?;
        let pred = argmax_rows(&logits);
        let correct = pred.iter().zip(&env.labels).filter(|(p, y)| p == y).count();
        let acc = correct as f64 / env.len().max(1) as f64;
        if csv {
            writeln!(out, "{},{acc}", env.env_id).unwrap();
        } else {
            writeln!(out, "{:<16} {acc:>8.4}", env.env_id).unwrap();
        }
    }
    print!("{out}");
    Ok(0)
}

fn cmd_analyze(artifact: &Path, dot: Option<&Path>, max_units: usize) -> Result<u8, Error> {
    let art = load_subnetwork(artifact)?;
    print!("{}", art.analyze().summary());
    if let Some(path) = dot {
        let text = art.dot_export(max_units)?;
        write_file(path, &text)?;
        println!("wrote {}", path.display());
    }
    Ok(0)
}

fn cmd_gradcheck(eps: f64, tol: f64, seed: u64, fault: Option<FaultArg>) -> Result<u8, Error> {
    let opts = SuiteOptions {
        eps,
        tolerance: tol,
        seed,
        fault: fault.map(|FaultArg::S2| Fault::S2SignFlip),
    };
    let results = run_suite(&opts)?;
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &results {
        let status = if r.passed { "ok" } else { "FAILED" };
        println!("{:<width$}  max rel err {:.3e}  {status}", r.name, r.max_error);
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("PASS: {} checks below {tol:e}", results.len());
        Ok(0)
    } else {
        println!("FAIL: {}", failed.join(", "));
        Ok(1)
    }
}

fn cmd_data_build(args: &ConfigArgs, out: &Path, preview: usize) -> Result<u8, Error> {
    let cfg = resolve(args, &[], &[])?;
    let envs = build_envs(&cfg)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Config(format!("cannot create {}: {e}", out.display())))?;
    let (shape, classes) = cfg.data.input_signature();
    let mut entries = Vec::new();
    for env in &envs {
        let mut label_counts = vec![0usize; classes];
        for &y in &env.labels {
            label_counts[y] += 1;
        }
        let preview_file = if cfg.data.dataset != Dataset::Synthetic && preview > 0 {
            let name = format!("{}.ppm", env.env_id);
            write_bytes(&out.join(&name), &preview_ppm(env, &shape, preview))?;
            Some(name)
        } else {
            None
        };
        entries.push(serde_json::json!({
            "env_id": env.env_id,
            "role": env.role,
            "count": env.len(),
            "input_shape": shape,
            "label_counts": label_counts,
            "provenance": env.provenance,
            "preview": preview_file,
        }));
    }
    let manifest = serde_json::json!({
        "dataset": cfg.data.dataset,
        "seed": cfg.train.seed,
        "environments": entries,
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_file(&out.join("manifest.json"), &text)?;
    for env in &envs {
        println!("{:<16} {:>6} examples", env.env_id, env.len());
    }
    println!("wrote manifest.json to {}", out.display());
    Ok(0)
}

/// Square grid of the first `count` images as binary PPM. Two-channel
/// (colored) inputs map to red and green; one channel is gray.
fn preview_ppm(env: &Environment, shape: &[usize], count: usize) -> Vec<u8> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let n = count.min(env.len()).max(1);
    let side = (n as f64).sqrt().ceil() as usize;
    let (width, height) = (side * w, n.div_ceil(side) * h);
    let mut px = vec![0u8; width * height * 3];
    let data = env.inputs.data();
    for i in 0..n.min(env.len()) {
        let (gy, gx) = (i / side, i % side);
        let img = &data[i * c * h * w..(i + 1) * c * h * w];
        for y in 0..h {
            for x in 0..w {
                let at = |ch: usize| (img[ch * h * w + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
                let rgb = if c == 1 { [at(0); 3] } else { [at(0), at(1), 0] };
                let o = ((gy * h + y) * width + gx * w + x) * 3;
                px[o..o + 3].copy_from_slice(&rgb);
            }
        }
    }
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    bytes.extend(px);
    bytes
}

fn write_file(path: &Path, text: &str) -> Result<(), Error> {
    write_bytes(path, text.as_bytes())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    std::fs::write(path, bytes).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}
