use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use autoalign::ablate::{ablate, Axis};
use autoalign::cafa::FusionStrategy;
use autoalign::diagnostics::dump_align_map;
use autoalign::gradcheck::{run_all, run_module};
use autoalign::model::{Model, Prepared, RunConfig};
use autoalign::scene::{generate_dataset, load_manifest, load_scene, SceneConfig};
use autoalign::scfi::ScfiVariant;
use autoalign::train::{evaluate, load_checkpoint, load_dataset, save_checkpoint, train_model};
use autoalign::{AlignError, Result};
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

/// Camera/LiDAR fusion experiments on synthetic scenes.
#[derive(Parser)]
#[command(name = "autoalign", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags that override fields of a run config file.
#[derive(clap::Args, Clone, Default)]
struct Overrides {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_3d: Option<f64>,
    #[arg(long)]
    lr_2d: Option<f64>,
    #[arg(long, value_parser = parse_enum::<FusionStrategy>)]
    fusion: Option<FusionStrategy>,
    #[arg(long, value_parser = parse_enum::<ScfiVariant>)]
    scfi: Option<ScfiVariant>,
    #[arg(long)]
    joint_2d: Option<bool>,
    #[arg(long)]
    n_pairs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenes: usize,
        #[arg(long)]
        seed: u64,
        /// Scenes in the training split (default: three quarters).
        #[arg(long)]
        train: Option<usize>,
        /// Scene generator config (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a checkpoint on a dataset's eval split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every row of an ablation axis for several seeds.
    Ablate {
        #[arg(long, value_parser = parse_enum::<Axis>)]
        axis: Axis,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long)]
        module: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write attention heatmaps for voxels of one scene.
    DumpAlignMap {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scene directory name inside the dataset, or a path to a scene.
        #[arg(long)]
        scene: String,
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory (default: the checkpoint's dataset).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        voxels: Option<Vec<usize>>,
        #[arg(long, default_value_t = 2)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Enum flags use the same snake_case names as config files.
fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(Value::String(s.into())).map_err(|_| format!("invalid value {s:?}"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read(path).map_err(|e| AlignError::io(path, e))?;
    serde_json::from_slice(&text).map_err(|e| AlignError::Parse {
        file: path.display().to_string(),
        field: "<root>".into(),
        msg: e.to_string(),
    })
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| AlignError::io(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").map_err(|e| AlignError::io(path, e))
}

fn versions() -> Value {
    json!({ "autoalign": env!("CARGO_PKG_VERSION"), "format": "AATN" })
}

fn write_run(out: &Path, command: &str, config: Value, seed: Option<u64>) -> Result<()> {
    write_json(
        &out.join("run.json"),
        &json!({ "command": command, "config": config, "seed": seed, "versions": versions() }),
    )
}

fn run_config(path: Option<&Path>, o: &Overrides) -> Result<RunConfig> {
    let mut cfg: RunConfig = match path {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &o.dataset {
        cfg.dataset = v.clone();
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.steps {
        cfg.steps = v;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = o.lr_3d {
        cfg.optim_3d.lr = v;
    }
    if let Some(v) = o.lr_2d {
        cfg.optim_2d.lr = v;
    }
    if let Some(v) = o.fusion {
        cfg.fusion = v;
    }
    if let Some(v) = o.scfi {
        cfg.scfi = v;
    }
    if let Some(v) = o.joint_2d {
        cfg.joint_2d = v;
    }
    if let Some(v) = o.n_pairs {
        cfg.n_pairs = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::GenData {
            out,
            scenes,
            seed,
            train,
            config,
        } => {
            let cfg: SceneConfig = match &config {
                Some(p) => read_json(p)?,
                None => SceneConfig::default(),
            };
            let n_train = train.unwrap_or(scenes * 3 / 4);
            let m = generate_dataset(&out, scenes, n_train, seed, &cfg)?;
            write_run(&out, "gen-data", serde_json::to_value(&cfg)?, Some(seed))?;
            println!("{}", json!({ "scenes": scenes, "train": m.train.len(), "eval": m.eval.len(), "config_hash": m.config_hash }));
            Ok(true)
        }
        Command::Train { config, out, overrides } => {
            let cfg = run_config(config.as_deref(), &overrides)?;
            write_run(&out, "train", serde_json::to_value(&cfg)?, Some(cfg.seed))?;
            let mut model = Model::new(cfg.clone())?;
            let (tr, ev) = load_dataset(&cfg.dataset, &cfg)?;
            let report = train_model(&mut model, &tr, &ev)?;
            save_checkpoint(&model, &out.join("checkpoint"))?;
            write_json(&out.join("report.json"), &serde_json::to_value(&report)?)?;
            write_json(&out.join("metrics.json"), &serde_json::to_value(&report.metrics)?)?;
            let last = report.losses.last().map(|l| l.total);
            println!("{}", json!({ "final_loss": last, "metrics": report.metrics, "wall_time_s": report.wall_time_s }));
            Ok(true)
        }
        Command::Eval { checkpoint, data, out } => {
            let model = load_checkpoint(&checkpoint)?;
            let (_, ev) = load_dataset(&data, &model.cfg)?;
            let metrics = evaluate(&model, &ev)?;
            if let Some(out) = out {
                write_run(&out, "eval", serde_json::to_value(&model.cfg)?, Some(model.cfg.seed))?;
                write_json(&out.join("metrics.json"), &serde_json::to_value(&metrics)?)?;
            }
            println!("{}", serde_json::to_string(&metrics)?);
            Ok(true)
        }
        Command::Ablate {
            axis,
            config,
            out,
            seeds,
            overrides,
        } => {
            let cfg = run_config(config.as_deref(), &overrides)?;
            write_run(&out, "ablate", serde_json::to_value(&cfg)?, None)?;
            let (tr, ev) = load_dataset(&cfg.dataset, &cfg)?;
            let table = ablate(&cfg, axis, &seeds, &tr, &ev, Some(&out))?;
            print!("{}", autoalign::ablate::render_table(&table));
            Ok(true)
        }
        Command::Gradcheck { module, out } => {
            let results = match &module {
                Some(m) => run_module(m)?,
                None => run_all()?,
            };
            let mut ok = true;
            for r in &results {
                ok &= r.max_rel_error < 1e-4;
                println!(
                    "{:<26} max_rel_error {:.3e}  ({} entries, tolerance {:.0e}: {})",
                    r.name,
                    r.max_rel_error,
                    r.entries,
                    r.tolerance,
                    if r.passed() { "ok" } else { "FAIL" }
                );
            }
            if let Some(out) = out {
                write_run(&out, "gradcheck", json!({ "module": module }), None)?;
                write_json(&out.join("gradcheck.json"), &serde_json::to_value(&results)?)?;
            }
            Ok(ok)
        }
        Command::DumpAlignMap {
            checkpoint,
            scene,
            out,
            data,
            voxels,
            count,
            seed,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let dir = data.unwrap_or_else(|| model.cfg.dataset.clone());
            let path = if Path::new(&scene).join("scene.json").exists() {
                PathBuf::from(&scene)
            } else {
                let manifest = load_manifest(&dir)?;
                let name = match scene.parse::<usize>() {
                    Ok(i) => format!("scene_{i:05}"),
                    Err(_) => scene.clone(),
                };
                if !manifest.train.contains(&name) && !manifest.eval.contains(&name) {
                    return Err(AlignError::Config(format!("scene {scene:?} is not in {}", dir.display())));
                }
                dir.join(name)
            };
            let s = Prepared::new(load_scene(&path)?, &model.cfg.model.voxel);
            write_run(&out, "dump-align-map", serde_json::to_value(&model.cfg)?, Some(seed))?;
            let dump = dump_align_map(&model, &s, &out, voxels.as_deref(), count, seed)?;
            println!("{}", serde_json::to_string(&dump)?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
