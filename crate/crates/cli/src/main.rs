//! Command-line driver for the distillation pipeline.
//!
//! Exit codes: 0 success, 2 configuration error (also clap usage errors),
//! 3 I/O error, 4 non-finite training abort, 5 checkpoint/architecture
//! mismatch, 6 gradient-check failure.

mod config;

use clap::{Parser, Subcommand};
use mdistill_core::autodiff::{primitive_suite, ParamStore};
use mdistill_core::data::{generate, load_manifest, save_manifest, Protocol};
use mdistill_core::net::{EncoderConfig, LevelConfig, Model};
use mdistill_core::train::{
    evaluate_voting, fit, metrics_to_csv, perturbation_sweep, pipeline_grad_check, sweep_to_csv,
    DistillMode, TrainConfig, TrainError,
};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

#[derive(Parser)]
#[command(
    name = "mdistill",
    version,
    about = "Rotation-robust point cloud classification via teacher-student distillation",
    after_help = schema_help_static()
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

fn schema_help_static() -> &'static str {
    static HELP: OnceLock<String> = OnceLock::new();
    HELP.get_or_init(config::schema_help)
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic labeled dataset (train + test manifests).
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a generated dataset and write checkpoint + metrics CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Student-only arm (no teacher, no alignment).
        #[arg(long, conflicts_with_all = ["augment", "naive_align"])]
        no_distill: bool,
        /// Train-time random-rotation augmentation baseline.
        #[arg(long, conflicts_with = "naive_align")]
        augment: bool,
        /// Direct feature L2 alignment (no attention maps, no NMI).
        #[arg(long)]
        naive_align: bool,
    },
    /// Evaluate a checkpoint (student branch, fused heads, logit voting).
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Max rotation angle applied to the test set (0 = clean).
        #[arg(long, default_value_t = 0.0)]
        rotate: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Config of the checkpointed run; defaults to `config.resolved`
        /// next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Per-class CSV output path.
        #[arg(long, default_value = "per_class.csv")]
        out: PathBuf,
    },
    /// Accuracy across a corruption severity grid; writes the sweep CSV.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// rotation | noise | outlier.
        #[arg(long)]
        protocol: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference verification of every autodiff primitive.
    Gradcheck {
        /// Also check the end-to-end tiny-config training loss.
        #[arg(long)]
        full: bool,
    },
}

enum CliError {
    Config(String),
    Io(String),
    NonFinite(String),
    Checkpoint(String),
    GradFail(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::NonFinite(_) => 4,
            CliError::Checkpoint(_) => 5,
            CliError::GradFail(_) => 6,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m)
            | CliError::Io(m)
            | CliError::NonFinite(m)
            | CliError::Checkpoint(m)
            | CliError::GradFail(m) => m,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite(m) => CliError::NonFinite(format!("non-finite abort: {m}")),
            TrainError::Data(d) => CliError::from(d),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<mdistill_core::data::DataError> for CliError {
    fn from(e: mdistill_core::data::DataError) -> Self {
        match e {
            mdistill_core::data::DataError::BadSpec(m) => CliError::Config(m),
            other => CliError::Io(other.to_string()),
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn load_config(path: &Path) -> Result<config::Config, CliError> {
    config::load(path).map_err(CliError::Config)
}

fn load_dataset(dir: &Path) -> Result<(Vec<mdistill_core::PointCloud>, Vec<mdistill_core::PointCloud>), CliError> {
    let train = load_manifest(&dir.join("train_manifest.txt"))?;
    let test = load_manifest(&dir.join("test_manifest.txt"))?;
    Ok((train, test))
}

fn load_model(
    ckpt: &Path,
    config_path: Option<&Path>,
) -> Result<(Model, config::Config), CliError> {
    let resolved = config_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).join("config.resolved"));
    let cfg = load_config(&resolved)?;
    let params = ParamStore::load_checkpoint(ckpt)
        .map_err(|e| CliError::Checkpoint(format!("{}: {e}", ckpt.display())))?;
    let with_teacher = cfg.train.mode != DistillMode::NoDistill;
    let with_heads = cfg.train.mode == DistillMode::Full;
    let n_classes = cfg.data.classes.len();
    let model = Model::from_params(cfg.enc.clone(), n_classes, with_teacher, with_heads, params)
        .map_err(|e| CliError::Checkpoint(e.to_string()))?;
    Ok((model, cfg))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::GenData { config, out } => {
            let cfg = load_config(&config)?;
            let (train, test) = generate(&cfg.data)?;
            std::fs::create_dir_all(&out)
                .map_err(|e| CliError::Io(format!("cannot create {}: {e}", out.display())))?;
            save_manifest(&train, &out, "train")?;
            save_manifest(&test, &out, "test")?;
            write_file(&out.join("config.resolved"), &config::to_resolved_string(&cfg))?;
            println!(
                "wrote {} train / {} test clouds ({} classes, {} points each) to {}",
                train.len(),
                test.len(),
                cfg.data.classes.len(),
                cfg.data.points_per_cloud,
                out.display()
            );
            Ok(())
        }
        Cmd::Train {
            config,
            data,
            out,
            no_distill,
            augment,
            naive_align,
        } => {
            let mut cfg = load_config(&config)?;
            if no_distill {
                cfg.train.mode = DistillMode::NoDistill;
            } else if naive_align {
                cfg.train.mode = DistillMode::NaiveAlign;
            }
            cfg.train.augment = augment;
            let (train, test) = load_dataset(&data)?;
            let n_classes = cfg.data.classes.len();
            eprintln!(
                "training {} arm: {} clouds, {} epochs, batch {}",
                config::mode_name(cfg.train.mode),
                train.len(),
                cfg.train.epochs,
                cfg.train.batch_size
            );
            let started = std::time::Instant::now();
            let (model, metrics) = fit(&train, &test, cfg.enc.clone(), n_classes, &cfg.train)?;
            eprintln!(
                "trained in {:.1}s; final student accuracy {:.4}",
                started.elapsed().as_secs_f64(),
                metrics.last().map(|m| m.acc_student).unwrap_or(0.0)
            );
            std::fs::create_dir_all(&out)
                .map_err(|e| CliError::Io(format!("cannot create {}: {e}", out.display())))?;
            model
                .params
                .save_checkpoint(&out.join("checkpoint.ckpt"))
                .map_err(|e| CliError::Io(e.to_string()))?;
            write_file(&out.join("metrics.csv"), &metrics_to_csv(&metrics))?;
            write_file(&out.join("config.resolved"), &config::to_resolved_string(&cfg))?;
            println!("checkpoint + metrics written to {}", out.display());
            Ok(())
        }
        Cmd::Eval {
            ckpt,
            data,
            rotate,
            seed,
            config,
            out,
        } => {
            let (model, cfg) = load_model(&ckpt, config.as_deref())?;
            let (_, test) = load_dataset(&data)?;
            let test = if rotate > 0.0 {
                mdistill_core::data::CorruptedView::new(&test, Protocol::Rotation, rotate, seed)
                    .materialize()?
            } else {
                test
            };
            let result = evaluate_voting(&model, &test, cfg.train.vote_count, seed)?;
            println!(
                "accuracy {:.4} over {} clouds (rotate <= {rotate} deg, {} votes)",
                result.accuracy,
                result.n,
                cfg.train.vote_count
            );
            let mut csv = String::from("class,correct,total,accuracy\n");
            for (class, correct, total) in &result.per_class {
                let _ = writeln!(
                    csv,
                    "{class},{correct},{total},{:.8e}",
                    *correct as f64 / *total as f64
                );
            }
            write_file(&out, &csv)?;
            Ok(())
        }
        Cmd::Sweep {
            ckpt,
            data,
            protocol,
            out,
            seed,
            config,
        } => {
            let proto = Protocol::parse(&protocol)
                .ok_or_else(|| CliError::Config(format!("unknown protocol {protocol:?}")))?;
            let (model, cfg) = load_model(&ckpt, config.as_deref())?;
            let (_, test) = load_dataset(&data)?;
            let grid = proto.default_grid();
            let rows =
                perturbation_sweep(&model, &test, proto, &grid, cfg.train.vote_count, seed)?;
            for row in &rows {
                println!("{} level {:.3}: accuracy {:.4}", proto.name(), row.level, row.accuracy);
            }
            write_file(&out, &sweep_to_csv(&rows))?;
            Ok(())
        }
        Cmd::Gradcheck { full } => {
            let mut failures = Vec::new();
            let reports = primitive_suite(20, 777)
                .map_err(|e| CliError::GradFail(format!("suite failed to run: {e}")))?;
            for (name, report) in &reports {
                let ok = report.max_rel_err < 1e-4;
                println!(
                    "{} {name}: max rel err {:.3e} over {} components",
                    if ok { "ok  " } else { "FAIL" },
                    report.max_rel_err,
                    report.components
                );
                if !ok {
                    failures.push(name.to_string());
                }
            }
            if full {
                let (max_rel, components) = tiny_pipeline_check()?;
                let ok = max_rel < 1e-4;
                println!(
                    "{} end-to-end tiny config: max rel err {max_rel:.3e} over {components} parameter components",
                    if ok { "ok  " } else { "FAIL" }
                );
                if !ok {
                    failures.push("end-to-end".to_string());
                }
            }
            if failures.is_empty() {
                Ok(())
            } else {
                Err(CliError::GradFail(format!(
                    "gradient check failed for: {}",
                    failures.join(", ")
                )))
            }
        }
    }
}

/// The end-to-end check: 2 clouds, k = 4, centers (16, 8), channels (8, 16).
fn tiny_pipeline_check() -> Result<(f64, usize), CliError> {
    let spec = mdistill_core::data::SyntheticSpec {
        classes: vec![
            mdistill_core::data::ShapeClass::Sphere,
            mdistill_core::data::ShapeClass::Cube,
        ],
        points_per_cloud: 32,
        train_per_class: 1,
        test_per_class: 1,
        seed: 5,
        ..mdistill_core::data::SyntheticSpec::default()
    };
    let (train, _) = generate(&spec).map_err(CliError::from)?;
    let enc = EncoderConfig {
        levels: vec![
            LevelConfig {
                centers: 16,
                k: 4,
                radii: vec![0.5],
                channels: vec![8, 8],
            },
            LevelConfig {
                centers: 8,
                k: 4,
                radii: vec![0.9],
                channels: vec![16, 16],
            },
        ],
        rank_fraction: 0.25,
    };
    let cfg = TrainConfig {
        sample_m: 3,
        nmi_bins: 8,
        nmi_bandwidth: 1.0,
        mode: DistillMode::Full,
        ..TrainConfig::default()
    };
    pipeline_grad_check(&train, &enc, 2, &cfg, 1e-5).map_err(CliError::from)
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e.message());
            std::process::exit(e.exit_code());
        }
    }
}
